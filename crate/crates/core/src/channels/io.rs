use std::fs;
use std::path::Path;

use num_complex::Complex32;
use serde::{Deserialize, Serialize};

use super::config::TaskConfig;
use super::dataset::ChannelDataset;
use crate::container;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"FDDC";
pub const DATASET_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TaskConfig,
    samples: usize,
}

pub fn encode_dataset(ds: &ChannelDataset) -> Result<Vec<u8>> {
    let header = serde_json::to_string(&Header {
        config: ds.config().clone(),
        samples: ds.len(),
    })?;
    let payload: Vec<f32> = ds.raw().iter().flat_map(|z| [z.re, z.im]).collect();
    Ok(container::encode(DATASET_MAGIC, DATASET_VERSION, &header, &payload))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<ChannelDataset> {
    let decoded = container::decode(bytes, DATASET_MAGIC, DATASET_VERSION)?;
    let header: Header = serde_json::from_str(&decoded.header)?;
    let n = header.samples * header.config.n_users * header.config.n_tx;
    let payload = decoded.payload(2 * n)?;
    let data = payload.chunks_exact(2).map(|c| Complex32::new(c[0], c[1])).collect();
    let ds = ChannelDataset::new(header.config, data)?;
    if ds.len() != header.samples {
        return Err(Error::Header("sample count disagrees with payload".into()));
    }
    Ok(ds)
}

pub fn save_dataset(ds: &ChannelDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ChannelDataset> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::config::Fraction;
    use crate::channels::generate::gen_geometric;

    #[test]
    fn save_load_round_trip() {
        let cfg = TaskConfig::new("rt", 4, 2, Fraction::ONE, Fraction::ONE, 10.0);
        let ds = gen_geometric(&cfg, 7, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.fddc");
        save_dataset(&ds, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), ds);
    }

    #[test]
    fn corrupted_and_truncated_files() {
        let cfg = TaskConfig::new("c", 2, 1, Fraction::ONE, Fraction::ONE, 10.0);
        let ds = crate::channels::generate::gen_rayleigh(&cfg, 5, 1).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_dataset(&bad), Err(Error::VersionMismatch { .. })));
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(decode_dataset(cut), Err(Error::Truncated { .. })));
        let mut flip = bytes.clone();
        let n = flip.len();
        flip[n - 8] ^= 0x40;
        assert!(matches!(decode_dataset(&flip), Err(Error::Checksum { .. })));
    }
}
