//! Versioned binary container shared by dataset and checkpoint files:
//!
//! ```text
//! magic [4] | version u16 LE | header_len u32 LE | header (UTF-8 JSON)
//!   | payload (f32 LE) | crc32(payload) u32 LE
//! ```

use crate::error::{Error, Result};

pub fn encode(magic: [u8; 4], version: u16, header: &str, payload: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + header.len() + payload.len() * 4);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let start = out.len();
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(Error::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Parses the header text. The payload length is supplied by the caller
/// after it has interpreted the header.
pub struct Decoded<'a> {
    pub header: String,
    rest: Reader<'a>,
}

impl<'a> Decoded<'a> {
    pub fn payload(mut self, n_values: usize) -> Result<Vec<f32>> {
        let bytes = self.rest.take(n_values * 4, "payload")?;
        let stored = u32::from_le_bytes(self.rest.take(4, "checksum")?.try_into().expect("4 bytes"));
        if self.rest.pos != self.rest.buf.len() {
            return Err(Error::Header(format!(
                "{} trailing bytes after checksum",
                self.rest.buf.len() - self.rest.pos
            )));
        }
        let computed = crc32fast::hash(bytes);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode(buf: &[u8], magic: [u8; 4], version: u16) -> Result<Decoded<'_>> {
    let mut r = Reader { buf, pos: 0 };
    let m = r.take(4, "magic")?;
    if m != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found: m.try_into().expect("4 bytes"),
        });
    }
    let v = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if v != version {
        return Err(Error::VersionMismatch {
            found: v,
            expected: version,
        });
    }
    let len = u32::from_le_bytes(r.take(4, "header length")?.try_into().expect("4 bytes")) as usize;
    let header = std::str::from_utf8(r.take(len, "header")?)
        .map_err(|e| Error::Header(e.to_string()))?
        .to_owned();
    Ok(Decoded { header, rest: r })
}
