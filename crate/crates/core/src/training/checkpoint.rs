use std::path::Path;

use fdd_diffcore::{Real, Tensor};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, OptimizerState};
use crate::channels::TaskConfig;
use crate::container;
use crate::endtoend::{ArchConfig, ModelBundle, ParamSet, TaskKind, TaskSlot, TRUNK_PREFIX};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FDDM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct TaskEntry {
    config: TaskConfig,
    kind: TaskKind,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    config: AdamConfig,
    step: u64,
    /// Each entry stores `m` then `v` in the payload.
    moments: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    arch: ArchConfig,
    tasks: Vec<TaskEntry>,
    params: Vec<ArrayEntry>,
    optimizer: Option<OptimizerEntry>,
    epochs_done: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub bundle: ModelBundle<T>,
    pub optimizer: Option<OptimizerState<T>>,
    pub epochs_done: usize,
}

fn entry<T: Real>(name: &str, t: &Tensor<T>) -> ArrayEntry {
    ArrayEntry {
        name: name.to_owned(),
        shape: [t.rows(), t.cols()],
    }
}

fn push<T: Real>(payload: &mut Vec<f32>, t: &Tensor<T>) {
    payload.extend(t.data().iter().map(|v| v.to_f64_lossy() as f32));
}

/// Parameters and optimizer moments are stored as `f32`.
pub fn encode_checkpoint<T: Real>(
    bundle: &ModelBundle<T>,
    optimizer: Option<&OptimizerState<T>>,
    epochs_done: usize,
) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(bundle.param_count());
    let named = bundle.named_params();
    let params = named.iter().map(|(n, t)| entry(n, t)).collect();
    for (_, t) in &named {
        push(&mut payload, t);
    }
    let optimizer = optimizer.map(|o| {
        let mut moments = Vec::new();
        for (name, m, v) in o.buffers() {
            moments.push(entry(name, m));
            push(&mut payload, m);
            push(&mut payload, v);
        }
        OptimizerEntry {
            config: o.config,
            step: o.step_count(),
            moments,
        }
    });
    let manifest = Manifest {
        arch: bundle.arch().clone(),
        tasks: bundle
            .tasks()
            .map(|s| TaskEntry {
                config: s.config.clone(),
                kind: s.kind.clone(),
            })
            .collect(),
        params,
        optimizer,
        epochs_done,
    };
    let header = serde_json::to_string(&manifest)?;
    Ok(container::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload))
}

pub fn decode_checkpoint<T: Real>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let decoded = container::decode(buf, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let manifest: Manifest = serde_json::from_str(&decoded.header)?;
    let size = |e: &ArrayEntry| e.shape[0] * e.shape[1];
    let n_params: usize = manifest.params.iter().map(size).sum();
    let n_moments: usize = manifest
        .optimizer
        .as_ref()
        .map_or(0, |o| o.moments.iter().map(|e| 2 * size(e)).sum());
    let payload = decoded.payload(n_params + n_moments)?;
    let mut cursor = 0;
    let mut take = |e: &ArrayEntry| -> Result<Tensor<T>> {
        let n = size(e);
        let data = payload[cursor..cursor + n].iter().map(|&v| T::of(v as f64)).collect();
        cursor += n;
        Ok(Tensor::new(e.shape[0], e.shape[1], data)?)
    };

    let mut trunk = ParamSet::new();
    let mut task_sets: IndexMap<String, ParamSet<T>> = manifest
        .tasks
        .iter()
        .map(|t| (t.config.task_id.clone(), ParamSet::new()))
        .collect();
    for e in &manifest.params {
        let t = take(e)?;
        if let Some(local) = e.name.strip_prefix(TRUNK_PREFIX) {
            trunk.insert(local, t);
            continue;
        }
        let (id, local) = e
            .name
            .strip_prefix("task/")
            .and_then(|r| r.split_once('/'))
            .ok_or_else(|| Error::Header(format!("parameter name {:?}", e.name)))?;
        task_sets
            .get_mut(id)
            .ok_or_else(|| Error::UnknownTask(id.to_owned()))?
            .insert(local, t);
    }
    let slots = manifest
        .tasks
        .into_iter()
        .map(|t| TaskSlot {
            params: task_sets.shift_remove(&t.config.task_id).unwrap_or_default(),
            config: t.config,
            kind: t.kind,
        })
        .collect();
    let bundle = ModelBundle::from_parts(manifest.arch, trunk, slots)?;

    let optimizer = match &manifest.optimizer {
        None => None,
        Some(o) => {
            let mut first = IndexMap::new();
            let mut second = IndexMap::new();
            for e in &o.moments {
                let expected = bundle.param(&e.name)?.shape();
                if expected != (e.shape[0], e.shape[1]) {
                    return Err(Error::Header(format!("moment {:?} has shape {:?}", e.name, e.shape)));
                }
                first.insert(e.name.clone(), take(e)?);
                second.insert(e.name.clone(), take(e)?);
            }
            Some(OptimizerState::from_parts(o.config, o.step, first, second)?)
        }
    };
    Ok(Checkpoint {
        bundle,
        optimizer,
        epochs_done: manifest.epochs_done,
    })
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    bundle: &ModelBundle<T>,
    optimizer: Option<&OptimizerState<T>>,
    epochs_done: usize,
) -> Result<()> {
    std::fs::write(path, encode_checkpoint(bundle, optimizer, epochs_done)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::channels::Fraction;

    #[test]
    fn parameters_of_unlisted_task_are_rejected() {
        let arch = ArchConfig {
            d_model: 4,
            heads: 1,
            experts: 1,
            top_k: 1,
            blocks: 1,
            d_ff: 4,
            enc_hidden: 4,
            enc_layers: 1,
            dropout: 0.0,
            ln_eps: 1e-5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bundle = ModelBundle::<f32>::new(arch, &mut rng).unwrap();
        let cfg = TaskConfig::new("t", 2, 1, Fraction::ONE, Fraction::ONE, 10.0);
        bundle.register_task(cfg, TaskKind::Feedback, &mut rng).unwrap();
        let bytes = encode_checkpoint(&bundle, None, 0).unwrap();
        let decoded = container::decode(&bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION).unwrap();
        let n: usize = bundle.param_count();
        let mut manifest: Manifest = serde_json::from_str(&decoded.header).unwrap();
        let payload = decoded.payload(n).unwrap();
        manifest.tasks.clear();
        let header = serde_json::to_string(&manifest).unwrap();
        let edited = container::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, &payload);
        assert!(matches!(decode_checkpoint::<f32>(&edited), Err(Error::UnknownTask(id)) if id == "t"));
    }
}
