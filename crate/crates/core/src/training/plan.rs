use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use crate::endtoend::{Quantizer, TRUNK_PREFIX};
use crate::error::{Error, Result};
use crate::objectives::MTLWeights;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Mtl,
    Stl,
    Cep,
    Dsc,
    Finetune,
}

impl TrainMode {
    pub fn single_task(self) -> bool {
        !matches!(self, TrainMode::Mtl)
    }
}

/// When the optimizer steps: after every accumulation round, or once per
/// epoch on the round-averaged gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    #[default]
    PerBatch,
    PerEpoch,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// Proportional to training-set sizes.
    Proportional,
    Explicit {
        weights: Vec<f64>,
    },
}

impl Weighting {
    pub fn resolve(&self, train_sizes: &[usize]) -> Result<MTLWeights> {
        match self {
            Weighting::Uniform => MTLWeights::uniform(train_sizes.len()),
            Weighting::Proportional => MTLWeights::proportional(train_sizes),
            Weighting::Explicit { weights } => {
                if weights.len() != train_sizes.len() {
                    return Err(Error::Config(format!(
                        "{} explicit weights for {} tasks",
                        weights.len(),
                        train_sizes.len()
                    )));
                }
                MTLWeights::new(weights.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Uniform mini-batch size `M` for every task.
    pub batch_size: usize,
    /// Accumulation rounds per epoch; by default the largest
    /// `floor(S_train / M)` over tasks, smaller tasks wrapping around.
    pub batches_per_epoch: Option<usize>,
    pub weighting: Weighting,
    pub seed: u64,
    /// Parameter-name prefixes excluded from optimization.
    pub freeze: Vec<String>,
    pub step_mode: StepMode,
    pub optimizer: AdamConfig,
    pub quantizer: Quantizer,
    /// Draw fresh pilot noise on every forward pass.
    pub pilot_noise: bool,
    /// Estimator epochs of the first CEP stage; `epochs` drives the second.
    pub estimation_epochs: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            mode: TrainMode::Mtl,
            epochs: 300,
            batch_size: 2048,
            batches_per_epoch: None,
            weighting: Weighting::Uniform,
            seed: 0,
            freeze: Vec::new(),
            step_mode: StepMode::PerBatch,
            optimizer: AdamConfig::default(),
            quantizer: Quantizer::Sign,
            pilot_noise: true,
            estimation_epochs: 200,
        }
    }
}

impl TrainPlan {
    /// Defaults for `mode`; fine-tuning freezes the trunk.
    pub fn new(mode: TrainMode, epochs: usize, batch_size: usize, seed: u64) -> Self {
        let freeze = if mode == TrainMode::Finetune {
            vec![TRUNK_PREFIX.to_owned()]
        } else {
            Vec::new()
        };
        Self {
            mode,
            epochs,
            batch_size,
            seed,
            freeze,
            estimation_epochs: if mode == TrainMode::Cep { 200 } else { 0 },
            ..Self::default()
        }
    }

    pub fn validate(&self, n_tasks: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::Config("batches_per_epoch must be positive".into()));
        }
        if n_tasks == 0 {
            return Err(Error::Empty("task set"));
        }
        if self.mode.single_task() && n_tasks != 1 {
            return Err(Error::Config(format!("{:?} trains a single task, got {n_tasks}", self.mode)));
        }
        if self.mode == TrainMode::Finetune && self.freeze != [TRUNK_PREFIX] {
            return Err(Error::Config(format!(
                "fine-tuning must freeze exactly {TRUNK_PREFIX:?}, got {:?}",
                self.freeze
            )));
        }
        self.optimizer.validate()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.freeze.iter().any(|p| name.starts_with(p.as_str()))
    }
}
