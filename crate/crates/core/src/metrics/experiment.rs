use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channels::TaskConfig;
use crate::endtoend::{ArchConfig, TaskKind};
use crate::error::{Error, Result};
use crate::training::TrainPlan;

fn default_samples() -> usize {
    5000
}

fn default_train_fraction() -> f64 {
    crate::channels::DEFAULT_TRAIN_FRACTION
}

fn default_kind() -> TaskKind {
    TaskKind::Feedback
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Seed of the per-sample evaluation noise and random precoders.
    pub seed: u64,
    /// SNR points for `compare`; empty means each task's own SNR.
    pub snr_grid: Vec<f64>,
    pub schemes: Vec<String>,
    pub wmmse_iters: usize,
    pub wmmse_tol: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            snr_grid: Vec::new(),
            schemes: vec!["zf".into(), "wmmse".into(), "random".into()],
            wmmse_iters: crate::baselines::DEFAULT_WMMSE_ITERS,
            wmmse_tol: crate::baselines::DEFAULT_WMMSE_TOL,
        }
    }
}

/// Everything a command-line run needs: task configurations, dataset
/// sizes, architecture, training plan and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub tasks: Vec<TaskConfig>,
    /// Held-out configurations for fine-tuning.
    #[serde(default)]
    pub finetune_tasks: Vec<TaskConfig>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub arch: ArchConfig,
    /// Task head used by single-task modes other than MTL.
    #[serde(default = "default_kind")]
    pub kind: TaskKind,
    #[serde(default)]
    pub plan: TrainPlan,
    #[serde(default)]
    pub finetune_plan: Option<TrainPlan>,
    #[serde(default)]
    pub eval: EvalSettings,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Empty("task list"));
        }
        let mut seen = std::collections::HashSet::new();
        for t in self.tasks.iter().chain(&self.finetune_tasks) {
            t.resolve()?;
            if !seen.insert(t.task_id.as_str()) {
                return Err(Error::Config(format!("duplicate task id {:?}", t.task_id)));
            }
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train fraction {} outside (0, 1)", self.train_fraction)));
        }
        self.arch.validate()
    }

    pub fn task(&self, id: &str) -> Result<&TaskConfig> {
        self.tasks
            .iter()
            .chain(&self.finetune_tasks)
            .find(|t| t.task_id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_owned()))
    }

    /// Dataset seed of a task: the global seed offset by the task's own.
    pub fn data_seed(&self, task: &TaskConfig) -> u64 {
        self.seed.wrapping_add(task.seed)
    }
}
