use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shared trunk and user-encoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub d_model: usize,
    pub heads: usize,
    pub experts: usize,
    pub top_k: usize,
    pub blocks: usize,
    /// Hidden width of each expert MLP.
    pub d_ff: usize,
    /// Hidden width of the user encoder.
    pub enc_hidden: usize,
    /// Number of hidden layers in the user encoder.
    pub enc_layers: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 8,
            experts: 8,
            top_k: 3,
            blocks: 5,
            d_ff: 512,
            enc_hidden: 128,
            enc_layers: 3,
            dropout: 0.05,
            ln_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model < 2 {
            return fail(format!("d_model must be at least 2, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return fail(format!("top_k {} must lie in 1..={}", self.top_k, self.experts));
        }
        if self.d_ff == 0 || self.enc_hidden == 0 {
            return fail("hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return fail("layer-norm epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// How a task turns user observations into BS-side input, and which
/// BS-side network consumes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Binary feedback from the shared user encoder into the trunk.
    Feedback,
    /// Users estimate their channel rows and feed them back unquantized;
    /// `est_hidden` lists the estimator hidden widths (empty = linear).
    Estimation { est_hidden: Vec<usize> },
    /// Binary feedback decoded by a plain MLP over all users at once.
    Dsc { dec_hidden: Vec<usize> },
}

impl TaskKind {
    pub fn uses_trunk(&self) -> bool {
        !matches!(self, TaskKind::Dsc { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Feedback => "feedback",
            TaskKind::Estimation { .. } => "estimation",
            TaskKind::Dsc { .. } => "dsc",
        }
    }
}

/// Hidden width giving a `layers`-deep MLP decoder at least `budget`
/// parameters between `input` and `output` widths.
pub fn width_for_budget(input: usize, output: usize, layers: usize, budget: usize) -> usize {
    let count = |w: usize| {
        if layers == 0 {
            return input * output + output;
        }
        input * w + w + (layers - 1) * (w * w + w) + w * output + output
    };
    let mut w = 1;
    while count(w) < budget && w < 1 << 16 {
        w += 1;
    }
    w
}
