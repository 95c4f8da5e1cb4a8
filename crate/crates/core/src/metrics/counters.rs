use fdd_diffcore::Real;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::endtoend::{ArchConfig, ModelBundle, ParamSet, TaskKind};
use crate::error::Result;

/// Per-entry cost of a softmax (exponential, accumulation, division).
pub const SOFTMAX_FLOPS_PER_ENTRY: u64 = 3;
/// Per-entry cost of layer normalization (mean, centring, square,
/// variance accumulation, scaling, gain, bias).
pub const LAYER_NORM_FLOPS_PER_ENTRY: u64 = 7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trunk: usize,
    pub tasks: IndexMap<String, usize>,
    pub total: usize,
}

pub fn count_params<T: Real>(bundle: &ModelBundle<T>) -> ParamCount {
    let trunk = bundle.trunk().scalar_count();
    let tasks: IndexMap<String, usize> = bundle
        .tasks()
        .map(|s| (s.config.task_id.clone(), s.params.scalar_count()))
        .collect();
    let total = trunk + tasks.values().sum::<usize>();
    ParamCount { trunk, tasks, total }
}

/// Weights plus biases of a dense stack with the given layer widths.
pub fn mlp_param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// `(m x k) (k x n)` as `2 m k n`.
pub fn matmul_flops(m: u64, k: u64, n: u64) -> u64 {
    2 * m * k * n
}

/// Dense layers with bias and relu between them, applied to `rows` inputs.
pub fn mlp_flops(rows: u64, widths: &[usize]) -> u64 {
    let n = widths.len().saturating_sub(1);
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (a, b) = (w[0] as u64, w[1] as u64);
            let relu = if i + 1 < n { rows * b } else { 0 };
            matmul_flops(rows, a, b) + rows * b + relu
        })
        .sum()
}

/// Expert networks for `tokens` tokens with `active` experts each: two
/// matmuls, the hidden bias and the relu.
pub fn expert_sublayer_flops(arch: &ArchConfig, tokens: u64, active: u64) -> u64 {
    let (d, f) = (arch.d_model as u64, arch.d_ff as u64);
    tokens * active * (matmul_flops(1, d, f) + matmul_flops(1, f, d) + 2 * f)
}

/// Forward FLOPs by component. Every entry is linear in the batch size;
/// the batch-independent pilot normalization is left out.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub pilot: u64,
    /// Encoder or estimator, plus the quantizer.
    pub user_side: u64,
    pub input_proj: u64,
    pub attention: u64,
    pub layer_norm: u64,
    pub router: u64,
    pub experts: u64,
    /// Output bias, gating, mixing and the residual add.
    pub moe_combine: u64,
    pub output_head: u64,
    pub decoder: u64,
    pub normalize: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.pilot
            + self.user_side
            + self.input_proj
            + self.attention
            + self.layer_norm
            + self.router
            + self.experts
            + self.moe_combine
            + self.output_head
            + self.decoder
            + self.normalize
    }

    pub fn millions(&self) -> f64 {
        self.total() as f64 / 1e6
    }
}

fn widths<T: Real>(params: &ParamSet<T>, prefix: &str) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0.. {
        match params.get(&format!("{prefix}.l{i}.w")) {
            Ok(w) => {
                if out.is_empty() {
                    out.push(w.rows());
                }
                out.push(w.cols());
            }
            Err(_) => break,
        }
    }
    out
}

/// Trunk blocks on `samples` groups of `k` tokens.
pub fn trunk_flops(arch: &ArchConfig, samples: u64, k: u64) -> FlopCount {
    let t = samples * k;
    let d = arch.d_model as u64;
    let h = arch.heads as u64;
    let e = arch.experts as u64;
    let top = arch.top_k as u64;
    let blocks = arch.blocks as u64;
    let score_entries = samples * h * k * k;
    let attention = 4 * matmul_flops(t, d, d)
        + 2 * matmul_flops(samples * k, d, k)
        + score_entries * (1 + SOFTMAX_FLOPS_PER_ENTRY)
        + t * d;
    FlopCount {
        attention: blocks * attention,
        layer_norm: blocks * 2 * LAYER_NORM_FLOPS_PER_ENTRY * t * d,
        router: blocks * (matmul_flops(t, d, e) + t * e + SOFTMAX_FLOPS_PER_ENTRY * t * top),
        experts: blocks * expert_sublayer_flops(arch, t, top),
        moe_combine: blocks * (3 * t * top * d + t * d),
        ..FlopCount::default()
    }
}

/// Forward FLOPs of one task on a batch of `batch` samples.
pub fn count_flops<T: Real>(bundle: &ModelBundle<T>, task_id: &str, batch: usize) -> Result<FlopCount> {
    let slot = bundle.task(task_id)?;
    let r = slot.resolved()?;
    let m = batch as u64;
    let k = r.n_users as u64;
    let t = m * k;
    let (n, l, b) = (r.n_tx as u64, r.pilot_len as u64, r.feedback_bits as u64);
    let arch = bundle.arch();
    let d = arch.d_model as u64;
    let p = &slot.params;
    let mut c = match slot.kind {
        TaskKind::Dsc { .. } => FlopCount::default(),
        _ => trunk_flops(arch, m, k),
    };
    // four real products, two recombinations, then the noise add
    c.pilot = 4 * matmul_flops(t, n, l) + 4 * t * l;
    match &slot.kind {
        TaskKind::Feedback => {
            c.user_side = mlp_flops(t, &widths(p, "enc")) + t * b;
            c.input_proj = matmul_flops(t, b, d) + t * d;
        }
        TaskKind::Estimation { .. } => {
            c.user_side = mlp_flops(t, &widths(p, "est"));
            c.input_proj = matmul_flops(t, 2 * n, d) + t * d;
        }
        TaskKind::Dsc { .. } => {
            c.user_side = mlp_flops(t, &widths(p, "enc")) + t * b;
            c.decoder = mlp_flops(m, &widths(p, "dec"));
        }
    }
    if slot.kind.uses_trunk() {
        c.output_head = matmul_flops(t, d, 2 * n) + t * 2 * n;
    }
    // squared magnitudes, accumulation, square root and scaling
    c.normalize = 6 * t * n + 2 * m;
    Ok(c)
}
