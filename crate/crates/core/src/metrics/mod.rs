//! Spectral-efficiency evaluation, parameter and FLOP counters, domain
//! gaps, the scaling study and experiment configuration files.

mod counters;
mod eval;
mod experiment;
mod gap;
mod record;
mod scaling;

pub use counters::{
    count_flops, count_params, expert_sublayer_flops, matmul_flops, mlp_flops, mlp_param_count, trunk_flops,
    FlopCount, ParamCount, LAYER_NORM_FLOPS_PER_ENTRY, SOFTMAX_FLOPS_PER_ENTRY,
};
pub use eval::{evaluate_baseline, evaluate_model, evaluate_model_subset, mean_rate, Evaluation, Scheme, WmmseSettings};
pub use experiment::{EvalSettings, ExperimentConfig};
pub use gap::{domain_gap, DomainGap};
pub use record::{append_metrics_csv, metrics_from_csv, metrics_to_csv, MetricsRecord, METRICS_COLUMNS};
pub use scaling::{scaling_study, scaling_to_csv, variant_arch, ScalingAxis, ScalingRow};
