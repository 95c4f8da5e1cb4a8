//! Learnable pilots, user feedback encoders and the BS-side sparse
//! MoE-Transformer precoder, plus the MLP-decoder and channel-estimation
//! variants.

mod arch;
mod forward;
mod layers;
mod params;

pub use arch::{width_for_budget, ArchConfig, TaskKind};
pub use forward::{
    bind_params, eval_pilot_noise, forward_task, predict_precoders, run_forward, sample_pilot_noise, ForwardOutput,
    PilotNoise,
};
pub use layers::{
    affine, aggregate, dsc_decoder_forward, encode_feedback, estimate_channel, input_proj, linear, mhsa_sublayer, mlp,
    moe_ffn_sublayer, normalized_pilot, output_head, pilot_forward, power_normalize, split_complex, split_precoder,
    top_k_indices, trunk_forward, Binding, Mode, MoeOutput, Quantizer, Scope,
};
pub use params::{
    encoder_widths, init_pilot, init_task, init_trunk, task_param_name, trunk_param_name, uniform_fan_in, ModelBundle,
    ParamSet, TaskSlot, TRUNK_PREFIX,
};
