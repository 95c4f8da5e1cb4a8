use fdd_diffcore::{CVar, ComplexTensor, Graph, Real, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use super::arch::TaskKind;
use super::layers::{
    dsc_decoder_forward, encode_feedback, estimate_channel, input_proj, normalized_pilot, output_head,
    pilot_forward, power_normalize, trunk_forward, Binding, Mode, Quantizer,
};
use super::params::{task_param_name, trunk_param_name, ModelBundle};
use crate::channels::sample_rng;
use crate::error::{Error, Result};

/// Source of the pilot-phase noise `Z`.
#[derive(Clone, Copy, Debug)]
pub enum PilotNoise<'a, T: Real> {
    Off,
    /// Explicit `(M K) x L` realization.
    Given(&'a ComplexTensor<T>),
    /// Drawn from the forward rng with the task's noise variance.
    Sample,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Power-normalized precoders, row `k` of each sample is `v_k^T`.
    pub vt: CVar,
    /// Normalized pilot `X`.
    pub pilot: CVar,
    /// Received pilots `Y`.
    pub observation: CVar,
    /// BS-side input tokens: quantized feedback or channel estimates.
    pub tokens: Var,
    /// Encoder output before quantization, when a quantizer is used.
    pub pre_quant: Option<Var>,
    /// Tokens routed to each expert, per block.
    pub expert_load: Vec<Vec<usize>>,
}

/// Complex Gaussian noise with `E|z|^2 = sigma2`.
pub fn sample_pilot_noise<T: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, len: usize, sigma2: f64) -> ComplexTensor<T> {
    let s = (sigma2 / 2.0).sqrt();
    let mut draw = || {
        let data = (0..rows * len)
            .map(|_| T::of(s * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor::new(rows, len, data).expect("length matches")
    };
    let re = draw();
    let im = draw();
    ComplexTensor { re, im }
}

const EVAL_NOISE_STREAM: u64 = 0x6576_616c_6e6f_6973;

/// Evaluation noise keyed by `(seed, sample index)`, stacked in the order
/// of `samples`, so that every scheme sees the same realization per sample.
pub fn eval_pilot_noise<T: Real>(seed: u64, samples: &[usize], k: usize, len: usize, sigma2: f64) -> ComplexTensor<T> {
    let rows = samples.len() * k;
    let mut re = Vec::with_capacity(rows * len);
    let mut im = Vec::with_capacity(rows * len);
    for &s in samples {
        let mut rng = sample_rng(seed ^ EVAL_NOISE_STREAM, s as u64);
        let z: ComplexTensor<T> = sample_pilot_noise(&mut rng, k, len, sigma2);
        re.extend_from_slice(z.re.data());
        im.extend_from_slice(z.im.data());
    }
    ComplexTensor {
        re: Tensor::new(rows, len, re).expect("length matches"),
        im: Tensor::new(rows, len, im).expect("length matches"),
    }
}

/// Adds the trunk (when any task needs it) and the given tasks' parameters
/// to `g`. Names for which `trainable` is false become constants.
pub fn bind_params<T: Real>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    task_ids: &[&str],
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Binding> {
    let mut b = Binding::new();
    let leaf = |g: &mut Graph<T>, b: &mut Binding, name: String, t: &Tensor<T>| {
        let v = if trainable(&name) { g.param(t.clone()) } else { g.constant(t.clone()) };
        b.insert(name, v);
    };
    let mut need_trunk = false;
    for id in task_ids {
        need_trunk |= bundle.task(id)?.kind.uses_trunk();
    }
    if need_trunk {
        for (k, t) in bundle.trunk().iter() {
            leaf(g, &mut b, trunk_param_name(k), t);
        }
    }
    for id in task_ids {
        for (k, t) in bundle.task(id)?.params.iter() {
            leaf(g, &mut b, task_param_name(id, k), t);
        }
    }
    Ok(b)
}

/// Full pipeline for one task on a stacked channel batch `h` of shape
/// `(M K) x N_t`.
#[allow(clippy::too_many_arguments)]
pub fn forward_task<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    binding: &Binding,
    task_id: &str,
    h: CVar,
    noise: PilotNoise<'_, T>,
    mode: Mode,
    quantizer: Quantizer,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let slot = bundle.task(task_id)?;
    let r = slot.resolved()?;
    let k = r.n_users;
    let (rows, cols) = g.shape(h.re);
    if cols != r.n_tx || rows == 0 || rows % k != 0 {
        return Err(Error::Dimension(format!(
            "task {task_id} expects (M*{k}) x {} channels, got {rows}x{cols}",
            r.n_tx
        )));
    }
    let ts = binding.scope(format!("task/{task_id}/"));
    let pilot = normalized_pilot(g, &ts, r.pilot_symbol_energy)?;
    let noise = match noise {
        PilotNoise::Off => None,
        PilotNoise::Given(z) => {
            if z.shape() != (rows, r.pilot_len) {
                return Err(Error::Dimension(format!(
                    "noise {:?} vs observation {:?}",
                    z.shape(),
                    (rows, r.pilot_len)
                )));
            }
            Some(g.complex_leaf(z.clone(), false))
        }
        PilotNoise::Sample => {
            let z = sample_pilot_noise(rng, rows, r.pilot_len, r.sigma2());
            Some(g.complex_leaf(z, false))
        }
    };
    let observation = pilot_forward(g, h, pilot, noise)?;
    let arch = bundle.arch();
    let trunk = binding.scope("trunk/");
    let (tokens, pre_quant, raw, expert_load) = match &slot.kind {
        TaskKind::Feedback => {
            let (pre, q) = encode_feedback(g, observation, &ts, quantizer)?;
            let z0 = input_proj(g, q, &ts)?;
            let (z, load) = trunk_forward(g, z0, &trunk, arch, k, mode, rng)?;
            (q, Some(pre), output_head(g, z, &ts)?, load)
        }
        TaskKind::Estimation { .. } => {
            let est = estimate_channel(g, observation, &ts)?;
            let z0 = input_proj(g, est, &ts)?;
            let (z, load) = trunk_forward(g, z0, &trunk, arch, k, mode, rng)?;
            (est, None, output_head(g, z, &ts)?, load)
        }
        TaskKind::Dsc { .. } => {
            let (pre, q) = encode_feedback(g, observation, &ts, quantizer)?;
            (q, Some(pre), dsc_decoder_forward(g, q, &ts, k)?, Vec::new())
        }
    };
    let vt = power_normalize(g, raw, k, r.power)?;
    Ok(ForwardOutput {
        vt,
        pilot,
        observation,
        tokens,
        pre_quant,
        expert_load,
    })
}

/// Forward pass with every parameter bound as a constant.
pub fn run_forward<T: Real, R: Rng + ?Sized>(
    bundle: &ModelBundle<T>,
    task_id: &str,
    h: &ComplexTensor<T>,
    noise: PilotNoise<'_, T>,
    mode: Mode,
    quantizer: Quantizer,
    rng: &mut R,
) -> Result<(Graph<T>, ForwardOutput)> {
    let mut g = Graph::new();
    let binding = bind_params(&mut g, bundle, &[task_id], &|_| false)?;
    let hv = g.complex_leaf(h.clone(), false);
    let out = forward_task(&mut g, bundle, &binding, task_id, hv, noise, mode, quantizer, rng)?;
    Ok((g, out))
}

/// Eval-mode precoders, stacked `(M K) x N_t` with row `k` equal to `v_k^T`.
pub fn predict_precoders<T: Real>(
    bundle: &ModelBundle<T>,
    task_id: &str,
    h: &ComplexTensor<T>,
    noise: PilotNoise<'_, T>,
) -> Result<ComplexTensor<T>> {
    // eval mode draws nothing unless noise is Sample
    let mut rng = sample_rng(0, 0);
    let (g, out) = run_forward(bundle, task_id, h, noise, Mode::Eval, Quantizer::Sign, &mut rng)?;
    Ok(g.complex_value(out.vt))
}
