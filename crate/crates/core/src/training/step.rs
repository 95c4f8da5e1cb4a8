use fdd_diffcore::{ComplexTensor, Graph, Real, Tensor, Var};
use indexmap::IndexMap;
use rand::Rng;

use crate::endtoend::{bind_params, forward_task, Mode, ModelBundle, PilotNoise, Quantizer, TaskKind};
use crate::error::{Error, Result};
use crate::objectives::{mtl_loss, task_loss, MTLWeights};

/// Per-task training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Negative mean sum rate.
    SumRate,
    /// Mean squared error of the user-side channel estimate against the
    /// stored channel row as `[re | im]`.
    EstimationMse,
}

#[derive(Clone, Debug)]
pub struct TaskBatch<T: Real> {
    pub task_id: String,
    /// Stacked `(M K) x N_t` channels.
    pub h: ComplexTensor<T>,
    /// Pilot noise; `None` runs noiseless.
    pub noise: Option<ComplexTensor<T>>,
}

#[derive(Clone, Debug)]
pub struct StepOutput<T: Real> {
    pub task_losses: Vec<f64>,
    /// Weighted sum of `task_losses`.
    pub total: f64,
    /// Gradients of the total loss for every trainable parameter reached.
    pub grads: IndexMap<String, Tensor<T>>,
}

fn estimation_loss<T: Real>(g: &mut Graph<T>, est: Var, h: &ComplexTensor<T>) -> Result<Var> {
    let re = g.constant(h.re.clone());
    let im = g.constant(h.im.clone());
    let target = g.concat_cols(&[re, im])?;
    if g.shape(target) != g.shape(est) {
        return Err(Error::Dimension(format!(
            "estimate {:?} vs target {:?}",
            g.shape(est),
            g.shape(target)
        )));
    }
    let diff = g.sub(est, target)?;
    let sq = g.square(diff)?;
    Ok(g.mean_all(sq)?)
}

/// One joint forward and backward pass: per-task losses are weighted,
/// summed into a single scalar and differentiated once.
#[allow(clippy::too_many_arguments)]
pub fn joint_gradients<T: Real, R: Rng + ?Sized>(
    bundle: &ModelBundle<T>,
    batches: &[TaskBatch<T>],
    weights: &MTLWeights,
    objective: Objective,
    quantizer: Quantizer,
    mode: Mode,
    trainable: &dyn Fn(&str) -> bool,
    rng: &mut R,
) -> Result<StepOutput<T>> {
    if batches.is_empty() {
        return Err(Error::Empty("task batch set"));
    }
    let ids: Vec<&str> = batches.iter().map(|b| b.task_id.as_str()).collect();
    let mut g = Graph::new();
    let binding = bind_params(&mut g, bundle, &ids, trainable)?;
    let mut losses = Vec::with_capacity(batches.len());
    for b in batches {
        let slot = bundle.task(&b.task_id)?;
        let r = slot.resolved()?;
        let h = g.complex_leaf(b.h.clone(), false);
        let noise = match &b.noise {
            Some(z) => PilotNoise::Given(z),
            None => PilotNoise::Off,
        };
        let out = forward_task(&mut g, bundle, &binding, &b.task_id, h, noise, mode, quantizer, rng)?;
        let loss = match objective {
            Objective::SumRate => task_loss(&mut g, h, out.vt, r.n_users, r.sigma2())?,
            Objective::EstimationMse => {
                if !matches!(slot.kind, TaskKind::Estimation { .. }) {
                    return Err(Error::Config(format!("task {} has no channel estimator", b.task_id)));
                }
                estimation_loss(&mut g, out.tokens, &b.h)?
            }
        };
        losses.push(loss);
    }
    let total = mtl_loss(&mut g, &losses, weights)?;
    let task_losses: Vec<f64> = losses.iter().map(|&l| g.value(l).item().to_f64_lossy()).collect();
    let total_value = g.value(total).item().to_f64_lossy();
    let mut grads = g.backward(total)?;
    let mut out = IndexMap::new();
    for (name, var) in binding.iter() {
        if !trainable(name) {
            continue;
        }
        if let Some(t) = grads.take(var) {
            out.insert(name.to_owned(), t);
        }
    }
    Ok(StepOutput {
        task_losses,
        total: total_value,
        grads: out,
    })
}
