//! Achievable rates and training losses.
//!
//! Channels are `K x N_t` with row `k` equal to `h_k^H`; precoders are
//! `N_t x K` with column `k` equal to `v_k`, so `(H V)[k, j] = h_k^H v_j`.
//! Inside a graph a batch of `M` samples is stacked row-wise: the channel
//! as `(M K) x N_t` and the precoder transposed, as `(M K) x N_t` rows
//! `v_j^T`.

use std::f64::consts::LN_2;

use fdd_diffcore::{CVar, ComplexTensor, Graph, Real, Tensor, Var};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub per_user_rates: Vec<f64>,
    pub sum_rate: f64,
}

fn check_dims(h: &DMatrix<Complex64>, v: &DMatrix<Complex64>) -> Result<()> {
    if h.ncols() != v.nrows() || h.nrows() != v.ncols() {
        return Err(Error::Dimension(format!(
            "channel {}x{} incompatible with precoder {}x{}",
            h.nrows(),
            h.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    Ok(())
}

fn rate_from_products(g: &DMatrix<Complex64>, k: usize, sigma2: f64) -> f64 {
    let signal = g[(k, k)].norm_sqr();
    let interference: f64 = (0..g.ncols()).filter(|&j| j != k).map(|j| g[(k, j)].norm_sqr()).sum();
    (1.0 + signal / (interference + sigma2)).ln() / LN_2
}

/// `log2(1 + |h_k^H v_k|^2 / (sum_{j != k} |h_k^H v_j|^2 + sigma2))`.
pub fn user_rate(h: &DMatrix<Complex64>, v: &DMatrix<Complex64>, k: usize, sigma2: f64) -> Result<f64> {
    check_dims(h, v)?;
    if k >= h.nrows() {
        return Err(Error::Dimension(format!("user {k} out of {}", h.nrows())));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Config(format!("noise variance must be positive, got {sigma2}")));
    }
    Ok(rate_from_products(&(h * v), k, sigma2))
}

pub fn sum_rate(h: &DMatrix<Complex64>, v: &DMatrix<Complex64>, sigma2: f64) -> Result<RateResult> {
    check_dims(h, v)?;
    if !(sigma2 > 0.0) {
        return Err(Error::Config(format!("noise variance must be positive, got {sigma2}")));
    }
    let g = h * v;
    let per_user_rates: Vec<f64> = (0..h.nrows()).map(|k| rate_from_products(&g, k, sigma2)).collect();
    Ok(RateResult {
        sum_rate: per_user_rates.iter().sum(),
        per_user_rates,
    })
}

/// Extracts sample `m` of a stacked `(M K) x N_t` tensor as a `K x N_t`
/// matrix. Applied to stacked precoder rows it yields `V^T`.
pub fn sample_block<T: Real>(t: &ComplexTensor<T>, m: usize, k: usize) -> DMatrix<Complex64> {
    let n = t.re.cols();
    DMatrix::from_fn(k, n, |r, c| {
        let (re, im) = t.get(m * k + r, c);
        Complex64::new(re.to_f64_lossy(), im.to_f64_lossy())
    })
}

/// Stacks `K x N_t` blocks row-wise into one `(M K) x N_t` tensor.
pub fn stack_blocks<T: Real>(blocks: &[DMatrix<Complex64>]) -> Result<ComplexTensor<T>> {
    let first = blocks.first().ok_or(Error::Empty("block list"))?;
    let (k, n) = first.shape();
    let mut re = Vec::with_capacity(blocks.len() * k * n);
    let mut im = Vec::with_capacity(blocks.len() * k * n);
    for b in blocks {
        if b.shape() != (k, n) {
            return Err(Error::Dimension(format!("block {:?} differs from {:?}", b.shape(), (k, n))));
        }
        for r in 0..k {
            for c in 0..n {
                re.push(T::of(b[(r, c)].re));
                im.push(T::of(b[(r, c)].im));
            }
        }
    }
    let rows = blocks.len() * k;
    Ok(ComplexTensor::new(Tensor::new(rows, n, re)?, Tensor::new(rows, n, im)?)?)
}

/// Products `h_k^H v_j` for every stacked sample: `(M K) x K` complex.
pub fn channel_products<T: Real>(g: &mut Graph<T>, h: CVar, vt: CVar, k: usize) -> Result<CVar> {
    let rr = g.grouped_abt(h.re, vt.re, k)?;
    let ii = g.grouped_abt(h.im, vt.im, k)?;
    let ri = g.grouped_abt(h.re, vt.im, k)?;
    let ir = g.grouped_abt(h.im, vt.re, k)?;
    Ok(CVar {
        re: g.sub(rr, ii)?,
        im: g.add(ri, ir)?,
    })
}

/// Per-user rates, `(M K) x 1`.
pub fn batch_user_rates<T: Real>(g: &mut Graph<T>, h: CVar, vt: CVar, k: usize, sigma2: f64) -> Result<Var> {
    if !(sigma2 > 0.0) {
        return Err(Error::Config(format!("noise variance must be positive, got {sigma2}")));
    }
    let prods = channel_products(g, h, vt, k)?;
    let power = g.abs_sq(prods)?;
    let rows = g.shape(power).0;
    let mut mask = Tensor::zeros(rows, k);
    for r in 0..rows {
        mask.set(r, r % k, T::one());
    }
    let signal = g.mask_mul(power, mask)?;
    let signal = g.sum_cols(signal)?;
    let total = g.sum_cols(power)?;
    let interference = g.sub(total, signal)?;
    let denom = g.add_scalar(interference, T::of(sigma2))?;
    let sinr = g.div(signal, denom)?;
    let one_plus = g.add_scalar(sinr, T::one())?;
    let nats = g.ln(one_plus)?;
    Ok(g.scale(nats, T::of(1.0 / LN_2))?)
}

/// Per-sample sum rates, `M x 1`.
pub fn batch_sum_rates<T: Real>(g: &mut Graph<T>, h: CVar, vt: CVar, k: usize, sigma2: f64) -> Result<Var> {
    let rates = batch_user_rates(g, h, vt, k, sigma2)?;
    Ok(g.segment_sum(rates, k)?)
}

/// Negative mean sum rate over the batch.
pub fn task_loss<T: Real>(g: &mut Graph<T>, h: CVar, vt: CVar, k: usize, sigma2: f64) -> Result<Var> {
    if g.shape(h.re).0 == 0 {
        return Err(Error::Empty("batch"));
    }
    let rates = batch_sum_rates(g, h, vt, k, sigma2)?;
    let mean = g.mean_all(rates)?;
    Ok(g.neg(mean)?)
}

/// Per-task weights of the multi-task objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MTLWeights {
    weights: Vec<f64>,
}

impl MTLWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("task weights"));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("task weights must be positive, got {w}")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n_tasks: usize) -> Result<Self> {
        Self::new(vec![1.0; n_tasks])
    }

    /// `lambda_n = N |D_n| / sum |D|`, which reduces to uniform for equal sizes.
    pub fn proportional(sizes: &[usize]) -> Result<Self> {
        let total: usize = sizes.iter().sum();
        if sizes.contains(&0) {
            return Err(Error::Config("dataset-proportional weights need nonempty datasets".into()));
        }
        let n = sizes.len() as f64;
        Self::new(sizes.iter().map(|&s| n * s as f64 / total as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.weights.len() {
            return Err(Error::Dimension(format!("{n} task losses for {} weights", self.weights.len())));
        }
        Ok(())
    }
}

/// `sum_n lambda_n L_n` inside a graph.
pub fn mtl_loss<T: Real>(g: &mut Graph<T>, losses: &[Var], weights: &MTLWeights) -> Result<Var> {
    weights.check_len(losses.len())?;
    let mut acc: Option<Var> = None;
    for (&l, &w) in losses.iter().zip(&weights.weights) {
        let term = g.scale(l, T::of(w))?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or(Error::Empty("task losses"))
}

pub fn mtl_loss_value(losses: &[f64], weights: &MTLWeights) -> Result<f64> {
    weights.check_len(losses.len())?;
    Ok(losses.iter().zip(&weights.weights).map(|(l, w)| l * w).sum())
}
