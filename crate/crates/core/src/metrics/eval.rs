use std::str::FromStr;
use std::time::Instant;

use fdd_diffcore::Real;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{matched_filter, random_precoder, wmmse_precoder, zf_precoder};
use crate::channels::{sample_rng, DatasetView};
use crate::endtoend::{eval_pilot_noise, predict_precoders, ModelBundle, PilotNoise};
use crate::error::{Error, Result};
use crate::objectives::{sample_block, sum_rate};

/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// The learned end-to-end pipeline.
    Model,
    Zf,
    Wmmse,
    Random,
    MatchedFilter,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Model => "model",
            Scheme::Zf => "zf",
            Scheme::Wmmse => "wmmse",
            Scheme::Random => "random",
            Scheme::MatchedFilter => "mf",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "model" => Scheme::Model,
            "zf" => Scheme::Zf,
            "wmmse" => Scheme::Wmmse,
            "random" => Scheme::Random,
            "mf" | "matched_filter" => Scheme::MatchedFilter,
            other => return Err(Error::Config(format!("unknown scheme {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WmmseSettings {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for WmmseSettings {
    fn default() -> Self {
        Self {
            max_iters: crate::baselines::DEFAULT_WMMSE_ITERS,
            tol: crate::baselines::DEFAULT_WMMSE_TOL,
        }
    }
}

/// Per-sample sum rates in evaluation order, with the dataset index of
/// each sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub samples: Vec<usize>,
    pub sample_rates: Vec<f64>,
    pub wall_ms: f64,
}

impl Evaluation {
    /// Mean sum rate, accumulated in dataset-index order so that it does
    /// not depend on evaluation order.
    pub fn spectral_efficiency(&self) -> f64 {
        let mut pairs: Vec<(usize, f64)> = self.samples.iter().copied().zip(self.sample_rates.iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        let rates: Vec<f64> = pairs.into_iter().map(|p| p.1).collect();
        mean_rate(&rates)
    }
}

/// Mean accumulated in the given order.
pub fn mean_rate(rates: &[f64]) -> f64 {
    if rates.is_empty() {
        return 0.0;
    }
    rates.iter().sum::<f64>() / rates.len() as f64
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::Config(format!("noise variance must be positive, got {sigma2}")));
    }
    Ok(())
}

/// Learned precoders on `view` with pilot noise keyed by `(seed, global
/// sample index)`. Rates are scored in double precision.
pub fn evaluate_model<T: Real>(
    bundle: &ModelBundle<T>,
    task_id: &str,
    view: DatasetView<'_>,
    sigma2: f64,
    seed: u64,
) -> Result<Evaluation> {
    let order: Vec<usize> = (0..view.len()).collect();
    evaluate_model_subset(bundle, task_id, view, &order, sigma2, seed)
}

/// [`evaluate_model`] on the view samples `order`, in that order.
pub fn evaluate_model_subset<T: Real>(
    bundle: &ModelBundle<T>,
    task_id: &str,
    view: DatasetView<'_>,
    order: &[usize],
    sigma2: f64,
    seed: u64,
) -> Result<Evaluation> {
    check_sigma2(sigma2)?;
    let slot = bundle.task(task_id)?;
    let r = slot.resolved()?;
    let cfg = view.config();
    if cfg.n_tx != r.n_tx || cfg.n_users != r.n_users {
        return Err(Error::Config(format!(
            "dataset has N_t={}, K={}; task {task_id} expects N_t={}, K={}",
            cfg.n_tx, cfg.n_users, r.n_tx, r.n_users
        )));
    }
    if order.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if let Some(&bad) = order.iter().find(|&&i| i >= view.len()) {
        return Err(Error::Dimension(format!("sample {bad} outside a view of {}", view.len())));
    }
    let start = Instant::now();
    let k = r.n_users;
    let chunks: Vec<Vec<usize>> = order
        .chunks(EVAL_CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let parts: Vec<Result<Vec<f64>>> = chunks
        .par_iter()
        .map(|idx| {
            let h = view.batch::<T>(idx);
            let global: Vec<usize> = idx.iter().map(|&i| view.global_index(i)).collect();
            let z = eval_pilot_noise::<T>(seed, &global, k, r.pilot_len, sigma2);
            let vt = predict_precoders(bundle, task_id, &h, PilotNoise::Given(&z))?;
            (0..idx.len())
                .map(|m| {
                    let hm = sample_block(&h, m, k);
                    let v = sample_block(&vt, m, k).transpose();
                    Ok(sum_rate(&hm, &v, sigma2)?.sum_rate)
                })
                .collect()
        })
        .collect();
    let mut sample_rates = Vec::with_capacity(view.len());
    for p in parts {
        sample_rates.extend(p?);
    }
    Ok(Evaluation {
        samples: order.iter().map(|&i| view.global_index(i)).collect(),
        sample_rates,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Classical precoders with perfect CSIT. The random scheme draws its
/// precoder from `(seed, global sample index)`.
pub fn evaluate_baseline(
    scheme: Scheme,
    view: DatasetView<'_>,
    power: f64,
    sigma2: f64,
    seed: u64,
    wmmse: WmmseSettings,
) -> Result<Evaluation> {
    check_sigma2(sigma2)?;
    if view.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let cfg = view.config();
    let (n_tx, k) = (cfg.n_tx, cfg.n_users);
    if scheme == Scheme::Zf && k > n_tx {
        return Err(Error::Config(format!("zero forcing needs K <= N_t, got K={k}, N_t={n_tx}")));
    }
    let start = Instant::now();
    let rates: Vec<Result<f64>> = (0..view.len())
        .into_par_iter()
        .map(|i| {
            let h = view.channel_matrix(i);
            let v = match scheme {
                Scheme::Zf => zf_precoder(&h, power)?,
                Scheme::Wmmse => wmmse_precoder(&h, power, sigma2, wmmse.max_iters, wmmse.tol)?.0,
                Scheme::MatchedFilter => matched_filter(&h, power)?,
                Scheme::Random => {
                    let s = sample_rng(seed, view.global_index(i) as u64).random::<u64>();
                    random_precoder(n_tx, k, power, s)?
                }
                Scheme::Model => return Err(Error::Config("model scheme needs a checkpoint".into())),
            };
            Ok(sum_rate(&h, &v, sigma2)?.sum_rate)
        })
        .collect();
    Ok(Evaluation {
        samples: (0..view.len()).map(|i| view.global_index(i)).collect(),
        sample_rates: rates.into_iter().collect::<Result<_>>()?,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
