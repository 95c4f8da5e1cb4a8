//! Synthetic channel generators.
//!
//! Each sample draws from its own ChaCha stream keyed by `(seed, index)`,
//! so datasets are reproducible and independent of evaluation order.

use std::f64::consts::PI;

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::config::{resolve_config, ArrayGeometry, ChannelModel, TaskConfig};
use super::dataset::ChannelDataset;
use crate::error::{Error, Result};

/// Range of user mean azimuths, radians.
const MEAN_AZIMUTH_RANGE: f64 = PI / 3.0;
/// Range of user mean elevations for planar arrays, radians.
const MEAN_ELEVATION_RANGE: f64 = PI / 6.0;

pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Circularly symmetric complex Gaussian with `E|z|^2 = var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Uniform linear array response `a(theta)[n] = exp(j pi n sin(theta))`.
pub fn steering_vector(n_tx: usize, theta: f64) -> Vec<Complex64> {
    let phase = PI * theta.sin();
    (0..n_tx).map(|n| Complex64::from_polar(1.0, phase * n as f64)).collect()
}

/// Planar array response for azimuth `theta` and elevation `psi`, element
/// `(r, c)` at flat index `r * cols + c`.
pub fn planar_steering_vector(rows: usize, cols: usize, theta: f64, psi: f64) -> Vec<Complex64> {
    let (u, v) = (theta.sin() * psi.cos(), psi.sin());
    (0..rows * cols)
        .map(|i| {
            let (r, c) = ((i / cols) as f64, (i % cols) as f64);
            Complex64::from_polar(1.0, PI * (c * u + r * v))
        })
        .collect()
}

pub fn generate(config: &TaskConfig, count: usize, seed: u64) -> Result<ChannelDataset> {
    match config.channel_model {
        ChannelModel::Rayleigh => gen_rayleigh(config, count, seed),
        ChannelModel::Geometric => gen_geometric(config, count, seed),
    }
}

/// I.i.d. `CN(0, 1)` entries.
pub fn gen_rayleigh(config: &TaskConfig, count: usize, seed: u64) -> Result<ChannelDataset> {
    let mut cfg = config.clone();
    cfg.channel_model = ChannelModel::Rayleigh;
    build(cfg, count, seed, |rng, k, n| {
        (0..k * n).map(|_| complex_gaussian(rng, 1.0).conj()).collect()
    })
}

/// Sum of `paths` plane waves per user with `CN(0, 1/paths)` gains, so that
/// `E ||h_k||^2 = N_t`.
pub fn gen_geometric(config: &TaskConfig, count: usize, seed: u64) -> Result<ChannelDataset> {
    let mut cfg = config.clone();
    cfg.channel_model = ChannelModel::Geometric;
    let paths = cfg.geometric.paths;
    if paths == 0 {
        return Err(Error::Config("geometric channel needs at least one path".into()));
    }
    let spread = cfg.geometric.angle_spread_deg.to_radians();
    let array = cfg.array;
    build(cfg, count, seed, move |rng, k, n| {
        let mut out = Vec::with_capacity(k * n);
        for _ in 0..k {
            let h = user_channel(rng, array, n, paths, spread);
            // stored row is h^H
            out.extend(h.into_iter().map(|z| z.conj()));
        }
        out
    })
}

/// One user's channel vector `h = sum_p alpha_p a(theta_p)`.
pub fn user_channel<R: Rng + ?Sized>(
    rng: &mut R,
    array: ArrayGeometry,
    n_tx: usize,
    paths: usize,
    spread: f64,
) -> Vec<Complex64> {
    let mean_az = rng.random_range(-MEAN_AZIMUTH_RANGE..=MEAN_AZIMUTH_RANGE);
    let mean_el = rng.random_range(-MEAN_ELEVATION_RANGE..=MEAN_ELEVATION_RANGE);
    let mut h = vec![Complex64::new(0.0, 0.0); n_tx];
    for _ in 0..paths {
        let jitter = |rng: &mut R| if spread > 0.0 { rng.random_range(-spread / 2.0..=spread / 2.0) } else { 0.0 };
        let theta = mean_az + jitter(rng);
        let a = match array {
            ArrayGeometry::Ula => steering_vector(n_tx, theta),
            ArrayGeometry::Upa { rows, cols } => planar_steering_vector(rows, cols, theta, mean_el + jitter(rng)),
        };
        let alpha = complex_gaussian(rng, 1.0 / paths as f64);
        for (hn, an) in h.iter_mut().zip(a) {
            *hn += alpha * an;
        }
    }
    h
}

fn build<F>(config: TaskConfig, count: usize, seed: u64, draw: F) -> Result<ChannelDataset>
where
    F: Fn(&mut ChaCha8Rng, usize, usize) -> Vec<Complex64> + Sync,
{
    resolve_config(&config)?;
    if count == 0 {
        return Err(Error::Empty("dataset request"));
    }
    let (k, n) = (config.n_users, config.n_tx);
    let samples: Vec<Vec<Complex64>> = (0..count)
        .into_par_iter()
        .map(|i| draw(&mut sample_rng(seed, i as u64), k, n))
        .collect();
    let data = samples
        .into_iter()
        .flatten()
        .map(|z| Complex32::new(z.re as f32, z.im as f32))
        .collect();
    let mut cfg = config;
    cfg.seed = seed;
    ChannelDataset::new(cfg, data)
}
