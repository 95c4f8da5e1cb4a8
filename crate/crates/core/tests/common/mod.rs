#![allow(dead_code)]

use fdd_diffcore::{ComplexTensor, Graph, Real, Tensor};
use fdd_precoding::channels::{gen_rayleigh, ChannelDataset, Fraction, TaskConfig};
use fdd_precoding::endtoend::{ArchConfig, Binding, ModelBundle, TaskKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        d_model: 8,
        heads: 2,
        experts: 2,
        top_k: 1,
        blocks: 1,
        d_ff: 8,
        enc_hidden: 8,
        enc_layers: 1,
        dropout: 0.0,
        ln_eps: 1e-5,
    }
}

/// `N_t = 4, K = 2, L = 2, B = 4`.
pub fn tiny_task(id: &str) -> TaskConfig {
    TaskConfig::new(id, 4, 2, Fraction::new(1, 2).unwrap(), Fraction::ONE, 10.0)
}

pub fn bundle_with<T: Real>(arch: ArchConfig, tasks: &[(TaskConfig, TaskKind)], seed: u64) -> ModelBundle<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = ModelBundle::new(arch, &mut rng).unwrap();
    for (cfg, kind) in tasks {
        b.register_task(cfg.clone(), kind.clone(), &mut rng).unwrap();
    }
    b
}

pub fn tiny_bundle<T: Real>(seed: u64) -> ModelBundle<T> {
    bundle_with(tiny_arch(), &[(tiny_task("t"), TaskKind::Feedback)], seed)
}

pub fn channels<T: Real>(cfg: &TaskConfig, samples: usize, seed: u64) -> (ChannelDataset, ComplexTensor<T>) {
    let ds = gen_rayleigh(cfg, samples, seed).unwrap();
    let idx: Vec<usize> = (0..samples).collect();
    let h = ds.all().batch::<T>(&idx);
    (ds, h)
}

/// Binds named tensors as trainable leaves.
pub fn bind_named(g: &mut Graph<f64>, params: &[(&str, Tensor<f64>)]) -> Binding {
    let mut b = Binding::new();
    for (name, t) in params {
        let v = g.param(t.clone());
        b.insert(name.to_string(), v);
    }
    b
}

/// Swaps users `i` and `j` in every sample of a stacked `(M K) x n` tensor.
pub fn swap_users<T: Real>(t: &ComplexTensor<T>, k: usize, i: usize, j: usize) -> ComplexTensor<T> {
    let rows = t.re.rows();
    let idx: Vec<usize> = (0..rows)
        .map(|r| {
            let (m, u) = (r / k, r % k);
            let u = if u == i {
                j
            } else if u == j {
                i
            } else {
                u
            };
            m * k + u
        })
        .collect();
    t.select_rows(&idx)
}

pub fn permute_users<T: Real>(t: &ComplexTensor<T>, k: usize, perm: &[usize]) -> ComplexTensor<T> {
    let rows = t.re.rows();
    let idx: Vec<usize> = (0..rows).map(|r| (r / k) * k + perm[r % k]).collect();
    t.select_rows(&idx)
}

pub fn max_abs_diff<T: Real>(a: &ComplexTensor<T>, b: &ComplexTensor<T>) -> f64 {
    a.re.max_abs_diff(&b.re).to_f64_lossy().max(a.im.max_abs_diff(&b.im).to_f64_lossy())
}

/// Per-sample `||V||_F^2` of stacked precoder rows.
pub fn sample_energies<T: Real>(vt: &ComplexTensor<T>, k: usize) -> Vec<f64> {
    let rows = vt.re.rows();
    let mut out = vec![0.0; rows / k];
    for r in 0..rows {
        for c in 0..vt.re.cols() {
            let (a, b) = vt.get(r, c);
            out[r / k] += a.to_f64_lossy().powi(2) + b.to_f64_lossy().powi(2);
        }
    }
    out
}

/// Column energies of a pilot `N_t x L`.
pub fn column_energies<T: Real>(x: &ComplexTensor<T>) -> Vec<f64> {
    (0..x.re.cols())
        .map(|c| {
            (0..x.re.rows())
                .map(|r| {
                    let (a, b) = x.get(r, c);
                    a.to_f64_lossy().powi(2) + b.to_f64_lossy().powi(2)
                })
                .sum()
        })
        .collect()
}
