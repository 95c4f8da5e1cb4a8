//! Full-CSIT reference precoders.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channels::complex_gaussian;
use crate::error::{Error, Result};
use crate::objectives::sum_rate;

/// Gram matrices with a larger condition estimate are treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;
pub const DEFAULT_WMMSE_ITERS: usize = 100;
pub const DEFAULT_WMMSE_TOL: f64 = 1e-5;

fn check_power(power: f64) -> Result<()> {
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::Config(format!("transmit power must be positive, got {power}")));
    }
    Ok(())
}

/// Rescales `v` so that `||v||_F^2 = power`.
pub fn normalize_power(v: &DMatrix<Complex64>, power: f64) -> Result<DMatrix<Complex64>> {
    let norm = v.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::DegeneratePrecoder);
    }
    Ok(v * Complex64::new(power.sqrt() / norm, 0.0))
}

/// `V = gamma H^H (H H^H)^{-1}` with `gamma` meeting the power budget.
pub fn zf_precoder(h: &DMatrix<Complex64>, power: f64) -> Result<DMatrix<Complex64>> {
    check_power(power)?;
    let (k, n) = h.shape();
    if k > n {
        return Err(Error::Dimension(format!("zero-forcing needs K <= N_t, got K={k}, N_t={n}")));
    }
    let hh = h.adjoint();
    let gram = h * &hh;
    let eig = gram.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= CONDITION_LIMIT) {
        return Err(Error::Singular { condition });
    }
    let inv = gram.cholesky().ok_or(Error::Singular { condition })?.inverse();
    normalize_power(&(hh * inv), power)
}

/// Conjugate beamformer `V = H^H`, normalized.
pub fn matched_filter(h: &DMatrix<Complex64>, power: f64) -> Result<DMatrix<Complex64>> {
    check_power(power)?;
    normalize_power(&h.adjoint(), power)
}

/// Complex Gaussian entries, normalized to the power budget.
pub fn random_precoder(n_tx: usize, n_users: usize, power: f64, seed: u64) -> Result<DMatrix<Complex64>> {
    check_power(power)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = DMatrix::from_fn(n_tx, n_users, |_, _| complex_gaussian(&mut rng, 1.0));
    normalize_power(&v, power)
}

#[derive(Clone, Debug)]
pub struct WmmseState {
    pub receivers: Vec<Complex64>,
    pub weights: Vec<f64>,
    pub precoder: DMatrix<Complex64>,
    pub iterations: usize,
    pub sum_rate_trace: Vec<f64>,
    pub converged: bool,
}

/// Eigen-split solver for `(A + mu I)^{-1} B` at varying `mu`.
struct ShiftedSolve {
    q: DMatrix<Complex64>,
    lambda: Vec<f64>,
    /// `Q^H B`
    c: DMatrix<Complex64>,
    /// Per-eigen-direction squared norms of `c`.
    weight: Vec<f64>,
    floor: f64,
}

impl ShiftedSolve {
    fn new(a: DMatrix<Complex64>, b: &DMatrix<Complex64>) -> Self {
        let eig = SymmetricEigen::new(a);
        let q = eig.eigenvectors;
        let lambda: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        let c = q.adjoint() * b;
        let weight = (0..c.nrows()).map(|i| c.row(i).norm_squared()).collect();
        let top = lambda.iter().cloned().fold(0.0, f64::max);
        Self {
            q,
            lambda,
            c,
            weight,
            floor: top * 1e-12,
        }
    }

    fn inv(&self, i: usize, mu: f64) -> f64 {
        let d = self.lambda[i] + mu;
        if d <= self.floor {
            0.0
        } else {
            1.0 / d
        }
    }

    fn power(&self, mu: f64) -> f64 {
        self.weight
            .iter()
            .enumerate()
            .map(|(i, w)| w * self.inv(i, mu).powi(2))
            .sum()
    }

    fn solve(&self, mu: f64) -> DMatrix<Complex64> {
        let mut scaled = self.c.clone();
        for i in 0..scaled.nrows() {
            let s = Complex64::new(self.inv(i, mu), 0.0);
            scaled.row_mut(i).iter_mut().for_each(|z| *z *= s);
        }
        &self.q * scaled
    }

    /// Smallest `mu >= 0` meeting the budget; `0` when the unconstrained
    /// (pseudo-inverse) solution already fits.
    fn multiplier(&self, power: f64) -> f64 {
        if self.power(0.0) <= power {
            return 0.0;
        }
        let mut hi = self.lambda.iter().cloned().fold(0.0, f64::max).max(1e-12);
        while self.power(hi) > power {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        // Kept on the feasible side so that the final rescale only grows V.
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.power(mid) > power {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

/// Weighted-MMSE block-coordinate ascent on the sum rate.
///
/// Initialized with zero-forcing when `K <= N_t` and the channel is well
/// conditioned, otherwise with the matched filter. Every precoder iterate
/// is brought to exactly `||V||_F^2 = power`; since scaling a precoder up
/// never lowers any SINR, the sum-rate trace is nondecreasing. The best
/// iterate is returned; `converged` is false when `max_iters` ran out.
pub fn wmmse_precoder(
    h: &DMatrix<Complex64>,
    power: f64,
    sigma2: f64,
    max_iters: usize,
    tol: f64,
) -> Result<(DMatrix<Complex64>, WmmseState)> {
    check_power(power)?;
    if max_iters == 0 {
        return Err(Error::Config("WMMSE needs at least one iteration".into()));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Config(format!("noise variance must be positive, got {sigma2}")));
    }
    let k = h.nrows();
    let mut v = if k <= h.ncols() {
        zf_precoder(h, power).or_else(|_| matched_filter(h, power))?
    } else {
        matched_filter(h, power)?
    };
    let mut trace = vec![sum_rate(h, &v, sigma2)?.sum_rate];
    let (mut best, mut best_rate) = (v.clone(), trace[0]);
    let hh = h.adjoint();
    let mut receivers = vec![Complex64::new(0.0, 0.0); k];
    let mut weights = vec![1.0; k];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let g = h * &v;
        for u in 0..k {
            let total: f64 = g.row(u).iter().map(|z| z.norm_sqr()).sum::<f64>() + sigma2;
            receivers[u] = g[(u, u)] / total;
            let mse = 1.0 - g[(u, u)].norm_sqr() / total;
            weights[u] = 1.0 / mse.max(f64::MIN_POSITIVE);
        }
        let diag_a = DMatrix::from_fn(k, k, |r, c| {
            if r == c {
                Complex64::new(weights[r] * receivers[r].norm_sqr(), 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        let a = &hh * diag_a * h;
        let diag_b = DMatrix::from_fn(k, k, |r, c| {
            if r == c {
                receivers[r] * weights[r]
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        let b = &hh * diag_b;
        let solver = ShiftedSolve::new(a, &b);
        let mu = solver.multiplier(power);
        let candidate = match normalize_power(&solver.solve(mu), power) {
            Ok(c) => c,
            Err(_) => break,
        };
        let rate = sum_rate(h, &candidate, sigma2)?.sum_rate;
        let prev = *trace.last().expect("trace starts nonempty");
        trace.push(rate);
        if rate > best_rate {
            best_rate = rate;
            best = candidate.clone();
        }
        v = candidate;
        if rate - prev < tol {
            converged = true;
            break;
        }
    }
    let state = WmmseState {
        receivers,
        weights,
        precoder: best.clone(),
        iterations,
        sum_rate_trace: trace,
        converged,
    };
    Ok((best, state))
}
