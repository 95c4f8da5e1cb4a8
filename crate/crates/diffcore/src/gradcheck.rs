//! Central finite-difference check of recorded gradients.

use crate::error::{DiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for the per-coordinate relative error, so that
/// coordinates whose true gradient is zero are compared absolutely.
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(parameter index, flat coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

/// Compares reverse-mode gradients of a scalar function against
/// `(f(theta + h) - f(theta - h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh graph and one leaf per entry of `params` and must
/// return a `1 x 1` node. Any randomness inside `f` must be seeded so that
/// repeated evaluations see the same realisation.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with_floor(f, params, h, DEFAULT_REL_FLOOR)
}

pub fn grad_check_with_floor<F>(f: F, params: &[Tensor<f64>], h: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(DiffError::invalid("grad_check", "step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).all_finite() {
        return Err(DiffError::NonFinite { op: "grad_check" });
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = params
        .iter()
        .zip(&vars)
        .map(|(p, &v)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(DiffError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut worst = (0, 0);
    for (pi, p) in params.iter().enumerate() {
        let mut num = Tensor::zeros(p.rows(), p.cols());
        for j in 0..p.len() {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let n = (fp - fm) / (2.0 * h);
            num.data_mut()[j] = n;
            let a = analytic[pi].data()[j];
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(floor);
            max_abs = max_abs.max(abs);
            if rel > max_rel {
                max_rel = rel;
                worst = (pi, j);
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = grad_check(
            |g, p| {
                let s = g.square(p[0])?;
                g.sum_all(s)
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!((r.analytic[0].item() - 6.0).abs() < 1e-12);
        assert!(r.max_rel_error <= 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn quadratic_form_closed_form() {
        // f(x) = x^T A x, grad = (A + A^T) x
        let a = Tensor::from_f64(
            5,
            5,
            &(0..25).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let x = Tensor::from_f64(5, 1, &[0.3, -1.2, 0.7, 2.0, -0.4]).unwrap();
        let am = a.clone();
        let r = grad_check(
            move |g, p| {
                let av = g.constant(am.clone());
                let ax = g.matmul(av, p[0])?;
                let xt = g.transpose(p[0])?;
                g.matmul(xt, ax)
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        let expect = a.zip_map(&a.transpose(), |u, v| u + v).unwrap().matmul(&x).unwrap();
        assert!(r.analytic[0].max_abs_diff(&expect) < 1e-12);
        assert!(r.max_rel_error <= 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = grad_check(
            |g, p| {
                let l = g.ln(p[0])?;
                g.sum_all(l)
            },
            &[Tensor::scalar(-1.0)],
            1e-5,
        );
        assert!(matches!(r, Err(DiffError::NonFinite { .. })));
    }
}
