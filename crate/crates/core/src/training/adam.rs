use fdd_diffcore::{Real, Tensor};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    /// L2 coefficient added to the gradient as `weight_decay * theta`.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam moments keyed by full parameter name. Buffers are created on a
/// parameter's first update, so frozen parameters never get any.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Real> {
    pub config: AdamConfig,
    step: u64,
    first: IndexMap<String, Tensor<T>>,
    second: IndexMap<String, Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        })
    }

    pub(crate) fn from_parts(
        config: AdamConfig,
        step: u64,
        first: IndexMap<String, Tensor<T>>,
        second: IndexMap<String, Tensor<T>>,
    ) -> Result<Self> {
        config.validate()?;
        for (name, m) in &first {
            match second.get(name) {
                Some(v) if v.shape() == m.shape() => {}
                _ => return Err(Error::Header(format!("moment buffers for {name:?} disagree"))),
            }
        }
        if first.len() != second.len() {
            return Err(Error::Header("moment buffer sets differ".into()));
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// `(m, v)` for `name`, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.first.keys().map(String::as_str)
    }

    /// Advances the step counter; call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Bias-corrected Adam update of one parameter at the current step.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if self.step == 0 {
            return Err(Error::Config("update before begin_step".into()));
        }
        if param.shape() != grad.shape() {
            return Err(Error::Dimension(format!(
                "{name}: parameter {:?} vs gradient {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        let (rows, cols) = param.shape();
        let m = self
            .first
            .entry(name.to_owned())
            .or_insert_with(|| Tensor::zeros(rows, cols));
        if m.shape() != param.shape() {
            return Err(Error::Dimension(format!("{name}: moment buffer {:?}", m.shape())));
        }
        let v = self
            .second
            .entry(name.to_owned())
            .or_insert_with(|| Tensor::zeros(rows, cols));
        let c = &self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let corr1 = T::of(1.0 - c.beta1.powi(t));
        let corr2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, wd, eps) = (T::of(c.lr), T::of(c.weight_decay), T::of(c.eps));
        let p = param.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, &g) in grad.data().iter().enumerate() {
            let g = g + wd * p[i];
            md[i] = b1 * md[i] + one_b1 * g;
            vd[i] = b2 * vd[i] + one_b2 * g * g;
            let m_hat = md[i] / corr1;
            let v_hat = vd[i] / corr2;
            p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> OptimizerState<U> {
        let cast = |m: &IndexMap<String, Tensor<T>>| m.iter().map(|(k, t)| (k.clone(), t.cast())).collect();
        OptimizerState {
            config: self.config,
            step: self.step,
            first: cast(&self.first),
            second: cast(&self.second),
        }
    }

    pub(crate) fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.first
            .iter()
            .map(|(k, m)| (k.as_str(), m, &self.second[k.as_str()]))
    }
}

/// One Adam step over named parameters.
pub fn adam_step<'a, T: Real + 'a>(
    state: &mut OptimizerState<T>,
    updates: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>, &'a Tensor<T>)>,
) -> Result<()> {
    state.begin_step();
    for (name, p, g) in updates {
        state.update(name, p, g)?;
    }
    Ok(())
}
