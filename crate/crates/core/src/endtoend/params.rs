use fdd_diffcore::{Real, Tensor};
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};

use super::arch::{ArchConfig, TaskKind};
use crate::channels::{complex_gaussian, resolve_config, ResolvedTask, TaskConfig};
use crate::error::{Error, Result};

/// Ordered name -> tensor map. Order is the checkpoint payload order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T: Real> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { map: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::MissingParameter(name.to_owned()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(name).ok_or_else(|| Error::MissingParameter(name.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Number of scalar entries.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// CRC32 over the little-endian bytes of every value, in order.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in &self.map {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(&v.to_f64_lossy().to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` entries.
pub fn uniform_fan_in<T: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor<T> {
    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::of(rng.random_range(-b..=b))).collect();
    Tensor::new(rows, cols, data).expect("length matches")
}

fn linear<T: Real, R: Rng + ?Sized>(set: &mut ParamSet<T>, rng: &mut R, prefix: &str, fan_in: usize, fan_out: usize) {
    set.insert(format!("{prefix}.w"), uniform_fan_in(rng, fan_in, fan_out, fan_in));
    set.insert(format!("{prefix}.b"), uniform_fan_in(rng, 1, fan_out, fan_in));
}

fn mlp<T: Real, R: Rng + ?Sized>(set: &mut ParamSet<T>, rng: &mut R, prefix: &str, widths: &[usize]) {
    for (i, w) in widths.windows(2).enumerate() {
        linear(set, rng, &format!("{prefix}.l{i}"), w[0], w[1]);
    }
}

pub fn init_trunk<T: Real, R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<ParamSet<T>> {
    arch.validate()?;
    let d = arch.d_model;
    let mut set = ParamSet::new();
    for b in 0..arch.blocks {
        for m in ["wq", "wk", "wv", "wo"] {
            set.insert(format!("block{b}.attn.{m}"), uniform_fan_in(rng, d, d, d));
        }
        set.insert(format!("block{b}.ln1.gain"), Tensor::ones(1, d));
        set.insert(format!("block{b}.ln1.bias"), Tensor::zeros(1, d));
        set.insert(format!("block{b}.router.w"), uniform_fan_in(rng, d, arch.experts, d));
        set.insert(format!("block{b}.router.b"), Tensor::zeros(1, arch.experts));
        for e in 0..arch.experts {
            let p = format!("block{b}.expert{e}");
            set.insert(format!("{p}.u1"), uniform_fan_in(rng, d, arch.d_ff, d));
            set.insert(format!("{p}.c1"), uniform_fan_in(rng, 1, arch.d_ff, d));
            set.insert(format!("{p}.u2"), uniform_fan_in(rng, arch.d_ff, d, arch.d_ff));
            set.insert(format!("{p}.c2"), uniform_fan_in(rng, 1, d, arch.d_ff));
        }
        set.insert(format!("block{b}.ln2.gain"), Tensor::ones(1, d));
        set.insert(format!("block{b}.ln2.bias"), Tensor::zeros(1, d));
    }
    Ok(set)
}

/// Complex Gaussian pilot with every column scaled to energy `e_s`.
pub fn init_pilot<T: Real, R: Rng + ?Sized>(rng: &mut R, n_tx: usize, len: usize, e_s: f64) -> (Tensor<T>, Tensor<T>) {
    let z: Vec<_> = (0..n_tx * len).map(|_| complex_gaussian(rng, 1.0)).collect();
    let mut re = Tensor::zeros(n_tx, len);
    let mut im = Tensor::zeros(n_tx, len);
    for c in 0..len {
        let norm: f64 = (0..n_tx).map(|r| z[r * len + c].norm_sqr()).sum::<f64>().sqrt();
        let s = e_s.sqrt() / norm.max(f64::MIN_POSITIVE);
        for r in 0..n_tx {
            re.set(r, c, T::of(z[r * len + c].re * s));
            im.set(r, c, T::of(z[r * len + c].im * s));
        }
    }
    (re, im)
}

pub fn encoder_widths(arch: &ArchConfig, task: &ResolvedTask) -> Vec<usize> {
    let mut w = vec![2 * task.pilot_len];
    w.extend(std::iter::repeat_n(arch.enc_hidden, arch.enc_layers));
    w.push(task.feedback_bits);
    w
}

pub fn init_task<T: Real, R: Rng + ?Sized>(
    arch: &ArchConfig,
    task: &ResolvedTask,
    kind: &TaskKind,
    rng: &mut R,
) -> Result<ParamSet<T>> {
    arch.validate()?;
    let mut set = ParamSet::new();
    let (re, im) = init_pilot(rng, task.n_tx, task.pilot_len, task.pilot_symbol_energy);
    set.insert("pilot.re", re);
    set.insert("pilot.im", im);
    let d = arch.d_model;
    let out = 2 * task.n_tx;
    match kind {
        TaskKind::Feedback => {
            mlp(&mut set, rng, "enc", &encoder_widths(arch, task));
            linear(&mut set, rng, "head.in", task.feedback_bits, d);
            linear(&mut set, rng, "head.out", d, out);
        }
        TaskKind::Estimation { est_hidden } => {
            let mut w = vec![2 * task.pilot_len];
            w.extend(est_hidden);
            w.push(out);
            if w.contains(&0) {
                return Err(Error::Config("estimator widths must be positive".into()));
            }
            mlp(&mut set, rng, "est", &w);
            linear(&mut set, rng, "head.in", out, d);
            linear(&mut set, rng, "head.out", d, out);
        }
        TaskKind::Dsc { dec_hidden } => {
            mlp(&mut set, rng, "enc", &encoder_widths(arch, task));
            let mut w = vec![task.feedback_bits * task.n_users];
            w.extend(dec_hidden);
            w.push(out * task.n_users);
            if w.contains(&0) {
                return Err(Error::Config("decoder widths must be positive".into()));
            }
            mlp(&mut set, rng, "dec", &w);
        }
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSlot<T: Real> {
    pub config: TaskConfig,
    pub kind: TaskKind,
    pub params: ParamSet<T>,
}

impl<T: Real> TaskSlot<T> {
    pub fn resolved(&self) -> Result<ResolvedTask> {
        resolve_config(&self.config)
    }
}

pub const TRUNK_PREFIX: &str = "trunk/";

pub fn trunk_param_name(local: &str) -> String {
    format!("{TRUNK_PREFIX}{local}")
}

pub fn task_param_name(task_id: &str, local: &str) -> String {
    format!("task/{task_id}/{local}")
}

/// Shared trunk plus per-task parameter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle<T: Real> {
    arch: ArchConfig,
    trunk: ParamSet<T>,
    tasks: IndexMap<String, TaskSlot<T>>,
}

impl<T: Real> ModelBundle<T> {
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self> {
        let trunk = init_trunk(&arch, rng)?;
        Ok(Self {
            arch,
            trunk,
            tasks: IndexMap::new(),
        })
    }

    /// Reassembles a bundle from stored parts, checking every expected
    /// parameter is present with the right shape.
    pub fn from_parts(arch: ArchConfig, trunk: ParamSet<T>, tasks: Vec<TaskSlot<T>>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let reference: ParamSet<T> = init_trunk(&arch, &mut rng)?;
        check_like(&reference, &trunk, TRUNK_PREFIX)?;
        let mut map = IndexMap::new();
        for slot in tasks {
            let r = slot.resolved()?;
            let reference: ParamSet<T> = init_task(&arch, &r, &slot.kind, &mut rng)?;
            check_like(&reference, &slot.params, &format!("task/{}/", slot.config.task_id))?;
            if map.insert(slot.config.task_id.clone(), slot).is_some() {
                return Err(Error::TaskExists(r.task_id));
            }
        }
        Ok(Self { arch, trunk, tasks: map })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn trunk(&self) -> &ParamSet<T> {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.trunk
    }

    pub fn task(&self, id: &str) -> Result<&TaskSlot<T>> {
        self.tasks.get(id).ok_or_else(|| Error::UnknownTask(id.to_owned()))
    }

    pub fn task_mut(&mut self, id: &str) -> Result<&mut TaskSlot<T>> {
        self.tasks.get_mut(id).ok_or_else(|| Error::UnknownTask(id.to_owned()))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskSlot<T>> {
        self.tasks.values()
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.keys().cloned().collect()
    }

    pub fn has_task(&self, id: &str) -> bool {
        self.tasks.contains_key(id)
    }

    pub fn register_task<R: Rng + ?Sized>(&mut self, config: TaskConfig, kind: TaskKind, rng: &mut R) -> Result<()> {
        let id = config.task_id.clone();
        if id.is_empty() || id.contains('/') {
            return Err(Error::Config(format!("task id {id:?} must be nonempty and contain no '/'")));
        }
        if self.tasks.contains_key(&id) {
            return Err(Error::TaskExists(id));
        }
        let resolved = resolve_config(&config)?;
        let params = init_task(&self.arch, &resolved, &kind, rng)?;
        self.tasks.insert(id, TaskSlot { config, kind, params });
        Ok(())
    }

    pub fn remove_task(&mut self, id: &str) -> Result<TaskSlot<T>> {
        self.tasks.shift_remove(id).ok_or_else(|| Error::UnknownTask(id.to_owned()))
    }

    /// Every parameter under its full name: trunk first, then tasks in
    /// registration order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<_> = self.trunk.iter().map(|(k, v)| (trunk_param_name(k), v)).collect();
        for (id, slot) in &self.tasks {
            out.extend(slot.params.iter().map(|(k, v)| (task_param_name(id, k), v)));
        }
        out
    }

    fn split_name<'a>(&self, full: &'a str) -> Result<(Option<&'a str>, &'a str)> {
        if let Some(local) = full.strip_prefix(TRUNK_PREFIX) {
            return Ok((None, local));
        }
        let rest = full
            .strip_prefix("task/")
            .ok_or_else(|| Error::MissingParameter(full.to_owned()))?;
        let (id, local) = rest.split_once('/').ok_or_else(|| Error::MissingParameter(full.to_owned()))?;
        Ok((Some(id), local))
    }

    pub fn param(&self, full: &str) -> Result<&Tensor<T>> {
        match self.split_name(full)? {
            (None, local) => self.trunk.get(local),
            (Some(id), local) => self.task(id)?.params.get(local),
        }
    }

    pub fn param_mut(&mut self, full: &str) -> Result<&mut Tensor<T>> {
        match self.split_name(full)? {
            (None, local) => self.trunk.get_mut(local),
            (Some(id), local) => self.task_mut(id)?.params.get_mut(local),
        }
    }

    pub fn param_count(&self) -> usize {
        self.trunk.scalar_count() + self.tasks.values().map(|t| t.params.scalar_count()).sum::<usize>()
    }

    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            arch: self.arch.clone(),
            trunk: self.trunk.cast(),
            tasks: self
                .tasks
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        TaskSlot {
                            config: s.config.clone(),
                            kind: s.kind.clone(),
                            params: s.params.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

fn check_like<T: Real>(reference: &ParamSet<T>, actual: &ParamSet<T>, prefix: &str) -> Result<()> {
    for (name, t) in reference.iter() {
        let a = actual
            .get(name)
            .map_err(|_| Error::MissingParameter(format!("{prefix}{name}")))?;
        if a.shape() != t.shape() {
            return Err(Error::Dimension(format!(
                "{prefix}{name}: stored {:?}, expected {:?}",
                a.shape(),
                t.shape()
            )));
        }
    }
    if actual.len() != reference.len() {
        let extra = actual.iter().find(|(n, _)| reference.get(n).is_err()).map(|(n, _)| n.to_owned());
        return Err(Error::Header(format!("unexpected parameter {prefix}{}", extra.unwrap_or_default())));
    }
    Ok(())
}
