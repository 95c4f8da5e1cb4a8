//! Differentiable building blocks. Batches stack `M` samples of `K`
//! users row-wise, so every per-user quantity is an `(M K) x n` node and
//! attention mixes only within consecutive groups of `K` rows.

use std::cmp::Ordering;

use fdd_diffcore::{CVar, Graph, Real, Tensor, Var};
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::arch::ArchConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Feedback quantizer. `HardTanh` is the differentiable surrogate whose
/// derivative the straight-through `Sign` backward reuses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantizer {
    #[default]
    Sign,
    HardTanh,
}

/// Parameter nodes of one graph, keyed by full name.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, v: Var) {
        self.vars.insert(name, v);
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParameter(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn scope(&self, prefix: impl Into<String>) -> Scope<'_> {
        Scope {
            binding: self,
            prefix: prefix.into(),
        }
    }
}

/// Name-prefixed view of a [`Binding`].
#[derive(Clone, Debug)]
pub struct Scope<'a> {
    binding: &'a Binding,
    prefix: String,
}

impl Scope<'_> {
    pub fn get(&self, local: &str) -> Result<Var> {
        self.binding.var(&format!("{}{local}", self.prefix))
    }

    pub fn has(&self, local: &str) -> bool {
        self.binding.contains(&format!("{}{local}", self.prefix))
    }

    pub fn sub(&self, prefix: &str) -> Self {
        Scope {
            binding: self.binding,
            prefix: format!("{}{prefix}", self.prefix),
        }
    }
}

pub fn affine<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, s: &Scope, name: &str) -> Result<Var> {
    affine(g, x, s.get(&format!("{name}.w"))?, s.get(&format!("{name}.b"))?)
}

/// Layers `{prefix}.l0, l1, ...` with relu between them.
pub fn mlp<T: Real>(g: &mut Graph<T>, x: Var, s: &Scope, prefix: &str) -> Result<Var> {
    let n = (0..).take_while(|i| s.has(&format!("{prefix}.l{i}.w"))).count();
    if n == 0 {
        return Err(Error::MissingParameter(format!("{prefix}.l0.w")));
    }
    let mut h = x;
    for i in 0..n {
        h = linear(g, h, s, &format!("{prefix}.l{i}"))?;
        if i + 1 < n {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Pilot with every column rescaled to energy `e_s`.
pub fn normalized_pilot<T: Real>(g: &mut Graph<T>, s: &Scope, e_s: f64) -> Result<CVar> {
    let x = CVar {
        re: s.get("pilot.re")?,
        im: s.get("pilot.im")?,
    };
    let energy = g.abs_sq(x)?;
    let energy = g.sum_rows(energy)?;
    if g.value(energy).data().iter().any(|&e| !(e > T::zero())) {
        return Err(Error::Config("pilot column with zero energy".into()));
    }
    let norm = g.sqrt(energy)?;
    let inv = g.recip(norm)?;
    let scale = g.scale(inv, T::of(e_s.sqrt()))?;
    Ok(CVar {
        re: g.mul_row(x.re, scale)?,
        im: g.mul_row(x.im, scale)?,
    })
}

/// `Y = H X + Z`: row `k` of `H` is `h_k^H`, so row `k` of `Y` is `y_k`.
pub fn pilot_forward<T: Real>(g: &mut Graph<T>, h: CVar, pilot: CVar, noise: Option<CVar>) -> Result<CVar> {
    let (hr, hc) = g.shape(h.re);
    let (pr, pc) = g.shape(pilot.re);
    if hc != pr {
        return Err(Error::Dimension(format!("channel {hr}x{hc} vs pilot {pr}x{pc}")));
    }
    let y = g.cmatmul(h, pilot)?;
    match noise {
        Some(z) => Ok(g.cadd(y, z)?),
        None => Ok(y),
    }
}

/// `[re(y_k), im(y_k)]` per row.
pub fn split_complex<T: Real>(g: &mut Graph<T>, y: CVar) -> Result<Var> {
    Ok(g.concat_cols(&[y.re, y.im])?)
}

/// Shared user MLP followed by the quantizer. Returns `(pre, q)`.
pub fn encode_feedback<T: Real>(g: &mut Graph<T>, y: CVar, s: &Scope, quantizer: Quantizer) -> Result<(Var, Var)> {
    let x = split_complex(g, y)?;
    let w0 = s.get("enc.l0.w")?;
    if g.shape(w0).0 != g.shape(x).1 {
        return Err(Error::Dimension(format!(
            "encoder expects width {}, observation has {}",
            g.shape(w0).0,
            g.shape(x).1
        )));
    }
    let pre = mlp(g, x, s, "enc")?;
    let q = match quantizer {
        Quantizer::Sign => g.binarize(pre)?,
        Quantizer::HardTanh => g.hard_tanh(pre)?,
    };
    Ok((pre, q))
}

/// User-side channel estimate, `(M K) x 2 N_t`.
pub fn estimate_channel<T: Real>(g: &mut Graph<T>, y: CVar, s: &Scope) -> Result<Var> {
    let x = split_complex(g, y)?;
    mlp(g, x, s, "est")
}

/// Column `k` of the result is `q_k`.
pub fn aggregate<T: Real>(feedback: &[Vec<T>]) -> Result<Tensor<T>> {
    let b = feedback.first().ok_or(Error::Empty("feedback set"))?.len();
    if let Some(bad) = feedback.iter().find(|q| q.len() != b) {
        return Err(Error::Dimension(format!("feedback of length {} among length {b}", bad.len())));
    }
    let k = feedback.len();
    let mut out = Tensor::zeros(b, k);
    for (c, q) in feedback.iter().enumerate() {
        for (r, &v) in q.iter().enumerate() {
            out.set(r, c, v);
        }
    }
    Ok(out)
}

/// `Z0 = Q^T W_in + 1 b_in^T`; tokens are the rows of `Q^T`.
pub fn input_proj<T: Real>(g: &mut Graph<T>, tokens: Var, s: &Scope) -> Result<Var> {
    let w = s.get("head.in.w")?;
    if g.shape(w).0 != g.shape(tokens).1 {
        return Err(Error::Dimension(format!(
            "input projection expects width {}, got {}",
            g.shape(w).0,
            g.shape(tokens).1
        )));
    }
    linear(g, tokens, s, "head.in")
}

/// `LN(Z + Dropout(MHA(Z)))`.
pub fn mhsa_sublayer<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    z: Var,
    s: &Scope,
    arch: &ArchConfig,
    k: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let dh = arch.head_dim();
    let q = g.matmul(z, s.get("attn.wq")?)?;
    let kk = g.matmul(z, s.get("attn.wk")?)?;
    let v = g.matmul(z, s.get("attn.wv")?)?;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(arch.heads);
    for h in 0..arch.heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(kk, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.grouped_abt(qh, kh, k)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.row_softmax(scores)?;
        heads.push(g.grouped_ab(attn, vh, k)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let mha = g.matmul(cat, s.get("attn.wo")?)?;
    let mha = g.dropout(mha, arch.dropout, mode == Mode::Train, rng)?;
    let res = g.add(z, mha)?;
    Ok(g.layer_norm(res, s.get("ln1.gain")?, s.get("ln1.bias")?, T::of(arch.ln_eps))?)
}

/// Experts with the largest logits, ties to the lower index.
pub fn top_k_indices<T: Real>(logits: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub out: Var,
    /// Router logits, `tokens x E`.
    pub logits: Var,
    /// Mixture weights, zero outside each token's selected set.
    pub gates: Var,
    /// Selected experts per token, ascending.
    pub selected: Vec<Vec<usize>>,
}

impl MoeOutput {
    pub fn expert_load(&self, experts: usize) -> Vec<usize> {
        let mut load = vec![0; experts];
        for s in &self.selected {
            for &e in s {
                load[e] += 1;
            }
        }
        load
    }
}

/// `LN(Zbar + Dropout(sum_{i in S_t} pi_{t,i} E_i(zbar_t)))`, routed per token.
pub fn moe_ffn_sublayer<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    zbar: Var,
    s: &Scope,
    arch: &ArchConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<MoeOutput> {
    let n_exp = arch.experts;
    if arch.top_k == 0 || arch.top_k > n_exp {
        return Err(Error::Config(format!("top_k {} must lie in 1..={n_exp}", arch.top_k)));
    }
    let rows = g.shape(zbar).0;
    let logits = linear(g, zbar, s, "router")?;
    let lv = g.value(logits);
    let mut mask = vec![false; rows * n_exp];
    let mut selected = Vec::with_capacity(rows);
    for r in 0..rows {
        let sel = top_k_indices(lv.row(r), arch.top_k);
        for &e in &sel {
            mask[r * n_exp + e] = true;
        }
        selected.push(sel);
    }
    let gates = g.masked_row_softmax(logits, &mask)?;
    let mut acc: Option<Var> = None;
    for e in 0..n_exp {
        let idx: Vec<usize> = (0..rows).filter(|&r| mask[r * n_exp + e]).collect();
        if idx.is_empty() {
            continue;
        }
        let es = s.sub(&format!("expert{e}."));
        let x = g.gather_rows(zbar, &idx)?;
        let h = affine(g, x, es.get("u1")?, es.get("c1")?)?;
        let h = g.relu(h)?;
        let o = affine(g, h, es.get("u2")?, es.get("c2")?)?;
        let gate = g.gather_rows(gates, &idx)?;
        let gate = g.slice_cols(gate, e, 1)?;
        let o = g.mul_col(o, gate)?;
        let o = g.scatter_rows(o, &idx, rows)?;
        acc = Some(match acc {
            Some(a) => g.add(a, o)?,
            None => o,
        });
    }
    let mixed = match acc {
        Some(a) => a,
        None => return Err(Error::Empty("token batch")),
    };
    let mixed = g.dropout(mixed, arch.dropout, mode == Mode::Train, rng)?;
    let res = g.add(zbar, mixed)?;
    let out = g.layer_norm(res, s.get("ln2.gain")?, s.get("ln2.bias")?, T::of(arch.ln_eps))?;
    Ok(MoeOutput {
        out,
        logits,
        gates,
        selected,
    })
}

/// Stacked blocks; returns the final tokens and per-block expert loads.
pub fn trunk_forward<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    z0: Var,
    s: &Scope,
    arch: &ArchConfig,
    k: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<(Var, Vec<Vec<usize>>)> {
    let mut z = z0;
    let mut loads = Vec::with_capacity(arch.blocks);
    for b in 0..arch.blocks {
        let bs = s.sub(&format!("block{b}."));
        let zbar = mhsa_sublayer(g, z, &bs, arch, k, mode, rng)?;
        let moe = moe_ffn_sublayer(g, zbar, &bs, arch, mode, rng)?;
        loads.push(moe.expert_load(arch.experts));
        z = moe.out;
    }
    Ok((z, loads))
}

/// Splits `(M K) x 2 N_t` rows into `[re(v_k) | im(v_k)]`.
pub fn split_precoder<T: Real>(g: &mut Graph<T>, raw: Var) -> Result<CVar> {
    let w = g.shape(raw).1;
    if w % 2 != 0 {
        return Err(Error::Dimension(format!("precoder width {w} is odd")));
    }
    Ok(CVar {
        re: g.slice_cols(raw, 0, w / 2)?,
        im: g.slice_cols(raw, w / 2, w / 2)?,
    })
}

/// Linear head; row `k` of the result is `v_k^T`.
pub fn output_head<T: Real>(g: &mut Graph<T>, z: Var, s: &Scope) -> Result<CVar> {
    let raw = linear(g, z, s, "head.out")?;
    split_precoder(g, raw)
}

/// Per-sample scaling to `||V||_F^2 = power`.
pub fn power_normalize<T: Real>(g: &mut Graph<T>, vt: CVar, k: usize, power: f64) -> Result<CVar> {
    let p = g.abs_sq(vt)?;
    let rows = g.sum_cols(p)?;
    let energy = g.segment_sum(rows, k)?;
    if g.value(energy).data().iter().any(|&e| !(e > T::zero()) || !e.is_finite()) {
        return Err(Error::DegeneratePrecoder);
    }
    let norm = g.sqrt(energy)?;
    let inv = g.recip(norm)?;
    let scale = g.scale(inv, T::of(power.sqrt()))?;
    let scale = g.repeat_rows(scale, k)?;
    Ok(CVar {
        re: g.mul_col(vt.re, scale)?,
        im: g.mul_col(vt.im, scale)?,
    })
}

/// Flattens each sample's `K x B` feedback into one row, decodes it with
/// the `dec` MLP and unflattens to `(M K) x 2 N_t`.
pub fn dsc_decoder_forward<T: Real>(g: &mut Graph<T>, q: Var, s: &Scope, k: usize) -> Result<CVar> {
    let (rows, b) = g.shape(q);
    if rows % k != 0 {
        return Err(Error::Dimension(format!("{rows} feedback rows not divisible by K={k}")));
    }
    let w0 = s.get("dec.l0.w")?;
    if g.shape(w0).0 != k * b {
        return Err(Error::Dimension(format!(
            "decoder expects {} inputs, got K*B = {}",
            g.shape(w0).0,
            k * b
        )));
    }
    let flat = g.reshape(q, rows / k, k * b)?;
    let out = mlp(g, flat, s, "dec")?;
    let w = g.shape(out).1;
    if w % k != 0 {
        return Err(Error::Dimension(format!("decoder width {w} not divisible by K={k}")));
    }
    let raw = g.reshape(out, rows, w / k)?;
    split_precoder(g, raw)
}
