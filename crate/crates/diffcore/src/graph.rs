//! Tape of recorded operations and the reverse sweep over it.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] walks it back to front. `backward` consumes the graph.

use rand::Rng;

use crate::error::{DiffError, Result, Shape};
use crate::real::Real;
use crate::tensor::{mm, mm_nt, mm_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Ln(Var),
    Recip(Var),
    HardTanh(Var),
    Binarize(Var),
    MaskMul(Var, Tensor<T>),
    SumCols(Var),
    SumRows(Var),
    SumAll(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    GroupedABt { a: Var, b: Var, group: usize },
    GroupedAB { p: Var, v: Var, group: usize },
    SegmentSum { x: Var, group: usize },
    RepeatRows { x: Var, group: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Not `Clone`: one forward pass, one backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(DiffError::UnknownVar(v.0))
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(DiffError::shape(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).map(f);
        Ok(self.push(value, op, &[x]))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast(&self, name: &'static str, x: Var, r: Var) -> Result<(usize, usize)> {
        self.check(x)?;
        self.check(r)?;
        let (m, n) = self.shape(x);
        if self.shape(r) != (1, n) {
            return Err(DiffError::shape(name, (m, n), self.shape(r)));
        }
        Ok((m, n))
    }

    /// `x + 1 r` for a `1 x n` row `r` (bias add).
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("add_row", x, r)?;
        let xv = self.value(x);
        let rv = self.value(r).data();
        let data = (0..m * n).map(|i| xv.data()[i] + rv[i % n]).collect();
        let value = Tensor::new(m, n, data)?;
        Ok(self.push(value, Op::AddRow(x, r), &[x, r]))
    }

    /// Scales every column `j` of `x` by `r[j]`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast("mul_row", x, r)?;
        let xv = self.value(x);
        let rv = self.value(r).data();
        let data = (0..m * n).map(|i| xv.data()[i] * rv[i % n]).collect();
        let value = Tensor::new(m, n, data)?;
        Ok(self.push(value, Op::MulRow(x, r), &[x, r]))
    }

    /// Scales every row `i` of `x` by `c[i]` for an `m x 1` column `c`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        self.check(x)?;
        self.check(c)?;
        let (m, n) = self.shape(x);
        if self.shape(c) != (m, 1) {
            return Err(DiffError::shape("mul_col", (m, n), self.shape(c)));
        }
        let xv = self.value(x);
        let cv = self.value(c).data();
        let data = (0..m * n).map(|i| xv.data()[i] * cv[i / n]).collect();
        let value = Tensor::new(m, n, data)?;
        Ok(self.push(value, Op::MulCol(x, c), &[x, c]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sqrt(x), T::sqrt)
    }

    /// Natural logarithm.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Ln(x), T::ln)
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Recip(x), T::recip)
    }

    /// `clamp(x, -1, 1)`, the smooth-almost-everywhere surrogate whose
    /// derivative is the straight-through mask used by [`Graph::binarize`].
    pub fn hard_tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::HardTanh(x), |v| v.max(-T::one()).min(T::one()))
    }

    /// `sign(x)` with `sign(0) = +1`. Backward is straight-through, gated to
    /// `|x| <= 1`.
    pub fn binarize(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Binarize(x), |v| if v >= T::zero() { T::one() } else { -T::one() })
    }

    /// Inverted dropout. Identity when `training` is false or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(DiffError::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let (m, n) = self.shape(x);
        let mask: Vec<T> = (0..m * n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        self.mask_mul(x, Tensor::new(m, n, mask)?)
    }

    /// Elementwise product with a constant tensor.
    pub fn mask_mul(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).zip_map(&mask, |a, b| a * b)?;
        Ok(self.push(value, Op::MaskMul(x, mask), &[x]))
    }

    /// Row sums, `m x n -> m x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().copied().sum()).collect();
        Ok(self.push(Tensor::column_vector(data), Op::SumCols(x), &[x]))
    }

    /// Column sums, `m x n -> 1 x n`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let mut data = vec![T::zero(); xv.cols()];
        for r in 0..xv.rows() {
            for (d, &v) in data.iter_mut().zip(xv.row(r)) {
                *d = *d + v;
            }
        }
        Ok(self.push(Tensor::row_vector(data), Op::SumRows(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), &[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, T::of(1.0 / n as f64))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).transpose();
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Row-major reinterpretation of the same elements.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone().reshaped(rows, cols)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| DiffError::invalid("concat_cols", "no inputs"))?;
        for &p in parts {
            self.check(p)?;
        }
        let m = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != m {
                return Err(DiffError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(m, n, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (m, n) = self.shape(x);
        if start + len > n || len == 0 {
            return Err(DiffError::invalid(
                "slice_cols",
                format!("columns [{start}, {}) out of {m}x{n}", start + len),
            ));
        }
        let value = self.value(x).slice_cols(start, len);
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Softmax along each row, stabilised by the row maximum.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(DiffError::NonFinite { op: "row_softmax" });
        }
        let (m, n) = xv.shape();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = xv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        let value = Tensor::new(m, n, data)?;
        Ok(self.push(value, Op::RowSoftmax(x), &[x]))
    }

    /// Softmax of each row restricted to the entries where `mask` is true;
    /// masked-out entries are exactly zero. Every row needs one true entry.
    pub fn masked_row_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let (m, n) = xv.shape();
        if mask.len() != m * n {
            return Err(DiffError::invalid("masked_row_softmax", "mask length differs from input"));
        }
        if !xv.all_finite() {
            return Err(DiffError::NonFinite { op: "masked_row_softmax" });
        }
        let mut data = vec![T::zero(); m * n];
        for r in 0..m {
            let row = xv.row(r);
            let sel = &mask[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(sel)
                .filter(|(_, &s)| s)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(DiffError::invalid("masked_row_softmax", format!("row {r} has no selected entry")));
            }
            let mut z = T::zero();
            for c in 0..n {
                if sel[c] {
                    let e = (row[c] - max).exp();
                    data[r * n + c] = e;
                    z = z + e;
                }
            }
            for c in 0..n {
                data[r * n + c] = data[r * n + c] / z;
            }
        }
        let value = Tensor::new(m, n, data)?;
        // Softmax backward only needs the output; masked entries stay at zero.
        Ok(self.push(value, Op::RowSoftmax(x), &[x]))
    }

    /// Per-row normalisation to zero mean and unit population variance,
    /// followed by the affine map `xhat * gain + bias` (`gain`, `bias`: `1 x d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, d) = self.row_broadcast("layer_norm", x, gain)?;
        self.row_broadcast("layer_norm", x, bias)?;
        if d < 2 {
            return Err(DiffError::invalid("layer_norm", "feature width must be at least 2"));
        }
        let xv = self.value(x);
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let dn = T::of(d as f64);
        let mut xhat = Vec::with_capacity(m * d);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * d);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = (var + eps).sqrt().recip();
            inv_std.push(inv);
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat.push(h);
                out.push(h * gv[c] + bv[c]);
            }
        }
        let value = Tensor::new(m, d, out)?;
        let xhat = Tensor::new(m, d, xhat)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    fn check_groups(&self, op: &'static str, rows: usize, group: usize) -> Result<()> {
        if group == 0 || rows % group != 0 {
            return Err(DiffError::invalid(op, format!("{rows} rows not divisible into groups of {group}")));
        }
        Ok(())
    }

    /// For consecutive blocks of `group` rows, `A_g B_g^T`.
    /// `a`, `b`: `(G*g) x p`; output `(G*g) x g`.
    pub fn grouped_abt(&mut self, a: Var, b: Var, group: usize) -> Result<Var> {
        self.same_shape("grouped_abt", a, b)?;
        let (rows, p) = self.shape(a);
        self.check_groups("grouped_abt", rows, group)?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(rows * group);
        for blk in 0..rows / group {
            let off = blk * group * p;
            data.extend(mm_nt(&av[off..off + group * p], &bv[off..off + group * p], group, p, group));
        }
        let value = Tensor::new(rows, group, data)?;
        Ok(self.push(value, Op::GroupedABt { a, b, group }, &[a, b]))
    }

    /// For consecutive blocks of `group` rows, `P_g V_g`.
    /// `p`: `(G*g) x g`, `v`: `(G*g) x q`; output `(G*g) x q`.
    pub fn grouped_ab(&mut self, p: Var, v: Var, group: usize) -> Result<Var> {
        self.check(p)?;
        self.check(v)?;
        let (rows, pc) = self.shape(p);
        let (vrows, q) = self.shape(v);
        if pc != group || vrows != rows {
            return Err(DiffError::shape("grouped_ab", (rows, pc), (vrows, q)));
        }
        self.check_groups("grouped_ab", rows, group)?;
        let (pv, vv) = (self.value(p).data(), self.value(v).data());
        let mut data = Vec::with_capacity(rows * q);
        for blk in 0..rows / group {
            let po = blk * group * group;
            let vo = blk * group * q;
            data.extend(mm(&pv[po..po + group * group], &vv[vo..vo + group * q], group, group, q));
        }
        let value = Tensor::new(rows, q, data)?;
        Ok(self.push(value, Op::GroupedAB { p, v, group }, &[p, v]))
    }

    /// Sums consecutive blocks of `group` rows: `(G*g) x n -> G x n`.
    pub fn segment_sum(&mut self, x: Var, group: usize) -> Result<Var> {
        self.check(x)?;
        let (rows, n) = self.shape(x);
        self.check_groups("segment_sum", rows, group)?;
        let xv = self.value(x);
        let mut data = vec![T::zero(); rows / group * n];
        for r in 0..rows {
            let dst = &mut data[(r / group) * n..(r / group + 1) * n];
            for (d, &v) in dst.iter_mut().zip(xv.row(r)) {
                *d = *d + v;
            }
        }
        let value = Tensor::new(rows / group, n, data)?;
        Ok(self.push(value, Op::SegmentSum { x, group }, &[x]))
    }

    /// Repeats every row `group` times: `G x n -> (G*g) x n`.
    pub fn repeat_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        self.check(x)?;
        if group == 0 {
            return Err(DiffError::invalid("repeat_rows", "group must be positive"));
        }
        let xv = self.value(x);
        let (rows, n) = xv.shape();
        let mut data = Vec::with_capacity(rows * group * n);
        for r in 0..rows {
            for _ in 0..group {
                data.extend_from_slice(xv.row(r));
            }
        }
        let value = Tensor::new(rows * group, n, data)?;
        Ok(self.push(value, Op::RepeatRows { x, group }, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x)?;
        let rows = self.shape(x).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(DiffError::invalid("gather_rows", format!("row {bad} out of {rows}")));
        }
        let value = self.value(x).select_rows(idx);
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Inverse of [`Graph::gather_rows`]: row `i` of `x` is added into row
    /// `idx[i]` of a zero `total x n` output.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], total: usize) -> Result<Var> {
        self.check(x)?;
        let (rows, n) = self.shape(x);
        if rows != idx.len() {
            return Err(DiffError::shape("scatter_rows", (rows, n), (idx.len(), n)));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= total) {
            return Err(DiffError::invalid("scatter_rows", format!("row {bad} out of {total}")));
        }
        let xv = self.value(x);
        let mut data = vec![T::zero(); total * n];
        for (i, &dst) in idx.iter().enumerate() {
            for (d, &v) in data[dst * n..(dst + 1) * n].iter_mut().zip(xv.row(i)) {
                *d = *d + v;
            }
        }
        let value = Tensor::new(total, n, data)?;
        Ok(self.push(value, Op::ScatterRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Reverse sweep from a `1 x 1` loss. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(DiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(1, 1));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].as_ref() else { continue };
            let dy = dy.clone();
            self.propagate(i, &dy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.shape();
                let n = bv.cols();
                if self.needs(*a) {
                    acc(*a, Tensor::new(m, k, mm_nt(dy.data(), bv.data(), m, n, k))?);
                }
                if self.needs(*b) {
                    acc(*b, Tensor::new(k, n, mm_tn(av.data(), dy.data(), m, k, n))?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, dy.zip_map(val(*b), |g, y| g * y)?);
                acc(*b, dy.zip_map(val(*a), |g, x| g * x)?);
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, dy.zip_map(bv, |g, d| g / d)?);
                if self.needs(*b) {
                    // d(a/b)/db = -y/b
                    let t = y.zip_map(bv, |q, d| q / d)?;
                    acc(*b, dy.zip_map(&t, |g, t| -g * t)?);
                }
            }
            Op::AddRow(x, r) => {
                acc(*x, dy.clone());
                acc(*r, col_sums(dy));
            }
            Op::MulRow(x, r) => {
                let (m, n) = dy.shape();
                let rv = val(*r).data();
                let xv = val(*x).data();
                if self.needs(*x) {
                    let d = (0..m * n).map(|j| dy.data()[j] * rv[j % n]).collect();
                    acc(*x, Tensor::new(m, n, d)?);
                }
                if self.needs(*r) {
                    let mut d = vec![T::zero(); n];
                    for j in 0..m * n {
                        d[j % n] = d[j % n] + dy.data()[j] * xv[j];
                    }
                    acc(*r, Tensor::row_vector(d));
                }
            }
            Op::MulCol(x, c) => {
                let (m, n) = dy.shape();
                let cv = val(*c).data();
                let xv = val(*x).data();
                if self.needs(*x) {
                    let d = (0..m * n).map(|j| dy.data()[j] * cv[j / n]).collect();
                    acc(*x, Tensor::new(m, n, d)?);
                }
                if self.needs(*c) {
                    let mut d = vec![T::zero(); m];
                    for j in 0..m * n {
                        d[j / n] = d[j / n] + dy.data()[j] * xv[j];
                    }
                    acc(*c, Tensor::column_vector(d));
                }
            }
            Op::Scale(x, c) => acc(*x, dy.map(|g| g * *c)),
            Op::AddScalar(x) => acc(*x, dy.clone()),
            Op::Relu(x) => acc(*x, dy.zip_map(val(*x), |g, v| if v > T::zero() { g } else { T::zero() })?),
            Op::Square(x) => acc(*x, dy.zip_map(val(*x), |g, v| g * (v + v))?),
            Op::Sqrt(x) => acc(*x, dy.zip_map(y, |g, s| g / (s + s))?),
            Op::Ln(x) => acc(*x, dy.zip_map(val(*x), |g, v| g / v)?),
            Op::Recip(x) => acc(*x, dy.zip_map(y, |g, r| -g * r * r)?),
            Op::HardTanh(x) | Op::Binarize(x) => acc(
                *x,
                dy.zip_map(val(*x), |g, v| if v.abs() <= T::one() { g } else { T::zero() })?,
            ),
            Op::MaskMul(x, mask) => acc(*x, dy.zip_map(mask, |g, k| g * k)?),
            Op::SumCols(x) => {
                let (m, n) = val(*x).shape();
                let d = (0..m * n).map(|j| dy.data()[j / n]).collect();
                acc(*x, Tensor::new(m, n, d)?);
            }
            Op::SumRows(x) => {
                let (m, n) = val(*x).shape();
                let d = (0..m * n).map(|j| dy.data()[j % n]).collect();
                acc(*x, Tensor::new(m, n, d)?);
            }
            Op::SumAll(x) => {
                let (m, n) = val(*x).shape();
                acc(*x, Tensor::full(m, n, dy.item()));
            }
            Op::Transpose(x) => acc(*x, dy.transpose()),
            Op::Reshape(x) => {
                let (m, n) = val(*x).shape();
                acc(*x, dy.clone().reshaped(m, n)?);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.needs(p) {
                        acc(p, dy.slice_cols(start, w));
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = val(*x).shape();
                let w = dy.cols();
                let mut d = vec![T::zero(); m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + w].copy_from_slice(dy.row(r));
                }
                acc(*x, Tensor::new(m, n, d)?);
            }
            Op::RowSoftmax(x) => {
                let (m, n) = y.shape();
                let mut d = Vec::with_capacity(m * n);
                for r in 0..m {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                acc(*x, Tensor::new(m, n, d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, d) = y.shape();
                let gv = val(*gain).data();
                if self.needs(*x) {
                    let dn = T::of(d as f64);
                    let mut out = Vec::with_capacity(m * d);
                    for r in 0..m {
                        let (gr, hr) = (dy.row(r), xhat.row(r));
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let s1: T = dh.iter().copied().sum();
                        let s2: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[r] / dn;
                        out.extend((0..d).map(|c| k * (dn * dh[c] - s1 - hr[c] * s2)));
                    }
                    acc(*x, Tensor::new(m, d, out)?);
                }
                if self.needs(*gain) {
                    acc(*gain, col_sums(&dy.zip_map(xhat, |a, b| a * b)?));
                }
                acc(*bias, col_sums(dy));
            }
            Op::GroupedABt { a, b, group } => {
                let g = *group;
                let (av, bv) = (val(*a), val(*b));
                let (rows, p) = av.shape();
                let mut da = vec![T::zero(); rows * p];
                let mut db = vec![T::zero(); rows * p];
                for blk in 0..rows / g {
                    let off = blk * g * p;
                    let dyb = &dy.data()[blk * g * g..(blk + 1) * g * g];
                    let a_b = &av.data()[off..off + g * p];
                    let b_b = &bv.data()[off..off + g * p];
                    // dA = dY B ; dB = dY^T A
                    da[off..off + g * p].copy_from_slice(&mm(dyb, b_b, g, g, p));
                    db[off..off + g * p].copy_from_slice(&mm_tn(dyb, a_b, g, g, p));
                }
                acc(*a, Tensor::new(rows, p, da)?);
                acc(*b, Tensor::new(rows, p, db)?);
            }
            Op::GroupedAB { p, v, group } => {
                let g = *group;
                let (pv, vv) = (val(*p), val(*v));
                let (rows, q) = vv.shape();
                let mut dp = vec![T::zero(); rows * g];
                let mut dv = vec![T::zero(); rows * q];
                for blk in 0..rows / g {
                    let po = blk * g * g;
                    let vo = blk * g * q;
                    let dyb = &dy.data()[vo..vo + g * q];
                    // dP = dY V^T ; dV = P^T dY
                    dp[po..po + g * g].copy_from_slice(&mm_nt(dyb, &vv.data()[vo..vo + g * q], g, q, g));
                    dv[vo..vo + g * q].copy_from_slice(&mm_tn(&pv.data()[po..po + g * g], dyb, g, g, q));
                }
                acc(*p, Tensor::new(rows, g, dp)?);
                acc(*v, Tensor::new(rows, q, dv)?);
            }
            Op::SegmentSum { x, group } => {
                let (rows, n) = val(*x).shape();
                let d = (0..rows * n).map(|j| dy.data()[(j / n / group) * n + j % n]).collect();
                acc(*x, Tensor::new(rows, n, d)?);
            }
            Op::RepeatRows { x, group } => {
                let (rows, n) = val(*x).shape();
                let mut d = vec![T::zero(); rows * n];
                for r in 0..rows * group {
                    let dst = &mut d[(r / group) * n..(r / group + 1) * n];
                    for (o, &v) in dst.iter_mut().zip(dy.row(r)) {
                        *o = *o + v;
                    }
                }
                acc(*x, Tensor::new(rows, n, d)?);
            }
            Op::GatherRows { x, idx } => {
                let (rows, n) = val(*x).shape();
                let mut d = vec![T::zero(); rows * n];
                for (i, &src) in idx.iter().enumerate() {
                    for (o, &v) in d[src * n..(src + 1) * n].iter_mut().zip(dy.row(i)) {
                        *o = *o + v;
                    }
                }
                acc(*x, Tensor::new(rows, n, d)?);
            }
            Op::ScatterRows { x, idx } => acc(*x, dy.select_rows(idx)),
        }
        Ok(())
    }
}

fn col_sums<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let mut d = vec![T::zero(); t.cols()];
    for r in 0..t.rows() {
        for (o, &v) in d.iter_mut().zip(t.row(r)) {
            *o = *o + v;
        }
    }
    Tensor::row_vector(d)
}

/// Result of a reverse sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when `v` does not require a gradient or the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
