use std::collections::BTreeMap;

use super::{Grads, ParamSet, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    MulCol(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// True iff some parameter reaches this node.
    needs_grad: bool,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::MeanRows(a) => vec![*a],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dynamic Wengert tape. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> (f64, f64) {
    // tanh approximation; returns value and derivative.
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c (m×n) = beta·c + a (m×k) · b (k×n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a`, `b`, and the row-major
    // m×n buffer `c`; all callers derive them from checked shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Largest allowed entry; NaN if any allowed entry is NaN, `None` if no
/// entry is allowed.
fn masked_max(row: &[f64], allowed: impl Fn(usize) -> bool) -> Option<f64> {
    let mut max = None;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) {
            if v.is_nan() {
                return Some(f64::NAN);
            }
            max = Some(max.map_or(v, |m: f64| m.max(v)));
        }
    }
    max
}

/// Row-wise softmax over entries where `mask` is true (all entries if `None`).
pub(crate) fn softmax_rows(
    data: &[f64],
    cols: usize,
    mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; data.len()];
    for (r, (row, out_row)) in data.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let allowed = |j: usize| mask.map_or(true, |m| m[r * cols + j]);
        let max = masked_max(row, allowed).ok_or(TensorError::FullyMasked { row: r })?;
        let mut sum = 0.0;
        for j in 0..cols {
            if allowed(j) {
                let e = (row[j] - max).exp();
                out_row[j] = e;
                sum += e;
            }
        }
        out_row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Bind a named parameter. Binding the same name twice returns the same
    /// handle so each parameter has exactly one gradient slot.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?.clone();
        let v = self.push(t, Op::Leaf);
        self.nodes[v.0].needs_grad = true;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradient of the last `backward` loss; `None` for values no parameter reaches.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            (k as isize, 1),
            tb.data(),
            (1, k as isize),
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNT(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Broadcast-add a length-`n` row to every row of an `m×n` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (_, n) = ta.dims2();
        if tr.len() != n {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(tr.data()) {
                *x += b;
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// Multiply every entry by a one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != 1 {
            return Err(shape_err("mul_scalar", ta, ts));
        }
        let k = ts.data()[0];
        let v = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * k).collect())?;
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    /// Scale row `i` of `a (m×n)` by `col[i]` (`col` has `m` entries).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (m, n) = ta.dims2();
        if tc.len() != m {
            return Err(shape_err("mul_col", ta, tc));
        }
        let mut data = ta.data().to_vec();
        for (chunk, c) in data.chunks_mut(n).zip(tc.data()) {
            chunk.iter_mut().for_each(|x| *x *= c);
        }
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulCol(a, col)))
    }

    /// `alpha·a + beta`
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let ta = self.value(a);
        let v = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|x| alpha * x + beta).collect(),
        )
        .expect("same layout");
        self.push(v, Op::Affine(a, alpha))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let v = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu(x).0).collect())
            .expect("same layout");
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let v = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| sigmoid(x)).collect())
            .expect("same layout");
        self.push(v, Op::Sigmoid(a))
    }

    /// Softmax over the last axis. Masked (`false`) entries are exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = ta.dims2();
        if let Some(m) = mask {
            if m.len() != ta.len() {
                return Err(TensorError::Shape {
                    op: "softmax mask",
                    lhs: ta.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let out = softmax_rows(ta.data(), n, mask)?;
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, optionally restricted
    /// to masked support.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (b, n) = tl.dims2();
        if targets.len() != b {
            return Err(TensorError::Shape {
                op: "cross_entropy targets",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        for (row, &t) in targets.iter().enumerate() {
            let allowed = mask.map_or(true, |m| m[row * n + t]);
            if t >= n || !allowed {
                return Err(TensorError::TargetOutOfRange {
                    row,
                    target: t,
                    classes: n,
                });
            }
        }
        let probs = softmax_rows(tl.data(), n, mask)?;
        // log-sum-exp form keeps saturated logits exact
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = tl.row(r);
            let allowed = |j: usize| mask.map_or(true, |m| m[r * n + j]);
            let max = masked_max(row, allowed).expect("checked by softmax_rows");
            let lse = max
                + (0..n)
                    .filter(|&j| allowed(j))
                    .map(|j| (row[j] - max).exp())
                    .sum::<f64>()
                    .ln();
            loss += lse - row[t];
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Row-wise layer normalization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        if n < 2 {
            return Err(TensorError::Config(format!(
                "layer_norm needs a normalized extent >= 2, got {n}"
            )));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != n || tb.len() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                normed[r * n + j] = xh;
                out[r * n + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| {
            TensorError::Config("concat_rows of nothing".into())
        })?);
        let n = first.dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.dims2().1 != n {
                return Err(shape_err("concat_rows", first, t));
            }
            rows += t.dims2().0;
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| {
            TensorError::Config("concat_cols of nothing".into())
        })?);
        let m = first.dims2().0;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.dims2().0 != m {
                return Err(shape_err("concat_cols", first, t));
            }
            total += t.dims2().1;
        }
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.dims2().1;
            for r in 0..m {
                data[r * total + offset..r * total + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        let v = Tensor::new(vec![m, total], data)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if start >= end || end > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: end,
                extent: n,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&ta.row(r)[start..end]);
        }
        let v = Tensor::new(vec![m, w], data)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Select rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: m,
                });
            }
            data.extend_from_slice(ta.row(i));
        }
        let v = Tensor::new(vec![idx.len(), n], data)?;
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    /// Place row `k` of `a` at row `idx[k]` of a zero `rows×n` tensor.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        if idx.len() != m {
            return Err(TensorError::Shape {
                op: "scatter_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let mut data = vec![0.0; rows * n];
        let mut seen = vec![false; rows];
        for (k, &i) in idx.iter().enumerate() {
            if i >= rows || seen[i] {
                return Err(TensorError::Index {
                    op: "scatter_rows",
                    index: i,
                    extent: rows,
                });
            }
            seen[i] = true;
            data[i * n..(i + 1) * n].copy_from_slice(ta.row(k));
        }
        let v = Tensor::new(vec![rows, n], data)?;
        Ok(self.push(v, Op::ScatterRows(a, idx.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = ta.data()[r * n + c];
            }
        }
        let v = Tensor::new(vec![n, m], data)?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column-wise mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = ta.dims2();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let v = Tensor::new(vec![1, n], out).expect("non-empty");
        self.push(v, Op::MeanRows(a))
    }

    /// Sum of several same-shape values.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let mut iter = parts.iter();
        let mut acc = *iter
            .next()
            .ok_or_else(|| TensorError::Config("add_all of nothing".into()))?;
        for &p in iter {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    // ---- backward ----------------------------------------------------------

    fn acc(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    /// Gradient slot of `target` (zero-initialized) together with the value
    /// of `other`; `None` when `target` needs no gradient.
    fn slot_and_value(&mut self, target: Var, other: Var) -> Option<(&mut [f64], &[f64])> {
        if !self.nodes[target.0].needs_grad {
            return None;
        }
        let len = self.nodes[target.0].value.len();
        let slot = self.grads[target.0].get_or_insert_with(|| vec![0.0; len]);
        Some((slot.as_mut_slice(), self.nodes[other.0].value.data()))
    }

    /// Reverse sweep from a scalar `loss`; returns parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Shape {
                op: "backward (loss must be scalar)",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![1],
            });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        let mut out = Grads::new();
        for (name, &v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                let shape = self.nodes[v.0].value.shape().to_vec();
                out.insert(name.clone(), Tensor::new(shape, g.clone())?);
            }
        }
        Ok(out)
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily take the op to appease the borrow checker.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                // dA += G · Bᵀ
                if let Some((da, bv)) = self.slot_and_value(*a, *b) {
                    gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), 1.0, da);
                }
                // dB += Aᵀ · G
                if let Some((db, av)) = self.slot_and_value(*b, *a) {
                    gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), 1.0, db);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().0;
                // C = A Bᵀ: dA += G · B ; dB += Gᵀ · A
                if let Some((da, bv)) = self.slot_and_value(*a, *b) {
                    gemm(m, n, k, g, (n as isize, 1), bv, (k as isize, 1), 1.0, da);
                }
                if let Some((db, av)) = self.slot_and_value(*b, *a) {
                    gemm(n, m, k, g, (1, n as isize), av, (k as isize, 1), 1.0, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, g);
                self.acc(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc(*a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.acc(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                self.acc(*a, &da);
                self.acc(*b, &db);
            }
            Op::AddRow(a, row) => {
                self.acc(*a, g);
                let n = self.value(*row).len();
                let mut dr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    dr.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                }
                self.acc(*row, &dr);
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).data()[0];
                let ds: f64 = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).sum();
                let da: Vec<f64> = g.iter().map(|x| x * k).collect();
                self.acc(*a, &da);
                self.acc(*s, &[ds]);
            }
            Op::MulCol(a, col) => {
                let (m, n) = self.value(*a).dims2();
                let cv = self.value(*col).data().to_vec();
                let av = self.value(*a).data();
                let mut da = vec![0.0; m * n];
                let mut dc = vec![0.0; m];
                for r in 0..m {
                    for j in 0..n {
                        da[r * n + j] = g[r * n + j] * cv[r];
                        dc[r] += g[r * n + j] * av[r * n + j];
                    }
                }
                self.acc(*a, &da);
                self.acc(*col, &dc);
            }
            Op::Affine(a, alpha) => {
                let da: Vec<f64> = g.iter().map(|x| x * alpha).collect();
                self.acc(*a, &da);
            }
            Op::Gelu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| g * gelu(x).1)
                    .collect();
                self.acc(*a, &da);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.acc(*a, &da);
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let n = self.nodes[i].value.dims2().1;
                let mut da = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(*a, &da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).dims2().1;
                let b = targets.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / b).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * n + t] -= g[0] / b;
                }
                self.acc(*logits, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let n = self.value(*gain).len();
                let gv = self.value(*gain).data().to_vec();
                let mut dx = vec![0.0; normed.len()];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &normed[r * n..(r + 1) * n];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let dxh = gr[j] * gv[j];
                        sum_d += dxh;
                        sum_dx += dxh * xr[j];
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                    }
                    for j in 0..n {
                        let dxh = gr[j] * gv[j];
                        dx[r * n + j] =
                            is * (dxh - sum_d / n as f64 - xr[j] * sum_dx / n as f64);
                    }
                }
                self.acc(*x, &dx);
                self.acc(*gain, &dgain);
                self.acc(*bias, &dbias);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.dims2().1;
                let mut offset = 0;
                for &p in parts {
                    let (m, c) = self.value(p).dims2();
                    let mut d = Vec::with_capacity(m * c);
                    for r in 0..m {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    self.acc(p, &d);
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.value(*a).dims2();
                let w = self.nodes[i].value.dims2().1;
                let start = *start;
                self.acc_with(*a, |da| {
                    for r in 0..m {
                        for j in 0..w {
                            da[r * n + start + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let n = self.value(*a).dims2().1;
                self.acc_with(*a, |da| {
                    for (k, &r) in idx.iter().enumerate() {
                        for j in 0..n {
                            da[r * n + j] += g[k * n + j];
                        }
                    }
                });
            }
            Op::ScatterRows(a, idx) => {
                let n = self.value(*a).dims2().1;
                let mut d = Vec::with_capacity(idx.len() * n);
                for &r in idx {
                    d.extend_from_slice(&g[r * n..(r + 1) * n]);
                }
                self.acc(*a, &d);
            }
            Op::Reshape(a) => self.acc(*a, g),
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        d[r * n + c] = g[c * m + r];
                    }
                }
                self.acc(*a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.value(*a).len()];
                self.acc(*a, &d);
            }
            Op::MeanRows(a) => {
                let (m, n) = self.value(*a).dims2();
                let mut d = Vec::with_capacity(m * n);
                for _ in 0..m {
                    d.extend(g.iter().map(|x| x / m as f64));
                }
                self.acc(*a, &d);
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_basis() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = tape.constant(t(&[2, 1], &[2.0, 3.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax(x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let y = tape.softmax(x, None).unwrap();
        assert_eq!(tape.value(y).data()[0], 1.0);
        assert!(tape.value(y).is_finite());

        let x = tape.constant(t(&[1, 3], &[3.0, 7.0, 5.0]));
        let y = tape.softmax(x, Some(&[true, false, true])).unwrap();
        let (e3, e5) = (3f64.exp(), 5f64.exp());
        let want = [e3 / (e3 + e5), 0.0, e5 / (e3 + e5)];
        for (a, b) in tape.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(tape.value(y).data()[1], 0.0);

        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        assert!(matches!(
            tape.softmax(x, Some(&[false, false])),
            Err(TensorError::FullyMasked { row: 0 })
        ));
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let l = tape.cross_entropy(x, &[2], None).unwrap();
        assert!((tape.scalar_value(l) - 4f64.ln()).abs() < 1e-12);

        let x = tape.constant(t(&[2, 3], &[50.0, 0.0, 0.0, 0.0, 0.0, 50.0]));
        let l = tape.cross_entropy(x, &[0, 2], None).unwrap();
        assert!(tape.scalar_value(l) <= 1e-10);

        assert!(tape.cross_entropy(x, &[0, 3], None).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::filled(&[3], 1.0));
        let bias = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[1, 3], &[2.0, 2.0, 2.0]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

        let gain = tape.constant(Tensor::filled(&[2], 1.0));
        let bias = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, gain, bias).unwrap();
        let got = tape.value(y).data();
        assert!((got[0] - 1.0).abs() < 1e-5 && (got[1] + 1.0).abs() < 1e-5);

        let gain = tape.constant(Tensor::filled(&[1], 1.0));
        let bias = tape.constant(Tensor::zeros(&[1]));
        let x = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        assert!(tape.layer_norm(x, gain, bias).is_err());
    }

    #[test]
    fn scatter_gather_roundtrip_grad() {
        let mut params = ParamSet::new();
        params.insert("a", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mut tape = Tape::new();
        let a = tape.param(&params, "a").unwrap();
        let s = tape.scatter_rows(a, &[3, 0], 4).unwrap();
        let back = tape.gather_rows(s, &[0, 3, 3]).unwrap();
        assert_eq!(tape.value(back).data(), &[3.0, 4.0, 1.0, 2.0, 1.0, 2.0]);
        let loss = tape.sum(back);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("a").unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn param_bound_once() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let a = tape.param(&params, "w").unwrap();
        let b = tape.param(&params, "w").unwrap();
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[6.0]);
    }
}
