use rand::Rng;

use super::tensor::{Real, Tensor};
use super::{GELU_CUBIC, GELU_SQRT_2_OVER_PI};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
    StopGradient,
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat { parts: Vec<Var>, axis_cols: bool },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records primitive operations in execution order. Node indices are a
/// topological order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every tracked node of a tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when no tracked path reaches it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_nt_acc<T: Real>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + p] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn_acc<T: Real>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_SQRT_2_OVER_PI);
    let a = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_SQRT_2_OVER_PI);
    let a = T::of(GELU_CUBIC);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let tracked = self.tracked(x);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(mismatch(op, s, &[0, 0])),
        }
    }

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.unary(x, value, Op::Transpose(x)))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    fn row_broadcast(&mut self, x: Var, row: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let c = self.value(x).cols();
        if self.shape(row) != [c] {
            return Err(mismatch(op, self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| f(a, b)))
            .collect();
        Tensor::new(self.shape(x).to_vec(), data)
    }

    /// Adds a trailing-axis vector to every row (bias addition).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.row_broadcast(x, bias, "add_row", |a, b| a + b)?;
        Ok(self.binary(x, bias, v, Op::AddRow(x, bias)))
    }

    /// Multiplies every row by a trailing-axis vector (gain).
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let v = self.row_broadcast(x, gain, "mul_row", |a, b| a * b)?;
        Ok(self.binary(x, gain, v, Op::MulRow(x, gain)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.unary(x, value, Op::Scale(x, s))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape(x).to_vec(), data).expect("same shape")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.map(x, T::exp);
        self.unary(x, v, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        let v = self.map(x, T::ln);
        Ok(self.unary(x, v, Op::Log(x)))
    }

    /// Tanh-approximated gelu: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map(x, gelu);
        self.unary(x, v, Op::Gelu(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last axis restricted to columns where `allowed` is
    /// true; disallowed columns get probability exactly 0.
    pub fn masked_softmax(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let c = self.value(x).cols();
        if let Some(mask) = allowed {
            if mask.len() != c {
                return Err(mismatch("masked_softmax", self.shape(x), &[mask.len()]));
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::invalid("masked_softmax: every column is masked"));
            }
        }
        let ok = |j: usize| allowed.is_none_or(|m| m[j]);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| ok(*j))
                .fold(T::neg_infinity(), |m, (_, &v)| m.max(v));
            let mut total = T::zero();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if ok(j) { (*v - max).exp() } else { T::zero() };
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.unary(x, value, Op::Softmax(x)))
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no
    /// affine parameters).
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let c = self.value(x).cols();
        let n = T::of(c as f64);
        let src = self.value(x).data();
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(src.len() / c.max(1));
        for row in src.chunks(c) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let value = Tensor::new(self.shape(x).to_vec(), xhat.clone()).expect("same shape");
        self.unary(x, value, Op::LayerNorm { x, xhat, inv_std })
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales the
    /// survivors by `1 / (1 − rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.unary(x, value, Op::Dropout { x, mask }))
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("embedding id {bad} out of range for table of {v} rows")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.unary(
            table,
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-row cross-entropy `logsumexp(row) − row[target]`, shape `[R]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != r {
            return Err(mismatch("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!("target {bad} out of range for {c} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = Vec::with_capacity(r * c);
        let mut losses = Vec::with_capacity(r);
        for (row, &t) in src.chunks(c).zip(targets) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + total.ln();
            losses.push(lse - row[t]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let value = Tensor::vector(losses);
        Ok(self.unary(
            logits,
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Scales each last-axis row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(src.len() / c.max(1));
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(c) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::NonFinite("l2_normalize of a zero or non-finite row".into()));
            }
            norms.push(norm);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.unary(x, value, Op::L2Normalize { x, norms }))
    }

    /// Identity forward; contributes nothing to gradients.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Empty("mean of an empty tensor".into()));
        }
        let s: T = self.value(x).data().iter().copied().sum();
        Ok(self.unary(x, Tensor::scalar(s / T::of(n as f64)), Op::Mean(x)))
    }

    /// Sums the last axis: `[R×C] → [R]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims(x, "sum_last")?;
        let data = self.value(x).data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        Ok(self.unary(x, Tensor::vector(data), Op::SumLast(x)))
    }

    /// Stacks matrices along rows (`axis_cols = false`) or columns.
    fn concat(&mut self, parts: &[Var], axis_cols: bool) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Empty("concat of nothing".into()))?;
        let (r0, c0) = self.matrix_dims(first, "concat")?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat")?;
            if (axis_cols && r != r0) || (!axis_cols && c != c0) {
                return Err(mismatch("concat", self.shape(first), self.shape(p)));
            }
            dims.push((r, c));
        }
        let (value, tracked) = if axis_cols {
            let total: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row(i));
                }
            }
            (Tensor::new(vec![r0, total], out)?, parts.iter().any(|&p| self.tracked(p)))
        } else {
            let total: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(total * c0);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            (Tensor::new(vec![total, c0], out)?, parts.iter().any(|&p| self.tracked(p)))
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis_cols,
            },
            tracked,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, false)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, true)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_rows")?;
        if start + len > r {
            return Err(mismatch("slice_rows", self.shape(x), &[start + len, c]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        Ok(self.unary(x, value, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if start + len > c {
            return Err(mismatch("slice_cols", self.shape(x), &[r, start + len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        Ok(self.unary(x, value, Op::SliceCols { x, start }))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "select_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(mismatch("select_rows", self.shape(x), &[bad + 1, c]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![idx.len(), c], out)?;
        Ok(self.unary(x, value, Op::SelectRows { x, idx: idx.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Accumulates `f(j)` into the gradient of `v` for every element j.
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let nn = self.shape(b)[1];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                acc(a, &|ga| gemm_nt_acc(g, bv, ga, m, k, nn));
                acc(b, &|gb| gemm_tn_acc(av, g, gb, m, k, nn));
            }
            &Op::Transpose(x) => {
                let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                acc(x, &|gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &|ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(b, &|gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            &Op::Sub(a, b) => {
                acc(a, &|ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(b, &|gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                acc(a, &|ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * bv[j];
                    }
                });
                acc(b, &|gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * av[j];
                    }
                });
            }
            &Op::AddRow(x, bias) => {
                let c = self.value(bias).len();
                acc(x, &|gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
                acc(bias, &|gb| {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            &Op::MulRow(x, gain) => {
                let c = self.value(gain).len();
                let (xv, wv) = (self.value(x).data(), self.value(gain).data());
                acc(x, &|gx| {
                    for (j, v) in gx.iter_mut().enumerate() {
                        *v += g[j] * wv[j % c];
                    }
                });
                acc(gain, &|gw| {
                    for (j, &gj) in g.iter().enumerate() {
                        gw[j % c] += gj * xv[j];
                    }
                });
            }
            &Op::Scale(x, s) => acc(x, &|gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * s)),
            &Op::Exp(x) => acc(x, &|gx| {
                for j in 0..gx.len() {
                    gx[j] += g[j] * out[j];
                }
            }),
            &Op::Log(x) => {
                let xv = self.value(x).data();
                acc(x, &|gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] / xv[j];
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                acc(x, &|gx| {
                    for j in 0..gx.len() {
                        gx[j] += g[j] * gelu_grad(xv[j]);
                    }
                });
            }
            &Op::Softmax(x) => {
                let c = node.value.cols();
                acc(x, &|gx| {
                    for ((gr, yr), xr) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let c = node.value.cols();
                let n = T::of(c as f64);
                acc(*x, &|gx| {
                    for (r, ((gr, hr), xr)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let sum_g: T = gr.iter().copied().sum();
                        let sum_gh: T = gr.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[r] / n;
                        for j in 0..c {
                            xr[j] += k * (n * gr[j] - sum_g - hr[j] * sum_gh);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &|gx| {
                for j in 0..gx.len() {
                    gx[j] += g[j] * mask[j];
                }
            }),
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                acc(*table, &|gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[row * d + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.value(*logits).cols();
                acc(*logits, &|gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * c + j] += g[r] * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let c = node.value.cols();
                acc(*x, &|gx| {
                    for (r, ((gr, yr), xr)) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            xr[j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                });
            }
            &Op::Sum(x) => acc(x, &|gx| gx.iter_mut().for_each(|v| *v += g[0])),
            &Op::Mean(x) => {
                let k = g[0] / T::of(self.value(x).len() as f64);
                acc(x, &|gx| gx.iter_mut().for_each(|v| *v += k));
            }
            &Op::SumLast(x) => {
                let c = self.value(x).cols();
                acc(x, &|gx| {
                    for (j, v) in gx.iter_mut().enumerate() {
                        *v += g[j / c];
                    }
                });
            }
            Op::Concat { parts, axis_cols } => {
                if *axis_cols {
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        acc(p, &|gp| {
                            for (i, row) in gp.chunks_mut(c).enumerate() {
                                for j in 0..c {
                                    row[j] += g[i * total + offset + j];
                                }
                            }
                        });
                        offset += c;
                    }
                } else {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        acc(p, &|gp| {
                            for j in 0..len {
                                gp[j] += g[offset + j];
                            }
                        });
                        offset += len;
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                let c = self.value(x).cols();
                acc(x, &|gx| {
                    for (j, &v) in g.iter().enumerate() {
                        gx[start * c + j] += v;
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let c = self.value(x).cols();
                let len = node.value.cols();
                acc(x, &|gx| {
                    for (i, row) in g.chunks(len).enumerate() {
                        for j in 0..len {
                            gx[i * c + start + j] += row[j];
                        }
                    }
                });
            }
            Op::SelectRows { x, idx } => {
                let c = self.value(*x).cols();
                acc(*x, &|gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g[r * c + j];
                        }
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &|gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b)),
        }
    }
}
