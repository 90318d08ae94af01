//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward op appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products.
//! Every op output is checked for NaN/Inf and the op fails on the first
//! non-finite value.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct ParamKey {
    store: u16,
    index: usize,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var, Option<Vec<bool>>),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Pick(Var, Vec<usize>),
    LayerNorm(Var, Vec<T>),
    L2Rows(Var, Vec<T>),
    PairwiseSqDist(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Pick(..) => "pick",
            Op::LayerNorm(..) => "layer_norm",
            Op::L2Rows(..) => "l2_normalize",
            Op::PairwiseSqDist(_) => "pairwise_sq_dist",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`, or `None` when `v` does not reach the output.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamKey, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("forward {}", op.name())));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// Registers a parameter on the tape. Frozen parameters become constants.
    /// Registering the same parameter twice returns the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let key = ParamKey { store: store.tag(), index: id.0 };
        if let Some(&v) = self.params.get(&key) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.trainable)?;
        self.params.insert(key, v);
        Ok(v)
    }

    fn shape_err(&self, what: &str, a: Var, b: Var) -> Error {
        Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(self.shape_err("bmm", a, b));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            matmul_into(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(vec![bs, m, n], out), Op::BatchMatMul(a, b), ng)
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 && s.len() != 3 {
            return Err(Error::Shape(format!("transpose needs rank 2 or 3, got {s:?}")));
        }
        let r = s.len();
        let (m, n) = (s[r - 2], s[r - 1]);
        let out = transpose_data(self.value(a).data(), m, n);
        let mut shape = s.clone();
        shape.swap(r - 2, r - 1);
        let ng = self.needs(a);
        self.push(Tensor::from_parts(shape, out), Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        self.push(t, Op::Reshape(a), ng)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(what, a, b));
        }
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |p, q| p + q)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |p, q| p - q)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |p, q| p * q)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    fn row_broadcast(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if y.len() != x.cols() {
            return Err(self.shape_err(what, a, b));
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &p)| f(p, y.data()[i % c]))
            .collect();
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }

    /// `a + b` with `b` (length = last extent of `a`) broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_broadcast(a, b, "add_row", |p, q| p + q)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::AddRow(a, b), ng)
    }

    /// `a * b` with `b` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_broadcast(a, b, "mul_row", |p, q| p * q)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::MulRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        let t = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        let t = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let t = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(t, op, ng)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    /// Square root; the derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), |x| {
            let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
            T::c(0.5) * x * (T::one() + u.tanh())
        })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let ng = self.needs(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Log-softmax along the last axis. Entries flagged in `exclude` take no
    /// part in the normalizer; their output is 0 and they receive no gradient.
    pub fn log_softmax(&mut self, a: Var, exclude: Option<Vec<bool>>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = &exclude {
            if m.len() != x.len() {
                return Err(Error::Shape("log_softmax mask length".into()));
            }
        }
        let c = x.cols();
        let mut out = x.data().to_vec();
        for (r, row) in out.chunks_mut(c).enumerate() {
            let live = |j: usize| exclude.as_ref().map_or(true, |m| !m[r * c + j]);
            let mx = (0..c).filter(|&j| live(j)).fold(T::neg_infinity(), |m, j| m.max(row[j]));
            if mx == T::neg_infinity() {
                return Err(Error::InvalidArgument("log_softmax row fully excluded".into()));
            }
            let s: T = (0..c).filter(|&j| live(j)).map(|j| (row[j] - mx).exp()).sum();
            let lse = mx + s.ln();
            for (j, v) in row.iter_mut().enumerate() {
                *v = if live(j) { *v - lse } else { T::zero() };
            }
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let ng = self.needs(a);
        self.push(t, Op::LogSoftmax(a, exclude), ng)
    }

    /// Log-sum-exp of each row (last axis), giving a `[rows]` vector.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let out: Vec<T> = x
            .data()
            .chunks(c)
            .map(|row| {
                let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
            })
            .collect();
        let n = out.len();
        let ng = self.needs(a);
        self.push(Tensor::from_parts(vec![n], out), Op::LogSumExp(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum::<T>() / T::c(x.len() as f64);
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Stacks matrix views (equal last extent) along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(self.shape_err("concat_rows", first, p));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / c;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).rows() != rows || self.shape(p).len() != 2 {
                return Err(self.shape_err("concat_cols", first, p));
            }
            widths.push(self.value(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rows = x.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("gather_rows index {bad} >= {rows}")));
        }
        if idx.is_empty() {
            return Err(Error::Shape("gather_rows with no indices".into()));
        }
        let t = x.select_rows(idx);
        let ng = self.needs(a);
        self.push(t, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 || len == 0 || start + len > x.cols() {
            return Err(Error::Shape(format!("slice_cols {start}+{len} of {:?}", x.shape())));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let t = Tensor::from_parts(vec![x.rows(), len], data);
        let ng = self.needs(a);
        self.push(t, Op::SliceCols(a, start), ng)
    }

    /// Picks single elements by flat index into a 1-D tensor.
    pub fn pick(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if flat.is_empty() || flat.iter().any(|&i| i >= x.len()) {
            return Err(Error::Shape("pick index out of range".into()));
        }
        let data = flat.iter().map(|&i| x.data()[i]).collect();
        let t = Tensor::from_parts(vec![flat.len()], data);
        let ng = self.needs(a);
        self.push(t, Op::Pick(a, flat.to_vec()), ng)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let n = T::c(c as f64);
        let mut out = x.data().to_vec();
        let mut rstds = Vec::with_capacity(x.rows());
        for row in out.chunks_mut(c) {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let r = T::one() / (var + T::c(eps)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mu) * r;
            }
            rstds.push(r);
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let ng = self.needs(a);
        self.push(t, Op::LayerNorm(a, rstds), ng)
    }

    /// Scales each row to unit Euclidean norm. Fails on a zero row.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(x.rows());
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n <= T::zero() {
                return Err(Error::ZeroVector);
            }
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        let ng = self.needs(a);
        self.push(t, Op::L2Rows(a, norms), ng)
    }

    /// Squared Euclidean distances between all row pairs of an `[n, d]` matrix.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::Shape("pairwise_sq_dist needs a matrix".into()));
        }
        let n = x.rows();
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = x
                    .row(i)
                    .iter()
                    .zip(x.row(j))
                    .map(|(&p, &q)| (p - q) * (p - q))
                    .sum();
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::from_parts(vec![n, n], out), Op::PairwiseSqDist(a), ng)
    }

    /// Cosine similarity between every row of `a` and every row of `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize_rows(a)?;
        let nb = self.l2_normalize_rows(b)?;
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::NonScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("backward {}", node.op.name())));
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs backward and adds the gradients of this store's trainable
    /// parameters into their `grad` slots.
    pub fn accumulate(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (key, &var) in &self.params {
            if key.store != store.tag() {
                continue;
            }
            let p = store.get_mut(ParamId(key.index));
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.wrt(var) {
                for (acc, &x) in p.grad.data_mut().iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let ga = self.slot(grads, *a);
                    matmul_bt_into(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.needs(*b) {
                    let gb = self.slot(grads, *b);
                    matmul_at_into(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.needs(*a) {
                    let db = self.value(*b).data();
                    let ga = self.slot(grads, *a);
                    for i in 0..bs {
                        matmul_bt_into(
                            &g[i * m * n..(i + 1) * m * n],
                            &db[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if self.needs(*b) {
                    let da = self.value(*a).data();
                    let gb = self.slot(grads, *b);
                    for i in 0..bs {
                        matmul_at_into(
                            &da[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let r = s.len();
                let back = transpose_data(g, s[r - 2], s[r - 1]);
                add_into(self.slot(grads, *a), &back);
            }
            Op::Reshape(a) => add_into(self.slot(grads, *a), g),
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(self.slot(grads, *a), g);
                }
                if self.needs(*b) {
                    add_into(self.slot(grads, *b), g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(self.slot(grads, *a), g);
                }
                if self.needs(*b) {
                    for (o, &x) in self.slot(grads, *b).iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = self.value(*b).data();
                    for ((o, &x), &w) in self.slot(grads, *a).iter_mut().zip(g).zip(vb) {
                        *o += x * w;
                    }
                }
                if self.needs(*b) {
                    let va = self.value(*a).data();
                    for ((o, &x), &w) in self.slot(grads, *b).iter_mut().zip(g).zip(va) {
                        *o += x * w;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if self.needs(*a) {
                    add_into(self.slot(grads, *a), g);
                }
                if self.needs(*b) {
                    let gb = self.slot(grads, *b);
                    let c = gb.len();
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % c] += x;
                    }
                }
            }
            Op::MulRow(a, b) => {
                let vb = self.value(*b).data();
                let c = vb.len();
                if self.needs(*a) {
                    for (i, (o, &x)) in self.slot(grads, *a).iter_mut().zip(g).enumerate() {
                        *o += x * vb[i % c];
                    }
                }
                if self.needs(*b) {
                    let va = self.value(*a).data();
                    let gb = self.slot(grads, *b);
                    for (i, &x) in g.iter().enumerate() {
                        gb[i % c] += x * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                for (o, &x) in self.slot(grads, *a).iter_mut().zip(g) {
                    *o += x * *s;
                }
            }
            Op::AddScalar(a) => add_into(self.slot(grads, *a), g),
            Op::Exp(a) => {
                for ((o, &x), &v) in self.slot(grads, *a).iter_mut().zip(g).zip(y) {
                    *o += x * v;
                }
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                for ((o, &x), &v) in self.slot(grads, *a).iter_mut().zip(g).zip(va) {
                    *o += x / v;
                }
            }
            Op::Sqrt(a) => {
                for ((o, &x), &v) in self.slot(grads, *a).iter_mut().zip(g).zip(y) {
                    if v > T::zero() {
                        *o += x / (T::c(2.0) * v);
                    }
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                for ((o, &x), &v) in self.slot(grads, *a).iter_mut().zip(g).zip(va) {
                    if v > T::zero() {
                        *o += x;
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                let (c, k) = (T::c(GELU_C), T::c(GELU_A));
                let half = T::c(0.5);
                for ((o, &x), &v) in self.slot(grads, *a).iter_mut().zip(g).zip(va) {
                    let t = (c * (v + k * v * v * v)).tanh();
                    let d = half * (T::one() + t)
                        + half * v * (T::one() - t * t) * c * (T::one() + T::c(3.0) * k * v * v);
                    *o += x * d;
                }
            }
            Op::Softmax(a) => {
                let c = node.value.cols();
                let ga = self.slot(grads, *a);
                for ((orow, grow), yrow) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&p, &q)| p * q).sum();
                    for ((o, &gx), &yv) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += yv * (gx - dot);
                    }
                }
            }
            Op::LogSoftmax(a, exclude) => {
                let c = node.value.cols();
                let ga = self.slot(grads, *a);
                for r in 0..ga.len() / c {
                    let live = |j: usize| exclude.as_ref().map_or(true, |m| !m[r * c + j]);
                    let gsum: T = (0..c).filter(|&j| live(j)).map(|j| g[r * c + j]).sum();
                    for j in (0..c).filter(|&j| live(j)) {
                        let p = y[r * c + j].exp();
                        ga[r * c + j] += g[r * c + j] - p * gsum;
                    }
                }
            }
            Op::LogSumExp(a) => {
                let xa = self.value(*a);
                let c = xa.cols();
                let xd = xa.data();
                let ga = self.slot(grads, *a);
                for (r, (&gr, &l)) in g.iter().zip(y).enumerate() {
                    for j in 0..c {
                        ga[r * c + j] += gr * (xd[r * c + j] - l).exp();
                    }
                }
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.slot(grads, *a).iter_mut().for_each(|o| *o += g0);
            }
            Op::Mean(a) => {
                let ga = self.slot(grads, *a);
                let g0 = g[0] / T::c(ga.len() as f64);
                ga.iter_mut().for_each(|o| *o += g0);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        add_into(self.slot(grads, p), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let gp = self.slot(grads, p);
                        for (r, orow) in gp.chunks_mut(w).enumerate() {
                            add_into(orow, &g[r * total + col..r * total + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let c = node.value.cols();
                let ga = self.slot(grads, *a);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut ga[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::SliceCols(a, start) => {
                let w = node.value.cols();
                let c = self.value(*a).cols();
                let ga = self.slot(grads, *a);
                for (r, grow) in g.chunks(w).enumerate() {
                    add_into(&mut ga[r * c + start..r * c + start + w], grow);
                }
            }
            Op::Pick(a, flat) => {
                let ga = self.slot(grads, *a);
                for (&i, &x) in flat.iter().zip(g) {
                    ga[i] += x;
                }
            }
            Op::LayerNorm(a, rstds) => {
                let c = node.value.cols();
                let n = T::c(c as f64);
                let ga = self.slot(grads, *a);
                for (r, &rs) in rstds.iter().enumerate() {
                    let grow = &g[r * c..(r + 1) * c];
                    let yrow = &y[r * c..(r + 1) * c];
                    let mg = grow.iter().copied().sum::<T>() / n;
                    let mgy = grow.iter().zip(yrow).map(|(&p, &q)| p * q).sum::<T>() / n;
                    for j in 0..c {
                        ga[r * c + j] += rs * (grow[j] - mg - yrow[j] * mgy);
                    }
                }
            }
            Op::L2Rows(a, norms) => {
                let c = node.value.cols();
                let ga = self.slot(grads, *a);
                for (r, &nrm) in norms.iter().enumerate() {
                    let grow = &g[r * c..(r + 1) * c];
                    let yrow = &y[r * c..(r + 1) * c];
                    let dot: T = grow.iter().zip(yrow).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        ga[r * c + j] += (grow[j] - yrow[j] * dot) / nrm;
                    }
                }
            }
            Op::PairwiseSqDist(a) => {
                let x = self.value(*a);
                let (n, d) = (x.rows(), x.cols());
                let ga = self.slot(grads, *a);
                for i in 0..n {
                    for j in 0..n {
                        let w = T::c(2.0) * (g[i * n + j] + g[j * n + i]);
                        if i == j || w == T::zero() {
                            continue;
                        }
                        let (xi, xj) = (x.row(i), x.row(j));
                        for k in 0..d {
                            ga[i * d + k] += w * (xi[k] - xj[k]);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Transposes the trailing `m x n` blocks of a flat buffer.
fn transpose_data<T: Real>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (blk_in, blk_out) in src.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                blk_out[j * m + i] = blk_in[i * n + j];
            }
        }
    }
    out
}
