//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! topological order for backpropagation.

use std::collections::HashMap;

use rand::Rng as _;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, matmul, matmul_nt, matmul_tn, transpose, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{c, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Relu(Var),
    Abs(Var),
    Softmax(Var),
    Dropout(Var, Vec<T>),
    Conv1d { x: Var, kernel: Var, width: usize },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { base: Var, rows: Var, idx: Vec<usize> },
    CumMeanRows { x: Var, causal: bool },
    LayerNorm { x: Var, inv_std: Vec<T> },
    Expand { x: Var, width: usize, deriv: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Counters gathered while building a graph.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GraphStats {
    /// Inputs clamped into a bounded domain by `expand`.
    pub clamped: usize,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
    mode: Mode,
    checked: bool,
    rng: Option<Rng>,
    pub stats: GraphStats,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_order: Vec::new(),
            mode,
            checked: true,
            rng: None,
            stats: GraphStats::default(),
        }
    }

    pub fn with_rng(mut self, rng: Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Disables the per-op NaN/Inf scan.
    pub fn unchecked(mut self) -> Self {
        self.checked = false;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
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

    pub(crate) fn rng_mut(&mut self) -> Option<&mut Rng> {
        self.rng.as_mut()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), store.get(id).trainable);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", v, Op::Relu(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.abs());
        self.push("abs", v, Op::Abs(a), &[a])
    }

    /// Inverted dropout. Identity in eval mode or at `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let n = self.value(a).len();
        let keep_scale: T = c(1.0 / (1.0 - rate));
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::invalid("train-mode dropout needs a graph RNG"))?;
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("dropout", v, Op::Dropout(a, mask), &[a])
    }

    // ---- linear algebra ----

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), sa[0], sa[1], sb[1]);
        let v = Tensor::new(vec![sa[0], sb[1]], out)?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// `a[.., k] · b[n,k]ᵀ`, leading dims of `a` preserved.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *sa.last().unwrap_or(&0);
        if sb.len() != 2 || sb[1] != k {
            return Err(shape_err("matmul_nt", &sa, &sb));
        }
        let m = self.value(a).rows();
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, sb[0]);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = sb[0];
        let v = Tensor::new(shape, out)?;
        self.push("matmul_nt", v, Op::MatMulNT(a, b), &[a, b])
    }

    /// Adds `b[n]` to every row of `x[.., n]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(shape_err("add_row_bias", &sx, &sb));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(n.max(1)) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        self.push("add_row_bias", v, Op::AddRowBias(x, b), &[x, b])
    }

    /// `y = x·Wᵀ + b` for `x[.., n]`, `W[m, n]`, `b[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_nt(x, w).map_err(|_| {
            shape_err("linear", self.shape(x), self.shape(w))
        })?;
        self.add_row_bias(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::invalid("transpose expects a matrix"));
        }
        let v = self.value(a).transpose();
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    // ---- attention helpers ----

    /// Row-wise softmax over the last dimension with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_limited(a, None)
    }

    /// Softmax where row `i` only covers its first `limits[i]` columns; the
    /// rest of the row is exactly zero.
    pub fn softmax_limited(&mut self, a: Var, limits: Option<&[usize]>) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let rows = t.rows();
        if let Some(l) = limits {
            if l.len() != rows || l.iter().any(|&k| k == 0 || k > n) {
                return Err(Error::invalid("softmax limits must be in 1..=cols per row"));
            }
        }
        let mut out = vec![T::zero(); t.len()];
        for i in 0..rows {
            let lim = limits.map_or(n, |l| l[i]);
            let row = &t.data()[i * n..i * n + lim];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let o = &mut out[i * n..i * n + lim];
            let mut s = T::zero();
            for (oj, &v) in o.iter_mut().zip(row) {
                *oj = (v - mx).exp();
                s += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= s;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", v, Op::Softmax(a), &[a])
    }

    /// Row `i` of the output is the mean of rows `0..=i` of `x` (causal) or of
    /// all rows of `x`. `out_rows` may differ from the row count of `x`.
    pub fn cum_mean_rows(&mut self, x: Var, out_rows: usize, causal: bool) -> Result<Var> {
        let t = self.value(x);
        let (r, n) = (t.rows(), t.cols());
        if r == 0 {
            return Err(Error::invalid("cum_mean_rows on empty input"));
        }
        let mut out = vec![T::zero(); out_rows * n];
        let mut acc = vec![T::zero(); n];
        let mut taken = 0usize;
        for i in 0..out_rows {
            let upto = if causal { (i + 1).min(r) } else { r };
            while taken < upto {
                for (a, &v) in acc.iter_mut().zip(t.row(taken)) {
                    *a += v;
                }
                taken += 1;
            }
            let inv = T::one() / T::from_usize_lossy(upto);
            for (o, &a) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
                *o = a * inv;
            }
        }
        let v = Tensor::new(vec![out_rows, n], out)?;
        self.push("cum_mean_rows", v, Op::CumMeanRows { x, causal }, &[x])
    }

    // ---- row/col structure ----

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let data: Vec<T> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let v = Tensor::from_vec(data);
        self.push("concat", v, Op::Concat(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != n {
                return Err(shape_err("concat_rows", &[rows, n], t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, n], data)?;
        self.push("concat_rows", v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.rows() != r {
                return Err(shape_err("concat_cols", &[r], t.shape()));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::new(vec![r, total], data)?;
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || start + len > t.rows() {
            return Err(shape_err("slice_rows", t.shape(), &[start, len]));
        }
        let n = t.cols();
        let v = Tensor::new(vec![len, n], t.data()[start * n..(start + len) * n].to_vec())?;
        self.push("slice_rows", v, Op::SliceRows { x, start }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if idx.iter().any(|&i| i >= t.rows()) {
            return Err(Error::invalid("gather_rows index out of range"));
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![idx.len(), n], data)?;
        self.push("gather_rows", v, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Copy of `base` with row `idx[i]` replaced by row `i` of `rows`.
    pub fn scatter_rows(&mut self, base: Var, rows: Var, idx: &[usize]) -> Result<Var> {
        let (tb, tr) = (self.value(base), self.value(rows));
        if tb.cols() != tr.cols() || tr.rows() != idx.len() || idx.iter().any(|&i| i >= tb.rows()) {
            return Err(shape_err("scatter_rows", tb.shape(), tr.shape()));
        }
        let n = tb.cols();
        let mut v = tb.clone();
        for (k, &i) in idx.iter().enumerate() {
            v.data_mut()[i * n..(i + 1) * n].copy_from_slice(tr.row(k));
        }
        self.push("scatter_rows", v, Op::ScatterRows { base, rows, idx: idx.to_vec() }, &[base, rows])
    }

    // ---- layers ----

    /// Same-padded cross-correlation along time: `x[L, C_in]`,
    /// `kernel[k, C_in, C_out]` → `[L, C_out]`.
    pub fn conv1d_time(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 2 || sk.len() != 3 || sk[1] != sx[1] {
            return Err(shape_err("conv1d_time", &sx, &sk));
        }
        let (width, cin, cout) = (sk[0], sk[1], sk[2]);
        if width % 2 == 0 {
            return Err(Error::invalid(format!("conv1d_time needs an odd kernel width, got {width}")));
        }
        let l = sx[0];
        let half = width / 2;
        let (xd, kd) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![T::zero(); l * cout];
        for t in 0..l {
            let orow = &mut out[t * cout..(t + 1) * cout];
            for j in 0..width {
                let src = t as isize + j as isize - half as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let xrow = &xd[src as usize * cin..(src as usize + 1) * cin];
                let kj = &kd[j * cin * cout..(j + 1) * cin * cout];
                for (ci, &xv) in xrow.iter().enumerate() {
                    if xv == T::zero() {
                        continue;
                    }
                    for (o, &kv) in orow.iter_mut().zip(&kj[ci * cout..(ci + 1) * cout]) {
                        *o += xv * kv;
                    }
                }
            }
        }
        let v = Tensor::new(vec![l, cout], out)?;
        self.push("conv1d_time", v, Op::Conv1d { x, kernel, width }, &[x, kernel])
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let nn = T::from_usize_lossy(n);
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let is = T::one() / (var + c(eps)).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push("layer_norm", out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Maps every element of `x[.., n]` to `width` values with `f(v, values,
    /// derivatives)`, giving `[.., n * width]`. `f` returns whether the input
    /// was clamped.
    pub fn expand(
        &mut self,
        x: Var,
        width: usize,
        f: impl Fn(T, &mut [T], &mut [T]) -> bool,
    ) -> Result<Var> {
        let t = self.value(x);
        let mut vals = vec![T::zero(); t.len() * width];
        let mut der = vec![T::zero(); t.len() * width];
        let mut clamped = 0;
        for (i, &v) in t.data().iter().enumerate() {
            if f(v, &mut vals[i * width..(i + 1) * width], &mut der[i * width..(i + 1) * width]) {
                clamped += 1;
            }
        }
        let mut shape = t.shape().to_vec();
        if let Some(last) = shape.last_mut() {
            *last *= width;
        }
        let v = Tensor::new(shape, vals)?;
        self.stats.clamped += clamped;
        self.push("expand", v, Op::Expand { x, width, deriv: der }, &[x])
    }

    // ---- reductions / losses ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / T::from_usize_lossy(t.len()));
        self.push("mean", v, Op::Mean(a), &[a])
    }

    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        if p.is_empty() {
            return Err(Error::invalid("mse_loss of empty tensors"));
        }
        let s: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let v = Tensor::scalar(s / T::from_usize_lossy(p.len()));
        self.push("mse_loss", v, Op::Mse(pred, target), &[pred, target])
    }

    // ---- backward ----

    /// Reverse sweep from a scalar node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lt.shape().to_vec()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d loss / d param` into every parameter bound to this graph.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.gradients(loss)?;
        for &(id, v) in &self.param_order {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g);
            }
        }
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, data: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let shape = self.nodes[v.0].value.shape().to_vec();
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(data) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(shape, data).expect("grad shape")),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, gd.to_vec());
                send(*b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    send(*a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if wants(*b) {
                    send(*b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => send(*a, gd.iter().map(|&v| v * *s).collect()),
            Op::AddRowBias(x, b) => {
                send(*x, gd.to_vec());
                if wants(*b) {
                    let n = g.cols();
                    let mut gb = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if wants(*a) {
                    send(*a, matmul_nt(gd, tb.data(), m, n, k));
                }
                if wants(*b) {
                    send(*b, matmul_tn(ta.data(), gd, k, m, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if wants(*a) {
                    send(*a, matmul(gd, tb.data(), m, n, k));
                }
                if wants(*b) {
                    send(*b, matmul_tn(gd, ta.data(), n, m, k));
                }
            }
            Op::Transpose(a) => {
                let (r, cc) = (g.rows(), g.cols());
                send(*a, transpose(gd, r, cc));
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                send(*a, gd.iter().zip(va).map(|(&g, &x)| if x > T::zero() { g } else { T::zero() }).collect());
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                send(
                    *a,
                    gd.iter()
                        .zip(va)
                        .map(|(&g, &x)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let mut out = vec![T::zero(); y.len()];
                for ((orow, yrow), grow) in out.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let s = dot(yrow, grow);
                    for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = yv * (gv - s);
                    }
                }
                send(*a, out);
            }
            Op::Dropout(a, mask) => send(*a, gd.iter().zip(mask).map(|(&g, &m)| g * m).collect()),
            Op::Conv1d { x, kernel, width } => {
                let (tx, tk) = (self.value(*x), self.value(*kernel));
                let (l, cin) = (tx.rows(), tx.cols());
                let cout = g.cols();
                let half = width / 2;
                let (xd, kd) = (tx.data(), tk.data());
                let mut gx = vec![T::zero(); xd.len()];
                let mut gk = vec![T::zero(); kd.len()];
                for t in 0..l {
                    let grow = &gd[t * cout..(t + 1) * cout];
                    for j in 0..*width {
                        let src = t as isize + j as isize - half as isize;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let s = src as usize;
                        for ci in 0..cin {
                            let kslice = &kd[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                            gx[s * cin + ci] += dot(grow, kslice);
                            let xv = xd[s * cin + ci];
                            let gks = &mut gk[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                            for (o, &gv) in gks.iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                }
                send(*x, gx);
                send(*kernel, gk);
            }
            Op::Mse(p, t) => {
                let (vp, vt) = (self.value(*p).data(), self.value(*t).data());
                let k: T = c::<T>(2.0) * gd[0] / T::from_usize_lossy(vp.len());
                let gp: Vec<T> = vp.iter().zip(vt).map(|(&a, &b)| k * (a - b)).collect();
                if wants(*t) {
                    send(*t, gp.iter().map(|&v| -v).collect());
                }
                send(*p, gp);
            }
            Op::Sum(a) => send(*a, vec![gd[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                send(*a, vec![gd[0] / T::from_usize_lossy(n); n]);
            }
            Op::Reshape(a) => send(*a, gd.to_vec()),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    send(p, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    send(p, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut out = Vec::with_capacity(g.rows() * w);
                    for row in gd.chunks(total) {
                        out.extend_from_slice(&row[off..off + w]);
                    }
                    send(p, out);
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut out = vec![T::zero(); tx.len()];
                out[start * n..start * n + gd.len()].copy_from_slice(gd);
                send(*x, out);
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let n = tx.cols();
                let mut out = vec![T::zero(); tx.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&gd[k * n..(k + 1) * n]) {
                        *o += v;
                    }
                }
                send(*x, out);
            }
            Op::ScatterRows { base, rows, idx } => {
                let n = g.cols();
                if wants(*rows) {
                    let mut gr = Vec::with_capacity(idx.len() * n);
                    for &i in idx {
                        gr.extend_from_slice(&gd[i * n..(i + 1) * n]);
                    }
                    send(*rows, gr);
                }
                if wants(*base) {
                    let mut gb = gd.to_vec();
                    for &i in idx {
                        gb[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = T::zero());
                    }
                    send(*base, gb);
                }
            }
            Op::CumMeanRows { x, causal } => {
                let tx = self.value(*x);
                let (r, n) = (tx.rows(), tx.cols());
                let out_rows = g.rows();
                let mut out = vec![T::zero(); tx.len()];
                if *causal {
                    // row i of the output averages x[0..=min(i, r-1)]
                    let mut suffix = vec![T::zero(); n];
                    let mut tail = vec![T::zero(); n];
                    // output rows past r all average the full input
                    for i in r..out_rows {
                        let inv = T::one() / T::from_usize_lossy(r);
                        for (s, &v) in tail.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                            *s += v * inv;
                        }
                    }
                    for j in (0..r).rev() {
                        if j < out_rows {
                            let inv = T::one() / T::from_usize_lossy(j + 1);
                            for (s, &v) in suffix.iter_mut().zip(&gd[j * n..(j + 1) * n]) {
                                *s += v * inv;
                            }
                        }
                        for ((o, &s), &t) in out[j * n..(j + 1) * n].iter_mut().zip(&suffix).zip(&tail) {
                            *o = s + t;
                        }
                    }
                } else {
                    let inv = T::one() / T::from_usize_lossy(r);
                    let mut colsum = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        for (s, &v) in colsum.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    for row in out.chunks_mut(n) {
                        for (o, &s) in row.iter_mut().zip(&colsum) {
                            *o = s * inv;
                        }
                    }
                }
                send(*x, out);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let n = node.value.cols();
                let nn = T::from_usize_lossy(n);
                let mut out = vec![T::zero(); y.len()];
                for (i, ((orow, yrow), grow)) in out.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)).enumerate() {
                    let gmean = grow.iter().copied().sum::<T>() / nn;
                    let gy = dot(grow, yrow) / nn;
                    for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
                        *o = inv_std[i] * (gv - gmean - yv * gy);
                    }
                }
                send(*x, out);
            }
            Op::Expand { x, width, deriv } => {
                let n = self.value(*x).len();
                let mut out = vec![T::zero(); n];
                for (i, o) in out.iter_mut().enumerate() {
                    *o = dot(&gd[i * width..(i + 1) * width], &deriv[i * width..(i + 1) * width]);
                }
                send(*x, out);
            }
        }
    }
}
