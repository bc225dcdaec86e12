use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    MaskedSoftmax(Var),
    SegmentSoftmax(Var, Rc<[usize]>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    GatherRows(Var, Rc<[usize]>),
    GatherCols(Var, Rc<[usize]>),
    Pick(Var, Rc<[usize]>),
    Concat(Vec<Var>, usize),
    Mean(Var, usize),
    SliceCols(Var, usize, usize),
    Sum(Var),
}

struct Node {
    /// `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.iter().find(|(i, _)| *i == id).map(|(_, g)| g.as_slice())
    }
}

/// Records a computation over 2-D tensors for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// topological order and the backward pass visits each node once.
pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    rng: Option<&'a mut ChaCha8Rng>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

/// c (m×n) += a (m×k, strides) · b (k×n, strides)
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // Vector products dominate decoding; packing costs more than they do.
    if m == 1 || n == 1 || k == 1 {
        let [rsa, csa, rsb, csb] = [rsa, csa, rsb, csb].map(|s| usize::try_from(s).expect("non-negative stride"));
        let row_b: Vec<f64>;
        if k == 1 {
            let b = if csb == 1 {
                &b[..n]
            } else {
                row_b = (0..n).map(|j| b[j * csb]).collect();
                &row_b
            };
            for (i, row) in c.chunks_exact_mut(n).take(m).enumerate() {
                let ai = a[i * rsa];
                for (o, bv) in row.iter_mut().zip(b) {
                    *o += ai * bv;
                }
            }
        } else if n == 1 {
            let col = strided(b, rsb, k);
            for (i, o) in c[..m].iter_mut().enumerate() {
                *o += dot(&strided(&a[i * rsa..], csa, k), &col);
            }
        } else if csb == 1 {
            // c += Σ_p a_p · row_p(b)
            let c = &mut c[..n];
            for p in 0..k {
                let ap = a[p * csa];
                for (o, bv) in c.iter_mut().zip(&b[p * rsb..p * rsb + n]) {
                    *o += ap * bv;
                }
            }
        } else {
            let row = strided(a, csa, k);
            for (j, o) in c[..n].iter_mut().enumerate() {
                *o += dot(&row, &strided(&b[j * csb..], rsb, k));
            }
        }
        return;
    }
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n and
    // m×n (row-major, contiguous) regions.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `len` elements of `x` at the given stride, borrowed when contiguous.
fn strided(x: &[f64], stride: usize, len: usize) -> std::borrow::Cow<'_, [f64]> {
    if stride == 1 {
        std::borrow::Cow::Borrowed(&x[..len])
    } else {
        std::borrow::Cow::Owned((0..len).map(|i| x[i * stride]).collect())
    }
}

/// Dot product with four independent accumulators so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for ((s, xv), yv) in acc.iter_mut().zip(x).zip(y) {
            *s += xv * yv;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

impl<'a> Graph<'a> {
    /// A graph in evaluation mode: dropout is the identity.
    pub fn new(params: &'a ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: vec![None; params.len()], rng: None }
    }

    /// A graph in training mode; dropout masks are drawn from `rng`.
    pub fn training(params: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        let mut g = Self::new(params);
        g.rng = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        t.ensure_2d("constant")?;
        self.nodes.push(Node { value: Some(t), op: Op::Constant, requires_grad: false });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), k as isize, 1, tb.data(), n as isize, 1, &mut out);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), k as isize, 1, tb.data(), 1, k as isize, &mut out);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let n = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, x)| x + tb.data()[i % n]).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor { shape: ta.shape().to_vec(), data: ta.data().iter().map(|x| x * c).collect() };
        self.push(t, Op::Scale(a, c), &[a])
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let t = Tensor { shape: ta.shape().to_vec(), data: ta.data().iter().map(|&x| f(x)).collect() };
        self.push(t, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// Numerically stable `log σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    /// Softmax along `axis` (0: down columns, 1: along rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        match axis {
            1 => data.chunks_mut(n).for_each(softmax_in_place),
            0 => {
                let mut col = vec![0.0; m];
                for c in 0..n {
                    for r in 0..m {
                        col[r] = data[r * n + c];
                    }
                    softmax_in_place(&mut col);
                    for r in 0..m {
                        data[r * n + c] = col[r];
                    }
                }
            }
            _ => return Err(Error::Shape { op: "softmax axis", left: vec![m, n], right: vec![axis] }),
        }
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::Softmax(a, axis), &[a]))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::LogSoftmax(a), &[a]))
    }

    /// Row-wise softmax where `allowed[r * n + c] == false` entries receive
    /// exactly zero weight (and no gradient). Every row needs one allowed entry.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if allowed.len() != m * n {
            return Err(Error::Shape { op: "masked_softmax", left: vec![m, n], right: vec![allowed.len()] });
        }
        let mut data = ta.data().to_vec();
        for (row, mask) in data.chunks_mut(n).zip(allowed.chunks(n)) {
            let max = row.iter().zip(mask).filter(|(_, &ok)| ok).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidData("masked_softmax row fully masked".into()));
            }
            let mut sum = 0.0;
            for (x, &ok) in row.iter_mut().zip(mask) {
                *x = if ok { (*x - max).exp() } else { 0.0 };
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MaskedSoftmax(a), &[a]))
    }

    /// Softmax over contiguous column segments of each row. `bounds` holds
    /// segment start offsets plus the final end (`bounds.last() == cols`).
    pub fn segment_softmax(&mut self, a: Var, bounds: Rc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if bounds.first() != Some(&0) || bounds.last() != Some(&n) || bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape { op: "segment_softmax", left: vec![m, n], right: bounds.to_vec() });
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for w in bounds.windows(2) {
                softmax_in_place(&mut row[w[0]..w[1]]);
            }
        }
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::SegmentSoftmax(a, bounds), &[a]))
    }

    /// Row-wise layer normalization with `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = (tx.rows(), tx.cols());
        if tg.shape() != [1, n] || tb.shape() != [1, n] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias]))
    }

    /// Inverted dropout using the graph's generator. Identity in evaluation mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.rng.take() {
            Some(rng) => {
                let out = self.dropout_with(x, rate, true, rng);
                self.rng = Some(rng);
                out
            }
            None => Ok(x),
        }
    }

    /// Inverted dropout with an explicit generator: kept units are scaled by
    /// `1 / (1 - rate)`. Identity when `!training` or `rate == 0`.
    pub fn dropout_with<R: Rng>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len()).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
        let data = tx.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout(x, mask), &[x]))
    }

    /// Rows of `table` selected by `ids` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: Rc<[usize]>) -> Result<Var> {
        let tt = self.value(table);
        let (rows, n) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids.iter() {
            if i >= rows {
                return Err(Error::IdOutOfRange { what: "gather_rows", id: i, size: rows });
            }
            out.extend_from_slice(tt.row_slice(i));
        }
        let t = Tensor::matrix(ids.len(), n, out)?;
        Ok(self.push(t, Op::GatherRows(table, ids), &[table]))
    }

    pub fn embedding_lookup(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let v = self.param(table);
        self.gather_rows(v, ids.into())
    }

    pub fn gather_cols(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(m * idx.len());
        for r in 0..m {
            for &c in idx.iter() {
                if c >= n {
                    return Err(Error::IdOutOfRange { what: "gather_cols", id: c, size: n });
                }
                out.push(ta.data()[r * n + c]);
            }
        }
        let t = Tensor::matrix(m, idx.len(), out)?;
        Ok(self.push(t, Op::GatherCols(a, idx), &[a]))
    }

    /// Elements at row-major flat indices, as a `[1, k]` row.
    pub fn pick(&mut self, a: Var, flat: Rc<[usize]>) -> Result<Var> {
        let ta = self.value(a);
        let mut out = Vec::with_capacity(flat.len());
        for &i in flat.iter() {
            if i >= ta.len() {
                return Err(Error::IdOutOfRange { what: "pick", id: i, size: ta.len() });
            }
            out.push(ta.data()[i]);
        }
        Ok(self.push(Tensor::row(out), Op::Pick(a, flat), &[a]))
    }

    /// Concatenation along axis 0 (stack rows) or 1 (side by side).
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| Error::InvalidData("concat of nothing".into()))?).clone();
        let t = match axis {
            0 => {
                let n = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &x in xs {
                    let tx = self.value(x);
                    if tx.cols() != n {
                        return Err(shape_err("concat", &first, tx));
                    }
                    rows += tx.rows();
                    data.extend_from_slice(tx.data());
                }
                Tensor::matrix(rows, n, data)?
            }
            1 => {
                let m = first.rows();
                let mut cols = 0;
                for &x in xs {
                    let tx = self.value(x);
                    if tx.rows() != m {
                        return Err(shape_err("concat", &first, tx));
                    }
                    cols += tx.cols();
                }
                let mut data = Vec::with_capacity(m * cols);
                for r in 0..m {
                    for &x in xs {
                        data.extend_from_slice(self.value(x).row_slice(r));
                    }
                }
                Tensor::matrix(m, cols, data)?
            }
            _ => return Err(Error::Shape { op: "concat axis", left: first.shape().to_vec(), right: vec![axis] }),
        };
        Ok(self.push(t, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Arithmetic mean along `axis` (0 gives `[1, n]`, 1 gives `[m, 1]`).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let t = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for r in 0..m {
                    for (o, x) in out.iter_mut().zip(ta.row_slice(r)) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= m as f64);
                Tensor::matrix(1, n, out)?
            }
            1 => {
                let out = (0..m).map(|r| ta.row_slice(r).iter().sum::<f64>() / n as f64).collect();
                Tensor::matrix(m, 1, out)?
            }
            _ => return Err(Error::Shape { op: "mean axis", left: vec![m, n], right: vec![axis] }),
        };
        Ok(self.push(t, Op::Mean(a, axis), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if start >= end || end > n {
            return Err(Error::Shape { op: "slice_cols", left: vec![m, n], right: vec![start, end] });
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&ta.row_slice(r)[start..end]);
        }
        let t = Tensor::matrix(m, end - start, data)?;
        Ok(self.push(t, Op::SliceCols(a, start, end), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Reverse pass from a `[1, 1]` node; returns gradients of every parameter
    /// that the node depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Shape { op: "backward", left: lt.shape().to_vec(), right: vec![1, 1] });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let y = self.value(Var(idx));
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.grads.push((*id, g)),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.needs(*a) {
                        // dA = G · Bᵀ
                        let ga = slot(&mut grads, *a, m * k);
                        gemm(m, n, k, &g, n as isize, 1, tb.data(), 1, n as isize, ga);
                    }
                    if self.needs(*b) {
                        // dB = Aᵀ · G
                        let gb = slot(&mut grads, *b, k * n);
                        gemm(k, m, n, ta.data(), 1, k as isize, &g, n as isize, 1, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    if self.needs(*a) {
                        // dA = G · B
                        let ga = slot(&mut grads, *a, m * k);
                        gemm(m, n, k, &g, n as isize, 1, tb.data(), k as isize, 1, ga);
                    }
                    if self.needs(*b) {
                        // dB = Gᵀ · A
                        let gb = slot(&mut grads, *b, n * k);
                        gemm(n, m, k, &g, 1, n as isize, ta.data(), k as isize, 1, gb);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.needs(v) {
                            add_into(slot(&mut grads, v, g.len()), &g);
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if self.needs(*a) {
                        add_into(slot(&mut grads, *a, g.len()), &g);
                    }
                    if self.needs(*row) {
                        let n = y.cols();
                        let gr = slot(&mut grads, *row, n);
                        for chunk in g.chunks(n) {
                            add_into(gr, chunk);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let ga = slot(&mut grads, *a, g.len());
                        for ((o, gi), bi) in ga.iter_mut().zip(&g).zip(tb.data()) {
                            *o += gi * bi;
                        }
                    }
                    if self.needs(*b) {
                        let gb = slot(&mut grads, *b, g.len());
                        for ((o, gi), ai) in gb.iter_mut().zip(&g).zip(ta.data()) {
                            *o += gi * ai;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for (o, gi) in ga.iter_mut().zip(&g) {
                        *o += gi * c;
                    }
                }
                Op::Relu(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y.data()) {
                        if *yi > 0.0 {
                            *o += gi;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y.data()) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), yi) in ga.iter_mut().zip(&g).zip(y.data()) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
                Op::LogSigmoid(a) => {
                    let xs = self.value(*a).data().to_vec();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), x) in ga.iter_mut().zip(&g).zip(&xs) {
                        *o += gi * sigmoid(-x);
                    }
                }
                Op::Log(a) => {
                    let xs = self.value(*a).data().to_vec();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), x) in ga.iter_mut().zip(&g).zip(&xs) {
                        *o += gi / x;
                    }
                }
                Op::Softmax(a, axis) => {
                    let (m, n) = (y.rows(), y.cols());
                    let yd = y.data().to_vec();
                    let ga = slot(&mut grads, *a, g.len());
                    if *axis == 1 {
                        for r in 0..m {
                            softmax_backward(
                                &yd[r * n..(r + 1) * n],
                                &g[r * n..(r + 1) * n],
                                &mut ga[r * n..(r + 1) * n],
                            );
                        }
                    } else {
                        for c in 0..n {
                            let dot: f64 = (0..m).map(|r| g[r * n + c] * yd[r * n + c]).sum();
                            for r in 0..m {
                                ga[r * n + c] += yd[r * n + c] * (g[r * n + c] - dot);
                            }
                        }
                    }
                }
                Op::MaskedSoftmax(a) => {
                    // masked entries have y == 0 and so receive no gradient
                    let n = y.cols();
                    let yd = y.data().to_vec();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((yr, gr), or) in yd.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        softmax_backward(yr, gr, or);
                    }
                }
                Op::SegmentSoftmax(a, bounds) => {
                    let n = y.cols();
                    let yd = y.data().to_vec();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((yr, gr), or) in yd.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        for w in bounds.windows(2) {
                            softmax_backward(&yr[w[0]..w[1]], &gr[w[0]..w[1]], &mut or[w[0]..w[1]]);
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let n = y.cols();
                    let yd = y.data().to_vec();
                    let ga = slot(&mut grads, *a, g.len());
                    for ((yr, gr), or) in yd.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let gsum: f64 = gr.iter().sum();
                        for ((o, gi), yi) in or.iter_mut().zip(gr).zip(yr) {
                            *o += gi - yi.exp() * gsum;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let n = y.cols();
                    let m = y.rows();
                    let gv = self.value(*gain).data().to_vec();
                    if self.needs(*gain) {
                        let gg = slot(&mut grads, *gain, n);
                        for r in 0..m {
                            for c in 0..n {
                                gg[c] += g[r * n + c] * xhat[r * n + c];
                            }
                        }
                    }
                    if self.needs(*bias) {
                        let gb = slot(&mut grads, *bias, n);
                        for chunk in g.chunks(n) {
                            add_into(gb, chunk);
                        }
                    }
                    if self.needs(*x) {
                        let gx = slot(&mut grads, *x, m * n);
                        let nf = n as f64;
                        for r in 0..m {
                            let dxh: Vec<f64> = (0..n).map(|c| g[r * n + c] * gv[c]).collect();
                            let xh = &xhat[r * n..(r + 1) * n];
                            let s1: f64 = dxh.iter().sum();
                            let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                            for c in 0..n {
                                gx[r * n + c] += inv_std[r] / nf * (nf * dxh[c] - s1 - xh[c] * s2);
                            }
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    let ga = slot(&mut grads, *a, g.len());
                    for ((o, gi), k) in ga.iter_mut().zip(&g).zip(mask) {
                        *o += gi * k;
                    }
                }
                Op::GatherRows(table, ids) => {
                    let tt = self.value(*table);
                    let n = tt.cols();
                    let gt = slot(&mut grads, *table, tt.len());
                    for (k, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * n..(i + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                }
                Op::GatherCols(a, idx) => {
                    let ta = self.value(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let k = idx.len();
                    let ga = slot(&mut grads, *a, m * n);
                    for r in 0..m {
                        for (j, &c) in idx.iter().enumerate() {
                            ga[r * n + c] += g[r * k + j];
                        }
                    }
                }
                Op::Pick(a, flat) => {
                    let len = self.value(*a).len();
                    let ga = slot(&mut grads, *a, len);
                    for (j, &i) in flat.iter().enumerate() {
                        ga[i] += g[j];
                    }
                }
                Op::Concat(xs, axis) => {
                    if *axis == 0 {
                        let mut off = 0;
                        for &x in xs {
                            let len = self.value(x).len();
                            if self.needs(x) {
                                add_into(slot(&mut grads, x, len), &g[off..off + len]);
                            }
                            off += len;
                        }
                    } else {
                        let (m, total) = (y.rows(), y.cols());
                        let mut col = 0;
                        for &x in xs {
                            let w = self.value(x).cols();
                            if self.needs(x) {
                                let gx = slot(&mut grads, x, m * w);
                                for r in 0..m {
                                    add_into(&mut gx[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                                }
                            }
                            col += w;
                        }
                    }
                }
                Op::Mean(a, axis) => {
                    let ta = self.value(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let ga = slot(&mut grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += if *axis == 0 { g[c] / m as f64 } else { g[r] / n as f64 };
                        }
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let ta = self.value(*a);
                    let (m, n) = (ta.rows(), ta.cols());
                    let w = end - start;
                    let ga = slot(&mut grads, *a, m * n);
                    for r in 0..m {
                        add_into(&mut ga[r * n + start..r * n + end], &g[r * w..(r + 1) * w]);
                    }
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    let ga = slot(&mut grads, *a, len);
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
        out.grads.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, yi), gi) in out.iter_mut().zip(y).zip(g) {
        *o += yi * (gi - dot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(shapes: &[(&str, usize, usize, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, r, c, d) in shapes {
            s.insert(*name, Tensor::matrix(*r, *c, d.clone()).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(vec![0.0; 3])).unwrap();
        let y = g.softmax(x, 1).unwrap();
        for p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 4.0, 3.0, 7.5]).unwrap();
        let i = g.constant(Tensor::identity(3)).unwrap();
        let av = g.constant(a.clone()).unwrap();
        let p = g.matmul(i, av).unwrap();
        assert_eq!(g.value(p), &a);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn matmul_t_agrees_with_explicit_transpose() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let a = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let b = g.constant(Tensor::matrix(2, 3, vec![0.5, -1., 2., 3., 0., 1.]).unwrap()).unwrap();
        let bt = g.constant(Tensor::matrix(3, 2, vec![0.5, 3., -1., 0., 2., 1.]).unwrap()).unwrap();
        let x = g.matmul_t(a, b).unwrap();
        let y = g.matmul(a, bt).unwrap();
        assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn gemm_matches_naive_product_for_every_layout() {
        let val = |i: usize| ((i * 7 + 3) % 11) as f64 * 0.25 - 1.2;
        for (m, k, n) in [(1, 9, 6), (5, 9, 1), (4, 1, 6), (1, 1, 1), (1, 5, 1), (3, 4, 5)] {
            let a: Vec<f64> = (0..m * k).map(val).collect();
            let b: Vec<f64> = (0..k * n).map(|i| val(i + 5)).collect();
            // each operand either row-major or stored transposed
            for (a_t, b_t) in [(false, false), (true, false), (false, true), (true, true)] {
                let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
                let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
                let at = |i: usize, p: usize| a[i * rsa + p * csa];
                let bt = |p: usize, j: usize| b[p * rsb + j * csb];
                let mut c = vec![0.5; m * n];
                gemm(m, k, n, &a, rsa as isize, csa as isize, &b, rsb as isize, csb as isize, &mut c);
                for i in 0..m {
                    for j in 0..n {
                        let expect = 0.5 + (0..k).map(|p| at(i, p) * bt(p, j)).sum::<f64>();
                        assert!((c[i * n + j] - expect).abs() < 1e-12, "{m}x{k}x{n} {a_t} {b_t}");
                    }
                }
            }
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let s = ParamStore::new();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(g.dropout_with(x, 0.5, false, &mut rng).unwrap(), x);
        assert_eq!(g.dropout_with(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let y = g.masked_softmax(x, &[true, false, true, false, true, false]).unwrap();
        let v = g.value(y);
        assert_eq!(v.at(0, 1), 0.0);
        assert_eq!(v.at(1, 0), 0.0);
        assert_eq!(v.at(1, 1), 1.0);
        assert!((v.at(0, 0) + v.at(0, 2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_through_shared_param_accumulates() {
        // f = sum(w * w) with w used twice via the same node
        let s = store_with(&[("w", 1, 2, vec![1.5, -2.0])]);
        let mut g = Graph::new(&s);
        let w1 = g.param(ParamId(0));
        let w2 = g.param(ParamId(0));
        assert_eq!(w1, w2);
        let sq = g.mul(w1, w2).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap(), &[3.0, -4.0]);
    }
}
