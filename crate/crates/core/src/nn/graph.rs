//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation of a forward pass. Parameter leaves
//! borrow their values from a [`ParamStore`]; calling [`Graph::backward`]
//! replays the tape in reverse and returns one gradient tensor per entry of
//! that store (zeros for entries the loss does not reach).

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Reshape(Var),
    Concat0(Vec<Var>),
    Slice0 { x: Var, start: usize },
    SegmentMean { x: Var, segments: usize },
    OuterSum(Var, Var),
    MinMaxScale { x: Var, argmin: usize, argmax: usize, range: f64 },
    Conv1d { x: Var, w: Var, dilation: usize, pad: usize },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Bce { p: Var, target: Vec<f64>, eps: f64 },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

/// Tape of a single forward computation.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_nodes: HashMap<String, Var>,
}

impl<'p> Graph<'p> {
    /// A graph whose parameter leaves are read from `store`.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// A graph with no parameter store; only constants may enter it.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Leaf bound to the named entry of the parameter store.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_nodes.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::invalid("graph has no parameter store"))?;
        let t = store.require(name)?;
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Param(name.to_string()),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds `bias[r]` to every element of row `r` (first axis) of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.shape().len() != 1 || tb.shape()[0] != tx.rows() {
            return Err(Error::shape("add_row_bias", tx.shape(), tb.shape()));
        }
        let w = tx.row_len();
        let mut out = tx.clone();
        for (r, chunk) in out.data_mut().chunks_mut(w).enumerate() {
            let b = tb.data()[r];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(self.push(out, Op::AddRowBias(x, bias)))
    }

    /// Adds a one-element tensor to every element of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("add_scalar", self.shape(x), self.shape(s)));
        }
        let b = self.value(s).item();
        let t = self.value(x).map(|v| v + b);
        Ok(self.push(t, Op::AddScalar(x, s)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).scale(factor);
        self.push(t, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        self.push(t, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::shape("transpose", t.shape(), &[]));
        }
        let out = t.transpose2();
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Concatenates along the first axis; trailing dimensions must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat0 of nothing"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(Error::shape("concat0", self.shape(first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat0(parts.to_vec())))
    }

    /// Rows `start..end` of the first axis.
    pub fn slice0(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start >= end || end > t.rows() {
            return Err(Error::invalid(format!(
                "slice0 {start}..{end} out of range for {:?}",
                t.shape()
            )));
        }
        let w = t.row_len();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(shape, t.data()[start * w..end * w].to_vec())?;
        Ok(self.push(out, Op::Slice0 { x, start }))
    }

    /// `[C×L] → [C×segments]`, averaging consecutive equal-length runs.
    pub fn segment_mean(&mut self, x: Var, segments: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || segments == 0 || t.shape()[1] % segments != 0 {
            return Err(Error::shape("segment_mean", t.shape(), &[segments]));
        }
        let (c, l) = (t.shape()[0], t.shape()[1]);
        let seg = l / segments;
        let mut out = vec![0.0; c * segments];
        for r in 0..c {
            for s in 0..segments {
                let chunk = &t.data()[r * l + s * seg..r * l + (s + 1) * seg];
                out[r * segments + s] = chunk.iter().sum::<f64>() / seg as f64;
            }
        }
        let out = Tensor::new(vec![c, segments], out)?;
        Ok(self.push(out, Op::SegmentMean { x, segments }))
    }

    /// `a[h×n] ⊕ b[h×m] → [h×n×m]` with `out[c,i,j] = a[c,i] + b[c,j]`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(Error::shape("outer_sum", ta.shape(), tb.shape()));
        }
        let (h, n, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Vec::with_capacity(h * n * m);
        for c in 0..h {
            let brow = &tb.data()[c * m..(c + 1) * m];
            for i in 0..n {
                let av = ta.data()[c * n + i];
                out.extend(brow.iter().map(|&bv| av + bv));
            }
        }
        let out = Tensor::new(vec![h, n, m], out)?;
        Ok(self.push(out, Op::OuterSum(a, b)))
    }

    /// Affine rescale of all elements onto `[0, 1]`; a constant input maps to zeros.
    pub fn min_max_scale(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (mut argmin, mut argmax) = (0, 0);
        for (i, &v) in t.data().iter().enumerate() {
            if v < t.data()[argmin] {
                argmin = i;
            }
            if v > t.data()[argmax] {
                argmax = i;
            }
        }
        let (lo, hi) = (t.data()[argmin], t.data()[argmax]);
        let range = hi - lo;
        let degenerate = range <= 1e-12 * hi.abs().max(lo.abs());
        let out = if degenerate {
            Tensor::zeros(t.shape())
        } else {
            t.map(|v| (v - lo) / range)
        };
        let range = if degenerate { 0.0 } else { range };
        self.push(
            out,
            Op::MinMaxScale {
                x,
                argmin,
                argmax,
                range,
            },
        )
    }

    /// Same-length 1-D convolution of `x[C_in×L]` with `w[C_out×C_in×k]`.
    ///
    /// Causal mode pads `dilation·(k−1)` samples on the left only, so
    /// `out[t]` depends on `x[..=t]`. Otherwise padding is split evenly.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize, causal: bool) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() != 2 || tw.shape().len() != 3 || tw.shape()[1] != tx.shape()[0] {
            return Err(Error::shape("conv1d", tx.shape(), tw.shape()));
        }
        if dilation == 0 {
            return Err(Error::invalid("conv1d dilation must be ≥ 1"));
        }
        let (cin, l) = (tx.shape()[0], tx.shape()[1]);
        let (cout, k) = (tw.shape()[0], tw.shape()[2]);
        let span = dilation * (k - 1);
        let pad = if causal { span } else { span / 2 };
        let mut out = vec![0.0; cout * l];
        for o in 0..cout {
            let orow = &mut out[o * l..(o + 1) * l];
            for c in 0..cin {
                let xrow = &tx.data()[c * l..(c + 1) * l];
                for j in 0..k {
                    let wv = tw.data()[(o * cin + c) * k + j];
                    let shift = (j * dilation) as isize - pad as isize;
                    let (t0, t1) = valid_range(l, shift);
                    for t in t0..t1 {
                        orow[t] += wv * xrow[(t as isize + shift) as usize];
                    }
                }
            }
        }
        let out = Tensor::new(vec![cout, l], out)?;
        Ok(self.push(out, Op::Conv1d { x, w, dilation, pad }))
    }

    /// 2-D convolution of `x[C_in×H×W]` with `w[C_out×C_in×kh×kw]`, zero padding on all sides.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.shape().len() != 3 || tw.shape().len() != 4 || tw.shape()[1] != tx.shape()[0] {
            return Err(Error::shape("conv2d", tx.shape(), tw.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be ≥ 1"));
        }
        let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (cout, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", tx.shape(), tw.shape()));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; cout * ho * wo];
        let xd = tx.data();
        let wdat = tw.data();
        for o in 0..cout {
            let oplane = &mut out[o * ho * wo..(o + 1) * ho * wo];
            for c in 0..cin {
                let xplane = &xd[c * h * wd..(c + 1) * h * wd];
                for u in 0..kh {
                    for v in 0..kw {
                        let wv = wdat[((o * cin + c) * kh + u) * kw + v];
                        for i in 0..ho {
                            let r = (i * stride + u) as isize - pad as isize;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[r as usize * wd..(r as usize + 1) * wd];
                            let orow = &mut oplane[i * wo..(i + 1) * wo];
                            for (j, o_val) in orow.iter_mut().enumerate() {
                                let col = (j * stride + v) as isize - pad as isize;
                                if col >= 0 && col < wd as isize {
                                    *o_val += wv * xrow[col as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![cout, ho, wo], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, stride, pad }))
    }

    /// Summed binary cross-entropy of probabilities `p` against `target`,
    /// with `p` clamped to `[eps, 1 − eps]`.
    pub fn bce(&mut self, p: Var, target: &[f64], eps: f64) -> Result<Var> {
        let tp = self.value(p);
        if tp.len() != target.len() {
            return Err(Error::shape("bce", tp.shape(), &[target.len()]));
        }
        let loss = bce_value(tp.data(), target, eps);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.to_vec(),
                eps,
            },
        ))
    }

    /// Gradients of the scalar `loss` for every entry of the bound store.
    pub fn backward(&self, loss: Var) -> Result<ParamStore> {
        let store = self
            .store
            .ok_or_else(|| Error::invalid("graph has no parameter store"))?;
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut out = store.zeros_like();
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = node.value.tensor();
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    if let Some(slot) = out.get_mut(name) {
                        slot.add_assign(&g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let ga = matmul_bt_raw(g.data(), tb.data(), m, n, k);
                    let gb = matmul_at_raw(ta.data(), g.data(), m, k, n);
                    accumulate(&mut grads, *a, ta.shape(), ga);
                    accumulate(&mut grads, *b, tb.shape(), gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec());
                    accumulate_tensor(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec());
                    let neg = g.data().iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, g.shape(), neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    let gb = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, g.shape(), ga);
                    accumulate(&mut grads, *b, g.shape(), gb);
                }
                Op::AddRowBias(x, b) => {
                    let w = g.row_len();
                    let gb = g.data().chunks(w).map(|c| c.iter().sum()).collect();
                    accumulate(&mut grads, *b, self.shape(*b), gb);
                    accumulate_tensor(&mut grads, *x, g);
                }
                Op::AddScalar(x, s) => {
                    accumulate(&mut grads, *s, self.shape(*s), vec![g.sum()]);
                    accumulate_tensor(&mut grads, *x, g);
                }
                Op::Scale(x, f) => {
                    let gx = g.data().iter().map(|v| v * f).collect();
                    accumulate(&mut grads, *x, g.shape(), gx);
                }
                Op::Relu(x) => {
                    let tx = self.value(*x);
                    let gx = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, g.shape(), gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, *x, g.shape(), gx);
                }
                Op::Softplus(x) => {
                    let tx = self.value(*x);
                    let gx = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, &v)| g * sigmoid(v))
                        .collect();
                    accumulate(&mut grads, *x, g.shape(), gx);
                }
                Op::Exp(x) => {
                    let gx = g.data().iter().zip(y.data()).map(|(g, e)| g * e).collect();
                    accumulate(&mut grads, *x, g.shape(), gx);
                }
                Op::Square(x) => {
                    let tx = self.value(*x);
                    let gx = g
                        .data()
                        .iter()
                        .zip(tx.data())
                        .map(|(g, v)| 2.0 * g * v)
                        .collect();
                    accumulate(&mut grads, *x, g.shape(), gx);
                }
                Op::Sum(x) => {
                    let tx = self.value(*x);
                    accumulate(&mut grads, *x, tx.shape(), vec![g.item(); tx.len()]);
                }
                Op::Mean(x) => {
                    let tx = self.value(*x);
                    let v = g.item() / tx.len() as f64;
                    accumulate(&mut grads, *x, tx.shape(), vec![v; tx.len()]);
                }
                Op::Transpose(x) => {
                    let gx = g.transpose2();
                    accumulate_tensor(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    accumulate(&mut grads, *x, self.shape(*x), g.into_data());
                }
                Op::Concat0(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        let slice = g.data()[offset..offset + n].to_vec();
                        accumulate(&mut grads, *p, self.shape(*p), slice);
                        offset += n;
                    }
                }
                Op::Slice0 { x, start } => {
                    let tx = self.value(*x);
                    let w = tx.row_len();
                    let mut gx = vec![0.0; tx.len()];
                    gx[start * w..start * w + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, tx.shape(), gx);
                }
                Op::SegmentMean { x, segments } => {
                    let tx = self.value(*x);
                    let (c, l) = (tx.shape()[0], tx.shape()[1]);
                    let seg = l / segments;
                    let mut gx = vec![0.0; c * l];
                    for r in 0..c {
                        for t in 0..l {
                            gx[r * l + t] = g.data()[r * segments + t / seg] / seg as f64;
                        }
                    }
                    accumulate(&mut grads, *x, tx.shape(), gx);
                }
                Op::OuterSum(a, b) => {
                    let (h, n, m) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                    let mut ga = vec![0.0; h * n];
                    let mut gb = vec![0.0; h * m];
                    for c in 0..h {
                        for i in 0..n {
                            let row = &g.data()[(c * n + i) * m..(c * n + i + 1) * m];
                            ga[c * n + i] = row.iter().sum();
                            for (acc, v) in gb[c * m..(c + 1) * m].iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, self.shape(*a), ga);
                    accumulate(&mut grads, *b, self.shape(*b), gb);
                }
                Op::MinMaxScale {
                    x,
                    argmin,
                    argmax,
                    range,
                } => {
                    let n = g.len();
                    let mut gx = vec![0.0; n];
                    if *range > 0.0 {
                        let mut to_min = 0.0;
                        let mut to_max = 0.0;
                        for i in 0..n {
                            let (gi, yi) = (g.data()[i], y.data()[i]);
                            gx[i] = gi / range;
                            to_min += gi * (yi - 1.0) / range;
                            to_max -= gi * yi / range;
                        }
                        gx[*argmin] += to_min;
                        gx[*argmax] += to_max;
                    }
                    accumulate(&mut grads, *x, g.shape(), gx);
                }
                Op::Conv1d {
                    x,
                    w,
                    dilation,
                    pad,
                } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (cin, l) = (tx.shape()[0], tx.shape()[1]);
                    let (cout, k) = (tw.shape()[0], tw.shape()[2]);
                    let mut gx = vec![0.0; tx.len()];
                    let mut gw = vec![0.0; tw.len()];
                    for o in 0..cout {
                        let grow = &g.data()[o * l..(o + 1) * l];
                        for c in 0..cin {
                            let xrow = &tx.data()[c * l..(c + 1) * l];
                            for j in 0..k {
                                let wi = (o * cin + c) * k + j;
                                let wv = tw.data()[wi];
                                let shift = (j * dilation) as isize - *pad as isize;
                                let (t0, t1) = valid_range(l, shift);
                                let mut acc = 0.0;
                                for t in t0..t1 {
                                    let s = (t as isize + shift) as usize;
                                    acc += grow[t] * xrow[s];
                                    gx[c * l + s] += wv * grow[t];
                                }
                                gw[wi] += acc;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, tx.shape(), gx);
                    accumulate(&mut grads, *w, tw.shape(), gw);
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                    let (cout, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
                    let (ho, wo) = (y.shape()[1], y.shape()[2]);
                    let mut gx = vec![0.0; tx.len()];
                    let mut gw = vec![0.0; tw.len()];
                    for o in 0..cout {
                        let gplane = &g.data()[o * ho * wo..(o + 1) * ho * wo];
                        for c in 0..cin {
                            let xplane = &tx.data()[c * h * wd..(c + 1) * h * wd];
                            let gxplane = &mut gx[c * h * wd..(c + 1) * h * wd];
                            for u in 0..kh {
                                for v in 0..kw {
                                    let wi = ((o * cin + c) * kh + u) * kw + v;
                                    let wv = tw.data()[wi];
                                    let mut acc = 0.0;
                                    for i in 0..ho {
                                        let r = (i * stride + u) as isize - *pad as isize;
                                        if r < 0 || r >= h as isize {
                                            continue;
                                        }
                                        let r = r as usize;
                                        for j in 0..wo {
                                            let col = (j * stride + v) as isize - *pad as isize;
                                            if col < 0 || col >= wd as isize {
                                                continue;
                                            }
                                            let gi = gplane[i * wo + j];
                                            acc += gi * xplane[r * wd + col as usize];
                                            gxplane[r * wd + col as usize] += wv * gi;
                                        }
                                    }
                                    gw[wi] += acc;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, tx.shape(), gx);
                    accumulate(&mut grads, *w, tw.shape(), gw);
                }
                Op::Bce { p, target, eps } => {
                    let tp = self.value(*p);
                    let scale = g.item();
                    let gp = tp
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&pv, &yv)| {
                            if pv <= *eps || pv >= 1.0 - eps {
                                0.0
                            } else {
                                scale * (-yv / pv + (1.0 - yv) / (1.0 - pv))
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *p, tp.shape(), gp);
                }
            }
        }
        if !out.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape mirrors value"));
        }
    }
}

fn accumulate_tensor(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// Output indices `t` for which `t + shift` lies inside `0..len`.
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let t0 = (-shift).max(0) as usize;
    let t1 = (len as isize - shift).clamp(0, len as isize) as usize;
    (t0.min(t1), t1)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `−Σ [y log p + (1−y) log(1−p)]` with `p` clamped to `[eps, 1−eps]`.
pub fn bce_value(p: &[f64], target: &[f64], eps: f64) -> f64 {
    p.iter()
        .zip(target)
        .map(|(&pv, &yv)| {
            let pc = pv.clamp(eps, 1.0 - eps);
            -(yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln())
        })
        .sum()
}
