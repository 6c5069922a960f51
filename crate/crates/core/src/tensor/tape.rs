use std::sync::Arc;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{Tensor, NORM_EPS};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded operation. Inputs always precede the node that consumes them.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    /// `a · b`, or `a · bᵀ` when `trans_b`.
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Elementwise minimum; ties route the gradient to the first input.
    Minimum(Var, Var),
    /// Adds a last-axis vector to every last-axis slice of `a`.
    AddRow { a: Var, row: Var },
    Scale(Var, f64),
    AddScalar(Var, f64),
    Clamp { a: Var, lo: f64, hi: f64 },
    SoftmaxRows(Var),
    Sigmoid(Var),
    Silu(Var),
    Exp(Var),
    /// `log σ(x)`, evaluated stably.
    LogSigmoid(Var),
    RmsNorm { x: Var, gain: Var },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize, end: usize },
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize, end: usize },
    /// `out[i] = a[index[i]]` over flat storage.
    Gather { a: Var, index: Arc<[usize]> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Minimum(a, b) => vec![*a, *b],
            Op::AddRow { a, row } => vec![*a, *row],
            Op::RmsNorm { x, gain } => vec![*x, *gain],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Clamp { a, .. }
            | Op::SoftmaxRows(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::LogSigmoid(a)
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Gather { a, .. }
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Linear record of a computation, replayed in reverse by [`Tape::backward`].
///
/// A tape is single-threaded; independent tapes may be used concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node on a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_raw(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient for `v`, zero-filled when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Moves the gradient for `v` out (zeros if unreachable).
    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_raw(shape, g),
            None => Tensor::zeros(&shape),
        }
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
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

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_raw(t.shape.clone(), t.data.iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_raw(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Per-vector `1/sqrt(mean(x^2) + eps)` over the last axis.
fn inv_rms(x: &Tensor) -> Vec<f64> {
    let d = x.last_dim();
    x.data
        .chunks(d)
        .map(|v| 1.0 / (v.iter().map(|a| a * a).sum::<f64>() / d as f64 + NORM_EPS).sqrt())
        .collect()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Every softmax output recorded so far (attention weights, mostly).
    pub fn softmax_outputs(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::SoftmaxRows(_)))
            .map(|n| &n.value)
    }

    /// Records a leaf. Gradients flow to leaves but never past them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = self.eval(&op)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Forward rule for `op` given the values already on the tape.
    fn eval(&self, op: &Op) -> Result<Tensor> {
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Leaf => return Err(Error::Contract("leaves carry no forward rule".into())),
            Op::MatMul { a, b, trans_b } => {
                let (a, b) = (val(a), val(b));
                let [m, k] = a.dims2()?;
                let [br, bc] = b.dims2()?;
                let (kb, n) = if *trans_b { (bc, br) } else { (br, bc) };
                if k != kb {
                    return Err(shape_err!(
                        "matmul inner dimensions disagree: {:?} x {:?}{}",
                        a.shape,
                        b.shape,
                        if *trans_b { "ᵀ" } else { "" }
                    ));
                }
                let mut out = vec![0.0; m * n];
                if *trans_b {
                    matmul_nt(&a.data, &b.data, &mut out, m, k, n);
                } else {
                    matmul_nn(&a.data, &b.data, &mut out, m, k, n);
                }
                Tensor::from_raw(vec![m, n], out)
            }
            Op::Add(a, b) => {
                val(a).same_shape(val(b), "add")?;
                zip(val(a), val(b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                val(a).same_shape(val(b), "sub")?;
                zip(val(a), val(b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                val(a).same_shape(val(b), "mul")?;
                zip(val(a), val(b), |x, y| x * y)
            }
            Op::Minimum(a, b) => {
                val(a).same_shape(val(b), "minimum")?;
                zip(val(a), val(b), |x, y| if y < x { y } else { x })
            }
            Op::AddRow { a, row } => {
                let (a, row) = (val(a), val(row));
                let d = a.last_dim();
                if row.numel() != d {
                    return Err(shape_err!(
                        "row add: last axis {d} vs row of {:?}",
                        row.shape
                    ));
                }
                let mut out = a.data.clone();
                for chunk in out.chunks_mut(d) {
                    for (o, r) in chunk.iter_mut().zip(&row.data) {
                        *o += r;
                    }
                }
                Tensor::from_raw(a.shape.clone(), out)
            }
            Op::Scale(a, s) => map(val(a), |x| x * s),
            Op::AddScalar(a, s) => map(val(a), |x| x + s),
            Op::Clamp { a, lo, hi } => map(val(a), |x| x.clamp(*lo, *hi)),
            Op::SoftmaxRows(a) => {
                let a = val(a);
                let d = a.last_dim();
                let mut out = vec![0.0; a.numel()];
                for (x, o) in a.data.chunks(d).zip(out.chunks_mut(d)) {
                    softmax_row(x, o);
                }
                Tensor::from_raw(a.shape.clone(), out)
            }
            Op::Sigmoid(a) => map(val(a), sigmoid),
            Op::Silu(a) => map(val(a), |x| x * sigmoid(x)),
            Op::Exp(a) => map(val(a), f64::exp),
            Op::LogSigmoid(a) => map(val(a), log_sigmoid),
            Op::RmsNorm { x, gain } => {
                let (x, gain) = (val(x), val(gain));
                let d = x.last_dim();
                if gain.numel() != d {
                    return Err(shape_err!(
                        "rms_norm gain {:?} does not match last axis {d}",
                        gain.shape
                    ));
                }
                let r = inv_rms(x);
                let mut out = vec![0.0; x.numel()];
                for ((xv, o), ri) in x.data.chunks(d).zip(out.chunks_mut(d)).zip(&r) {
                    for j in 0..d {
                        o[j] = xv[j] * ri * gain.data[j];
                    }
                }
                Tensor::from_raw(x.shape.clone(), out)
            }
            Op::ConcatRows(parts) => {
                let parts: Vec<&Tensor> = parts.iter().map(val).collect();
                Tensor::concat_rows(&parts)?
            }
            Op::SliceRows { a, start, end } => val(a).rows(*start, *end)?,
            Op::ConcatCols(parts) => {
                let parts: Vec<&Tensor> = parts.iter().map(val).collect();
                let m = parts
                    .first()
                    .ok_or_else(|| shape_err!("concat of zero tensors"))?
                    .dims2()?[0];
                let mut widths = Vec::with_capacity(parts.len());
                for p in &parts {
                    let [pm, pc] = p.dims2()?;
                    if pm != m {
                        return Err(shape_err!("column concat row mismatch: {m} vs {pm}"));
                    }
                    widths.push(pc);
                }
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(m * total);
                for i in 0..m {
                    for (p, &w) in parts.iter().zip(&widths) {
                        out.extend_from_slice(&p.data[i * w..(i + 1) * w]);
                    }
                }
                Tensor::from_raw(vec![m, total], out)
            }
            Op::SliceCols { a, start, end } => {
                let a = val(a);
                let [m, n] = a.dims2()?;
                if start >= end || *end > n {
                    return Err(shape_err!("column slice {start}..{end} out of 0..{n}"));
                }
                let w = end - start;
                let mut out = Vec::with_capacity(m * w);
                for i in 0..m {
                    out.extend_from_slice(&a.data[i * n + start..i * n + end]);
                }
                Tensor::from_raw(vec![m, w], out)
            }
            Op::Gather { a, index } => {
                let a = val(a);
                if let Some(&bad) = index.iter().find(|&&i| i >= a.numel()) {
                    return Err(shape_err!("gather index {bad} out of {}", a.numel()));
                }
                Tensor::from_raw(
                    vec![index.len()],
                    index.iter().map(|&i| a.data[i]).collect(),
                )
            }
            Op::Reshape(a) => val(a).clone(),
            Op::Sum(a) => Tensor::scalar(val(a).data.iter().sum()),
            Op::Mean(a) => {
                let a = val(a);
                Tensor::scalar(a.data.iter().sum::<f64>() / a.numel() as f64)
            }
        })
    }

    // ---- op constructors -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul {
            a,
            b,
            trans_b: false,
        })
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul {
            a,
            b,
            trans_b: true,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Minimum(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow { a, row })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.record(Op::Scale(a, s)).expect("scale is total")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.record(Op::AddScalar(a, s)).expect("add_scalar is total")
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.record(Op::Clamp { a, lo, hi }).expect("clamp is total")
    }

    /// Row-wise softmax over the last axis, stabilised by the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.record(Op::SoftmaxRows(a)).expect("softmax is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.record(Op::Sigmoid(a)).expect("sigmoid is total")
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.record(Op::Silu(a)).expect("silu is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.record(Op::Exp(a)).expect("exp is total")
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.record(Op::LogSigmoid(a)).expect("log_sigmoid is total")
    }

    /// `x / sqrt(mean(x²) + 1e-6) ⊙ gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.record(Op::RmsNorm { x, gain })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.record(Op::SliceRows { a, start, end })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.record(Op::SliceCols { a, start, end })
    }

    /// Flat gather, then reshape to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let g = self.record(Op::Gather { a, index })?;
        self.reshape(g, shape)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(shape_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            ));
        }
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.nodes.push(Node {
            value,
            op: Op::Reshape(a),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a)).expect("sum is total")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.record(Op::Mean(a)).expect("mean is total")
    }

    /// Sum of squares, a common loss building block.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a).expect("same var");
        self.sum(sq)
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse-mode gradients of the scalar `loss` with respect to every node.
    ///
    /// Nodes are visited in exact reverse creation order, so the result is a
    /// deterministic function of the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        // Accumulate `delta` (same length as the input) into input `v`.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(a), val(b));
                let [m, k] = [av.shape[0], av.shape[1]];
                let n = node.value.shape[1];
                if *trans_b {
                    // out = a bᵀ: ga = g b, gb = gᵀ a
                    acc(*a, &mut |ga| matmul_nn(g, &bv.data, ga, m, n, k));
                    acc(*b, &mut |gb| matmul_tn(g, &av.data, gb, m, n, k));
                } else {
                    // out = a b: ga = g bᵀ, gb = aᵀ g
                    acc(*a, &mut |ga| matmul_nt(g, &bv.data, ga, m, n, k));
                    acc(*b, &mut |gb| matmul_tn(&av.data, g, gb, m, k, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(*a, &mut |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(&bv.data) {
                        *o += x * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(&av.data) {
                        *o += x * y;
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(*a, &mut |ga| {
                    for (j, o) in ga.iter_mut().enumerate() {
                        if !(bv.data[j] < av.data[j]) {
                            *o += g[j];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (j, o) in gb.iter_mut().enumerate() {
                        if bv.data[j] < av.data[j] {
                            *o += g[j];
                        }
                    }
                });
            }
            Op::AddRow { a, row } => {
                acc(*a, &mut |ga| add_into(ga, g));
                let d = val(row).numel();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(d) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o += s * x;
                }
            }),
            Op::AddScalar(a, _) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Clamp { a, lo, hi } => {
                let av = val(a);
                acc(*a, &mut |ga| {
                    for ((o, &x), &v) in ga.iter_mut().zip(g).zip(&av.data) {
                        if v >= *lo && v <= *hi {
                            *o += x;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let d = y.last_dim();
                acc(*a, &mut |ga| {
                    for ((gy, yr), o) in g.chunks(d).zip(y.data.chunks(d)).zip(ga.chunks_mut(d)) {
                        let s: f64 = gy.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            o[j] += yr[j] * (gy[j] - s);
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for ((o, &x), &s) in ga.iter_mut().zip(g).zip(&y.data) {
                        *o += x * s * (1.0 - s);
                    }
                });
            }
            Op::Silu(a) => {
                let xv = val(a);
                acc(*a, &mut |ga| {
                    for ((o, &gx), &x) in ga.iter_mut().zip(g).zip(&xv.data) {
                        let s = sigmoid(x);
                        *o += gx * (s + x * s * (1.0 - s));
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for ((o, &x), &e) in ga.iter_mut().zip(g).zip(&y.data) {
                        *o += x * e;
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let xv = val(a);
                acc(*a, &mut |ga| {
                    for ((o, &gx), &x) in ga.iter_mut().zip(g).zip(&xv.data) {
                        *o += gx * sigmoid(-x);
                    }
                });
            }
            Op::RmsNorm { x, gain } => {
                let (xv, gv) = (val(x), val(gain));
                let d = xv.last_dim();
                let r = inv_rms(xv);
                acc(*x, &mut |gx| {
                    for (((xr, gr), o), &ri) in xv
                        .data
                        .chunks(d)
                        .zip(g.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .zip(&r)
                    {
                        let dot: f64 = (0..d).map(|j| gr[j] * gv.data[j] * xr[j]).sum();
                        let c = ri * ri * ri * dot / d as f64;
                        for j in 0..d {
                            o[j] += ri * gv.data[j] * gr[j] - c * xr[j];
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for ((xr, gr), &ri) in xv.data.chunks(d).zip(g.chunks(d)).zip(&r) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j] * ri;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(p).numel();
                    let seg = &g[off..off + n];
                    acc(*p, &mut |gp| add_into(gp, seg));
                    off += n;
                }
            }
            Op::SliceRows { a, start, .. } => {
                let c = val(a).shape[1];
                acc(*a, &mut |ga| add_into(&mut ga[start * c..start * c + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape[0];
                let total = node.value.shape[1];
                let mut col = 0;
                for p in parts {
                    let w = val(p).shape[1];
                    acc(*p, &mut |gp| {
                        for i in 0..m {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * total + col..i * total + col + w],
                            );
                        }
                    });
                    col += w;
                }
            }
            Op::SliceCols { a, start, end } => {
                let n = val(a).shape[1];
                let w = end - start;
                acc(*a, &mut |ga| {
                    for (i, gr) in g.chunks(w).enumerate() {
                        add_into(&mut ga[i * n + start..i * n + end], gr);
                    }
                });
            }
            Op::Gather { a, index } => acc(*a, &mut |ga| {
                for (&src, &x) in index.iter().zip(g) {
                    ga[src] += x;
                }
            }),
            Op::Sum(a) => acc(*a, &mut |ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(a) => {
                let n = val(a).numel() as f64;
                acc(*a, &mut |ga| {
                    for o in ga.iter_mut() {
                        *o += g[0] / n;
                    }
                })
            }
        }
    }

    /// Recomputes every non-leaf node from its recorded inputs.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        self.nodes
            .iter()
            .map(|n| match n.op {
                Op::Leaf => Ok(n.value.clone()),
                Op::Reshape(a) => Ok(Tensor::from_raw(
                    n.value.shape.clone(),
                    self.nodes[a.0].value.data.clone(),
                )),
                ref op => self.eval(op),
            })
            .collect()
    }

    /// True when every node's inputs were created before it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().all(|v| v.0 < i))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}
