//! Reverse-mode automatic differentiation over a dynamic computation record.
//!
//! A [`Tape`] stores every forward value plus the operation that produced it,
//! in creation (= topological) order. `backward` walks the record in reverse
//! and accumulates vector-Jacobian products into every tracked leaf. The
//! record can be replayed to reproduce all forward values bit-identically.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};
use crate::tensor::{sigmoid_scalar, strides, Tensor};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    AddScalar(VarId, S),
    MulScalar(VarId, S),
    PowConst(VarId, S),
    AddBias { mat: VarId, bias: VarId },
    Matmul(VarId, VarId),
    Permute { input: VarId, axes: Vec<usize> },
    Reshape { input: VarId },
    Slice { input: VarId, ranges: Vec<Range<usize>> },
    Concat { inputs: Vec<VarId>, axis: usize },
    Relu(VarId),
    Sigmoid(VarId),
    Exp(VarId),
    Ln(VarId),
    Softplus(VarId),
    Sum(VarId),
    Mean(VarId),
    RowSoftmax(VarId),
    Conv2d {
        input: VarId,
        weight: VarId,
        bias: Option<VarId>,
        stride: usize,
        pad: usize,
    },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<VarId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::PowConst(a, _)
            | Op::Permute { input: a, .. }
            | Op::Reshape { input: a }
            | Op::Slice { input: a, .. }
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSoftmax(a) => vec![*a],
            Op::AddBias { mat, bias } => vec![*mat, *bias],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut v = vec![*input, *weight];
                if let Some(b) = bias {
                    v.push(*b);
                }
                v
            }
        }
    }
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
    grad: Option<Vec<S>>,
}

/// The computation record: forward values plus enough structure to replay
/// them and to run the reverse pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor; gradient tracking follows its
    /// `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor<S>) -> VarId {
        let needs = value.requires_grad();
        self.push(Op::Leaf, value, needs)
    }

    /// Registers an input that never tracks gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` w.r.t. this node, if tracked.
    pub fn grad(&self, id: VarId) -> Option<Tensor<S>> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.shape().to_vec(), g.clone())
                .expect("grad shape matches value shape")
        })
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            grad: None,
        });
        VarId(self.nodes.len() - 1)
    }

    fn check(&self, id: VarId, op: &'static str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Record(format!("{op}: node {} not on this tape", id.0)));
        }
        Ok(())
    }

    fn record(
        &mut self,
        op: Op<S>,
        op_name: &'static str,
        value: Tensor<S>,
    ) -> Result<VarId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("forward op {op_name}"),
            });
        }
        let needs = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        Ok(self.push(op, value, needs))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a, "add")?;
        self.check(b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        self.record(Op::Add(a, b), "add", v)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a, "sub")?;
        self.check(b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        self.record(Op::Sub(a, b), "sub", v)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a, "mul")?;
        self.check(b, "mul")?;
        let v = self.value(a).mul(self.value(b))?;
        self.record(Op::Mul(a, b), "mul", v)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a, "div")?;
        self.check(b, "div")?;
        let v = self.value(a).div(self.value(b))?;
        self.record(Op::Div(a, b), "div", v)
    }

    pub fn add_scalar(&mut self, a: VarId, c: S) -> Result<VarId> {
        self.check(a, "add_scalar")?;
        let v = self.value(a).add_scalar(c);
        self.record(Op::AddScalar(a, c), "add_scalar", v)
    }

    pub fn mul_scalar(&mut self, a: VarId, c: S) -> Result<VarId> {
        self.check(a, "mul_scalar")?;
        let v = self.value(a).mul_scalar(c);
        self.record(Op::MulScalar(a, c), "mul_scalar", v)
    }

    /// Elementwise `a^p`, `a >= 0`.
    pub fn pow_const(&mut self, a: VarId, p: S) -> Result<VarId> {
        self.check(a, "pow_const")?;
        let v = self.value(a).pow_const(p)?;
        self.record(Op::PowConst(a, p), "pow_const", v)
    }

    pub fn add_bias(&mut self, mat: VarId, bias: VarId) -> Result<VarId> {
        self.check(mat, "add_bias")?;
        self.check(bias, "add_bias")?;
        let v = self.value(mat).add_bias(self.value(bias))?;
        self.record(Op::AddBias { mat, bias }, "add_bias", v)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let v = self.value(a).matmul(self.value(b))?;
        self.record(Op::Matmul(a, b), "matmul", v)
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        self.permute(a, &[1, 0])
    }

    pub fn permute(&mut self, a: VarId, axes: &[usize]) -> Result<VarId> {
        self.check(a, "permute")?;
        let v = self.value(a).permute(axes)?;
        self.record(
            Op::Permute {
                input: a,
                axes: axes.to_vec(),
            },
            "permute",
            v,
        )
    }

    pub fn reshape(&mut self, a: VarId, new_shape: &[usize]) -> Result<VarId> {
        self.check(a, "reshape")?;
        let v = self.value(a).reshape(new_shape)?;
        self.record(Op::Reshape { input: a }, "reshape", v)
    }

    pub fn slice(&mut self, a: VarId, ranges: &[Range<usize>]) -> Result<VarId> {
        self.check(a, "slice")?;
        let v = self.value(a).slice(ranges)?;
        self.record(
            Op::Slice {
                input: a,
                ranges: ranges.to_vec(),
            },
            "slice",
            v,
        )
    }

    pub fn concat(&mut self, parts: &[VarId], axis: usize) -> Result<VarId> {
        for &p in parts {
            self.check(p, "concat")?;
        }
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors, axis)?;
        self.record(
            Op::Concat {
                inputs: parts.to_vec(),
                axis,
            },
            "concat",
            v,
        )
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "relu")?;
        let v = self.value(a).relu();
        self.record(Op::Relu(a), "relu", v)
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "sigmoid")?;
        let v = self.value(a).sigmoid();
        self.record(Op::Sigmoid(a), "sigmoid", v)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "exp")?;
        let v = self.value(a).exp();
        self.record(Op::Exp(a), "exp", v)
    }

    pub fn ln(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "ln")?;
        let v = self.value(a).ln();
        self.record(Op::Ln(a), "ln", v)
    }

    pub fn softplus(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "softplus")?;
        let v = self.value(a).softplus();
        self.record(Op::Softplus(a), "softplus", v)
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "sum")?;
        let v = Tensor::scalar(self.value(a).sum_all());
        self.record(Op::Sum(a), "sum", v)
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "mean")?;
        let v = Tensor::scalar(self.value(a).mean_all());
        self.record(Op::Mean(a), "mean", v)
    }

    pub fn row_softmax(&mut self, a: VarId) -> Result<VarId> {
        self.check(a, "row_softmax")?;
        let v = self.value(a).row_softmax()?;
        self.record(Op::RowSoftmax(a), "row_softmax", v)
    }

    pub fn conv2d(
        &mut self,
        input: VarId,
        weight: VarId,
        bias: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        self.check(input, "conv2d")?;
        self.check(weight, "conv2d")?;
        if let Some(b) = bias {
            self.check(b, "conv2d")?;
        }
        let v = self.value(input).conv2d(
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        self.record(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            "conv2d",
            v,
        )
    }

    /// Reverse pass from a scalar loss. Gradients land on every node whose
    /// subgraph contains a tracked leaf; untracked nodes receive none.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        self.check(loss, "backward")?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Record(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let upstream = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &upstream, &mut grads)?;
            self.nodes[i].grad = Some(upstream);
        }
        // Everything at or below the loss has been visited; validate leaves.
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: "backward".to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], id: VarId, delta: Vec<S>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi = *gi + *di;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, upstream: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let out = &self.nodes[i].value;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, upstream.to_vec());
                self.accumulate(grads, b, upstream.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, upstream.to_vec());
                self.accumulate(grads, b, upstream.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(
                    grads,
                    a,
                    upstream.iter().zip(bv).map(|(&g, &b)| g * b).collect(),
                );
                self.accumulate(
                    grads,
                    b,
                    upstream.iter().zip(av).map(|(&g, &a)| g * a).collect(),
                );
            }
            Op::Div(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(
                    grads,
                    a,
                    upstream.iter().zip(bv).map(|(&g, &b)| g / b).collect(),
                );
                self.accumulate(
                    grads,
                    b,
                    upstream
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&g, (&a, &b))| -g * a / (b * b))
                        .collect(),
                );
            }
            Op::AddScalar(a, _) => self.accumulate(grads, a, upstream.to_vec()),
            Op::MulScalar(a, c) => {
                self.accumulate(grads, a, upstream.iter().map(|&g| g * c).collect())
            }
            Op::PowConst(a, p) => {
                let av = self.value(a).data();
                let pm1 = p - S::one();
                self.accumulate(
                    grads,
                    a,
                    upstream
                        .iter()
                        .zip(av)
                        .map(|(&g, &x)| {
                            if p == S::zero() {
                                S::zero()
                            } else {
                                g * p * x.powf(pm1)
                            }
                        })
                        .collect(),
                );
            }
            Op::AddBias { mat, bias } => {
                self.accumulate(grads, mat, upstream.to_vec());
                let m = self.value(bias).numel();
                let n = upstream.len() / m;
                let mut db = vec![S::zero(); m];
                for r in 0..n {
                    for (j, db_j) in db.iter_mut().enumerate() {
                        *db_j = *db_j + upstream[r * m + j];
                    }
                }
                self.accumulate(grads, bias, db);
            }
            Op::Matmul(a, b) => {
                let at = self.value(a);
                let bt = self.value(b);
                let (m, n) = (at.shape()[0], bt.shape()[1]);
                let g = Tensor::from_vec(vec![m, n], upstream.to_vec())?;
                if self.nodes[a.0].needs_grad {
                    let da = g.matmul(&bt.transpose()?)?;
                    self.accumulate(grads, a, da.data().to_vec());
                }
                if self.nodes[b.0].needs_grad {
                    let db = at.transpose()?.matmul(&g)?;
                    self.accumulate(grads, b, db.data().to_vec());
                }
            }
            Op::Permute { input, axes } => {
                let g = Tensor::from_vec(out.shape().to_vec(), upstream.to_vec())?;
                let mut inverse = vec![0usize; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inverse[a] = d;
                }
                self.accumulate(grads, input, g.permute(&inverse)?.data().to_vec());
            }
            Op::Reshape { input } => self.accumulate(grads, input, upstream.to_vec()),
            Op::Slice { input, ranges } => {
                let src_shape = self.value(input).shape().to_vec();
                let mut dg = vec![S::zero(); self.value(input).numel()];
                let src_strides = strides(&src_shape);
                let mut idx: Vec<usize> = ranges.iter().map(|r| r.start).collect();
                let mut k = 0;
                'outer: loop {
                    let flat: usize = idx.iter().zip(&src_strides).map(|(&i, &s)| i * s).sum();
                    dg[flat] = dg[flat] + upstream[k];
                    k += 1;
                    let mut d = idx.len();
                    loop {
                        if d == 0 {
                            break 'outer;
                        }
                        d -= 1;
                        idx[d] += 1;
                        if idx[d] < ranges[d].end {
                            break;
                        }
                        idx[d] = ranges[d].start;
                    }
                }
                self.accumulate(grads, input, dg);
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = out.shape()[..axis].iter().product();
                let inner: usize = out.shape()[axis + 1..].iter().product();
                let total_axis = out.shape()[axis];
                let mut offset = 0;
                for inp in inputs {
                    let rows = self.value(inp).shape()[axis];
                    if self.nodes[inp.0].needs_grad {
                        let mut dg = Vec::with_capacity(self.value(inp).numel());
                        for o in 0..outer {
                            let start = (o * total_axis + offset) * inner;
                            dg.extend_from_slice(&upstream[start..start + rows * inner]);
                        }
                        self.accumulate(grads, inp, dg);
                    }
                    offset += rows;
                }
            }
            Op::Relu(a) => {
                let av = self.value(a).data();
                self.accumulate(
                    grads,
                    a,
                    upstream
                        .iter()
                        .zip(av)
                        .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => {
                let yv = out.data();
                self.accumulate(
                    grads,
                    a,
                    upstream
                        .iter()
                        .zip(yv)
                        .map(|(&g, &y)| g * y * (S::one() - y))
                        .collect(),
                );
            }
            Op::Exp(a) => {
                let yv = out.data();
                self.accumulate(
                    grads,
                    a,
                    upstream.iter().zip(yv).map(|(&g, &y)| g * y).collect(),
                );
            }
            Op::Ln(a) => {
                let av = self.value(a).data();
                self.accumulate(
                    grads,
                    a,
                    upstream.iter().zip(av).map(|(&g, &x)| g / x).collect(),
                );
            }
            Op::Softplus(a) => {
                let av = self.value(a).data();
                self.accumulate(
                    grads,
                    a,
                    upstream
                        .iter()
                        .zip(av)
                        .map(|(&g, &x)| g * sigmoid_scalar(x))
                        .collect(),
                );
            }
            Op::Sum(a) => {
                let g = upstream[0];
                self.accumulate(grads, a, vec![g; self.value(a).numel()]);
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                let g = upstream[0] / sc::<S>(n as f64);
                self.accumulate(grads, a, vec![g; n]);
            }
            Op::RowSoftmax(a) => {
                let y = out;
                let (rows, cols) = (y.shape()[0], y.shape()[1]);
                let mut dg = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &upstream[r * cols..(r + 1) * cols];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(S::zero(), |acc, (&y, &g)| acc + y * g);
                    for j in 0..cols {
                        dg[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, a, dg);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let x = self.value(input);
                let w = self.value(weight);
                let (c_in, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (oh, ow) = (out.shape()[1], out.shape()[2]);
                let need_x = self.nodes[input.0].needs_grad;
                let need_w = self.nodes[weight.0].needs_grad;
                let mut dx = vec![S::zero(); x.numel()];
                let mut dw = vec![S::zero(); w.numel()];
                for oc in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = upstream[(oc * oh + oy) * ow + ox];
                            for ic in 0..c_in {
                                for ky in 0..kh {
                                    let iy = oy * stride + ky;
                                    if iy < pad || iy >= h + pad {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    for kx in 0..kw {
                                        let ix = ox * stride + kx;
                                        if ix < pad || ix >= wdt + pad {
                                            continue;
                                        }
                                        let ix = ix - pad;
                                        let wi = ((oc * c_in + ic) * kh + ky) * kw + kx;
                                        let xi = (ic * h + iy) * wdt + ix;
                                        if need_x {
                                            dx[xi] = dx[xi] + g * w.data()[wi];
                                        }
                                        if need_w {
                                            dw[wi] = dw[wi] + g * x.data()[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(grads, input, dx);
                }
                if need_w {
                    self.accumulate(grads, weight, dw);
                }
                if let Some(b) = bias {
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![S::zero(); c_out];
                        for oc in 0..c_out {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    db[oc] = db[oc] + upstream[(oc * oh + oy) * ow + ox];
                                }
                            }
                        }
                        self.accumulate(grads, b, db);
                    }
                }
            }
        }
        Ok(())
    }

    /// Recomputes every non-leaf forward value from the record and checks it
    /// reproduces the stored values exactly.
    pub fn verify_replay(&self) -> Result<bool> {
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Add(a, b) => values[a.0].add(&values[b.0])?,
                Op::Sub(a, b) => values[a.0].sub(&values[b.0])?,
                Op::Mul(a, b) => values[a.0].mul(&values[b.0])?,
                Op::Div(a, b) => values[a.0].div(&values[b.0])?,
                Op::AddScalar(a, c) => values[a.0].add_scalar(*c),
                Op::MulScalar(a, c) => values[a.0].mul_scalar(*c),
                Op::PowConst(a, p) => values[a.0].pow_const(*p)?,
                Op::AddBias { mat, bias } => values[mat.0].add_bias(&values[bias.0])?,
                Op::Matmul(a, b) => values[a.0].matmul(&values[b.0])?,
                Op::Permute { input, axes } => values[input.0].permute(axes)?,
                Op::Reshape { input } => values[input.0].reshape(node.value.shape())?,
                Op::Slice { input, ranges } => values[input.0].slice(ranges)?,
                Op::Concat { inputs, axis } => {
                    let parts: Vec<&Tensor<S>> = inputs.iter().map(|i| &values[i.0]).collect();
                    Tensor::concat(&parts, *axis)?
                }
                Op::Relu(a) => values[a.0].relu(),
                Op::Sigmoid(a) => values[a.0].sigmoid(),
                Op::Exp(a) => values[a.0].exp(),
                Op::Ln(a) => values[a.0].ln(),
                Op::Softplus(a) => values[a.0].softplus(),
                Op::Sum(a) => Tensor::scalar(values[a.0].sum_all()),
                Op::Mean(a) => Tensor::scalar(values[a.0].mean_all()),
                Op::RowSoftmax(a) => values[a.0].row_softmax()?,
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    pad,
                } => values[input.0].conv2d(
                    &values[weight.0],
                    bias.map(|b| &values[b.0]),
                    *stride,
                    *pad,
                )?,
            };
            if v.shape() != node.value.shape() || v.data() != node.value.data() {
                return Ok(false);
            }
            values.push(v);
        }
        Ok(true)
    }
}
