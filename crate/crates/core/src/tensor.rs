//! Dense row-major tensor over a generic scalar.
//!
//! This is the plain value type: forward math lives here, gradient tracking
//! lives in [`crate::autodiff`]. All shapes are explicit; there is no
//! broadcasting beyond the few patterns the pipeline needs (`add_bias`).

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                msg: format!("shape {:?} holds {} elements, got {}", shape, numel, data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "from_vec",
                msg: format!("zero extent in shape {:?}", shape),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<S>>) {
        debug_assert!(grad.as_ref().map_or(true, |g| g.len() == self.data.len()));
        self.grad = grad;
    }

    pub fn accumulate_grad(&mut self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    /// Extracts the single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                msg: format!("expected one element, shape is {:?}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at a multi-dimensional index.
    pub fn at(&self, idx: &[usize]) -> S {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: S) {
        let i = self.flat_index(idx);
        self.data[i] = value;
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &d) in idx.iter().enumerate() {
            debug_assert!(d < self.shape[i]);
            flat = flat * self.shape[i] + d;
        }
        flat
    }

    fn same_shape(&self, rhs: &Self, op: &'static str) -> Result<()> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, rhs: &Self, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.same_shape(rhs, op)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(self.shape.clone(), data)
    }

    fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, "mul", |a, b| a * b)
    }

    pub fn div(&self, rhs: &Self) -> Result<Self> {
        self.zip_map(rhs, "div", |a, b| a / b)
    }

    pub fn add_scalar(&self, c: S) -> Self {
        self.map(|a| a + c)
    }

    pub fn mul_scalar(&self, c: S) -> Self {
        self.map(|a| a * c)
    }

    pub fn relu(&self) -> Self {
        self.map(|a| if a > S::zero() { a } else { S::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid_scalar)
    }

    pub fn exp(&self) -> Self {
        self.map(|a| a.exp())
    }

    pub fn ln(&self) -> Self {
        self.map(|a| a.ln())
    }

    pub fn softplus(&self) -> Self {
        self.map(softplus_scalar)
    }

    /// Elementwise `a^p` for a fixed non-negative base domain.
    pub fn pow_const(&self, p: S) -> Result<Self> {
        if self.data.iter().any(|&a| a < S::zero()) {
            return Err(Error::InvalidShape {
                op: "pow_const",
                msg: "negative base".to_string(),
            });
        }
        Ok(self.map(|a| a.powf(p)))
    }

    pub fn sum_all(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn mean_all(&self) -> S {
        self.sum_all() / sc::<S>(self.data.len() as f64)
    }

    /// `(m,k) @ (k,n) -> (m,n)`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = rhs.shape[1];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Self> {
        self.permute(&[1, 0])
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                msg: format!("axes {:?} invalid for shape {:?}", axes, self.shape),
            });
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let mut out = vec![S::zero(); self.data.len()];
        let old_strides = strides(&self.shape);
        let new_strides = strides(&new_shape);
        let mut idx = vec![0usize; rank];
        for (flat, slot) in out.iter_mut().enumerate() {
            // Decompose flat index in the new layout, map back through axes.
            let mut rem = flat;
            for d in 0..rank {
                idx[d] = rem / new_strides[d];
                rem %= new_strides[d];
            }
            let mut src = 0;
            for d in 0..rank {
                src += idx[d] * old_strides[axes[d]];
            }
            *slot = self.data[src];
        }
        Tensor::from_vec(new_shape, out)
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        let numel: usize = new_shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                msg: format!("cannot reshape {:?} into {:?}", self.shape, new_shape),
            });
        }
        Tensor::from_vec(new_shape.to_vec(), self.data.clone())
    }

    pub fn slice(&self, ranges: &[Range<usize>]) -> Result<Self> {
        if ranges.len() != self.shape.len()
            || ranges
                .iter()
                .zip(&self.shape)
                .any(|(r, &d)| r.start >= r.end || r.end > d)
        {
            return Err(Error::InvalidShape {
                op: "slice",
                msg: format!("ranges {:?} invalid for shape {:?}", ranges, self.shape),
            });
        }
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let numel: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        let src_strides = strides(&self.shape);
        let mut idx: Vec<usize> = ranges.iter().map(|r| r.start).collect();
        loop {
            let flat: usize = idx.iter().zip(&src_strides).map(|(&i, &s)| i * s).sum();
            out.push(self.data[flat]);
            // Advance the innermost counter, carrying outward.
            let mut d = idx.len();
            loop {
                if d == 0 {
                    return Tensor::from_vec(out_shape, out);
                }
                d -= 1;
                idx[d] += 1;
                if idx[d] < ranges[d].end {
                    break;
                }
                idx[d] = ranges[d].start;
            }
        }
    }

    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidShape {
            op: "concat",
            msg: "no inputs".to_string(),
        })?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(Error::InvalidShape {
                op: "concat",
                msg: format!("axis {} out of rank {}", axis, rank),
            });
        }
        for p in parts {
            if p.shape.len() != rank
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let rows = p.shape[axis];
                let start = o * rows * inner;
                out.extend_from_slice(&p.data[start..start + rows * inner]);
            }
        }
        Tensor::from_vec(out_shape, out)
    }

    /// `(n,m) + (m,)` broadcast over rows.
    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        if self.shape.len() != 2 || bias.shape.len() != 1 || bias.shape[0] != self.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = self.data.clone();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = out[i * m + j] + bias.data[j];
            }
        }
        Tensor::from_vec(vec![n, m], out)
    }

    /// Softmax over the last axis of a 2-D tensor, max-subtracted for stability.
    pub fn row_softmax(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "row_softmax",
                msg: format!("expected rank 2, got {:?}", self.shape),
            });
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); rows * cols];
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let m = row.iter().fold(S::neg_infinity(), |acc, &v| acc.max(v));
            let mut denom = S::zero();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - m).exp();
                denom = denom + *o;
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o = *o / denom;
            }
        }
        Tensor::from_vec(vec![rows, cols], out)
    }

    /// 2-D convolution: input `(C_in,H,W)`, weight `(C_out,C_in,kh,kw)`,
    /// optional bias `(C_out,)`, zero padding.
    pub fn conv2d(
        &self,
        weight: &Self,
        bias: Option<&Self>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if self.shape.len() != 3 || weight.shape.len() != 4 || weight.shape[1] != self.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: "stride must be positive".to_string(),
            });
        }
        let (c_in, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (c_out, kh, kw) = (weight.shape[0], weight.shape[2], weight.shape[3]);
        if let Some(b) = bias {
            if b.shape != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![c_out],
                    rhs: b.shape.clone(),
                });
            }
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel ({kh},{kw}) larger than padded input ({h},{w}) pad {pad}"),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![S::zero(); c_out * oh * ow];
        for oc in 0..c_out {
            let b = bias.map_or(S::zero(), |b| b.data[oc]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for ic in 0..c_in {
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let iy = iy - pad;
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < pad || ix >= w + pad {
                                    continue;
                                }
                                let ix = ix - pad;
                                acc = acc
                                    + weight.data[((oc * c_in + ic) * kh + ky) * kw + kx]
                                        * self.data[(ic * h + iy) * w + ix];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::from_vec(vec![c_out, oh, ow], out)
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

pub(crate) fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softplus_scalar<S: Scalar>(x: S) -> S {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
    dtype: String,
}

/// Writes a tensor as a JSON shape header line followed by the flat data as
/// little-endian 64-bit floats. The on-disk dtype is always `f64`.
pub fn write_tensor<S: Scalar, W: Write>(t: &Tensor<S>, w: &mut W) -> Result<()> {
    let header = TensorHeader {
        shape: t.shape().to_vec(),
        dtype: "f64".to_string(),
    };
    let mut line = serde_json::to_vec(&header)?;
    line.push(b'\n');
    w.write_all(&line).map_err(|e| Error::io("<writer>", e))?;
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        let v64 = v.to_f64().ok_or_else(|| Error::NonFinite {
            context: "write_tensor".to_string(),
        })?;
        buf.extend_from_slice(&v64.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io("<writer>", e))
}

pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read_exact(&mut byte) {
            Ok(()) => {
                if byte[0] == b'\n' {
                    break;
                }
                header_bytes.push(byte[0]);
                if header_bytes.len() > 64 * 1024 {
                    return Err(Error::InvalidShape {
                        op: "read_tensor",
                        msg: "unterminated header".to_string(),
                    });
                }
            }
            Err(e) => return Err(Error::io("<reader>", e)),
        }
    }
    let header: TensorHeader = serde_json::from_slice(&header_bytes)?;
    if header.dtype != "f64" {
        return Err(Error::InvalidShape {
            op: "read_tensor",
            msg: format!("unsupported dtype {}", header.dtype),
        });
    }
    let numel: usize = header.shape.iter().product();
    let mut buf = vec![0u8; numel * 8];
    r.read_exact(&mut buf).map_err(|e| Error::io("<reader>", e))?;
    let mut data = Vec::with_capacity(numel);
    for chunk in buf.chunks_exact(8) {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        data.push(S::from_f64(v).ok_or_else(|| Error::NonFinite {
            context: "read_tensor".to_string(),
        })?);
    }
    Tensor::from_vec(header.shape, data)
}

pub fn save_tensor<S: Scalar>(t: &Tensor<S>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_tensor(t, &mut f)
}

pub fn load_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_tensor(&mut f)
}
