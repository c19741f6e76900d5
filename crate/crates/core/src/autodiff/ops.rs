//! Primitive operation kinds and their forward kernels.

use std::sync::Arc;

use super::Tensor;
use crate::quant::QuantScheme;

/// Which elements of the `arg` input let gradient (or value) pass in [`Op::Mask`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskKind {
    /// `arg > 0`; ReLU and its derivative (0 at the kink).
    Positive,
    /// `lo <= arg <= hi`; the clipped straight-through estimator.
    InRange { lo: f64, hi: f64 },
}

impl MaskKind {
    #[inline]
    fn passes(self, v: f64) -> bool {
        match self {
            MaskKind::Positive => v > 0.0,
            MaskKind::InRange { lo, hi } => v >= lo && v <= hi,
        }
    }
}

/// Window geometry of a 2-D max pool over `[N, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn output_extent(&self, extent: usize) -> Option<usize> {
        if extent < self.kernel || self.stride == 0 {
            None
        } else {
            Some((extent - self.kernel) / self.stride + 1)
        }
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Declared graph input; value supplied by `forward`.
    Input,
    /// Differentiable leaf holding a parameter.
    Param,
    /// Leaf that never receives gradient, though its value may be reassigned.
    Constant,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Offset(f64),
    Powf(f64),
    Reshape(Vec<usize>),
    /// `out[i] = x[index[i]]`, or 0 where `index[i] < 0`.
    Gather {
        index: Arc<[isize]>,
        shape: Vec<usize>,
        source_len: usize,
    },
    /// Adjoint of `Gather`: `out[index[i]] += x[i]`.
    ScatterAdd {
        index: Arc<[isize]>,
        shape: Vec<usize>,
    },
    MatMul,
    /// `src * 1[pred(arg)]`; inputs `[src, arg]`.
    Mask(MaskKind),
    /// Picks `src` at the argmax of each `arg` window; inputs `[src, arg]`.
    PoolGather(PoolGeometry),
    /// Adjoint of `PoolGather`: routes pooled `src` back to the argmax of `arg`.
    PoolScatter(PoolGeometry),
    /// Quantize-dequantize in the forward pass; straight-through in backward.
    FakeQuant(QuantScheme),
    SoftmaxRows,
    LogSumExpRows,
}

impl Op {
    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param | Op::Constant)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Powf(_) => "powf",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::MatMul => "matmul",
            Op::Mask(_) => "mask",
            Op::PoolGather(_) => "pool_gather",
            Op::PoolScatter(_) => "pool_scatter",
            Op::FakeQuant(_) => "fake_quant",
            Op::SoftmaxRows => "softmax_rows",
            Op::LogSumExpRows => "logsumexp_rows",
        }
    }

    /// Input slots through which gradient flows.
    pub fn differentiable_slots(&self) -> &'static [usize] {
        match self {
            Op::Input | Op::Param | Op::Constant => &[],
            Op::Add | Op::Sub | Op::Mul | Op::MatMul => &[0, 1],
            Op::Mask(_) | Op::PoolGather(_) | Op::PoolScatter(_) => &[0],
            _ => &[0],
        }
    }
}

/// Evaluates a non-leaf op. `Err` carries a human-readable shape complaint.
pub fn evaluate(op: &Op, inputs: &[&Tensor]) -> Result<Tensor, String> {
    match op {
        Op::Input | Op::Param | Op::Constant => Err("leaf nodes are not evaluated".into()),
        Op::Add => zip(inputs, |a, b| a + b),
        Op::Sub => zip(inputs, |a, b| a - b),
        Op::Mul => zip(inputs, |a, b| a * b),
        Op::Scale(c) => Ok(map(inputs[0], |v| v * c)),
        Op::Offset(c) => Ok(map(inputs[0], |v| v + c)),
        Op::Powf(p) => Ok(map(inputs[0], |v| v.powf(*p))),
        Op::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != inputs[0].numel() {
                return Err(format!(
                    "cannot reshape {:?} into {shape:?}",
                    inputs[0].shape()
                ));
            }
            Ok(Tensor::from_parts(shape.clone(), inputs[0].data().to_vec()))
        }
        Op::Gather {
            index,
            shape,
            source_len,
        } => {
            let x = inputs[0];
            if x.numel() != *source_len {
                return Err(format!(
                    "gather expects {source_len} source values, got {}",
                    x.numel()
                ));
            }
            let src = x.data();
            let data = index
                .iter()
                .map(|&i| if i < 0 { 0.0 } else { src[i as usize] })
                .collect();
            Ok(Tensor::from_parts(shape.clone(), data))
        }
        Op::ScatterAdd { index, shape } => {
            let x = inputs[0];
            if x.numel() != index.len() {
                return Err(format!(
                    "scatter expects {} values, got {}",
                    index.len(),
                    x.numel()
                ));
            }
            let n: usize = shape.iter().product();
            let mut out = vec![0.0; n];
            for (&i, &v) in index.iter().zip(x.data()) {
                if i >= 0 {
                    out[i as usize] += v;
                }
            }
            Ok(Tensor::from_parts(shape.clone(), out))
        }
        Op::MatMul => matmul(inputs[0], inputs[1]),
        Op::Mask(kind) => {
            let (src, arg) = (inputs[0], inputs[1]);
            if src.numel() != arg.numel() {
                return Err(format!(
                    "mask source {:?} vs argument {:?}",
                    src.shape(),
                    arg.shape()
                ));
            }
            let data = src
                .data()
                .iter()
                .zip(arg.data())
                .map(|(&s, &a)| if kind.passes(a) { s } else { 0.0 })
                .collect();
            Ok(Tensor::from_parts(src.shape().to_vec(), data))
        }
        Op::PoolGather(geom) => {
            let (src, arg) = (inputs[0], inputs[1]);
            if src.shape() != arg.shape() {
                return Err(format!(
                    "pool source {:?} vs argument {:?}",
                    src.shape(),
                    arg.shape()
                ));
            }
            let (out_shape, arg_idx) = pool_argmax(arg, *geom)?;
            let data = arg_idx.iter().map(|&i| src.data()[i]).collect();
            Ok(Tensor::from_parts(out_shape, data))
        }
        Op::PoolScatter(geom) => {
            let (src, arg) = (inputs[0], inputs[1]);
            let (out_shape, arg_idx) = pool_argmax(arg, *geom)?;
            if src.shape() != out_shape.as_slice() {
                return Err(format!(
                    "pooled gradient {:?} vs pooled shape {out_shape:?}",
                    src.shape()
                ));
            }
            let mut out = vec![0.0; arg.numel()];
            for (&i, &v) in arg_idx.iter().zip(src.data()) {
                out[i] += v;
            }
            Ok(Tensor::from_parts(arg.shape().to_vec(), out))
        }
        Op::FakeQuant(scheme) => Ok(map(inputs[0], |v| scheme.quantize_value(v))),
        Op::SoftmaxRows => {
            let (rows, cols) = rows_cols(inputs[0])?;
            let x = inputs[0].data();
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                    *o = (v - m).exp();
                    total += *o;
                }
                for o in &mut out[r * cols..(r + 1) * cols] {
                    *o /= total;
                }
            }
            Ok(Tensor::from_parts(inputs[0].shape().to_vec(), out))
        }
        Op::LogSumExpRows => {
            let (rows, cols) = rows_cols(inputs[0])?;
            let x = inputs[0].data();
            let data = (0..rows)
                .map(|r| {
                    let row = &x[r * cols..(r + 1) * cols];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
                })
                .collect();
            Ok(Tensor::from_parts(vec![rows], data))
        }
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip(inputs: &[&Tensor], f: impl Fn(f64, f64) -> f64) -> Result<Tensor, String> {
    let (a, b) = (inputs[0], inputs[1]);
    if a.shape() != b.shape() {
        return Err(format!("operands {:?} and {:?}", a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn rows_cols(x: &Tensor) -> Result<(usize, usize), String> {
    match x.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(format!("row-wise op needs a matrix, got {s:?}")),
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, String> {
    let (m, k) = rows_cols(a)?;
    let (k2, n) = rows_cols(b)?;
    if k != k2 {
        return Err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Flat input index of the first maximum (scan order) for each pooling window.
pub fn pool_argmax(x: &Tensor, geom: PoolGeometry) -> Result<(Vec<usize>, Vec<usize>), String> {
    let [n, c, h, w] = match x.shape() {
        [n, c, h, w] => [*n, *c, *h, *w],
        s => return Err(format!("max pool needs [N, C, H, W], got {s:?}")),
    };
    let (oh, ow) = match (geom.output_extent(h), geom.output_extent(w)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => return Err(format!("pool window {geom:?} does not fit {h}x{w}")),
    };
    let data = x.data();
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * geom.stride * w + j * geom.stride;
                for di in 0..geom.kernel {
                    for dj in 0..geom.kernel {
                        let at = base + (i * geom.stride + di) * w + j * geom.stride + dj;
                        if data[at] > data[best] {
                            best = at;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((vec![n, c, oh, ow], idx))
}
