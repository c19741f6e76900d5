//! Recorded computation graph with reverse-mode differentiation.
//!
//! Every node holds its current value, computed eagerly when the node is
//! recorded. The backward pass is itself recorded as ordinary nodes, so the
//! gradient nodes can be differentiated again (Hessian-vector products).
//! `forward` replays the whole record on new input values.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::ops::{self, MaskKind, Op, PoolGeometry};
use super::{AutodiffError, Tensor};
use crate::quant::QuantScheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Operation record plus current values.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    awaiting_forward: bool,
}

/// Gradient of one leaf, as returned by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct LeafGradient {
    pub node: NodeId,
    pub grad: Tensor,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after position `len`, e.g. gradient
    /// nodes that are no longer needed. Inputs and outputs must lie below it.
    pub fn truncate(&mut self, len: usize) -> Result<(), AutodiffError> {
        if let Some(id) = self.inputs.iter().chain(&self.outputs).find(|id| id.0 >= len) {
            return Err(AutodiffError::InvalidArgument(format!(
                "node {} is an input or output and cannot be dropped",
                id.0
            )));
        }
        self.nodes.truncate(len);
        Ok(())
    }

    /// Declares a graph input of fixed shape. Values arrive through [`Graph::forward`].
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.awaiting_forward = true;
        let id = self.push_leaf(Op::Input, Tensor::zeros(shape));
        self.inputs.push(id);
        id
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Param, value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Constant, value.with_requires_grad(false))
    }

    fn push_leaf(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value,
        });
        id
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId, AutodiffError> {
        let id = self.nodes.len();
        for input in &inputs {
            if input.0 >= id {
                return Err(AutodiffError::UnknownNode(input.0));
            }
        }
        let value = {
            let args: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            ops::evaluate(&op, &args).map_err(|detail| AutodiffError::ShapeMismatch {
                node: id,
                op: op.name(),
                detail,
            })?
        };
        self.nodes.push(Node { op, inputs, value });
        Ok(NodeId(id))
    }

    fn node(&self, id: NodeId) -> Result<&Node, AutodiffError> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor, AutodiffError> {
        Ok(&self.node(id)?.value)
    }

    pub fn shape(&self, id: NodeId) -> Result<&[usize], AutodiffError> {
        Ok(self.node(id)?.value.shape())
    }

    pub fn op(&self, id: NodeId) -> Result<&Op, AutodiffError> {
        Ok(&self.node(id)?.op)
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn set_outputs(&mut self, outputs: &[NodeId]) {
        self.outputs = outputs.to_vec();
    }

    /// Replaces a leaf's value without replaying. Shape must be unchanged.
    pub fn assign(&mut self, id: NodeId, value: Tensor) -> Result<(), AutodiffError> {
        let node = self
            .nodes
            .get_mut(id.0)
            .ok_or(AutodiffError::UnknownNode(id.0))?;
        if !node.op.is_leaf() {
            return Err(AutodiffError::InvalidArgument(format!(
                "node {} is a {} node, only leaves can be assigned",
                id.0,
                node.op.name()
            )));
        }
        if node.value.shape() != value.shape() {
            return Err(AutodiffError::ShapeMismatch {
                node: id.0,
                op: node.op.name(),
                detail: format!("expected {:?}, got {:?}", node.value.shape(), value.shape()),
            });
        }
        let requires_grad = matches!(node.op, Op::Param | Op::Input);
        node.value = value.with_requires_grad(requires_grad);
        Ok(())
    }

    /// Re-evaluates every recorded non-leaf node from `start` onward.
    pub fn recompute_from(&mut self, start: NodeId) -> Result<(), AutodiffError> {
        for i in start.0..self.nodes.len() {
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let args: Vec<&Tensor> =
                    node.inputs.iter().map(|j| &self.nodes[j.0].value).collect();
                ops::evaluate(&node.op, &args).map_err(|detail| AutodiffError::ShapeMismatch {
                    node: i,
                    op: node.op.name(),
                    detail,
                })?
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Replays the full record on new values for the declared inputs.
    pub fn forward(&mut self, inputs: &[Tensor]) -> Result<Vec<Tensor>, AutodiffError> {
        if inputs.len() != self.inputs.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "graph declares {} inputs, {} supplied",
                self.inputs.len(),
                inputs.len()
            )));
        }
        for (&id, value) in self.inputs.clone().iter().zip(inputs) {
            self.assign(id, value.clone())?;
        }
        self.recompute_from(NodeId(0))?;
        self.awaiting_forward = false;
        self.outputs
            .iter()
            .map(|&o| self.value(o).cloned())
            .collect()
    }

    fn ensure_forwarded(&self) -> Result<(), AutodiffError> {
        if self.awaiting_forward {
            Err(AutodiffError::NotForwarded)
        } else {
            Ok(())
        }
    }

    // ---- primitive builders ------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::Scale(c), vec![a])
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::Offset(c), vec![a])
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> Result<NodeId, AutodiffError> {
        self.push(Op::Powf(p), vec![a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        self.push(Op::Reshape(shape.to_vec()), vec![a])
    }

    pub fn gather(
        &mut self,
        a: NodeId,
        index: Arc<[isize]>,
        shape: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        let source_len = self.value(a)?.numel();
        if shape.iter().product::<usize>() != index.len()
            || index.iter().any(|&i| i >= source_len as isize)
        {
            return Err(AutodiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "gather",
                detail: format!("index of {} entries for shape {shape:?}", index.len()),
            });
        }
        self.push(
            Op::Gather {
                index,
                shape: shape.to_vec(),
                source_len,
            },
            vec![a],
        )
    }

    pub fn scatter_add(
        &mut self,
        a: NodeId,
        index: Arc<[isize]>,
        shape: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        let n: usize = shape.iter().product();
        if index.iter().any(|&i| i >= n as isize) {
            return Err(AutodiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "scatter_add",
                detail: format!("index out of bounds for shape {shape:?}"),
            });
        }
        self.push(
            Op::ScatterAdd {
                index,
                shape: shape.to_vec(),
            },
            vec![a],
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn mask(&mut self, src: NodeId, arg: NodeId, kind: MaskKind) -> Result<NodeId, AutodiffError> {
        self.push(Op::Mask(kind), vec![src, arg])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.mask(x, x, MaskKind::Positive)
    }

    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId, AutodiffError> {
        self.push(Op::PoolGather(PoolGeometry { kernel, stride }), vec![x, x])
    }

    pub fn fake_quant(&mut self, x: NodeId, scheme: QuantScheme) -> Result<NodeId, AutodiffError> {
        self.push(Op::FakeQuant(scheme), vec![x])
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::SoftmaxRows, vec![x])
    }

    pub fn logsumexp_rows(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.push(Op::LogSumExpRows, vec![x])
    }

    // ---- composites ----------------------------------------------------------

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let n = self.value(x)?.numel();
        let index = cached_index(IndexKey::Zeros(n), || vec![0; n]);
        self.scatter_add(x, index, &[1])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, n) = self.matrix_dims(x)?;
        let index = cached_index(IndexKey::Transpose(m, n), || {
            let mut idx = Vec::with_capacity(m * n);
            for j in 0..n {
                for i in 0..m {
                    idx.push((i * n + j) as isize);
                }
            }
            idx
        });
        self.gather(x, index, &[n, m])
    }

    /// Repeats a length-`rows` vector across `cols` columns.
    pub fn broadcast_rows(&mut self, x: NodeId, cols: usize) -> Result<NodeId, AutodiffError> {
        let rows = self.value(x)?.numel();
        let index = cached_index(IndexKey::Rows(rows, cols), || row_index(rows, cols));
        self.gather(x, index, &[rows, cols])
    }

    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.matrix_dims(x)?;
        let index = cached_index(IndexKey::Rows(rows, cols), || row_index(rows, cols));
        self.scatter_add(x, index, &[rows])
    }

    /// Broadcasts a per-channel vector `[C]` over `shape = [N, C, ...]`.
    pub fn broadcast_channels(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let index = channel_index(shape)?;
        self.gather(x, index, shape)
    }

    /// Sums `[N, C, ...]` down to `[C]`.
    pub fn sum_channels(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.shape(x)?.to_vec();
        let index = channel_index(&shape)?;
        self.scatter_add(x, index, &[shape[1]])
    }

    /// `x [N, D] @ w [D, O] (+ b [O])`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId, AutodiffError> {
        let y = self.matmul(x, w)?;
        match bias {
            None => Ok(y),
            Some(b) => {
                let (n, o) = self.matrix_dims(y)?;
                // [O] -> [N, O]: column broadcast
                let index = cached_index(IndexKey::Cols(n, o), || {
                    (0..n * o).map(|e| (e % o) as isize).collect()
                });
                let bb = self.gather(b, index, &[n, o])?;
                self.add(y, bb)
            }
        }
    }

    /// 2-D convolution of `x [N, C, H, W]` with `w [O, C, k, k]`, via im2col.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, AutodiffError> {
        let next = self.nodes.len();
        let mismatch = |detail: String| AutodiffError::ShapeMismatch {
            node: next,
            op: "conv2d",
            detail,
        };
        let [n, c, h, wd] = match self.shape(x)? {
            [n, c, h, w] => [*n, *c, *h, *w],
            s => return Err(mismatch(format!("input must be [N, C, H, W], got {s:?}"))),
        };
        let [o, kc, k, k2] = match self.shape(w)? {
            [o, kc, k, k2] => [*o, *kc, *k, *k2],
            s => return Err(mismatch(format!("kernel must be [O, C, k, k], got {s:?}"))),
        };
        if kc != c || k != k2 || stride == 0 {
            return Err(mismatch(format!(
                "kernel [{o}, {kc}, {k}, {k2}] (stride {stride}) vs input channels {c}"
            )));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(mismatch(format!("kernel {k} larger than padded {h}x{wd}")));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (wd + 2 * padding - k) / stride + 1;
        let positions = n * oh * ow;
        let key = IndexKey::Im2Col([n, c, h, wd, k, stride, padding]);
        let cols_index = cached_index(key, || {
            let mut idx = vec![-1isize; c * k * k * positions];
            for ci in 0..c {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = (ci * k + kh) * k + kw;
                        for ni in 0..n {
                            for i in 0..oh {
                                for j in 0..ow {
                                    let ih = (i * stride + kh) as isize - padding as isize;
                                    let iw = (j * stride + kw) as isize - padding as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        let src = ((ni * c + ci) * h + ih as usize) * wd + iw as usize;
                                        idx[row * positions + (ni * oh + i) * ow + j] = src as isize;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            idx
        });
        let cols = self.gather(x, cols_index, &[c * k * k, positions])?;
        let w2 = self.reshape(w, &[o, c * k * k])?;
        let mut y = self.matmul(w2, cols)?;
        if let Some(b) = bias {
            let bb = self.broadcast_rows(b, positions)?;
            y = self.add(y, bb)?;
        }
        // [O, N*OH*OW] -> [N, O, OH, OW]
        let plane = oh * ow;
        let perm = cached_index(IndexKey::ConvOut([n, o, plane]), || {
            let mut idx = Vec::with_capacity(n * o * plane);
            for ni in 0..n {
                for oi in 0..o {
                    for p in 0..plane {
                        idx.push((oi * positions + ni * plane + p) as isize);
                    }
                }
            }
            idx
        });
        self.gather(y, perm, &[n, o, oh, ow])
    }

    /// Training-mode batch norm over `[N, C, ...]`, normalizing each channel
    /// with the batch statistics. Returns `(output, batch_mean, batch_var)`.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, NodeId, NodeId), AutodiffError> {
        let shape = self.shape(x)?.to_vec();
        if shape.len() < 2 {
            return Err(AutodiffError::ShapeMismatch {
                node: self.nodes.len(),
                op: "batch_norm",
                detail: format!("input must be [N, C, ...], got {shape:?}"),
            });
        }
        let per_channel = (self.value(x)?.numel() / shape[1]) as f64;
        let sum = self.sum_channels(x)?;
        let mean = self.scale(sum, 1.0 / per_channel)?;
        let mean_b = self.broadcast_channels(mean, &shape)?;
        let centered = self.sub(x, mean_b)?;
        let sq = self.mul(centered, centered)?;
        let sq_sum = self.sum_channels(sq)?;
        let var = self.scale(sq_sum, 1.0 / per_channel)?;
        let shifted = self.offset(var, eps)?;
        let inv_std = self.powf(shifted, -0.5)?;
        let inv_b = self.broadcast_channels(inv_std, &shape)?;
        let xhat = self.mul(centered, inv_b)?;
        let y = self.affine_channels(xhat, gamma, beta, &shape)?;
        Ok((y, mean, var))
    }

    /// Evaluation-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId, AutodiffError> {
        let shape = self.shape(x)?.to_vec();
        let mean = self.constant(Tensor::from_vec(mean.to_vec()));
        let inv = self.constant(Tensor::from_vec(
            var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
        ));
        let mean_b = self.broadcast_channels(mean, &shape)?;
        let inv_b = self.broadcast_channels(inv, &shape)?;
        let centered = self.sub(x, mean_b)?;
        let xhat = self.mul(centered, inv_b)?;
        self.affine_channels(xhat, gamma, beta, &shape)
    }

    fn affine_channels(
        &mut self,
        xhat: NodeId,
        gamma: NodeId,
        beta: NodeId,
        shape: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        let g = self.broadcast_channels(gamma, shape)?;
        let b = self.broadcast_channels(beta, shape)?;
        let scaled = self.mul(xhat, g)?;
        self.add(scaled, b)
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against class indices.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        let (n, k) = self.matrix_dims(logits)?;
        if labels.len() != n || labels.iter().any(|&y| y >= k) {
            return Err(AutodiffError::InvalidArgument(format!(
                "{} labels for {n} rows of {k} classes",
                labels.len()
            )));
        }
        let lse = self.logsumexp_rows(logits)?;
        let index: Arc<[isize]> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| (i * k + y) as isize)
            .collect();
        let picked = self.gather(logits, index, &[n])?;
        let per_example = self.sub(lse, picked)?;
        let total = self.sum_all(per_example)?;
        self.scale(total, 1.0 / n as f64)
    }

    fn matrix_dims(&self, x: NodeId) -> Result<(usize, usize), AutodiffError> {
        match self.shape(x)? {
            [m, n] => Ok((*m, *n)),
            s => Err(AutodiffError::ShapeMismatch {
                node: x.0,
                op: self.node(x)?.op.name(),
                detail: format!("expected a matrix, got {s:?}"),
            }),
        }
    }

    // ---- differentiation ---------------------------------------------------

    /// Records the gradient of `output` (weighted by `seed`, default ones)
    /// with respect to each node in `wrt`. The returned nodes are ordinary
    /// graph nodes and can be differentiated again.
    pub fn grad(
        &mut self,
        output: NodeId,
        seed: Option<&Tensor>,
        wrt: &[NodeId],
    ) -> Result<Vec<NodeId>, AutodiffError> {
        self.ensure_forwarded()?;
        let out_shape = self.shape(output)?.to_vec();
        let seed = match seed {
            Some(s) if s.shape() != out_shape.as_slice() => {
                return Err(AutodiffError::ShapeMismatch {
                    node: output.0,
                    op: "seed",
                    detail: format!("seed {:?} vs output {out_shape:?}", s.shape()),
                })
            }
            Some(s) => s.clone(),
            None => Tensor::filled(&out_shape, 1.0),
        };
        let n = output.0 + 1;
        let mut relevant = vec![false; n];
        for w in wrt {
            self.node(*w)?;
            if w.0 < n {
                relevant[w.0] = true;
            }
        }
        for i in 0..n {
            if relevant[i] {
                continue;
            }
            let node = &self.nodes[i];
            relevant[i] = node
                .op
                .differentiable_slots()
                .iter()
                .any(|&s| relevant[node.inputs[s].0]);
        }

        let mut acc: Vec<Option<NodeId>> = vec![None; n];
        if relevant[output.0] {
            acc[output.0] = Some(self.constant(seed));
        }
        for i in (0..n).rev() {
            let Some(g) = acc[i] else { continue };
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let slots = self.nodes[i].op.differentiable_slots();
            for &slot in slots {
                let input = self.nodes[i].inputs[slot];
                if !relevant[input.0] {
                    continue;
                }
                let contribution = self.vjp(NodeId(i), slot, g)?;
                acc[input.0] = Some(match acc[input.0] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }
        wrt.iter()
            .map(|w| match acc.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(*w)?.to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian product of node `id` for input `slot`, given upstream `g`.
    fn vjp(&mut self, id: NodeId, slot: usize, g: NodeId) -> Result<NodeId, AutodiffError> {
        let node = self.nodes[id.0].clone();
        let arg = |s: usize| node.inputs[s];
        match &node.op {
            Op::Input | Op::Param | Op::Constant => unreachable!("leaves have no vjp"),
            Op::Add | Op::Offset(_) => Ok(g),
            Op::Sub => {
                if slot == 0 {
                    Ok(g)
                } else {
                    self.scale(g, -1.0)
                }
            }
            Op::Mul => self.mul(g, arg(1 - slot)),
            Op::Scale(c) => self.scale(g, *c),
            Op::Powf(p) => {
                if *p == 0.0 {
                    let shape = self.shape(arg(0))?.to_vec();
                    return Ok(self.constant(Tensor::zeros(&shape)));
                }
                let d = self.powf(arg(0), p - 1.0)?;
                let d = self.scale(d, *p)?;
                self.mul(g, d)
            }
            Op::Reshape(_) => {
                let shape = self.shape(arg(0))?.to_vec();
                self.reshape(g, &shape)
            }
            Op::Gather { index, .. } => {
                let shape = self.shape(arg(0))?.to_vec();
                self.scatter_add(g, index.clone(), &shape)
            }
            Op::ScatterAdd { index, .. } => {
                let shape = self.shape(arg(0))?.to_vec();
                self.gather(g, index.clone(), &shape)
            }
            Op::MatMul => {
                if slot == 0 {
                    let bt = self.transpose(arg(1))?;
                    self.matmul(g, bt)
                } else {
                    let at = self.transpose(arg(0))?;
                    self.matmul(at, g)
                }
            }
            Op::Mask(kind) => self.mask(g, arg(1), *kind),
            Op::PoolGather(geom) => self.push(Op::PoolScatter(*geom), vec![g, arg(1)]),
            Op::PoolScatter(geom) => self.push(Op::PoolGather(*geom), vec![g, arg(1)]),
            Op::FakeQuant(scheme) => self.mask(
                g,
                arg(0),
                MaskKind::InRange {
                    lo: scheme.min(),
                    hi: scheme.max(),
                },
            ),
            Op::SoftmaxRows => {
                let (_, k) = self.matrix_dims(id)?;
                let gs = self.mul(g, id)?;
                let r = self.sum_rows(gs)?;
                let rb = self.broadcast_rows(r, k)?;
                let srb = self.mul(id, rb)?;
                self.sub(gs, srb)
            }
            Op::LogSumExpRows => {
                let (_, k) = self.matrix_dims(arg(0))?;
                let gb = self.broadcast_rows(g, k)?;
                let s = self.softmax_rows(arg(0))?;
                self.mul(gb, s)
            }
        }
    }

    /// Gradient of `output` with respect to every input and parameter leaf.
    /// Also fills each leaf's gradient buffer.
    pub fn backward(
        &mut self,
        output: NodeId,
        seed: Option<&Tensor>,
    ) -> Result<Vec<LeafGradient>, AutodiffError> {
        let leaves: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Input | Op::Param))
            .map(NodeId)
            .collect();
        let grads = self.grad(output, seed, &leaves)?;
        let mut out = Vec::with_capacity(leaves.len());
        for (leaf, g) in leaves.into_iter().zip(grads) {
            let grad = self.value(g)?.clone();
            self.nodes[leaf.0].value.set_grad(grad.data().to_vec())?;
            out.push(LeafGradient { node: leaf, grad });
        }
        Ok(out)
    }
}

fn row_index(rows: usize, cols: usize) -> Vec<isize> {
    (0..rows * cols).map(|e| (e / cols) as isize).collect()
}

fn channel_index(shape: &[usize]) -> Result<Arc<[isize]>, AutodiffError> {
    if shape.len() < 2 {
        return Err(AutodiffError::InvalidArgument(format!(
            "channel ops need [N, C, ...], got {shape:?}"
        )));
    }
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    let total: usize = shape.iter().product();
    Ok(cached_index(IndexKey::Channels(total, c, inner), || {
        (0..total).map(|e| ((e / inner) % c) as isize).collect()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum IndexKey {
    Zeros(usize),
    Transpose(usize, usize),
    Rows(usize, usize),
    Cols(usize, usize),
    Channels(usize, usize, usize),
    Im2Col([usize; 7]),
    ConvOut([usize; 3]),
}

thread_local! {
    static INDEX_CACHE: RefCell<HashMap<IndexKey, Arc<[isize]>>> = RefCell::new(HashMap::new());
}

const INDEX_CACHE_LIMIT: usize = 4096;

fn cached_index(key: IndexKey, build: impl FnOnce() -> Vec<isize>) -> Arc<[isize]> {
    INDEX_CACHE.with(|cache| {
        let mut cache = cache.borrow_mut();
        if let Some(idx) = cache.get(&key) {
            return idx.clone();
        }
        if cache.len() >= INDEX_CACHE_LIMIT {
            cache.clear();
        }
        let idx: Arc<[isize]> = build().into();
        cache.insert(key, idx.clone());
        idx
    })
}
