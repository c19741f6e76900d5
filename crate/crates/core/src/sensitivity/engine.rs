//! Recorded programs for per-example gradients and batch Hessian products.

use crate::autodiff::{Graph, HvpProgram, NodeId, Tensor};
use crate::model::{Mode, Model};

use super::SensitivityError;

/// Sum over rows of `logsumexp(z) - <z, y>` for label rows `y` (one-hot or soft).
pub(crate) fn soft_cross_entropy_sum(graph: &mut Graph, logits: NodeId, targets: NodeId) -> Result<NodeId, SensitivityError> {
    let lse = graph.logsumexp_rows(logits)?;
    let zy = graph.mul(logits, targets)?;
    let picked = graph.sum_rows(zy)?;
    let per_row = graph.sub(lse, picked)?;
    Ok(graph.sum_all(per_row)?)
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("nonempty labels")
}

/// Single-example loss graph with recorded gradients for every weight block
/// and every activation site; replayed per example.
#[derive(Clone)]
pub(crate) struct ExampleProgram {
    graph: Graph,
    weight_grads: Vec<NodeId>,
    site_grads: Vec<NodeId>,
    classes: usize,
}

/// Squared gradient norms of one example.
#[derive(Clone, Debug)]
pub(crate) struct ExampleNorms {
    pub weights: Vec<f64>,
    pub sites: Vec<f64>,
}

impl ExampleProgram {
    pub fn new(model: &Model) -> Result<Self, SensitivityError> {
        let mut graph = Graph::new();
        let mut shape = vec![1];
        shape.extend_from_slice(&model.input_shape);
        let x = graph.input(&shape);
        let y = graph.input(&[1, model.num_classes]);
        let pass = model.forward(&mut graph, x, Mode::Eval, None)?;
        let loss = soft_cross_entropy_sum(&mut graph, pass.logits, y)?;
        graph.set_outputs(&[loss]);
        // Record gradients on a valid placeholder label.
        graph.forward(&[Tensor::zeros(&shape), one_hot(&[0], model.num_classes)])?;
        let mut wrt = pass.weights.clone();
        wrt.extend(&pass.activation_sites);
        let grads = graph.grad(loss, None, &wrt)?;
        let (w, s) = grads.split_at(pass.weights.len());
        Ok(Self {
            graph,
            weight_grads: w.to_vec(),
            site_grads: s.to_vec(),
            classes: model.num_classes,
        })
    }

    /// Runs one example; `x` is `[1, ...]`.
    pub fn norms(&mut self, x: Tensor, label: usize) -> Result<ExampleNorms, SensitivityError> {
        self.graph.forward(&[x, one_hot(&[label], self.classes)])?;
        let sq = |ids: &[NodeId], g: &Graph| -> Result<Vec<f64>, SensitivityError> {
            ids.iter().map(|&id| Ok(g.value(id)?.squared_norm())).collect()
        };
        Ok(ExampleNorms {
            weights: sq(&self.weight_grads, &self.graph)?,
            sites: sq(&self.site_grads, &self.graph)?,
        })
    }

    /// Flattened weight gradient of one example, blocks concatenated.
    pub fn flat_weight_gradient(&mut self, x: Tensor, label: usize) -> Result<Vec<f64>, SensitivityError> {
        self.graph.forward(&[x, one_hot(&[label], self.classes)])?;
        let mut out = Vec::new();
        for &id in &self.weight_grads {
            out.extend_from_slice(self.graph.value(id)?.data());
        }
        Ok(out)
    }

    pub fn site_elements(&self) -> Result<Vec<usize>, SensitivityError> {
        self.site_grads
            .iter()
            .map(|&id| Ok(self.graph.value(id)?.numel()))
            .collect()
    }
}

/// Mean loss over a fixed-size batch with a Hessian-vector program over
/// the weight blocks.
pub(crate) struct BatchHessian {
    graph: Graph,
    program: HvpProgram,
    block_sizes: Vec<usize>,
    batch: usize,
    classes: usize,
    input_shape: Vec<usize>,
}

impl BatchHessian {
    /// `targets` rows are one-hot or soft labels used only for recording.
    pub fn new(model: &Model, batch: usize) -> Result<Self, SensitivityError> {
        let mut graph = Graph::new();
        let mut shape = vec![batch];
        shape.extend_from_slice(&model.input_shape);
        let x = graph.input(&shape);
        let y = graph.input(&[batch, model.num_classes]);
        let pass = model.forward(&mut graph, x, Mode::Eval, None)?;
        let total = soft_cross_entropy_sum(&mut graph, pass.logits, y)?;
        let loss = graph.scale(total, 1.0 / batch as f64)?;
        graph.set_outputs(&[loss]);
        graph.forward(&[Tensor::zeros(&shape), one_hot(&vec![0; batch], model.num_classes)])?;
        let program = HvpProgram::new(&mut graph, loss, &pass.weights)?;
        let block_sizes = model.blocks.iter().map(|b| b.n()).collect();
        Ok(Self {
            graph,
            program,
            block_sizes,
            batch,
            classes: model.num_classes,
            input_shape: shape,
        })
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn load(&mut self, x: Tensor, targets: Tensor) -> Result<(), SensitivityError> {
        if x.shape() != self.input_shape.as_slice() || targets.shape() != [self.batch, self.classes] {
            return Err(SensitivityError::InvalidArgument(format!(
                "batch of shape {:?} does not match recorded {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        self.graph.forward(&[x, targets])?;
        Ok(())
    }

    pub fn load_labels(&mut self, x: Tensor, labels: &[usize]) -> Result<(), SensitivityError> {
        self.load(x, one_hot(labels, self.classes))
    }

    pub fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>, SensitivityError> {
        Ok(self.program.apply(&mut self.graph, v)?)
    }
}
