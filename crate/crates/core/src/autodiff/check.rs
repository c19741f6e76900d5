//! Finite-difference gradient checks and second-order products.

use nalgebra::DMatrix;

use super::{AutodiffError, Graph, NodeId, Tensor};

/// Largest parameter count for which dense Hessians and Fisher matrices are built.
pub const ORACLE_PARAM_LIMIT: usize = 2000;

/// Deterministic seed weights used to scalarize non-scalar outputs.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.7 + 0.3).sin()).collect()
}

/// Worst discrepancy between reverse-mode and central-difference gradients.
///
/// The graph's first output is contracted with fixed weights, so non-scalar
/// outputs are covered too. Discrepancy per entry is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check(graph: &mut Graph, inputs: &[Tensor], epsilon: f64) -> Result<f64, AutodiffError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(AutodiffError::InvalidArgument(format!(
            "epsilon must lie in (0, 1e-2], got {epsilon}"
        )));
    }
    if let Some(i) = inputs.iter().position(|t| !t.is_finite()) {
        return Err(AutodiffError::NonFinite(format!("input {i}")));
    }
    let output = *graph
        .outputs()
        .first()
        .ok_or_else(|| AutodiffError::InvalidArgument("graph has no outputs".into()))?;
    let values = graph.forward(inputs)?;
    if !values[0].is_finite() {
        return Err(AutodiffError::NonFinite(format!("output node {}", output.0)));
    }
    let weights = probe_weights(values[0].numel());
    let seed = Tensor::new(values[0].shape().to_vec(), weights.clone())?;
    let input_ids = graph.inputs().to_vec();
    let mark = graph.len();
    let grad_nodes = graph.grad(output, Some(&seed), &input_ids)?;
    let analytic: Vec<Tensor> = grad_nodes
        .iter()
        .map(|&g| graph.value(g).cloned())
        .collect::<Result<_, _>>()?;
    graph.truncate(mark)?;
    if let Some(i) = analytic.iter().position(|t| !t.is_finite()) {
        return Err(AutodiffError::NonFinite(format!("gradient of input {i}")));
    }

    let contract = |graph: &mut Graph, ins: &[Tensor]| -> Result<f64, AutodiffError> {
        let out = graph.forward(ins)?;
        Ok(out[0].data().iter().zip(&weights).map(|(a, b)| a * b).sum())
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let x0 = input.data()[e];
            probe[k].data_mut()[e] = x0 + epsilon;
            let up = contract(graph, &probe)?;
            probe[k].data_mut()[e] = x0 - epsilon;
            let down = contract(graph, &probe)?;
            probe[k].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[k].data()[e];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if !err.is_finite() {
                return Err(AutodiffError::NonFinite(format!("difference quotient of input {k}")));
            }
            worst = worst.max(err);
        }
    }
    // restore recorded values
    graph.forward(inputs)?;
    Ok(worst)
}

/// Hessian-vector products against a scalar loss, reusable across many `v`.
///
/// The first backward pass and the inner product `<grad, v>` are recorded
/// once; each call reassigns `v` and replays only the suffix of the record.
pub struct HvpProgram {
    params: Vec<NodeId>,
    directions: Vec<NodeId>,
    products: Vec<NodeId>,
    gradients: Vec<NodeId>,
    replay_start: NodeId,
}

impl HvpProgram {
    pub fn new(graph: &mut Graph, loss: NodeId, params: &[NodeId]) -> Result<Self, AutodiffError> {
        let loss_shape = graph.shape(loss)?.to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape));
        }
        let gradients = graph.grad(loss, None, params)?;
        let replay_start = NodeId(graph.len());
        let mut directions = Vec::with_capacity(params.len());
        let mut dot: Option<NodeId> = None;
        for (&p, &g) in params.iter().zip(&gradients) {
            let shape = graph.shape(p)?.to_vec();
            let v = graph.constant(Tensor::zeros(&shape));
            directions.push(v);
            let prod = graph.mul(g, v)?;
            let s = graph.sum_all(prod)?;
            dot = Some(match dot {
                None => s,
                Some(d) => graph.add(d, s)?,
            });
        }
        let dot = dot.ok_or_else(|| AutodiffError::InvalidArgument("no parameters".into()))?;
        let products = graph.grad(dot, None, params)?;
        Ok(Self {
            params: params.to_vec(),
            directions,
            products,
            gradients,
            replay_start,
        })
    }

    pub fn dimension(&self, graph: &Graph) -> Result<usize, AutodiffError> {
        self.params
            .iter()
            .map(|&p| graph.value(p).map(Tensor::numel))
            .sum()
    }

    /// Per-parameter gradient nodes from the first backward pass.
    pub fn gradients(&self) -> &[NodeId] {
        &self.gradients
    }

    /// `H v` for a flattened direction `v`.
    pub fn apply(&self, graph: &mut Graph, v: &[f64]) -> Result<Vec<f64>, AutodiffError> {
        let n = self.dimension(graph)?;
        if v.len() != n {
            return Err(AutodiffError::InvalidArgument(format!(
                "direction has {} entries, parameters have {n}",
                v.len()
            )));
        }
        let mut offset = 0;
        for (&p, &d) in self.params.iter().zip(&self.directions) {
            let shape = graph.shape(p)?.to_vec();
            let len: usize = shape.iter().product();
            graph.assign(d, Tensor::new(shape, v[offset..offset + len].to_vec())?)?;
            offset += len;
        }
        graph.recompute_from(self.replay_start)?;
        let mut out = Vec::with_capacity(n);
        for &h in &self.products {
            out.extend_from_slice(graph.value(h)?.data());
        }
        Ok(out)
    }
}

/// `H v` by differentiating `<grad loss, v>` a second time.
pub fn hessian_vector_product(
    graph: &mut Graph,
    loss: NodeId,
    params: &[NodeId],
    v: &[f64],
) -> Result<Vec<f64>, AutodiffError> {
    HvpProgram::new(graph, loss, params)?.apply(graph, v)
}

/// Dense Hessian assembled column by column from Hessian-vector products.
#[derive(Clone, Debug)]
pub struct ExactHessian {
    /// Symmetrized `(H + H^T) / 2`.
    pub matrix: DMatrix<f64>,
    /// `max |H_ij - H_ji|` before symmetrization.
    pub max_asymmetry: f64,
}

impl ExactHessian {
    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

pub fn exact_hessian(graph: &mut Graph, loss: NodeId, params: &[NodeId]) -> Result<ExactHessian, AutodiffError> {
    let count: usize = params
        .iter()
        .map(|&p| graph.value(p).map(Tensor::numel))
        .sum::<Result<_, _>>()?;
    if count > ORACLE_PARAM_LIMIT {
        return Err(AutodiffError::OracleLimit {
            count,
            limit: ORACLE_PARAM_LIMIT,
        });
    }
    let program = HvpProgram::new(graph, loss, params)?;
    let mut raw = DMatrix::zeros(count, count);
    let mut e = vec![0.0; count];
    for j in 0..count {
        e[j] = 1.0;
        let col = program.apply(graph, &e)?;
        e[j] = 0.0;
        if col.iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite(format!("Hessian column {j}")));
        }
        raw.set_column(j, &nalgebra::DVector::from_vec(col));
    }
    let mut max_asymmetry = 0.0f64;
    for i in 0..count {
        for j in i + 1..count {
            max_asymmetry = max_asymmetry.max((raw[(i, j)] - raw[(j, i)]).abs());
        }
    }
    let matrix = (&raw + raw.transpose()) * 0.5;
    Ok(ExactHessian {
        matrix,
        max_asymmetry,
    })
}
