//! Layer specifications, parameter blocks and the model forward pass.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::quant::QuantPlan;
use crate::rng;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    BatchNorm,
    Relu,
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    pub fn conv(name: &str, in_channels: usize, out_channels: usize, kernel: usize, padding: usize) -> Self {
        Self::new(
            name,
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride: 1,
                padding,
                bias: true,
            },
        )
    }

    pub fn dense(name: &str, in_features: usize, out_features: usize) -> Self {
        Self::new(
            name,
            LayerKind::Dense {
                in_features,
                out_features,
                bias: true,
            },
        )
    }

    pub fn max_pool(name: &str, kernel: usize, stride: usize) -> Self {
        Self::new(name, LayerKind::MaxPool { kernel, stride })
    }

    pub fn relu(name: &str) -> Self {
        Self::new(name, LayerKind::Relu)
    }

    pub fn batch_norm(name: &str) -> Self {
        Self::new(name, LayerKind::BatchNorm)
    }

    pub fn flatten(name: &str) -> Self {
        Self::new(name, LayerKind::Flatten)
    }

    pub fn is_quantizable(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }
}

/// Quantizable parameters of one conv or dense layer.
///
/// `weights` is `[O, C, k, k]` for convolutions and `[in, out]` for dense
/// layers. Biases are trained but never quantized and never counted in `n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterBlock {
    pub name: String,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

impl ParameterBlock {
    /// Quantizable parameter count n(l).
    pub fn n(&self) -> usize {
        self.weights.numel()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub name: String,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics get updated by the caller.
    Train,
    Eval,
}

/// Node handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: NodeId,
    /// All trainable parameters, in [`Model::parameters_mut`] order.
    pub params: Vec<NodeId>,
    /// Weight node of each quantizable block (pre-quantizer).
    pub weights: Vec<NodeId>,
    /// Input activation of each quantizable block (pre-quantizer).
    pub activation_sites: Vec<NodeId>,
    /// Per batch-norm layer `(batch_mean, batch_var)` in train mode.
    pub batch_stats: Vec<(NodeId, NodeId)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub blocks: Vec<ParameterBlock>,
    pub norms: Vec<BatchNormState>,
}

/// Builds a model and initializes it with seeded He-style weights.
pub fn build_model(
    layers: Vec<LayerSpec>,
    input_shape: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<Model, ModelError> {
    let shapes = infer_shapes(&layers, input_shape, num_classes)?;
    let mut rng = rng::seeded(seed);
    let mut blocks = Vec::new();
    let mut norms = Vec::new();
    for (layer, in_shape) in layers.iter().zip(&shapes) {
        match &layer.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                let shape = [*out_channels, *in_channels, *kernel, *kernel];
                blocks.push(ParameterBlock {
                    name: layer.name.clone(),
                    weights: he_tensor(&shape, fan_in, &mut rng),
                    bias: bias.then(|| Tensor::zeros(&[*out_channels])),
                });
            }
            LayerKind::Dense {
                in_features,
                out_features,
                bias,
            } => {
                blocks.push(ParameterBlock {
                    name: layer.name.clone(),
                    weights: he_tensor(&[*in_features, *out_features], *in_features, &mut rng),
                    bias: bias.then(|| Tensor::zeros(&[*out_features])),
                });
            }
            LayerKind::BatchNorm => {
                let c = in_shape[0];
                norms.push(BatchNormState {
                    name: layer.name.clone(),
                    gamma: vec![1.0; c],
                    beta: vec![0.0; c],
                    running_mean: vec![0.0; c],
                    running_var: vec![1.0; c],
                });
            }
            _ => {}
        }
    }
    if blocks.is_empty() {
        return Err(ModelError::InvalidSpec {
            layer: String::new(),
            reason: "model has no quantizable layer".into(),
        });
    }
    Ok(Model {
        input_shape: input_shape.to_vec(),
        num_classes,
        layers,
        blocks,
        norms,
    })
}

fn he_tensor(shape: &[usize], fan_in: usize, rng: &mut rng::Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Per-example input shape of every layer; validates the whole stack.
fn infer_shapes(
    layers: &[LayerSpec],
    input_shape: &[usize],
    num_classes: usize,
) -> Result<Vec<Vec<usize>>, ModelError> {
    let bad = |layer: &LayerSpec, reason: String| ModelError::InvalidSpec {
        layer: layer.name.clone(),
        reason,
    };
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(ModelError::InvalidSpec {
            layer: String::new(),
            reason: format!("invalid input shape {input_shape:?}"),
        });
    }
    let mut seen = std::collections::HashSet::new();
    let mut shape = input_shape.to_vec();
    let mut shapes = Vec::with_capacity(layers.len());
    for layer in layers {
        if !seen.insert(layer.name.as_str()) {
            return Err(bad(layer, "duplicate layer name".into()));
        }
        shapes.push(shape.clone());
        shape = match (&layer.kind, shape.as_slice()) {
            (
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                &[c, h, w],
            ) => {
                if c != *in_channels {
                    return Err(bad(layer, format!("expects {in_channels} channels, input has {c}")));
                }
                if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                    return Err(bad(layer, "kernel, stride and channels must be positive".into()));
                }
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(bad(layer, format!("kernel {kernel} larger than {h}x{w} input")));
                }
                vec![
                    *out_channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ]
            }
            (LayerKind::MaxPool { kernel, stride }, &[c, h, w]) => {
                if *kernel == 0 || *stride == 0 || h < *kernel || w < *kernel {
                    return Err(bad(layer, format!("pool {kernel}/{stride} does not fit {h}x{w}")));
                }
                vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
            }
            (LayerKind::BatchNorm | LayerKind::Relu, s) => s.to_vec(),
            (LayerKind::Flatten, s) => vec![s.iter().product()],
            (
                LayerKind::Dense {
                    in_features,
                    out_features,
                    ..
                },
                &[d],
            ) => {
                if d != *in_features {
                    return Err(bad(layer, format!("expects {in_features} features, input has {d}")));
                }
                if *out_features == 0 {
                    return Err(bad(layer, "no output features".into()));
                }
                vec![*out_features]
            }
            (kind, s) => {
                return Err(bad(layer, format!("{kind:?} cannot follow output of shape {s:?}")));
            }
        };
    }
    if shape != [num_classes] {
        return Err(ModelError::InvalidSpec {
            layer: layers.last().map(|l| l.name.clone()).unwrap_or_default(),
            reason: format!("model output {shape:?} does not match {num_classes} classes"),
        });
    }
    Ok(shapes)
}

impl Model {
    pub fn validate(&self) -> Result<(), ModelError> {
        infer_shapes(&self.layers, &self.input_shape, self.num_classes)?;
        Ok(())
    }

    pub fn block_names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.name.clone()).collect()
    }

    pub fn quantizable_parameter_count(&self) -> usize {
        self.blocks.iter().map(ParameterBlock::n).sum()
    }

    pub fn has_batch_norm(&self) -> bool {
        !self.norms.is_empty()
    }

    /// `gamma` of the batch norm that directly follows block `index`, if any.
    pub fn block_gamma(&self, index: usize) -> Option<&[f64]> {
        let mut block = None;
        let mut norm = 0;
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                    block = Some(block.map_or(0, |b| b + 1));
                }
                LayerKind::BatchNorm => {
                    if block == Some(index) {
                        return Some(&self.norms[norm].gamma);
                    }
                    norm += 1;
                }
                _ => {}
            }
        }
        None
    }

    /// Mutable views of all trainable parameters, matching [`ForwardPass::params`].
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for block in &mut self.blocks {
            out.push(block.weights.data_mut());
            if let Some(b) = &mut block.bias {
                out.push(b.data_mut());
            }
        }
        for norm in &mut self.norms {
            out.push(&mut norm.gamma);
            out.push(&mut norm.beta);
        }
        out
    }

    /// Records the forward pass of a batch `x [N, ...input_shape]`.
    pub fn forward(
        &self,
        graph: &mut Graph,
        x: NodeId,
        mode: Mode,
        quant: Option<&QuantPlan>,
    ) -> Result<ForwardPass, ModelError> {
        if let Some(plan) = quant {
            if plan.weights.len() != self.blocks.len() || plan.activations.len() != self.blocks.len() {
                return Err(ModelError::InvalidConfig(format!(
                    "quantization plan covers {} blocks, model has {}",
                    plan.weights.len(),
                    self.blocks.len()
                )));
            }
        }
        let mut h = x;
        let mut params = Vec::new();
        let mut weights = Vec::new();
        let mut sites = Vec::new();
        let mut batch_stats = Vec::new();
        let mut bn_params = Vec::new();
        let mut block = 0;
        let mut norm = 0;
        for layer in &self.layers {
            h = match &layer.kind {
                LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                    let pb = &self.blocks[block];
                    sites.push(h);
                    let input = match quant.and_then(|p| p.activations[block]) {
                        Some(s) => graph.fake_quant(h, s)?,
                        None => h,
                    };
                    let w = graph.param(pb.weights.clone());
                    params.push(w);
                    weights.push(w);
                    let wq = match quant.and_then(|p| p.weights[block]) {
                        Some(s) => graph.fake_quant(w, s)?,
                        None => w,
                    };
                    let b = pb.bias.as_ref().map(|b| graph.param(b.clone()));
                    params.extend(b);
                    block += 1;
                    match layer.kind {
                        LayerKind::Conv { stride, padding, .. } => graph.conv2d(input, wq, b, stride, padding)?,
                        _ => graph.dense(input, wq, b)?,
                    }
                }
                LayerKind::MaxPool { kernel, stride } => graph.max_pool2d(h, *kernel, *stride)?,
                LayerKind::Relu => graph.relu(h)?,
                LayerKind::Flatten => {
                    let shape = graph.shape(h)?;
                    let n = shape[0];
                    let rest: usize = shape[1..].iter().product();
                    graph.reshape(h, &[n, rest])?
                }
                LayerKind::BatchNorm => {
                    let st = &self.norms[norm];
                    norm += 1;
                    let gamma = graph.param(Tensor::from_vec(st.gamma.clone()));
                    let beta = graph.param(Tensor::from_vec(st.beta.clone()));
                    bn_params.push(gamma);
                    bn_params.push(beta);
                    match mode {
                        Mode::Train => {
                            let (y, mean, var) = graph.batch_norm_train(h, gamma, beta, BN_EPS)?;
                            batch_stats.push((mean, var));
                            y
                        }
                        Mode::Eval => graph.batch_norm_eval(
                            h,
                            gamma,
                            beta,
                            &st.running_mean,
                            &st.running_var,
                            BN_EPS,
                        )?,
                    }
                }
            };
        }
        params.extend(bn_params);
        Ok(ForwardPass {
            logits: h,
            params,
            weights,
            activation_sites: sites,
            batch_stats,
        })
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, graph: &Graph, pass: &ForwardPass) -> Result<(), ModelError> {
        for (st, &(mean, var)) in self.norms.iter_mut().zip(&pass.batch_stats) {
            let m = graph.value(mean)?.data();
            let v = graph.value(var)?.data();
            for c in 0..st.gamma.len() {
                st.running_mean[c] = (1.0 - BN_MOMENTUM) * st.running_mean[c] + BN_MOMENTUM * m[c];
                st.running_var[c] = (1.0 - BN_MOMENTUM) * st.running_var[c] + BN_MOMENTUM * v[c];
            }
        }
        Ok(())
    }

    /// Batched logits in eval mode.
    pub fn predict(&self, inputs: &Tensor, quant: Option<&QuantPlan>) -> Result<Tensor, ModelError> {
        let mut graph = Graph::new();
        let x = graph.constant(inputs.clone());
        let pass = self.forward(&mut graph, x, Mode::Eval, quant)?;
        Ok(graph.value(pass.logits)?.clone())
    }
}

/// Layer stack of the small three-conv classifier: conv blocks with
/// optional batch norm, max pools after the first two blocks, dense head.
pub fn desk_cnn_layers(
    in_channels: usize,
    image_size: usize,
    filters: [usize; 3],
    num_classes: usize,
    batch_norm: bool,
) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut channels = in_channels;
    let mut size = image_size;
    for (i, &f) in filters.iter().enumerate() {
        layers.push(LayerSpec::conv(&format!("conv{}", i + 1), channels, f, 3, 1));
        if batch_norm {
            layers.push(LayerSpec::batch_norm(&format!("bn{}", i + 1)));
        }
        layers.push(LayerSpec::relu(&format!("relu{}", i + 1)));
        if i < 2 {
            layers.push(LayerSpec::max_pool(&format!("pool{}", i + 1), 2, 2));
            size /= 2;
        }
        channels = f;
    }
    layers.push(LayerSpec::flatten("flatten"));
    layers.push(LayerSpec::dense("fc", channels * size * size, num_classes));
    layers
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_cnn_has_four_blocks() {
        let m = build_model(desk_cnn_layers(1, 8, [8, 16, 32], 10, false), &[1, 8, 8], 10, 0).unwrap();
        assert_eq!(m.blocks.len(), 4);
        assert_eq!(m.block_names(), ["conv1", "conv2", "conv3", "fc"]);
        let total: usize = m.blocks.iter().map(|b| b.n()).sum();
        assert_eq!(total, m.quantizable_parameter_count());
        assert!(m.blocks.iter().all(|b| b.n() > 0));
        assert_eq!(m.blocks[3].n(), 32 * 2 * 2 * 10);
    }

    #[test]
    fn batch_norm_variant_exposes_gamma() {
        let m = build_model(desk_cnn_layers(1, 8, [4, 4, 4], 3, true), &[1, 8, 8], 3, 0).unwrap();
        assert_eq!(m.norms.len(), 3);
        assert_eq!(m.block_gamma(0).unwrap().len(), 4);
        assert!(m.block_gamma(3).is_none());
    }

    #[test]
    fn single_dense_layer() {
        let m = build_model(vec![LayerSpec::dense("fc", 4, 3)], &[4], 3, 1).unwrap();
        assert_eq!(m.blocks.len(), 1);
    }

    #[test]
    fn width_mismatch_names_layer() {
        let layers = vec![
            LayerSpec::conv("c1", 1, 2, 3, 1),
            LayerSpec::flatten("f"),
            LayerSpec::dense("head", 99, 2),
        ];
        match build_model(layers, &[1, 4, 4], 2, 0) {
            Err(ModelError::InvalidSpec { layer, .. }) => assert_eq!(layer, "head"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_names_and_head_size_rejected() {
        let dup = vec![LayerSpec::dense("a", 4, 4), LayerSpec::dense("a", 4, 2)];
        assert!(build_model(dup, &[4], 2, 0).is_err());
        let wrong_head = vec![LayerSpec::dense("a", 4, 3)];
        assert!(build_model(wrong_head, &[4], 2, 0).is_err());
        let dense_on_image = vec![LayerSpec::dense("a", 16, 2)];
        assert!(build_model(dense_on_image, &[1, 4, 4], 2, 0).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let layers = desk_cnn_layers(1, 8, [2, 2, 2], 2, false);
        let a = build_model(layers.clone(), &[1, 8, 8], 2, 7).unwrap();
        let b = build_model(layers.clone(), &[1, 8, 8], 2, 7).unwrap();
        let c = build_model(layers, &[1, 8, 8], 2, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
