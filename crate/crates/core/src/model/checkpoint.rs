//! Versioned JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelError};
use crate::SCHEMA_VERSION;

pub const CHECKPOINT_KIND: &str = "fitq-checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    schema_version: u32,
    kind: String,
    model: Model,
}

pub fn model_to_json(model: &Model) -> Result<String, ModelError> {
    let doc = Document {
        schema_version: SCHEMA_VERSION,
        kind: CHECKPOINT_KIND.into(),
        model: model.clone(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| ModelError::Format(e.to_string()))
}

pub fn model_from_json(text: &str) -> Result<Model, ModelError> {
    let doc: Document = serde_json::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(ModelError::Format(format!(
            "schema version {} (expected {SCHEMA_VERSION})",
            doc.schema_version
        )));
    }
    if doc.kind != CHECKPOINT_KIND {
        return Err(ModelError::Format(format!("document kind `{}` is not a checkpoint", doc.kind)));
    }
    let model = doc.model;
    model.validate()?;
    check_parameters(&model)?;
    Ok(model)
}

/// Parameter arrays must match the shapes implied by the layer stack.
fn check_parameters(model: &Model) -> Result<(), ModelError> {
    let fresh = super::build_model(model.layers.clone(), &model.input_shape, model.num_classes, 0)?;
    let mismatch = |name: &str| ModelError::Format(format!("parameters of `{name}` do not match its layer"));
    if fresh.blocks.len() != model.blocks.len() || fresh.norms.len() != model.norms.len() {
        return Err(ModelError::Format("parameter block count does not match layers".into()));
    }
    for (a, b) in fresh.blocks.iter().zip(&model.blocks) {
        let shape_ok = a.name == b.name
            && a.weights.shape() == b.weights.shape()
            && consistent(&b.weights)
            && a.bias.as_ref().map(|t| t.shape()) == b.bias.as_ref().map(|t| t.shape())
            && b.bias.as_ref().is_none_or(consistent);
        if !shape_ok || !b.weights.is_finite() {
            return Err(mismatch(&b.name));
        }
    }
    for (a, b) in fresh.norms.iter().zip(&model.norms) {
        let c = a.gamma.len();
        let ok = a.name == b.name
            && [&b.gamma, &b.beta, &b.running_mean, &b.running_var]
                .iter()
                .all(|v| v.len() == c);
        if !ok {
            return Err(mismatch(&b.name));
        }
    }
    Ok(())
}

fn consistent(t: &crate::autodiff::Tensor) -> bool {
    t.shape().iter().product::<usize>() == t.data().len()
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelError> {
    std::fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    model_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, desk_cnn_layers};

    #[test]
    fn json_round_trip_is_exact() {
        let m = build_model(desk_cnn_layers(1, 8, [2, 3, 4], 3, true), &[1, 8, 8], 3, 5).unwrap();
        let text = model_to_json(&m).unwrap();
        let back = model_from_json(&text).unwrap();
        assert_eq!(m, back);
        assert_eq!(text, model_to_json(&back).unwrap());
    }

    #[test]
    fn rejects_version_and_shape_errors() {
        let m = build_model(desk_cnn_layers(1, 8, [2, 3, 4], 3, false), &[1, 8, 8], 3, 5).unwrap();
        let text = model_to_json(&m).unwrap();
        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(matches!(model_from_json(&bumped), Err(ModelError::Format(_))));
        let mut broken = m.clone();
        broken.blocks[0].weights = crate::autodiff::Tensor::zeros(&[1, 1, 3, 3]);
        assert!(model_from_json(&model_to_json(&broken).unwrap()).is_err());
    }
}
