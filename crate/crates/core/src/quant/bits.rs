//! Per-layer weight and activation bit widths.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{QuantError, MAX_BITS, MIN_BITS};
use crate::rng;

pub const DEFAULT_BIT_SET: [u32; 4] = [8, 6, 4, 3];

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerBits {
    pub layer: String,
    pub w_bits: u32,
    pub a_bits: u32,
}

/// Ordered per-layer bit assignment, one entry per quantizable layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitConfig {
    pub layers: Vec<LayerBits>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    schema_version: u32,
    layers: Vec<LayerBits>,
}

fn check_bits(bits: u32) -> Result<u32, QuantError> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(bits)
    } else {
        Err(QuantError::InvalidBits(bits))
    }
}

impl BitConfig {
    pub fn new(layers: Vec<LayerBits>) -> Result<Self, QuantError> {
        for l in &layers {
            check_bits(l.w_bits)?;
            check_bits(l.a_bits)?;
        }
        Ok(Self { layers })
    }

    pub fn uniform(layers: &[String], w_bits: u32, a_bits: u32) -> Result<Self, QuantError> {
        Self::new(
            layers
                .iter()
                .map(|name| LayerBits {
                    layer: name.clone(),
                    w_bits,
                    a_bits,
                })
                .collect(),
        )
    }

    /// Independent uniform draws from `bit_set` for every weight and activation slot.
    pub fn sample(layers: &[String], bit_set: &[u32], seed: u64) -> Result<Self, QuantError> {
        if bit_set.is_empty() {
            return Err(QuantError::InvalidConfig("bit set is empty".into()));
        }
        for &b in bit_set {
            check_bits(b)?;
        }
        let mut rng = rng::seeded(seed);
        let mut draw = || *bit_set.choose(&mut rng).expect("nonempty");
        Ok(Self {
            layers: layers
                .iter()
                .map(|name| LayerBits {
                    layer: name.clone(),
                    w_bits: draw(),
                    a_bits: draw(),
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, layer: &str) -> Option<&LayerBits> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Every name in `layers` must appear exactly once, in order.
    pub fn check_layers(&self, layers: &[String]) -> Result<(), QuantError> {
        if self.layers.len() != layers.len() {
            return Err(QuantError::LayerMismatch(format!(
                "{} entries for {} layers",
                self.layers.len(),
                layers.len()
            )));
        }
        for (entry, name) in self.layers.iter().zip(layers) {
            if &entry.layer != name {
                return Err(QuantError::LayerMismatch(format!(
                    "expected layer `{name}`, found `{}`",
                    entry.layer
                )));
            }
        }
        Ok(())
    }

    /// `(w_0, a_0, w_1, a_1, ...)`, the lexicographic comparison key.
    pub fn key(&self) -> Vec<u32> {
        self.layers.iter().flat_map(|l| [l.w_bits, l.a_bits]).collect()
    }

    /// Total weight storage `sum_l n(l) * b_l^W` for per-layer counts `n`.
    pub fn weight_bits(&self, counts: &[usize]) -> u64 {
        self.layers
            .iter()
            .zip(counts)
            .map(|(l, &n)| n as u64 * u64::from(l.w_bits))
            .sum()
    }

    pub fn to_json(&self) -> String {
        let doc = Document {
            schema_version: crate::SCHEMA_VERSION,
            layers: self.layers.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("bit configs serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, QuantError> {
        let doc: Document = serde_json::from_str(text).map_err(|e| QuantError::Format(e.to_string()))?;
        if doc.schema_version != crate::SCHEMA_VERSION {
            return Err(QuantError::Format(format!(
                "schema version {} (expected {})",
                doc.schema_version,
                crate::SCHEMA_VERSION
            )));
        }
        Self::new(doc.layers)
    }
}
