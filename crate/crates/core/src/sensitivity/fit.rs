//! The FIT score and the comparison heuristics built from the same signals.

use serde::{Deserialize, Serialize};

use super::{Normalization, SensitivityError, TraceReport};
use crate::model::Model;
use crate::quant::{BitConfig, LayerRanges, NoiseConvention, NoiseEstimate, QuantRange};

/// Everything the heuristics need about one quantizable layer of the
/// full-precision model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSignals {
    pub layer: String,
    /// Quantizable weight count n(l).
    pub n: usize,
    pub weight_trace: f64,
    pub activation_trace: f64,
    pub weight_range: QuantRange,
    pub activation_range: QuantRange,
    /// Mean `|gamma|` of the batch norm following the layer.
    pub bn_gamma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub layers: Vec<LayerSignals>,
}

fn raw(report: &TraceReport) -> Result<&TraceReport, SensitivityError> {
    if report.normalization != Normalization::Raw {
        return Err(SensitivityError::InvalidArgument(format!(
            "{} report is per-parameter normalized; FIT needs raw traces",
            report.kind.name()
        )));
    }
    Ok(report)
}

impl SensitivityProfile {
    /// Joins traces and ranges by layer name; a missing activation report means zero activation traces.
    pub fn new(
        weight: &TraceReport,
        activation: Option<&TraceReport>,
        ranges: &LayerRanges,
    ) -> Result<Self, SensitivityError> {
        let weight = raw(weight)?;
        let activation = activation.map(raw).transpose()?;
        let layers = ranges
            .layers
            .iter()
            .map(|r| {
                let w = weight
                    .get(&r.layer)
                    .ok_or_else(|| SensitivityError::MissingLayer(r.layer.clone()))?;
                let a = match activation {
                    Some(rep) => rep
                        .get(&r.layer)
                        .ok_or_else(|| SensitivityError::MissingLayer(r.layer.clone()))?
                        .mean,
                    None => 0.0,
                };
                Ok(LayerSignals {
                    layer: r.layer.clone(),
                    n: w.elements,
                    weight_trace: w.mean,
                    activation_trace: a,
                    weight_range: r.weight,
                    activation_range: r.activation,
                    bn_gamma: None,
                })
            })
            .collect::<Result<_, SensitivityError>>()?;
        Ok(Self { layers })
    }

    /// Attaches mean `|gamma|` from the model's batch norms.
    pub fn with_gammas(mut self, model: &Model) -> Self {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if model.blocks.get(i).map(|b| &b.name) == Some(&layer.layer) {
                layer.bn_gamma = model
                    .block_gamma(i)
                    .map(|g| g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64);
            }
        }
        self
    }

    pub fn names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.layer.clone()).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.n).collect()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.bn_gamma.is_some())
    }

    /// Same profile with all traces multiplied by `c`.
    pub fn scaled_traces(&self, c: f64) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.weight_trace *= c;
            l.activation_trace *= c;
        }
        out
    }

    fn aligned<'a>(&'a self, bits: &'a BitConfig) -> Result<Vec<(&'a LayerSignals, u32, u32)>, SensitivityError> {
        self.layers
            .iter()
            .map(|l| {
                let b = bits
                    .get(&l.layer)
                    .ok_or_else(|| SensitivityError::MissingLayer(l.layer.clone()))?;
                Ok((l, b.w_bits, b.a_bits))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitBlock {
    pub layer: String,
    pub w_bits: u32,
    pub a_bits: u32,
    pub weight_trace: f64,
    pub activation_trace: f64,
    pub weight_noise: NoiseEstimate,
    pub activation_noise: NoiseEstimate,
    pub weight_contribution: f64,
    pub activation_contribution: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub omega: f64,
    pub weight_omega: f64,
    pub activation_omega: f64,
    pub convention: NoiseConvention,
    pub bits: BitConfig,
    pub ranges: Vec<(QuantRange, QuantRange)>,
    pub blocks: Vec<FitBlock>,
}

/// `Omega = sum_l Tr_w(l) * E[dw^2]_l + sum_l Tr_a(l) * E[da^2]_l`.
pub fn fit_metric(
    profile: &SensitivityProfile,
    bits: &BitConfig,
    convention: NoiseConvention,
) -> Result<FitReport, SensitivityError> {
    let mut blocks = Vec::with_capacity(profile.layers.len());
    let mut weight_omega = 0.0;
    let mut activation_omega = 0.0;
    for (l, wb, ab) in profile.aligned(bits)? {
        let wn = NoiseEstimate::for_range(l.weight_range, wb, convention)?;
        let an = NoiseEstimate::for_range(l.activation_range, ab, convention)?;
        let wc = l.weight_trace * wn.value;
        let ac = l.activation_trace * an.value;
        weight_omega += wc;
        activation_omega += ac;
        blocks.push(FitBlock {
            layer: l.layer.clone(),
            w_bits: wb,
            a_bits: ab,
            weight_trace: l.weight_trace,
            activation_trace: l.activation_trace,
            weight_noise: wn,
            activation_noise: an,
            weight_contribution: wc,
            activation_contribution: ac,
        });
    }
    Ok(FitReport {
        schema_version: crate::SCHEMA_VERSION,
        omega: weight_omega + activation_omega,
        weight_omega,
        activation_omega,
        convention,
        bits: bits.clone(),
        ranges: profile.layers.iter().map(|l| (l.weight_range, l.activation_range)).collect(),
        blocks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heuristic {
    #[serde(rename = "FIT")]
    Fit,
    #[serde(rename = "FIT_W")]
    FitW,
    #[serde(rename = "FIT_A")]
    FitA,
    #[serde(rename = "QR")]
    Qr,
    #[serde(rename = "QR_W")]
    QrW,
    #[serde(rename = "QR_A")]
    QrA,
    #[serde(rename = "BN")]
    Bn,
    #[serde(rename = "Noise")]
    Noise,
}

impl Heuristic {
    pub const ALL: [Heuristic; 8] = [
        Self::Fit,
        Self::FitW,
        Self::FitA,
        Self::Qr,
        Self::QrW,
        Self::QrA,
        Self::Bn,
        Self::Noise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fit => "FIT",
            Self::FitW => "FIT_W",
            Self::FitA => "FIT_A",
            Self::Qr => "QR",
            Self::QrW => "QR_W",
            Self::QrA => "QR_A",
            Self::Bn => "BN",
            Self::Noise => "Noise",
        }
    }

    /// Heuristics computable for `profile` (BN only when batch norm is present).
    pub fn available(profile: &SensitivityProfile) -> Vec<Heuristic> {
        Self::ALL
            .into_iter()
            .filter(|h| *h != Self::Bn || profile.has_batch_norm())
            .collect()
    }
}

fn inverse_width(r: QuantRange) -> f64 {
    if r.is_degenerate() {
        0.0
    } else {
        1.0 / r.width()
    }
}

/// Score of `bits` under heuristic `h`; higher means more expected degradation.
pub fn heuristic_score(
    h: Heuristic,
    profile: &SensitivityProfile,
    bits: &BitConfig,
    convention: NoiseConvention,
) -> Result<f64, SensitivityError> {
    match h {
        Heuristic::Fit => return Ok(fit_metric(profile, bits, convention)?.omega),
        Heuristic::FitW => return Ok(fit_metric(profile, bits, convention)?.weight_omega),
        Heuristic::FitA => return Ok(fit_metric(profile, bits, convention)?.activation_omega),
        Heuristic::Bn if !profile.has_batch_norm() => {
            return Err(SensitivityError::InvalidArgument(
                "BN heuristic requires a model with batch normalization".into(),
            ))
        }
        _ => {}
    }
    let mut total = 0.0;
    for (l, wb, ab) in profile.aligned(bits)? {
        let wn = NoiseEstimate::for_range(l.weight_range, wb, convention)?.value;
        let an = NoiseEstimate::for_range(l.activation_range, ab, convention)?.value;
        total += match h {
            Heuristic::Qr => inverse_width(l.weight_range) * wn + inverse_width(l.activation_range) * an,
            Heuristic::QrW => inverse_width(l.weight_range) * wn,
            Heuristic::QrA => inverse_width(l.activation_range) * an,
            Heuristic::Noise => wn + an,
            Heuristic::Bn => match l.bn_gamma {
                Some(g) if g > 0.0 => wn / g,
                Some(_) => {
                    return Err(SensitivityError::InvalidArgument(format!(
                        "layer `{}` has zero batch-norm scale",
                        l.layer
                    )))
                }
                None => 0.0,
            },
            Heuristic::Fit | Heuristic::FitW | Heuristic::FitA => unreachable!(),
        };
    }
    Ok(total)
}
