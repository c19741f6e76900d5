//! Choosing bit configurations under a weight-storage budget.

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::quant::{BitConfig, NoiseConvention};
use crate::sensitivity::{fit_metric, SensitivityProfile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedConfig {
    pub bits: BitConfig,
    pub omega: f64,
    /// `sum_l n(l) * w_bits(l)`.
    pub weight_bits: u64,
}

/// The candidate closest to fitting when none does.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetViolation {
    pub bits: BitConfig,
    pub weight_bits: u64,
    pub budget: f64,
    pub excess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub feasible: Vec<RankedConfig>,
    /// Set only when `feasible` is empty.
    pub tightest_violation: Option<BudgetViolation>,
}

/// Candidates within `budget_bits` of weight storage, by ascending FIT;
/// equal scores fall back to lexicographic order of `(w0, a0, w1, a1, ...)`.
pub fn rank_configs(
    profile: &SensitivityProfile,
    candidates: &[BitConfig],
    budget_bits: f64,
    convention: NoiseConvention,
) -> Result<Ranking, ExperimentError> {
    if candidates.is_empty() {
        return Err(ExperimentError::InvalidArgument("no candidate configurations".into()));
    }
    if budget_bits.is_nan() || budget_bits <= 0.0 {
        return Err(ExperimentError::InvalidArgument(format!("budget {budget_bits} must be > 0")));
    }
    let counts = profile.counts();
    let mut scored = candidates
        .iter()
        .map(|bits| {
            Ok(RankedConfig {
                omega: fit_metric(profile, bits, convention)?.omega,
                weight_bits: bits.weight_bits(&counts),
                bits: bits.clone(),
            })
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let (mut feasible, rejected): (Vec<_>, Vec<_>) =
        scored.drain(..).partition(|c| c.weight_bits as f64 <= budget_bits);
    feasible.sort_by(|a, b| {
        a.omega
            .total_cmp(&b.omega)
            .then_with(|| a.bits.key().cmp(&b.bits.key()))
    });
    let tightest_violation = if feasible.is_empty() {
        rejected
            .into_iter()
            .min_by(|a, b| {
                a.weight_bits
                    .cmp(&b.weight_bits)
                    .then_with(|| a.bits.key().cmp(&b.bits.key()))
            })
            .map(|c| BudgetViolation {
                excess: c.weight_bits as f64 - budget_bits,
                weight_bits: c.weight_bits,
                budget: budget_bits,
                bits: c.bits,
            })
    } else {
        None
    };
    Ok(Ranking {
        feasible,
        tightest_violation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{LayerBits, QuantRange};
    use crate::sensitivity::LayerSignals;

    fn profile(traces: &[(f64, f64)], counts: &[usize]) -> SensitivityProfile {
        SensitivityProfile {
            layers: traces
                .iter()
                .zip(counts)
                .enumerate()
                .map(|(i, (&(w, a), &n))| LayerSignals {
                    layer: format!("l{i}"),
                    n,
                    weight_trace: w,
                    activation_trace: a,
                    weight_range: QuantRange::new(-1.0, 1.0 + i as f64 * 0.5).unwrap(),
                    activation_range: QuantRange::new(0.0, 2.0 + i as f64).unwrap(),
                    bn_gamma: None,
                })
                .collect(),
        }
    }

    fn config(key: &[u32]) -> BitConfig {
        BitConfig::new(
            key.chunks(2)
                .enumerate()
                .map(|(i, c)| LayerBits {
                    layer: format!("l{i}"),
                    w_bits: c[0],
                    a_bits: c[1],
                })
                .collect(),
        )
        .unwrap()
    }

    fn all_configs(layers: usize, choices: &[u32]) -> Vec<BitConfig> {
        let slots = 2 * layers;
        let total = choices.len().pow(slots as u32);
        (0..total)
            .map(|mut code| {
                let key: Vec<u32> = (0..slots)
                    .map(|_| {
                        let c = choices[code % choices.len()];
                        code /= choices.len();
                        c
                    })
                    .collect();
                config(&key)
            })
            .collect()
    }

    #[test]
    fn unbounded_budget_orders_by_fit() {
        let p = profile(&[(1.0, 0.5), (2.0, 0.1)], &[10, 20]);
        let cands = all_configs(2, &[8, 4]);
        let r = rank_configs(&p, &cands, f64::INFINITY, NoiseConvention::DropTwelfth).unwrap();
        assert_eq!(r.feasible.len(), cands.len());
        assert!(r.feasible.windows(2).all(|w| w[0].omega <= w[1].omega));
        assert_eq!(r.feasible[0].bits.key(), vec![8, 8, 8, 8]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let p = profile(&[(0.0, 0.0), (0.0, 0.0)], &[5, 5]);
        let cands = vec![config(&[8, 3, 4, 4]), config(&[4, 8, 8, 8]), config(&[4, 6, 3, 3])];
        let r = rank_configs(&p, &cands, f64::INFINITY, NoiseConvention::DropTwelfth).unwrap();
        let keys: Vec<Vec<u32>> = r.feasible.iter().map(|c| c.bits.key()).collect();
        assert_eq!(keys, vec![vec![4, 6, 3, 3], vec![4, 8, 8, 8], vec![8, 3, 4, 4]]);
    }

    #[test]
    fn matches_exhaustive_minimum() {
        let p = profile(&[(1.3, 0.2), (0.4, 0.9), (2.2, 0.05), (0.7, 0.3)], &[30, 12, 50, 8]);
        let counts = p.counts();
        let cands = all_configs(4, &[8, 6, 4, 3]);
        for budget in [400.0, 500.0, 700.0, 900.0] {
            let r = rank_configs(&p, &cands, budget, NoiseConvention::DropTwelfth).unwrap();
            let mut best: Option<(f64, Vec<u32>)> = None;
            for c in &cands {
                if c.weight_bits(&counts) as f64 > budget {
                    continue;
                }
                let omega = fit_metric(&p, c, NoiseConvention::DropTwelfth).unwrap().omega;
                let better = match &best {
                    None => true,
                    Some((o, k)) => omega < *o || (omega == *o && c.key() < *k),
                };
                if better {
                    best = Some((omega, c.key()));
                }
            }
            let (omega, key) = best.unwrap();
            assert_eq!(r.feasible[0].bits.key(), key);
            assert_eq!(r.feasible[0].omega, omega);
        }
    }

    #[test]
    fn infeasible_budget_reports_tightest_violation() {
        let p = profile(&[(1.0, 1.0)], &[10]);
        let cands = vec![config(&[8, 8]), config(&[4, 8]), config(&[6, 3])];
        let r = rank_configs(&p, &cands, 20.0, NoiseConvention::DropTwelfth).unwrap();
        assert!(r.feasible.is_empty());
        let v = r.tightest_violation.unwrap();
        assert_eq!((v.bits.key(), v.weight_bits, v.excess), (vec![4, 8], 40, 20.0));
        assert!(rank_configs(&p, &[], 1.0, NoiseConvention::DropTwelfth).is_err());
        assert!(rank_configs(&p, &cands, 0.0, NoiseConvention::DropTwelfth).is_err());
    }
}
