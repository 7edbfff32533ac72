//! Ablation report structure and the ordering check over its variants.

use serde::{Deserialize, Serialize};

/// Variant names, in the expected descending order of downstream score.
pub const ABLATION_VARIANTS: [&str; 5] = ["full", "w/o Stage II", "w/o L_con", "w/o Stage I", "w/o L_rec"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub name: String,
    /// Per seed; `None` when that run failed.
    pub scores: Vec<Option<f64>>,
    /// Mean over completed seeds.
    pub mean: Option<f64>,
    pub failures: Vec<String>,
}

impl VariantScore {
    pub fn new(name: &str, scores: Vec<Option<f64>>, failures: Vec<String>) -> Self {
        let done: Vec<f64> = scores.iter().flatten().copied().collect();
        let mean = (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64);
        Self { name: name.into(), scores, mean, failures }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingStatus {
    Holds,
    Violated,
    /// Every completed variant scored the same, or too few completed.
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingVerdict {
    pub status: OrderingStatus,
    /// Gaps between consecutive variants of the chain
    /// full → w/o Stage II → w/o L_con → w/o Stage I.
    pub chain_gaps: Vec<Option<f64>>,
    pub min_gap: f64,
    /// `|w/o L_rec − chance|`.
    pub lrec_distance_from_chance: Option<f64>,
    pub chance_tolerance: f64,
    /// Some variant failed on some seed.
    pub incomplete: bool,
}

/// Checks `full ≥ w/o Stage II ≥ w/o L_con ≥ w/o Stage I` with every gap at
/// least `min_gap`, and `w/o L_rec` within `chance_tolerance` of `chance`.
/// `means` follows [`ABLATION_VARIANTS`].
pub fn ordering_verdict(
    means: &[Option<f64>],
    chance: f64,
    min_gap: f64,
    chance_tolerance: f64,
    incomplete: bool,
) -> OrderingVerdict {
    assert_eq!(means.len(), ABLATION_VARIANTS.len());
    let chain_gaps: Vec<Option<f64>> = (0..3).map(|k| Some(means[k]? - means[k + 1]?)).collect();
    let lrec = means[4].map(|v| (v - chance).abs());
    let done: Vec<f64> = means.iter().flatten().copied().collect();
    let all_equal = done.windows(2).all(|w| w[0] == w[1]);
    let status = if done.len() < 2 || all_equal || chain_gaps.iter().any(Option::is_none) || lrec.is_none() {
        OrderingStatus::Inconclusive
    } else if chain_gaps.iter().flatten().all(|&g| g >= min_gap) && lrec.is_some_and(|d| d <= chance_tolerance) {
        OrderingStatus::Holds
    } else {
        OrderingStatus::Violated
    };
    OrderingVerdict { status, chain_gaps, min_gap, lrec_distance_from_chance: lrec, chance_tolerance, incomplete }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    /// Score of always predicting the more frequent class, in percent.
    pub chance: f64,
    pub variants: Vec<VariantScore>,
    pub verdict: OrderingVerdict,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_scores_are_inconclusive() {
        let v = ordering_verdict(&[Some(50.0); 5], 50.0, 2.0, 5.0, false);
        assert_eq!(v.status, OrderingStatus::Inconclusive);
    }

    #[test]
    fn clean_ordering_holds() {
        let m = [Some(90.0), Some(85.0), Some(70.0), Some(60.0), Some(52.0)];
        assert_eq!(ordering_verdict(&m, 50.0, 2.0, 5.0, false).status, OrderingStatus::Holds);
        let m = [Some(90.0), Some(89.0), Some(70.0), Some(60.0), Some(52.0)];
        assert_eq!(ordering_verdict(&m, 50.0, 2.0, 5.0, false).status, OrderingStatus::Violated);
        let m = [Some(90.0), Some(85.0), Some(70.0), Some(60.0), Some(80.0)];
        assert_eq!(ordering_verdict(&m, 50.0, 2.0, 5.0, false).status, OrderingStatus::Violated);
    }

    #[test]
    fn failed_variant_in_chain_is_inconclusive() {
        let m = [Some(90.0), None, Some(70.0), Some(60.0), Some(52.0)];
        let v = ordering_verdict(&m, 50.0, 2.0, 5.0, true);
        assert_eq!(v.status, OrderingStatus::Inconclusive);
        assert!(v.incomplete);
    }
}
