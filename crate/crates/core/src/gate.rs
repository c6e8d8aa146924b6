//! Early-exit decision scores and threshold calibration.
//!
//! Every criterion maps a generation to a score in `[0, 1]` so thresholds
//! share one domain. Exit fires when the criterion's score is greater than
//! or equal to the threshold.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum GateError {
    #[error("step probabilities must be nonempty")]
    Empty,
    #[error("distribution at step {step} sums to {sum}, not 1")]
    Unnormalized { step: usize, sum: f64 },
}

/// Early-exit criterion; string forms are the command-line names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitCriterion {
    Combined,
    Confidence,
    Consistency,
    QuantileQ1,
    QuantileQ2,
    QuantileQ3,
    Entropy,
}

impl ExitCriterion {
    pub const ALL: [ExitCriterion; 7] = [
        ExitCriterion::Combined,
        ExitCriterion::Confidence,
        ExitCriterion::Consistency,
        ExitCriterion::QuantileQ1,
        ExitCriterion::QuantileQ2,
        ExitCriterion::QuantileQ3,
        ExitCriterion::Entropy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ExitCriterion::Combined => "combined",
            ExitCriterion::Confidence => "confidence",
            ExitCriterion::Consistency => "consistency",
            ExitCriterion::QuantileQ1 => "quantile_q1",
            ExitCriterion::QuantileQ2 => "quantile_q2",
            ExitCriterion::QuantileQ3 => "quantile_q3",
            ExitCriterion::Entropy => "entropy",
        }
    }

    /// Whether the criterion needs the pruned teacher-forced pass.
    pub fn needs_consistency(&self) -> bool {
        matches!(self, ExitCriterion::Combined | ExitCriterion::Consistency)
    }

    /// Whether the criterion needs full per-step vocabulary distributions.
    pub fn needs_distributions(&self) -> bool {
        matches!(self, ExitCriterion::Entropy)
    }
}

impl std::str::FromStr for ExitCriterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExitCriterion::ALL
            .iter()
            .find(|c| c.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown exit criterion '{s}'"))
    }
}

/// One instance's exit verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExitDecision {
    pub criterion: ExitCriterion,
    pub s_confidence: f64,
    /// Absent when the criterion never invoked the consistency pass.
    pub s_consistency: Option<f64>,
    /// The criterion's own score; for `combined` this is the mean of the
    /// confidence and consistency scores.
    pub s: f64,
    pub threshold: f64,
    pub exit: bool,
}

/// Length-normalized sequence probability: the geometric mean of step
/// probabilities. A zero probability scores 0 rather than underflowing.
pub fn confidence_score<T: Scalar>(step_probs: &[T]) -> Result<T, GateError> {
    if step_probs.is_empty() {
        return Err(GateError::Empty);
    }
    if step_probs.iter().any(|p| *p <= T::zero()) {
        return Ok(T::zero());
    }
    let mut log_sum = T::zero();
    for &p in step_probs {
        log_sum += p.ln();
    }
    Ok((log_sum / T::from_f64(step_probs.len() as f64)).exp())
}

/// Plain product of the teacher-forced probabilities under the pruned model;
/// deliberately not length-normalized.
pub fn consistency_score<T: Scalar>(forced_probs: &[T]) -> Result<T, GateError> {
    if forced_probs.is_empty() {
        return Err(GateError::Empty);
    }
    Ok(forced_probs.iter().fold(T::one(), |acc, &p| acc * p))
}

/// Length-normalized variant of the consistency score, off by default;
/// exposed for experiments with long generations.
pub fn consistency_score_normalized<T: Scalar>(forced_probs: &[T]) -> Result<T, GateError> {
    confidence_score(forced_probs)
}

/// Final decision score: arithmetic mean of the two pathway scores.
pub fn decision_score<T: Scalar>(s_confidence: T, s_consistency: T) -> T {
    (s_confidence + s_consistency) / T::from_f64(2.0)
}

/// The q-th percentile of step probabilities, linearly interpolated between
/// order statistics.
pub fn quantile_score<T: Scalar>(step_probs: &[T], q: f64) -> Result<T, GateError> {
    if step_probs.is_empty() {
        return Err(GateError::Empty);
    }
    debug_assert!((0.0..=1.0).contains(&q));
    let mut sorted = step_probs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("probabilities are not NaN"));
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = T::from_f64(h - lo as f64);
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Confidence from per-step entropy: `exp(-mean Shannon entropy)`, so one-hot
/// steps score 1 and uniform steps score `1/vocab`.
pub fn entropy_score<T: Scalar>(step_distributions: &[Vec<T>]) -> Result<T, GateError> {
    if step_distributions.is_empty() {
        return Err(GateError::Empty);
    }
    let tol = 1e-6;
    let mut entropy_sum = T::zero();
    for (step, dist) in step_distributions.iter().enumerate() {
        let sum = dist.iter().fold(T::zero(), |a, &p| a + p).to_f64_value();
        if (sum - 1.0).abs() > tol {
            return Err(GateError::Unnormalized { step, sum });
        }
        let mut h = T::zero();
        for &p in dist {
            if p > T::zero() {
                h -= p * p.ln();
            }
        }
        entropy_sum += h;
    }
    Ok((-entropy_sum / T::from_f64(step_distributions.len() as f64)).exp())
}

/// Threshold whose exit ratio on `scores` approximates `target_exit_ratio`:
/// the `(1 - target)`-quantile. With distinct scores the realized ratio is
/// within `1 / scores.len()` of the target.
pub fn calibrate_threshold(scores: &[f64], target_exit_ratio: f64) -> f64 {
    assert!(!scores.is_empty(), "calibration needs at least one score");
    assert!((0.0..=1.0).contains(&target_exit_ratio));
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("scores are not NaN"));
    let m = (target_exit_ratio * sorted.len() as f64).round() as usize;
    if m == 0 {
        // Nothing exits: just above the maximum.
        sorted[0].next_up()
    } else {
        sorted[m - 1]
    }
}

/// Fraction of scores at or above the threshold.
pub fn exit_ratio(scores: &[f64], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| s >= threshold).count() as f64 / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_is_geometric_mean() {
        assert!((confidence_score(&[1.0_f64, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((confidence_score(&[0.5_f64]).unwrap() - 0.5).abs() < 1e-12);
        // (0.9 * 0.4 * 0.6)^(1/3) = 0.216^(1/3) = 0.6.
        assert!((confidence_score(&[0.9_f64, 0.4, 0.6]).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(confidence_score(&[0.5_f64, 0.0]).unwrap(), 0.0);
        assert!(confidence_score::<f64>(&[]).is_err());
    }

    #[test]
    fn consistency_is_plain_product() {
        assert!((consistency_score(&[1.0_f64, 1.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((consistency_score(&[0.5_f64, 0.5]).unwrap() - 0.25).abs() < 1e-12);
        assert!((consistency_score_normalized(&[0.5_f64, 0.5]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn decision_is_arithmetic_mean() {
        assert!((decision_score(1.0_f64, 1.0) - 1.0).abs() < 1e-12);
        assert!((decision_score(0.8_f64, 0.2) - 0.5).abs() < 1e-12);
        assert!((decision_score(0.6_f64, 0.6) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn single_step_collapses_all_pathways() {
        let p = 0.7_f64;
        let conf = confidence_score(&[p]).unwrap();
        let cons = consistency_score(&[p]).unwrap();
        assert!((conf - p).abs() < 1e-12 && (cons - p).abs() < 1e-12);
        assert!((decision_score(conf, cons) - p).abs() < 1e-12);
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        assert!((quantile_score(&[0.7_f64], 0.25).unwrap() - 0.7).abs() < 1e-12);
        assert!((quantile_score(&[0.2_f64, 0.4, 0.6, 0.8], 0.5).unwrap() - 0.5).abs() < 1e-12);
        for q in [0.25, 0.5, 0.75] {
            assert!((quantile_score(&[0.3_f64, 0.3, 0.3], q).unwrap() - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_maps_to_unit_interval() {
        let one_hot = vec![vec![0.0_f64, 1.0, 0.0, 0.0]; 3];
        assert!((entropy_score(&one_hot).unwrap() - 1.0).abs() < 1e-12);

        let uniform = vec![vec![1.0_f64 / 16.0; 16]];
        assert!((entropy_score(&uniform).unwrap() - 1.0 / 16.0).abs() < 1e-12);

        // One one-hot step plus one uniform-over-4 step:
        // exp(-(0 + ln 4) / 2) = 1/2.
        let mixed = vec![vec![1.0_f64, 0.0, 0.0, 0.0], vec![0.25; 4]];
        assert!((entropy_score(&mixed).unwrap() - 0.5).abs() < 1e-12);

        let bad = vec![vec![0.5_f64, 0.4]];
        assert!(matches!(entropy_score(&bad), Err(GateError::Unnormalized { .. })));
    }

    #[test]
    fn calibration_hits_targets() {
        let scores: Vec<f64> = (0..100).map(|i| (i as f64 * 0.618_034) % 1.0).collect();

        let all = calibrate_threshold(&scores, 1.0);
        assert!((exit_ratio(&scores, all) - 1.0).abs() < 1e-12);
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(all <= min);

        let none = calibrate_threshold(&scores, 0.0);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(none > max);
        assert_eq!(exit_ratio(&scores, none), 0.0);

        let t = calibrate_threshold(&scores, 0.4);
        let realized = exit_ratio(&scores, t);
        assert!((realized - 0.4).abs() <= 0.01, "realized {realized}");
    }

    #[test]
    fn raising_threshold_never_raises_exit_ratio() {
        let scores: Vec<f64> = (0..57).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let ratio = exit_ratio(&scores, i as f64 / 100.0);
            assert!(ratio <= prev);
            prev = ratio;
        }
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in ExitCriterion::ALL {
            assert_eq!(c.as_str().parse::<ExitCriterion>().unwrap(), c);
        }
        assert!("bogus".parse::<ExitCriterion>().is_err());
    }
}
