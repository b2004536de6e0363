//! Ranking metrics for failure predictors.
//!
//! Scores are thresholded as `score >= t` for the precision-recall curve,
//! with one curve point per distinct score, so tied scores enter or leave the
//! predicted-positive set together. The live operating point instead uses
//! the strict rule `score > f_th`, matching the critical-set definition.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::types::{PredictionModel, TestState};

/// Precision-recall curve with one point per distinct score, thresholds descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    /// True positives among scores `>= thresholds[k]`.
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub positives: usize,
}

impl PrCurve {
    pub fn new(scores: &[f64], labels: &[bool]) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                actual: scores.len(),
            });
        }
        if let Some(i) = scores.iter().position(|s| s.is_nan()) {
            return Err(Error::NonFinite(i));
        }
        let positives = labels.iter().filter(|&&y| y).count();
        if positives == 0 {
            return Err(Error::Undefined("no positive labels".into()));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut curve = Self {
            thresholds: Vec::new(),
            tp: Vec::new(),
            fp: Vec::new(),
            positives,
        };
        let (mut tp, mut fp) = (0, 0);
        for (k, &i) in order.iter().enumerate() {
            if labels[i] {
                tp += 1;
            } else {
                fp += 1;
            }
            let last_of_group = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
            if last_of_group {
                curve.thresholds.push(scores[i]);
                curve.tp.push(tp);
                curve.fp.push(fp);
            }
        }
        Ok(curve)
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn precision(&self, k: usize) -> f64 {
        self.tp[k] as f64 / (self.tp[k] + self.fp[k]) as f64
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.tp[k] as f64 / self.positives as f64
    }

    /// `sum_k (R_k - R_{k-1}) * P_k` over the curve points.
    pub fn average_precision(&self) -> f64 {
        let mut ap = 0.0;
        let mut prev_tp = 0;
        for k in 0..self.len() {
            if self.tp[k] > prev_tp {
                ap += (self.tp[k] - prev_tp) as f64 / self.positives as f64 * self.precision(k);
                prev_tp = self.tp[k];
            }
        }
        ap
    }

    /// Highest precision among thresholds whose recall is at least `r`.
    pub fn precision_at_recall(&self, r: f64) -> Result<f64> {
        if !(r > 0.0 && r <= 1.0) {
            return Err(invalid(format!("recall level {r} outside (0, 1]")));
        }
        (0..self.len())
            .filter(|&k| self.recall(k) >= r)
            .map(|k| self.precision(k))
            .reduce(f64::max)
            .ok_or_else(|| Error::Undefined(format!("recall {r} is not reachable")))
    }
}

/// Step-wise average precision with tied scores grouped.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(PrCurve::new(scores, labels)?.average_precision())
}

pub fn precision_at_recall(curve: &PrCurve, r: f64) -> Result<f64> {
    curve.precision_at_recall(r)
}

/// Confusion summary at the rule `score > f_th`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    /// `None` when nothing is predicted positive.
    pub precision: Option<f64>,
    pub recall: f64,
    /// Fraction of states predicted positive.
    pub predicted_positive_rate: f64,
}

pub fn operating_point(scores: &[f64], labels: &[bool], f_th: f64) -> Result<OperatingPoint> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(Error::Undefined("no positive labels".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        if s > f_th {
            if y {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    Ok(OperatingPoint {
        precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
        recall: tp as f64 / positives as f64,
        predicted_positive_rate: (tp + fp) as f64 / scores.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub positives: usize,
    pub ap: f64,
    pub precision_at_r50: f64,
    pub op_precision: Option<f64>,
    pub op_recall: f64,
    pub predicted_positive_rate: f64,
}

pub fn metrics_from_scores(scores: &[f64], labels: &[bool], f_th: f64) -> Result<MetricsReport> {
    let curve = PrCurve::new(scores, labels)?;
    let op = operating_point(scores, labels, f_th)?;
    Ok(MetricsReport {
        n: scores.len(),
        positives: curve.positives,
        ap: curve.average_precision(),
        precision_at_r50: curve.precision_at_recall(0.5)?,
        op_precision: op.precision,
        op_recall: op.recall,
        predicted_positive_rate: op.predicted_positive_rate,
    })
}

/// Score `states` with `model` and summarize against `labels`.
pub fn evaluate<M: PredictionModel + ?Sized>(
    model: &M,
    states: &[TestState],
    labels: &[bool],
    f_th: f64,
) -> Result<MetricsReport> {
    if let Some(s) = states.first() {
        s.check_dim(model.dim())?;
    }
    metrics_from_scores(&model.predict_batch(states), labels, f_th)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_ranking() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);
        let c = PrCurve::new(&scores, &labels).unwrap();
        assert_eq!(c.precision_at_recall(0.5).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_give_positive_fraction() {
        let labels: Vec<bool> = (0..10).map(|i| i < 3).collect();
        let ap = average_precision(&[0.5; 10], &labels).unwrap();
        assert!((ap - 0.3).abs() < 1e-15);
    }

    #[test]
    fn reversed_ranking_hand_value() {
        // positives ranked at positions 6..10 of 10
        let scores: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let labels: Vec<bool> = (0..10).map(|i| i < 5).collect();
        let want: f64 = (1..=5).map(|k| 0.2 * k as f64 / (5 + k) as f64).sum();
        assert!((average_precision(&scores, &labels).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn unique_operating_point() {
        // best point with recall >= 0.5 is (P = 0.4, R = 0.5)
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05];
        let labels = [true, false, false, false, true, false, false, false, true, true];
        let c = PrCurve::new(&scores, &labels).unwrap();
        assert!((c.precision_at_recall(0.5).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(average_precision(&[0.1, 0.2], &[false, false]).is_err());
        assert!(average_precision(&[0.1], &[true, false]).is_err());
        assert!(average_precision(&[f64::NAN], &[true]).is_err());
        let c = PrCurve::new(&[0.1, 0.2], &[true, false]).unwrap();
        assert!(c.precision_at_recall(0.0).is_err());
        assert!(c.precision_at_recall(1.1).is_err());
    }

    #[test]
    fn operating_point_edges() {
        let scores = [0.9, 0.6, 0.4, 0.2];
        let labels = [true, false, true, false];
        let top = operating_point(&scores, &labels, 0.95).unwrap();
        assert_eq!(top.precision, None);
        assert_eq!(top.recall, 0.0);
        let all = operating_point(&scores, &labels, 0.0).unwrap();
        assert_eq!(all.recall, 1.0);
        assert_eq!(all.precision, Some(0.5));
        // strict inequality at the threshold
        let at = operating_point(&scores, &labels, 0.6).unwrap();
        assert_eq!(at.precision, Some(1.0));
        assert_eq!(at.predicted_positive_rate, 0.25);
    }

    proptest! {
        #[test]
        fn curve_is_monotone_and_bounded(
            data in prop::collection::vec((0u8..8, any::<bool>()), 1..60)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 8.0).collect();
            let mut labels: Vec<bool> = data.iter().map(|(_, y)| *y).collect();
            labels[0] = true;
            let c = PrCurve::new(&scores, &labels).unwrap();
            for k in 1..c.len() {
                prop_assert!(c.thresholds[k] < c.thresholds[k - 1]);
                prop_assert!(c.recall(k) >= c.recall(k - 1));
            }
            prop_assert_eq!(c.recall(c.len() - 1), 1.0);
            let ap = c.average_precision();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
        }
    }
}
