//! Importance weights correcting for testing under `q` instead of `p`.
//!
//! Plain weight `W = p/q`:
//!
//! ```text
//! W(s) = 1 / (eps + (1 - eps) / m)   if s is critical      (m = E_p[1_Sc])
//!      = 1 / eps                     otherwise
//! ```
//!
//! With class-rebalanced training both distributions are replaced by their
//! label-rebalanced versions `p'` and `q'`, which gives the four-case weight
//! `W' = p'/q'` over (critical / non-critical) x (failure / success):
//!
//! ```text
//! W'(s) = E_q[1_S+] / (c(s) * E_p[1_S+])   for failures
//!       = E_q[1_S-] / (c(s) * E_p[1_S-])   for successes
//! c(s)  = eps + (1 - eps)/m  if critical,  eps  otherwise
//! ```

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::types::PredictionModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimates {
    /// `E_p[1_S+]`: naturalistic failure rate.
    pub p_fail: f64,
    /// `E_q[1_S+]`: failure rate under the acquisition distribution.
    pub q_fail: f64,
    /// `E_p[1_Sc]`: naturalistic mass of the critical set.
    pub critical_mass: f64,
    /// Fraction of failures among states predicted critical.
    pub precision: f64,
}

/// `E_q[1_S+] = eps * E_p[1_S+] + (1 - eps) * precision`.
pub fn compose_q_fail(epsilon: f64, p_fail: f64, precision: f64) -> f64 {
    epsilon * p_fail + (1.0 - epsilon) * precision
}

impl RateEstimates {
    pub fn from_parts(epsilon: f64, p_fail: f64, critical_mass: f64, precision: f64) -> Self {
        Self {
            p_fail,
            q_fail: compose_q_fail(epsilon, p_fail, precision),
            critical_mass,
            precision,
        }
    }

    /// Raise every rate that can appear in a denominator to at least
    /// `1 / (2 * n_data)` (and cap `p_fail` symmetrically), then recompose
    /// `q_fail`.
    pub fn floored(&self, epsilon: f64, n_data: usize) -> Self {
        let f = 1.0 / (2.0 * n_data.max(1) as f64);
        let p_fail = self.p_fail.clamp(f, 1.0 - f);
        let critical_mass = self.critical_mass.max(f);
        Self::from_parts(epsilon, p_fail, critical_mass, self.precision)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightCase {
    CriticalPositive,
    CriticalNegative,
    NoncriticalPositive,
    NoncriticalNegative,
}

impl WeightCase {
    pub fn of(in_critical: bool, failed: bool) -> Self {
        match (in_critical, failed) {
            (true, true) => Self::CriticalPositive,
            (true, false) => Self::CriticalNegative,
            (false, true) => Self::NoncriticalPositive,
            (false, false) => Self::NoncriticalNegative,
        }
    }

    pub fn in_critical(self) -> bool {
        matches!(self, Self::CriticalPositive | Self::CriticalNegative)
    }

    pub fn failed(self) -> bool {
        matches!(self, Self::CriticalPositive | Self::NoncriticalPositive)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightAssignment {
    pub weight: f64,
    pub case: WeightCase,
}

fn q_over_p(in_critical: bool, epsilon: f64, critical_mass: f64) -> Result<f64> {
    if in_critical {
        if critical_mass <= 0.0 {
            return Err(Error::ZeroDenominator("critical mass is 0".into()));
        }
        Ok(epsilon + (1.0 - epsilon) / critical_mass)
    } else {
        if epsilon <= 0.0 {
            return Err(Error::ZeroDenominator(
                "non-critical state has zero density under q when epsilon = 0".into(),
            ));
        }
        Ok(epsilon)
    }
}

/// Plain importance weight `p/q`.
pub fn weight_plain(in_critical: bool, epsilon: f64, critical_mass: f64) -> Result<f64> {
    Ok(1.0 / q_over_p(in_critical, epsilon, critical_mass)?)
}

/// Class-rebalanced importance weight `p'/q'` for one of the four cases.
pub fn weight_rebalanced(case: WeightCase, epsilon: f64, rates: &RateEstimates) -> Result<f64> {
    let c = q_over_p(case.in_critical(), epsilon, rates.critical_mass)?;
    let (q_rate, p_rate) = if case.failed() {
        (rates.q_fail, rates.p_fail)
    } else {
        (1.0 - rates.q_fail, 1.0 - rates.p_fail)
    };
    if p_rate <= 0.0 {
        return Err(Error::ZeroDenominator(format!(
            "naturalistic rate of the {} class is 0",
            if case.failed() { "failure" } else { "success" }
        )));
    }
    if q_rate <= 0.0 {
        return Err(Error::ZeroDenominator(format!(
            "rate under q of the {} class is 0",
            if case.failed() { "failure" } else { "success" }
        )));
    }
    Ok(q_rate / (c * p_rate))
}

/// Estimate the rates from labeled held-out data assumed drawn from `p`.
///
/// Fails with [`Error::Undefined`] when no state of `data` is predicted
/// critical, since precision is then undefined.
pub fn estimate_rates<M: PredictionModel + ?Sized>(
    data: &Dataset,
    model: &M,
    f_th: f64,
    epsilon: f64,
) -> Result<RateEstimates> {
    if data.is_empty() {
        return Err(Error::Empty("rate-estimation data"));
    }
    if data.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: data.dim(),
        });
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(invalid("epsilon must lie in [0,1]"));
    }
    let scores = model.predict_batch(&data.states());
    let n = data.len() as f64;
    let mut predicted = 0usize;
    let mut true_pos = 0usize;
    for (&s, &y) in scores.iter().zip(data.labels()) {
        if s > f_th {
            predicted += 1;
            if y {
                true_pos += 1;
            }
        }
    }
    let p_fail = data.positives() as f64 / n;
    if predicted == 0 {
        return Err(Error::Undefined(format!(
            "no state predicted above f_th = {f_th}; precision undefined"
        )));
    }
    let precision = true_pos as f64 / predicted as f64;
    Ok(RateEstimates::from_parts(
        epsilon,
        p_fail,
        predicted as f64 / n,
        precision,
    ))
}

/// How visited records are weighted when fine-tuning under `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Four-case `p'/q'`, falling back to `p/q` when rates are unavailable.
    #[default]
    Rebalanced,
    /// Two-case `p/q`.
    Plain,
    /// All weights 1 (importance sampling disabled).
    Off,
}

/// Weights for a sequence of `(in_critical, failed)` records.
///
/// `rates` of `None` selects plain weights using `critical_mass`.
pub fn assign_weights(
    records: impl IntoIterator<Item = (bool, bool)>,
    epsilon: f64,
    rates: Option<&RateEstimates>,
    critical_mass: f64,
) -> Result<Vec<WeightAssignment>> {
    records
        .into_iter()
        .map(|(in_critical, failed)| {
            let case = WeightCase::of(in_critical, failed);
            let weight = match rates {
                Some(r) => weight_rebalanced(case, epsilon, r)?,
                None => weight_plain(in_critical, epsilon, critical_mass)?,
            };
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(Error::Undefined(format!("weight {weight} for {case:?}")));
            }
            Ok(WeightAssignment { weight, case })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FnModel;
    use ndarray::Array2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn plain_worked_example_and_unbiasedness() {
        let c = weight_plain(true, 0.2, 0.5).unwrap();
        let n = weight_plain(false, 0.2, 0.5).unwrap();
        assert!(close(c, 1.0 / 1.8, 1e-15));
        assert!(close(n, 5.0, 1e-15));
        // q-mass of the critical half is 0.9, of the rest 0.1
        assert!(close(0.9 * c + 0.1 * n, 1.0, 1e-15));
    }

    #[test]
    fn plain_degenerate_cases() {
        assert_eq!(weight_plain(true, 0.3, 1.0).unwrap(), 1.0);
        assert_eq!(weight_plain(true, 1.0, 0.2).unwrap(), 1.0);
        assert_eq!(weight_plain(false, 1.0, 0.2).unwrap(), 1.0);
        assert!(weight_plain(true, 0.2, 0.0).is_err());
        assert!(weight_plain(false, 0.0, 0.5).is_err());
    }

    #[test]
    fn rebalanced_worked_example() {
        let r = RateEstimates {
            p_fail: 0.1,
            q_fail: 0.4,
            critical_mass: 0.5,
            precision: 0.0,
        };
        let w = |c| weight_rebalanced(c, 0.2, &r).unwrap();
        assert!(close(w(WeightCase::CriticalPositive), 0.4 / 0.18, 1e-12));
        assert!(close(w(WeightCase::NoncriticalPositive), 20.0, 1e-12));
        assert!(close(w(WeightCase::CriticalNegative), 0.6 / 1.62, 1e-12));
        assert!(close(w(WeightCase::NoncriticalNegative), 0.6 / 0.18, 1e-12));
        assert!(close(w(WeightCase::CriticalPositive), 2.2222, 1e-4));
        assert!(close(w(WeightCase::CriticalNegative), 0.3704, 1e-4));
        assert!(close(w(WeightCase::NoncriticalNegative), 3.3333, 1e-4));
    }

    #[test]
    fn rebalanced_is_one_when_distributions_coincide() {
        let r = RateEstimates {
            p_fail: 0.3,
            q_fail: 0.3,
            critical_mass: 1.0,
            precision: 0.3,
        };
        for c in [
            WeightCase::CriticalPositive,
            WeightCase::CriticalNegative,
            WeightCase::NoncriticalPositive,
            WeightCase::NoncriticalNegative,
        ] {
            let eps = if c.in_critical() { 0.4 } else { 1.0 };
            assert!(close(weight_rebalanced(c, eps, &r).unwrap(), 1.0, 1e-15));
        }
    }

    #[test]
    fn rate_estimation_worked_example() {
        // 1000 records, 10 failures, 50 predicted critical of which 5 failures
        let n = 1000;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| i as f64);
        let y: Vec<bool> = (0..n).map(|i| (i < 50 && i % 10 == 0) || (i >= 50 && i < 55)).collect();
        let data = Dataset::new(x, y).unwrap();
        assert_eq!(data.positives(), 10);
        let model = FnModel::new(1, |s: &[f64]| if s[0] < 50.0 { 0.9 } else { 0.1 });
        let r = estimate_rates(&data, &model, 0.5, 0.05).unwrap();
        assert!(close(r.p_fail, 0.01, 1e-15));
        assert!(close(r.critical_mass, 0.05, 1e-15));
        assert!(close(r.precision, 0.1, 1e-15));
        assert!(close(r.q_fail, 0.0955, 1e-12));
    }

    #[test]
    fn perfect_classifier_rates() {
        let x = Array2::from_shape_fn((100, 1), |(i, _)| i as f64);
        let y: Vec<bool> = (0..100).map(|i| i % 7 == 0).collect();
        let data = Dataset::new(x, y).unwrap();
        let model = FnModel::new(1, |s: &[f64]| if (s[0] as usize) % 7 == 0 { 1.0 } else { 0.0 });
        let r = estimate_rates(&data, &model, 0.5, 0.1).unwrap();
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.critical_mass, r.p_fail);
    }

    #[test]
    fn all_negative_data_breaks_rebalanced_preconditions() {
        let x = Array2::from_shape_fn((20, 1), |(i, _)| i as f64);
        let data = Dataset::new(x, vec![false; 20]).unwrap();
        let model = FnModel::new(1, |s: &[f64]| if s[0] < 5.0 { 0.9 } else { 0.1 });
        let r = estimate_rates(&data, &model, 0.5, 0.1).unwrap();
        assert_eq!(r.p_fail, 0.0);
        assert!(weight_rebalanced(WeightCase::CriticalPositive, 0.1, &r).is_err());
        // flooring restores finite positive weights
        let f = r.floored(0.1, 20);
        assert!(weight_rebalanced(WeightCase::CriticalPositive, 0.1, &f).unwrap() > 0.0);
    }

    #[test]
    fn precision_undefined_without_critical_predictions() {
        let x = Array2::from_shape_fn((10, 1), |(i, _)| i as f64);
        let data = Dataset::new(x, vec![true; 10]).unwrap();
        let model = FnModel::new(1, |_: &[f64]| 0.0);
        assert!(matches!(
            estimate_rates(&data, &model, 0.5, 0.1),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn every_record_gets_exactly_one_case() {
        let recs = [(true, true), (true, false), (false, true), (false, false)];
        let r = RateEstimates::from_parts(0.2, 0.1, 0.3, 0.4);
        let w = assign_weights(recs, 0.2, Some(&r), 0.3).unwrap();
        let cases: Vec<_> = w.iter().map(|a| a.case).collect();
        assert_eq!(
            cases,
            vec![
                WeightCase::CriticalPositive,
                WeightCase::CriticalNegative,
                WeightCase::NoncriticalPositive,
                WeightCase::NoncriticalNegative
            ]
        );
        for (a, (c, f)) in w.iter().zip(recs) {
            assert_eq!(a.case.in_critical(), c);
            assert_eq!(a.case.failed(), f);
            assert!(a.weight > 0.0 && a.weight.is_finite());
        }
        let plain = assign_weights(recs, 0.2, None, 0.3).unwrap();
        assert_eq!(plain[0].weight, plain[1].weight);
        assert_eq!(plain[2].weight, 5.0);
    }
}
