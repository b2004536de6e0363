//! Shared domain types and the abstractions every algorithm is written against.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Initial condition of one test episode: a dense vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TestState(Vec<f64>);

impl TestState {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("test state"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for TestState {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TestState> for Vec<f64> {
    fn from(s: TestState) -> Self {
        s.0
    }
}

/// Binary result of a test: failure (label 1) or success (label 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Outcome {
    pub failed: bool,
}

impl Outcome {
    pub const FAILURE: Outcome = Outcome { failed: true };
    pub const SUCCESS: Outcome = Outcome { failed: false };

    pub fn label(self) -> f64 {
        if self.failed {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitedRecord {
    pub state: TestState,
    pub outcome: Outcome,
    /// Whether the state lay in the critical set of the model that sampled it.
    pub sampled_critical: bool,
    pub round_index: u64,
}

/// Append-only log of tested states.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VisitedSet {
    records: Vec<VisitedRecord>,
}

impl VisitedSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: VisitedRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.round_index < last.round_index {
                return Err(invalid(format!(
                    "round index {} precedes {}",
                    record.round_index, last.round_index
                )));
            }
            record.state.check_dim(last.state.dim())?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[VisitedRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.outcome.failed).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let f = self.failures();
        f > 0 && f < self.records.len()
    }
}

/// The real-world distribution of initial test states.
pub trait NaturalisticDistribution: Send + Sync {
    fn dim(&self) -> usize;

    /// Per-dimension `(low, high)` support bounds.
    fn bounds(&self) -> &[(f64, f64)];

    fn sample(&self, rng: &mut Rng) -> TestState;

    /// Probability density at `state`, when available in closed form.
    fn density(&self, _state: &TestState) -> Option<f64> {
        None
    }

    fn sample_many(&self, n: usize, rng: &mut Rng) -> Vec<TestState> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// A black-box agent whose failure probability is unknown to the tester.
pub trait SystemUnderTest: Send + Sync {
    fn dim(&self) -> usize;

    /// Run one episode of at most `max_steps` steps starting at `state`.
    fn run_test(&self, state: &TestState, max_steps: u32, rng: &mut Rng) -> Outcome;
}

/// Maps a test state to a failure probability in `[0, 1]`.
///
/// `predict` panics if the state dimension does not match `dim()`; callers
/// that take untrusted input go through [`PredictionModel::try_predict`].
pub trait PredictionModel: Send + Sync {
    fn dim(&self) -> usize;

    fn predict(&self, state: &TestState) -> f64;

    fn try_predict(&self, state: &TestState) -> Result<f64> {
        state.check_dim(self.dim())?;
        Ok(self.predict(state))
    }

    fn predict_batch(&self, states: &[TestState]) -> Vec<f64> {
        states.iter().map(|s| self.predict(s)).collect()
    }
}

impl<T: PredictionModel + ?Sized> PredictionModel for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn predict(&self, state: &TestState) -> f64 {
        (**self).predict(state)
    }
    fn predict_batch(&self, states: &[TestState]) -> Vec<f64> {
        (**self).predict_batch(states)
    }
}

impl<T: PredictionModel + ?Sized> PredictionModel for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn predict(&self, state: &TestState) -> f64 {
        (**self).predict(state)
    }
    fn predict_batch(&self, states: &[TestState]) -> Vec<f64> {
        (**self).predict_batch(states)
    }
}

/// A prediction model given by a closure. Outputs are clamped to `[0, 1]`.
pub struct FnModel<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> FnModel<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Send + Sync> PredictionModel for FnModel<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn predict(&self, state: &TestState) -> f64 {
        assert_eq!(state.dim(), self.dim, "state dimension mismatch");
        (self.f)(state.as_slice()).clamp(0.0, 1.0)
    }
}

/// Constant-output model.
#[derive(Debug, Clone, Copy)]
pub struct ConstantModel {
    pub dim: usize,
    pub value: f64,
}

impl PredictionModel for ConstantModel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn predict(&self, state: &TestState) -> f64 {
        assert_eq!(state.dim(), self.dim, "state dimension mismatch");
        self.value.clamp(0.0, 1.0)
    }
}

/// Surrogate-to-real gap `f*(s) - f(s)` at each state.
pub fn gap<M, T>(model: &M, truth: T, states: &[TestState]) -> Vec<f64>
where
    M: PredictionModel + ?Sized,
    T: Fn(&TestState) -> f64,
{
    states
        .iter()
        .map(|s| truth(s).clamp(0.0, 1.0) - model.predict(s))
        .collect()
}

/// Uniform distribution on an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBox {
    bounds: Vec<(f64, f64)>,
}

impl UniformBox {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::Empty("bounds"));
        }
        for &(lo, hi) in &bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(invalid(format!("bad bound ({lo}, {hi})")));
            }
        }
        Ok(Self { bounds })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            bounds: vec![(0.0, 1.0); dim],
        }
    }

    fn volume(&self) -> f64 {
        self.bounds.iter().map(|(lo, hi)| hi - lo).product()
    }
}

impl NaturalisticDistribution for UniformBox {
    fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn sample(&self, rng: &mut Rng) -> TestState {
        let v = self
            .bounds
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        TestState(v)
    }

    fn density(&self, state: &TestState) -> Option<f64> {
        let inside = state
            .as_slice()
            .iter()
            .zip(&self.bounds)
            .all(|(&x, &(lo, hi))| x >= lo && x <= hi);
        Some(if inside { 1.0 / self.volume() } else { 0.0 })
    }
}

/// Independent truncated normals, one per dimension, each restricted to `[low, high]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormal {
    mean: f64,
    sd: f64,
    bounds: Vec<(f64, f64)>,
}

impl TruncatedNormal {
    pub fn new(dim: usize, mean: f64, sd: f64, low: f64, high: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty("dimension"));
        }
        if !(sd > 0.0 && low < high && mean.is_finite()) {
            return Err(invalid("truncated normal needs sd > 0 and low < high"));
        }
        Ok(Self {
            mean,
            sd,
            bounds: vec![(low, high); dim],
        })
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sd(&self) -> f64 {
        self.sd
    }

    /// Probability mass of one untruncated coordinate inside `[low, high]`.
    pub fn normalizer(&self, low: f64, high: f64) -> f64 {
        self.normal_cdf(high) - self.normal_cdf(low)
    }

    fn normal_cdf(&self, x: f64) -> f64 {
        0.5 * libm::erfc(-(x - self.mean) / (self.sd * std::f64::consts::SQRT_2))
    }

    fn draw_one(&self, rng: &mut Rng, lo: f64, hi: f64) -> f64 {
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let x = self.mean + self.sd * z;
            if x >= lo && x <= hi {
                return x;
            }
        }
    }
}

impl NaturalisticDistribution for TruncatedNormal {
    fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    fn sample(&self, rng: &mut Rng) -> TestState {
        let v = self
            .bounds
            .iter()
            .map(|&(lo, hi)| self.draw_one(rng, lo, hi))
            .collect();
        TestState(v)
    }

    fn density(&self, state: &TestState) -> Option<f64> {
        let mut d = 1.0;
        for (&x, &(lo, hi)) in state.as_slice().iter().zip(&self.bounds) {
            if x < lo || x > hi {
                return Some(0.0);
            }
            let z = (x - self.mean) / self.sd;
            let pdf = (-0.5 * z * z).exp() / (self.sd * (2.0 * std::f64::consts::PI).sqrt());
            d *= pdf / self.normalizer(lo, hi);
        }
        Some(d)
    }
}
