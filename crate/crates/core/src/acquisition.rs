//! Bias-corrected acquisition distribution
//!
//! ```text
//! q(s) = eps * p(s) + (1 - eps) * 1[f(s) > f_th] * p(s) / E_p[1[f(S) > f_th]]
//! ```
//!
//! and the rejection sampler that draws from it: with probability `eps` a raw
//! draw from `p`, otherwise draws from `p` until one lands in the critical set.

use log::{debug, warn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::types::{NaturalisticDistribution, PredictionModel, TestState};

pub const DEFAULT_MAX_REJECTIONS: u64 = 100_000;
pub const DEFAULT_MASS_SAMPLES: usize = 100_000;

/// Chunk size for batched model evaluation.
const PREDICT_BLOCK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub epsilon: f64,
    pub f_th: f64,
    pub critical_mass: f64,
    pub max_rejections: u64,
}

impl AcquisitionParams {
    /// Parameters with `epsilon` and `f_th` strictly inside `(0, 1)`.
    pub fn new(epsilon: f64, f_th: f64, critical_mass: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(invalid(format!("epsilon must lie in (0,1), got {epsilon}")));
        }
        Self::with_boundary_epsilon(epsilon, f_th, critical_mass)
    }

    /// Like [`AcquisitionParams::new`] but admits `epsilon` of exactly 0 or 1:
    /// pure exploitation, or plain random testing.
    pub fn with_boundary_epsilon(epsilon: f64, f_th: f64, critical_mass: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(invalid(format!("epsilon must lie in [0,1], got {epsilon}")));
        }
        if !(f_th > 0.0 && f_th < 1.0) {
            return Err(invalid(format!("f_th must lie in (0,1), got {f_th}")));
        }
        if !(0.0..=1.0).contains(&critical_mass) {
            return Err(invalid(format!("critical mass must lie in [0,1], got {critical_mass}")));
        }
        Ok(Self {
            epsilon,
            f_th,
            critical_mass,
            max_rejections: DEFAULT_MAX_REJECTIONS,
        })
    }

    pub fn with_max_rejections(mut self, max_rejections: u64) -> Self {
        self.max_rejections = max_rejections.max(1);
        self
    }
}

/// How one sample was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub state: TestState,
    pub accepted_via_exploration: bool,
    /// Candidates rejected before acceptance; 0 for exploration draws.
    pub rejection_count: u64,
    /// The rejection loop hit `max_rejections` and a raw draw from `p` was used.
    pub fell_back: bool,
    /// The returned state lies in the critical set `{f > f_th}`.
    pub in_critical: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassEstimate {
    pub mass: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub hits: usize,
}

/// Monte Carlo estimate of `E_p[1[f(S) > f_th]]` from `n_samples` draws.
pub fn estimate_critical_mass<M, P>(
    model: &M,
    p: &P,
    f_th: f64,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<MassEstimate>
where
    M: PredictionModel + ?Sized,
    P: NaturalisticDistribution + ?Sized,
{
    if n_samples == 0 {
        return Err(invalid("n_samples must be >= 1"));
    }
    if model.dim() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            actual: p.dim(),
        });
    }
    let mut hits = 0usize;
    let mut left = n_samples;
    while left > 0 {
        let k = left.min(PREDICT_BLOCK);
        let states = p.sample_many(k, rng);
        hits += model
            .predict_batch(&states)
            .iter()
            .filter(|&&v| v > f_th)
            .count();
        left -= k;
    }
    let mass = hits as f64 / n_samples as f64;
    Ok(MassEstimate {
        mass,
        std_error: (mass * (1.0 - mass) / n_samples as f64).sqrt(),
        n_samples,
        hits,
    })
}

/// Density of `q` at a state with naturalistic density `p_density`.
pub fn q_density(p_density: f64, in_critical: bool, params: &AcquisitionParams) -> Result<f64> {
    let eps = params.epsilon;
    if in_critical {
        if params.critical_mass <= 0.0 {
            return Err(Error::ZeroDenominator(
                "state is critical but the critical mass is 0".into(),
            ));
        }
        Ok(eps * p_density + (1.0 - eps) * p_density / params.critical_mass)
    } else {
        Ok(eps * p_density)
    }
}

/// Draw one state from `q`, evaluating the model one candidate at a time.
pub fn sample_state<M, P>(model: &M, p: &P, params: &AcquisitionParams, rng: &mut Rng) -> SampleTrace
where
    M: PredictionModel + ?Sized,
    P: NaturalisticDistribution + ?Sized,
{
    let u: f64 = rng.random();
    let mut s = p.sample(rng);
    if u < params.epsilon {
        let in_critical = model.predict(&s) > params.f_th;
        return SampleTrace {
            state: s,
            accepted_via_exploration: true,
            rejection_count: 0,
            fell_back: false,
            in_critical,
        };
    }
    let mut rejections = 0u64;
    loop {
        if model.predict(&s) > params.f_th {
            return SampleTrace {
                state: s,
                accepted_via_exploration: false,
                rejection_count: rejections,
                fell_back: false,
                in_critical: true,
            };
        }
        rejections += 1;
        if rejections >= params.max_rejections {
            debug!("rejection loop exhausted after {rejections} candidates; using a raw draw");
            let s = p.sample(rng);
            let in_critical = model.predict(&s) > params.f_th;
            return SampleTrace {
                state: s,
                accepted_via_exploration: false,
                rejection_count: rejections,
                fell_back: true,
                in_critical,
            };
        }
        s = p.sample(rng);
    }
}

/// Rejection sampler that draws candidates from `p` in blocks and scores each
/// block with one batched model call.
///
/// Candidates are i.i.d. draws from `p` consumed strictly in order, so every
/// returned state has the same law as under [`sample_state`]. The buffer holds
/// scores of one model; call [`AcquisitionSampler::invalidate`] whenever the
/// model changes.
#[derive(Debug, Clone)]
pub struct AcquisitionSampler {
    block: usize,
    pool: Vec<TestState>,
    scores: Vec<f64>,
    fallbacks: u64,
}

impl Default for AcquisitionSampler {
    fn default() -> Self {
        Self::new(256)
    }
}

impl AcquisitionSampler {
    pub fn new(block: usize) -> Self {
        Self {
            block: block.max(1),
            pool: Vec::new(),
            scores: Vec::new(),
            fallbacks: 0,
        }
    }

    pub fn invalidate(&mut self) {
        self.pool.clear();
        self.scores.clear();
    }

    /// Number of draws that fell back to a raw `p` sample so far.
    pub fn fallbacks(&self) -> u64 {
        self.fallbacks
    }

    fn candidate<M, P>(&mut self, model: &M, p: &P, rng: &mut Rng) -> (TestState, f64)
    where
        M: PredictionModel + ?Sized,
        P: NaturalisticDistribution + ?Sized,
    {
        if self.pool.is_empty() {
            self.pool = p.sample_many(self.block, rng);
            self.scores = model.predict_batch(&self.pool);
            // stored back to front so `pop` yields draw order
            self.pool.reverse();
            self.scores.reverse();
        }
        let state = self.pool.pop().expect("refilled above");
        let score = self.scores.pop().expect("scores track pool");
        (state, score)
    }

    pub fn draw<M, P>(
        &mut self,
        model: &M,
        p: &P,
        params: &AcquisitionParams,
        rng: &mut Rng,
    ) -> SampleTrace
    where
        M: PredictionModel + ?Sized,
        P: NaturalisticDistribution + ?Sized,
    {
        let u: f64 = rng.random();
        // An empty critical set would spin the loop to the cap every time.
        let hopeless = params.critical_mass <= 0.0;
        if u < params.epsilon || hopeless {
            let (state, score) = self.candidate(model, p, rng);
            if hopeless && u >= params.epsilon {
                self.fallbacks += 1;
            }
            return SampleTrace {
                state,
                accepted_via_exploration: !hopeless || u < params.epsilon,
                rejection_count: 0,
                fell_back: hopeless && u >= params.epsilon,
                in_critical: score > params.f_th,
            };
        }
        let mut rejections = 0u64;
        loop {
            let (state, score) = self.candidate(model, p, rng);
            if score > params.f_th {
                return SampleTrace {
                    state,
                    accepted_via_exploration: false,
                    rejection_count: rejections,
                    fell_back: false,
                    in_critical: true,
                };
            }
            rejections += 1;
            if rejections >= params.max_rejections {
                self.fallbacks += 1;
                if self.fallbacks == 1 {
                    warn!(
                        "no critical state found in {rejections} candidates; falling back to a raw draw"
                    );
                }
                let (state, score) = self.candidate(model, p, rng);
                return SampleTrace {
                    state,
                    accepted_via_exploration: false,
                    rejection_count: rejections,
                    fell_back: true,
                    in_critical: score > params.f_th,
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::make_rng;
    use crate::types::{ConstantModel, FnModel, UniformBox};

    fn half_model() -> FnModel<impl Fn(&[f64]) -> f64 + Send + Sync> {
        // critical set {s_1 < 0.5}
        FnModel::new(2, |s: &[f64]| if s[0] < 0.5 { 0.9 } else { 0.1 })
    }

    #[test]
    fn params_validation() {
        assert!(AcquisitionParams::new(0.0, 0.5, 0.5).is_err());
        assert!(AcquisitionParams::new(1.0, 0.5, 0.5).is_err());
        assert!(AcquisitionParams::new(0.2, 1.0, 0.5).is_err());
        assert!(AcquisitionParams::new(0.2, 0.5, 1.5).is_err());
        assert!(AcquisitionParams::with_boundary_epsilon(1.0, 0.5, 0.5).is_ok());
        assert!(AcquisitionParams::with_boundary_epsilon(0.0, 0.5, 0.5).is_ok());
    }

    #[test]
    fn q_density_worked_values() {
        let params = AcquisitionParams::new(0.2, 0.5, 0.5).unwrap();
        assert!((q_density(1.0, true, &params).unwrap() - 1.8).abs() < 1e-15);
        assert!((q_density(1.0, false, &params).unwrap() - 0.2).abs() < 1e-15);
        let zero = AcquisitionParams::new(0.2, 0.5, 0.0).unwrap();
        assert!(q_density(1.0, true, &zero).is_err());
    }

    #[test]
    fn q_integrates_to_one_for_any_mass() {
        for &mass in &[0.01, 0.3, 0.5, 1.0] {
            let params = AcquisitionParams::new(0.3, 0.5, mass).unwrap();
            let total = mass * q_density(1.0, true, &params).unwrap()
                + (1.0 - mass) * q_density(1.0, false, &params).unwrap();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mass_of_constant_models() {
        let p = UniformBox::unit(2);
        let mut rng = make_rng(1);
        let hi = ConstantModel { dim: 2, value: 0.9 };
        let lo = ConstantModel { dim: 2, value: 0.1 };
        assert_eq!(estimate_critical_mass(&hi, &p, 0.5, 1000, &mut rng).unwrap().mass, 1.0);
        assert_eq!(estimate_critical_mass(&lo, &p, 0.5, 1000, &mut rng).unwrap().mass, 0.0);
        assert!(estimate_critical_mass(&lo, &p, 0.5, 0, &mut rng).is_err());
    }

    #[test]
    fn mass_of_half_space() {
        let p = UniformBox::unit(2);
        let m = FnModel::new(2, |s: &[f64]| s[0]);
        let est = estimate_critical_mass(&m, &p, 0.5, 1_000_000, &mut make_rng(2)).unwrap();
        assert!((est.mass - 0.5).abs() < 0.002, "{}", est.mass);
        assert!((est.std_error - 0.0005).abs() < 1e-5);
    }

    #[test]
    fn exploration_trace_has_no_rejections() {
        let p = UniformBox::unit(2);
        let m = half_model();
        let params = AcquisitionParams::new(0.5, 0.5, 0.5).unwrap();
        let mut rng = make_rng(3);
        let mut sampler = AcquisitionSampler::new(64);
        for _ in 0..2000 {
            let a = sample_state(&m, &p, &params, &mut rng);
            let b = sampler.draw(&m, &p, &params, &mut rng);
            for t in [a, b] {
                if t.accepted_via_exploration {
                    assert_eq!(t.rejection_count, 0);
                } else {
                    assert!(t.in_critical);
                    assert!(t.state.as_slice()[0] < 0.5);
                }
            }
        }
    }

    #[test]
    fn empty_critical_set_falls_back_to_p() {
        let p = UniformBox::unit(2);
        let m = ConstantModel { dim: 2, value: 0.0 };
        let params = AcquisitionParams::new(0.2, 0.5, 0.0)
            .unwrap()
            .with_max_rejections(50);
        let mut rng = make_rng(4);
        let n = 4000;
        let mut left = 0;
        for _ in 0..n {
            let t = sample_state(&m, &p, &params, &mut rng);
            assert!(t.accepted_via_exploration || t.fell_back);
            if t.state.as_slice()[0] < 0.5 {
                left += 1;
            }
        }
        let frac = left as f64 / n as f64;
        assert!((frac - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt());

        let mut sampler = AcquisitionSampler::new(32);
        for _ in 0..100 {
            let t = sampler.draw(&m, &p, &params, &mut rng);
            assert!(t.accepted_via_exploration || t.fell_back);
        }
        assert!(sampler.fallbacks() > 50);
    }

    #[test]
    fn sampler_is_deterministic() {
        let p = UniformBox::unit(2);
        let m = half_model();
        let params = AcquisitionParams::new(0.2, 0.5, 0.5).unwrap();
        let run = || {
            let mut rng = make_rng(9);
            let mut s = AcquisitionSampler::new(16);
            (0..200).map(|_| s.draw(&m, &p, &params, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
