use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::types::{Outcome, SystemUnderTest, TestState};

pub const DEFAULT_INSIDE_PROB: f64 = 0.95;
pub const DEFAULT_OUTSIDE_PROB: f64 = 0.001;

/// A failure region. Both shapes constrain only the listed `axes`; the
/// remaining coordinates are unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Region {
    /// Closed ball `sum_k (s[axes[k]] - center[k])^2 <= radius^2`.
    Sphere {
        axes: Vec<usize>,
        center: Vec<f64>,
        radius: f64,
    },
    /// Closed box `low[k] <= s[axes[k]] <= high[k]`.
    Box {
        axes: Vec<usize>,
        low: Vec<f64>,
        high: Vec<f64>,
    },
}

impl Region {
    /// Sphere over the leading `center.len()` coordinates.
    pub fn sphere(center: Vec<f64>, radius: f64) -> Self {
        Region::Sphere {
            axes: (0..center.len()).collect(),
            center,
            radius,
        }
    }

    pub fn axes(&self) -> &[usize] {
        match self {
            Region::Sphere { axes, .. } | Region::Box { axes, .. } => axes,
        }
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        match self {
            Region::Sphere {
                axes,
                center,
                radius,
            } => {
                let d2: f64 = axes
                    .iter()
                    .zip(center)
                    .map(|(&a, &c)| (s[a] - c) * (s[a] - c))
                    .sum();
                d2 <= radius * radius
            }
            Region::Box { axes, low, high } => axes
                .iter()
                .zip(low.iter().zip(high))
                .all(|(&a, (&lo, &hi))| s[a] >= lo && s[a] <= hi),
        }
    }

    fn validate(&self, dim: usize, support: &[(f64, f64)]) -> Result<()> {
        let axes = self.axes();
        if axes.is_empty() {
            return Err(invalid("region must constrain at least one axis"));
        }
        if axes.iter().any(|&a| a >= dim) {
            return Err(invalid(format!("region axis out of range for dimension {dim}")));
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() {
            return Err(invalid("region axes must be distinct"));
        }
        match self {
            Region::Sphere { center, radius, .. } => {
                if center.len() != axes.len() {
                    return Err(invalid("sphere center length must match its axes"));
                }
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(invalid("sphere radius must be positive"));
                }
                for (&a, &c) in axes.iter().zip(center) {
                    let (lo, hi) = support[a];
                    if !(c >= lo && c <= hi) {
                        return Err(invalid("sphere center outside the support"));
                    }
                }
            }
            Region::Box { low, high, .. } => {
                if low.len() != axes.len() || high.len() != axes.len() {
                    return Err(invalid("box bounds must match its axes"));
                }
                for ((&a, &l), &h) in axes.iter().zip(low).zip(high) {
                    let (lo, hi) = support[a];
                    if !(l < h && l >= lo && h <= hi) {
                        return Err(invalid("box must be nonempty and inside the support"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Shift the region by `shift` times its radius (mean half-width for
    /// boxes) in a uniformly random direction, then scale its size by `scale`.
    /// Boxes are clipped to `support`.
    pub fn perturbed(&self, shift: f64, scale: f64, support: &[(f64, f64)], rng: &mut Rng) -> Self {
        let dir = random_direction(self.axes().len(), rng);
        match self {
            Region::Sphere {
                axes,
                center,
                radius,
            } => Region::Sphere {
                axes: axes.clone(),
                center: center
                    .iter()
                    .zip(&dir)
                    .map(|(c, u)| c + shift * radius * u)
                    .collect(),
                radius: radius * scale,
            },
            Region::Box { axes, low, high } => {
                let half: Vec<f64> = low.iter().zip(high).map(|(l, h)| 0.5 * (h - l)).collect();
                let mean_half = half.iter().sum::<f64>() / half.len() as f64;
                let mut new_low = Vec::with_capacity(axes.len());
                let mut new_high = Vec::with_capacity(axes.len());
                for k in 0..axes.len() {
                    let (lo, hi) = support[axes[k]];
                    let mid = 0.5 * (low[k] + high[k]) + shift * mean_half * dir[k];
                    let h = half[k] * scale;
                    new_low.push((mid - h).max(lo));
                    new_high.push((mid + h).min(hi));
                }
                Region::Box {
                    axes: axes.clone(),
                    low: new_low,
                    high: new_high,
                }
            }
        }
    }
}

fn random_direction(k: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..k)
            .map(|_| {
                let u1: f64 = 1.0 - rng.random::<f64>();
                let u2: f64 = rng.random::<f64>();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// A synthetic black-box agent whose failure probability is `inside_prob`
/// on the union of its regions and `outside_prob` elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticAgentSpec {
    pub dim: usize,
    pub regions: Vec<Region>,
    #[serde(default = "default_inside")]
    pub inside_prob: f64,
    #[serde(default = "default_outside")]
    pub outside_prob: f64,
}

fn default_inside() -> f64 {
    DEFAULT_INSIDE_PROB
}

fn default_outside() -> f64 {
    DEFAULT_OUTSIDE_PROB
}

impl SyntheticAgentSpec {
    pub fn new(dim: usize, regions: Vec<Region>) -> Self {
        Self {
            dim,
            regions,
            inside_prob: DEFAULT_INSIDE_PROB,
            outside_prob: DEFAULT_OUTSIDE_PROB,
        }
    }

    pub fn validate(&self, support: &[(f64, f64)]) -> Result<()> {
        if self.dim == 0 || support.len() != self.dim {
            return Err(invalid("agent dimension must match the support"));
        }
        for p in [self.inside_prob, self.outside_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("probability {p} outside [0, 1]")));
            }
        }
        self.regions.iter().try_for_each(|r| r.validate(self.dim, support))
    }

    pub fn in_region(&self, s: &[f64]) -> bool {
        self.regions.iter().any(|r| r.contains(s))
    }

    /// Exact failure probability at `state`.
    pub fn ground_truth(&self, state: &TestState) -> f64 {
        if self.in_region(state.as_slice()) {
            self.inside_prob
        } else {
            self.outside_prob
        }
    }

    /// Every region perturbed independently; probabilities unchanged.
    pub fn perturbed(&self, shift: f64, scale: f64, support: &[(f64, f64)], rng: &mut Rng) -> Self {
        Self {
            regions: self
                .regions
                .iter()
                .map(|r| r.perturbed(shift, scale, support, rng))
                .collect(),
            ..self.clone()
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }
}

impl SystemUnderTest for SyntheticAgentSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    /// A single Bernoulli draw; the synthetic agents have no inner dynamics,
    /// so `max_steps` is ignored.
    fn run_test(&self, state: &TestState, _max_steps: u32, rng: &mut Rng) -> Outcome {
        let p = self.ground_truth(state);
        Outcome {
            failed: rng.random::<f64>() < p,
        }
    }
}

/// Region perturbation that turns a target agent into a surrogate agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    /// Center shift as a fraction of the region radius.
    pub shift: f64,
    /// Multiplier on the region radius.
    pub scale: f64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            shift: 0.15,
            scale: 1.1,
        }
    }
}

impl Perturbation {
    pub const NONE: Perturbation = Perturbation {
        shift: 0.0,
        scale: 1.0,
    };

    pub fn is_identity(&self) -> bool {
        self.shift == 0.0 && self.scale == 1.0
    }
}

/// A target agent and the surrogate agents derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentFamily {
    pub target: SyntheticAgentSpec,
    pub surrogates: Vec<SyntheticAgentSpec>,
}

impl AgentFamily {
    /// One surrogate per entry of `perturbations`; an identity perturbation
    /// yields an exact copy of the target.
    pub fn derive(
        target: &SyntheticAgentSpec,
        perturbations: &[Perturbation],
        support: &[(f64, f64)],
        rng: &mut Rng,
    ) -> Self {
        let surrogates = perturbations
            .iter()
            .map(|p| {
                if p.is_identity() {
                    target.clone()
                } else {
                    target.perturbed(p.shift, p.scale, support, rng)
                }
            })
            .collect();
        Self {
            target: target.clone(),
            surrogates,
        }
    }
}
