use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::agent::{Region, SyntheticAgentSpec};
use crate::error::{invalid, Result};
use crate::rng::{substream, Rng};
use crate::types::{NaturalisticDistribution, TestState, TruncatedNormal, UniformBox};

/// Naturalistic distributions available to the synthetic benchmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Naturalistic {
    Uniform(UniformBox),
    TruncatedNormal(TruncatedNormal),
}

impl NaturalisticDistribution for Naturalistic {
    fn dim(&self) -> usize {
        match self {
            Naturalistic::Uniform(p) => p.dim(),
            Naturalistic::TruncatedNormal(p) => p.dim(),
        }
    }

    fn bounds(&self) -> &[(f64, f64)] {
        match self {
            Naturalistic::Uniform(p) => p.bounds(),
            Naturalistic::TruncatedNormal(p) => p.bounds(),
        }
    }

    fn sample(&self, rng: &mut Rng) -> TestState {
        match self {
            Naturalistic::Uniform(p) => p.sample(rng),
            Naturalistic::TruncatedNormal(p) => p.sample(rng),
        }
    }

    fn density(&self, state: &TestState) -> Option<f64> {
        match self {
            Naturalistic::Uniform(p) => p.density(state),
            Naturalistic::TruncatedNormal(p) => p.density(state),
        }
    }
}

/// A target agent together with its naturalistic distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Benchmark {
    pub name: String,
    pub target: SyntheticAgentSpec,
    pub naturalistic: Naturalistic,
}

pub const BENCHMARK_NAMES: [&str; 3] = ["grid2", "walker10", "swarm60"];

impl Benchmark {
    pub fn new(name: &str, target: SyntheticAgentSpec, naturalistic: Naturalistic) -> Result<Self> {
        if target.dim != naturalistic.dim() {
            return Err(invalid("agent and distribution dimensions differ"));
        }
        target.validate(naturalistic.bounds())?;
        Ok(Self {
            name: name.to_string(),
            target,
            naturalistic,
        })
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "grid2" => Ok(grid2()),
            "walker10" => Ok(walker10()),
            "swarm60" => Ok(swarm60()),
            _ => Err(invalid(format!(
                "unknown benchmark {name:?}; expected one of {BENCHMARK_NAMES:?}"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.target.dim
    }

    /// Probability under `p` of landing in the failure region union.
    pub fn region_mass(&self) -> RegionMass {
        region_mass(&self.target, &self.naturalistic)
    }

    /// `P_p(failure) = inside * m + outside * (1 - m)`.
    pub fn naturalistic_failure_rate(&self) -> f64 {
        let m = self.region_mass().value;
        self.target.inside_prob * m + self.target.outside_prob * (1.0 - m)
    }
}

/// Two-dimensional, uniform on the unit square, three discs with total mass
/// `pi * (0.07^2 + 0.055^2 + 0.04^2)`, about 0.030.
pub fn grid2() -> Benchmark {
    let target = SyntheticAgentSpec::new(
        2,
        vec![
            Region::sphere(vec![0.25, 0.3], 0.07),
            Region::sphere(vec![0.7, 0.65], 0.055),
            Region::sphere(vec![0.4, 0.8], 0.04),
        ],
    );
    Benchmark::new("grid2", target, Naturalistic::Uniform(UniformBox::unit(2))).expect("valid")
}

/// Ten-dimensional, uniform, five boxes each constraining three axes with
/// side 0.126 (mass about 0.002 each, 0.01 in total).
pub fn walker10() -> Benchmark {
    const SIDE: f64 = 0.126;
    let boxes: [([usize; 3], [f64; 3]); 5] = [
        ([0, 1, 2], [0.15, 0.2, 0.6]),
        ([3, 4, 5], [0.55, 0.1, 0.3]),
        ([6, 7, 8], [0.3, 0.7, 0.45]),
        ([1, 4, 9], [0.65, 0.7, 0.15]),
        ([2, 5, 7], [0.1, 0.75, 0.2]),
    ];
    let regions = boxes
        .iter()
        .map(|(axes, low)| Region::Box {
            axes: axes.to_vec(),
            low: low.to_vec(),
            high: low.iter().map(|l| l + SIDE).collect(),
        })
        .collect();
    let target = SyntheticAgentSpec::new(10, regions);
    Benchmark::new("walker10", target, Naturalistic::Uniform(UniformBox::unit(10))).expect("valid")
}

/// Sixty-dimensional, independent truncated normals (mean 0.5, sd 0.2 on
/// `[0, 1]`), eight balls in the subspace of the first six coordinates. The
/// remaining 54 coordinates never affect the outcome.
pub fn swarm60() -> Benchmark {
    const DIM: usize = 60;
    const ACTIVE: usize = 6;
    const OFFSET: f64 = 0.18;
    const TOTAL_MASS: f64 = 0.005;
    let p = TruncatedNormal::new(DIM, 0.5, 0.2, 0.0, 1.0).expect("valid");
    // Codewords of a length-6 binary code with minimum distance 3, so the
    // ball centers are at least 0.36 * sqrt(3) apart.
    let generator = [[1, 0, 0, 1, 1, 0], [0, 1, 0, 1, 0, 1], [0, 0, 1, 0, 1, 1]];
    let centers: Vec<Vec<f64>> = (0..8u32)
        .map(|m| {
            (0..ACTIVE)
                .map(|k| {
                    let bit = (0..3).fold(0, |acc, r| acc ^ (((m >> r) & 1) as i32 * generator[r][k]));
                    0.5 + if bit == 1 { OFFSET } else { -OFFSET }
                })
                .collect()
        })
        .collect();
    let lambda = ACTIVE as f64 * (OFFSET / p.sd()).powi(2);
    let per_ball = TOTAL_MASS / centers.len() as f64;
    let z = p.normalizer(0.0, 1.0).powi(ACTIVE as i32);
    let mass_at = |r: f64| noncentral_chi2_cdf((r / p.sd()).powi(2), ACTIVE, lambda) / z;
    let (mut lo, mut hi) = (0.0, 0.3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass_at(mid) < per_ball {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let radius = 0.5 * (lo + hi);
    let regions = centers.into_iter().map(|c| Region::sphere(c, radius)).collect();
    let target = SyntheticAgentSpec::new(DIM, regions);
    Benchmark::new("swarm60", target, Naturalistic::TruncatedNormal(p)).expect("valid")
}

/// Failure-region mass, exact when the geometry admits a closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMass {
    pub value: f64,
    /// Zero for closed-form values.
    pub std_error: f64,
    pub exact: bool,
}

const MC_MASS_SAMPLES: usize = 2_000_000;

/// Boxes under a uniform distribution use inclusion-exclusion; disjoint balls
/// inside the support use their volume (uniform) or a noncentral chi-square
/// CDF (isotropic truncated normal). Anything else falls back to Monte Carlo.
pub fn region_mass(spec: &SyntheticAgentSpec, p: &Naturalistic) -> RegionMass {
    let exact = |value| RegionMass {
        value,
        std_error: 0.0,
        exact: true,
    };
    if spec.regions.is_empty() {
        return exact(0.0);
    }
    let bounds = p.bounds();
    let all_boxes = spec.regions.iter().all(|r| matches!(r, Region::Box { .. }));
    if let (true, Naturalistic::Uniform(_)) = (all_boxes, p) {
        return exact(box_union_fraction(&spec.regions, bounds));
    }
    if let Some(balls) = disjoint_interior_balls(spec, bounds) {
        match p {
            Naturalistic::Uniform(_) => {
                let total: f64 = balls
                    .iter()
                    .map(|(axes, _, r)| {
                        let width: f64 = axes.iter().map(|&a| bounds[a].1 - bounds[a].0).product();
                        ball_volume(axes.len(), *r) / width
                    })
                    .sum();
                return exact(total);
            }
            Naturalistic::TruncatedNormal(tn) => {
                let total: f64 = balls
                    .iter()
                    .map(|(axes, center, r)| {
                        let z: f64 = axes
                            .iter()
                            .map(|&a| tn.normalizer(bounds[a].0, bounds[a].1))
                            .product();
                        let lambda: f64 = center.iter().map(|c| ((c - tn.mean()) / tn.sd()).powi(2)).sum();
                        noncentral_chi2_cdf((r / tn.sd()).powi(2), axes.len(), lambda) / z
                    })
                    .sum();
                return exact(total);
            }
        }
    }
    let mut rng = substream(0, "region-mass");
    let hits = (0..MC_MASS_SAMPLES)
        .filter(|_| spec.in_region(p.sample(&mut rng).as_slice()))
        .count();
    let m = hits as f64 / MC_MASS_SAMPLES as f64;
    RegionMass {
        value: m,
        std_error: (m * (1.0 - m) / MC_MASS_SAMPLES as f64).sqrt(),
        exact: false,
    }
}

type Ball<'a> = (&'a [usize], &'a [f64], f64);

fn disjoint_interior_balls<'a>(spec: &'a SyntheticAgentSpec, bounds: &[(f64, f64)]) -> Option<Vec<Ball<'a>>> {
    let mut balls: Vec<Ball<'a>> = Vec::new();
    for r in &spec.regions {
        let Region::Sphere { axes, center, radius } = r else {
            return None;
        };
        let inside = axes
            .iter()
            .zip(center)
            .all(|(&a, &c)| c - radius >= bounds[a].0 && c + radius <= bounds[a].1);
        if !inside {
            return None;
        }
        balls.push((axes, center, *radius));
    }
    for (i, a) in balls.iter().enumerate() {
        for b in &balls[i + 1..] {
            if a.0 != b.0 {
                return None;
            }
            let d2: f64 = a.1.iter().zip(b.1).map(|(x, y)| (x - y).powi(2)).sum();
            if d2.sqrt() <= a.2 + b.2 {
                return None;
            }
        }
    }
    Some(balls)
}

/// Volume of the `k`-dimensional ball of radius `r`.
pub fn ball_volume(k: usize, r: f64) -> f64 {
    PI.powf(k as f64 / 2.0) / libm::tgamma(k as f64 / 2.0 + 1.0) * r.powi(k as i32)
}

// Fraction of the support covered by the union of boxes, by inclusion-exclusion.
fn box_union_fraction(regions: &[Region], bounds: &[(f64, f64)]) -> f64 {
    let n = regions.len();
    let mut total = 0.0;
    for mask in 1u64..(1 << n) {
        let mut lo: Vec<f64> = bounds.iter().map(|b| b.0).collect();
        let mut hi: Vec<f64> = bounds.iter().map(|b| b.1).collect();
        for (i, r) in regions.iter().enumerate() {
            if mask >> i & 1 == 0 {
                continue;
            }
            if let Region::Box { axes, low, high } = r {
                for ((&a, &l), &h) in axes.iter().zip(low).zip(high) {
                    lo[a] = lo[a].max(l);
                    hi[a] = hi[a].min(h);
                }
            }
        }
        let frac: f64 = lo
            .iter()
            .zip(&hi)
            .zip(bounds)
            .map(|((l, h), b)| (h - l).max(0.0) / (b.1 - b.0))
            .product();
        let sign = if mask.count_ones() % 2 == 1 { 1.0 } else { -1.0 };
        total += sign * frac;
    }
    total
}

/// CDF at `x` of the noncentral chi-square with even `k` degrees of freedom
/// and noncentrality `lambda`, as a Poisson mixture of central chi-squares.
pub fn noncentral_chi2_cdf(x: f64, k: usize, lambda: f64) -> f64 {
    assert!(k % 2 == 0 && k > 0, "even degrees of freedom only");
    if x <= 0.0 {
        return 0.0;
    }
    let half_l = 0.5 * lambda;
    let half_x = 0.5 * x;
    let mut poisson = (-half_l).exp();
    let mut total = 0.0;
    let mut j = 0usize;
    while j < 10_000 {
        total += poisson * central_chi2_cdf_even(half_x, k / 2 + j);
        // past the mode the Poisson weights decay geometrically
        if j as f64 > half_l && poisson < 1e-20 {
            break;
        }
        j += 1;
        poisson *= half_l / j as f64;
    }
    total
}

// P(chi^2_{2m} <= 2 h) = 1 - e^{-h} sum_{i<m} h^i / i!
fn central_chi2_cdf_even(h: f64, m: usize) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for i in 0..m {
        if i > 0 {
            term *= h / i as f64;
        }
        sum += term;
    }
    (1.0 - (-h).exp() * sum).max(0.0)
}

/// Draw a uniformly random point inside `region`, for tests that need
/// interior states.
pub fn interior_point(region: &Region, dim: usize, rng: &mut Rng) -> Vec<f64> {
    let mut s = vec![0.5; dim];
    match region {
        Region::Sphere { axes, center, radius } => loop {
            let v: Vec<f64> = axes.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                for ((&a, c), x) in axes.iter().zip(center).zip(v) {
                    s[a] = c + 0.99 * radius * x;
                }
                return s;
            }
        },
        Region::Box { axes, low, high } => {
            for ((&a, &l), &h) in axes.iter().zip(low).zip(high) {
                s[a] = rng.random_range(l..h);
            }
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::make_rng;

    #[test]
    fn grid2_mass_is_sum_of_disc_areas() {
        let m = grid2().region_mass();
        assert!(m.exact);
        let want = PI * (0.07f64.powi(2) + 0.055f64.powi(2) + 0.04f64.powi(2));
        assert!((m.value - want).abs() < 1e-15);
    }

    #[test]
    fn walker10_mass_close_to_one_percent() {
        let m = walker10().region_mass();
        assert!(m.exact);
        // five boxes of 0.126^3 minus small pairwise overlaps
        assert!(m.value < 5.0 * 0.126f64.powi(3));
        assert!((m.value - 0.01).abs() < 2e-4, "{}", m.value);
    }

    #[test]
    fn swarm60_mass_is_calibrated() {
        let b = swarm60();
        let m = b.region_mass();
        assert!(m.exact);
        assert!((m.value - 0.005).abs() < 1e-12, "{}", m.value);
    }

    #[test]
    fn closed_forms_agree_with_monte_carlo() {
        for b in [grid2(), walker10(), swarm60()] {
            let exact = b.region_mass().value;
            let mut rng = make_rng(17);
            let n = 400_000;
            let hits = (0..n)
                .filter(|_| b.target.in_region(b.naturalistic.sample(&mut rng).as_slice()))
                .count();
            let mc = hits as f64 / n as f64;
            let se = (exact * (1.0 - exact) / n as f64).sqrt();
            assert!((mc - exact).abs() < 4.0 * se, "{}: mc {mc} exact {exact}", b.name);
        }
    }

    #[test]
    fn monte_carlo_fallback_for_overlapping_balls() {
        let spec = SyntheticAgentSpec::new(
            2,
            vec![Region::sphere(vec![0.5, 0.5], 0.2), Region::sphere(vec![0.6, 0.5], 0.2)],
        );
        let m = region_mass(&spec, &Naturalistic::Uniform(UniformBox::unit(2)));
        assert!(!m.exact);
        // lens-shaped union: 2 * pi r^2 - overlap
        let r: f64 = 0.2;
        let d: f64 = 0.1;
        let overlap = 2.0 * r * r * (d / (2.0 * r)).acos() - 0.5 * d * (4.0 * r * r - d * d).sqrt();
        let want = 2.0 * PI * r * r - overlap;
        assert!((m.value - want).abs() < 4.0 * m.std_error, "{} vs {want}", m.value);
    }

    #[test]
    fn chi2_matches_known_values() {
        // central chi-square with 2 dof is exponential with mean 2
        assert!((noncentral_chi2_cdf(2.0, 2, 0.0) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        // P(chi^2_6 <= 6) from tables: 0.576809918873156
        assert!((noncentral_chi2_cdf(6.0, 6, 0.0) - 0.576_809_918_873_156).abs() < 1e-12);
        let a = noncentral_chi2_cdf(5.0, 4, 3.0);
        let b = noncentral_chi2_cdf(5.0, 4, 0.0);
        assert!(a < b && a > 0.0);
    }

    #[test]
    fn interior_points_are_inside() {
        let mut rng = make_rng(2);
        for b in [grid2(), walker10(), swarm60()] {
            for r in &b.target.regions {
                for _ in 0..50 {
                    let s = interior_point(r, b.dim(), &mut rng);
                    assert!(r.contains(&s));
                }
            }
        }
    }

    #[test]
    fn naturalistic_failure_rate_combines_both_probabilities() {
        let b = grid2();
        let m = b.region_mass().value;
        assert!((b.naturalistic_failure_rate() - (0.95 * m + 0.001 * (1.0 - m))).abs() < 1e-15);
        assert!(Benchmark::by_name("nope").is_err());
    }
}
