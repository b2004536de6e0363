//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use irtest::acquisition::{sample_state, AcquisitionParams};
use irtest::bench::{Benchmark, PrCurve};
use irtest::isweights::{weight_plain, weight_rebalanced, RateEstimates, WeightCase};
use irtest::mixture::{solve_simplex_qp, QpProblem};
use irtest::spm::{init_model, MlpModel};
use irtest::{make_rng, FnModel, Rng, TestState};
use ndarray::{Array1, Array2};
use rand::Rng as _;

/// Relative error `|a - b| / max(|a|, |b|)` of two gradient vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite-difference gradient of the batch loss.
pub fn finite_difference(model: &MlpModel, x: &Array2<f64>, y: &[bool], w: Option<&[f64]>, h: f64) -> Vec<f64> {
    let mut m = model.clone();
    let mut g = vec![0.0; m.params().len()];
    for (k, gk) in g.iter_mut().enumerate() {
        let orig = m.params()[k];
        m.params_mut()[k] = orig + h;
        let up = m.loss_and_gradients(x.view(), y, w).unwrap().0;
        m.params_mut()[k] = orig - h;
        let down = m.loss_and_gradients(x.view(), y, w).unwrap().0;
        m.params_mut()[k] = orig;
        *gk = (up - down) / (2.0 * h);
    }
    g
}

/// Relative error between analytic and finite-difference gradients for one
/// random model and batch drawn from `rng`.
pub fn gradient_check(rng: &mut Rng) -> f64 {
    let d = rng.random_range(1..=6);
    let depth = rng.random_range(1..=3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=12)).collect();
    let mut model = init_model(d, &hidden, rng).unwrap();
    // random biases too, so no pre-activation sits exactly on the ReLU kink
    for v in model.params_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let n = rng.random_range(1..=16);
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let w: Option<Vec<f64>> = rng
        .random_bool(0.5)
        .then(|| (0..n).map(|_| rng.random_range(0.1..3.0)).collect());
    let (_, analytic) = model.loss_and_gradients(x.view(), &y, w.as_deref()).unwrap();
    let numeric = finite_difference(&model, &x, &y, w.as_deref(), 1e-6);
    relative_error(&analytic, &numeric)
}

/// Index of the `cells x cells` grid cell containing a point of `[0,1]^2`.
pub fn cell_of(s: &[f64], cells: usize) -> usize {
    let i = ((s[0] * cells as f64) as usize).min(cells - 1);
    let j = ((s[1] * cells as f64) as usize).min(cells - 1);
    i * cells + j
}

/// Grid cells whose centre lies in a failure region of grid2.
pub fn grid2_critical_cells(cells: usize) -> Vec<bool> {
    let b = Benchmark::by_name("grid2").unwrap();
    (0..cells * cells)
        .map(|c| {
            let centre = [
                ((c / cells) as f64 + 0.5) / cells as f64,
                ((c % cells) as f64 + 0.5) / cells as f64,
            ];
            b.target.in_region(&centre)
        })
        .collect()
}

pub struct SamplerCheck {
    pub checked_cells: usize,
    pub max_relative_error: f64,
}

/// Draw `n` states from the acquisition distribution of a model whose
/// critical set is a union of grid cells, and compare cell frequencies with
/// the closed form `eps * p(c) + (1 - eps) * 1[c critical] * p(c) / mass`.
pub fn sampler_check(n: usize, cells: usize, eps: f64, min_mass: f64, seed: u64) -> SamplerCheck {
    let b = Benchmark::by_name("grid2").unwrap();
    let critical = grid2_critical_cells(cells);
    let crit = critical.clone();
    let model = FnModel::new(2, move |s: &[f64]| if crit[cell_of(s, cells)] { 0.9 } else { 0.1 });
    let k = critical.iter().filter(|&&c| c).count();
    let cell_p = 1.0 / (cells * cells) as f64;
    let mass = k as f64 * cell_p;
    let params = AcquisitionParams::new(eps, 0.5, mass).unwrap();
    let mut rng = make_rng(seed);
    let mut counts = vec![0usize; cells * cells];
    for _ in 0..n {
        let t = sample_state(&model, &b.naturalistic, &params, &mut rng);
        counts[cell_of(t.state.as_slice(), cells)] += 1;
    }
    let mut out = SamplerCheck {
        checked_cells: 0,
        max_relative_error: 0.0,
    };
    for (c, &count) in counts.iter().enumerate() {
        let q = eps * cell_p + if critical[c] { (1.0 - eps) * cell_p / mass } else { 0.0 };
        if q > min_mass {
            out.checked_cells += 1;
            let rel = (count as f64 / n as f64 - q).abs() / q;
            out.max_relative_error = out.max_relative_error.max(rel);
        }
    }
    out
}

/// A random finite space: probabilities, critical flags and failure labels.
pub struct DiscreteSpace {
    pub p: Vec<f64>,
    pub critical: Vec<bool>,
    pub failed: Vec<bool>,
}

impl DiscreteSpace {
    pub fn random(n: usize, rng: &mut Rng) -> Self {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut critical: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let mut failed: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        // every (critical, failed) combination occurs
        for (i, (c, f)) in [(true, true), (true, false), (false, true), (false, false)].into_iter().enumerate() {
            critical[i] = c;
            failed[i] = f;
        }
        Self {
            p: raw.iter().map(|r| r / total).collect(),
            critical,
            failed,
        }
    }

    pub fn mass(&self) -> f64 {
        self.p.iter().zip(&self.critical).filter(|(_, &c)| c).map(|(p, _)| p).sum()
    }

    pub fn q(&self, eps: f64) -> Vec<f64> {
        let mass = self.mass();
        self.p
            .iter()
            .zip(&self.critical)
            .map(|(&p, &c)| eps * p + if c { (1.0 - eps) * p / mass } else { 0.0 })
            .collect()
    }

    fn class_total(&self, dist: &[f64], failed: bool) -> f64 {
        dist.iter().zip(&self.failed).filter(|(_, &f)| f == failed).map(|(p, _)| p).sum()
    }

    pub fn rates(&self, eps: f64) -> RateEstimates {
        let mass = self.mass();
        let p_fail = self.class_total(&self.p, true);
        let crit_fail: f64 = (0..self.p.len())
            .filter(|&i| self.critical[i] && self.failed[i])
            .map(|i| self.p[i])
            .sum();
        RateEstimates::from_parts(eps, p_fail, mass, crit_fail / mass)
    }

    /// `|E_q[W g] - E_p[g]|` for a test function `g`.
    pub fn plain_identity_error(&self, eps: f64, g: &[f64]) -> f64 {
        let q = self.q(eps);
        let mass = self.mass();
        let lhs: f64 = (0..g.len())
            .map(|i| q[i] * weight_plain(self.critical[i], eps, mass).unwrap() * g[i])
            .sum();
        let rhs: f64 = self.p.iter().zip(g).map(|(p, g)| p * g).sum();
        (lhs - rhs).abs()
    }

    /// Largest gap between the four-case weight and the direct ratio of the
    /// class-conditional densities `p(s | y) / q(s | y)`.
    pub fn rebalanced_ratio_error(&self, eps: f64) -> f64 {
        let q = self.q(eps);
        let rates = self.rates(eps);
        let (pf, qf) = (self.class_total(&self.p, true), self.class_total(&q, true));
        (0..self.p.len())
            .map(|i| {
                let (p_class, q_class) = if self.failed[i] { (pf, qf) } else { (1.0 - pf, 1.0 - qf) };
                let direct = (self.p[i] / p_class) / (q[i] / q_class);
                let w = weight_rebalanced(WeightCase::of(self.critical[i], self.failed[i]), eps, &rates).unwrap();
                (w - direct).abs()
            })
            .fold(0.0, f64::max)
    }
}

pub struct QpCheck {
    pub objective_gap: f64,
    pub infeasibility: f64,
}

/// Solve a random simplex QP and compare with a 0.01-step grid search.
pub fn qp_check(rng: &mut Rng) -> QpCheck {
    let j = rng.random_range(1..=4);
    let n = rng.random_range(1..=200);
    let a = Array2::from_shape_fn((n, j), |_| rng.random::<f64>());
    let t = Array1::from_shape_fn(n, |_| rng.random::<f64>());
    let problem = QpProblem::new(a.clone(), t.clone()).unwrap();
    let sol = solve_simplex_qp(&problem, 1e-12, None);

    let g = a.t().dot(&a);
    let b = a.t().dot(&t);
    let tt = t.dot(&t);
    let obj = |alpha: &[f64]| {
        let mut quad = 0.0;
        for r in 0..j {
            for c in 0..j {
                quad += alpha[r] * g[[r, c]] * alpha[c];
            }
        }
        let lin: f64 = (0..j).map(|r| b[r] * alpha[r]).sum();
        0.5 * (quad - 2.0 * lin + tt)
    };
    let mut best = f64::INFINITY;
    let mut alpha = vec![0.0; j];
    grid_search(j, 100, 0, &mut alpha, &mut |al| best = best.min(obj(al)));

    let sum: f64 = sol.alpha.iter().sum();
    let neg = sol.alpha.iter().map(|&v| (-v).max(0.0)).fold(0.0, f64::max);
    QpCheck {
        objective_gap: problem.objective(&sol.alpha) - best,
        infeasibility: (sum - 1.0).abs().max(neg),
    }
}

fn grid_search(j: usize, remaining: usize, k: usize, alpha: &mut Vec<f64>, f: &mut dyn FnMut(&[f64])) {
    if k == j - 1 {
        alpha[k] = remaining as f64 / 100.0;
        f(alpha);
        return;
    }
    for step in 0..=remaining {
        alpha[k] = step as f64 / 100.0;
        grid_search(j, remaining - step, k + 1, alpha, f);
    }
}

/// Average precision by enumerating every threshold `t` in the score set and
/// counting `score >= t` directly.
pub fn brute_force_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&y| y).count();
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_tp = 0usize;
    for &t in &thresholds {
        let (tp, fp) = counts_at(scores, labels, t);
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / positives as f64 * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
    }
    ap
}

/// Best precision over thresholds reaching recall `r`, by enumeration.
pub fn brute_force_precision_at_recall(scores: &[f64], labels: &[bool], r: f64) -> Option<f64> {
    let positives = labels.iter().filter(|&&y| y).count();
    scores
        .iter()
        .filter_map(|&t| {
            let (tp, fp) = counts_at(scores, labels, t);
            (tp as f64 / positives as f64 >= r).then(|| tp as f64 / (tp + fp) as f64)
        })
        .reduce(f64::max)
}

fn counts_at(scores: &[f64], labels: &[bool], t: f64) -> (usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    for (&s, &y) in scores.iter().zip(labels) {
        if s >= t {
            if y {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    (tp, fp)
}

/// A random scored dataset with ties and at least one positive.
pub fn random_scored(rng: &mut Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(1..=100);
    let levels = rng.random_range(1..=20);
    let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    let i = rng.random_range(0..n);
    labels[i] = true;
    (scores, labels)
}

/// Whether the library agrees exactly with the brute-force oracle.
pub fn metrics_agree(scores: &[f64], labels: &[bool]) -> bool {
    let curve = PrCurve::new(scores, labels).unwrap();
    if curve.average_precision() != brute_force_ap(scores, labels) {
        return false;
    }
    [0.1, 0.25, 0.5, 0.75, 1.0].iter().all(|&r| {
        let lib = curve.precision_at_recall(r).ok();
        lib == brute_force_precision_at_recall(scores, labels, r)
    })
}

pub fn state(v: &[f64]) -> TestState {
    TestState::new(v.to_vec()).unwrap()
}
