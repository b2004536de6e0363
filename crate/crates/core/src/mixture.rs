//! Convex mixture of surrogate models and the simplex-constrained least
//! squares that re-fits its coefficients after each round of fine-tuning.

use std::fs;
use std::path::Path;

use log::{debug, warn};
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::isweights::RateEstimates;
use crate::rng::Rng;
use crate::spm::{self, fine_tune, FineTuneOutcome, MlpModel, TrainingConfig};
use crate::types::{PredictionModel, TestState, VisitedSet};

pub const DEFAULT_QP_TOL: f64 = 1e-12;
pub const QP_MAX_ITERS: usize = 100_000;

/// Which models form the regression basis `f_alpha = sum_j alpha_j g_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpBasis {
    /// The frozen pre-trained models; the target uses the fine-tuned copies.
    #[default]
    Frozen,
    /// The fine-tuned copies on both sides (the regression then keeps `alpha_old`).
    Tuned,
}

/// `f_alpha(s) = sum_j alpha_j f_j(s)` over frozen base models, plus the
/// fine-tuned copies used to build the regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    base: Vec<MlpModel>,
    tuned: Vec<MlpModel>,
    alpha: Vec<f64>,
}

impl MixtureModel {
    /// Mixture with uniform coefficients; the tuned copies start equal to the bases.
    pub fn uniform(base: Vec<MlpModel>) -> Result<Self> {
        let j = base.len();
        Self::with_alpha(base, vec![1.0 / j.max(1) as f64; j])
    }

    pub fn with_alpha(base: Vec<MlpModel>, alpha: Vec<f64>) -> Result<Self> {
        let tuned = base.clone();
        Self::from_parts(base, tuned, alpha)
    }

    pub fn from_parts(base: Vec<MlpModel>, tuned: Vec<MlpModel>, alpha: Vec<f64>) -> Result<Self> {
        if base.is_empty() {
            return Err(Error::Empty("mixture base models"));
        }
        if tuned.len() != base.len() || alpha.len() != base.len() {
            return Err(invalid("base, tuned and alpha must have equal length"));
        }
        let d = base[0].input_dim();
        for m in base.iter().chain(&tuned) {
            if m.input_dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: m.input_dim(),
                });
            }
        }
        check_simplex(&alpha, 1e-12)?;
        Ok(Self { base, tuned, alpha })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn base_models(&self) -> &[MlpModel] {
        &self.base
    }

    pub fn tuned_models(&self) -> &[MlpModel] {
        &self.tuned
    }

    pub fn set_alpha(&mut self, alpha: Vec<f64>) -> Result<()> {
        if alpha.len() != self.len() {
            return Err(invalid("alpha length must equal the number of models"));
        }
        check_simplex(&alpha, 1e-12)?;
        self.alpha = alpha;
        Ok(())
    }

    /// Mixture of the fine-tuned copies under the current coefficients.
    pub fn tuned_mixture(&self) -> TunedMixture<'_> {
        TunedMixture(self)
    }

    fn combine(models: &[MlpModel], alpha: &[f64], states: &[TestState]) -> Vec<f64> {
        let mut out = vec![0.0; states.len()];
        for (m, &a) in models.iter().zip(alpha) {
            for (o, v) in out.iter_mut().zip(m.predict_batch(states)) {
                *o += a * v;
            }
        }
        out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }
}

fn check_simplex(alpha: &[f64], tol: f64) -> Result<()> {
    if alpha.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
        return Err(invalid(format!("coefficients must be nonnegative: {alpha:?}")));
    }
    let s: f64 = alpha.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(invalid(format!("coefficients must sum to 1, got {s}")));
    }
    Ok(())
}

impl PredictionModel for MixtureModel {
    fn dim(&self) -> usize {
        self.base[0].input_dim()
    }

    fn predict(&self, state: &TestState) -> f64 {
        let v: f64 = self
            .base
            .iter()
            .zip(&self.alpha)
            .map(|(m, &a)| a * m.predict(state))
            .sum();
        v.clamp(0.0, 1.0)
    }

    fn predict_batch(&self, states: &[TestState]) -> Vec<f64> {
        Self::combine(&self.base, &self.alpha, states)
    }
}

/// View of a mixture that predicts with the fine-tuned models.
#[derive(Debug, Clone, Copy)]
pub struct TunedMixture<'a>(&'a MixtureModel);

impl PredictionModel for TunedMixture<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn predict(&self, state: &TestState) -> f64 {
        let v: f64 = self
            .0
            .tuned
            .iter()
            .zip(&self.0.alpha)
            .map(|(m, &a)| a * m.predict(state))
            .sum();
        v.clamp(0.0, 1.0)
    }

    fn predict_batch(&self, states: &[TestState]) -> Vec<f64> {
        MixtureModel::combine(&self.0.tuned, &self.0.alpha, states)
    }
}

/// Convex combination of per-model predictions.
pub fn mixture_predict(m: &MixtureModel, state: &TestState) -> Result<f64> {
    state.check_dim(m.dim())?;
    Ok(m.predict(state))
}

/// `min_alpha 1/2 ||A alpha - t||^2` subject to `alpha` on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    /// `a[[i, j]]` is the prediction of basis model `j` at visited state `i`.
    pub a: Array2<f64>,
    /// Regression target at each visited state.
    pub t: Array1<f64>,
}

impl QpProblem {
    pub fn new(a: Array2<f64>, t: Array1<f64>) -> Result<Self> {
        if a.nrows() != t.len() {
            return Err(invalid("design rows must match target length"));
        }
        if a.ncols() == 0 {
            return Err(Error::Empty("QP columns"));
        }
        Ok(Self { a, t })
    }

    pub fn n_coefficients(&self) -> usize {
        self.a.ncols()
    }

    /// `1/2 ||A alpha - t||^2`, summed row by row.
    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let alpha = ArrayView1::from(alpha);
        let r = self.a.dot(&alpha) - &self.t;
        0.5 * r.dot(&r)
    }
}

/// Design matrix from the basis models, target from the fine-tuned models
/// under the current coefficients.
pub fn build_qp(m: &MixtureModel, visited: &VisitedSet, basis: QpBasis) -> Result<QpProblem> {
    if visited.is_empty() {
        return Err(Error::Empty("visited set"));
    }
    let states: Vec<TestState> = visited.records().iter().map(|r| r.state.clone()).collect();
    states[0].check_dim(m.dim())?;
    let n = states.len();
    let basis_models = match basis {
        QpBasis::Frozen => &m.base,
        QpBasis::Tuned => &m.tuned,
    };
    let mut a = Array2::zeros((n, m.len()));
    for (j, model) in basis_models.iter().enumerate() {
        for (i, v) in model.predict_batch(&states).into_iter().enumerate() {
            a[[i, j]] = v;
        }
    }
    let t = Array1::from(MixtureModel::combine(&m.tuned, &m.alpha, &states));
    QpProblem::new(a, t)
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub alpha: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// `max_j |alpha_j - P(alpha - grad)_j|`, zero exactly at a minimizer.
    pub kkt_residual: f64,
}

struct Gram {
    g: Array2<f64>,
    c: Array1<f64>,
}

impl Gram {
    fn grad(&self, alpha: &[f64]) -> Vec<f64> {
        (self.g.dot(&ArrayView1::from(alpha)) - &self.c).to_vec()
    }

    fn kkt(&self, alpha: &[f64]) -> f64 {
        let g = self.grad(alpha);
        let step: Vec<f64> = alpha.iter().zip(&g).map(|(a, g)| a - g).collect();
        project_to_simplex(&step)
            .iter()
            .zip(alpha)
            .map(|(p, a)| (p - a).abs())
            .fold(0.0, f64::max)
    }
}

/// Solve the simplex-constrained least squares by projected gradient with
/// step `1/L`, where `L` is the largest absolute row sum of `A^T A`,
/// starting from `warm_start` (uniform when `None`).
///
/// After the gradient phase an exact solve on the active face is attempted
/// and kept only if it is feasible and does not raise the objective. The
/// objective never increases from the starting point, and a starting point
/// that already satisfies the KKT tolerance is returned unchanged.
pub fn solve_simplex_qp(problem: &QpProblem, tol: f64, warm_start: Option<&[f64]>) -> QpSolution {
    let j = problem.n_coefficients();
    let start = match warm_start {
        Some(w) if w.len() == j => project_to_simplex(w),
        _ => vec![1.0 / j as f64; j],
    };
    let gram = Gram {
        g: problem.a.t().dot(&problem.a),
        c: problem.a.t().dot(&problem.t),
    };
    let lipschitz = gram
        .g
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);

    let mut alpha = start;
    let mut iterations = 0;
    let mut kkt = gram.kkt(&alpha);
    if lipschitz > 0.0 {
        while kkt > tol && iterations < QP_MAX_ITERS {
            let g = gram.grad(&alpha);
            let step: Vec<f64> = alpha
                .iter()
                .zip(&g)
                .map(|(a, g)| a - g / lipschitz)
                .collect();
            alpha = project_to_simplex(&step);
            iterations += 1;
            if iterations % 16 == 0 {
                kkt = gram.kkt(&alpha);
            }
        }
        kkt = gram.kkt(&alpha);
        if kkt > tol {
            if let Some(p) = polish(&gram, &alpha) {
                let (before, after) = (problem.objective(&alpha), problem.objective(&p));
                let p_kkt = gram.kkt(&p);
                if after <= before && p_kkt <= kkt {
                    debug!("QP polish: objective {before:e} -> {after:e}, kkt {kkt:e} -> {p_kkt:e}");
                    alpha = p;
                    kkt = p_kkt;
                }
            }
        }
    }
    if kkt > tol {
        debug!("QP stopped at kkt residual {kkt:e} after {iterations} iterations");
    }
    QpSolution {
        objective: problem.objective(&alpha),
        alpha,
        iterations,
        kkt_residual: kkt,
    }
}

/// Exact minimizer on the face spanned by the support of `alpha`, if the
/// reduced KKT system is nonsingular and its solution is feasible.
fn polish(gram: &Gram, alpha: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > 1e-14).collect();
    let k = support.len();
    if k == 0 {
        return None;
    }
    // [G_SS 1; 1^T 0] [x; lambda] = [c_S; 1]
    let n = k + 1;
    let mut m = vec![vec![0.0; n + 1]; n];
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            m[r][c] = gram.g[[i, j]];
        }
        m[r][k] = 1.0;
        m[r][n] = gram.c[i];
    }
    for c in 0..k {
        m[k][c] = 1.0;
    }
    m[k][n] = 1.0;
    let scale = gram.g.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
    let x = gauss_solve(m, 1e-12 * scale)?;
    let mut out = vec![0.0; alpha.len()];
    for (r, &i) in support.iter().enumerate() {
        if x[r] < 0.0 {
            return None;
        }
        out[i] = x[r];
    }
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    Some(out)
}

// Gaussian elimination with partial pivoting on an augmented matrix.
fn gauss_solve(mut m: Vec<Vec<f64>>, pivot_tol: f64) -> Option<Vec<f64>> {
    let n = m.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[piv][col].abs() <= pivot_tol {
            return None;
        }
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            if f != 0.0 {
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = m[r][n];
        for c in r + 1..n {
            s -= m[r][c] * x[c];
        }
        x[r] = s / m[r][r];
    }
    Some(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub alpha_old: Vec<f64>,
    pub alpha_new: Vec<f64>,
    pub objective_old: f64,
    pub objective_new: f64,
    pub qp_iterations: usize,
    /// Whether the tuned models were fine-tuned this round.
    pub tuned: bool,
    pub qp_solved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundConfig {
    pub training: TrainingConfig,
    pub basis: QpBasis,
    pub qp_tol: f64,
}

/// One adaptation round: fine-tune every tuned copy on the visited set with
/// the given per-record weights, then re-fit the coefficients.
///
/// The frozen base models are never modified.
pub fn coefficient_round(
    m: &mut MixtureModel,
    visited: &VisitedSet,
    config: &RoundConfig,
    weights: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<RoundOutcome> {
    if let Some(w) = weights {
        if w.len() != visited.len() {
            return Err(invalid("one weight per visited record is required"));
        }
    }
    let mut training = config.training.clone();
    training.weights = weights.map(<[f64]>::to_vec);
    let mut tuned = false;
    for model in &mut m.tuned {
        match fine_tune(model, visited, &training, rng)? {
            FineTuneOutcome::Trained(_) => tuned = true,
            FineTuneOutcome::Skipped => {}
        }
    }
    let alpha_old = m.alpha.clone();
    let differs = m.tuned.iter().zip(&m.base).any(|(a, b)| a != b);
    if visited.is_empty() || !differs {
        return Ok(RoundOutcome {
            alpha_new: alpha_old.clone(),
            alpha_old,
            objective_old: 0.0,
            objective_new: 0.0,
            qp_iterations: 0,
            tuned,
            qp_solved: false,
        });
    }
    let problem = build_qp(m, visited, config.basis)?;
    let objective_old = problem.objective(&alpha_old);
    let sol = solve_simplex_qp(&problem, config.qp_tol, Some(&alpha_old));
    let mut alpha = sol.alpha;
    alpha.iter_mut().for_each(|a| *a = a.max(0.0));
    let s: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= s);
    if sol.objective > objective_old {
        warn!("QP objective rose from {objective_old:e} to {:e}", sol.objective);
    }
    m.alpha = alpha.clone();
    Ok(RoundOutcome {
        alpha_old,
        alpha_new: alpha,
        objective_old,
        objective_new: sol.objective,
        qp_iterations: sol.iterations,
        tuned,
        qp_solved: true,
    })
}

/// JSON manifest written alongside mixture checkpoint model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureManifest {
    pub alpha: Vec<f64>,
    pub round_index: u64,
    pub rates: Option<RateEstimates>,
    pub base_files: Vec<String>,
    pub tuned_files: Vec<String>,
}

/// Write `base_j.bin`, `tuned_j.bin` (1-based) and `manifest.json` into `dir`.
pub fn save_checkpoint(
    m: &MixtureModel,
    dir: &Path,
    round_index: u64,
    rates: Option<RateEstimates>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut base_files = Vec::new();
    let mut tuned_files = Vec::new();
    for (j, (b, t)) in m.base.iter().zip(&m.tuned).enumerate() {
        let bn = format!("base_{}.bin", j + 1);
        let tn = format!("tuned_{}.bin", j + 1);
        spm::io::save(b, &dir.join(&bn), serde_json::json!({"role": "base"}))?;
        spm::io::save(t, &dir.join(&tn), serde_json::json!({"role": "tuned"}))?;
        base_files.push(bn);
        tuned_files.push(tn);
    }
    let manifest = MixtureManifest {
        alpha: m.alpha.clone(),
        round_index,
        rates,
        base_files,
        tuned_files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(MixtureModel, MixtureManifest)> {
    let manifest: MixtureManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let base = manifest
        .base_files
        .iter()
        .map(|f| spm::io::load(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let tuned = manifest
        .tuned_files
        .iter()
        .map(|f| spm::io::load(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let m = MixtureModel::from_parts(base, tuned, manifest.alpha.clone())?;
    Ok((m, manifest))
}
