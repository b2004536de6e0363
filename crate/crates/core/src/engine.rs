//! The online testing loops.
//!
//! Every run draws a test state, runs the system under test once, appends
//! the outcome to the visited set, adapts the surrogate every `adapt_every`
//! tests, and evaluates it on a fixed held-out set every `eval_every` tests.
//! Evaluation uses model predictions only and never calls the system under
//! test, so the test budget is exactly the number of `run_test` calls.
//!
//! Independent random streams are used for sampling, testing, training and
//! critical-mass estimation, so e.g. a skipped fine-tune does not shift the
//! sequence of sampled states.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    estimate_critical_mass, AcquisitionParams, AcquisitionSampler, DEFAULT_MASS_SAMPLES, DEFAULT_MAX_REJECTIONS,
};
use crate::bench::{evaluate, EvaluationDataset, MetricsReport};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::isweights::{assign_weights, estimate_rates, RateEstimates, WeightScheme};
use crate::mixture::{coefficient_round, MixtureModel, QpBasis, RoundConfig, DEFAULT_QP_TOL};
use crate::rng::{substream, Rng};
use crate::spm::{fine_tune, FineTuneOutcome, MlpModel, TrainingConfig};
use crate::types::{NaturalisticDistribution, PredictionModel, SystemUnderTest, TestState, VisitedRecord, VisitedSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Fine-tune a single network on the visited set.
    DataRich,
    /// Re-fit the coefficients of a mixture of pre-trained networks.
    DataLimited,
    /// Plain draws from the naturalistic distribution, no adaptation.
    Random,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::DataRich => "data_rich",
            Mode::DataLimited => "data_limited",
            Mode::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    /// Exploration probability of the acquisition distribution.
    pub epsilon: f64,
    /// Critical-set threshold on predicted failure probability.
    pub f_th: f64,
    /// Maximum steps per test episode.
    pub max_steps: u32,
    /// Fine-tuning epochs per adaptation.
    pub fine_tune_epochs: usize,
    /// Tests between adaptations.
    pub adapt_every: usize,
    /// Total number of tests.
    pub termination: usize,
    /// Tests between evaluations on the held-out set.
    pub eval_every: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mass_samples: usize,
    pub max_rejections: u64,
    pub weight_scheme: WeightScheme,
    pub qp_basis: QpBasis,
    pub qp_tol: f64,
    /// Admit `epsilon` of exactly 0 or 1.
    pub allow_boundary_epsilon: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::DataRich,
            epsilon: 0.2,
            f_th: 0.5,
            max_steps: 1,
            fine_tune_epochs: 2,
            adapt_every: 1000,
            termination: 20_000,
            eval_every: 1000,
            seed: 0,
            batch_size: 128,
            learning_rate: 1e-3,
            mass_samples: DEFAULT_MASS_SAMPLES,
            max_rejections: DEFAULT_MAX_REJECTIONS,
            weight_scheme: WeightScheme::Rebalanced,
            qp_basis: QpBasis::Frozen,
            qp_tol: DEFAULT_QP_TOL,
            allow_boundary_epsilon: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.acquisition_params(0.0)?;
        let positive = [
            ("max_steps", self.max_steps as usize),
            ("fine_tune_epochs", self.fine_tune_epochs),
            ("adapt_every", self.adapt_every),
            ("termination", self.termination),
            ("eval_every", self.eval_every),
            ("batch_size", self.batch_size),
            ("mass_samples", self.mass_samples),
            ("max_rejections", self.max_rejections as usize),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.batch_size % 2 != 0 {
            return Err(invalid("batch_size must be even"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(self.qp_tol > 0.0) {
            return Err(invalid("qp_tol must be positive"));
        }
        if self.adapt_every > self.termination && self.mode != Mode::Random {
            warn!(
                "adapt_every ({}) exceeds termination ({}); the surrogate will never adapt",
                self.adapt_every, self.termination
            );
        }
        Ok(())
    }

    fn acquisition_params(&self, critical_mass: f64) -> Result<AcquisitionParams> {
        let params = if self.allow_boundary_epsilon {
            AcquisitionParams::with_boundary_epsilon(self.epsilon, self.f_th, critical_mass)?
        } else {
            AcquisitionParams::new(self.epsilon, self.f_th, critical_mass)?
        };
        Ok(params.with_max_rejections(self.max_rejections))
    }

    fn training(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.fine_tune_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weights: None,
        }
    }
}

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub test_index: usize,
    pub cum_failures: usize,
    /// `cum_failures / test_index`; `None` before the first test.
    pub realized_failure_rate: Option<f64>,
    pub metrics: MetricsReport,
    pub alpha: Option<Vec<f64>>,
    pub critical_mass: f64,
    pub rates: Option<RateEstimates>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub logs: Vec<RoundLog>,
    #[serde(skip)]
    pub visited: VisitedSet,
    pub tests: usize,
    pub failures: usize,
    pub adaptations: usize,
    pub skipped_adaptations: usize,
    pub sampler_fallbacks: u64,
    pub wall_seconds: f64,
}

impl RunResult {
    pub fn initial(&self) -> &RoundLog {
        &self.logs[0]
    }

    pub fn last(&self) -> &RoundLog {
        self.logs.last().expect("a run logs at least its start")
    }

    pub fn realized_failure_rate(&self) -> f64 {
        if self.tests == 0 {
            0.0
        } else {
            self.failures as f64 / self.tests as f64
        }
    }
}

/// Decides after each test whether a run should stop.
pub trait Termination {
    fn should_stop(&self, tests_run: usize, visited: &VisitedSet) -> bool;
}

/// Stop after a fixed number of tests.
#[derive(Debug, Clone, Copy)]
pub struct TestBudget(pub usize);

impl Termination for TestBudget {
    fn should_stop(&self, tests_run: usize, _visited: &VisitedSet) -> bool {
        tests_run >= self.0
    }
}

struct EvalSet {
    states: Vec<TestState>,
    labels: Vec<bool>,
}

impl EvalSet {
    fn new(eval: &EvaluationDataset, dim: usize) -> Result<Self> {
        if eval.data.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: eval.data.dim(),
            });
        }
        if eval.data.positives() == 0 {
            return Err(Error::Undefined("evaluation set has no failures".into()));
        }
        Ok(Self {
            states: eval.states(),
            labels: eval.labels().to_vec(),
        })
    }
}

struct Streams {
    sample: Rng,
    test: Rng,
    train: Rng,
    mass: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            sample: substream(seed, "sample"),
            test: substream(seed, "test"),
            train: substream(seed, "train"),
            mass: substream(seed, "mass"),
        }
    }
}

// What differs between the three modes.
trait Adapter {
    fn model(&self) -> &dyn PredictionModel;
    /// Returns whether anything changed.
    fn adapt(&mut self, visited: &VisitedSet, config: &RunConfig, rng: &mut Rng) -> Result<bool>;
    fn alpha(&self) -> Option<Vec<f64>> {
        None
    }
    fn rates(&self) -> Option<RateEstimates> {
        None
    }
    /// Called after the critical mass is re-estimated.
    fn refresh(&mut self, _config: &RunConfig, _mass: f64) {}
}

struct RichAdapter {
    model: MlpModel,
}

impl Adapter for RichAdapter {
    fn model(&self) -> &dyn PredictionModel {
        &self.model
    }

    fn adapt(&mut self, visited: &VisitedSet, config: &RunConfig, rng: &mut Rng) -> Result<bool> {
        Ok(matches!(
            fine_tune(&mut self.model, visited, &config.training(), rng)?,
            FineTuneOutcome::Trained(_)
        ))
    }
}

struct RandomAdapter<'a> {
    model: &'a dyn PredictionModel,
}

impl Adapter for RandomAdapter<'_> {
    fn model(&self) -> &dyn PredictionModel {
        self.model
    }

    fn adapt(&mut self, _: &VisitedSet, _: &RunConfig, _: &mut Rng) -> Result<bool> {
        Ok(false)
    }
}

struct LimitedAdapter {
    mixture: MixtureModel,
    sam_test: Dataset,
    rates: Option<RateEstimates>,
    critical_mass: f64,
}

impl LimitedAdapter {
    fn estimate(&mut self, config: &RunConfig) {
        self.rates = match estimate_rates(&self.sam_test, &self.mixture, config.f_th, config.epsilon) {
            Ok(r) => Some(r.floored(config.epsilon, self.sam_test.len())),
            Err(e) => {
                warn!("rate estimation failed ({e}); using plain importance weights");
                None
            }
        };
    }
}

impl Adapter for LimitedAdapter {
    fn model(&self) -> &dyn PredictionModel {
        &self.mixture
    }

    fn adapt(&mut self, visited: &VisitedSet, config: &RunConfig, rng: &mut Rng) -> Result<bool> {
        let records = visited
            .records()
            .iter()
            .map(|r| (r.sampled_critical, r.outcome.failed));
        let floor = 1.0 / (2.0 * config.mass_samples as f64);
        let weights = match config.weight_scheme {
            WeightScheme::Off => None,
            WeightScheme::Plain => Some(assign_weights(records, config.epsilon, None, self.critical_mass.max(floor))?),
            WeightScheme::Rebalanced => Some(assign_weights(
                records,
                config.epsilon,
                self.rates.as_ref(),
                self.critical_mass.max(floor),
            )?),
        };
        let weights: Option<Vec<f64>> = weights.map(|w| w.into_iter().map(|a| a.weight).collect());
        let round = RoundConfig {
            training: config.training(),
            basis: config.qp_basis,
            qp_tol: config.qp_tol,
        };
        let out = coefficient_round(&mut self.mixture, visited, &round, weights.as_deref(), rng)?;
        Ok(out.tuned || out.alpha_new != out.alpha_old)
    }

    fn alpha(&self) -> Option<Vec<f64>> {
        Some(self.mixture.alpha().to_vec())
    }

    fn rates(&self) -> Option<RateEstimates> {
        self.rates
    }

    fn refresh(&mut self, config: &RunConfig, mass: f64) {
        self.critical_mass = mass;
        self.estimate(config);
    }
}

fn run_loop<S, P, A>(
    sut: &S,
    p: &P,
    adapter: &mut A,
    config: &RunConfig,
    eval: &EvaluationDataset,
    stop: &dyn Termination,
) -> Result<RunResult>
where
    S: SystemUnderTest + ?Sized,
    P: NaturalisticDistribution + ?Sized,
    A: Adapter,
{
    config.validate()?;
    let started = Instant::now();
    let d = p.dim();
    if sut.dim() != d || adapter.model().dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: if sut.dim() != d { sut.dim() } else { adapter.model().dim() },
        });
    }
    let eval = EvalSet::new(eval, d)?;
    let mut streams = Streams::new(config.seed);
    let random = config.mode == Mode::Random;

    let mut mass = estimate_critical_mass(adapter.model(), p, config.f_th, config.mass_samples, &mut streams.mass)?.mass;
    adapter.refresh(config, mass);
    let mut params = config.acquisition_params(mass)?;
    let mut sampler = AcquisitionSampler::default();
    let mut visited = VisitedSet::new();
    let (mut failures, mut adaptations, mut skipped) = (0usize, 0usize, 0usize);

    let snapshot = |adapter: &A, tests: usize, failures: usize, mass: f64| -> Result<RoundLog> {
        Ok(RoundLog {
            test_index: tests,
            cum_failures: failures,
            realized_failure_rate: (tests > 0).then(|| failures as f64 / tests as f64),
            metrics: evaluate(adapter.model(), &eval.states, &eval.labels, config.f_th)?,
            alpha: adapter.alpha(),
            critical_mass: mass,
            rates: adapter.rates(),
        })
    };
    let mut logs = vec![snapshot(adapter, 0, 0, mass)?];

    let mut tests = 0usize;
    while !stop.should_stop(tests, &visited) {
        let (state, in_critical) = if random {
            let s = p.sample(&mut streams.sample);
            let critical = adapter.model().predict(&s) > config.f_th;
            (s, critical)
        } else {
            let t = sampler.draw(adapter.model(), p, &params, &mut streams.sample);
            (t.state, t.in_critical)
        };
        let outcome = sut.run_test(&state, config.max_steps, &mut streams.test);
        tests += 1;
        failures += outcome.failed as usize;
        visited.push(VisitedRecord {
            state,
            outcome,
            sampled_critical: in_critical,
            round_index: adaptations as u64,
        })?;

        if !random && tests % config.adapt_every == 0 {
            if adapter.adapt(&visited, config, &mut streams.train)? {
                adaptations += 1;
                mass = estimate_critical_mass(adapter.model(), p, config.f_th, config.mass_samples, &mut streams.mass)?
                    .mass;
                adapter.refresh(config, mass);
                params = config.acquisition_params(mass)?;
                sampler.invalidate();
            } else {
                skipped += 1;
            }
        }

        let done = stop.should_stop(tests, &visited);
        if tests % config.eval_every == 0 || done {
            let log = snapshot(adapter, tests, failures, mass)?;
            info!(
                "{} seed {}: {} tests, {} failures, AP {:.4}",
                config.mode.as_str(),
                config.seed,
                tests,
                failures,
                log.metrics.ap
            );
            logs.push(log);
        }
    }
    if sampler.fallbacks() > 0 {
        warn!("{} draws fell back to raw naturalistic samples", sampler.fallbacks());
    }
    Ok(RunResult {
        mode: config.mode,
        seed: config.seed,
        logs,
        visited,
        tests,
        failures,
        adaptations,
        skipped_adaptations: skipped,
        sampler_fallbacks: sampler.fallbacks(),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn check_mode(config: &RunConfig, want: Mode) -> Result<()> {
    if config.mode != want {
        return Err(invalid(format!(
            "configuration mode is {} but {} was requested",
            config.mode.as_str(),
            want.as_str()
        )));
    }
    Ok(())
}

/// Single-network adaptive testing: fine-tune the surrogate on all visited
/// states every `adapt_every` tests.
pub fn run_data_rich<S, P>(
    sut: &S,
    p: &P,
    spm: MlpModel,
    config: &RunConfig,
    eval: &EvaluationDataset,
) -> Result<(MlpModel, RunResult)>
where
    S: SystemUnderTest + ?Sized,
    P: NaturalisticDistribution + ?Sized,
{
    run_data_rich_until(sut, p, spm, config, eval, &TestBudget(config.termination))
}

pub fn run_data_rich_until<S, P>(
    sut: &S,
    p: &P,
    spm: MlpModel,
    config: &RunConfig,
    eval: &EvaluationDataset,
    stop: &dyn Termination,
) -> Result<(MlpModel, RunResult)>
where
    S: SystemUnderTest + ?Sized,
    P: NaturalisticDistribution + ?Sized,
{
    check_mode(config, Mode::DataRich)?;
    let mut adapter = RichAdapter { model: spm };
    let result = run_loop(sut, p, &mut adapter, config, eval, stop)?;
    Ok((adapter.model, result))
}

/// Mixture adaptive testing: every `adapt_every` tests, fine-tune each
/// surrogate copy with importance weights and re-fit the mixture
/// coefficients. Failure rates and precision for the weights come from the
/// pooled held-out surrogate-agent test splits.
pub fn run_data_limited<S, P>(
    sut: &S,
    p: &P,
    mixture: MixtureModel,
    sam_test_data: &[Dataset],
    config: &RunConfig,
    eval: &EvaluationDataset,
) -> Result<(MixtureModel, RunResult)>
where
    S: SystemUnderTest + ?Sized,
    P: NaturalisticDistribution + ?Sized,
{
    run_data_limited_until(sut, p, mixture, sam_test_data, config, eval, &TestBudget(config.termination))
}

pub fn run_data_limited_until<S, P>(
    sut: &S,
    p: &P,
    mixture: MixtureModel,
    sam_test_data: &[Dataset],
    config: &RunConfig,
    eval: &EvaluationDataset,
    stop: &dyn Termination,
) -> Result<(MixtureModel, RunResult)>
where
    S: SystemUnderTest + ?Sized,
    P: NaturalisticDistribution + ?Sized,
{
    check_mode(config, Mode::DataLimited)?;
    if mixture.len() < 2 {
        return Err(invalid("data-limited mode needs at least two base models"));
    }
    if sam_test_data.is_empty() {
        return Err(Error::Empty("surrogate-agent test data"));
    }
    let parts: Vec<&Dataset> = sam_test_data.iter().collect();
    let mut adapter = LimitedAdapter {
        mixture,
        sam_test: Dataset::concat(&parts)?,
        rates: None,
        critical_mass: 0.0,
    };
    let result = run_loop(sut, p, &mut adapter, config, eval, stop)?;
    Ok((adapter.mixture, result))
}

/// Random testing baseline: states drawn directly from `p`; `model` is only
/// evaluated, never updated.
pub fn run_random<S, P>(
    sut: &S,
    p: &P,
    model: &dyn PredictionModel,
    config: &RunConfig,
    eval: &EvaluationDataset,
) -> Result<RunResult>
where
    S: SystemUnderTest + ?Sized,
    P: NaturalisticDistribution + ?Sized,
{
    check_mode(config, Mode::Random)?;
    let mut adapter = RandomAdapter { model };
    run_loop(sut, p, &mut adapter, config, eval, &TestBudget(config.termination))
}

/// One row of a failure-rate comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRateRow {
    pub method: String,
    pub tests: usize,
    pub failures: usize,
    pub realized_failure_rate: f64,
    /// Binomial standard error of the realized rate.
    pub std_error: f64,
    /// Final operating-point precision at `f_th`.
    pub op_precision: Option<f64>,
    /// Final precision at recall 0.5.
    pub precision_at_r50: f64,
}

/// Summary of one completed run, as consumed by [`failure_rate_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub method: String,
    pub tests: usize,
    pub failures: usize,
    pub final_metrics: MetricsReport,
}

impl RunOutcome {
    pub fn from_result(method: &str, r: &RunResult) -> Self {
        Self {
            method: method.to_string(),
            tests: r.tests,
            failures: r.failures,
            final_metrics: r.last().metrics,
        }
    }
}

/// Realized failure rates and model precision of several runs at the same budget.
pub fn failure_rate_report(runs: &[RunOutcome]) -> Result<Vec<FailureRateRow>> {
    let first = runs.first().ok_or(Error::Empty("runs"))?;
    if first.tests == 0 {
        return Err(Error::Empty("runs with a nonzero budget"));
    }
    if let Some(r) = runs.iter().find(|r| r.tests != first.tests) {
        return Err(invalid(format!(
            "mismatched budgets: {} ran {} tests, {} ran {}",
            first.method, first.tests, r.method, r.tests
        )));
    }
    Ok(runs
        .iter()
        .map(|r| {
            let rate = r.failures as f64 / r.tests as f64;
            FailureRateRow {
                method: r.method.clone(),
                tests: r.tests,
                failures: r.failures,
                realized_failure_rate: rate,
                std_error: (rate * (1.0 - rate) / r.tests as f64).sqrt(),
                op_precision: r.final_metrics.op_precision,
                precision_at_r50: r.final_metrics.precision_at_r50,
            }
        })
        .collect())
}
