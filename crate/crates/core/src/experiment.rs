//! Experiment files and the end-to-end pipeline shared by the command line
//! and the integration tests: surrogate-agent datasets, pre-training,
//! evaluation data, and the three run modes.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::bench::{
    generate_offline_dataset, metrics_from_scores, read_dataset_csv, write_dataset_csv, AgentFamily, Benchmark,
    EvaluationDataset, MetricsReport, OfflineDataset, Perturbation,
};
use crate::data::Dataset;
use crate::engine::{run_data_limited, run_data_rich, run_random, Mode, RoundLog, RunConfig, RunResult};
use crate::error::{invalid, Error, Result};
use crate::mixture::{save_checkpoint, MixtureModel};
use crate::rng::{indexed_substream, substream};
use crate::spm::{self, init_model, train, MlpModel, TrainingConfig, DEFAULT_HIDDEN};
use crate::types::{NaturalisticDistribution, PredictionModel};

/// A named default benchmark or a fully specified one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BenchmarkRef {
    Named(String),
    Inline(Benchmark),
}

impl BenchmarkRef {
    pub fn resolve(&self) -> Result<Benchmark> {
        match self {
            BenchmarkRef::Named(n) => Benchmark::by_name(n),
            BenchmarkRef::Inline(b) => Benchmark::new(&b.name, b.target.clone(), b.naturalistic.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpmSettings {
    pub hidden: Vec<usize>,
    /// States per surrogate-agent offline dataset, before the 3:1:1 split.
    pub offline_samples: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for SpmSettings {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            offline_samples: 30_000,
            pretrain_epochs: 20,
            batch_size: 128,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub epsilon: Vec<f64>,
    pub f_th: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub benchmark: BenchmarkRef,
    /// One perturbation per surrogate agent; the identity perturbation
    /// reproduces the target agent.
    #[serde(default = "default_family")]
    pub surrogates: Vec<Perturbation>,
    /// 1-based index of the surrogate whose network the data-rich and random
    /// modes start from.
    #[serde(default = "one")]
    pub data_rich_model: usize,
    #[serde(default)]
    pub spm: SpmSettings,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_family() -> Vec<Perturbation> {
    vec![Perturbation::default()]
}

fn one() -> usize {
    1
}

fn default_eval_samples() -> usize {
    20_000
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentFile {
    pub fn new(benchmark: &str) -> Self {
        Self {
            benchmark: BenchmarkRef::Named(benchmark.to_string()),
            surrogates: default_family(),
            data_rich_model: 1,
            spm: SpmSettings::default(),
            eval_samples: default_eval_samples(),
            run: RunConfig::default(),
            seeds: default_seeds(),
            sweep: None,
            output_dir: None,
        }
    }

    /// Parse and validate.
    pub fn from_json(text: &str) -> Result<Self> {
        let exp: Self = serde_json::from_str(text)?;
        exp.validate()?;
        Ok(exp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark.resolve()?;
        if self.surrogates.is_empty() {
            return Err(invalid("at least one surrogate agent is required"));
        }
        for p in &self.surrogates {
            if !(p.shift >= 0.0 && p.shift.is_finite() && p.scale > 0.0 && p.scale.is_finite()) {
                return Err(invalid("perturbation shift must be >= 0 and scale > 0"));
            }
        }
        if self.data_rich_model == 0 || self.data_rich_model > self.surrogates.len() {
            return Err(invalid("data_rich_model must index a surrogate (1-based)"));
        }
        if self.run.mode == Mode::DataLimited && self.surrogates.len() < 2 {
            return Err(invalid("data_limited mode needs at least two surrogates"));
        }
        if self.spm.hidden.contains(&0) {
            return Err(invalid("hidden widths must be positive"));
        }
        if self.spm.offline_samples < 10 {
            return Err(invalid("offline_samples must be >= 10"));
        }
        if self.spm.pretrain_epochs == 0 {
            return Err(invalid("pretrain_epochs must be >= 1"));
        }
        if self.spm.batch_size < 2 || self.spm.batch_size % 2 != 0 {
            return Err(invalid("spm batch_size must be even and >= 2"));
        }
        if !(self.spm.learning_rate > 0.0) {
            return Err(invalid("spm learning_rate must be positive"));
        }
        if self.eval_samples == 0 {
            return Err(invalid("eval_samples must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds must not be empty"));
        }
        if let Some(g) = &self.sweep {
            if g.epsilon.is_empty() || g.f_th.is_empty() {
                return Err(invalid("sweep grids must not be empty"));
            }
        }
        self.run.validate()
    }

    /// Run configuration for one seed.
    pub fn run_config(&self, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            ..self.run.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpmReport {
    pub index: usize,
    pub sam_hash: String,
    pub train_positives: usize,
    pub final_loss: f64,
    /// AP on the surrogate agent's own held-out test split.
    pub ap_own: f64,
    /// AP on the target agent's evaluation set.
    pub ap_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub benchmark: String,
    pub seed: u64,
    pub target_hash: String,
    pub eval_positive_fraction: f64,
    pub models: Vec<SpmReport>,
}

/// Everything produced by pre-training for one seed.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub benchmark: Benchmark,
    pub family: AgentFamily,
    pub models: Vec<MlpModel>,
    pub sam_test: Vec<Dataset>,
    pub eval: EvaluationDataset,
    pub report: PretrainReport,
}

/// Derive the surrogate agents, generate their offline data, pre-train one
/// network per surrogate, and label the target evaluation set.
pub fn pretrain(exp: &ExperimentFile, seed: u64) -> Result<SeedArtifacts> {
    let benchmark = exp.benchmark.resolve()?;
    let p = &benchmark.naturalistic;
    let family = AgentFamily::derive(&benchmark.target, &exp.surrogates, p.bounds(), &mut substream(seed, "family"));
    let target_hash = benchmark.target.hash();
    let eval = EvaluationDataset::generate(
        &benchmark.target,
        p,
        exp.eval_samples,
        &target_hash,
        seed,
        &mut substream(seed, "eval"),
    )?;
    if eval.data.positives() == 0 {
        return Err(Error::Undefined("evaluation set has no failures; raise eval_samples".into()));
    }
    let eval_states = eval.states();
    let cfg = TrainingConfig {
        epochs: exp.spm.pretrain_epochs,
        batch_size: exp.spm.batch_size,
        learning_rate: exp.spm.learning_rate,
        weights: None,
    };
    let mut models = Vec::new();
    let mut sam_test = Vec::new();
    let mut reports = Vec::new();
    for (j, sam) in family.surrogates.iter().enumerate() {
        let index = j as u64 + 1;
        let OfflineDataset { train: tr, test, .. } =
            generate_offline_dataset(sam, p, exp.spm.offline_samples, &mut indexed_substream(seed, "offline", index))?;
        let mut rng = indexed_substream(seed, "pretrain", index);
        let mut model = init_model(p.dim(), &exp.spm.hidden, &mut rng)?;
        let tr_report = train(&mut model, &tr, &cfg, &mut rng)?;
        let ap_own = ap_on(&model, &test)?;
        let ap_target = metrics_from_scores(&model.predict_batch(&eval_states), eval.labels(), 0.5)?.ap;
        info!("seed {seed} spm_{index}: AP own {ap_own:.4}, AP target {ap_target:.4}");
        reports.push(SpmReport {
            index: j + 1,
            sam_hash: sam.hash(),
            train_positives: tr.positives(),
            final_loss: tr_report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            ap_own,
            ap_target,
        });
        models.push(model);
        sam_test.push(test);
    }
    let report = PretrainReport {
        benchmark: benchmark.name.clone(),
        seed,
        target_hash,
        eval_positive_fraction: eval.positive_fraction(),
        models: reports,
    };
    Ok(SeedArtifacts {
        benchmark,
        family,
        models,
        sam_test,
        eval,
        report,
    })
}

fn ap_on(model: &MlpModel, data: &Dataset) -> Result<f64> {
    if data.positives() == 0 {
        return Ok(f64::NAN);
    }
    let scores = model.predict_rows(data.x())?;
    Ok(metrics_from_scores(&scores, data.labels(), 0.5)?.ap)
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub enum FinalModel {
    Single(MlpModel),
    Mixture(MixtureModel),
}

/// Run `config.mode` from the pre-trained artifacts.
pub fn run(exp: &ExperimentFile, art: &SeedArtifacts, config: &RunConfig) -> Result<(FinalModel, RunResult)> {
    let b = &art.benchmark;
    let start = art
        .models
        .get(exp.data_rich_model - 1)
        .ok_or_else(|| invalid("data_rich_model out of range"))?;
    match config.mode {
        Mode::DataRich => {
            let (m, r) = run_data_rich(&b.target, &b.naturalistic, start.clone(), config, &art.eval)?;
            Ok((FinalModel::Single(m), r))
        }
        Mode::DataLimited => {
            let mix = MixtureModel::uniform(art.models.clone())?;
            let (m, r) = run_data_limited(&b.target, &b.naturalistic, mix, &art.sam_test, config, &art.eval)?;
            Ok((FinalModel::Mixture(m), r))
        }
        Mode::Random => {
            let r = run_random(&b.target, &b.naturalistic, start, config, &art.eval)?;
            Ok((FinalModel::Single(start.clone()), r))
        }
    }
}

/// `out/seed_{s}`.
pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn model_path(seed_dir: &Path, j: usize) -> PathBuf {
    seed_dir.join("models").join(format!("spm_{j}.bin"))
}

fn sam_test_path(seed_dir: &Path, j: usize) -> PathBuf {
    seed_dir.join(format!("sam_test_{j}.csv"))
}

fn eval_path(seed_dir: &Path) -> PathBuf {
    seed_dir.join("eval.csv")
}

/// Persist pre-training outputs under `seed_dir`.
pub fn save_artifacts(exp: &ExperimentFile, art: &SeedArtifacts, seed_dir: &Path) -> Result<()> {
    fs::create_dir_all(seed_dir.join("models"))?;
    let hyper = serde_json::json!({
        "spm": exp.spm,
        "seed": art.report.seed,
        "benchmark": art.benchmark.name,
    });
    for (j, m) in art.models.iter().enumerate() {
        let mut h = hyper.clone();
        h["sam_hash"] = serde_json::Value::String(art.report.models[j].sam_hash.clone());
        spm::io::save(m, &model_path(seed_dir, j + 1), h)?;
        write_dataset_csv(&art.sam_test[j], &sam_test_path(seed_dir, j + 1))?;
    }
    art.eval.save(&eval_path(seed_dir))?;
    fs::write(
        seed_dir.join("pretrain_report.json"),
        serde_json::to_string_pretty(&art.report)? + "\n",
    )?;
    fs::write(
        seed_dir.join("family.json"),
        serde_json::to_string_pretty(&art.family)? + "\n",
    )?;
    Ok(())
}

/// Load what [`save_artifacts`] wrote. Missing files surface as
/// [`Error::Io`] with `NotFound`.
pub fn load_artifacts(exp: &ExperimentFile, seed_dir: &Path) -> Result<SeedArtifacts> {
    let benchmark = exp.benchmark.resolve()?;
    let report: PretrainReport = serde_json::from_str(&fs::read_to_string(seed_dir.join("pretrain_report.json"))?)?;
    let family: AgentFamily = serde_json::from_str(&fs::read_to_string(seed_dir.join("family.json"))?)?;
    if report.target_hash != benchmark.target.hash() {
        return Err(invalid("pre-trained artifacts were produced for a different target agent"));
    }
    let mut models = Vec::new();
    let mut sam_test = Vec::new();
    for j in 1..=exp.surrogates.len() {
        let m = spm::io::load(&model_path(seed_dir, j))?;
        if m.input_dim() != benchmark.dim() {
            return Err(Error::DimensionMismatch {
                expected: benchmark.dim(),
                actual: m.input_dim(),
            });
        }
        models.push(m);
        sam_test.push(read_dataset_csv(&sam_test_path(seed_dir, j))?);
    }
    let eval = EvaluationDataset::load(&eval_path(seed_dir))?;
    Ok(SeedArtifacts {
        benchmark,
        family,
        models,
        sam_test,
        eval,
        report,
    })
}

/// Column names of the per-run log CSV for a mixture of `j` models.
pub fn log_header(j: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "test_index",
        "cum_failures",
        "realized_failure_rate",
        "ap",
        "precision_at_r50",
        "op_precision",
        "op_recall",
        "critical_mass",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=j).map(|k| format!("alpha_{k}")));
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write one row per log entry; alpha columns are blank without a mixture.
pub fn write_logs_csv(logs: &[RoundLog], j: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(log_header(j))?;
    for l in logs {
        let mut rec = vec![
            l.test_index.to_string(),
            l.cum_failures.to_string(),
            opt(l.realized_failure_rate),
            l.metrics.ap.to_string(),
            l.metrics.precision_at_r50.to_string(),
            opt(l.metrics.op_precision),
            l.metrics.op_recall.to_string(),
            l.critical_mass.to_string(),
        ];
        for k in 0..j {
            rec.push(opt(l.alpha.as_ref().map(|a| a[k])));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub tests: usize,
    pub failures: usize,
    pub realized_failure_rate: f64,
    pub initial_metrics: MetricsReport,
    pub final_metrics: MetricsReport,
    pub final_alpha: Option<Vec<f64>>,
    pub adaptations: usize,
    pub skipped_adaptations: usize,
    pub sampler_fallbacks: u64,
    pub wall_seconds: f64,
    pub config: RunConfig,
}

impl RunSummary {
    pub fn new(r: &RunResult, config: &RunConfig) -> Self {
        Self {
            mode: r.mode,
            seed: r.seed,
            tests: r.tests,
            failures: r.failures,
            realized_failure_rate: r.realized_failure_rate(),
            initial_metrics: r.initial().metrics,
            final_metrics: r.last().metrics,
            final_alpha: r.last().alpha.clone(),
            adaptations: r.adaptations,
            skipped_adaptations: r.skipped_adaptations,
            sampler_fallbacks: r.sampler_fallbacks,
            wall_seconds: r.wall_seconds,
            config: config.clone(),
        }
    }
}

pub fn logs_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("logs_seed{seed}.csv"))
}

pub fn summary_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("summary_seed{seed}.json"))
}

/// Write the log CSV (with `j` alpha columns), the summary, and the final
/// model(s) into `dir`.
pub fn save_run(dir: &Path, model: &FinalModel, r: &RunResult, config: &RunConfig, j: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_logs_csv(&r.logs, j, &logs_path(dir, r.seed))?;
    match model {
        FinalModel::Single(m) => spm::io::save(
            m,
            &dir.join(format!("final_seed{}.bin", r.seed)),
            serde_json::json!({ "mode": config.mode, "seed": r.seed }),
        )?,
        FinalModel::Mixture(m) => {
            save_checkpoint(m, &dir.join(format!("mixture_seed{}", r.seed)), r.adaptations as u64, r.last().rates)?
        }
    }
    fs::write(
        summary_path(dir, r.seed),
        serde_json::to_string_pretty(&RunSummary::new(r, config))? + "\n",
    )?;
    Ok(())
}
