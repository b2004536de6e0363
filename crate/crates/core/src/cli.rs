//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a configuration or
//! usage error (including refusing to overwrite outputs without `--force`),
//! 3 when pre-trained artifacts or other inputs are missing.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::bench::{metrics_from_scores, EvaluationDataset};
use crate::engine::{failure_rate_report, Mode, RunConfig, RunOutcome};
use crate::error::Error;
use crate::experiment::{
    load_artifacts, logs_path, pretrain, run, save_artifacts, save_run, seed_dir, summary_path, ExperimentFile,
    RunSummary, SeedArtifacts,
};
use crate::spm;
use crate::types::PredictionModel;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "irtest", version, about = "Adaptive testing of black-box agents with surrogate failure models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the experiment file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run a single seed instead of the experiment's seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate surrogate-agent data, pre-train one network per surrogate,
    /// and label the target evaluation set.
    Pretrain,
    /// Run the configured mode from pre-trained artifacts.
    Run {
        /// Override the mode in the experiment file.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Run the epsilon x f_th grid for every seed.
    Sweep,
    /// Recompute metrics of a saved model on a saved evaluation set.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        f_th: f64,
    },
    /// Compare realized failure rates of completed runs.
    Report,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "data_rich" => Ok(Mode::DataRich),
        "data_limited" => Ok(Mode::DataLimited),
        "random" => Ok(Mode::Random),
        _ => Err(format!("unknown mode {s:?}; expected data_rich, data_limited or random")),
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Missing(String),
    Runtime(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Missing(m) => write!(f, "missing input: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_error(e: Error) -> CliError {
    CliError::Config(e.to_string())
}

fn missing_or(e: Error, what: &Path) -> CliError {
    match &e {
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            CliError::Missing(format!("{}: {e}; run `irtest pretrain` first", what.display()))
        }
        _ => CliError::Runtime(e),
    }
}

/// Parse `args`, run the command, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("IRTEST_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("irtest: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Evaluate { model, eval, f_th } => cmd_evaluate(model, eval, *f_th),
        Command::Pretrain => {
            let ctx = Context::new(&cli.global)?;
            cmd_pretrain(&ctx)
        }
        Command::Run { mode } => {
            let mut ctx = Context::new(&cli.global)?;
            if let Some(m) = mode {
                ctx.exp.run.mode = *m;
                ctx.exp.validate().map_err(config_error)?;
            }
            cmd_run(&ctx)
        }
        Command::Sweep => {
            let ctx = Context::new(&cli.global)?;
            cmd_sweep(&ctx)
        }
        Command::Report => {
            let ctx = Context::new(&cli.global)?;
            cmd_report(&ctx)
        }
    }
}

struct Context {
    exp: ExperimentFile,
    out: PathBuf,
    seeds: Vec<u64>,
    jobs: usize,
    force: bool,
}

impl Context {
    fn new(g: &GlobalArgs) -> CliResult<Self> {
        let path = g
            .config
            .as_ref()
            .ok_or_else(|| CliError::Config("--config is required".into()))?;
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
        let exp = ExperimentFile::from_json(&text).map_err(config_error)?;
        let out = g
            .out
            .clone()
            .or_else(|| exp.output_dir.clone())
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set output_dir".into()))?;
        let seeds = match g.seed {
            Some(s) => vec![s],
            None => exp.seeds.clone(),
        };
        Ok(Self {
            exp,
            out,
            seeds,
            jobs: g.jobs.max(1),
            force: g.force,
        })
    }

    fn refuse_existing(&self, path: &Path) -> CliResult<()> {
        if path.exists() && !self.force {
            return Err(CliError::Config(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        Ok(())
    }

    fn artifacts(&self, seed: u64) -> CliResult<SeedArtifacts> {
        let dir = seed_dir(&self.out, seed);
        load_artifacts(&self.exp, &dir).map_err(|e| match e {
            Error::DimensionMismatch { .. } | Error::InvalidArgument(_) => config_error(e),
            other => missing_or(other, &dir),
        })
    }
}

fn cmd_pretrain(ctx: &Context) -> CliResult<()> {
    for &seed in &ctx.seeds {
        let dir = seed_dir(&ctx.out, seed);
        ctx.refuse_existing(&dir.join("pretrain_report.json"))?;
        let art = pretrain(&ctx.exp, seed)?;
        save_artifacts(&ctx.exp, &art, &dir)?;
        for m in &art.report.models {
            println!(
                "seed {seed} spm_{}: AP on surrogate agent {:.4}, AP on target {:.4}",
                m.index, m.ap_own, m.ap_target
            );
        }
    }
    Ok(())
}

fn run_one(ctx: &Context, art: &SeedArtifacts, config: &RunConfig, dir: &Path) -> CliResult<RunSummary> {
    let (model, result) = run(&ctx.exp, art, config)?;
    save_run(dir, &model, &result, config, ctx.exp.surrogates.len())?;
    Ok(RunSummary::new(&result, config))
}

fn cmd_run(ctx: &Context) -> CliResult<()> {
    for &seed in &ctx.seeds {
        let art = ctx.artifacts(seed)?;
        let config = ctx.exp.run_config(seed);
        let dir = seed_dir(&ctx.out, seed).join(config.mode.as_str());
        ctx.refuse_existing(&summary_path(&dir, seed))?;
        let s = run_one(ctx, &art, &config, &dir)?;
        println!(
            "seed {seed} {}: {} tests, {} failures, AP {:.4} -> {:.4}",
            config.mode.as_str(),
            s.tests,
            s.failures,
            s.initial_metrics.ap,
            s.final_metrics.ap
        );
    }
    Ok(())
}

/// `eps{e}_fth{f}`.
pub fn cell_name(epsilon: f64, f_th: f64) -> String {
    format!("eps{epsilon}_fth{f_th}")
}

fn cmd_sweep(ctx: &Context) -> CliResult<()> {
    let grid = ctx
        .exp
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("the experiment file has no `sweep` grid".into()))?;
    let root = ctx.out.join("sweep");
    let mut cells = Vec::new();
    for &e in &grid.epsilon {
        for &f in &grid.f_th {
            let mut probe = ctx.exp.run_config(0);
            probe.epsilon = e;
            probe.f_th = f;
            probe.validate().map_err(config_error)?;
            for &s in &ctx.seeds {
                cells.push((e, f, s));
            }
        }
    }
    let mut artifacts = std::collections::BTreeMap::new();
    for &s in &ctx.seeds {
        artifacts.insert(s, ctx.artifacts(s)?);
    }
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..ctx.jobs.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(e, f, s)) = cells.get(i) else { break };
                if failure.lock().expect("lock").is_some() {
                    break;
                }
                let dir = root.join(cell_name(e, f)).join(format!("seed_{s}"));
                if summary_path(&dir, s).exists() && !ctx.force {
                    info!("skipping completed cell {} seed {s}", cell_name(e, f));
                    continue;
                }
                let mut config = ctx.exp.run_config(s);
                config.epsilon = e;
                config.f_th = f;
                if let Err(err) = run_one(ctx, &artifacts[&s], &config, &dir) {
                    *failure.lock().expect("lock") = Some(err);
                    break;
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }
    let rows = collect_sweep(&root, &grid.epsilon, &grid.f_th, &ctx.seeds)?;
    write_sweep_tables(&root, &rows)?;
    println!(
        "{} runs over {} cells; tables in {}",
        rows.len(),
        grid.epsilon.len() * grid.f_th.len(),
        root.display()
    );
    Ok(())
}

/// One sweep run, with metrics at the start, middle and end of the budget.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub f_th: f64,
    pub seed: u64,
    /// `[start, mid, final]` per metric.
    pub ap: [f64; 3],
    pub precision_at_r50: [f64; 3],
    pub op_precision: [Option<f64>; 3],
    pub op_recall: [f64; 3],
    pub realized_failure_rate: f64,
}

pub const SWEEP_METRICS: [&str; 4] = ["ap", "precision_at_r50", "op_precision", "op_recall"];

fn collect_sweep(root: &Path, eps: &[f64], fth: &[f64], seeds: &[u64]) -> CliResult<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &e in eps {
        for &f in fth {
            for &s in seeds {
                let dir = root.join(cell_name(e, f)).join(format!("seed_{s}"));
                let logs = read_log_rows(&logs_path(&dir, s)).map_err(|err| missing_or(err, &dir))?;
                let pick = |k: usize| &logs[k];
                let mid = logs
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, r)| r.test_index.abs_diff(logs.last().map_or(0, |l| l.test_index) / 2))
                    .map(|(k, _)| k)
                    .unwrap_or(0);
                let idx = [0, mid, logs.len() - 1];
                let last = pick(idx[2]);
                rows.push(SweepRow {
                    epsilon: e,
                    f_th: f,
                    seed: s,
                    ap: idx.map(|k| pick(k).ap),
                    precision_at_r50: idx.map(|k| pick(k).precision_at_r50),
                    op_precision: idx.map(|k| pick(k).op_precision),
                    op_recall: idx.map(|k| pick(k).op_recall),
                    realized_failure_rate: last.realized_failure_rate.unwrap_or(0.0),
                });
            }
        }
    }
    Ok(rows)
}

/// A parsed row of a run's log CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub test_index: usize,
    pub cum_failures: usize,
    pub realized_failure_rate: Option<f64>,
    pub ap: f64,
    pub precision_at_r50: f64,
    pub op_precision: Option<f64>,
    pub op_recall: f64,
    pub critical_mass: f64,
    pub alpha: Vec<Option<f64>>,
}

pub fn read_log_rows(path: &Path) -> crate::Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    let num = |s: &str| -> crate::Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number {s:?}"))) };
    let opt = |s: &str| -> crate::Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(LogRow {
            test_index: num(&rec[0])? as usize,
            cum_failures: num(&rec[1])? as usize,
            realized_failure_rate: opt(&rec[2])?,
            ap: num(&rec[3])?,
            precision_at_r50: num(&rec[4])?,
            op_precision: opt(&rec[5])?,
            op_recall: num(&rec[6])?,
            critical_mass: num(&rec[7])?,
            alpha: (8..width).map(|k| opt(&rec[k])).collect::<crate::Result<_>>()?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Empty("log rows"));
    }
    Ok(rows)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Write `sweep_wide.csv` (one row per run) and `sweep_aggregate.csv`
/// (mean and standard deviation of the final metrics per cell).
pub fn write_sweep_tables(root: &Path, rows: &[SweepRow]) -> crate::Result<()> {
    fs::create_dir_all(root)?;
    let mut w = csv::Writer::from_path(root.join("sweep_wide.csv"))?;
    let mut header = vec!["epsilon".to_string(), "f_th".into(), "seed".into()];
    for m in SWEEP_METRICS {
        for at in ["0", "mid", "final"] {
            header.push(format!("{m}_{at}"));
        }
    }
    header.push("realized_failure_rate".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.epsilon.to_string(), r.f_th.to_string(), r.seed.to_string()];
        rec.extend(r.ap.iter().map(f64::to_string));
        rec.extend(r.precision_at_r50.iter().map(f64::to_string));
        rec.extend(r.op_precision.iter().map(|v| fmt_opt(*v)));
        rec.extend(r.op_recall.iter().map(f64::to_string));
        rec.push(r.realized_failure_rate.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(root.join("sweep_aggregate.csv"))?;
    let mut header = vec!["epsilon".to_string(), "f_th".into(), "runs".into()];
    for m in SWEEP_METRICS.iter().chain(&["realized_failure_rate"]) {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_sd"));
    }
    w.write_record(&header)?;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        if !cells.contains(&(r.epsilon, r.f_th)) {
            cells.push((r.epsilon, r.f_th));
        }
    }
    for (e, f) in cells {
        let group: Vec<&SweepRow> = rows.iter().filter(|r| r.epsilon == e && r.f_th == f).collect();
        let columns: [Vec<f64>; 5] = [
            group.iter().map(|r| r.ap[2]).collect(),
            group.iter().map(|r| r.precision_at_r50[2]).collect(),
            group.iter().filter_map(|r| r.op_precision[2]).collect(),
            group.iter().map(|r| r.op_recall[2]).collect(),
            group.iter().map(|r| r.realized_failure_rate).collect(),
        ];
        let mut rec = vec![e.to_string(), f.to_string(), group.len().to_string()];
        for c in &columns {
            let (m, s) = mean_sd(c);
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_evaluate(model: &Path, eval: &Path, f_th: f64) -> CliResult<()> {
    if !(0.0..=1.0).contains(&f_th) {
        return Err(CliError::Config(format!("f_th {f_th} outside [0, 1]")));
    }
    let m = spm::io::load(model).map_err(|e| missing_or(e, model))?;
    let data = EvaluationDataset::load(eval).map_err(|e| missing_or(e, eval))?;
    if data.data.dim() != m.input_dim() {
        return Err(CliError::Config(format!(
            "model expects dimension {} but the evaluation set has {}",
            m.input_dim(),
            data.data.dim()
        )));
    }
    let scores = m.predict_batch(&data.states());
    let report = metrics_from_scores(&scores, data.labels(), f_th)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?);
    Ok(())
}

fn cmd_report(ctx: &Context) -> CliResult<()> {
    let mut table = Vec::new();
    for &seed in &ctx.seeds {
        let mut outcomes = Vec::new();
        for mode in [Mode::Random, Mode::DataRich, Mode::DataLimited] {
            let path = summary_path(&seed_dir(&ctx.out, seed).join(mode.as_str()), seed);
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(Error::from)?;
            let s: RunSummary = serde_json::from_str(&text).map_err(Error::from)?;
            outcomes.push(RunOutcome {
                method: mode.as_str().to_string(),
                tests: s.tests,
                failures: s.failures,
                final_metrics: s.final_metrics,
            });
        }
        if outcomes.is_empty() {
            return Err(CliError::Missing(format!("no completed runs for seed {seed}")));
        }
        let rows = failure_rate_report(&outcomes).map_err(config_error)?;
        table.extend(rows.into_iter().map(|r| (seed, r)));
    }
    let path = ctx.out.join("failure_rates.csv");
    let mut w = csv::Writer::from_path(&path).map_err(Error::from)?;
    w.write_record([
        "seed",
        "method",
        "tests",
        "failures",
        "realized_failure_rate",
        "std_error",
        "op_precision",
        "precision_at_r50",
    ])
    .map_err(Error::from)?;
    for (seed, r) in &table {
        println!(
            "seed {seed} {:>12}: failure rate {:.4} +- {:.4}",
            r.method, r.realized_failure_rate, r.std_error
        );
        w.write_record([
            seed.to_string(),
            r.method.clone(),
            r.tests.to_string(),
            r.failures.to_string(),
            r.realized_failure_rate.to_string(),
            r.std_error.to_string(),
            fmt_opt(r.op_precision),
            r.precision_at_r50.to_string(),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    if table.is_empty() {
        warn!("empty report");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_parsing() {
        assert_eq!(parse_mode("random").unwrap(), Mode::Random);
        assert!(parse_mode("fast").is_err());
    }

    #[test]
    fn cell_names_are_stable() {
        assert_eq!(cell_name(0.05, 0.5), "eps0.05_fth0.5");
        assert_eq!(cell_name(0.0, 0.3), "eps0_fth0.3");
    }

    #[test]
    fn mean_and_sample_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_sd(&[4.0]), (4.0, 0.0));
    }

    #[test]
    fn missing_config_is_a_config_error() {
        assert_eq!(main_with_args(["irtest", "pretrain"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["irtest", "bogus-command"]), EXIT_CONFIG);
    }
}
