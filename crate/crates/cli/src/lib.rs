//! Experiment runner: config resolution, metric export and run manifests.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use clap::Parser;
use serde::Serialize;

use pofl_core::trainer::{self, ExperimentSummary};
use pofl_core::{
    DatasetSpec, ExperimentConfig, ExperimentResult, PartitionSpec, PolicyKind, SeedBundle,
    TrainingData,
};

pub const CSV_HEADER: &str = "trial,round,train_loss,test_acc,e_com_analytic,e_com_empirical,e_var_mb,e_var_full,a_t,gamma_T,scheduled_ids";

/// Simulate federated learning with probabilistic over-the-air scheduling.
///
/// Values come from the built-in defaults, then the config file, then flags.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "pofl", version)]
pub struct Cli {
    /// Flat TOML config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// proposed | importance | channel | deterministic | noise_free
    #[arg(long)]
    pub policy: Option<PolicyKind>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Receiver noise power in watts
    #[arg(long)]
    pub noise_power: Option<f64>,
    #[arg(long)]
    pub num_scheduled: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub devices: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed_data: Option<u64>,
    #[arg(long)]
    pub seed_channel: Option<u64>,
    #[arg(long)]
    pub seed_sched: Option<u64>,
    #[arg(long)]
    pub seed_noise: Option<u64>,
    /// mnist:DIR or synthetic
    #[arg(long)]
    pub dataset: Option<DatasetSpec>,
    /// shards:K or classes:C
    #[arg(long)]
    pub partition: Option<PartitionSpec>,
    /// Trials run concurrently
    #[arg(long)]
    pub parallel_trials: Option<usize>,
    /// Compute exact training loss and full-gradient update variance each round
    #[arg(long)]
    pub full_diagnostics: Option<bool>,
    /// Run once per listed alpha, e.g. 0.001,0.01,0.1,1,10,100
    #[arg(long, value_delimiter = ',')]
    pub sweep_alpha: Vec<f64>,
    /// Output directory
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
}

/// Reads a flat TOML config. Unknown keys are rejected by name.
pub fn read_config_file(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    Ok(toml::from_str(text)?)
}

/// Defaults, then the config file, then flags; the result is validated.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => read_config_file(path)?,
        None => ExperimentConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident),*) => {
            $(if let Some(v) = cli.$field.clone() { cfg.$field = v; })*
        };
    }
    apply!(
        policy,
        alpha,
        noise_power,
        num_scheduled,
        rounds,
        devices,
        trials,
        seed_data,
        seed_channel,
        seed_sched,
        seed_noise,
        dataset,
        partition,
        parallel_trials,
        full_diagnostics
    );
    cfg.validate()?;
    Ok(cfg)
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

/// Writes one CSV row per (trial, round), trials in index order.
pub fn write_csv<W: Write>(result: &ExperimentResult, mut out: W) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for trial in &result.trials {
        for m in &trial.metrics {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                trial.trial,
                m.round,
                m.train_loss,
                m.test_accuracy,
                m.e_com_analytic,
                m.e_com_empirical,
                m.e_var_mb,
                m.e_var_full.unwrap_or(f64::NAN),
                m.a_t,
                m.gamma_t,
                join_ids(&m.scheduled)
            )?;
        }
    }
    out.flush()
}

#[derive(Debug, Serialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_round: usize,
    pub final_train_loss: f64,
    pub final_gamma_t: f64,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub policy: PolicyKind,
    pub alpha: f64,
    pub noise_power: f64,
    pub num_scheduled: usize,
    pub overall: ExperimentSummary,
    pub trials: Vec<TrialSummary>,
}

pub fn summarize(config: &ExperimentConfig, result: &ExperimentResult) -> RunSummary {
    RunSummary {
        policy: config.policy,
        alpha: config.alpha,
        noise_power: config.noise_power,
        num_scheduled: config.num_scheduled,
        overall: result.summary.clone(),
        trials: result
            .trials
            .iter()
            .map(|t| {
                let last = t.metrics.last();
                TrialSummary {
                    trial: t.trial,
                    final_accuracy: t.final_accuracy,
                    best_accuracy: t.best_accuracy,
                    best_round: t.best_round,
                    final_train_loss: last.map_or(f64::NAN, |m| m.train_loss),
                    final_gamma_t: last.map_or(0.0, |m| m.gamma_t),
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

/// Record of one invocation, written before the run and finalized after it.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub artifact: &'static str,
    pub version: &'static str,
    pub status: RunStatus,
    pub config: ExperimentConfig,
    pub seeds: SeedBundle,
    pub sweep_alpha: Vec<f64>,
    pub started_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub error: Option<String>,
    /// Files written so far, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig, sweep_alpha: &[f64]) -> Self {
        RunManifest {
            artifact: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            status: RunStatus::Running,
            config: config.clone(),
            seeds: config.seeds(),
            sweep_alpha: sweep_alpha.to_vec(),
            started_at: Utc::now(),
            finished_at: None,
            error: None,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CSV_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Runs one configuration and writes `metrics.csv` and `summary.json` under
/// `dir`. Returns the written paths relative to `root`.
fn run_one(
    config: &ExperimentConfig,
    data: &TrainingData,
    root: &Path,
    sub: &str,
) -> Result<(RunSummary, Vec<String>)> {
    let dir = root.join(sub);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let result = trainer::run_experiment(config, data)?;
    let csv_path = dir.join(CSV_FILE);
    let file =
        fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    write_csv(&result, io::BufWriter::new(file))?;
    let summary = summarize(config, &result);
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    let rel = |name: &str| {
        if sub.is_empty() {
            name.to_string()
        } else {
            format!("{sub}/{name}")
        }
    };
    Ok((summary, vec![rel(CSV_FILE), rel(SUMMARY_FILE)]))
}

#[derive(Debug, Serialize)]
struct SweepRow {
    alpha: f64,
    best_accuracy_mean: f64,
    best_accuracy_stderr: f64,
    final_accuracy_mean: f64,
    final_accuracy_stderr: f64,
}

fn execute(
    config: &ExperimentConfig,
    sweep: &[f64],
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let data = TrainingData::load(&config.dataset, config.seed_data)?;
    if sweep.is_empty() {
        let (summary, files) = run_one(config, &data, out, "")?;
        manifest.outputs.extend(files);
        let acc = summary.overall.best_accuracy;
        println!(
            "best test accuracy {:.4} ± {:.4} (stderr)",
            acc.mean, acc.stderr
        );
        return Ok(());
    }
    let mut rows = Vec::with_capacity(sweep.len());
    println!(
        "{:>10}  {:>10}  {:>8}  {:>10}",
        "alpha", "best_acc", "stderr", "final_acc"
    );
    for &alpha in sweep {
        let mut cfg = config.clone();
        cfg.alpha = alpha;
        cfg.validate()?;
        let (summary, files) = run_one(&cfg, &data, out, &format!("alpha_{alpha}"))?;
        manifest.outputs.extend(files);
        let (b, f) = (
            summary.overall.best_accuracy,
            summary.overall.final_accuracy,
        );
        println!(
            "{alpha:>10}  {:>10.4}  {:>8.4}  {:>10.4}",
            b.mean, b.stderr, f.mean
        );
        rows.push(SweepRow {
            alpha,
            best_accuracy_mean: b.mean,
            best_accuracy_stderr: b.stderr,
            final_accuracy_mean: f.mean,
            final_accuracy_stderr: f.stderr,
        });
    }
    write_json(&out.join(SWEEP_FILE), &rows)?;
    manifest.outputs.push(SWEEP_FILE.to_string());
    Ok(())
}

/// Resolves the config, runs it and writes every artifact under `cli.out`.
pub fn run(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    for &alpha in &cli.sweep_alpha {
        anyhow::ensure!(
            alpha > 0.0 && alpha.is_finite(),
            "sweep alpha must be positive, got {alpha}"
        );
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut manifest = RunManifest::new(&config, &cli.sweep_alpha);
    manifest.write(&cli.out)?;
    manifest.outputs.push(MANIFEST_FILE.to_string());

    let outcome = execute(&config, &cli.sweep_alpha, &cli.out, &mut manifest);
    manifest.finished_at = Some(Utc::now());
    match &outcome {
        Ok(()) => manifest.status = RunStatus::Completed,
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.error = Some(format!("{e:#}"));
        }
    }
    manifest.write(&cli.out)?;
    outcome
}
