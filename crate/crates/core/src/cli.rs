//! The `lsde` command-line tool.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_ndjson, write_ndjson, Record, Split};
use crate::metrics::{aggregate, read_forecasts, score_rows, write_forecasts, write_report, ForecastRow};
use crate::model::{forecast_record, summarize, Checkpoint, Model, ModelConfig, ModelKind};
use crate::physionet::ingest_dir;
use crate::pkpd::{generate_cohort, CohortConfig, LatentTruth, SIM_DT};
use crate::training::{train, TrainConfig, BEST_FILE, LAST_FILE};
use crate::Error;

pub const DATASET_FILE: &str = "dataset.ndjson";
pub const TRUTH_FILE: &str = "truth.ndjson";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.csv";
pub const FORECAST_FILE: &str = "forecasts.csv";
pub const INGEST_REPORT_FILE: &str = "ingest_report.json";
pub const NORMALIZER_FILE: &str = "normalizer.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLevel {
    Low,
    Moderate,
    High,
}

impl NoiseLevel {
    pub fn sigma(self) -> f64 {
        match self {
            NoiseLevel::Low => 0.01,
            NoiseLevel::Moderate => 0.1,
            NoiseLevel::High => 0.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseLevel::Low => "low",
            NoiseLevel::Moderate => "moderate",
            NoiseLevel::High => "high",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum MissingLevel {
    #[value(name = "0")]
    #[serde(rename = "0")]
    None,
    #[value(name = "20")]
    #[serde(rename = "20")]
    P20,
    #[value(name = "50")]
    #[serde(rename = "50")]
    P50,
    #[value(name = "80")]
    #[serde(rename = "80")]
    P80,
}

impl MissingLevel {
    pub fn fraction(self) -> f64 {
        match self {
            MissingLevel::None => 0.0,
            MissingLevel::P20 => 0.2,
            MissingLevel::P50 => 0.5,
            MissingLevel::P80 => 0.8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MissingLevel::None => "0",
            MissingLevel::P20 => "20",
            MissingLevel::P50 => "50",
            MissingLevel::P80 => "80",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Noise,
    Missing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Val,
    Test,
    All,
}

impl SplitChoice {
    fn select(self, records: Vec<Record>) -> Vec<Record> {
        let want = match self {
            SplitChoice::Train => Split::Train,
            SplitChoice::Val => Split::Val,
            SplitChoice::Test => Split::Test,
            SplitChoice::All => return records,
        };
        records.into_iter().filter(|r| r.split == want).collect()
    }
}

#[derive(Debug, Parser)]
#[command(name = "lsde", version, about = "Latent SDE forecasting for irregular clinical time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic PKPD cohort.
    Simulate(SimulateArgs),
    /// Convert a directory of PhysioNet 2012 record files.
    Ingest(IngestArgs),
    /// Train a latent SDE, latent ODE or LSTM.
    Train(TrainArgs),
    /// Sample forecasts over each record's forecast window.
    Forecast(ForecastArgs),
    /// Score forecast files into a metric report.
    Evaluate(EvaluateArgs),
    /// Simulate, train, forecast and evaluate across a robustness axis.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub noise: Option<NoiseLevel>,
    #[arg(long, value_enum)]
    pub missing: Option<MissingLevel>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateConfig {
    pub n: usize,
    pub noise: NoiseLevel,
    pub missing: MissingLevel,
    pub seed: u64,
    pub dt: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { n: 200, noise: NoiseLevel::Moderate, missing: MissingLevel::P50, seed: 0, dt: SIM_DT }
    }
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub records_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub n_samples: usize,
    /// Defaults to the checkpoint's training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    pub split: SplitChoice,
    /// Label written to the `condition` column.
    #[arg(long, default_value = "")]
    pub condition: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub forecasts: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "sde,ode")]
    pub models: Vec<ModelKind>,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Noise level held fixed on the missing axis.
    #[arg(long, value_enum, default_value_t = NoiseLevel::Moderate)]
    pub noise: NoiseLevel,
    /// Missing level held fixed on the noise axis.
    #[arg(long, value_enum, default_value_t = MissingLevel::P50)]
    pub missing: MissingLevel,
    /// Training config passed to every run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Binary used for the per-run processes (defaults to the running one).
    #[arg(long, hide = true)]
    pub exe: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Ingest(a) => ingest(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Forecast(a) => forecast_cmd(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Sweep(a) => sweep(a),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_out(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_truth(path: &Path, truth: &[LatentTruth]) -> Result<(), Error> {
    let mut text = String::new();
    for t in truth {
        text.push_str(&serde_json::to_string(t)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Resolved<'a, T: Serialize> {
    command: &'a str,
    #[serde(flatten)]
    settings: T,
}

fn simulate(a: SimulateArgs) -> Result<(), Error> {
    let mut cfg: SimulateConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SimulateConfig::default(),
    };
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(x) = a.noise {
        cfg.noise = x;
    }
    if let Some(x) = a.missing {
        cfg.missing = x;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let cohort = CohortConfig { sigma_proc: cfg.noise.sigma(), missing_frac: cfg.missing.fraction(), seed: cfg.seed, dt: cfg.dt };
    let (records, truth) = generate_cohort(cfg.n, &cohort)?;
    prepare_out(&a.out)?;
    write_ndjson(&a.out.join(DATASET_FILE), &records)?;
    write_truth(&a.out.join(TRUTH_FILE), &truth)?;
    write_json(&a.out.join(CONFIG_FILE), &Resolved { command: "simulate", settings: &cfg })?;

    let count = |s: Split| records.iter().filter(|r| r.split == s).count();
    let points: usize = records.iter().map(|r| r.observed_count("cell_count")).sum();
    let final_volume: f64 = truth.iter().map(|t| t.tumor_volume.last().copied().unwrap_or(0.0)).sum::<f64>() / truth.len() as f64;
    println!(
        "simulated {} patients (sigma {}, missing {}%): {} train / {} val / {} test, {:.1} observed weeks per patient, mean final tumour volume {:.2}",
        records.len(),
        cfg.noise.sigma(),
        cfg.missing.name(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        points as f64 / records.len() as f64,
        final_volume
    );
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<(), Error> {
    let out = ingest_dir(&a.records_dir)?;
    prepare_out(&a.out)?;
    write_ndjson(&a.out.join(DATASET_FILE), &out.records)?;
    write_json(&a.out.join(INGEST_REPORT_FILE), &out.report)?;
    write_json(&a.out.join(NORMALIZER_FILE), &out.stats)?;
    #[derive(Serialize)]
    struct IngestSettings<'a> {
        records_dir: &'a Path,
    }
    write_json(&a.out.join(CONFIG_FILE), &Resolved { command: "ingest", settings: IngestSettings { records_dir: &a.records_dir } })?;
    let r = &out.report;
    println!(
        "{} files: {} parsed, {} failed, {} excluded, {} retained; {} implausible values dropped, {} unknown parameters skipped{}",
        r.files,
        r.parsed,
        r.failed.len(),
        r.excluded.len(),
        r.retained,
        r.implausible_dropped,
        r.unknown_parameters,
        if r.normalizer_fallback { "; normaliser fitted on all records (empty training split)" } else { "" }
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSettings<'a> {
    model_kind: ModelKind,
    data: &'a Path,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn train_cmd(a: TrainArgs) -> Result<(), Error> {
    let mut file: TrainFile = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    if let Some(s) = a.seed {
        file.train.seed = s;
    }
    if let Some(e) = a.epochs {
        file.train.epochs = e;
    }
    if let Some(t) = a.threads {
        file.train.threads = t;
    }
    // Wall-clock timing would break byte-identical reruns.
    file.train.record_wall_time = false;
    file.model.validate()?;
    file.train.validate()?;
    let records = read_ndjson(&a.data)?;
    prepare_out(&a.out)?;
    write_json(
        &a.out.join(CONFIG_FILE),
        &Resolved {
            command: "train",
            settings: TrainSettings { model_kind: a.model, data: &a.data, model: &file.model, train: &file.train },
        },
    )?;
    let result = train(a.model, &file.model, &records, &file.train, Some(&a.out))?;
    let normalizer = a.data.parent().map(|d| d.join(NORMALIZER_FILE)).filter(|p| p.is_file());
    if let Some(p) = normalizer {
        let stats: serde_json::Value = read_json(&p)?;
        for name in [BEST_FILE, LAST_FILE] {
            let path = a.out.join(name);
            let mut ck = Checkpoint::load(&path)?;
            ck.normalizer = Some(stats.clone());
            ck.save(&path)?;
        }
    }
    let last = result.log.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs ({} parameters): objective {:.6}, best validation loss {:.6}",
        a.model.name(),
        result.log.len(),
        result.model.param_count(),
        last.objective,
        result.best.val_loss.unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct ForecastSettings<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    n_samples: usize,
    seed: u64,
    split: SplitChoice,
    condition: &'a str,
}

fn forecast_cmd(a: ForecastArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = Model::from_checkpoint(&ck)?;
    let seed = a.seed.unwrap_or(ck.seed);
    let records = a.split.select(read_ndjson(&a.data)?);
    if records.is_empty() {
        return Err(Error::Dataset(format!("{}: no records in the selected split", a.data.display())));
    }
    let mut rows = Vec::new();
    let mut skipped = 0;
    for r in &records {
        match forecast_record(&model, r, a.n_samples, seed) {
            Ok(d) => rows.extend(summarize(&d, model.kind.name(), &a.condition, seed)?),
            Err(Error::Dataset(msg)) => {
                log::warn!("{msg}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    prepare_out(&a.out)?;
    write_forecasts(&a.out.join(FORECAST_FILE), &rows)?;
    write_json(
        &a.out.join(CONFIG_FILE),
        &Resolved {
            command: "forecast",
            settings: ForecastSettings {
                ckpt: &a.ckpt,
                data: &a.data,
                n_samples: a.n_samples,
                seed,
                split: a.split,
                condition: &a.condition,
            },
        },
    )?;
    println!("{} forecast rows for {} records ({} skipped)", rows.len(), records.len() - skipped, skipped);
    Ok(())
}

/// Scores forecast rows grouped by `(model, condition, seed)` and aggregates over seeds.
pub fn evaluate_rows(rows: &[ForecastRow]) -> Result<Vec<crate::metrics::ReportRow>, Error> {
    let mut groups: BTreeMap<(String, String, u64), Vec<ForecastRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.model.clone(), r.condition.clone(), r.seed)).or_default().push(r.clone());
    }
    let mut scored = Vec::with_capacity(groups.len());
    for ((model, condition, seed), rows) in groups {
        let m = score_rows(&rows).map_err(|e| Error::Numerical(e.to_string()))?;
        scored.push((model, condition, seed, m));
    }
    Ok(aggregate(&scored))
}

fn evaluate(a: EvaluateArgs) -> Result<(), Error> {
    let mut rows = Vec::new();
    for p in &a.forecasts {
        rows.extend(read_forecasts(p)?);
    }
    let report = evaluate_rows(&rows)?;
    prepare_out(&a.out)?;
    write_report(&a.out.join(REPORT_FILE), &report)?;
    #[derive(Serialize)]
    struct EvaluateSettings<'a> {
        forecasts: &'a [PathBuf],
    }
    write_json(&a.out.join(CONFIG_FILE), &Resolved { command: "evaluate", settings: EvaluateSettings { forecasts: &a.forecasts } })?;
    println!("{} report rows from {} forecast rows", report.len(), rows.len());
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
struct SweepJob {
    condition: String,
    seed: u64,
    noise: NoiseLevel,
    missing: MissingLevel,
    dir: PathBuf,
}

fn run_child(exe: &Path, args: &[OsString]) -> Result<(), Error> {
    log::info!("running {} {:?}", exe.display(), args);
    let status = Command::new(exe).args(args).status().map_err(|e| Error::io(exe, e))?;
    match status.code() {
        Some(0) => Ok(()),
        Some(3) => Err(Error::Divergence { epoch: 0, reason: format!("child run {args:?} diverged") }),
        code => Err(Error::Config(format!("child run {args:?} failed with {code:?}"))),
    }
}

fn os(items: &[&dyn AsRef<std::ffi::OsStr>]) -> Vec<OsString> {
    items.iter().map(|s| s.as_ref().to_os_string()).collect()
}

fn run_job(exe: &Path, job: &SweepJob, a: &SweepArgs) -> Result<Vec<PathBuf>, Error> {
    let data_dir = job.dir.join("data");
    let seed = job.seed.to_string();
    let n = a.n.to_string();
    run_child(
        exe,
        &os(&[&"simulate", &"--n", &n, &"--noise", &job.noise.name(), &"--missing", &job.missing.name(), &"--seed", &seed, &"--out", &data_dir]),
    )?;
    let data = data_dir.join(DATASET_FILE);
    let mut outputs = Vec::new();
    for m in &a.models {
        let run_dir = job.dir.join(m.name());
        let mut args = os(&[&"train", &"--model", &m.name(), &"--data", &data, &"--seed", &seed, &"--out", &run_dir]);
        if let Some(c) = &a.config {
            args.extend(os(&[&"--config", c]));
        }
        run_child(exe, &args)?;
        let samples = a.n_samples.to_string();
        run_child(
            exe,
            &os(&[
                &"forecast",
                &"--ckpt",
                &run_dir.join(BEST_FILE),
                &"--data",
                &data,
                &"--n-samples",
                &samples,
                &"--condition",
                &job.condition,
                &"--out",
                &run_dir.join("forecast"),
            ]),
        )?;
        outputs.push(run_dir.join("forecast").join(FORECAST_FILE));
    }
    Ok(outputs)
}

fn sweep(a: SweepArgs) -> Result<(), Error> {
    if a.seeds == 0 || a.parallel == 0 || a.models.is_empty() {
        return Err(Error::Config("sweep needs at least one seed, model and worker".into()));
    }
    let exe = match &a.exe {
        Some(p) => p.clone(),
        None => std::env::current_exe().map_err(|e| Error::io("current executable", e))?,
    };
    let mut jobs = Vec::new();
    let levels: Vec<(String, NoiseLevel, MissingLevel)> = match a.axis {
        SweepAxis::Noise => [NoiseLevel::Low, NoiseLevel::Moderate, NoiseLevel::High]
            .into_iter()
            .map(|l| (format!("noise={}", l.name()), l, a.missing))
            .collect(),
        SweepAxis::Missing => [MissingLevel::P20, MissingLevel::P50, MissingLevel::P80]
            .into_iter()
            .map(|l| (format!("missing={}", l.name()), a.noise, l))
            .collect(),
    };
    for (condition, noise, missing) in &levels {
        for seed in 0..a.seeds {
            let dir = a.out.join(condition.replace('=', "_")).join(format!("seed{seed}"));
            jobs.push(SweepJob { condition: condition.clone(), seed, noise: *noise, missing: *missing, dir });
        }
    }
    prepare_out(&a.out)?;
    #[derive(Serialize)]
    struct SweepSettings<'a> {
        axis: SweepAxis,
        seeds: u64,
        models: &'a [ModelKind],
        n: usize,
        n_samples: usize,
        config: &'a Option<PathBuf>,
        jobs: &'a [SweepJob],
    }
    write_json(
        &a.out.join(CONFIG_FILE),
        &Resolved {
            command: "sweep",
            settings: SweepSettings {
                axis: a.axis,
                seeds: a.seeds,
                models: &a.models,
                n: a.n,
                n_samples: a.n_samples,
                config: &a.config,
                jobs: &jobs,
            },
        },
    )?;
    // Workers take jobs round-robin; results are reassembled in job order.
    let workers = a.parallel.min(jobs.len());
    let mut results: Vec<Option<Result<Vec<PathBuf>, Error>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|sc| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (exe, jobs, a) = (&exe, &jobs, &a);
                sc.spawn(move || {
                    (w..jobs.len()).step_by(workers).map(|i| (i, run_job(exe, &jobs[i], a))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut files = Vec::new();
    for r in results {
        files.extend(r.expect("every job ran")?);
    }
    let mut rows = Vec::new();
    for p in &files {
        rows.extend(read_forecasts(p)?);
    }
    let report = evaluate_rows(&rows)?;
    write_report(&a.out.join(REPORT_FILE), &report)?;
    println!("{} runs, {} report rows", jobs.len() * a.models.len(), report.len());
    Ok(())
}
