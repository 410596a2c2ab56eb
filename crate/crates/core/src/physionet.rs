//! PhysioNet/CinC 2012 ICU records.
//!
//! Each input file is a `Time,Parameter,Value` CSV with `hh:mm` times since
//! admission. The leading block of `00:00` rows holds the general descriptors
//! (RecordID, Age, Gender, Height, ICUType, Weight); `-1` marks a missing
//! descriptor. Heart rate, invasive MAP and temperature become the targets,
//! with the first 24 h as the observation window and 24–48 h as the forecast
//! window. A sample at exactly 24:00 belongs to the observation window.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};


use crate::dataset::{Record, Split, VariableInfo, VariableKind, SCHEMA_VERSION};
use crate::sde::ControlSignal;
use crate::Error;

pub const HEADER: &str = "Time,Parameter,Value";
pub const OBS_WINDOW_MIN: u32 = 24 * 60;
pub const STAY_MIN: u32 = 48 * 60;
pub const TARGETS: [&str; 3] = ["HR", "MAP", "Temp"];

pub const DESCRIPTORS: [&str; 6] = ["RecordID", "Age", "Gender", "Height", "ICUType", "Weight"];

pub const TIME_SERIES: [&str; 37] = [
    "Albumin", "ALP", "ALT", "AST", "Bilirubin", "BUN", "Cholesterol", "Creatinine", "DiasABP", "FiO2",
    "GCS", "Glucose", "HCO3", "HCT", "HR", "K", "Lactate", "Mg", "MAP", "MechVent", "Na", "NIDiasABP",
    "NIMAP", "NISysABP", "PaCO2", "PaO2", "pH", "Platelets", "RespRate", "SaO2", "SysABP", "Temp",
    "TroponinI", "TroponinT", "Urine", "WBC", "Weight",
];

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("line {line}: malformed time {text:?}")]
    MalformedTime { line: usize, text: String },
    #[error("line {line}: malformed row {text:?}")]
    MalformedRow { line: usize, text: String },
    #[error("missing header {HEADER:?}")]
    MissingHeader,
    #[error("first data row must carry RecordID")]
    MissingRecordId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRow {
    pub minutes: u32,
    pub parameter: String,
    pub value: f64,
}

impl RawRow {
    pub fn hours(&self) -> f64 {
        f64::from(self.minutes) / 60.0
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Descriptors {
    pub age: Option<f64>,
    /// 1 = male, 0 = female.
    pub gender: Option<f64>,
    pub height: Option<f64>,
    pub icu_type: Option<f64>,
    pub weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawRecord {
    pub record_id: String,
    pub descriptors: Descriptors,
    /// Time-series rows in file order.
    pub rows: Vec<RawRow>,
    pub unknown_skipped: usize,
}

pub fn parse_time(text: &str) -> Option<u32> {
    let (h, m) = text.trim().split_once(':')?;
    if h.is_empty() || m.len() != 2 || !h.bytes().chain(m.bytes()).all(|b| b.is_ascii_digit()) {
        return None;
    }
    let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
    let total = h * 60 + m;
    (m < 60 && total <= STAY_MIN).then_some(total)
}

pub fn format_time(minutes: u32) -> String {
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

fn descriptor_value(v: f64) -> Option<f64> {
    (v != -1.0).then_some(v)
}

pub fn parse_record(text: &str) -> Result<RawRecord, IngestError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == HEADER => {}
        _ => return Err(IngestError::MissingHeader),
    }
    let mut record_id = None;
    let mut desc = Descriptors::default();
    let mut rows = Vec::new();
    let mut unknown = 0;
    let mut in_descriptors = true;
    for (i, line) in lines {
        let line_no = i + 1;
        let mut parts = line.trim().splitn(3, ',');
        let (Some(t), Some(name), Some(v)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(IngestError::MalformedRow { line: line_no, text: line.to_string() });
        };
        let minutes =
            parse_time(t).ok_or_else(|| IngestError::MalformedTime { line: line_no, text: t.to_string() })?;
        let value: f64 =
            v.trim().parse().map_err(|_| IngestError::MalformedRow { line: line_no, text: line.to_string() })?;
        if record_id.is_none() && name != "RecordID" {
            return Err(IngestError::MissingRecordId);
        }
        let is_descriptor = DESCRIPTORS.contains(&name) && (name != "Weight" || (in_descriptors && minutes == 0));
        if is_descriptor {
            match name {
                "RecordID" => record_id = Some(v.trim().to_string()),
                "Age" => desc.age = descriptor_value(value),
                "Gender" => desc.gender = descriptor_value(value),
                "Height" => desc.height = descriptor_value(value),
                "ICUType" => desc.icu_type = descriptor_value(value),
                _ => desc.weight = descriptor_value(value),
            }
            continue;
        }
        in_descriptors = false;
        if !TIME_SERIES.contains(&name) {
            warn!("record {}: line {line_no}: unknown parameter {name:?} skipped", record_id.as_deref().unwrap_or("?"));
            unknown += 1;
            continue;
        }
        rows.push(RawRow { minutes, parameter: name.to_string(), value });
    }
    let record_id = record_id.ok_or(IngestError::MissingRecordId)?;
    Ok(RawRecord { record_id, descriptors: desc, rows, unknown_skipped: unknown })
}

impl RawRecord {
    /// Serialises back to the challenge format; [`parse_record`] inverts it.
    pub fn to_text(&self) -> String {
        let d = &self.descriptors;
        let mut out = format!("{HEADER}\n00:00,RecordID,{}\n", self.record_id);
        for (name, v) in
            [("Age", d.age), ("Gender", d.gender), ("Height", d.height), ("ICUType", d.icu_type), ("Weight", d.weight)]
        {
            let _ = writeln!(out, "00:00,{name},{}", v.unwrap_or(-1.0));
        }
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", format_time(r.minutes), r.parameter, r.value);
        }
        out
    }

    pub fn series(&self, parameter: &str) -> Vec<(u32, f64)> {
        self.rows.iter().filter(|r| r.parameter == parameter).map(|r| (r.minutes, r.value)).collect()
    }
}

/// Plausible range for each target; samples outside are dropped as artefacts.
pub fn plausible(parameter: &str, value: f64) -> bool {
    match parameter {
        "HR" => (10.0..=300.0).contains(&value),
        "Temp" => (25.0..=45.0).contains(&value),
        "MAP" => (10.0..=250.0).contains(&value),
        _ => true,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcuCovariates {
    pub age: Option<f64>,
    pub gender: Option<f64>,
    pub height: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastTask {
    pub record_id: String,
    pub covariates: IcuCovariates,
    /// `(minutes, value)` per target with `t <= 24:00`.
    pub observation: BTreeMap<String, Vec<(u32, f64)>>,
    /// `(minutes, value)` per target with `24:00 < t <= 48:00`.
    pub target: BTreeMap<String, Vec<(u32, f64)>>,
    pub implausible_dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Exclusion {
    NoObservation { variable: String },
}

impl std::fmt::Display for Exclusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Exclusion::NoObservation { variable } => write!(f, "no {variable} sample in the first 24 h"),
        }
    }
}

pub fn build_task(raw: &RawRecord) -> Result<ForecastTask, Exclusion> {
    let mut observation = BTreeMap::new();
    let mut target = BTreeMap::new();
    let mut dropped = 0;
    for var in TARGETS {
        let all = raw.series(var);
        let kept: Vec<(u32, f64)> = all.iter().copied().filter(|&(_, v)| plausible(var, v)).collect();
        dropped += all.len() - kept.len();
        let (obs, tgt): (Vec<_>, Vec<_>) = kept.into_iter().partition(|&(t, _)| t <= OBS_WINDOW_MIN);
        if obs.is_empty() {
            return Err(Exclusion::NoObservation { variable: var.to_string() });
        }
        observation.insert(var.to_string(), obs);
        target.insert(var.to_string(), tgt);
    }
    let d = &raw.descriptors;
    Ok(ForecastTask {
        record_id: raw.record_id.clone(),
        covariates: IcuCovariates { age: d.age, gender: d.gender, height: d.height },
        observation,
        target,
        implausible_dropped: dropped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    fn fit(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Self { mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub variables: BTreeMap<String, Moments>,
    pub age: Moments,
    pub height: Moments,
}

/// Population z-scores over every sample of the given tasks.
pub fn fit_normalizer(train: &[ForecastTask]) -> Result<NormStats, Error> {
    if train.is_empty() {
        return Err(Error::Ingest("cannot fit a normaliser on an empty split".into()));
    }
    let fit = |name: &str, vals: Vec<f64>| -> Result<Moments, Error> {
        match Moments::fit(&vals) {
            Some(m) if m.std > 0.0 => Ok(m),
            Some(_) => Err(Error::Ingest(format!("{name} has zero variance on the training split"))),
            None => Err(Error::Ingest(format!("{name} has no training samples"))),
        }
    };
    let mut variables = BTreeMap::new();
    for var in TARGETS {
        let vals = train
            .iter()
            .flat_map(|t| t.observation[var].iter().chain(&t.target[var]).map(|&(_, v)| v))
            .collect();
        variables.insert(var.to_string(), fit(var, vals)?);
    }
    let age = fit("Age", train.iter().filter_map(|t| t.covariates.age).collect())?;
    // Heights are often absent; fall back to unit scale rather than failing.
    let height = fit("Height", train.iter().filter_map(|t| t.covariates.height).collect())
        .unwrap_or(Moments { mean: 170.0, std: 10.0 });
    Ok(NormStats { variables, age, height })
}

fn map_task(task: &ForecastTask, f: impl Fn(&Moments, f64) -> f64, stats: &NormStats) -> ForecastTask {
    let conv = |m: &BTreeMap<String, Vec<(u32, f64)>>| {
        m.iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|&(t, x)| (t, f(&stats.variables[k], x))).collect()))
            .collect()
    };
    let c = &task.covariates;
    ForecastTask {
        record_id: task.record_id.clone(),
        covariates: IcuCovariates {
            age: c.age.map(|a| f(&stats.age, a)),
            gender: c.gender,
            height: c.height.map(|h| f(&stats.height, h)),
        },
        observation: conv(&task.observation),
        target: conv(&task.target),
        implausible_dropped: task.implausible_dropped,
    }
}

pub fn apply_normalizer(task: &ForecastTask, stats: &NormStats) -> ForecastTask {
    map_task(task, Moments::apply, stats)
}

pub fn invert_normalizer(task: &ForecastTask, stats: &NormStats) -> ForecastTask {
    map_task(task, Moments::invert, stats)
}

pub fn record_id(task: &ForecastTask) -> String {
    format!("icu-{}", task.record_id)
}

pub fn variables() -> Vec<VariableInfo> {
    TARGETS.iter().map(|v| VariableInfo { name: v.to_string(), kind: VariableKind::Gaussian, readout: false }).collect()
}

/// Dataset record over the union of the targets' time stamps (hours).
/// Missing covariates are imputed at the (normalised) population mean, and a
/// missing gender at 0.5.
pub fn to_record(task: &ForecastTask) -> Record {
    let id = record_id(task);
    let mut stamps = BTreeSet::new();
    for series in task.observation.values().chain(task.target.values()) {
        stamps.extend(series.iter().map(|&(t, _)| t));
    }
    let stamps: Vec<u32> = stamps.into_iter().collect();
    let mut observations = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for var in TARGETS {
        let lookup: BTreeMap<u32, f64> = task.observation[var].iter().chain(&task.target[var]).copied().collect();
        observations.insert(var.to_string(), stamps.iter().map(|t| lookup.get(t).copied()).collect());
        masks.insert(var.to_string(), stamps.iter().map(|t| lookup.contains_key(t)).collect());
    }
    let c = &task.covariates;
    let covariates = BTreeMap::from([
        ("age".to_string(), c.age.unwrap_or(0.0)),
        ("height".to_string(), c.height.unwrap_or(0.0)),
        ("male".to_string(), c.gender.unwrap_or(0.5)),
    ]);
    Record {
        schema_version: SCHEMA_VERSION,
        split: Split::for_id(&id),
        id,
        source: "physionet2012".into(),
        time_unit: "hours".into(),
        horizon: f64::from(STAY_MIN) / 60.0,
        split_time: f64::from(OBS_WINDOW_MIN) / 60.0,
        variables: variables(),
        covariates,
        obs_times: stamps.iter().map(|&t| f64::from(t) / 60.0).collect(),
        observations,
        masks,
        controls: ControlSignal::empty(0),
        baseline: None,
        params: None,
        population_params: None,
        schedule: None,
        truth_grid: None,
        truth_tumor_volume: None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub files: usize,
    pub parsed: usize,
    pub failed: Vec<(String, String)>,
    pub excluded: Vec<(String, String)>,
    pub retained: usize,
    pub unknown_parameters: usize,
    pub implausible_dropped: usize,
    /// True when the training split was empty and the normaliser was fitted on every retained record.
    pub normalizer_fallback: bool,
}

#[derive(Clone, Debug)]
pub struct IngestOutput {
    pub records: Vec<Record>,
    pub stats: NormStats,
    pub report: IngestReport,
}

pub fn list_record_files(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == "txt") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Parses every `*.txt` file in `dir`, builds tasks, fits the normaliser on
/// the training split and emits normalised records sorted by id.
pub fn ingest_dir(dir: &Path) -> Result<IngestOutput, Error> {
    let files = list_record_files(dir)?;
    if files.is_empty() {
        return Err(Error::Ingest(format!("no record files (*.txt) in {}", dir.display())));
    }
    let mut report = IngestReport {
        files: files.len(),
        parsed: 0,
        failed: vec![],
        excluded: vec![],
        retained: 0,
        unknown_parameters: 0,
        implausible_dropped: 0,
        normalizer_fallback: false,
    };
    let mut tasks = Vec::new();
    for path in &files {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw = match parse_record(&text) {
            Ok(r) => r,
            Err(e) => {
                warn!("{name}: {e}");
                report.failed.push((name, e.to_string()));
                continue;
            }
        };
        report.parsed += 1;
        report.unknown_parameters += raw.unknown_skipped;
        match build_task(&raw) {
            Ok(t) => {
                report.implausible_dropped += t.implausible_dropped;
                tasks.push(t);
            }
            Err(why) => report.excluded.push((raw.record_id.clone(), why.to_string())),
        }
    }
    report.retained = tasks.len();
    if tasks.is_empty() {
        return Err(Error::Ingest(format!("every record in {} was excluded", dir.display())));
    }
    tasks.sort_by_key(|a| record_id(a));
    let train: Vec<ForecastTask> =
        tasks.iter().filter(|t| Split::for_id(&record_id(t)) == Split::Train).cloned().collect();
    let stats = if train.is_empty() {
        report.normalizer_fallback = true;
        fit_normalizer(&tasks)?
    } else {
        fit_normalizer(&train)?
    };
    let records = tasks.iter().map(|t| to_record(&apply_normalizer(t, &stats))).collect();
    Ok(IngestOutput { records, stats, report })
}
