//! Newline-delimited JSON dataset shared by the simulator and the ICU ingest.
//!
//! One [`Record`] per line. Field names and semantics are documented in
//! `SCHEMA.md` at the crate root; bump [`SCHEMA_VERSION`] on any change.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pkpd::{BaselineCovariates, PkpdParams, TreatmentSchedule};
use crate::sde::ControlSignal;
use crate::Error;

pub const SCHEMA_VERSION: u32 = 1;

const SPLIT_SALT: &str = "lsde-split-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// 80/10/10 assignment from a salted SHA-256 of the record id.
    pub fn for_id(id: &str) -> Self {
        let digest = Sha256::digest(format!("{SPLIT_SALT}:{id}").as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&digest[..8]);
        match u64::from_le_bytes(b) % 100 {
            0..=79 => Split::Train,
            80..=89 => Split::Val,
            _ => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VariableKind {
    Gaussian,
    Poisson,
    Categorical { classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableInfo {
    pub name: String,
    pub kind: VariableKind,
    /// Ground-truth channel: never fed to the encoders, fitted by a head whose
    /// input is cut from the rest of the model.
    #[serde(default)]
    pub readout: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub schema_version: u32,
    pub id: String,
    pub source: String,
    pub split: Split,
    pub time_unit: String,
    pub horizon: f64,
    /// Points with `t <= split_time` form the observation window.
    pub split_time: f64,
    pub variables: Vec<VariableInfo>,
    pub covariates: BTreeMap<String, f64>,
    pub obs_times: Vec<f64>,
    pub observations: BTreeMap<String, Vec<Option<f64>>>,
    pub masks: BTreeMap<String, Vec<bool>>,
    pub controls: ControlSignal,
    #[serde(default)]
    pub baseline: Option<BaselineCovariates>,
    #[serde(default)]
    pub params: Option<PkpdParams>,
    #[serde(default)]
    pub population_params: Option<PkpdParams>,
    #[serde(default)]
    pub schedule: Option<TreatmentSchedule>,
    #[serde(default)]
    pub truth_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub truth_tumor_volume: Option<Vec<f64>>,
}

impl Record {
    pub fn value(&self, var: &str, j: usize) -> Option<f64> {
        let observed = self.masks.get(var).is_some_and(|m| m[j]);
        if observed {
            self.observations.get(var).and_then(|v| v[j])
        } else {
            None
        }
    }

    pub fn observed_count(&self, var: &str) -> usize {
        self.masks.get(var).map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    /// Checks internal consistency of lengths and ordering.
    pub fn validate(&self) -> Result<(), Error> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Dataset(format!(
                "record {}: schema_version {} (expected {SCHEMA_VERSION})",
                self.id, self.schema_version
            )));
        }
        let n = self.obs_times.len();
        if self.obs_times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Dataset(format!("record {}: obs_times not sorted", self.id)));
        }
        for v in &self.variables {
            let obs = self.observations.get(&v.name);
            let mask = self.masks.get(&v.name);
            match (obs, mask) {
                (Some(o), Some(m)) if o.len() == n && m.len() == n => {
                    if o.iter().zip(m).any(|(val, &m)| m && val.is_none()) {
                        return Err(Error::Dataset(format!(
                            "record {}: {} observed without a value",
                            self.id, v.name
                        )));
                    }
                }
                _ => {
                    return Err(Error::Dataset(format!(
                        "record {}: variable {} missing or wrong length",
                        self.id, v.name
                    )))
                }
            }
        }
        Ok(())
    }
}

pub fn write_ndjson(path: &Path, records: &[Record]) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_ndjson(path: &Path) -> Result<Vec<Record>, Error> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

pub fn by_split(records: &[Record], split: Split) -> Vec<Record> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_roughly_balanced() {
        let mut counts = [0usize; 3];
        for i in 0..5000 {
            let s = Split::for_id(&format!("p{i}"));
            assert_eq!(s, Split::for_id(&format!("p{i}")));
            counts[s as usize] += 1;
        }
        assert!((3800..4200).contains(&counts[0]), "{counts:?}");
        assert!((380..620).contains(&counts[1]), "{counts:?}");
        assert!((380..620).contains(&counts[2]), "{counts:?}");
    }
}
