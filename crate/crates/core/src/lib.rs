//! Latent stochastic differential equations for irregular clinical time series.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffcore`]: reverse-mode AD and neural building blocks;
//! * [`sde`]: fixed-step integrators, Wiener sampling, controls and path KL;
//! * [`pkpd`] and [`physionet`]: the two data sources, both emitting [`dataset::Record`]s;
//! * [`model`] and [`training`]: the latent SDE, its ODE and LSTM baselines, and the ELBO loop;
//! * [`metrics`]: forecast scoring;
//! * [`cli`]: the `lsde` command-line tool.

pub mod cli;
pub mod dataset;
pub mod diffcore;
pub mod metrics;
pub mod model;
pub mod physionet;
pub mod pkpd;
pub mod rng;
pub mod sde;
pub mod toy;
pub mod training;

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error(transparent)]
    Sde(#[from] sde::SdeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("ingest: {0}")]
    Ingest(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numerical: {0}")]
    Numerical(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    /// Process exit code for the CLI: 3 for numerical failures, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::Numerical(_) => 3,
            Error::Sde(sde::SdeError::NonFiniteState { .. }) => 3,
            Error::Diff(diffcore::DiffError::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}
