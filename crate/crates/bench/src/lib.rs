//! Benchmark harness and command-line plumbing around `saea-core`.
//!
//! `fit-bench` trains an initial population, then times only the surrogate
//! fit on its phenotypes. Rows go to a CSV report; `report` renders those
//! rows as a dataset x surrogate table.

pub mod commands;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use saea_core::dataset::DatasetError;
use saea_core::evolution::EvolutionError;
use saea_core::kpls::fit_kpls;
use saea_core::kriging::KrigingError;
use saea_core::{FitSpec, KrigingModel, SurrogateKind};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use report::{BenchRow, FitTime};

/// Environment variable overriding the raw data directory.
pub const DATA_DIR_ENV: &str = "SAEA_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/raw";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error("surrogate fit failed: {0}")]
    Surrogate(KrigingError),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

impl BenchError {
    pub(crate) fn file(path: &Path, e: impl std::fmt::Display) -> Self {
        BenchError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// CPU model and logical core count of the current machine.
pub fn host_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|info| {
            info.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{model} ({cores} cores)")
}

/// Hex sha256 of `text`.
pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Flag, then [`DATA_DIR_ENV`], then [`DEFAULT_DATA_DIR`].
pub fn resolve_data_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_DATA_DIR),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitOutcome {
    Completed {
        evaluations: usize,
        log_likelihood: f64,
        /// Length-scales actually searched (`d` for Kriging, `h` for KPLS).
        n_hyperparameters: usize,
    },
    Timeout {
        evaluations: usize,
        best_log_likelihood: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitTiming {
    pub elapsed: Duration,
    pub outcome: FitOutcome,
}

impl FitTiming {
    pub fn timed_out(&self) -> bool {
        matches!(self.outcome, FitOutcome::Timeout { .. })
    }
}

/// Times one surrogate fit. A budget overrun is a result, not an error.
pub fn time_fit(
    kind: SurrogateKind,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    h: usize,
    spec: &FitSpec,
) -> Result<FitTiming> {
    let start = Instant::now();
    let fitted = match kind {
        SurrogateKind::Kriging => KrigingModel::fit(x, y, spec),
        SurrogateKind::Kpls => fit_kpls(x, y, h, spec),
    };
    let elapsed = start.elapsed();
    let outcome = match fitted {
        Ok(model) => {
            let diag = model.diagnostics();
            FitOutcome::Completed {
                evaluations: diag.map_or(0, |d| d.total_evals()),
                log_likelihood: model.log_likelihood(),
                n_hyperparameters: diag.map_or(model.theta().len(), |d| d.n_hyperparameters),
            }
        }
        Err(KrigingError::Timeout {
            evaluations,
            best_log_likelihood,
            ..
        }) => FitOutcome::Timeout {
            evaluations,
            best_log_likelihood,
        },
        Err(e) => return Err(BenchError::Surrogate(e)),
    };
    Ok(FitTiming { elapsed, outcome })
}
