//! The `saea` subcommands as library functions. `main.rs` only parses flags
//! and maps results to exit codes.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use saea_core::dataset::{self, Prepared};
use saea_core::evolution::{run_resumed, run_with, Checkpoint, Evolution, EvolutionError};
use saea_core::kriging::KrigingError;
use saea_core::{Archive, Dataset, EvolutionConfig, FitSpec, RunLog, Schema, SplitSpec, SurrogateKind};
use serde::{Deserialize, Serialize};

use crate::report::{self, BenchRow, FitTime};
use crate::{host_descriptor, sha256_hex, time_fit, BenchError, FitOutcome, Result};

pub const DEFAULT_BUDGET_SECS: f64 = 7200.0;

fn load(data_dir: &Path, name: &str, split: &SplitSpec) -> Result<Prepared> {
    let schema = Schema::builtin(name).map_err(|_| {
        BenchError::Usage(format!(
            "unknown dataset `{name}` (known: {})",
            Schema::builtin_names().collect::<Vec<_>>().join(", ")
        ))
    })?;
    Ok(dataset::prepare(data_dir, &schema, split)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSummary {
    pub dataset: String,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub d: usize,
    pub files: [PathBuf; 2],
}

/// Writes `<name>.train.txt` and `<name>.test.txt` in canonical form.
pub fn prepare(data_dir: &Path, name: &str, split: &SplitSpec, out_dir: &Path) -> Result<PreparedSummary> {
    let p = load(data_dir, name, split)?;
    std::fs::create_dir_all(out_dir).map_err(|e| BenchError::file(out_dir, e))?;
    let files = [
        out_dir.join(format!("{name}.train.txt")),
        out_dir.join(format!("{name}.test.txt")),
    ];
    p.train.write_canonical(&files[0])?;
    p.test.write_canonical(&files[1])?;
    Ok(PreparedSummary {
        dataset: name.to_string(),
        n_train: p.train.n_instances(),
        n_test: p.test.n_instances(),
        n_classes: p.train.n_classes(),
        d: p.train.phenotype_len(),
        files,
    })
}

/// Everything that determines a `fit-bench` row apart from timing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitBenchConfig {
    pub dataset: String,
    pub surrogate: SurrogateKind,
    pub samples: usize,
    pub pls_components: usize,
    pub budget_secs: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub fit_starts: usize,
    pub split: SplitSpec,
}

impl FitBenchConfig {
    pub fn new(dataset: &str, surrogate: SurrogateKind) -> Self {
        let evo = EvolutionConfig::default();
        Self {
            dataset: dataset.to_string(),
            surrogate,
            samples: 100,
            pls_components: 2,
            budget_secs: Some(DEFAULT_BUDGET_SECS),
            seed: 0,
            epochs: evo.e_full,
            learning_rate: evo.learning_rate,
            batch_size: evo.batch_size,
            fit_starts: evo.fit_starts,
            split: SplitSpec::default(),
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_string(self).expect("plain config serializes"))
    }

    fn population_config(&self) -> EvolutionConfig {
        EvolutionConfig {
            init_size: self.samples,
            generations: 0,
            mu: 1,
            e_cheap: self.epochs,
            e_full: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
            fit_starts: self.fit_starts,
            ..EvolutionConfig::default()
        }
    }
}

/// Per-row metadata written next to the CSV report, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub dataset: String,
    pub surrogate: SurrogateKind,
    pub config_hash: String,
    pub evaluations: usize,
    pub log_likelihood: Option<f64>,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitBenchResult {
    pub row: BenchRow,
    pub meta: RowMeta,
}

pub fn sidecar_path(report: &Path) -> PathBuf {
    let mut s = report.as_os_str().to_os_string();
    s.push(".jsonl");
    PathBuf::from(s)
}

/// Trains `samples` random networks for `epochs` epochs, then times the
/// surrogate fit on their phenotypes alone.
pub fn fit_bench(data_dir: &Path, cfg: &FitBenchConfig) -> Result<FitBenchResult> {
    if cfg.samples < 2 {
        return Err(BenchError::Usage("--samples must be at least 2".into()));
    }
    if cfg.pls_components == 0 {
        return Err(BenchError::Usage("--pls-components must be at least 1".into()));
    }
    if let Some(b) = cfg.budget_secs {
        if !(b >= 0.0 && b.is_finite()) {
            return Err(BenchError::Usage("--budget-secs must be a non-negative number".into()));
        }
    }
    let p = load(data_dir, &cfg.dataset, &cfg.split)?;
    let t = Instant::now();
    let evo = Evolution::new(cfg.population_config(), &p.train)?;
    let train_seconds = t.elapsed().as_secs_f64();
    let (x, y) = Archive::training_data(evo.archive().entries());
    let spec = FitSpec {
        n_starts: cfg.fit_starts,
        budget: cfg.budget_secs.map(Duration::from_secs_f64),
        seed: cfg.seed,
        ..FitSpec::default()
    };
    let timing = time_fit(cfg.surrogate, &x, &y, cfg.pls_components, &spec)?;
    let (evaluations, log_likelihood) = match timing.outcome {
        FitOutcome::Completed {
            evaluations,
            log_likelihood,
            ..
        } => (evaluations, Some(log_likelihood)),
        FitOutcome::Timeout {
            evaluations,
            best_log_likelihood,
        } => (evaluations, best_log_likelihood),
    };
    let row = BenchRow {
        dataset: cfg.dataset.clone(),
        d: p.train.phenotype_len(),
        m: cfg.samples,
        surrogate: cfg.surrogate,
        h: (cfg.surrogate == SurrogateKind::Kpls).then_some(cfg.pls_components),
        fit: if timing.timed_out() {
            FitTime::Timeout
        } else {
            FitTime::Seconds(timing.elapsed.as_secs_f64())
        },
        timeout: cfg.budget_secs,
        train_seconds,
        seed: cfg.seed,
        host: host_descriptor(),
    };
    let meta = RowMeta {
        dataset: cfg.dataset.clone(),
        surrogate: cfg.surrogate,
        config_hash: cfg.hash(),
        evaluations,
        log_likelihood,
        timed_out: timing.timed_out(),
    };
    Ok(FitBenchResult { row, meta })
}

/// Appends the row to `out` and its metadata to the `.jsonl` sidecar.
pub fn record(out: &Path, result: &FitBenchResult) -> Result<()> {
    report::append_row(out, &result.row)?;
    let side = sidecar_path(out);
    let mut text = std::fs::read_to_string(&side).unwrap_or_default();
    text.push_str(&serde_json::to_string(&result.meta).expect("plain metadata serializes"));
    text.push('\n');
    std::fs::write(&side, text).map_err(|e| BenchError::file(&side, e))
}

fn default_fraction() -> f64 {
    SplitSpec::default().train_fraction
}

/// The `evolve` config file: dataset and split, plus an `[evolution]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveFile {
    pub dataset: String,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub stratified: bool,
    /// Write `checkpoint.json` every this many generations; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub evolution: EvolutionConfig,
}

impl EvolveFile {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let f: Self = toml::from_str(text).map_err(|e| BenchError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        f.evolution.validate().map_err(|e| BenchError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::file(path, e))?;
        Self::from_toml_str(&text, path)
    }

    fn split(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            seed: self.split_seed,
            stratified: self.stratified,
        }
    }
}

pub const RUN_JSON: &str = "run.json";
pub const RUN_CSV: &str = "run.csv";
pub const ARCHIVE_TXT: &str = "archive.txt";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";

pub struct EvolveResult {
    pub log: RunLog,
    pub error: Option<EvolutionError>,
}

impl EvolveResult {
    /// The run stopped because a surrogate fit ran out of time.
    pub fn timed_out(&self) -> bool {
        matches!(self.error, Some(EvolutionError::Surrogate(KrigingError::Timeout { .. })))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| BenchError::file(path, e))
}

/// Runs (or resumes) an evolution and writes its logs into `out_dir`. Logs
/// are written even when the run aborts. A resumed run may raise the
/// generation count; every other setting must match the checkpoint.
pub fn evolve(
    data_dir: &Path,
    file: &EvolveFile,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<EvolveResult> {
    let p = load(data_dir, &file.dataset, &file.split())?;
    std::fs::create_dir_all(out_dir).map_err(|e| BenchError::file(out_dir, e))?;
    let train: &Dataset = &p.train;
    let cp_path = out_dir.join(CHECKPOINT_JSON);
    let mut cp_error = None;
    let every = file.checkpoint_every;
    let save = |evo: &Evolution<'_>, cp_error: &mut Option<BenchError>| {
        if every > 0 && evo.generation() % every == 0 && cp_error.is_none() {
            if let Err(e) = write(&cp_path, &evo.checkpoint().to_json()) {
                *cp_error = Some(e);
            }
        }
    };
    let outcome = match resume {
        None => run_with(&file.evolution, train, |evo| save(evo, &mut cp_error)),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| BenchError::file(path, e))?;
            let mut cp = Checkpoint::from_json(&text)?;
            if cp.dataset != train.name() {
                return Err(BenchError::Usage(format!(
                    "checkpoint {} is for dataset `{}`, config names `{}`",
                    path.display(),
                    cp.dataset,
                    train.name()
                )));
            }
            // Only the generation count may change between the two runs.
            let wanted = file.evolution.generations;
            let same = EvolutionConfig {
                generations: wanted,
                ..cp.config.clone()
            } == file.evolution;
            if !same || wanted < cp.generation {
                return Err(BenchError::Usage(format!(
                    "checkpoint {} was written with a different [evolution] config",
                    path.display()
                )));
            }
            cp.config.generations = wanted;
            cp.log.config.generations = wanted;
            let evo = Evolution::resume(cp, train)?;
            run_resumed(evo, |evo| save(evo, &mut cp_error))
        }
    };
    if let Some(e) = cp_error {
        return Err(e);
    }
    write(&out_dir.join(RUN_JSON), &outcome.log.to_json())?;
    write(&out_dir.join(RUN_CSV), &outcome.log.to_csv())?;
    write(&out_dir.join(ARCHIVE_TXT), &outcome.archive.to_text())?;
    Ok(EvolveResult {
        log: outcome.log,
        error: outcome.error,
    })
}

/// Reads every report; fails on the first file whose layout is wrong.
pub fn load_reports(paths: &[PathBuf]) -> Result<Vec<BenchRow>> {
    if paths.is_empty() {
        return Err(BenchError::Usage("report needs at least one report file".into()));
    }
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(report::read_rows(p)?);
    }
    Ok(rows)
}
