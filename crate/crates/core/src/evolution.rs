//! Surrogate-assisted (mu + lambda) evolution with pre-selection.
//!
//! Each generation, lambda offspring are mutated from the parents and trained
//! for `e_cheap` epochs. The surrogate ranks them from their phenotypes; the
//! best `k` continue to `e_full` epochs and receive their true fitness. Only
//! truly evaluated individuals enter the archive or become parents.
//!
//! All randomness of an individual (creation or mutation, then training) comes
//! from its own stream `seed ^ id`, so results do not depend on thread
//! scheduling and a checkpoint needs no generator state.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cgp::{Activation, CgpError, Genotype, GridConfig, MutationRates, TrainParams};
use crate::dataset::Dataset;
use crate::kpls::fit_kpls;
use crate::kriging::{FitSpec, KrigingError, KrigingModel};
use crate::phenotype::PhenotypeVector;
use crate::pls::PlsError;
use crate::rng::{individual_stream, Rng};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("surrogate fit failed: {0}")]
    Surrogate(#[from] KrigingError),
    #[error("network evaluation failed: {0}")]
    Network(#[from] CgpError),
    #[error("archive: {0}")]
    Archive(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

type Result<T> = std::result::Result<T, EvolutionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    Kriging,
    Kpls,
}

impl std::fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SurrogateKind::Kriging => "kriging",
            SurrogateKind::Kpls => "kpls",
        })
    }
}

impl std::str::FromStr for SurrogateKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kriging" => Ok(SurrogateKind::Kriging),
            "kpls" => Ok(SurrogateKind::Kpls),
            _ => Err(format!("unknown surrogate `{s}` (expected kriging or kpls)")),
        }
    }
}

/// Grid shape shared by every genotype of a run; inputs and outputs come
/// from the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    pub levels_back: usize,
    pub arity: usize,
    pub functions: Vec<Activation>,
}

impl Default for GridShape {
    fn default() -> Self {
        let g = GridConfig::with_io(1, 1);
        Self {
            rows: g.rows,
            cols: g.cols,
            levels_back: g.levels_back,
            arity: g.arity,
            functions: g.function_set,
        }
    }
}

impl GridShape {
    pub fn grid_for(&self, d: &Dataset) -> GridConfig {
        GridConfig {
            rows: self.rows,
            cols: self.cols,
            levels_back: self.levels_back,
            arity: self.arity,
            function_set: self.functions.clone(),
            n_inputs: d.n_features(),
            n_outputs: d.n_classes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub mu: usize,
    pub lambda: usize,
    pub generations: usize,
    /// Offspring truly evaluated per generation.
    pub k: usize,
    /// Most recent archive entries the surrogate is fitted on.
    pub s: usize,
    pub surrogate: SurrogateKind,
    /// PLS components for the KPLS surrogate.
    pub h: usize,
    pub init_size: usize,
    pub e_cheap: usize,
    pub e_full: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Wall-clock budget per surrogate fit, in seconds.
    pub fit_budget_secs: Option<f64>,
    pub fit_starts: usize,
    pub mutation: MutationRates,
    pub grid: GridShape,
    /// When false every timing field is written as 0, making logs
    /// byte-identical across runs.
    pub record_timings: bool,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            mu: 5,
            lambda: 20,
            generations: 10,
            k: 5,
            s: 100,
            surrogate: SurrogateKind::Kpls,
            h: 2,
            init_size: 100,
            e_cheap: 10,
            e_full: 100,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
            fit_budget_secs: None,
            fit_starts: 5,
            mutation: MutationRates::default(),
            grid: GridShape::default(),
            record_timings: true,
        }
    }
}

impl EvolutionConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| EvolutionError::Config {
            field: "<file>",
            message: e.to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, message: &str| {
            Err(EvolutionError::Config {
                field,
                message: message.to_string(),
            })
        };
        if self.mu == 0 {
            return bad("mu", "must be at least 1");
        }
        if self.lambda == 0 {
            return bad("lambda", "must be at least 1");
        }
        if self.k == 0 {
            return bad("k", "must be at least 1, or the archive never grows");
        }
        if self.k > self.lambda {
            return bad("k", "cannot exceed lambda");
        }
        if !(25..=200).contains(&self.s) {
            return bad("s", "must lie in 25..=200");
        }
        if !(1..=4).contains(&self.h) {
            return bad("h", "must lie in 1..=4");
        }
        if self.init_size < 2 {
            return bad("init_size", "must be at least 2");
        }
        if self.e_cheap > self.e_full {
            return bad("e_cheap", "cannot exceed e_full");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.fit_starts == 0 {
            return bad("fit_starts", "must be positive");
        }
        if let Some(b) = self.fit_budget_secs {
            if !(b >= 0.0 && b.is_finite()) {
                return bad("fit_budget_secs", "must be a non-negative number");
            }
        }
        self.mutation
            .validate()
            .map_err(|e| EvolutionError::Config {
                field: "mutation",
                message: e.to_string(),
            })?;
        let grid = GridConfig {
            rows: self.grid.rows,
            cols: self.grid.cols,
            levels_back: self.grid.levels_back,
            arity: self.grid.arity,
            function_set: self.grid.functions.clone(),
            n_inputs: 1,
            n_outputs: 1,
        };
        grid.validate().map_err(|e| EvolutionError::Config {
            field: "grid",
            message: e.to_string(),
        })
    }

    fn train_params(&self, epochs: usize) -> TrainParams {
        TrainParams {
            epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
        }
    }

    fn fit_spec(&self, generation: usize) -> FitSpec {
        FitSpec {
            n_starts: self.fit_starts,
            budget: self.fit_budget_secs.map(Duration::from_secs_f64),
            seed: self.seed.wrapping_add(generation as u64),
            ..FitSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: u64,
    pub generation: usize,
    pub genotype: Genotype,
    /// Phenotype after `e_cheap` epochs.
    pub phenotype: Option<PhenotypeVector>,
    pub true_fitness: Option<f64>,
    pub surrogate_mean: Option<f64>,
    pub surrogate_variance: Option<f64>,
    pub evaluated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub id: u64,
    pub generation: usize,
    pub fitness: f64,
    pub phenotype: PhenotypeVector,
}

/// Truly evaluated (phenotype, fitness) pairs in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    entries: Vec<ArchiveEntry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: ArchiveEntry) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.phenotype.len() != entry.phenotype.len() {
                return Err(EvolutionError::Archive(format!(
                    "phenotype length {} differs from archive dimension {}",
                    entry.phenotype.len(),
                    first.phenotype.len()
                )));
            }
        }
        if self.entries.iter().any(|e| e.id == entry.id) {
            return Err(EvolutionError::Archive(format!("duplicate id {}", entry.id)));
        }
        if !(entry.fitness.is_finite()) {
            return Err(EvolutionError::Archive("non-finite fitness".into()));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|e| e.phenotype.len())
    }

    /// The most recent `s` entries (all of them if fewer).
    pub fn recent(&self, s: usize) -> &[ArchiveEntry] {
        &self.entries[self.entries.len().saturating_sub(s)..]
    }

    /// Surrogate training matrix and targets from `entries`.
    pub fn training_data(entries: &[ArchiveEntry]) -> (DMatrix<f64>, DVector<f64>) {
        let d = entries.first().map_or(0, |e| e.phenotype.len());
        let mut x = DMatrix::zeros(entries.len(), d);
        for (i, e) in entries.iter().enumerate() {
            for (j, v) in e.phenotype.values().iter().enumerate() {
                x[(i, j)] = *v;
            }
        }
        let y = DVector::from_iterator(entries.len(), entries.iter().map(|e| e.fitness));
        (x, y)
    }

    /// `saea-archive v1 n=<count> d=<dim> c=<classes>` then one
    /// `id generation fitness len v1 ... vd` line per entry.
    pub fn to_text(&self) -> String {
        let c = self.entries.first().map_or(0, |e| e.phenotype.n_classes());
        let mut s = format!(
            "saea-archive v1 n={} d={} c={}\n",
            self.len(),
            self.dim().unwrap_or(0),
            c
        );
        for e in &self.entries {
            let _ = writeln!(s, "{} {} {} {}", e.id, e.generation, e.fitness, e.phenotype.to_line());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| EvolutionError::Archive(format!("line {line}: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty archive"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 5 || fields[0] != "saea-archive" || fields[1] != "v1" {
            return Err(bad(1, "not a v1 archive"));
        }
        let num = |f: &str, key: &str| -> Result<usize> {
            f.strip_prefix(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(1, &format!("bad `{key}` field")))
        };
        let n = num(fields[2], "n=")?;
        let d = num(fields[3], "d=")?;
        let c = num(fields[4], "c=")?;
        let mut archive = Archive::new();
        for (i, line) in lines.enumerate() {
            let ln = i + 2;
            let mut t = line.split(' ');
            let mut next = |what: &str| t.next().ok_or_else(|| bad(ln, &format!("missing {what}")));
            let id: u64 = next("id")?.parse().map_err(|_| bad(ln, "bad id"))?;
            let generation: usize = next("generation")?.parse().map_err(|_| bad(ln, "bad generation"))?;
            let fitness: f64 = next("fitness")?.parse().map_err(|_| bad(ln, "bad fitness"))?;
            let len: usize = next("length")?.parse().map_err(|_| bad(ln, "bad length"))?;
            if len != d {
                return Err(bad(ln, "vector length disagrees with header"));
            }
            let values: Vec<f64> = t
                .map(|v| v.parse().map_err(|_| bad(ln, "bad value")))
                .collect::<Result<_>>()?;
            if values.len() != len {
                return Err(bad(ln, "vector shorter than its length prefix"));
            }
            let phenotype = PhenotypeVector::from_values(values, c)
                .ok_or_else(|| bad(ln, "length is not a multiple of the class count"))?;
            archive.push(ArchiveEntry {
                id,
                generation,
                fitness,
                phenotype,
            })?;
        }
        if archive.len() != n {
            return Err(bad(1, "entry count disagrees with header"));
        }
        Ok(archive)
    }
}

/// What happened to a promoted offspring: its surrogate prediction and the
/// truth that followed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Promotion {
    pub id: u64,
    pub predicted_mean: f64,
    pub predicted_variance: f64,
    pub true_fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub surrogate_fit_seconds: f64,
    pub train_seconds: f64,
    pub k: usize,
    /// Size of the subset the surrogate was fitted on.
    pub s: usize,
    pub archive_size: usize,
    pub promoted: Vec<Promotion>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub dataset: String,
    pub phenotype_len: usize,
    pub config: EvolutionConfig,
    /// Generation 0 is the initial population.
    pub generations: Vec<GenerationRecord>,
    pub aborted: Option<String>,
}

impl RunLog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run log serialization cannot fail")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("generation,best_fitness,mean_fitness,surrogate_fit_seconds,k,s\n");
        for g in &self.generations {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                g.generation, g.best_fitness, g.mean_fitness, g.surrogate_fit_seconds, g.k, g.s
            );
        }
        s
    }

    /// (predicted mean, true fitness) over every promoted offspring.
    pub fn promoted_pairs(&self) -> Vec<(f64, f64)> {
        self.generations
            .iter()
            .flat_map(|g| g.promoted.iter().map(|p| (p.predicted_mean, p.true_fitness)))
            .collect()
    }
}

/// Fits the configured surrogate on archive entries. A KPLS component that
/// turns out degenerate lowers `h` to the components that exist.
pub fn fit_surrogate(
    kind: SurrogateKind,
    h: usize,
    entries: &[ArchiveEntry],
    spec: &FitSpec,
) -> std::result::Result<KrigingModel, KrigingError> {
    let (x, y) = Archive::training_data(entries);
    match kind {
        SurrogateKind::Kriging => KrigingModel::fit(&x, &y, spec),
        SurrogateKind::Kpls => {
            let mut h = h.min(x.nrows() - 1).min(x.ncols()).max(1);
            loop {
                match fit_kpls(&x, &y, h, spec) {
                    Err(KrigingError::Pls(PlsError::Degenerate { component })) if component > 1 => {
                        h = component - 1;
                    }
                    other => return other,
                }
            }
        }
    }
}

struct Trained {
    genotype: Genotype,
    phenotype: PhenotypeVector,
    rng: Rng,
    warning: Option<String>,
}

/// Trains `g` for `epochs` epochs. Training that diverges leaves the
/// genotype as it was, with a warning.
fn train_or_keep(
    g: &Genotype,
    train: &Dataset,
    params: &TrainParams,
    rng: &mut Rng,
    id: u64,
) -> (Genotype, Option<String>) {
    match g.sgd_train(train, params, rng) {
        Ok((t, _)) => (t, None),
        Err(e) => (g.clone(), Some(format!("individual {id}: training abandoned ({e})"))),
    }
}

fn cheap_phase(g: Genotype, train: &Dataset, params: &TrainParams, mut rng: Rng, id: u64) -> Result<Trained> {
    let (genotype, warning) = train_or_keep(&g, train, params, &mut rng, id);
    let phenotype = PhenotypeVector::extract(&genotype, train)?;
    Ok(Trained {
        genotype,
        phenotype,
        rng,
        warning,
    })
}

fn full_phase(t: &Trained, train: &Dataset, params: &TrainParams, id: u64) -> Result<(Genotype, f64, Option<String>)> {
    let mut rng = t.rng.clone();
    let (genotype, warning) = train_or_keep(&t.genotype, train, params, &mut rng, id);
    let fitness = genotype.error_rate(train)?;
    Ok((genotype, fitness, warning))
}

fn by_fitness(a: &Individual, b: &Individual) -> std::cmp::Ordering {
    let fa = a.true_fitness.unwrap_or(f64::INFINITY);
    let fb = b.true_fitness.unwrap_or(f64::INFINITY);
    fa.total_cmp(&fb).then(a.id.cmp(&b.id))
}

fn summary(parents: &[Individual]) -> (f64, f64) {
    let f: Vec<f64> = parents.iter().filter_map(|p| p.true_fitness).collect();
    let best = f.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    (best, mean)
}

fn secs(record: bool, d: Duration) -> f64 {
    if record {
        d.as_secs_f64()
    } else {
        0.0
    }
}

/// State of one run between generations.
pub struct Evolution<'a> {
    config: EvolutionConfig,
    train: &'a Dataset,
    grid: GridConfig,
    parents: Vec<Individual>,
    archive: Archive,
    model: Option<KrigingModel>,
    /// Archive length and generation of the last successful fit.
    model_fit: Option<(usize, usize)>,
    next_id: u64,
    generation: usize,
    log: RunLog,
}

impl<'a> Evolution<'a> {
    /// Creates, trains and evaluates the initial population and fills the
    /// archive. The surrogate is fitted separately by [`Self::fit_initial`],
    /// so a failing fit still leaves the archive available.
    pub fn new(config: EvolutionConfig, train: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let started = Instant::now();
        let grid = config.grid.grid_for(train);
        let cheap = config.train_params(config.e_cheap);
        let rest = config.train_params(config.e_full - config.e_cheap);
        let results: Vec<Result<(Individual, Vec<String>)>> = (0..config.init_size as u64)
            .into_par_iter()
            .map(|id| {
                let mut rng = individual_stream(config.seed, id);
                let g = Genotype::random(&grid, &mut rng)?;
                let t = cheap_phase(g, train, &cheap, rng, id)?;
                let (genotype, fitness, w2) = full_phase(&t, train, &rest, id)?;
                let warnings = t.warning.into_iter().chain(w2).collect();
                Ok((
                    Individual {
                        id,
                        generation: 0,
                        genotype,
                        phenotype: Some(t.phenotype),
                        true_fitness: Some(fitness),
                        surrogate_mean: None,
                        surrogate_variance: None,
                        evaluated: true,
                    },
                    warnings,
                ))
            })
            .collect();
        let mut archive = Archive::new();
        let mut population = Vec::with_capacity(config.init_size);
        let mut warnings = Vec::new();
        for r in results {
            let (ind, w) = r?;
            warnings.extend(w);
            archive.push(ArchiveEntry {
                id: ind.id,
                generation: 0,
                fitness: ind.true_fitness.unwrap(),
                phenotype: ind.phenotype.clone().unwrap(),
            })?;
            population.push(ind);
        }
        population.sort_by(by_fitness);
        population.truncate(config.mu);
        let (best, mean) = summary(&population);
        let record = GenerationRecord {
            generation: 0,
            best_fitness: best,
            mean_fitness: mean,
            surrogate_fit_seconds: 0.0,
            train_seconds: secs(config.record_timings, started.elapsed()),
            k: config.init_size,
            s: 0,
            archive_size: archive.len(),
            promoted: Vec::new(),
            warnings,
        };
        let log = RunLog {
            dataset: train.name().to_string(),
            phenotype_len: train.phenotype_len(),
            config: config.clone(),
            generations: vec![record],
            aborted: None,
        };
        Ok(Self {
            next_id: config.init_size as u64,
            config,
            train,
            grid,
            parents: population,
            archive,
            model: None,
            model_fit: None,
            generation: 0,
            log,
        })
    }

    /// Fits the first surrogate on the most recent `s` archive entries.
    pub fn fit_initial(&mut self) -> Result<()> {
        let t = Instant::now();
        let entries = self.archive.recent(self.config.s);
        let model = fit_surrogate(
            self.config.surrogate,
            self.config.h,
            entries,
            &self.config.fit_spec(0),
        )?;
        let rec = &mut self.log.generations[0];
        rec.surrogate_fit_seconds = secs(self.config.record_timings, t.elapsed());
        rec.s = entries.len();
        self.model_fit = Some((self.archive.len(), 0));
        self.model = Some(model);
        Ok(())
    }

    /// Offspring of the next generation, mutated and cheaply trained, without
    /// any surrogate involvement.
    fn breed(&self) -> Result<Vec<(Individual, Trained)>> {
        let cheap = self.config.train_params(self.config.e_cheap);
        let mu = self.parents.len();
        let base = self.next_id;
        let generation = self.generation + 1;
        (0..self.config.lambda)
            .into_par_iter()
            .map(|j| {
                let id = base + j as u64;
                let parent = &self.parents[j % mu];
                let mut rng = individual_stream(self.config.seed, id);
                let child = parent.genotype.mutate(&self.config.mutation, &mut rng)?;
                let t = cheap_phase(child, self.train, &cheap, rng, id)?;
                let ind = Individual {
                    id,
                    generation,
                    genotype: t.genotype.clone(),
                    phenotype: Some(t.phenotype.clone()),
                    true_fitness: None,
                    surrogate_mean: None,
                    surrogate_variance: None,
                    evaluated: false,
                };
                Ok((ind, t))
            })
            .collect()
    }

    /// Offspring of the next generation after mutation and cheap training,
    /// for inspection; does not advance the run.
    pub fn preview_offspring(&self) -> Result<Vec<Individual>> {
        Ok(self.breed()?.into_iter().map(|(i, _)| i).collect())
    }

    /// One generation. Returns the offspring, evaluated or not.
    pub fn step(&mut self) -> Result<Vec<Individual>> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| EvolutionError::Archive("no surrogate fitted yet".into()))?;
        let started = Instant::now();
        let mut warnings = Vec::new();
        let mut offspring = self.breed()?;
        for (ind, t) in &mut offspring {
            warnings.extend(t.warning.take());
            let p = model.predict(t.phenotype.values())?;
            ind.surrogate_mean = Some(p.mean);
            ind.surrogate_variance = Some(p.variance);
        }
        let mut order: Vec<usize> = (0..offspring.len()).collect();
        order.sort_by(|&a, &b| {
            let ma = offspring[a].0.surrogate_mean.unwrap();
            let mb = offspring[b].0.surrogate_mean.unwrap();
            ma.total_cmp(&mb).then(a.cmp(&b))
        });
        order.truncate(self.config.k);
        order.sort_unstable();

        let rest = self.config.train_params(self.config.e_full - self.config.e_cheap);
        type Evaluated = (usize, Genotype, f64, Option<String>);
        let evaluated: Vec<Result<Evaluated>> = order
            .par_iter()
            .map(|&j| {
                let (ind, t) = &offspring[j];
                let (g, f, w) = full_phase(t, self.train, &rest, ind.id)?;
                Ok((j, g, f, w))
            })
            .collect();
        let mut promoted = Vec::with_capacity(order.len());
        for r in evaluated {
            let (j, g, f, w) = r?;
            warnings.extend(w);
            let ind = &mut offspring[j].0;
            ind.genotype = g;
            ind.true_fitness = Some(f);
            ind.evaluated = true;
            self.archive.push(ArchiveEntry {
                id: ind.id,
                generation: ind.generation,
                fitness: f,
                phenotype: ind.phenotype.clone().unwrap(),
            })?;
            promoted.push(Promotion {
                id: ind.id,
                predicted_mean: ind.surrogate_mean.unwrap(),
                predicted_variance: ind.surrogate_variance.unwrap(),
                true_fitness: f,
            });
        }
        let train_time = started.elapsed();

        self.generation += 1;
        self.next_id += self.config.lambda as u64;
        let fit_started = Instant::now();
        let entries = self.archive.recent(self.config.s);
        let subset = entries.len();
        match fit_surrogate(
            self.config.surrogate,
            self.config.h,
            entries,
            &self.config.fit_spec(self.generation),
        ) {
            Ok(m) => {
                self.model = Some(m);
                self.model_fit = Some((self.archive.len(), self.generation));
            }
            Err(e) => warnings.push(format!("surrogate refit failed, keeping previous model: {e}")),
        }
        let fit_time = fit_started.elapsed();

        let offspring: Vec<Individual> = offspring.into_iter().map(|(i, _)| i).collect();
        let mut pool = std::mem::take(&mut self.parents);
        pool.extend(offspring.iter().filter(|i| i.evaluated).cloned());
        pool.sort_by(by_fitness);
        pool.truncate(self.config.mu);
        self.parents = pool;

        let (best, mean) = summary(&self.parents);
        let rt = self.config.record_timings;
        self.log.generations.push(GenerationRecord {
            generation: self.generation,
            best_fitness: best,
            mean_fitness: mean,
            surrogate_fit_seconds: secs(rt, fit_time),
            train_seconds: secs(rt, train_time),
            k: self.config.k,
            s: subset,
            archive_size: self.archive.len(),
            promoted,
            warnings,
        });
        Ok(offspring)
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn parents(&self) -> &[Individual] {
        &self.parents
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn model(&self) -> Option<&KrigingModel> {
        self.model.as_ref()
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn into_log(self) -> RunLog {
        self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            dataset: self.train.name().to_string(),
            generation: self.generation,
            next_id: self.next_id,
            parents: self.parents.clone(),
            archive: self.archive.clone(),
            model_fit: self.model_fit,
            log: self.log.clone(),
        }
    }

    /// Rebuilds the run state; the surrogate is refitted exactly as it was
    /// when the checkpoint was taken.
    pub fn resume(cp: Checkpoint, train: &'a Dataset) -> Result<Self> {
        if cp.format != CHECKPOINT_FORMAT || cp.version != CHECKPOINT_VERSION {
            return Err(EvolutionError::Checkpoint("unsupported checkpoint version".into()));
        }
        if cp.dataset != train.name() || cp.archive.dim() != Some(train.phenotype_len()) {
            return Err(EvolutionError::Checkpoint(
                "checkpoint was taken on a different dataset".into(),
            ));
        }
        cp.config.validate()?;
        let model = match cp.model_fit {
            Some((len, generation)) => {
                let entries = &cp.archive.entries()[..len];
                let entries = &entries[len.saturating_sub(cp.config.s)..];
                Some(fit_surrogate(
                    cp.config.surrogate,
                    cp.config.h,
                    entries,
                    &cp.config.fit_spec(generation),
                )?)
            }
            None => None,
        };
        Ok(Self {
            grid: cp.config.grid.grid_for(train),
            config: cp.config,
            train,
            parents: cp.parents,
            archive: cp.archive,
            model,
            model_fit: cp.model_fit,
            next_id: cp.next_id,
            generation: cp.generation,
            log: cp.log,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "saea-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: EvolutionConfig,
    pub dataset: String,
    pub generation: usize,
    pub next_id: u64,
    pub parents: Vec<Individual>,
    pub archive: Archive,
    pub model_fit: Option<(usize, usize)>,
    pub log: RunLog,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| EvolutionError::Checkpoint(e.to_string()))
    }
}

/// Final state of [`run`].
pub struct RunOutcome {
    pub log: RunLog,
    pub archive: Archive,
    pub error: Option<EvolutionError>,
}

/// Initial population plus `config.generations` steps. A fatal error stops
/// the run; the log up to that point is returned with `aborted` set.
pub fn run(config: &EvolutionConfig, train: &Dataset) -> RunOutcome {
    run_with(config, train, |_| {})
}

/// Like [`run`], calling `after_generation` after initialization and after
/// every generation (used for checkpointing).
pub fn run_with(
    config: &EvolutionConfig,
    train: &Dataset,
    mut after_generation: impl FnMut(&Evolution<'_>),
) -> RunOutcome {
    let mut evo = match Evolution::new(config.clone(), train) {
        Ok(e) => e,
        Err(e) => {
            return RunOutcome {
                log: RunLog {
                    dataset: train.name().to_string(),
                    phenotype_len: train.phenotype_len(),
                    config: config.clone(),
                    generations: Vec::new(),
                    aborted: Some(e.to_string()),
                },
                archive: Archive::new(),
                error: Some(e),
            }
        }
    };
    let mut error = evo.fit_initial().err();
    if error.is_none() {
        after_generation(&evo);
        while evo.generation() < config.generations {
            if let Err(e) = evo.step() {
                error = Some(e);
                break;
            }
            after_generation(&evo);
        }
    }
    continue_outcome(evo, error)
}

/// Continues a resumed run up to its configured generation count.
pub fn run_resumed(mut evo: Evolution<'_>, mut after_generation: impl FnMut(&Evolution<'_>)) -> RunOutcome {
    let mut error = None;
    while evo.generation() < evo.config.generations {
        if let Err(e) = evo.step() {
            error = Some(e);
            break;
        }
        after_generation(&evo);
    }
    continue_outcome(evo, error)
}

fn continue_outcome(evo: Evolution<'_>, error: Option<EvolutionError>) -> RunOutcome {
    let archive = evo.archive.clone();
    let mut log = evo.into_log();
    log.aborted = error.as_ref().map(|e| e.to_string());
    RunOutcome {
        log,
        archive,
        error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn toy(n: usize) -> Dataset {
        let mut rng = seeded(1);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            rows.push(c as f64 + rng.random_range(-0.4..0.4));
            rows.push(-(c as f64) + rng.random_range(-0.4..0.4));
            labels.push(c);
        }
        Dataset::new(
            "toy",
            "class",
            vec!["a".into(), "b".into()],
            DMatrix::from_row_slice(n, 2, &rows),
            labels,
            vec!["x".into(), "y".into(), "z".into()],
        )
        .unwrap()
    }

    fn small_config() -> EvolutionConfig {
        EvolutionConfig {
            mu: 2,
            lambda: 6,
            generations: 2,
            k: 2,
            s: 25,
            init_size: 8,
            e_cheap: 2,
            e_full: 5,
            grid: GridShape {
                rows: 3,
                cols: 2,
                levels_back: 2,
                arity: 2,
                functions: Activation::ALL.to_vec(),
            },
            record_timings: false,
            ..Default::default()
        }
    }

    #[test]
    fn validation_names_fields() {
        let bad = |f: fn(&mut EvolutionConfig), field: &str| {
            let mut c = EvolutionConfig::default();
            f(&mut c);
            match c.validate() {
                Err(EvolutionError::Config { field: got, .. }) => assert_eq!(got, field),
                other => panic!("expected config error on {field}, got {other:?}"),
            }
        };
        bad(|c| c.k = 0, "k");
        bad(|c| c.k = 21, "k");
        bad(|c| c.mu = 0, "mu");
        bad(|c| c.s = 10, "s");
        bad(|c| c.s = 201, "s");
        bad(|c| c.h = 5, "h");
        bad(|c| c.e_cheap = 200, "e_cheap");
        bad(|c| c.mutation.p_conn = 2.0, "mutation");
        EvolutionConfig::default().validate().unwrap();
    }

    #[test]
    fn config_from_toml() {
        let c = EvolutionConfig::from_toml_str("mu = 3\nlambda = 9\nk = 3\nsurrogate = \"kriging\"\n")
            .unwrap();
        assert_eq!((c.mu, c.lambda, c.k), (3, 9, 3));
        assert_eq!(c.surrogate, SurrogateKind::Kriging);
        assert!(EvolutionConfig::from_toml_str("mu = 3\nbogus = 1\n").is_err());
    }

    #[test]
    fn archive_grows_by_k_and_parents_only_evaluated() {
        let d = toy(30);
        let outcome = run(&small_config(), &d);
        assert!(outcome.error.is_none(), "{:?}", outcome.error);
        let sizes: Vec<usize> = outcome.log.generations.iter().map(|g| g.archive_size).collect();
        assert_eq!(sizes, vec![8, 10, 12]);
        assert_eq!(outcome.archive.len(), 12);
        for w in outcome.log.generations.windows(2) {
            assert!(w[1].best_fitness <= w[0].best_fitness);
        }
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let d = toy(30);
        let a = run(&small_config(), &d);
        let b = run(&small_config(), &d);
        assert_eq!(a.log.to_json(), b.log.to_json());
        assert_eq!(a.archive.to_text(), b.archive.to_text());
    }

    #[test]
    fn surrogate_choice_does_not_change_offspring() {
        let d = toy(30);
        let mut a = Evolution::new(small_config(), &d).unwrap();
        a.fit_initial().unwrap();
        let cfg = EvolutionConfig {
            surrogate: SurrogateKind::Kriging,
            ..small_config()
        };
        let mut b = Evolution::new(cfg, &d).unwrap();
        b.fit_initial().unwrap();
        let oa = a.step().unwrap();
        let ob = b.step().unwrap();
        for (x, y) in oa.iter().zip(&ob) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.phenotype, y.phenotype);
        }
    }

    #[test]
    fn k_equal_lambda_evaluates_everyone() {
        let d = toy(30);
        let cfg = EvolutionConfig {
            k: 6,
            generations: 1,
            ..small_config()
        };
        let out = run(&cfg, &d);
        assert!(out.error.is_none());
        assert_eq!(out.log.generations[1].promoted.len(), 6);
    }

    #[test]
    fn archive_text_round_trip() {
        let d = toy(30);
        let out = run(&small_config(), &d);
        let text = out.archive.to_text();
        let back = Archive::from_text(&text).unwrap();
        assert_eq!(back, out.archive);
        assert!(Archive::from_text("saea-archive v2 n=0 d=0 c=0\n").is_err());
    }

    #[test]
    fn archive_rejects_mismatched_dimension_and_duplicates() {
        let mut a = Archive::new();
        let v = |n| PhenotypeVector::from_values(vec![0.5; n], 2).unwrap();
        a.push(ArchiveEntry { id: 1, generation: 0, fitness: 0.1, phenotype: v(4) }).unwrap();
        assert!(a.push(ArchiveEntry { id: 2, generation: 0, fitness: 0.1, phenotype: v(6) }).is_err());
        assert!(a.push(ArchiveEntry { id: 1, generation: 0, fitness: 0.1, phenotype: v(4) }).is_err());
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let d = toy(30);
        let cfg = small_config();
        let full = run(&cfg, &d);

        let mut evo = Evolution::new(cfg.clone(), &d).unwrap();
        evo.fit_initial().unwrap();
        evo.step().unwrap();
        let cp = Checkpoint::from_json(&evo.checkpoint().to_json()).unwrap();
        drop(evo);
        let resumed = Evolution::resume(cp, &d).unwrap();
        let out = run_resumed(resumed, |_| {});
        assert_eq!(out.log.to_json(), full.log.to_json());
    }
}
