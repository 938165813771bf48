//! UCI classification datasets: loading, binarization, splitting and
//! z-score normalization, plus the canonical text format used between
//! pipeline stages.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("raw file not found: {path} (expected the UCI file `{expected}`)")]
    MissingFile { path: PathBuf, expected: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    Split(String),
}

type Result<T> = std::result::Result<T, DatasetError>;

/// A labelled classification dataset. Features are stored column-major so a
/// single feature over all instances is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    label_name: String,
    feature_names: Vec<String>,
    features: DMatrix<f64>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        label_name: impl Into<String>,
        feature_names: Vec<String>,
        features: DMatrix<f64>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let n_classes = class_names.len();
        if n_classes < 2 {
            return Err(DatasetError::Invalid(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if features.nrows() != labels.len() {
            return Err(DatasetError::Invalid(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.ncols() != feature_names.len() {
            return Err(DatasetError::Invalid(format!(
                "{} feature columns but {} feature names",
                features.ncols(),
                feature_names.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(DatasetError::Invalid(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::Invalid("non-finite feature value".into()));
        }
        Ok(Self {
            name: name.into(),
            label_name: label_name.into(),
            feature_names,
            features,
            labels,
            class_names,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn label_name(&self) -> &str {
        &self.label_name
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_instances(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Number of instances per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Length of the phenotype vector this dataset induces when used as the
    /// training split.
    pub fn phenotype_len(&self) -> usize {
        self.n_instances() * self.n_classes()
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let p = self.n_features();
        let features = DMatrix::from_fn(rows.len(), p, |i, j| self.features[(rows[i], j)]);
        Dataset {
            name: self.name.clone(),
            label_name: self.label_name.clone(),
            feature_names: self.feature_names.clone(),
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Canonical text form: one header line, then `label f1 f2 ...` per
    /// instance with shortest round-trip decimals.
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "n={} p={} c={} name={} label={} classes={} features={}",
            self.n_instances(),
            self.n_features(),
            self.n_classes(),
            self.name,
            self.label_name,
            self.class_names.join(","),
            self.feature_names.join(",")
        );
        for i in 0..self.n_instances() {
            let _ = write!(out, "{}", self.labels[i]);
            for j in 0..self.n_features() {
                let _ = write!(out, " {}", self.features[(i, j)]);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_canonical_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(DatasetError::Parse {
            line: 1,
            message: "empty canonical file".into(),
        })?;
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for tok in header.split(' ') {
            let (k, v) = tok.split_once('=').ok_or_else(|| DatasetError::Parse {
                line: 1,
                message: format!("malformed header field `{tok}`"),
            })?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields.get(k).copied().ok_or_else(|| DatasetError::Parse {
                line: 1,
                message: format!("header is missing `{k}`"),
            })
        };
        let parse_count = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| DatasetError::Parse {
                line: 1,
                message: format!("header field `{k}` is not a count"),
            })
        };
        let n = parse_count("n")?;
        let p = parse_count("p")?;
        let c = parse_count("c")?;
        let split_list = |s: &str| -> Vec<String> {
            if s.is_empty() {
                Vec::new()
            } else {
                s.split(',').map(str::to_string).collect()
            }
        };
        let class_names = split_list(get("classes")?);
        let feature_names = split_list(get("features")?);
        if class_names.len() != c || feature_names.len() != p {
            return Err(DatasetError::Parse {
                line: 1,
                message: "header counts disagree with name lists".into(),
            });
        }
        let mut labels = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * p);
        for (idx, line) in lines {
            let line_no = idx + 1;
            let mut toks = line.split(' ');
            let label = toks
                .next()
                .and_then(|t| t.parse::<usize>().ok())
                .ok_or_else(|| DatasetError::Parse {
                    line: line_no,
                    message: "bad label".into(),
                })?;
            labels.push(label);
            let mut count = 0;
            for t in toks {
                let v: f64 = t.parse().map_err(|_| DatasetError::Parse {
                    line: line_no,
                    message: format!("bad number `{t}`"),
                })?;
                values.push(v);
                count += 1;
            }
            if count != p {
                return Err(DatasetError::Parse {
                    line: line_no,
                    message: format!("expected {p} features, found {count}"),
                });
            }
        }
        if labels.len() != n {
            return Err(DatasetError::Parse {
                line: labels.len() + 1,
                message: format!("expected {n} rows, found {}", labels.len()),
            });
        }
        let features = DMatrix::from_row_slice(n, p, &values);
        Dataset::new(
            get("name")?,
            get("label")?,
            feature_names,
            features,
            labels,
            class_names,
        )
    }

    pub fn write_canonical(&self, path: &Path) -> Result<()> {
        for name in self.class_names.iter().chain(&self.feature_names) {
            if name.is_empty() || name.contains([',', ' ', '\n']) {
                return Err(DatasetError::Invalid(format!(
                    "name `{name}` cannot be stored in the canonical format"
                )));
            }
        }
        fs::write(path, self.to_canonical_string()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_canonical(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_canonical_str(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Delimiter {
    #[default]
    Comma,
    Whitespace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    DropRow,
}

/// How a multi-class dataset is reduced to two classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum BinarizeRule {
    /// Keep only the listed classes; the first listed becomes label 0.
    KeepClasses { classes: Vec<String> },
    /// Label 0 where the column value is `<= value`, 1 otherwise. The column
    /// may be a feature or the label itself (whose class names must then be
    /// numeric).
    Threshold { column: String, value: f64 },
}

/// Column layout of a raw UCI file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub name: String,
    /// Raw file name inside the data directory.
    pub file: String,
    #[serde(default)]
    pub delimiter: Delimiter,
    pub columns: Vec<String>,
    pub label: String,
    #[serde(default)]
    pub drop: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Closed list of class values; when absent, classes are taken in order
    /// of first appearance.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    #[serde(default)]
    pub on_missing: MissingPolicy,
    #[serde(default = "default_missing_token")]
    pub missing_token: String,
    #[serde(default)]
    pub binarize: Option<BinarizeRule>,
}

fn default_missing_token() -> String {
    "?".into()
}

const BUILTIN_SCHEMAS: [(&str, &str); 4] = [
    ("iris", include_str!("../../../data/schemas/iris.toml")),
    ("yeast", include_str!("../../../data/schemas/yeast.toml")),
    ("ecoli", include_str!("../../../data/schemas/ecoli.toml")),
    ("abalone", include_str!("../../../data/schemas/abalone.toml")),
];

impl Schema {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: Schema =
            toml::from_str(text).map_err(|e| DatasetError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// One of the curated schemas: `iris`, `yeast`, `ecoli`, `abalone`.
    pub fn builtin(name: &str) -> Result<Self> {
        let (_, text) = BUILTIN_SCHEMAS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| DatasetError::Schema(format!("no built-in schema named `{name}`")))?;
        Self::from_toml_str(text)
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN_SCHEMAS.iter().map(|(n, _)| *n)
    }

    fn validate(&self) -> Result<()> {
        let known = |c: &String| self.columns.contains(c);
        if !known(&self.label) {
            return Err(DatasetError::Schema(format!(
                "label column `{}` is not among the columns",
                self.label
            )));
        }
        for c in self.drop.iter().chain(&self.categorical) {
            if !known(c) {
                return Err(DatasetError::Schema(format!("unknown column `{c}`")));
            }
        }
        if self.drop.contains(&self.label) || self.categorical.contains(&self.label) {
            return Err(DatasetError::Schema(
                "label column cannot be dropped or one-hot encoded".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.columns.iter().find(|c| !seen.insert(*c)) {
            return Err(DatasetError::Schema(format!("duplicate column `{dup}`")));
        }
        Ok(())
    }
}

enum ColumnRole {
    Label,
    Drop,
    Numeric,
    Categorical,
}

/// Loads a raw UCI file laid out as described by `schema`.
pub fn load_uci(path: &Path, schema: &Schema) -> Result<Dataset> {
    if !path.exists() {
        return Err(DatasetError::MissingFile {
            path: path.to_path_buf(),
            expected: schema.file.clone(),
        });
    }
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_uci(&text, schema)
}

/// Loads `<data_dir>/<schema.file>`.
pub fn load_from_dir(data_dir: &Path, schema: &Schema) -> Result<Dataset> {
    load_uci(&data_dir.join(&schema.file), schema)
}

pub fn parse_uci(text: &str, schema: &Schema) -> Result<Dataset> {
    let roles: Vec<ColumnRole> = schema
        .columns
        .iter()
        .map(|c| {
            if *c == schema.label {
                ColumnRole::Label
            } else if schema.drop.contains(c) {
                ColumnRole::Drop
            } else if schema.categorical.contains(c) {
                ColumnRole::Categorical
            } else {
                ColumnRole::Numeric
            }
        })
        .collect();

    let mut rows: Vec<(usize, Vec<&str>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = match schema.delimiter {
            Delimiter::Comma => line.split(',').map(str::trim).collect(),
            Delimiter::Whitespace => line.split_whitespace().collect(),
        };
        if fields.len() != schema.columns.len() {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!(
                    "expected {} fields, found {}",
                    schema.columns.len(),
                    fields.len()
                ),
            });
        }
        if fields.iter().any(|f| *f == schema.missing_token) {
            match schema.on_missing {
                MissingPolicy::Reject => {
                    return Err(DatasetError::Parse {
                        line: line_no,
                        message: "missing value".into(),
                    })
                }
                MissingPolicy::DropRow => continue,
            }
        }
        rows.push((line_no, fields));
    }
    if rows.is_empty() {
        return Err(DatasetError::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }

    // Class index and categorical levels, both in order of first appearance
    // unless the schema closes the class list.
    let label_col = schema.columns.iter().position(|c| *c == schema.label).unwrap();
    let mut class_names: Vec<String> = schema.classes.clone().unwrap_or_default();
    let closed = schema.classes.is_some();
    let mut labels = Vec::with_capacity(rows.len());
    for (line_no, fields) in &rows {
        let value = fields[label_col];
        let idx = match class_names.iter().position(|c| c == value) {
            Some(i) => i,
            None if closed => {
                return Err(DatasetError::Schema(format!(
                    "unknown class `{value}` at line {line_no}"
                )))
            }
            None => {
                class_names.push(value.to_string());
                class_names.len() - 1
            }
        };
        labels.push(idx);
    }

    let mut levels: Vec<Vec<String>> = vec![Vec::new(); schema.columns.len()];
    for (col, role) in roles.iter().enumerate() {
        if let ColumnRole::Categorical = role {
            for (_, fields) in &rows {
                if !levels[col].iter().any(|l| l == fields[col]) {
                    levels[col].push(fields[col].to_string());
                }
            }
        }
    }

    let mut feature_names = Vec::new();
    for (col, role) in roles.iter().enumerate() {
        match role {
            ColumnRole::Numeric => feature_names.push(schema.columns[col].clone()),
            ColumnRole::Categorical => {
                for level in &levels[col] {
                    feature_names.push(format!("{}={}", schema.columns[col], level));
                }
            }
            ColumnRole::Label | ColumnRole::Drop => {}
        }
    }

    let n = rows.len();
    let p = feature_names.len();
    let mut values = Vec::with_capacity(n * p);
    for (line_no, fields) in &rows {
        for (col, role) in roles.iter().enumerate() {
            match role {
                ColumnRole::Numeric => {
                    let v: f64 = fields[col].parse().map_err(|_| DatasetError::Parse {
                        line: *line_no,
                        message: format!(
                            "column `{}`: `{}` is not a number",
                            schema.columns[col], fields[col]
                        ),
                    })?;
                    if !v.is_finite() {
                        return Err(DatasetError::Parse {
                            line: *line_no,
                            message: format!("column `{}` is not finite", schema.columns[col]),
                        });
                    }
                    values.push(v);
                }
                ColumnRole::Categorical => {
                    for level in &levels[col] {
                        values.push(if level == fields[col] { 1.0 } else { 0.0 });
                    }
                }
                ColumnRole::Label | ColumnRole::Drop => {}
            }
        }
    }
    let features = DMatrix::from_row_slice(n, p, &values);
    Dataset::new(
        schema.name.clone(),
        schema.label.clone(),
        feature_names,
        features,
        labels,
        class_names,
    )
}

/// Reduces a dataset to two classes.
pub fn binarize(d: &Dataset, rule: &BinarizeRule) -> Result<Dataset> {
    match rule {
        BinarizeRule::KeepClasses { classes } => {
            let mapping: Vec<Option<usize>> = d
                .class_names()
                .iter()
                .map(|name| classes.iter().position(|c| c == name))
                .collect();
            let rows: Vec<usize> = (0..d.n_instances())
                .filter(|&i| mapping[d.labels()[i]].is_some())
                .collect();
            let mut present = vec![false; classes.len()];
            for &r in &rows {
                present[mapping[d.labels()[r]].unwrap()] = true;
            }
            let surviving = present.iter().filter(|&&p| p).count();
            if classes.len() < 2 || surviving < 2 {
                return Err(DatasetError::Invalid(format!(
                    "keep-classes {classes:?} leaves {surviving} class(es); need 2"
                )));
            }
            if classes.len() > 2 {
                return Err(DatasetError::Invalid(format!(
                    "keep-classes must name exactly 2 classes, got {}",
                    classes.len()
                )));
            }
            let sub = d.select(&rows);
            let labels = rows
                .iter()
                .map(|&r| mapping[d.labels()[r]].unwrap())
                .collect();
            Dataset::new(
                d.name(),
                d.label_name(),
                sub.feature_names.clone(),
                sub.features,
                labels,
                classes.clone(),
            )
        }
        BinarizeRule::Threshold { column, value } => {
            let t = *value;
            let labels: Vec<usize> = if let Some(j) =
                d.feature_names().iter().position(|f| f == column)
            {
                (0..d.n_instances())
                    .map(|i| usize::from(d.features()[(i, j)] > t))
                    .collect()
            } else if column == d.label_name() {
                let numeric: Vec<f64> = d
                    .class_names()
                    .iter()
                    .map(|c| {
                        c.parse::<f64>().map_err(|_| {
                            DatasetError::Invalid(format!(
                                "threshold on label `{column}` needs numeric classes, found `{c}`"
                            ))
                        })
                    })
                    .collect::<Result<_>>()?;
                d.labels()
                    .iter()
                    .map(|&l| usize::from(numeric[l] > t))
                    .collect()
            } else {
                return Err(DatasetError::Schema(format!(
                    "threshold column `{column}` is neither a feature nor the label"
                )));
            };
            if !labels.contains(&0) || !labels.contains(&1) {
                return Err(DatasetError::Invalid(format!(
                    "threshold {t} on `{column}` leaves a single class"
                )));
            }
            Dataset::new(
                d.name(),
                d.label_name(),
                d.feature_names().to_vec(),
                d.features().clone(),
                labels,
                vec![format!("le{t}"), format!("gt{t}")],
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.75,
            seed: 0,
            stratified: false,
        }
    }
}

impl SplitSpec {
    pub fn train_size(&self, n: usize) -> usize {
        (self.train_fraction * n as f64).floor() as usize
    }
}

/// Splits into train and test. `|train| = floor(train_fraction * n)`; both
/// halves keep the original instance order.
pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(DatasetError::Split(format!(
            "train fraction {} outside (0, 1)",
            spec.train_fraction
        )));
    }
    let n = d.n_instances();
    let n_train = spec.train_size(n);
    if n_train < d.n_classes() {
        return Err(DatasetError::Split(format!(
            "train size {n_train} is smaller than the class count {}",
            d.n_classes()
        )));
    }
    if spec.stratified && n_train == n {
        return Err(DatasetError::Split(
            "stratified split would leave the test set empty".into(),
        ));
    }
    let mut rng = rng::seeded(spec.seed);
    let mut train_idx = if spec.stratified {
        stratified_train_indices(d, n_train, &mut rng)
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(n_train);
        idx
    };
    train_idx.sort_unstable();
    let mut in_train = vec![false; n];
    for &i in &train_idx {
        in_train[i] = true;
    }
    let test_idx: Vec<usize> = (0..n).filter(|&i| !in_train[i]).collect();
    Ok((d.select(&train_idx), d.select(&test_idx)))
}

fn stratified_train_indices(d: &Dataset, n_train: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let n = d.n_instances() as f64;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.n_classes()];
    for (i, &l) in d.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    // Largest-remainder apportionment so the quotas sum to n_train exactly.
    let exact: Vec<f64> = by_class
        .iter()
        .map(|c| c.len() as f64 * n_train as f64 / n)
        .collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = n_train - quota.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut out = Vec::with_capacity(n_train);
    for (members, &q) in by_class.iter_mut().zip(&quota) {
        members.shuffle(rng);
        out.extend_from_slice(&members[..q]);
    }
    out
}

/// Per-feature z-score parameters estimated on a training split.
/// A zero `std` marks a constant column, which is mapped to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows();
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for j in 0..x.ncols() {
            let col = x.column(j);
            let constant = col.iter().all(|&v| v == col[0]);
            let m = col.iter().sum::<f64>() / n as f64;
            mean.push(m);
            if constant || n < 2 {
                std.push(0.0);
            } else {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
                std.push(var.sqrt());
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            if self.std[j] == 0.0 {
                0.0
            } else {
                (x[(i, j)] - self.mean[j]) / self.std[j]
            }
        })
    }
}

/// z-scores both splits with statistics from `train` only.
pub fn normalize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, NormStats)> {
    if train.n_instances() == 0 {
        return Err(DatasetError::Invalid("cannot normalize an empty train split".into()));
    }
    if train.n_features() != test.n_features() {
        return Err(DatasetError::Invalid("train and test feature counts differ".into()));
    }
    let stats = NormStats::fit(train.features());
    let mut train_n = train.clone();
    train_n.features = stats.apply(train.features());
    let mut test_n = test.clone();
    test_n.features = stats.apply(test.features());
    Ok((train_n, test_n, stats))
}

/// The full preprocessing chain: load, binarize when the schema asks for it,
/// split, normalize.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub full: Dataset,
    pub train: Dataset,
    pub test: Dataset,
    pub stats: NormStats,
}

pub fn prepare(data_dir: &Path, schema: &Schema, split_spec: &SplitSpec) -> Result<Prepared> {
    let raw = load_from_dir(data_dir, schema)?;
    let full = match &schema.binarize {
        Some(rule) => binarize(&raw, rule)?,
        None => raw,
    };
    let (train, test) = split(&full, split_spec)?;
    let (train, test, stats) = normalize(&train, &test)?;
    Ok(Prepared {
        full,
        train,
        test,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(text: &str) -> Schema {
        Schema::from_toml_str(text).unwrap()
    }

    fn toy_schema() -> Schema {
        schema(
            r#"
name = "toy"
file = "toy.data"
columns = ["id", "a", "color", "class"]
label = "class"
drop = ["id"]
categorical = ["color"]
"#,
        )
    }

    fn small(n: usize, classes: usize) -> Dataset {
        let features = DMatrix::from_fn(n, 2, |i, j| (i * 3 + j) as f64);
        Dataset::new(
            "small",
            "class",
            vec!["a".into(), "b".into()],
            features,
            (0..n).map(|i| i % classes).collect(),
            (0..classes).map(|c| format!("c{c}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_drops_and_one_hot_encodes() {
        let text = "x1,1.5,red,A\nx2,2.5,blue,B\n\nx3,0.5,red,A\n";
        let d = parse_uci(text, &toy_schema()).unwrap();
        assert_eq!(d.n_instances(), 3);
        assert_eq!(d.feature_names(), &["a", "color=red", "color=blue"]);
        assert_eq!(d.class_names(), &["A", "B"]);
        assert_eq!(d.labels(), &[0, 1, 0]);
        assert_eq!(d.features()[(1, 2)], 1.0);
        assert_eq!(d.features()[(2, 0)], 0.5);
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        let err = parse_uci("", &toy_schema()).unwrap_err();
        assert!(matches!(err, DatasetError::Parse { .. }));
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let text = "x1,1.5,red,A\nx2,oops,blue,B\n";
        match parse_uci(text, &toy_schema()).unwrap_err() {
            DatasetError::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
        match parse_uci("x1,1.5,red\n", &toy_schema()).unwrap_err() {
            DatasetError::Parse { line, .. } => assert_eq!(line, 1),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_class_with_closed_list_is_schema_error() {
        let mut s = toy_schema();
        s.classes = Some(vec!["A".into(), "B".into()]);
        let err = parse_uci("x1,1.5,red,A\nx2,1.0,red,C\n", &s).unwrap_err();
        assert!(matches!(err, DatasetError::Schema(_)), "{err}");
    }

    #[test]
    fn missing_values_rejected_or_dropped() {
        let text = "x1,1.5,red,A\nx2,?,blue,B\nx3,2.0,blue,B\n";
        assert!(matches!(
            parse_uci(text, &toy_schema()),
            Err(DatasetError::Parse { line: 2, .. })
        ));
        let mut s = toy_schema();
        s.on_missing = MissingPolicy::DropRow;
        assert_eq!(parse_uci(text, &s).unwrap().n_instances(), 2);
    }

    #[test]
    fn single_class_file_is_rejected() {
        assert!(parse_uci("x1,1.5,red,A\nx2,1.0,red,A\n", &toy_schema()).is_err());
    }

    #[test]
    fn schema_rejects_unknown_columns() {
        let err = Schema::from_toml_str(
            r#"
name = "t"
file = "t"
columns = ["a", "class"]
label = "klass"
"#,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::Schema(_)));
    }

    #[test]
    fn builtin_schemas_parse() {
        for name in Schema::builtin_names() {
            let s = Schema::builtin(name).unwrap();
            assert_eq!(s.name, name);
        }
        assert!(Schema::builtin("mnist").is_err());
    }

    #[test]
    fn keep_classes_relabels_and_drops() {
        let d = small(9, 3);
        let b = binarize(
            &d,
            &BinarizeRule::KeepClasses {
                classes: vec!["c2".into(), "c0".into()],
            },
        )
        .unwrap();
        assert_eq!(b.n_instances(), 6);
        assert_eq!(b.class_names(), &["c2", "c0"]);
        assert_eq!(b.labels(), &[1, 0, 1, 0, 1, 0]);
    }

    #[test]
    fn keep_classes_with_one_class_errors() {
        let d = small(9, 3);
        for classes in [vec!["c1".to_string()], vec!["c1".into(), "nope".into()]] {
            assert!(binarize(&d, &BinarizeRule::KeepClasses { classes }).is_err());
        }
    }

    #[test]
    fn threshold_on_feature_and_label() {
        let d = small(6, 2);
        let b = binarize(
            &d,
            &BinarizeRule::Threshold {
                column: "a".into(),
                value: 6.0,
            },
        )
        .unwrap();
        // a = 0, 3, 6, 9, 12, 15
        assert_eq!(b.labels(), &[0, 0, 0, 1, 1, 1]);

        let rings = Dataset::new(
            "r",
            "rings",
            vec!["x".into()],
            DMatrix::from_element(4, 1, 0.0),
            vec![0, 1, 2, 1],
            vec!["7".into(), "10".into(), "9".into()],
        )
        .unwrap();
        let b = binarize(
            &rings,
            &BinarizeRule::Threshold {
                column: "rings".into(),
                value: 9.0,
            },
        )
        .unwrap();
        assert_eq!(b.labels(), &[0, 1, 0, 1]);
    }

    #[test]
    fn split_sizes_and_partition() {
        let d = small(150, 3);
        let (train, test) = split(&d, &SplitSpec::default()).unwrap();
        assert_eq!(train.n_instances(), 112);
        assert_eq!(test.n_instances(), 38);

        let d = small(336, 8);
        let (train, test) = split(&d, &SplitSpec::default()).unwrap();
        assert_eq!((train.n_instances(), test.n_instances()), (252, 84));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let d = small(40, 2);
        let spec = SplitSpec {
            seed: 17,
            ..Default::default()
        };
        let (a, b) = split(&d, &spec).unwrap();
        let (a2, _) = split(&d, &spec).unwrap();
        assert_eq!(a, a2);
        // Rows are unique in `small`, so the first feature identifies an instance.
        let mut ids: Vec<f64> = a
            .features()
            .column(0)
            .iter()
            .chain(b.features().column(0).iter())
            .copied()
            .collect();
        ids.sort_by(f64::total_cmp);
        ids.dedup();
        assert_eq!(ids.len(), 40);
    }

    #[test]
    fn stratified_split_keeps_proportions() {
        let d = small(100, 4);
        let spec = SplitSpec {
            stratified: true,
            seed: 3,
            ..Default::default()
        };
        let (train, test) = split(&d, &spec).unwrap();
        assert_eq!(train.n_instances(), 75);
        assert_eq!(test.n_instances(), 25);
        let counts = train.class_counts();
        assert!(counts.iter().all(|&c| c == 18 || c == 19), "{counts:?}");
    }

    #[test]
    fn fraction_just_below_one_floors_to_n_minus_one() {
        let d = small(10, 2);
        let spec = SplitSpec {
            train_fraction: 1.0 - f64::EPSILON / 2.0,
            ..Default::default()
        };
        let (train, test) = split(&d, &spec).unwrap();
        assert_eq!(train.n_instances(), 9);
        assert_eq!(test.n_instances(), 1);
    }

    #[test]
    fn split_rejects_tiny_train() {
        let d = small(3, 3);
        assert!(split(&d, &SplitSpec::default()).is_err());
        let bad = SplitSpec {
            train_fraction: 1.0,
            ..Default::default()
        };
        assert!(split(&small(10, 2), &bad).is_err());
    }

    #[test]
    fn normalization_edge_cases() {
        let single = small(1, 2).select(&[0]);
        let single = Dataset { labels: vec![0], ..single };
        let (t, _, _) = normalize(&single, &single).unwrap();
        assert!(t.features().iter().all(|&v| v == 0.0));

        let mut d = small(5, 2);
        d.features.column_mut(1).fill(0.1);
        let (t, test, stats) = normalize(&d, &d).unwrap();
        assert_eq!(stats.std[1], 0.0);
        assert!(t.features().column(1).iter().all(|&v| v == 0.0));
        assert!(test.features().column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn canonical_round_trip() {
        let d = small(7, 3);
        let (train, _, _) = normalize(&d, &d).unwrap();
        let text = train.to_canonical_string();
        let back = Dataset::from_canonical_str(&text).unwrap();
        assert_eq!(back, train);
        assert_eq!(back.to_canonical_string(), text);
    }
}
