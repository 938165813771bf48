//! Differentiable Cartesian-GP networks.
//!
//! A genotype lays nodes out on an `rows x cols` grid. Node ids follow the
//! inputs: input `i` has id `i`, the node in column `c`, row `r` has id
//! `n_inputs + c * rows + r`. A node in column `j` may read from nodes in
//! columns `j - levels_back ..= j - 1`, and from the inputs when
//! `j < levels_back`. Output genes may address any input or node.
//!
//! Every node computes `act(sum_k w_k * in_k + bias)`; the output genes pick
//! the logits that go through a row-wise softmax.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CgpError {
    #[error("invalid grid config: {0}")]
    Config(String),
    #[error("invalid genotype: {0}")]
    Genotype(String),
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: usize },
    #[error("input has {got} columns, network expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("label arity mismatch: network has {outputs} outputs, dataset has {classes} classes")]
    Arity { outputs: usize, classes: usize },
    #[error("genotype parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

type Result<T> = std::result::Result<T, CgpError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Relu,
        Activation::Identity,
    ];

    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output `y = apply(z)`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown activation `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    pub levels_back: usize,
    pub arity: usize,
    pub function_set: Vec<Activation>,
    pub n_inputs: usize,
    pub n_outputs: usize,
}

impl GridConfig {
    /// 10 x 5 grid, full levels-back, arity 5, all four activations.
    pub fn with_io(n_inputs: usize, n_outputs: usize) -> Self {
        Self {
            rows: 10,
            cols: 5,
            levels_back: 5,
            arity: 5,
            function_set: Activation::ALL.to_vec(),
            n_inputs,
            n_outputs,
        }
    }

    pub fn for_dataset(d: &Dataset) -> Self {
        Self::with_io(d.n_features(), d.n_classes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CgpError::Config(m.to_string()));
        if self.rows == 0 || self.cols == 0 {
            return bad("rows and cols must be positive");
        }
        if self.levels_back == 0 || self.levels_back > self.cols {
            return bad("levels_back must be in 1..=cols");
        }
        if self.arity == 0 {
            return bad("arity must be positive");
        }
        if self.function_set.is_empty() {
            return bad("function_set is empty");
        }
        if self.n_inputs == 0 || self.n_outputs == 0 {
            return bad("n_inputs and n_outputs must be positive");
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.rows * self.cols
    }

    pub fn node_id(&self, node_index: usize) -> usize {
        self.n_inputs + node_index
    }

    pub fn column_of(&self, node_index: usize) -> usize {
        node_index / self.rows
    }

    /// Number of legal connection sources for a node in `col`.
    fn source_count(&self, col: usize) -> usize {
        let first = col.saturating_sub(self.levels_back);
        let inputs = if col < self.levels_back { self.n_inputs } else { 0 };
        inputs + (col - first) * self.rows
    }

    /// The `k`-th legal source id for a node in `col`.
    fn source_id(&self, col: usize, k: usize) -> usize {
        let inputs = if col < self.levels_back { self.n_inputs } else { 0 };
        if k < inputs {
            k
        } else {
            let first = col.saturating_sub(self.levels_back);
            self.n_inputs + first * self.rows + (k - inputs)
        }
    }

    pub fn is_legal_source(&self, col: usize, id: usize) -> bool {
        if id < self.n_inputs {
            return col < self.levels_back;
        }
        let idx = id - self.n_inputs;
        if idx >= self.n_nodes() {
            return false;
        }
        let src_col = self.column_of(idx);
        src_col < col && src_col + self.levels_back >= col
    }

    pub fn is_legal_output(&self, id: usize) -> bool {
        id < self.n_inputs + self.n_nodes()
    }

    pub fn sample_source(&self, col: usize, rng: &mut Rng) -> usize {
        let k = rng.random_range(0..self.source_count(col));
        self.source_id(col, k)
    }

    pub fn sample_output(&self, rng: &mut Rng) -> usize {
        rng.random_range(0..self.n_inputs + self.n_nodes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutationRates {
    pub p_conn: f64,
    pub p_func: f64,
    pub p_weight_reset: f64,
}

impl Default for MutationRates {
    fn default() -> Self {
        Self {
            p_conn: 0.05,
            p_func: 0.05,
            p_weight_reset: 0.01,
        }
    }
}

impl MutationRates {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_conn", self.p_conn),
            ("p_func", self.p_func),
            ("p_weight_reset", self.p_weight_reset),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CgpError::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.05,
            batch_size: 32,
        }
    }
}

impl TrainParams {
    pub fn with_epochs(self, epochs: usize) -> Self {
        Self { epochs, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub config: GridConfig,
    pub function_genes: Vec<usize>,
    /// `arity` entries per node, node-major.
    pub connection_genes: Vec<usize>,
    /// `arity` entries per node, aligned with `connection_genes`.
    pub weight_genes: Vec<f64>,
    pub bias_genes: Vec<f64>,
    pub output_genes: Vec<usize>,
}

impl Genotype {
    pub fn random(config: &GridConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let n = config.n_nodes();
        let a = config.arity;
        let mut function_genes = Vec::with_capacity(n);
        let mut connection_genes = Vec::with_capacity(n * a);
        let mut weight_genes = Vec::with_capacity(n * a);
        for k in 0..n {
            let col = config.column_of(k);
            function_genes.push(rng.random_range(0..config.function_set.len()));
            for _ in 0..a {
                connection_genes.push(config.sample_source(col, rng));
                weight_genes.push(rng.random_range(-1.0f64..1.0));
            }
        }
        let output_genes = (0..config.n_outputs)
            .map(|_| config.sample_output(rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            function_genes,
            connection_genes,
            weight_genes,
            bias_genes: vec![0.0; n],
            output_genes,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let n = c.n_nodes();
        let a = c.arity;
        let bad = |m: String| Err(CgpError::Genotype(m));
        if self.function_genes.len() != n
            || self.connection_genes.len() != n * a
            || self.weight_genes.len() != n * a
            || self.bias_genes.len() != n
            || self.output_genes.len() != c.n_outputs
        {
            return bad("gene array lengths do not match the grid".into());
        }
        if let Some(f) = self.function_genes.iter().find(|&&f| f >= c.function_set.len()) {
            return bad(format!("function gene {f} out of range"));
        }
        for (g, &src) in self.connection_genes.iter().enumerate() {
            let col = c.column_of(g / a);
            if !c.is_legal_source(col, src) {
                return bad(format!("connection gene {g} = {src} is illegal for column {col}"));
            }
        }
        if let Some(o) = self.output_genes.iter().find(|&&o| !c.is_legal_output(o)) {
            return bad(format!("output gene {o} out of range"));
        }
        if self
            .weight_genes
            .iter()
            .chain(&self.bias_genes)
            .any(|v| !v.is_finite())
        {
            return bad("non-finite weight or bias".into());
        }
        Ok(())
    }

    /// Node indices (not ids) reachable backwards from the output genes, in
    /// increasing order.
    pub fn active_node_indices(&self) -> Vec<usize> {
        let c = &self.config;
        let mut active = vec![false; c.n_nodes()];
        let mut stack: Vec<usize> = self.output_genes.clone();
        while let Some(id) = stack.pop() {
            if id < c.n_inputs {
                continue;
            }
            let k = id - c.n_inputs;
            if active[k] {
                continue;
            }
            active[k] = true;
            stack.extend_from_slice(&self.connection_genes[k * c.arity..(k + 1) * c.arity]);
        }
        (0..c.n_nodes()).filter(|&k| active[k]).collect()
    }

    pub fn decode(&self) -> ActiveGraph {
        let c = &self.config;
        let a = c.arity;
        let nodes = self
            .active_node_indices()
            .into_iter()
            .map(|k| ActiveNode {
                id: c.node_id(k),
                node_index: k,
                function: c.function_set[self.function_genes[k]],
                inputs: self.connection_genes[k * a..(k + 1) * a].to_vec(),
                weights: self.weight_genes[k * a..(k + 1) * a].to_vec(),
                bias: self.bias_genes[k],
            })
            .collect();
        ActiveGraph {
            n_inputs: c.n_inputs,
            n_ids: c.n_inputs + c.n_nodes(),
            nodes,
            outputs: self.output_genes.clone(),
        }
    }

    /// Offspring by independent per-gene resampling. Draws happen in a fixed
    /// order (per node: connections, function, weights, bias; then outputs),
    /// so the result depends only on the parent and the stream.
    pub fn mutate(&self, rates: &MutationRates, rng: &mut Rng) -> Result<Self> {
        rates.validate()?;
        let mut child = self.clone();
        let c = &self.config;
        let a = c.arity;
        for k in 0..c.n_nodes() {
            let col = c.column_of(k);
            for g in k * a..(k + 1) * a {
                if rng.random::<f64>() < rates.p_conn {
                    child.connection_genes[g] = c.sample_source(col, rng);
                }
            }
            if rng.random::<f64>() < rates.p_func {
                child.function_genes[k] = rng.random_range(0..c.function_set.len());
            }
            for g in k * a..(k + 1) * a {
                if rng.random::<f64>() < rates.p_weight_reset {
                    child.weight_genes[g] = rng.random_range(-1.0f64..1.0);
                }
            }
            if rng.random::<f64>() < rates.p_weight_reset {
                child.bias_genes[k] = 0.0;
            }
        }
        for o in 0..c.n_outputs {
            if rng.random::<f64>() < rates.p_conn {
                child.output_genes[o] = c.sample_output(rng);
            }
        }
        Ok(child)
    }

    /// Cross-entropy loss over `x`/`labels` and its gradient with respect to
    /// every weight and bias gene. Genes of inactive nodes get zero gradient.
    pub fn loss_and_gradient(&self, x: &DMatrix<f64>, labels: &[usize]) -> Result<Gradient> {
        let graph = self.decode();
        Ok(graph.loss_and_gradient(x, labels, &self.config)?.1)
    }

    /// Mini-batch SGD on mean cross-entropy. Returns the trained genotype and
    /// the mean training loss of every epoch.
    pub fn sgd_train(
        &self,
        train: &Dataset,
        params: &TrainParams,
        rng: &mut Rng,
    ) -> Result<(Genotype, Vec<f64>)> {
        self.check_data(train)?;
        if params.epochs == 0 {
            return Ok((self.clone(), Vec::new()));
        }
        if params.batch_size == 0 {
            return Err(CgpError::Config("batch_size must be positive".into()));
        }
        let mut g = self.clone();
        let n = train.n_instances();
        let p = train.n_features();
        let x = train.features();
        let labels = train.labels();
        let mut order: Vec<usize> = (0..n).collect();
        let mut trace = Vec::with_capacity(params.epochs);
        let mut graph = g.decode();
        for _ in 0..params.epochs {
            order.shuffle(rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(params.batch_size) {
                let xb = DMatrix::from_fn(batch.len(), p, |i, j| x[(batch[i], j)]);
                let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let (loss, grad) = graph.loss_and_gradient(&xb, &yb, &g.config)?;
                epoch_loss += loss * batch.len() as f64;
                let a = g.config.arity;
                for node in &mut graph.nodes {
                    let k = node.node_index;
                    for i in 0..a {
                        let w = &mut g.weight_genes[k * a + i];
                        *w -= params.learning_rate * grad.weights[k * a + i];
                        node.weights[i] = *w;
                    }
                    g.bias_genes[k] -= params.learning_rate * grad.biases[k];
                    node.bias = g.bias_genes[k];
                }
            }
            trace.push(epoch_loss / n as f64);
        }
        Ok((g, trace))
    }

    /// Trains for `params.epochs` epochs, then returns the trained genotype and
    /// its classification error rate on `train`.
    pub fn true_fitness(
        &self,
        train: &Dataset,
        params: &TrainParams,
        rng: &mut Rng,
    ) -> Result<(Genotype, f64)> {
        let (trained, _) = self.sgd_train(train, params, rng)?;
        let err = trained.error_rate(train)?;
        Ok((trained, err))
    }

    pub fn error_rate(&self, d: &Dataset) -> Result<f64> {
        self.check_data(d)?;
        let pred = self.decode().predict(d.features())?;
        let wrong = pred.iter().zip(d.labels()).filter(|(p, l)| p != l).count();
        Ok(wrong as f64 / d.n_instances() as f64)
    }

    fn check_data(&self, d: &Dataset) -> Result<()> {
        if d.n_features() != self.config.n_inputs {
            return Err(CgpError::Dimension {
                expected: self.config.n_inputs,
                got: d.n_features(),
            });
        }
        if d.n_classes() != self.config.n_outputs {
            return Err(CgpError::Arity {
                outputs: self.config.n_outputs,
                classes: d.n_classes(),
            });
        }
        Ok(())
    }

    /// Line-oriented text form. Reals are written with 17 significant digits.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::from("saea-genotype v1\n");
        let _ = writeln!(s, "rows {}", c.rows);
        let _ = writeln!(s, "cols {}", c.cols);
        let _ = writeln!(s, "levels_back {}", c.levels_back);
        let _ = writeln!(s, "arity {}", c.arity);
        let fs: Vec<&str> = c.function_set.iter().map(|f| f.name()).collect();
        let _ = writeln!(s, "functions {}", fs.join(","));
        let _ = writeln!(s, "inputs {}", c.n_inputs);
        let _ = writeln!(s, "outputs {}", c.n_outputs);
        let ints = |s: &mut String, key: &str, v: &[usize]| {
            let _ = write!(s, "{key}");
            for x in v {
                let _ = write!(s, " {x}");
            }
            s.push('\n');
        };
        let reals = |s: &mut String, key: &str, v: &[f64]| {
            let _ = write!(s, "{key}");
            for x in v {
                let _ = write!(s, " {x:.16e}");
            }
            s.push('\n');
        };
        ints(&mut s, "function_genes", &self.function_genes);
        ints(&mut s, "connection_genes", &self.connection_genes);
        reals(&mut s, "weight_genes", &self.weight_genes);
        reals(&mut s, "bias_genes", &self.bias_genes);
        ints(&mut s, "output_genes", &self.output_genes);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = LineReader {
            lines: text.lines().enumerate(),
        };
        let (line, magic) = r.field("saea-genotype")?;
        if magic != ["v1"] {
            return Err(CgpError::Parse {
                line,
                message: "unsupported genotype version".into(),
            });
        }
        let rows = r.scalar("rows")?;
        let cols = r.scalar("cols")?;
        let levels_back = r.scalar("levels_back")?;
        let arity = r.scalar("arity")?;
        let (fl, ftoks) = r.field("functions")?;
        let function_set = match ftoks.as_slice() {
            [list] => list
                .split(',')
                .map(Activation::from_str)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|message| CgpError::Parse { line: fl, message })?,
            _ => {
                return Err(CgpError::Parse {
                    line: fl,
                    message: "`functions` takes one comma-separated list".into(),
                })
            }
        };
        let n_inputs = r.scalar("inputs")?;
        let n_outputs = r.scalar("outputs")?;
        let g = Genotype {
            config: GridConfig {
                rows,
                cols,
                levels_back,
                arity,
                function_set,
                n_inputs,
                n_outputs,
            },
            function_genes: r.list("function_genes")?,
            connection_genes: r.list("connection_genes")?,
            weight_genes: r.list("weight_genes")?,
            bias_genes: r.list("bias_genes")?,
            output_genes: r.list("output_genes")?,
        };
        g.validate()?;
        Ok(g)
    }
}

struct LineReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> LineReader<'a> {
    fn field(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (i, line) = self.lines.next().ok_or_else(|| CgpError::Parse {
            line: 0,
            message: format!("unexpected end of input, wanted `{key}`"),
        })?;
        let mut toks = line.split(' ');
        if toks.next() != Some(key) {
            return Err(CgpError::Parse {
                line: i + 1,
                message: format!("expected `{key}`"),
            });
        }
        Ok((i + 1, toks.filter(|t| !t.is_empty()).collect()))
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let (line, toks) = self.field(key)?;
        toks.iter()
            .map(|t| {
                t.parse().map_err(|_| CgpError::Parse {
                    line,
                    message: format!("bad value `{t}`"),
                })
            })
            .collect()
    }

    fn scalar(&mut self, key: &str) -> Result<usize> {
        let (line, toks) = self.field(key)?;
        match toks.as_slice() {
            [t] => t.parse().map_err(|_| CgpError::Parse {
                line,
                message: format!("bad value `{t}`"),
            }),
            _ => Err(CgpError::Parse {
                line,
                message: format!("`{key}` takes one value"),
            }),
        }
    }
}

/// Gradient of the mean cross-entropy, laid out like the genotype's weight and
/// bias genes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub loss: f64,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveNode {
    pub id: usize,
    pub node_index: usize,
    pub function: Activation,
    pub inputs: Vec<usize>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// The active part of a genotype, in evaluation order (ascending id, which
/// respects every dependency because sources always precede their readers).
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveGraph {
    pub n_inputs: usize,
    n_ids: usize,
    pub nodes: Vec<ActiveNode>,
    pub outputs: Vec<usize>,
}

impl ActiveGraph {
    /// Per-id value columns over all instances; inactive ids stay empty.
    fn node_values(&self, x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
        if x.ncols() != self.n_inputs {
            return Err(CgpError::Dimension {
                expected: self.n_inputs,
                got: x.ncols(),
            });
        }
        let n = x.nrows();
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); self.n_ids];
        for (j, v) in values.iter_mut().enumerate().take(self.n_inputs) {
            let col = x.column(j);
            if col.iter().any(|v| !v.is_finite()) {
                return Err(CgpError::NonFinite { node: j });
            }
            *v = col.iter().copied().collect();
        }
        for node in &self.nodes {
            let mut z = vec![node.bias; n];
            for (&src, &w) in node.inputs.iter().zip(&node.weights) {
                for (zi, &vi) in z.iter_mut().zip(&values[src]) {
                    *zi += w * vi;
                }
            }
            for zi in &mut z {
                *zi = node.function.apply(*zi);
                if !zi.is_finite() {
                    return Err(CgpError::NonFinite { node: node.id });
                }
            }
            values[node.id] = z;
        }
        Ok(values)
    }

    /// Raw output-node values, `n x n_outputs`.
    pub fn logits(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let values = self.node_values(x)?;
        Ok(DMatrix::from_fn(x.nrows(), self.outputs.len(), |i, o| {
            values[self.outputs[o]][i]
        }))
    }

    /// Softmax class probabilities, `n x n_outputs`.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = self.logits(x)?;
        for mut row in out.row_iter_mut() {
            let m = row.max();
            row.apply(|v| *v = (*v - m).exp());
            let s = row.sum();
            row /= s;
        }
        Ok(out)
    }

    /// Argmax class per instance, ties to the lowest index.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .row_iter()
            .map(|row| {
                let mut best = 0;
                for o in 1..row.len() {
                    if row[o] > row[best] {
                        best = o;
                    }
                }
                best
            })
            .collect())
    }

    fn loss_and_gradient(
        &self,
        x: &DMatrix<f64>,
        labels: &[usize],
        config: &GridConfig,
    ) -> Result<(f64, Gradient)> {
        let n = x.nrows();
        let values = self.node_values(x)?;
        let n_out = self.outputs.len();
        let mut upstream: Vec<Vec<f64>> = vec![Vec::new(); self.n_ids];
        let mut loss = 0.0;
        let inv_n = 1.0 / n as f64;
        let mut logits = vec![0.0; n_out];
        for i in 0..n {
            for (o, l) in logits.iter_mut().enumerate() {
                *l = values[self.outputs[o]][i];
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let lse = m + s.ln();
            loss += lse - logits[labels[i]];
            for (o, (&src, &logit)) in self.outputs.iter().zip(&logits).enumerate() {
                if src < self.n_inputs {
                    continue;
                }
                let p = (logit - lse).exp();
                let target = if labels[i] == o { 1.0 } else { 0.0 };
                let u = &mut upstream[src];
                if u.is_empty() {
                    u.resize(n, 0.0);
                }
                u[i] += (p - target) * inv_n;
            }
        }
        let a = config.arity;
        let mut weights = vec![0.0; config.n_nodes() * a];
        let mut biases = vec![0.0; config.n_nodes()];
        for node in self.nodes.iter().rev() {
            let up = std::mem::take(&mut upstream[node.id]);
            if up.is_empty() {
                continue;
            }
            let y = &values[node.id];
            let delta: Vec<f64> = up
                .iter()
                .zip(y)
                .map(|(u, &yi)| u * node.function.derivative_from_output(yi))
                .collect();
            let k = node.node_index;
            biases[k] = delta.iter().sum();
            for (i, (&src, &w)) in node.inputs.iter().zip(&node.weights).enumerate() {
                weights[k * a + i] += delta.iter().zip(&values[src]).map(|(d, v)| d * v).sum::<f64>();
                if src >= self.n_inputs {
                    let u = &mut upstream[src];
                    if u.is_empty() {
                        u.resize(n, 0.0);
                    }
                    for (ui, di) in u.iter_mut().zip(&delta) {
                        *ui += w * di;
                    }
                }
            }
        }
        let loss = loss * inv_n;
        Ok((
            loss,
            Gradient {
                loss,
                weights,
                biases,
            },
        ))
    }
}
