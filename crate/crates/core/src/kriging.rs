//! Ordinary Kriging with an anisotropic Gaussian correlation, optionally
//! through a PLS projection (see [`crate::kpls`]).
//!
//! Hyperparameters are fitted by maximizing the concentrated log-likelihood
//! over `log10 theta` with a multistart bounded Nelder–Mead search. Inputs and
//! targets are z-scored internally; predictions are returned on the original
//! target scale.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{nelder_mead, NelderMeadOptions, StopReason};
use crate::pls::PlsError;
use crate::rng;

#[derive(Debug, Error)]
pub enum KrigingError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("correlation matrix is not positive definite even with nugget {nugget:e}")]
    Indefinite { nugget: f64 },
    #[error(
        "fit exceeded its {budget:?} budget after {elapsed:?} ({evaluations} likelihood \
         evaluations, best log-likelihood {best_log_likelihood:?})"
    )]
    Timeout {
        budget: Duration,
        elapsed: Duration,
        evaluations: usize,
        best_log_likelihood: Option<f64>,
    },
    #[error("no start produced a finite likelihood")]
    NoFiniteLikelihood,
    #[error(transparent)]
    Pls(#[from] PlsError),
    #[error("invalid fit spec: {0}")]
    Spec(String),
    #[error("model file: {0}")]
    Persist(String),
}

type Result<T> = std::result::Result<T, KrigingError>;

/// Hyperparameter search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSpec {
    pub log10_theta_min: f64,
    pub log10_theta_max: f64,
    pub n_starts: usize,
    /// Likelihood evaluations per start; `None` means `200 * q`.
    pub max_evals_per_start: Option<usize>,
    /// Wall-clock budget for the whole fit.
    pub budget: Option<Duration>,
    pub nugget: f64,
    pub max_nugget: f64,
    /// Seeds the perturbation of starts after the first.
    pub seed: u64,
}

impl Default for FitSpec {
    fn default() -> Self {
        Self {
            log10_theta_min: -6.0,
            log10_theta_max: 2.0,
            n_starts: 5,
            max_evals_per_start: None,
            budget: None,
            nugget: 1e-10,
            max_nugget: 1e-6,
            seed: 0,
        }
    }
}

impl FitSpec {
    fn validate(&self) -> Result<()> {
        if self.log10_theta_min.partial_cmp(&self.log10_theta_max) != Some(std::cmp::Ordering::Less) {
            return Err(KrigingError::Spec("theta bounds are empty".into()));
        }
        if self.n_starts == 0 {
            return Err(KrigingError::Spec("n_starts must be positive".into()));
        }
        if !(self.nugget > 0.0 && self.nugget <= self.max_nugget) {
            return Err(KrigingError::Spec("need 0 < nugget <= max_nugget".into()));
        }
        Ok(())
    }

    pub fn evals_per_start(&self, q: usize) -> usize {
        self.max_evals_per_start.unwrap_or(200 * q)
    }
}

/// How the per-pair squared distances are formed.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Metric {
    /// One component per input dimension: `(x_k - x'_k)^2`.
    Anisotropic,
    /// One component per PLS direction: `sum_i w*_il^2 (x_i - x'_i)^2`.
    Projected {
        w_star: DMatrix<f64>,
        /// `w_star` squared, row-major `d x h`.
        w2: Vec<f64>,
    },
}

impl Metric {
    pub(crate) fn projected(w_star: DMatrix<f64>) -> Self {
        let (d, h) = w_star.shape();
        let mut w2 = Vec::with_capacity(d * h);
        for i in 0..d {
            for l in 0..h {
                w2.push(w_star[(i, l)] * w_star[(i, l)]);
            }
        }
        Metric::Projected { w_star, w2 }
    }

    fn q(&self, d: usize) -> usize {
        match self {
            Metric::Anisotropic => d,
            Metric::Projected { w_star, .. } => w_star.ncols(),
        }
    }

    /// Per-component squared distances between two rows. Fitting and
    /// prediction both go through here so the arithmetic is identical.
    fn components(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        match self {
            Metric::Anisotropic => {
                for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
                    let t = x - y;
                    *o = t * t;
                }
            }
            Metric::Projected { w2, .. } => {
                let h = out.len();
                out.iter_mut().for_each(|o| *o = 0.0);
                for (i, (x, y)) in a.iter().zip(b).enumerate() {
                    let t = x - y;
                    let t2 = t * t;
                    let w = &w2[i * h..(i + 1) * h];
                    for (o, wi) in out.iter_mut().zip(w) {
                        *o += wi * t2;
                    }
                }
            }
        }
    }
}

#[inline]
fn weighted_sum(theta: &[f64], dist: &[f64]) -> f64 {
    let mut s = 0.0;
    for (t, v) in theta.iter().zip(dist) {
        s += t * v;
    }
    s
}

/// Pairwise component distances of the training rows, pair-major in
/// `(0,1), (0,2), ..., (1,2), ...` order.
pub(crate) struct PairwiseDistances {
    m: usize,
    q: usize,
    data: Vec<f64>,
}

impl PairwiseDistances {
    fn new(rows: &[f64], m: usize, d: usize, metric: &Metric) -> Self {
        let q = metric.q(d);
        let mut data = vec![0.0; m * (m - 1) / 2 * q];
        let mut p = 0;
        for i in 0..m {
            for j in i + 1..m {
                metric.components(
                    &rows[i * d..(i + 1) * d],
                    &rows[j * d..(j + 1) * d],
                    &mut data[p * q..(p + 1) * q],
                );
                p += 1;
            }
        }
        Self { m, q, data }
    }

    /// Mean of every component over all pairs.
    fn component_means(&self) -> Vec<f64> {
        let npairs = self.data.len() / self.q.max(1);
        let mut means = vec![0.0; self.q];
        for pair in self.data.chunks_exact(self.q) {
            for (m, v) in means.iter_mut().zip(pair) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= npairs.max(1) as f64);
        means
    }

    /// Correlation matrix without nugget. Only the diagonal and the lower
    /// triangle are written, column by column in pair order; the Cholesky
    /// factorization reads nothing else.
    fn correlation(&self, theta: &[f64]) -> DMatrix<f64> {
        let m = self.m;
        let mut r = DMatrix::zeros(m, m);
        let mut pairs = self.data.chunks_exact(self.q);
        for (i, col) in r.as_mut_slice().chunks_exact_mut(m).enumerate() {
            col[i] = 1.0;
            for (c, dist) in col[i + 1..].iter_mut().zip(pairs.by_ref()) {
                *c = (-weighted_sum(theta, dist)).exp();
            }
        }
        r
    }
}

/// Gaussian correlation `R_ij = exp(-sum_k theta_k (z_ik - z_jk)^2)`.
pub fn build_correlation(z: &DMatrix<f64>, theta: &[f64]) -> Result<DMatrix<f64>> {
    if theta.len() != z.ncols() {
        return Err(KrigingError::Shape(format!(
            "{} length-scales for {} columns",
            theta.len(),
            z.ncols()
        )));
    }
    if z.iter().chain(theta).any(|v| !v.is_finite()) {
        return Err(KrigingError::NonFinite("correlation inputs"));
    }
    let rows = row_major(z);
    if z.nrows() < 2 {
        return Ok(DMatrix::identity(z.nrows(), z.nrows()));
    }
    let mut r = PairwiseDistances::new(&rows, z.nrows(), z.ncols(), &Metric::Anisotropic).correlation(theta);
    r.fill_upper_triangle_with_lower_triangle();
    Ok(r)
}

fn row_major(x: &DMatrix<f64>) -> Vec<f64> {
    x.transpose().as_slice().to_vec()
}

/// Quantities profiled out of the likelihood at fixed `theta`.
#[derive(Debug, Clone)]
pub struct Conditioned {
    pub log_likelihood: f64,
    pub beta: f64,
    pub sigma2: f64,
    pub nugget: f64,
    chol: Cholesky<f64, Dyn>,
    /// `L^-1 1`.
    a: DVector<f64>,
    /// `(R + nI)^-1 (y - 1 beta)`.
    alpha: DVector<f64>,
}

const SIGMA2_FLOOR: f64 = 1e-300;

/// Factorizes `R + nugget I`, escalating the nugget by 10x up to
/// `max_nugget` when the factorization fails. The factorization consumes its
/// input, so `build` is called again for every retry.
fn condition(
    build: impl Fn() -> DMatrix<f64>,
    y: &DVector<f64>,
    nugget: f64,
    max_nugget: f64,
) -> Result<Conditioned> {
    let m = y.len();
    let mut nug = nugget;
    let chol = loop {
        let mut rn = build();
        for i in 0..m {
            rn[(i, i)] += nug;
        }
        if let Some(c) = Cholesky::new(rn) {
            if c.l_dirty().diagonal().iter().all(|v| *v > 0.0 && v.is_finite()) {
                break c;
            }
        }
        let next = nug * 10.0;
        if next > max_nugget * (1.0 + 1e-9) {
            return Err(KrigingError::Indefinite { nugget: nug });
        }
        nug = next;
    };
    let l = chol.l_dirty();
    let ones = DVector::from_element(m, 1.0);
    let a = l
        .solve_lower_triangular(&ones)
        .ok_or(KrigingError::Indefinite { nugget: nug })?;
    let b = l
        .solve_lower_triangular(y)
        .ok_or(KrigingError::Indefinite { nugget: nug })?;
    let aa = a.dot(&a);
    let beta = a.dot(&b) / aa;
    let resid = &b - &a * beta;
    let sigma2 = (resid.norm_squared() / m as f64).max(SIGMA2_FLOOR);
    let log_det_half: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
    let log_likelihood = -0.5 * m as f64 * sigma2.ln() - log_det_half;
    let alpha = l
        .tr_solve_lower_triangular(&resid)
        .ok_or(KrigingError::Indefinite { nugget: nug })?;
    Ok(Conditioned {
        log_likelihood,
        beta,
        sigma2,
        nugget: nug,
        chol,
        a,
        alpha,
    })
}

/// Concentrated log-likelihood `-(m/2) ln sigma2 - sum ln C_ii` of `y` under
/// the anisotropic Gaussian kernel at `theta`, with no internal scaling.
pub fn concentrated_log_likelihood(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    theta: &[f64],
    nugget: f64,
) -> Result<Conditioned> {
    if z.nrows() != y.len() {
        return Err(KrigingError::Shape(format!(
            "{} rows but {} targets",
            z.nrows(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(KrigingError::NonFinite("targets"));
    }
    let r = build_correlation(z, theta)?;
    condition(|| r.clone(), y, nugget, nugget.max(1e-6))
}

/// z-score parameters; a constant column gets scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

fn mean_scale<'a>(values: impl Iterator<Item = &'a f64> + Clone, n: usize) -> (f64, f64) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    (mean, if sd > 0.0 && sd.is_finite() { sd } else { 1.0 })
}

impl Scaling {
    fn fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let m = x.nrows();
        let (x_mean, x_scale) = x
            .column_iter()
            .map(|c| mean_scale(c.iter(), m))
            .unzip();
        let (y_mean, y_scale) = mean_scale(y.iter(), m);
        Self {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        }
    }

    fn x_row(&self, x: &[f64], out: &mut [f64]) {
        for (k, (o, v)) in out.iter_mut().zip(x).enumerate() {
            *o = (v - self.x_mean[k]) / self.x_scale[k];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics {
    /// Dimension of the hyperparameter search (`d` or `h`).
    pub n_hyperparameters: usize,
    pub evals_per_start: Vec<usize>,
    pub best_start: usize,
    pub elapsed: Duration,
}

impl FitDiagnostics {
    pub fn total_evals(&self) -> usize {
        self.evals_per_start.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

/// A fitted Kriging or KPLS surrogate.
#[derive(Debug, Clone)]
pub struct KrigingModel {
    m: usize,
    d: usize,
    /// Normalized training inputs, row-major `m x d`.
    x_rows: Vec<f64>,
    y: DVector<f64>,
    theta: Vec<f64>,
    metric: Metric,
    scaling: Scaling,
    cond: Conditioned,
    aa: f64,
    diagnostics: Option<FitDiagnostics>,
}

pub(crate) struct Prepared {
    pub(crate) m: usize,
    pub(crate) d: usize,
    /// Normalized inputs, row-major.
    pub(crate) x_rows: Vec<f64>,
    pub(crate) y: DVector<f64>,
    scaling: Scaling,
}

pub(crate) fn prepare(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Prepared> {
    let (m, d) = x.shape();
    if m < 2 {
        return Err(KrigingError::TooFewSamples(m));
    }
    if y.len() != m {
        return Err(KrigingError::Shape(format!("{m} rows but {} targets", y.len())));
    }
    if d == 0 {
        return Err(KrigingError::Shape("zero input dimensions".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(KrigingError::NonFinite("inputs"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(KrigingError::NonFinite("targets"));
    }
    let scaling = Scaling::fit(x, y);
    let mut x_rows = vec![0.0; m * d];
    let mut row = vec![0.0; d];
    for i in 0..m {
        for (k, r) in row.iter_mut().enumerate() {
            *r = x[(i, k)];
        }
        scaling.x_row(&row, &mut x_rows[i * d..(i + 1) * d]);
    }
    let y_n = y.map(|v| (v - scaling.y_mean) / scaling.y_scale);
    Ok(Prepared {
        m,
        d,
        x_rows,
        y: y_n,
        scaling,
    })
}

/// Concentrated log-likelihood of a training set under the anisotropic
/// kernel as a function of the length-scales. Inputs are normalized and
/// pairwise distances computed once, as in the hyperparameter search, so
/// [`Self::evaluate`] costs exactly one search step.
pub struct Likelihood {
    dist: PairwiseDistances,
    y: DVector<f64>,
    nugget: f64,
    max_nugget: f64,
}

impl Likelihood {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, spec: &FitSpec) -> Result<Self> {
        spec.validate()?;
        let p = prepare(x, y)?;
        Ok(Self {
            dist: PairwiseDistances::new(&p.x_rows, p.m, p.d, &Metric::Anisotropic),
            y: p.y,
            nugget: spec.nugget,
            max_nugget: spec.max_nugget,
        })
    }

    pub fn n_hyperparameters(&self) -> usize {
        self.dist.q
    }

    /// Log-likelihood and the nugget that made the factorization succeed.
    pub fn evaluate(&self, theta: &[f64]) -> Result<(f64, f64)> {
        if theta.len() != self.dist.q {
            return Err(KrigingError::Shape(format!(
                "{} length-scales for {} dimensions",
                theta.len(),
                self.dist.q
            )));
        }
        let c = condition(|| self.dist.correlation(theta), &self.y, self.nugget, self.max_nugget)?;
        Ok((c.log_likelihood, c.nugget))
    }
}

impl KrigingModel {
    /// Plain Kriging: one length-scale per input dimension.
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, spec: &FitSpec) -> Result<Self> {
        let p = prepare(x, y)?;
        Self::fit_prepared(p, Metric::Anisotropic, spec, Instant::now())
    }

    /// Plain Kriging conditioned at fixed length-scales, no search.
    pub fn fit_with_theta(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        theta: &[f64],
        spec: &FitSpec,
    ) -> Result<Self> {
        let p = prepare(x, y)?;
        Self::condition_prepared(p, Metric::Anisotropic, theta, spec)
    }

    pub(crate) fn fit_metric(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        metric: Metric,
        spec: &FitSpec,
    ) -> Result<Self> {
        let p = prepare(x, y)?;
        if let Metric::Projected { w_star, .. } = &metric {
            if w_star.nrows() != p.d {
                return Err(KrigingError::Shape(format!(
                    "projection has {} rows for {} inputs",
                    w_star.nrows(),
                    p.d
                )));
            }
        }
        Self::fit_prepared(p, metric, spec, Instant::now())
    }

    pub(crate) fn condition_metric(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        metric: Metric,
        theta: &[f64],
        spec: &FitSpec,
    ) -> Result<Self> {
        let p = prepare(x, y)?;
        Self::condition_prepared(p, metric, theta, spec)
    }

    fn condition_prepared(p: Prepared, metric: Metric, theta: &[f64], spec: &FitSpec) -> Result<Self> {
        spec.validate()?;
        let q = metric.q(p.d);
        if theta.len() != q || theta.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(KrigingError::Shape(format!(
                "need {q} positive length-scales, got {:?}",
                theta
            )));
        }
        let dist = PairwiseDistances::new(&p.x_rows, p.m, p.d, &metric);
        let cond = condition(|| dist.correlation(theta), &p.y, spec.nugget, spec.max_nugget)?;
        Ok(Self::assemble(p, metric, theta.to_vec(), cond, None))
    }

    pub(crate) fn fit_prepared(
        p: Prepared, metric: Metric, spec: &FitSpec, start: Instant) -> Result<Self> {
        spec.validate()?;
        let deadline = spec.budget.map(|b| start + b);
        let q = metric.q(p.d);
        let dist = PairwiseDistances::new(&p.x_rows, p.m, p.d, &metric);

        let (lo, hi) = (spec.log10_theta_min, spec.log10_theta_max);
        let heuristic: Vec<f64> = dist
            .component_means()
            .iter()
            .map(|&mk| {
                let t = if mk > 0.0 { 1.0 / (q as f64 * mk) } else { 1.0 };
                t.log10().clamp(lo, hi)
            })
            .collect();
        let mut rng = rng::seeded(spec.seed);
        let starts: Vec<Vec<f64>> = (0..spec.n_starts)
            .map(|s| {
                if s == 0 {
                    heuristic.clone()
                } else {
                    heuristic
                        .iter()
                        .map(|v| (v + rng.random_range(-1.0f64..1.0)).clamp(lo, hi))
                        .collect()
                }
            })
            .collect();

        let opts = NelderMeadOptions::bounded(lo, hi, spec.evals_per_start(q));
        let mut theta_buf = vec![0.0; q];
        let mut objective = |log_theta: &[f64]| {
            for (t, l) in theta_buf.iter_mut().zip(log_theta) {
                *t = 10f64.powf(*l);
            }
            match condition(|| dist.correlation(&theta_buf), &p.y, spec.nugget, spec.max_nugget) {
                Ok(c) if c.log_likelihood.is_finite() => -c.log_likelihood,
                _ => f64::INFINITY,
            }
        };

        let mut evals_per_start = Vec::with_capacity(spec.n_starts);
        let mut best: Option<(usize, Vec<f64>, f64)> = None;
        for (s, x0) in starts.iter().enumerate() {
            let res = nelder_mead(&mut objective, x0, &opts, deadline);
            evals_per_start.push(res.evals);
            if res.f.is_finite() && best.as_ref().is_none_or(|(_, _, f)| res.f < *f) {
                best = Some((s, res.x.clone(), res.f));
            }
            if res.stop == StopReason::Deadline {
                return Err(KrigingError::Timeout {
                    budget: spec.budget.unwrap_or_default(),
                    elapsed: start.elapsed(),
                    evaluations: evals_per_start.iter().sum(),
                    best_log_likelihood: best.map(|(_, _, f)| -f),
                });
            }
        }
        let (best_start, log_theta, _) = best.ok_or(KrigingError::NoFiniteLikelihood)?;
        let theta: Vec<f64> = log_theta.iter().map(|l| 10f64.powf(*l)).collect();
        let cond = condition(|| dist.correlation(&theta), &p.y, spec.nugget, spec.max_nugget)?;
        let diagnostics = FitDiagnostics {
            n_hyperparameters: q,
            evals_per_start,
            best_start,
            elapsed: start.elapsed(),
        };
        Ok(Self::assemble(p, metric, theta, cond, Some(diagnostics)))
    }

    fn assemble(
        p: Prepared,
        metric: Metric,
        theta: Vec<f64>,
        cond: Conditioned,
        diagnostics: Option<FitDiagnostics>,
    ) -> Self {
        let aa = cond.a.dot(&cond.a);
        Self {
            m: p.m,
            d: p.d,
            x_rows: p.x_rows,
            y: p.y,
            theta,
            metric,
            scaling: p.scaling,
            cond,
            aa,
            diagnostics,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        if x.len() != self.d {
            return Err(KrigingError::Shape(format!(
                "input has {} entries, model expects {}",
                x.len(),
                self.d
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(KrigingError::NonFinite("prediction input"));
        }
        let mut xn = vec![0.0; self.d];
        self.scaling.x_row(x, &mut xn);
        let q = self.theta.len();
        let mut comp = vec![0.0; q];
        let nugget = self.cond.nugget;
        let r = DVector::from_fn(self.m, |i, _| {
            let row = &self.x_rows[i * self.d..(i + 1) * self.d];
            self.metric.components(&xn, row, &mut comp);
            let k = (-weighted_sum(&self.theta, &comp)).exp();
            // The nugget belongs to the kernel at zero lag, so a query that
            // coincides with a training row sees the same diagonal entry.
            if row == xn.as_slice() {
                k + nugget
            } else {
                k
            }
        });
        let mean_n = self.cond.beta + r.dot(&self.cond.alpha);
        let s = self
            .cond
            .chol
            .l_dirty()
            .solve_lower_triangular(&r)
            .ok_or(KrigingError::Indefinite { nugget })?;
        let u = 1.0 - self.cond.a.dot(&s);
        let var_n = self.cond.sigma2 * (1.0 - s.norm_squared() + u * u / self.aa);
        Ok(Prediction {
            mean: mean_n * self.scaling.y_scale + self.scaling.y_mean,
            variance: var_n.max(0.0) * self.scaling.y_scale * self.scaling.y_scale,
        })
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    pub fn n_samples(&self) -> usize {
        self.m
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn nugget(&self) -> f64 {
        self.cond.nugget
    }

    /// Trend on the normalized target scale.
    pub fn beta(&self) -> f64 {
        self.cond.beta
    }

    /// Process variance on the normalized target scale.
    pub fn sigma2(&self) -> f64 {
        self.cond.sigma2
    }

    pub fn log_likelihood(&self) -> f64 {
        self.cond.log_likelihood
    }

    pub fn scaling(&self) -> &Scaling {
        &self.scaling
    }

    pub fn normalized_inputs(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m, self.d, &self.x_rows)
    }

    pub fn normalized_targets(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn projection(&self) -> Option<&DMatrix<f64>> {
        match &self.metric {
            Metric::Anisotropic => None,
            Metric::Projected { w_star, .. } => Some(w_star),
        }
    }

    pub fn diagnostics(&self) -> Option<&FitDiagnostics> {
        self.diagnostics.as_ref()
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            m: self.m,
            d: self.d,
            x: self.x_rows.clone(),
            y: self.y.as_slice().to_vec(),
            theta: self.theta.clone(),
            nugget: self.cond.nugget,
            beta: self.cond.beta,
            sigma2: self.cond.sigma2,
            scaling: self.scaling.clone(),
            projection: self.projection().map(|w| Projection {
                rows: w.nrows(),
                cols: w.ncols(),
                values: row_major(w),
            }),
        };
        serde_json::to_string(&file).expect("model serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ModelFile =
            serde_json::from_str(text).map_err(|e| KrigingError::Persist(e.to_string()))?;
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(KrigingError::Persist(format!(
                "unsupported container {} v{}",
                f.format, f.version
            )));
        }
        if f.x.len() != f.m * f.d || f.y.len() != f.m || f.m < 2 {
            return Err(KrigingError::Persist("inconsistent dimensions".into()));
        }
        let metric = match f.projection {
            None => Metric::Anisotropic,
            Some(p) => {
                if p.rows != f.d || p.values.len() != p.rows * p.cols {
                    return Err(KrigingError::Persist("inconsistent projection".into()));
                }
                Metric::projected(DMatrix::from_row_slice(p.rows, p.cols, &p.values))
            }
        };
        if f.theta.len() != metric.q(f.d) {
            return Err(KrigingError::Persist("length-scale count mismatch".into()));
        }
        let y = DVector::from_vec(f.y);
        let dist = PairwiseDistances::new(&f.x, f.m, f.d, &metric);
        // The stored nugget already succeeded once; do not escalate further.
        let cond = condition(|| dist.correlation(&f.theta), &y, f.nugget, f.nugget)?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300);
        if !close(cond.beta, f.beta) || !close(cond.sigma2, f.sigma2) {
            return Err(KrigingError::Persist(
                "stored trend or variance disagrees with the refactorized model".into(),
            ));
        }
        let p = Prepared {
            m: f.m,
            d: f.d,
            x_rows: f.x,
            y,
            scaling: f.scaling,
        };
        Ok(Self::assemble(p, metric, f.theta, cond, None))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| KrigingError::Persist(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| KrigingError::Persist(e.to_string()))?;
        Self::from_json(&text)
    }
}

const MODEL_FORMAT: &str = "saea-kriging-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Projection {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    m: usize,
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    theta: Vec<f64>,
    nugget: f64,
    beta: f64,
    sigma2: f64,
    scaling: Scaling,
    projection: Option<Projection>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sin_data(m: usize) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(m, 1, |i, _| i as f64 / (m - 1) as f64);
        let y = x.map(|v| (2.0 * std::f64::consts::PI * v).sin()).column(0).into_owned();
        (x, y)
    }

    fn random_problem(m: usize, d: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = seeded(seed);
        let x = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0f64..1.0));
        let y = DVector::from_fn(m, |i, _| (x.row(i).sum() * 2.0).sin() + x[(i, 0)]);
        (x, y)
    }

    #[test]
    fn correlation_basics() {
        let z = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let r = build_correlation(&z, &[1.0]).unwrap();
        assert_eq!(r[(0, 0)], 1.0);
        assert!((r[(0, 1)] - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(r[(0, 1)], r[(1, 0)]);
        let dup = DMatrix::from_row_slice(2, 2, &[0.3, 0.4, 0.3, 0.4]);
        assert_eq!(build_correlation(&dup, &[5.0, 5.0]).unwrap()[(0, 1)], 1.0);
        assert!(build_correlation(&z, &[f64::NAN]).is_err());
        assert!(build_correlation(&z, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn duplicated_points_stay_finite() {
        let z = DMatrix::from_row_slice(2, 1, &[0.5, 0.5]);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let c = concentrated_log_likelihood(&z, &y, &[1.0], 1e-10).unwrap();
        assert!(c.log_likelihood.is_finite());
        let same = DVector::from_vec(vec![3.0, 3.0]);
        let c = concentrated_log_likelihood(&z, &same, &[1.0], 1e-10).unwrap();
        assert!(c.log_likelihood.is_finite());
        assert!(c.sigma2 < 1e-20);
    }

    #[test]
    fn constant_targets_recover_the_constant() {
        let (x, _) = random_problem(6, 2, 3);
        let y = DVector::from_element(6, 4.25);
        let c = concentrated_log_likelihood(&x, &y, &[1.0, 2.0], 1e-10).unwrap();
        assert!((c.beta - 4.25).abs() < 1e-9);
        assert!(c.sigma2 < 1e-20);
    }

    #[test]
    fn fits_a_sine() {
        let (x, y) = sin_data(10);
        let model = KrigingModel::fit(&x, &y, &FitSpec::default()).unwrap();
        let grid = 201;
        let mut se = 0.0;
        for i in 0..grid {
            let t = i as f64 / (grid - 1) as f64;
            let p = model.predict(&[t]).unwrap();
            se += (p.mean - (2.0 * std::f64::consts::PI * t).sin()).powi(2);
        }
        let rmse = (se / grid as f64).sqrt();
        assert!(rmse < 0.05, "rmse {rmse}");
    }

    #[test]
    fn two_samples_still_fit() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, -1.0]);
        let model = KrigingModel::fit(&x, &y, &FitSpec::default()).unwrap();
        let p = model.predict(&[0.0]).unwrap();
        assert!((p.mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn interpolates_training_points() {
        let (x, y) = random_problem(12, 3, 5);
        let model = KrigingModel::fit(&x, &y, &FitSpec::default()).unwrap();
        let ynorm = y.norm();
        for i in 0..12 {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let p = model.predict(&row).unwrap();
            assert!((p.mean - y[i]).abs() <= 10.0 * model.nugget() * ynorm);
            assert!(p.variance <= 10.0 * model.nugget() * model.sigma2() * model.scaling().y_scale.powi(2));
        }
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let (x, y) = random_problem(8, 2, 7);
        let model = KrigingModel::fit(&x, &y, &FitSpec::default()).unwrap();
        let p = model.predict(&[1e6, -1e6]).unwrap();
        let s = model.scaling();
        let beta = model.beta() * s.y_scale + s.y_mean;
        assert!((p.mean - beta).abs() < 1e-9);
        let expected = model.sigma2() * (1.0 + 1.0 / model.aa) * s.y_scale * s.y_scale;
        assert!((p.variance - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn budget_and_diagnostics() {
        let (x, y) = random_problem(10, 2, 9);
        let spec = FitSpec {
            max_evals_per_start: Some(17),
            ..Default::default()
        };
        let model = KrigingModel::fit(&x, &y, &spec).unwrap();
        let diag = model.diagnostics().unwrap();
        assert_eq!(diag.n_hyperparameters, 2);
        assert_eq!(diag.evals_per_start.len(), 5);
        assert!(diag.evals_per_start.iter().all(|&e| e <= 17));
    }

    #[test]
    fn zero_budget_times_out() {
        let (x, y) = random_problem(10, 2, 9);
        let spec = FitSpec {
            budget: Some(Duration::ZERO),
            ..Default::default()
        };
        match KrigingModel::fit(&x, &y, &spec) {
            Err(KrigingError::Timeout { evaluations, .. }) => assert_eq!(evaluations, 0),
            other => panic!("expected timeout, got {other:?}"),
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let (x, y) = random_problem(10, 3, 1);
        let a = KrigingModel::fit(&x, &y, &FitSpec::default()).unwrap();
        let b = KrigingModel::fit(&x, &y, &FitSpec::default()).unwrap();
        assert_eq!(a.theta(), b.theta());
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn json_round_trip() {
        let (x, y) = random_problem(9, 2, 2);
        let model = KrigingModel::fit(&x, &y, &FitSpec::default()).unwrap();
        let back = KrigingModel::from_json(&model.to_json()).unwrap();
        let q = [0.1, -0.3];
        assert_eq!(model.predict(&q).unwrap(), back.predict(&q).unwrap());
        let tampered = model.to_json().replace("\"version\":1", "\"version\":2");
        assert!(KrigingModel::from_json(&tampered).is_err());
    }

    #[test]
    fn dimension_mismatch_on_predict() {
        let (x, y) = random_problem(5, 2, 2);
        let model = KrigingModel::fit_with_theta(&x, &y, &[1.0, 1.0], &FitSpec::default()).unwrap();
        assert!(model.predict(&[0.0]).is_err());
    }

    #[test]
    fn likelihood_surface_agrees_with_the_fitted_model() {
        let (x, y) = random_problem(12, 3, 4);
        let spec = FitSpec::default();
        let model = KrigingModel::fit(&x, &y, &spec).unwrap();
        let surface = Likelihood::new(&x, &y, &spec).unwrap();
        assert_eq!(surface.n_hyperparameters(), 3);
        let (ll, nugget) = surface.evaluate(model.theta()).unwrap();
        assert_eq!(ll, model.log_likelihood());
        assert_eq!(nugget, model.nugget());
        assert!(surface.evaluate(&[1.0]).is_err());
    }
}
