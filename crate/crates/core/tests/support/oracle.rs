//! Brute-force reference implementations for the test suites. They favour
//! the textbook formulas (explicit inverses, recursion) over speed.
#![allow(dead_code)]

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use saea_core::{Activation, Genotype};

/// z-score with the sample standard deviation; constant columns keep scale 1.
pub struct Zscore {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: f64,
    pub y_scale: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (mean, if sd > 0.0 { sd } else { 1.0 })
}

impl Zscore {
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let (x_mean, x_scale) = (0..x.ncols())
            .map(|j| mean_sd(&x.column(j).iter().copied().collect::<Vec<_>>()))
            .unzip();
        let (y_mean, y_scale) = mean_sd(y.as_slice());
        Self {
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        }
    }

    pub fn x(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| (v - self.x_mean[j]) / self.x_scale[j])
            .collect()
    }
}

pub fn gaussian(a: &[f64], b: &[f64], theta: &[f64]) -> f64 {
    let s: f64 = (0..a.len()).map(|k| theta[k] * (a[k] - b[k]).powi(2)).sum();
    (-s).exp()
}

/// Ordinary Kriging through an explicit inverse of `R + nugget I`.
pub struct ExplicitKriging {
    pub zs: Zscore,
    pub z: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
    pub rinv: DMatrix<f64>,
    pub beta: f64,
    pub sigma2: f64,
    pub log_likelihood: f64,
    pub alpha: DVector<f64>,
}

impl ExplicitKriging {
    /// `theta` acts on normalized inputs.
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>, theta: &[f64], nugget: f64) -> Self {
        let zs = Zscore::fit(x, y);
        let m = x.nrows();
        let z: Vec<Vec<f64>> = (0..m)
            .map(|i| zs.x(&x.row(i).iter().copied().collect::<Vec<_>>()))
            .collect();
        let yn = y.map(|v| (v - zs.y_mean) / zs.y_scale);
        let r = DMatrix::from_fn(m, m, |i, j| {
            gaussian(&z[i], &z[j], theta) + if i == j { nugget } else { 0.0 }
        });
        let rinv = r.clone().try_inverse().expect("invertible correlation matrix");
        let ones = DVector::from_element(m, 1.0);
        let beta = (ones.transpose() * &rinv * &yn)[0] / (ones.transpose() * &rinv * &ones)[0];
        let resid = &yn - &ones * beta;
        let sigma2 = (resid.transpose() * &rinv * &resid)[0] / m as f64;
        let det = r.determinant();
        let log_likelihood = -0.5 * m as f64 * sigma2.ln() - 0.5 * det.ln();
        let alpha = &rinv * resid;
        Self {
            zs,
            z,
            theta: theta.to_vec(),
            rinv,
            beta,
            sigma2,
            log_likelihood,
            alpha,
        }
    }

    /// (mean, variance) on the original target scale.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let q = self.zs.x(x);
        let m = self.z.len();
        let r = DVector::from_fn(m, |i, _| gaussian(&q, &self.z[i], &self.theta));
        let ones = DVector::from_element(m, 1.0);
        let mean = self.beta + r.dot(&self.alpha);
        let rr = (r.transpose() * &self.rinv * &r)[0];
        let one_r = (ones.transpose() * &self.rinv * &r)[0];
        let one_one = (ones.transpose() * &self.rinv * &ones)[0];
        let var = self.sigma2 * (1.0 - rr + (1.0 - one_r).powi(2) / one_one);
        (
            mean * self.zs.y_scale + self.zs.y_mean,
            var.max(0.0) * self.zs.y_scale * self.zs.y_scale,
        )
    }
}

/// Least squares through the normal equations, `(X'X)^-1 X'y`.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let xtx = x.transpose() * x;
    xtx.try_inverse().expect("full column rank") * x.transpose() * y
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Node ids reachable backwards from the output genes, by fixpoint iteration.
pub fn reachable(g: &Genotype) -> BTreeSet<usize> {
    let n_in = g.config.n_inputs;
    let a = g.config.arity;
    let mut marked: BTreeSet<usize> = g.output_genes.iter().copied().filter(|&o| o >= n_in).collect();
    loop {
        let before = marked.len();
        let snapshot: Vec<usize> = marked.iter().copied().collect();
        for id in snapshot {
            let k = id - n_in;
            for &src in &g.connection_genes[k * a..(k + 1) * a] {
                if src >= n_in {
                    marked.insert(src);
                }
            }
        }
        if marked.len() == before {
            return marked;
        }
    }
}

fn activate(f: Activation, z: f64) -> f64 {
    match f {
        Activation::Tanh => (z.exp() - (-z).exp()) / (z.exp() + (-z).exp()),
        Activation::Sigmoid => z.exp() / (1.0 + z.exp()),
        Activation::Relu => {
            if z > 0.0 {
                z
            } else {
                0.0
            }
        }
        Activation::Identity => z,
    }
}

fn node_value(g: &Genotype, id: usize, x: &[f64]) -> f64 {
    let n_in = g.config.n_inputs;
    if id < n_in {
        return x[id];
    }
    let k = id - n_in;
    let a = g.config.arity;
    let mut s = g.bias_genes[k];
    for i in 0..a {
        s += g.weight_genes[k * a + i] * node_value(g, g.connection_genes[k * a + i], x);
    }
    activate(g.config.function_set[g.function_genes[k]], s)
}

/// Softmax of the output node values for one input row, by direct recursion
/// over the genotype.
pub fn recursive_forward(g: &Genotype, x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = g.output_genes.iter().map(|&o| node_value(g, o, x)).collect();
    let e: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for t in i..=j {
            r[idx[t]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(pairs: &[(f64, f64)]) -> f64 {
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (ra, rb) = (ranks(&a), ranks(&b));
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// A random small grid, genotype with random non-zero biases, and a batch of
/// inputs with labels.
pub fn random_small_network(seed: u64) -> (Genotype, DMatrix<f64>, Vec<usize>) {
    use rand::{Rng, SeedableRng};
    use saea_core::GridConfig;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n_in = rng.random_range(1..4);
    let n_out = rng.random_range(2..4);
    let cols = rng.random_range(1..4);
    let config = GridConfig {
        rows: rng.random_range(1..4),
        cols,
        levels_back: rng.random_range(1..=cols),
        arity: rng.random_range(1..4),
        function_set: Activation::ALL.to_vec(),
        n_inputs: n_in,
        n_outputs: n_out,
    };
    let mut g = Genotype::random(&config, &mut rng).unwrap();
    for b in &mut g.bias_genes {
        *b = rng.random_range(-1.0f64..1.0);
    }
    let n = 6;
    let x = DMatrix::from_fn(n, n_in, |_, _| rng.random_range(-2.0f64..2.0));
    let labels = (0..n).map(|_| rng.random_range(0..n_out)).collect();
    (g, x, labels)
}

/// Largest relative disagreement between the analytic gradient and central
/// differences over every active weight and bias. Relative errors use
/// `max(|analytic|, |numeric|, floor)` as denominator so that gradients that
/// vanish analytically are compared on an absolute scale of `floor`.
pub fn max_gradient_error(g: &Genotype, x: &DMatrix<f64>, labels: &[usize], step: f64, floor: f64) -> f64 {
    let analytic = g.loss_and_gradient(x, labels).unwrap();
    let a = g.config.arity;
    let loss = |h: &Genotype| h.loss_and_gradient(x, labels).unwrap().loss;
    let mut worst: f64 = 0.0;
    let mut compare = |an: f64, num: f64| {
        let err = (an - num).abs() / an.abs().max(num.abs()).max(floor);
        worst = worst.max(err);
    };
    for k in g.active_node_indices() {
        for i in 0..a {
            let idx = k * a + i;
            let mut p = g.clone();
            p.weight_genes[idx] += step;
            let mut m = g.clone();
            m.weight_genes[idx] -= step;
            compare(analytic.weights[idx], (loss(&p) - loss(&m)) / (2.0 * step));
        }
        let mut p = g.clone();
        p.bias_genes[k] += step;
        let mut m = g.clone();
        m.bias_genes[k] -= step;
        compare(analytic.biases[k], (loss(&p) - loss(&m)) / (2.0 * step));
    }
    worst
}

/// 2-norm condition number of the Gaussian correlation matrix plus nugget.
pub fn condition_number(z: &DMatrix<f64>, theta: &[f64], nugget: f64) -> f64 {
    let m = z.nrows();
    let rows: Vec<Vec<f64>> = (0..m).map(|i| z.row(i).iter().copied().collect()).collect();
    let r = DMatrix::from_fn(m, m, |i, j| {
        gaussian(&rows[i], &rows[j], theta) + if i == j { nugget } else { 0.0 }
    });
    let sv = r.svd(false, false).singular_values;
    sv.max() / sv.min()
}
