//! Kriging with a PLS-compressed Gaussian kernel.
//!
//! The kernel between `x` and `x'` is
//! `exp(-sum_l theta_l sum_i w*_il^2 (x_i - x'_i)^2)`, so only `h` length
//! scales are searched whatever the input dimension.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::kriging::{prepare, FitSpec, KrigingError, KrigingModel, Metric};
use crate::pls::fit_pls;

/// KPLS kernel value between two raw vectors.
pub fn kpls_kernel(x: &[f64], x2: &[f64], w_star: &DMatrix<f64>, theta: &[f64]) -> f64 {
    assert_eq!(x.len(), x2.len(), "kernel inputs differ in length");
    assert_eq!(x.len(), w_star.nrows(), "projection rows must match the input length");
    assert_eq!(theta.len(), w_star.ncols(), "one length-scale per component");
    let mut s = 0.0;
    for (l, t) in theta.iter().enumerate() {
        let mut dl = 0.0;
        for i in 0..x.len() {
            let diff = x[i] - x2[i];
            dl += w_star[(i, l)] * w_star[(i, l)] * diff * diff;
        }
        s += t * dl;
    }
    (-s).exp()
}

/// Normalizes `x` and `y`, extracts `h` PLS directions from the normalized
/// data, then searches the `h` length-scales. The wall-clock budget covers
/// the PLS step as well.
pub fn fit_kpls(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    h: usize,
    spec: &FitSpec,
) -> Result<KrigingModel, KrigingError> {
    let start = Instant::now();
    let p = prepare(x, y)?;
    // z-scored columns are already centered.
    let xn = DMatrix::from_row_slice(p.m, p.d, &p.x_rows);
    let rotation = fit_pls(&xn, &p.y, h)?;
    KrigingModel::fit_prepared(p, Metric::projected(rotation.w_star), spec, start)
}

/// KPLS with a caller-supplied `d x h` projection instead of a PLS fit.
pub fn fit_with_rotation(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w_star: &DMatrix<f64>,
    spec: &FitSpec,
) -> Result<KrigingModel, KrigingError> {
    if w_star.ncols() == 0 {
        return Err(KrigingError::Shape("projection has no columns".into()));
    }
    KrigingModel::fit_metric(x, y, Metric::projected(w_star.clone()), spec)
}

/// KPLS conditioned at fixed length-scales with a given projection.
pub fn condition_with_rotation(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w_star: &DMatrix<f64>,
    theta: &[f64],
    spec: &FitSpec,
) -> Result<KrigingModel, KrigingError> {
    KrigingModel::condition_metric(x, y, Metric::projected(w_star.clone()), theta, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    #[test]
    fn kernel_hand_values() {
        let w = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        assert_eq!(kpls_kernel(&[0.2, 0.3, 0.4], &[0.2, 0.3, 0.4], &w, &[1.0]), 1.0);
        let k = kpls_kernel(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0], &w, &[1.0]);
        assert!((k - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn identity_projection_matches_anisotropic_kernel() {
        let w = DMatrix::identity(3, 3);
        let theta = [0.5, 2.0, 0.1];
        let (a, b): ([f64; 3], [f64; 3]) = ([0.1, -0.4, 0.9], [0.7, 0.2, -0.3]);
        let direct: f64 = (0..3).map(|k| theta[k] * (a[k] - b[k]).powi(2)).sum();
        assert!((kpls_kernel(&a, &b, &w, &theta) - (-direct).exp()).abs() < 1e-15);
    }

    #[test]
    fn optimizes_h_hyperparameters() {
        let mut rng = seeded(3);
        let (m, d) = (30, 40);
        let x = DMatrix::from_fn(m, d, |_, _| rng.random_range(-1.0f64..1.0));
        let y = DVector::from_fn(m, |i, _| x.row(i).sum().sin());
        let model = fit_kpls(&x, &y, 2, &FitSpec::default()).unwrap();
        assert_eq!(model.theta().len(), 2);
        let diag = model.diagnostics().unwrap();
        assert_eq!(diag.n_hyperparameters, 2);
        assert!(diag.evals_per_start.iter().all(|&e| e <= 400));
        assert_eq!(model.projection().unwrap().shape(), (d, 2));
    }

    #[test]
    fn too_many_components_is_an_error() {
        let x = DMatrix::from_fn(4, 10, |i, j| (i * j) as f64);
        let y = DVector::from_fn(4, |i, _| i as f64);
        assert!(fit_kpls(&x, &y, 4, &FitSpec::default()).is_err());
    }

    #[test]
    fn persisted_kpls_model_predicts_identically() {
        let mut rng = seeded(8);
        let x = DMatrix::from_fn(15, 6, |_, _| rng.random_range(-1.0f64..1.0));
        let y = DVector::from_fn(15, |i, _| x[(i, 0)] - 2.0 * x[(i, 3)]);
        let model = fit_kpls(&x, &y, 2, &FitSpec::default()).unwrap();
        let back = KrigingModel::from_json(&model.to_json()).unwrap();
        let q = [0.1, 0.2, -0.3, 0.4, 0.0, -0.9];
        assert_eq!(model.predict(&q).unwrap(), back.predict(&q).unwrap());
        assert!(back.projection().is_some());
    }
}
