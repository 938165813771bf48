//! Single-response partial least squares (PLS1) by NIPALS.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlsError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("X has {x} rows but y has {y} entries")]
    Shape { x: usize, y: usize },
    #[error("component count {h} outside 1..={max}")]
    Components { h: usize, max: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("component {component} is degenerate: residual X carries no covariance with y")]
    Degenerate { component: usize },
    #[error("P^T W is singular")]
    Singular,
}

/// Result of a PLS1 fit on centered data.
#[derive(Debug, Clone, PartialEq)]
pub struct PlsRotation {
    /// `d x h` per-deflation weight vectors `w(l)`, each of unit norm.
    pub weights: DMatrix<f64>,
    /// `d x h` X loadings `p(l)`.
    pub x_loadings: DMatrix<f64>,
    /// `h` y loadings `c(l)`.
    pub y_loadings: DVector<f64>,
    /// `m x h` scores `t(l)`.
    pub scores: DMatrix<f64>,
    /// `d x h` rotation `W (P^T W)^-1`, applicable to undeflated inputs.
    pub w_star: DMatrix<f64>,
}

impl PlsRotation {
    pub fn h(&self) -> usize {
        self.w_star.ncols()
    }

    pub fn d(&self) -> usize {
        self.w_star.nrows()
    }

    /// Regression coefficients `W* c` on the centered scale.
    pub fn coefficients(&self) -> DVector<f64> {
        &self.w_star * &self.y_loadings
    }
}

const DEGENERATE_REL: f64 = 1e-12;
const SIGN_EPS: f64 = 1e-10;

/// Fits `h` PLS1 components. `x` (`m x d`) and `y` must already be centered.
pub fn fit_pls(x: &DMatrix<f64>, y: &DVector<f64>, h: usize) -> Result<PlsRotation, PlsError> {
    let (m, d) = x.shape();
    if m < 2 {
        return Err(PlsError::TooFewSamples(m));
    }
    if y.len() != m {
        return Err(PlsError::Shape { x: m, y: y.len() });
    }
    let max = d.min(m - 1);
    if h == 0 || h > max {
        return Err(PlsError::Components { h, max });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(PlsError::NonFinite);
    }

    let mut xl = x.clone();
    let mut yl = y.clone();
    let mut weights = DMatrix::zeros(d, h);
    let mut x_loadings = DMatrix::zeros(d, h);
    let mut y_loadings = DVector::zeros(h);
    let mut scores = DMatrix::zeros(m, h);
    let mut first_norm = None;

    for l in 0..h {
        let mut w = xl.tr_mul(&yl);
        let norm = w.norm();
        let reference = *first_norm.get_or_insert(norm);
        if norm == 0.0 || norm <= DEGENERATE_REL * reference {
            return Err(PlsError::Degenerate { component: l + 1 });
        }
        w /= norm;
        if let Some(first) = w.iter().find(|v| v.abs() > SIGN_EPS) {
            if *first < 0.0 {
                w.neg_mut();
            }
        }
        let t = &xl * &w;
        let tt = t.norm_squared();
        if tt == 0.0 {
            return Err(PlsError::Degenerate { component: l + 1 });
        }
        let p = xl.tr_mul(&t) / tt;
        let c = t.dot(&yl) / tt;
        xl.ger(-1.0, &t, &p, 1.0);
        yl.axpy(-c, &t, 1.0);
        weights.set_column(l, &w);
        x_loadings.set_column(l, &p);
        y_loadings[l] = c;
        scores.set_column(l, &t);
    }

    let ptw = x_loadings.tr_mul(&weights);
    // W* = W (P^T W)^-1, i.e. W*^T = (P^T W)^-T W^T.
    let lu = ptw.transpose().lu();
    let w_star_t = lu
        .solve(&weights.transpose())
        .ok_or(PlsError::Singular)?;
    let w_star = w_star_t.transpose();
    if w_star.iter().any(|v| !v.is_finite()) {
        return Err(PlsError::Singular);
    }
    Ok(PlsRotation {
        weights,
        x_loadings,
        y_loadings,
        scores,
        w_star,
    })
}

/// Column means of `x` and the mean of `y`, and the centered copies.
pub fn center(x: &DMatrix<f64>, y: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
    let m = x.nrows() as f64;
    let means = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / m));
    let ymean = y.sum() / m;
    let mut xc = x.clone();
    for (j, mut col) in xc.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    let yc = y.add_scalar(-ymean);
    (xc, yc, means, ymean)
}
