//! Box-bounded Nelder–Mead minimization with an evaluation budget and an
//! optional wall-clock deadline.

use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    pub lower: f64,
    pub upper: f64,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
    pub max_evals: usize,
    /// Converged when the simplex spread in `f` is below `f_tol` and its
    /// extent in every coordinate is below `x_tol`.
    pub f_tol: f64,
    pub x_tol: f64,
}

impl NelderMeadOptions {
    pub fn bounded(lower: f64, upper: f64, max_evals: usize) -> Self {
        Self {
            lower,
            upper,
            initial_step: 0.1 * (upper - lower),
            max_evals,
            f_tol: 1e-8,
            x_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    Budget,
    Deadline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub stop: StopReason,
}

struct Counter<F> {
    f: F,
    evals: usize,
    max: usize,
    deadline: Option<Instant>,
    lower: f64,
    upper: f64,
    best: Option<(Vec<f64>, f64)>,
    stop: Option<StopReason>,
}

impl<F: FnMut(&[f64]) -> f64> Counter<F> {
    /// `None` once the budget or the deadline is exhausted.
    fn eval(&mut self, x: &mut [f64]) -> Option<f64> {
        if self.stop.is_some() {
            return None;
        }
        if self.evals >= self.max {
            self.stop = Some(StopReason::Budget);
            return None;
        }
        if self.deadline.is_some_and(|d| Instant::now() >= d) {
            self.stop = Some(StopReason::Deadline);
            return None;
        }
        for v in x.iter_mut() {
            *v = v.clamp(self.lower, self.upper);
        }
        self.evals += 1;
        let mut fx = (self.f)(x);
        if fx.is_nan() {
            fx = f64::INFINITY;
        }
        if self.best.as_ref().is_none_or(|(_, b)| fx < *b) {
            self.best = Some((x.to_vec(), fx));
        }
        Some(fx)
    }
}

/// Minimizes `f` from `x0`. Coordinates are clamped into `[lower, upper]`
/// before every evaluation; non-finite values count as `+inf`. The deadline
/// is checked before each evaluation, so it is honoured to within one call.
///
/// Uses the dimension-adaptive coefficients for `n >= 2` and the classic
/// (1, 2, 1/2, 1/2) set for `n = 1`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    opts: &NelderMeadOptions,
    deadline: Option<Instant>,
) -> Minimum {
    let n = x0.len();
    assert!(n > 0, "nelder_mead needs at least one coordinate");
    let nf = n as f64;
    let (alpha, beta, gamma, delta) = if n >= 2 {
        (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };
    let mut c = Counter {
        f,
        evals: 0,
        max: opts.max_evals,
        deadline,
        lower: opts.lower,
        upper: opts.upper,
        best: None,
        stop: None,
    };
    let finish = |c: Counter<F>, converged: bool| {
        let stop = if converged {
            StopReason::Converged
        } else {
            c.stop.unwrap_or(StopReason::Budget)
        };
        let (x, f) = c.best.unwrap_or_else(|| (x0.to_vec(), f64::INFINITY));
        Minimum {
            x,
            f,
            evals: c.evals,
            stop,
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut fvals: Vec<f64> = Vec::with_capacity(n + 1);
    let mut start: Vec<f64> = x0.iter().map(|v| v.clamp(opts.lower, opts.upper)).collect();
    match c.eval(&mut start) {
        Some(fx) => {
            simplex.push(start.clone());
            fvals.push(fx);
        }
        None => return finish(c, false),
    }
    for i in 0..n {
        let mut v = start.clone();
        v[i] = if start[i] + opts.initial_step <= opts.upper {
            start[i] + opts.initial_step
        } else {
            start[i] - opts.initial_step
        };
        match c.eval(&mut v) {
            Some(fx) => {
                simplex.push(v);
                fvals.push(fx);
            }
            None => return finish(c, false),
        }
    }

    let mut order: Vec<usize> = (0..=n).collect();
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial2 = vec![0.0; n];
    loop {
        order.sort_by(|&a, &b| fvals[a].total_cmp(&fvals[b]).then(a.cmp(&b)));
        let best = order[0];
        let worst = order[n];
        let second = order[n - 1];

        let f_spread = fvals[worst] - fvals[best];
        let f_ok = fvals[best].is_finite()
            && (fvals[best] == fvals[worst] || f_spread <= opts.f_tol * (1.0 + fvals[best].abs()));
        if f_ok {
            let x_ok = (0..n).all(|k| {
                let (lo, hi) = simplex
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v[k]), hi.max(v[k]))
                    });
                hi - lo <= opts.x_tol
            });
            if x_ok {
                return finish(c, true);
            }
        }

        centroid.iter_mut().for_each(|v| *v = 0.0);
        for &i in &order[..n] {
            for (cv, sv) in centroid.iter_mut().zip(&simplex[i]) {
                *cv += sv;
            }
        }
        centroid.iter_mut().for_each(|v| *v /= nf);

        for k in 0..n {
            trial[k] = centroid[k] + alpha * (centroid[k] - simplex[worst][k]);
        }
        let Some(fr) = c.eval(&mut trial) else {
            return finish(c, false);
        };

        if fr < fvals[best] {
            for k in 0..n {
                trial2[k] = centroid[k] + beta * (trial[k] - centroid[k]);
            }
            let Some(fe) = c.eval(&mut trial2) else {
                return finish(c, false);
            };
            if fe < fr {
                simplex[worst].copy_from_slice(&trial2);
                fvals[worst] = fe;
            } else {
                simplex[worst].copy_from_slice(&trial);
                fvals[worst] = fr;
            }
            continue;
        }
        if fr < fvals[second] {
            simplex[worst].copy_from_slice(&trial);
            fvals[worst] = fr;
            continue;
        }
        // Contraction, outside when the reflection improved on the worst.
        let outside = fr < fvals[worst];
        for k in 0..n {
            trial2[k] = if outside {
                centroid[k] + gamma * (trial[k] - centroid[k])
            } else {
                centroid[k] + gamma * (simplex[worst][k] - centroid[k])
            };
        }
        let Some(fc) = c.eval(&mut trial2) else {
            return finish(c, false);
        };
        let accept = if outside { fc <= fr } else { fc < fvals[worst] };
        if accept {
            simplex[worst].copy_from_slice(&trial2);
            fvals[worst] = fc;
            continue;
        }
        let anchor = simplex[best].clone();
        for &i in &order[1..] {
            for k in 0..n {
                simplex[i][k] = anchor[k] + delta * (simplex[i][k] - anchor[k]);
            }
            let Some(fs) = c.eval(&mut simplex[i]) else {
                return finish(c, false);
            };
            fvals[i] = fs;
        }
    }
}
