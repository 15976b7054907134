//! BFGS with Armijo backtracking for objectives that may be undefined at
//! trial points (a `None` evaluation is treated as a rejected step).

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    /// Stop when the gradient infinity-norm falls below this.
    pub tol_grad: f64,
    pub max_iter: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Largest coordinate change allowed in one step.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            tol_grad: 1e-6,
            max_iter: 500,
            c1: 1e-4,
            max_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfgsStatus {
    Converged,
    MaxIter,
    LineSearchFailure,
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: BfgsStatus,
    /// Objective value after each accepted iteration, starting point first.
    pub trace: Vec<f64>,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

/// Minimizes `f`, which returns the value and gradient or `None` where the
/// objective is undefined. Returns `None` if `f` is undefined at `x0`.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Option<BfgsResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let dim = x0.len();
    let mut evaluations = 1;
    let (mut fx, g0) = f(x0)?;
    let mut x = DVector::from_column_slice(x0);
    let mut g = DVector::from_vec(g0);
    let mut h = DMatrix::<f64>::identity(dim, dim);
    let mut fresh_h = true;
    let mut trace = vec![fx];

    let result = |x: DVector<f64>, fx, g: DVector<f64>, it, ev, status, trace| BfgsResult {
        grad_norm: inf_norm(&g),
        x: x.as_slice().to_vec(),
        value: fx,
        grad: g.as_slice().to_vec(),
        iterations: it,
        evaluations: ev,
        status,
        trace,
    };

    if dim == 0 {
        return Some(result(x, fx, g, 0, evaluations, BfgsStatus::Converged, trace));
    }

    for iter in 0..opts.max_iter {
        if inf_norm(&g) < opts.tol_grad {
            return Some(result(x, fx, g, iter, evaluations, BfgsStatus::Converged, trace));
        }

        let mut accepted = None;
        for _restart in 0..2 {
            let mut d = -(&h * &g);
            let mut slope = g.dot(&d);
            if !(slope < 0.0) {
                h = DMatrix::identity(dim, dim);
                fresh_h = true;
                d = -g.clone();
                slope = g.dot(&d);
            }
            let dmax = inf_norm(&d);
            let mut t = if dmax > opts.max_step {
                opts.max_step / dmax
            } else {
                1.0
            };
            let fx_tol = 1e-12 * (1.0 + fx.abs());
            let gnorm = inf_norm(&g);
            for _ in 0..60 {
                let trial = &x + &d * t;
                evaluations += 1;
                if let Some((ft, gt)) = f(trial.as_slice()) {
                    let gt = DVector::from_vec(gt);
                    let armijo = ft <= fx + opts.c1 * t * slope;
                    // Near the optimum the predicted decrease can drop below
                    // the objective's roundoff; accept steps that stay flat
                    // within roundoff and reduce the gradient.
                    let flat = ft <= fx + fx_tol && inf_norm(&gt) < 0.9 * gnorm;
                    if ft.is_finite() && (armijo || flat) {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
                t *= 0.5;
            }
            if accepted.is_some() || fresh_h {
                break;
            }
            h = DMatrix::identity(dim, dim);
            fresh_h = true;
        }

        let Some((x_new, f_new, g_new)) = accepted else {
            return Some(result(
                x,
                fx,
                g,
                iter,
                evaluations,
                BfgsStatus::LineSearchFailure,
                trace,
            ));
        };

        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh_h {
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy^T + hy s^T) + (rho^2 yHy + rho) s s^T
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
            fresh_h = false;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
    }
    let status = if inf_norm(&g) < opts.tol_grad {
        BfgsStatus::Converged
    } else {
        BfgsStatus::MaxIter
    };
    Some(result(x, fx, g, opts.max_iter, evaluations, status, trace))
}
