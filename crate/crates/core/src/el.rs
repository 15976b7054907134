//! The inner empirical likelihood problem: maximize `sum_i log p_i` over
//! the simplex subject to `sum_i p_i G_i = 0`, solved through its convex
//! dual in the multiplier `lambda`.
//!
//! With `n` rows the optimal weights are `p_i = 1 / (n (1 + lambda^T G_i))`
//! and the dual objective is `D(lambda) = -sum_i log(1 + lambda^T G_i)`,
//! minimized by damped Newton steps that keep every denominator at least
//! `1/n` (so that `p_i <= 1`).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualOptions {
    /// Convergence threshold on `max_j |sum_i p_i G_ij|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DualOptions {
    fn default() -> Self {
        DualOptions {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DualStatus {
    Converged,
    /// The origin is not inside the convex hull of the rows.
    HullViolation,
    MaxIter,
    LineSearchFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub lambda: DVector<f64>,
    pub weights: Vec<f64>,
    /// `sum_i log p_i`; `-inf` unless converged.
    pub log_el: f64,
    pub status: DualStatus,
    pub iterations: usize,
    /// `max_j |sum_i p_i G_ij|` at the returned multiplier.
    pub constraint_norm: f64,
}

impl DualSolution {
    pub fn converged(&self) -> bool {
        self.status == DualStatus::Converged
    }

    pub fn n_rows(&self) -> usize {
        self.weights.len()
    }
}

/// Default AEL adjustment level, `log(n) / 2`.
pub fn default_ael_level(n: usize) -> f64 {
    (n as f64).ln() / 2.0
}

/// Appends the pseudo-observation `-a_n * colmeans(G)`.
pub fn ael_augment(g: &DMatrix<f64>, a_n: f64) -> DMatrix<f64> {
    let (n, c) = g.shape();
    let means = g.row_mean();
    let mut out = g.clone().resize_vertically(n + 1, 0.0);
    for j in 0..c {
        out[(n, j)] = -a_n * means[j];
    }
    out
}

struct State {
    lambda: DVector<f64>,
    den: DVector<f64>,
    objective: f64,
}

fn state_at(g: &DMatrix<f64>, lambda: DVector<f64>, floor: f64) -> Option<State> {
    let mut den = g * &lambda;
    den.add_scalar_mut(1.0);
    if den.iter().any(|&d| !(d >= floor)) {
        return None;
    }
    let objective = -den.iter().map(|d| d.ln()).sum::<f64>();
    Some(State { lambda, den, objective })
}

/// `sum_i p_i G_i` with `p_i = 1 / (n den_i)`.
fn constraint_means(g: &DMatrix<f64>, den: &DVector<f64>) -> DVector<f64> {
    let n = g.nrows() as f64;
    let w = den.map(|d| 1.0 / (n * d));
    g.tr_mul(&w)
}

/// Newton direction solving `H delta = sum_i G_i / den_i` with
/// `H = sum_i G_i G_i^T / den_i^2`, ridged when `H` is not numerically
/// positive definite.
fn newton_direction(g: &DMatrix<f64>, den: &DVector<f64>) -> DVector<f64> {
    let inv = den.map(|d| 1.0 / d);
    let mut scaled = g.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= inv[i];
    }
    let rhs = scaled.row_sum().transpose();
    let h = scaled.tr_mul(&scaled);
    if let Some(ch) = h.clone().cholesky() {
        let delta = ch.solve(&rhs);
        if delta.iter().all(|x| x.is_finite()) {
            return delta;
        }
    }
    let c = h.nrows();
    let mut ridge = 1e-10 * h.trace().max(f64::MIN_POSITIVE);
    for _ in 0..20 {
        let hr = &h + DMatrix::identity(c, c) * ridge;
        if let Some(ch) = hr.cholesky() {
            let delta = ch.solve(&rhs);
            if delta.iter().all(|x| x.is_finite()) {
                return delta;
            }
        }
        ridge *= 100.0;
    }
    rhs
}

/// True when `lambda^T G_i >= 0` for every row with at least one strictly
/// positive: a separating direction, so no strictly positive weight vector
/// can satisfy the constraints.
fn separates(g: &DMatrix<f64>, lambda: &DVector<f64>) -> bool {
    let u = g * lambda;
    let max_abs = u.amax();
    if max_abs == 0.0 {
        return false;
    }
    u.max() > 0.0 && u.min() >= -1e-10 * max_abs
}

/// Trivial hull check: some constraint column has a strict sign.
fn column_sign_violation(g: &DMatrix<f64>) -> bool {
    g.column_iter().any(|col| col.min() > 0.0 || col.max() < 0.0)
}

fn finish(g: &DMatrix<f64>, state: State, status: DualStatus, iterations: usize) -> DualSolution {
    let n = g.nrows() as f64;
    let means = constraint_means(g, &state.den);
    let constraint_norm = means.amax();
    let mut weights: Vec<f64> = state.den.iter().map(|d| 1.0 / (n * d)).collect();
    let log_el = if status == DualStatus::Converged {
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        weights.iter().map(|w| w.ln()).sum()
    } else {
        f64::NEG_INFINITY
    };
    DualSolution {
        lambda: state.lambda,
        weights,
        log_el,
        status,
        iterations,
        constraint_norm,
    }
}

/// Solves the inner EL problem for the constraint matrix `g` (`n x c`).
///
/// `warm` is used as the starting multiplier when it keeps every
/// denominator at least `1/n`; otherwise the solver starts at zero.
pub fn solve_dual(g: &DMatrix<f64>, opts: &DualOptions, warm: Option<&DVector<f64>>) -> DualSolution {
    let (n, c) = g.shape();
    let floor = 1.0 / n as f64;
    let zero = || state_at(g, DVector::zeros(c), floor).expect("lambda = 0 is always feasible");

    if g.iter().any(|x| !x.is_finite()) {
        return finish(g, zero(), DualStatus::LineSearchFailure, 0);
    }
    if column_sign_violation(g) {
        return finish(g, zero(), DualStatus::HullViolation, 0);
    }

    let mut state = warm
        .filter(|l| l.len() == c)
        .and_then(|l| state_at(g, l.clone(), floor))
        .unwrap_or_else(zero);
    let mut means = constraint_means(g, &state.den);
    let mut stagnant = 0usize;

    for iter in 0..opts.max_iter {
        let norm = means.amax();
        if norm < opts.tol {
            // A couple of extra Newton steps take the constraint means to
            // roundoff level, which keeps sum(p) = 1 tight.
            for _ in 0..3 {
                let delta = newton_direction(g, &state.den);
                let Some(next) = state_at(g, &state.lambda + &delta, floor) else {
                    break;
                };
                let next_means = constraint_means(g, &next.den);
                if next_means.amax() >= means.amax() {
                    break;
                }
                state = next;
                means = next_means;
            }
            return finish(g, state, DualStatus::Converged, iter);
        }

        let mut delta = newton_direction(g, &state.den);
        let mut accepted = None;
        for attempt in 0..2 {
            if attempt == 1 {
                // steepest descent fallback
                let grad = constraint_means(g, &state.den) * n as f64;
                let scale = 1.0 / grad.norm().max(1.0);
                delta = grad * scale;
            }
            let mut t = 1.0;
            while t > 1e-12 {
                if let Some(next) = state_at(g, &state.lambda + &delta * t, floor) {
                    if next.objective <= state.objective + 1e-13 * (1.0 + state.objective.abs()) {
                        accepted = Some((next, t));
                        break;
                    }
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }

        let Some((next, step)) = accepted else {
            let pinned = state.den.min() < 2.0 * floor;
            let status = if pinned || separates(g, &state.lambda) {
                DualStatus::HullViolation
            } else {
                DualStatus::LineSearchFailure
            };
            return finish(g, state, status, iter);
        };
        state = next;
        let next_means = constraint_means(g, &state.den);
        if separates(g, &state.lambda) {
            return finish(g, state, DualStatus::HullViolation, iter + 1);
        }
        if step < 1e-3 && next_means.amax() > 0.99 * norm {
            stagnant += 1;
            if stagnant >= 10 {
                return finish(g, state, DualStatus::HullViolation, iter + 1);
            }
        } else {
            stagnant = 0;
        }
        means = next_means;
    }
    if means.amax() < opts.tol {
        return finish(g, state, DualStatus::Converged, opts.max_iter);
    }
    finish(g, state, DualStatus::MaxIter, opts.max_iter)
}
