//! Gaussian maximum likelihood on the mixed-graph model, its per-observation
//! scores, and the hybrid Gauss/EL covariance estimator.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DMatrix;

use crate::bfgs::{minimize, BfgsOptions, BfgsStatus};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estfun::{omega_of, residuals, FEASIBILITY_TOL};
use crate::estimation::{init_estimate, FitMethod, FitOptions, FitResult, FitStatus};
use crate::graph::MixedGraph;
use crate::likelihood::{log_el_profile, Adjustment};
use crate::params::{i_minus_b, is_positive_definite, ModelParams};

struct Pieces {
    a: DMatrix<f64>,
    a_inv_t: DMatrix<f64>,
    omega_inv: DMatrix<f64>,
    log_det_omega: f64,
    log_abs_det_a: f64,
}

fn pieces(params: &ModelParams) -> Result<Pieces> {
    let a = i_minus_b(&params.b)?;
    let det_a = a.determinant();
    let a_inv = a.clone().try_inverse().ok_or(Error::SingularSystem { det: det_a })?;
    let chol = params
        .omega
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Omega".into()))?;
    let log_det_omega = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(Pieces {
        a_inv_t: a_inv.transpose(),
        omega_inv: chol.inverse(),
        a,
        log_det_omega,
        log_abs_det_a: det_a.abs().ln(),
    })
}

/// `-(n/2) [m log(2 pi) + log det Sigma + tr(Sigma^{-1} S)]` with `S` the
/// sample second-moment matrix and `Sigma = Sigma(B, Omega)`.
pub fn gaussian_loglik(data: &Dataset, params: &ModelParams) -> Result<f64> {
    if params.b.shape() != (data.m(), data.m()) || params.omega.shape() != (data.m(), data.m()) {
        return Err(Error::Dimension("parameter shape does not match data".into()));
    }
    let p = pieces(params)?;
    let n = data.n() as f64;
    let m = data.m() as f64;
    let s = data.second_moment();
    let w = &p.a * s * p.a.transpose();
    let trace = (&p.omega_inv * w).trace();
    let log_det_sigma = p.log_det_omega - 2.0 * p.log_abs_det_a;
    Ok(-0.5 * n * (m * (2.0 * PI).ln() + log_det_sigma + trace))
}

/// Value and gradient over `theta` (free `B`, then free `Omega`).
pub fn gaussian_loglik_grad(data: &Dataset, graph: &MixedGraph, params: &ModelParams) -> Result<(f64, Vec<f64>)> {
    let value = gaussian_loglik(data, params)?;
    let p = pieces(params)?;
    let n = data.n() as f64;
    let s = data.second_moment();
    // dl/dB = n (Omega^{-1} A S - A^{-T})
    let grad_b = (&p.omega_inv * &p.a * &s - &p.a_inv_t) * n;
    // dl/dOmega = -(n/2)(Omega^{-1} - Omega^{-1} W Omega^{-1})
    let w = &p.a * &s * p.a.transpose();
    let grad_o = (&p.omega_inv - &p.omega_inv * w * &p.omega_inv) * (-0.5 * n);
    let mut grad: Vec<f64> = graph.directed_edges().iter().map(|&(s, v)| grad_b[(v, s)]).collect();
    for (u, v) in graph.omega_support() {
        grad.push(if u == v { grad_o[(u, u)] } else { 2.0 * grad_o[(u, v)] });
    }
    Ok((value, grad))
}

/// Per-observation scores, `n x d`, of the Gaussian log-likelihood.
pub fn gaussian_scores(data: &Dataset, graph: &MixedGraph, params: &ModelParams) -> Result<DMatrix<f64>> {
    let p = pieces(params)?;
    let r = residuals(data, &params.b)?;
    let u = &r * &p.omega_inv;
    let y = data.y();
    let support = graph.omega_support();
    let edges = graph.directed_edges();
    let d = edges.len() + support.len();
    let mut out = DMatrix::zeros(data.n(), d);
    for i in 0..data.n() {
        for (k, &(s, v)) in edges.iter().enumerate() {
            out[(i, k)] = u[(i, v)] * y[(i, s)] - p.a_inv_t[(v, s)];
        }
        for (k, &(a, b)) in support.iter().enumerate() {
            let g = -0.5 * (p.omega_inv[(a, b)] - u[(i, a)] * u[(i, b)]);
            out[(i, edges.len() + k)] = if a == b { g } else { 2.0 * g };
        }
    }
    Ok(out)
}

/// Gaussian MLE by BFGS over free `(B, Omega)` from the least-squares
/// start; steps leaving the positive definite cone are rejected.
pub fn gaussian_mle(data: &Dataset, graph: &MixedGraph, opts: &FitOptions) -> Result<FitResult> {
    let start = Instant::now();
    let init = init_estimate(data, graph)?;
    let x0 = init.to_theta(graph);
    let objective = |x: &[f64]| {
        let params = ModelParams::from_theta(graph, x);
        if !is_positive_definite(&params.omega) {
            return None;
        }
        let (v, g) = gaussian_loglik_grad(data, graph, &params).ok()?;
        Some((-v, g.into_iter().map(|x| -x).collect()))
    };
    let bfgs = BfgsOptions {
        tol_grad: opts.tol_outer,
        max_iter: opts.max_outer,
        ..Default::default()
    };
    let run = minimize(objective, &x0, &bfgs)
        .ok_or_else(|| Error::NoConvergence("Gaussian likelihood undefined at the start".into()))?;
    let params = ModelParams::from_theta(graph, &run.x);
    let ok = run.status == BfgsStatus::Converged && run.grad_norm < opts.tol_outer;
    Ok(FitResult {
        method: FitMethod::Gaussian,
        status: if ok {
            FitStatus::ValidStationary
        } else {
            FitStatus::NoConvergence
        },
        b_hat: params.b,
        omega_hat: Some(params.omega),
        log_el: None,
        objective: -run.value,
        grad_norm: run.grad_norm,
        outer_iterations: run.iterations,
        wall_time: start.elapsed().as_secs_f64(),
        weights: None,
        feasibility: None,
    })
}

/// Keeps the Gaussian `B_hat` and replaces `Omega` by the profile EL
/// recovery at `B_hat`. When the EL is undefined there the result carries
/// status `HullAtOptimum` and no `Omega`.
pub fn hybrid_gauss_el(data: &Dataset, graph: &MixedGraph, gfit: &FitResult, opts: &FitOptions) -> Result<FitResult> {
    let start = Instant::now();
    let eval = log_el_profile(data, graph, &gfit.b_hat, Adjustment::None, &opts.dual, None)?;
    let mut fit = FitResult {
        method: FitMethod::HybridGauss,
        status: FitStatus::HullAtOptimum,
        b_hat: gfit.b_hat.clone(),
        omega_hat: None,
        log_el: None,
        objective: gfit.objective,
        grad_norm: gfit.grad_norm,
        outer_iterations: gfit.outer_iterations,
        wall_time: 0.0,
        weights: None,
        feasibility: None,
    };
    if eval.is_defined() {
        fit.status = FitStatus::NoConvergence;
        fit.log_el = Some(eval.log_el());
        let rec = omega_of(data, graph, &gfit.b_hat, eval.observation_weights(), FEASIBILITY_TOL)?;
        fit.feasibility = Some(rec.max_violation);
        fit.weights = Some(eval.observation_weights().to_vec());
        if is_positive_definite(&rec.omega) {
            fit.omega_hat = Some(rec.omega);
            if gfit.converged() {
                fit.status = FitStatus::ValidStationary;
            }
        }
    }
    fit.wall_time = gfit.wall_time + start.elapsed().as_secs_f64();
    Ok(fit)
}
