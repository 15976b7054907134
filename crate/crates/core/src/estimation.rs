//! Maximum empirical likelihood estimation: initialization, the profiled
//! and naive outer optimizations, and the extended EL transform.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::bfgs::{minimize, BfgsOptions, BfgsResult, BfgsStatus};
use crate::data::Dataset;
use crate::el::{default_ael_level, DualOptions};
use crate::error::{Error, Result};
use crate::estfun::{omega_of, residuals, FEASIBILITY_TOL};
use crate::graph::MixedGraph;
use crate::likelihood::{grad_log_el_naive, log_el_naive, log_el_profile, Adjustment, ElEvaluation};
use crate::params::{
    b_from_free, b_to_free, i_minus_b, is_positive_definite, omega_from_free, omega_to_free, ModelParams,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub dual: DualOptions,
    /// Outer convergence threshold on the gradient infinity-norm.
    pub tol_outer: f64,
    pub max_outer: usize,
    /// AEL level; `log(n) / 2` when `None`.
    pub ael_level: Option<f64>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            dual: DualOptions::default(),
            tol_outer: 1e-6,
            max_outer: 500,
            ael_level: None,
        }
    }
}

impl FitOptions {
    pub fn ael_adjustment(&self, n: usize) -> Adjustment {
        Adjustment::Ael {
            level: self.ael_level.unwrap_or_else(|| default_ael_level(n)),
        }
    }

    fn bfgs(&self) -> BfgsOptions {
        BfgsOptions {
            tol_grad: self.tol_outer,
            max_iter: self.max_outer,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    El,
    Ael,
    Hybrid,
    NaiveEl,
    NaiveAel,
    Gaussian,
    HybridGauss,
}

impl FitMethod {
    pub const ALL: [FitMethod; 7] = [
        FitMethod::El,
        FitMethod::Ael,
        FitMethod::Hybrid,
        FitMethod::NaiveEl,
        FitMethod::NaiveAel,
        FitMethod::Gaussian,
        FitMethod::HybridGauss,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FitMethod::El => "el",
            FitMethod::Ael => "ael",
            FitMethod::Hybrid => "hybrid",
            FitMethod::NaiveEl => "naive_el",
            FitMethod::NaiveAel => "naive_ael",
            FitMethod::Gaussian => "gaussian",
            FitMethod::HybridGauss => "hybrid_gauss",
        }
    }

    pub fn from_label(s: &str) -> Option<FitMethod> {
        match s {
            "naive" => Some(FitMethod::NaiveEl),
            "hybrid-gauss" => Some(FitMethod::HybridGauss),
            "naive-el" => Some(FitMethod::NaiveEl),
            "naive-ael" => Some(FitMethod::NaiveAel),
            _ => FitMethod::ALL.into_iter().find(|m| m.label() == s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    ValidStationary,
    NoConvergence,
    /// The empirical likelihood is undefined at the returned estimate.
    HullAtOptimum,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub method: FitMethod,
    pub status: FitStatus,
    pub b_hat: DMatrix<f64>,
    /// Absent when the original EL is undefined at `b_hat`.
    pub omega_hat: Option<DMatrix<f64>>,
    /// Original (unadjusted) log-EL at the estimate, when defined.
    pub log_el: Option<f64>,
    /// Final value of the maximized objective.
    pub objective: f64,
    pub grad_norm: f64,
    pub outer_iterations: usize,
    pub wall_time: f64,
    /// EL weights at the estimate, when defined.
    pub weights: Option<Vec<f64>>,
    /// Structural-zero violation of the recovered `Omega`.
    pub feasibility: Option<f64>,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.status == FitStatus::ValidStationary
    }

    pub fn params(&self) -> Option<ModelParams> {
        self.omega_hat.as_ref().map(|omega| ModelParams {
            b: self.b_hat.clone(),
            omega: omega.clone(),
        })
    }

    pub fn sigma_hat(&self) -> Option<DMatrix<f64>> {
        self.params().and_then(|p| p.sigma().ok())
    }

    fn failed(method: FitMethod, b: DMatrix<f64>, start: Instant) -> FitResult {
        FitResult {
            method,
            status: FitStatus::NoConvergence,
            b_hat: b,
            omega_hat: None,
            log_el: None,
            objective: f64::NEG_INFINITY,
            grad_norm: f64::INFINITY,
            outer_iterations: 0,
            wall_time: start.elapsed().as_secs_f64(),
            weights: None,
            feasibility: None,
        }
    }
}

/// Least-squares start: each row of `B` regresses `Y_v` on its parents,
/// and `Omega` takes the residual second moments on its support, with
/// off-diagonals shrunk in any row that is not diagonally dominant so that
/// their absolute sum is below `0.9 omega_vv`.
pub fn init_estimate(data: &Dataset, graph: &MixedGraph) -> Result<ModelParams> {
    data.check_graph(graph)?;
    let m = data.m();
    let n = data.n();
    let y = data.y();
    let mut b = DMatrix::zeros(m, m);
    for v in 0..m {
        let pa = graph.parents(v)?;
        if pa.is_empty() {
            continue;
        }
        if n <= pa.len() {
            return Err(Error::RankDeficient(graph.names()[v].clone()));
        }
        let x = DMatrix::from_fn(n, pa.len(), |i, k| y[(i, pa[k])]);
        let xtx = x.tr_mul(&x);
        let xty = x.tr_mul(&y.column(v));
        let chol = xtx
            .cholesky()
            .ok_or_else(|| Error::RankDeficient(graph.names()[v].clone()))?;
        let coef = chol.solve(&xty);
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::RankDeficient(graph.names()[v].clone()));
        }
        for (k, &s) in pa.iter().enumerate() {
            b[(v, s)] = coef[k];
        }
    }
    let r = residuals(data, &b)?;
    let s = r.tr_mul(&r) / n as f64;
    let mut omega = DMatrix::zeros(m, m);
    for (u, v) in graph.omega_support() {
        omega[(u, v)] = s[(u, v)];
        omega[(v, u)] = s[(u, v)];
    }
    for v in 0..m {
        let off: f64 = (0..m).filter(|&u| u != v).map(|u| omega[(v, u)].abs()).sum();
        if off >= omega[(v, v)] && off > 0.0 {
            let scale = 0.9 * omega[(v, v)] / off * (1.0 - 1e-9);
            for u in (0..m).filter(|&u| u != v) {
                omega[(v, u)] *= scale;
                omega[(u, v)] *= scale;
            }
        }
    }
    ModelParams::new(graph, b, omega)
}

/// Negative profile log-EL and gradient over free `B`, warm-starting the
/// multiplier from the previous defined evaluation.
fn profile_objective<'a>(
    data: &'a Dataset,
    graph: &'a MixedGraph,
    adjustment: Adjustment,
    dual: DualOptions,
) -> impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)> + 'a {
    let mut warm: Option<DVector<f64>> = None;
    move |x: &[f64]| {
        let b = b_from_free(graph, x);
        i_minus_b(&b).ok()?;
        let mut eval = log_el_profile(data, graph, &b, adjustment, &dual, warm.as_ref()).ok()?;
        if !eval.is_defined() && warm.is_some() {
            eval = log_el_profile(data, graph, &b, adjustment, &dual, None).ok()?;
        }
        if !eval.is_defined() {
            return None;
        }
        let grad = crate::likelihood::profile_grad_any(data, graph, &b, &eval).ok()?;
        warm = Some(eval.dual.lambda.clone());
        Some((-eval.log_el(), grad.into_iter().map(|g| -g).collect()))
    }
}

fn run_profile(
    data: &Dataset,
    graph: &MixedGraph,
    adjustment: Adjustment,
    x0: &[f64],
    opts: &FitOptions,
) -> Option<BfgsResult> {
    minimize(profile_objective(data, graph, adjustment, opts.dual), x0, &opts.bfgs())
}

/// Evaluates the original EL at `b`, recovers `Omega`, and decides the
/// status.
#[allow(clippy::too_many_arguments)]
fn finalize_profile(
    data: &Dataset,
    graph: &MixedGraph,
    method: FitMethod,
    b: DMatrix<f64>,
    run: &BfgsResult,
    iterations: usize,
    opts: &FitOptions,
    start: Instant,
) -> Result<FitResult> {
    let eval = log_el_profile(data, graph, &b, Adjustment::None, &opts.dual, None)?;
    let mut fit = FitResult {
        method,
        status: FitStatus::NoConvergence,
        b_hat: b,
        omega_hat: None,
        log_el: None,
        objective: -run.value,
        grad_norm: run.grad_norm,
        outer_iterations: iterations,
        wall_time: 0.0,
        weights: None,
        feasibility: None,
    };
    if eval.is_defined() {
        fit.log_el = Some(eval.log_el());
        if let Ok(rec) = omega_of(data, graph, &fit.b_hat, eval.observation_weights(), FEASIBILITY_TOL) {
            let pd = is_positive_definite(&rec.omega);
            fit.feasibility = Some(rec.max_violation);
            fit.weights = Some(eval.observation_weights().to_vec());
            if pd {
                fit.omega_hat = Some(rec.omega);
                if run.status == BfgsStatus::Converged && run.grad_norm < opts.tol_outer {
                    fit.status = FitStatus::ValidStationary;
                }
            }
        }
    }
    fit.wall_time = start.elapsed().as_secs_f64();
    Ok(fit)
}

/// Profiled MELE by BFGS over the free entries of `B`.
///
/// `method` must be one of `El`, `Ael` or `Hybrid` (AEL first, then
/// original EL from the AEL maximizer).
pub fn fit_profile(data: &Dataset, graph: &MixedGraph, method: FitMethod, opts: &FitOptions) -> Result<FitResult> {
    let start = Instant::now();
    let init = init_estimate(data, graph)?;
    let x0 = b_to_free(graph, &init.b);
    let ael = opts.ael_adjustment(data.n());
    match method {
        FitMethod::El => {
            let Some(run) = run_profile(data, graph, Adjustment::None, &x0, opts) else {
                return Ok(FitResult::failed(method, init.b, start));
            };
            let b = b_from_free(graph, &run.x);
            finalize_profile(data, graph, method, b, &run, run.iterations, opts, start)
        }
        FitMethod::Ael => {
            let Some(run) = run_profile(data, graph, ael, &x0, opts) else {
                return Ok(FitResult::failed(method, init.b, start));
            };
            let b = b_from_free(graph, &run.x);
            finalize_profile(data, graph, method, b, &run, run.iterations, opts, start)
        }
        FitMethod::Hybrid => {
            let Some(first) = run_profile(data, graph, ael, &x0, opts) else {
                return Ok(FitResult::failed(method, init.b, start));
            };
            let Some(run) = run_profile(data, graph, Adjustment::None, &first.x, opts) else {
                let mut fit = FitResult::failed(method, b_from_free(graph, &first.x), start);
                fit.outer_iterations = first.iterations;
                return Ok(fit);
            };
            let b = b_from_free(graph, &run.x);
            let iterations = first.iterations + run.iterations;
            finalize_profile(data, graph, method, b, &run, iterations, opts, start)
        }
        other => Err(Error::Config(format!("{} is not a profile method", other.label()))),
    }
}

/// Naive MELE by BFGS jointly over free `B` and free `Omega`; steps
/// leaving the positive definite cone are rejected.
pub fn fit_naive(data: &Dataset, graph: &MixedGraph, method: FitMethod, opts: &FitOptions) -> Result<FitResult> {
    let start = Instant::now();
    let adjustment = match method {
        FitMethod::NaiveEl => Adjustment::None,
        FitMethod::NaiveAel => opts.ael_adjustment(data.n()),
        other => return Err(Error::Config(format!("{} is not a naive method", other.label()))),
    };
    let init = init_estimate(data, graph)?;
    let mut x0 = b_to_free(graph, &init.b);
    x0.extend(omega_to_free(graph, &init.omega));

    let dual = opts.dual;
    let mut warm: Option<DVector<f64>> = None;
    let objective = |x: &[f64]| {
        let params = ModelParams::from_theta(graph, x);
        i_minus_b(&params.b).ok()?;
        if !is_positive_definite(&params.omega) {
            return None;
        }
        let mut eval = log_el_naive(data, graph, &params, adjustment, &dual, warm.as_ref()).ok()?;
        if !eval.is_defined() && warm.is_some() {
            eval = log_el_naive(data, graph, &params, adjustment, &dual, None).ok()?;
        }
        if !eval.is_defined() {
            return None;
        }
        let grad = grad_log_el_naive(data, graph, &params, &eval).ok()?;
        warm = Some(eval.dual.lambda.clone());
        Some((-eval.log_el(), grad.into_iter().map(|g| -g).collect()))
    };
    let Some(run) = minimize(objective, &x0, &opts.bfgs()) else {
        return Ok(FitResult::failed(method, init.b, start));
    };
    let params = ModelParams::from_theta(graph, &run.x);
    let eval = log_el_naive(data, graph, &params, Adjustment::None, &opts.dual, None)?;
    let mut fit = FitResult {
        method,
        status: FitStatus::NoConvergence,
        b_hat: params.b.clone(),
        omega_hat: None,
        log_el: None,
        objective: -run.value,
        grad_norm: run.grad_norm,
        outer_iterations: run.iterations,
        wall_time: 0.0,
        weights: None,
        feasibility: None,
    };
    if eval.is_defined() && is_positive_definite(&params.omega) {
        fit.log_el = Some(eval.log_el());
        fit.weights = Some(eval.observation_weights().to_vec());
        fit.feasibility = Some(0.0);
        fit.omega_hat = Some(params.omega);
        if run.status == BfgsStatus::Converged && run.grad_norm < opts.tol_outer {
            fit.status = FitStatus::ValidStationary;
        }
    }
    fit.wall_time = start.elapsed().as_secs_f64();
    Ok(fit)
}

/// Dispatches to the profile, naive or Gaussian fitters.
pub fn fit(data: &Dataset, graph: &MixedGraph, method: FitMethod, opts: &FitOptions) -> Result<FitResult> {
    match method {
        FitMethod::El | FitMethod::Ael | FitMethod::Hybrid => fit_profile(data, graph, method, opts),
        FitMethod::NaiveEl | FitMethod::NaiveAel => fit_naive(data, graph, method, opts),
        FitMethod::Gaussian => crate::gaussian::gaussian_mle(data, graph, opts),
        FitMethod::HybridGauss => {
            let gfit = crate::gaussian::gaussian_mle(data, graph, opts)?;
            crate::gaussian::hybrid_gauss_el(data, graph, &gfit, opts)
        }
    }
}

/// `gamma(n, l) = 1 + 2(-n log n - l) / (2n)`.
pub fn eel_gamma(n: usize, log_el: f64) -> f64 {
    let nf = n as f64;
    1.0 + 2.0 * (-nf * nf.ln() - log_el) / (2.0 * nf)
}

/// Point on the segment from the center reached by inverting the EEL map.
#[derive(Debug, Clone, PartialEq)]
pub struct EelInverse {
    /// Fraction `t` of the way from the center to the target.
    pub t: f64,
    /// Original log-EL at the preimage.
    pub log_el: f64,
}

/// Inverts `h(x) = c + gamma(n, l(x)) (x - c)` along the segment from the
/// center `c` to `target`: finds `t` in `(0, 1]` with
/// `t gamma(n, l(c + t (target - c))) = 1` by bisection.
///
/// `ell` returns the original log-EL, or `None` where it is undefined
/// (treated as `gamma = +inf`).
pub fn eel_invert<F>(center: &[f64], target: &[f64], n: usize, tol: f64, mut ell: F) -> Result<EelInverse>
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let at = |t: f64| -> Vec<f64> { center.iter().zip(target).map(|(c, x)| c + t * (x - c)).collect() };
    let center_value = ell(center).ok_or_else(|| Error::NotBracketed("EL undefined at the center".into()))?;
    if center.iter().zip(target).all(|(c, x)| c == x) {
        return Ok(EelInverse {
            t: 0.0,
            log_el: center_value,
        });
    }
    // phi(t) = t gamma(l(t)) - 1; phi(0) = -1.
    let mut phi = |t: f64| -> (f64, Option<f64>) {
        match ell(&at(t)) {
            Some(l) => (t * eel_gamma(n, l) - 1.0, Some(l)),
            None => (f64::INFINITY, None),
        }
    };
    let (phi_hi, l_hi) = phi(1.0);
    if phi_hi == 0.0 {
        return Ok(EelInverse {
            t: 1.0,
            log_el: l_hi.unwrap_or(center_value),
        });
    }
    if phi_hi < 0.0 {
        return Err(Error::NotBracketed(format!("t gamma(t) - 1 = {phi_hi} at t = 1")));
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut l_lo = center_value;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let (value, l) = phi(mid);
        if value < 0.0 {
            lo = mid;
            l_lo = l.expect("phi < 0 implies a defined EL");
        } else {
            hi = mid;
        }
    }
    Ok(EelInverse { t: lo, log_el: l_lo })
}

/// Extended log-EL of `b` around the profile MELE of `fit`.
pub fn eel_log_el(
    b: &DMatrix<f64>,
    data: &Dataset,
    graph: &MixedGraph,
    fit: &FitResult,
    opts: &FitOptions,
) -> Result<f64> {
    if !fit.converged() {
        return Err(Error::NoConvergence("EEL needs a valid MELE".into()));
    }
    crate::params::check_b_support(graph, b)?;
    let center = b_to_free(graph, &fit.b_hat);
    let target = b_to_free(graph, b);
    let ell = |x: &[f64]| {
        let bx = b_from_free(graph, x);
        i_minus_b(&bx).ok()?;
        let e: ElEvaluation = log_el_profile(data, graph, &bx, Adjustment::None, &opts.dual, None).ok()?;
        e.is_defined().then(|| e.log_el())
    };
    Ok(eel_invert(&center, &target, data.n(), 1e-10, ell)?.log_el)
}

/// `Omega` rebuilt from free entries (for callers holding a `theta`).
pub fn omega_of_theta(graph: &MixedGraph, theta: &[f64]) -> DMatrix<f64> {
    omega_from_free(graph, &theta[graph.directed_edges().len()..])
}
