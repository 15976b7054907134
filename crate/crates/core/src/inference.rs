//! Test statistics, p-values, asymptotic variances and confidence-region
//! membership for the EL, AEL, EEL and Gaussian calibrations.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estfun::{naive_matrix, residuals};
use crate::estimation::{eel_invert, fit, FitMethod, FitOptions, FitResult};
use crate::gaussian::{gaussian_loglik_grad, gaussian_scores};
use crate::graph::MixedGraph;
use crate::likelihood::{log_el_pinned, log_el_theta, vech_pairs, Adjustment};
use crate::params::{check_b_support, check_omega_support, symmetrize, ModelParams};

/// Upper tail `P(X > x)` of a chi-square with `dof` degrees of freedom.
pub fn chi2_sf(x: f64, dof: usize) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    if x == f64::INFINITY {
        return 0.0;
    }
    let dist = ChiSquared::new(dof as f64).expect("dof >= 1");
    dist.sf(x).clamp(0.0, 1.0)
}

/// Quantile of a chi-square with `dof` degrees of freedom.
pub fn chi2_quantile(prob: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64).expect("dof >= 1").inverse_cdf(prob)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestReport {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub method: String,
    pub converged: bool,
}

impl TestReport {
    /// Chi-square calibrated report for a computed statistic.
    pub fn from_statistic(statistic: f64, dof: usize, method: &str) -> Result<TestReport> {
        if dof == 0 {
            return Err(Error::InvalidTest("zero degrees of freedom".into()));
        }
        Ok(TestReport {
            statistic,
            dof,
            p_value: chi2_sf(statistic, dof),
            method: method.into(),
            converged: true,
        })
    }

    /// Report for a statistic that could not be computed (the region does
    /// not cover): infinite statistic, p-value 0.
    fn undefined(dof: usize, method: &str) -> TestReport {
        TestReport {
            statistic: f64::INFINITY,
            dof,
            p_value: 0.0,
            method: method.into(),
            converged: false,
        }
    }

    /// Whether the point lies in the `level` confidence region.
    pub fn covers(&self, level: f64) -> bool {
        self.converged && self.p_value > 1.0 - level
    }
}

fn require_valid(fit: &FitResult) -> Result<ModelParams> {
    if !fit.converged() {
        return Err(Error::NoConvergence(format!(
            "{} fit is not a valid stationary point",
            fit.method.label()
        )));
    }
    fit.params()
        .ok_or_else(|| Error::NoConvergence("fit has no Omega estimate".into()))
}

/// Goodness of fit: `2(-n log n - l(theta_hat))` on `q - d` degrees of freedom.
pub fn gof_test(fit: &FitResult, graph: &MixedGraph, n: usize) -> Result<TestReport> {
    let counts = graph.dof_counts();
    if counts.q <= counts.d {
        return Err(Error::InvalidTest("saturated model has no goodness-of-fit test".into()));
    }
    require_valid(fit)?;
    let log_el = fit
        .log_el
        .ok_or_else(|| Error::NoConvergence("log-EL undefined at the fit".into()))?;
    let nf = n as f64;
    let statistic = (2.0 * (-nf * nf.ln() - log_el)).max(0.0);
    TestReport::from_statistic(statistic, counts.q - counts.d, "gof")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    El,
    Ael,
    Eel,
}

impl Calibration {
    pub fn label(self) -> &'static str {
        match self {
            Calibration::El => "el",
            Calibration::Ael => "ael",
            Calibration::Eel => "eel",
        }
    }
}

/// Likelihood ratio `2[l(theta_hat) - l(theta0)]` on `d` degrees of freedom
/// for a fully specified `theta0 = (B0, Omega0)`.
///
/// Both ends are evaluated under the pinned layout: profile constraints at
/// `B`, plus `g_u g_v - omega_uv` for every free entry of `Omega`. An
/// undefined EL at `theta0` yields `converged = false`.
pub fn lr_test_point(
    data: &Dataset,
    graph: &MixedGraph,
    theta0: &ModelParams,
    method: Calibration,
    fit: &FitResult,
    opts: &FitOptions,
) -> Result<TestReport> {
    check_b_support(graph, &theta0.b)?;
    check_omega_support(graph, &theta0.omega)?;
    let hat = require_valid(fit)?;
    let d = graph.dof_counts().d;
    let label = method.label();
    let adjustment = match method {
        Calibration::Ael => opts.ael_adjustment(data.n()),
        _ => Adjustment::None,
    };
    let at_hat = log_el_pinned(data, graph, &hat, adjustment, &opts.dual, None)?;
    if !at_hat.is_defined() {
        return Err(Error::Undefined("EL undefined at the estimate".into()));
    }
    let l_hat = at_hat.log_el();
    let l_null = match method {
        Calibration::El | Calibration::Ael => {
            if crate::params::i_minus_b(&theta0.b).is_err() {
                return Ok(TestReport::undefined(d, label));
            }
            let e = log_el_pinned(data, graph, theta0, adjustment, &opts.dual, None)?;
            if !e.is_defined() {
                return Ok(TestReport::undefined(d, label));
            }
            e.log_el()
        }
        Calibration::Eel => {
            let center = hat.to_theta(graph);
            let target = theta0.to_theta(graph);
            let ell = |x: &[f64]| log_el_theta(data, graph, x, Adjustment::None, &opts.dual);
            match eel_invert(&center, &target, data.n(), 1e-10, ell) {
                Ok(inv) => inv.log_el,
                Err(Error::NotBracketed(_)) => return Ok(TestReport::undefined(d, label)),
                Err(e) => return Err(e),
            }
        }
    };
    let statistic = (2.0 * (l_hat - l_null)).max(0.0);
    TestReport::from_statistic(statistic, d, label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    El,
    Gaussian,
}

/// Likelihood ratio of a submodel against a larger model on the same
/// vertices, on `d_full - d_sub` degrees of freedom. The EL engine uses the
/// hybrid profile fit for both models.
pub fn nested_lr_test(
    data: &Dataset,
    g_sub: &MixedGraph,
    g_full: &MixedGraph,
    engine: Engine,
    opts: &FitOptions,
) -> Result<TestReport> {
    if !g_sub.is_subgraph_of(g_full) {
        return Err(Error::InvalidTest("graphs are not nested".into()));
    }
    let dof = g_full.dof_counts().d - g_sub.dof_counts().d;
    if dof == 0 {
        return Err(Error::InvalidTest(
            "nested graphs are identical (zero degrees of freedom)".into(),
        ));
    }
    let (method, label) = match engine {
        Engine::El => (FitMethod::Hybrid, "el"),
        Engine::Gaussian => (FitMethod::Gaussian, "gaussian"),
    };
    let full = fit(data, g_full, method, opts)?;
    let sub = fit(data, g_sub, method, opts)?;
    if !full.converged() || !sub.converged() {
        return Err(Error::NoConvergence("nested fits did not both converge".into()));
    }
    let statistic = match engine {
        Engine::El => 2.0 * (full.log_el.unwrap_or(f64::NAN) - sub.log_el.unwrap_or(f64::NAN)),
        Engine::Gaussian => 2.0 * (full.objective - sub.objective),
    };
    TestReport::from_statistic(statistic.max(0.0), dof, label)
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular {
            what: what.into(),
            cond: condition_number(a),
        })
}

/// Plug-in asymptotic variance `(J^T W^{-1} J)^{-1} / n` of the MELE from
/// the naive residual-form estimating functions at `theta_hat`, with `J` and
/// `W` the EL-weighted means of `dG/dtheta` and `G G^T`.
pub fn asymp_variance_qin_lawless(data: &Dataset, graph: &MixedGraph, fit: &FitResult) -> Result<DMatrix<f64>> {
    let hat = require_valid(fit)?;
    let p = fit
        .weights
        .as_ref()
        .ok_or_else(|| Error::NoConvergence("fit has no EL weights".into()))?;
    let (n, m) = (data.n(), data.m());
    let y = data.y();
    let r = residuals(data, &hat.b)?;
    let g = naive_matrix(y, &r, &hat.omega);
    let pairs = vech_pairs(m);
    let edges = graph.directed_edges();
    let support = graph.omega_support();
    let d = edges.len() + support.len();
    let q = g.ncols();

    let mut w = DMatrix::zeros(q, q);
    for (i, row) in g.row_iter().enumerate() {
        w += row.transpose() * row * p[i];
    }
    let mut jac = DMatrix::zeros(q, d);
    for (k, &(u, v)) in pairs.iter().enumerate() {
        // d(r_u r_v)/d beta_ws = -Y_s (delta_wu r_v + delta_wv r_u)
        for (e, &(s, t)) in edges.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                let mut term = 0.0;
                if t == u {
                    term += r[(i, v)];
                }
                if t == v {
                    term += r[(i, u)];
                }
                acc -= p[i] * y[(i, s)] * term;
            }
            jac[(m + k, e)] = acc;
        }
        if let Some(j) = support.iter().position(|&pr| pr == (u, v)) {
            jac[(m + k, edges.len() + j)] = -1.0;
        }
    }
    let w_inv = spd_inverse(&w, "second moment of the estimating functions")?;
    let info = jac.transpose() * w_inv * &jac;
    let mut v = spd_inverse(&info, "EL information matrix")? / n as f64;
    symmetrize(&mut v);
    Ok(v)
}

/// `A = (1/n) d^2 l / d theta^2` by central differences of the analytic
/// gradient.
fn gaussian_mean_hessian(data: &Dataset, graph: &MixedGraph, theta: &[f64]) -> Result<DMatrix<f64>> {
    let d = theta.len();
    let n = data.n() as f64;
    let mut a = DMatrix::zeros(d, d);
    for k in 0..d {
        let h = 1e-5 * theta[k].abs().max(1.0);
        let mut plus = theta.to_vec();
        let mut minus = theta.to_vec();
        plus[k] += h;
        minus[k] -= h;
        let (_, gp) = gaussian_loglik_grad(data, graph, &ModelParams::from_theta(graph, &plus))?;
        let (_, gm) = gaussian_loglik_grad(data, graph, &ModelParams::from_theta(graph, &minus))?;
        for j in 0..d {
            a[(j, k)] = (gp[j] - gm[j]) / (2.0 * h * n);
        }
    }
    symmetrize(&mut a);
    Ok(a)
}

fn require_gaussian(gfit: &FitResult) -> Result<ModelParams> {
    if gfit.method != FitMethod::Gaussian {
        return Err(Error::InvalidTest("a Gaussian MLE fit is required".into()));
    }
    require_valid(gfit)
}

/// Sandwich variance `A^{-1} B A^{-T} / n` of the Gaussian MLE, with `A` the
/// mean Hessian and `B` the mean outer product of per-observation scores.
pub fn sandwich_variance_gaussian(data: &Dataset, graph: &MixedGraph, gfit: &FitResult) -> Result<DMatrix<f64>> {
    let hat = require_gaussian(gfit)?;
    let theta = hat.to_theta(graph);
    let a = gaussian_mean_hessian(data, graph, &theta)?;
    let neg_a_inv = spd_inverse(&(-&a), "Gaussian mean Hessian")?;
    let s = gaussian_scores(data, graph, &hat)?;
    let n = data.n() as f64;
    let b = s.tr_mul(&s) / n;
    let mut v = &neg_a_inv * b * &neg_a_inv / n;
    symmetrize(&mut v);
    Ok(v)
}

/// Inverse observed information `(-A)^{-1} / n` of the Gaussian MLE.
pub fn mle_variance_gaussian(data: &Dataset, graph: &MixedGraph, gfit: &FitResult) -> Result<DMatrix<f64>> {
    let hat = require_gaussian(gfit)?;
    let a = gaussian_mean_hessian(data, graph, &hat.to_theta(graph))?;
    let mut v = spd_inverse(&(-a), "Gaussian mean Hessian")? / data.n() as f64;
    symmetrize(&mut v);
    Ok(v)
}

/// Wald statistic `(theta_hat - theta0)^T V^{-1} (theta_hat - theta0)` on
/// `dim(theta)` degrees of freedom.
pub fn wald_test(theta_hat: &[f64], theta0: &[f64], variance: &DMatrix<f64>, method: &str) -> Result<TestReport> {
    let d = theta_hat.len();
    if theta0.len() != d || variance.shape() != (d, d) {
        return Err(Error::Dimension("Wald test inputs differ in size".into()));
    }
    let diff = DVector::from_iterator(d, theta_hat.iter().zip(theta0).map(|(a, b)| a - b));
    let v_inv = spd_inverse(variance, "Wald variance")?;
    let statistic = (diff.transpose() * v_inv * &diff)[(0, 0)];
    TestReport::from_statistic(statistic, d, method)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::fit_profile;
    use crate::gaussian::gaussian_mle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_data(n: usize, m: usize, seed: u64, b: &DMatrix<f64>) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e: DMatrix<f64> = DMatrix::from_fn(n, m, |_, _| -> f64 { StandardNormal.sample(&mut rng) });
        let a = crate::params::i_minus_b(b).unwrap();
        let y = e * a.try_inverse().unwrap().transpose();
        Dataset::new(y).unwrap()
    }

    #[test]
    fn chi2_tail_values() {
        // P(chi2_1 > 3.841458820694124) = 0.05; P(chi2_2 > x) = exp(-x/2)
        assert!((chi2_sf(3.841458820694124, 1) - 0.05).abs() < 1e-12);
        assert!((chi2_sf(3.0, 2) - (-1.5f64).exp()).abs() < 1e-14);
        assert_eq!(chi2_sf(0.0, 3), 1.0);
        assert_eq!(chi2_sf(f64::INFINITY, 3), 0.0);
        assert!((chi2_quantile(0.9, 2) - 2.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn reported_elr_p_value() {
        let r = TestReport::from_statistic(4.379, 1, "el").unwrap();
        assert!((r.p_value - 0.0364).abs() < 5e-4);
        assert!(TestReport::from_statistic(1.0, 0, "el").is_err());
    }

    #[test]
    fn p_value_monotone() {
        for dof in 1..6 {
            let mut last = 1.0;
            for k in 0..100 {
                let p = chi2_sf(k as f64 * 0.3, dof);
                assert!((0.0..=1.0).contains(&p) && p <= last);
                last = p;
            }
        }
    }

    #[test]
    fn lr_at_estimate_is_zero() {
        let g = MixedGraph::parse("nodes: A B C\nA -> B\nB -> C\n").unwrap();
        let mut b = DMatrix::zeros(3, 3);
        b[(1, 0)] = 0.6;
        b[(2, 1)] = -0.4;
        let data = normal_data(200, 3, 11, &b);
        let opts = FitOptions::default();
        let f = fit_profile(&data, &g, FitMethod::Hybrid, &opts).unwrap();
        assert!(f.converged());
        let hat = f.params().unwrap();
        for cal in [Calibration::El, Calibration::Eel] {
            let r = lr_test_point(&data, &g, &hat, cal, &f, &opts).unwrap();
            assert!(r.statistic.abs() < 1e-6, "{cal:?} {}", r.statistic);
            assert!(r.p_value > 0.999);
        }
        // statistic against the truth equals twice the difference of two
        // independently solved inner problems
        let truth = ModelParams::new(&g, b, DMatrix::identity(3, 3)).unwrap();
        let r = lr_test_point(&data, &g, &truth, Calibration::El, &f, &opts).unwrap();
        let l_hat = log_el_pinned(&data, &g, &hat, Adjustment::None, &opts.dual, None)
            .unwrap()
            .log_el();
        let l0 = log_el_pinned(&data, &g, &truth, Adjustment::None, &opts.dual, None)
            .unwrap()
            .log_el();
        assert!((r.statistic - 2.0 * (l_hat - l0)).abs() < 1e-9);
        // EEL regions contain EL regions
        let re = lr_test_point(&data, &g, &truth, Calibration::Eel, &f, &opts).unwrap();
        assert!(re.statistic <= r.statistic + 1e-9);
        let ra = lr_test_point(&data, &g, &truth, Calibration::Ael, &f, &opts).unwrap();
        assert!(ra.converged && ra.statistic >= 0.0);
    }

    #[test]
    fn nested_identical_is_error() {
        let g = MixedGraph::parse("nodes: A B\nA -> B\n").unwrap();
        let data = normal_data(50, 2, 3, &DMatrix::zeros(2, 2));
        let e = nested_lr_test(&data, &g, &g, Engine::Gaussian, &FitOptions::default());
        assert!(matches!(e, Err(Error::InvalidTest(_))));
        let other = MixedGraph::parse("nodes: A B\nB -> A\n").unwrap();
        assert!(nested_lr_test(&data, &g, &other, Engine::El, &FitOptions::default()).is_err());
    }

    #[test]
    fn nested_gaussian_one_edge() {
        let sub = MixedGraph::parse("nodes: A B C\nA -> B\nB -> C\n").unwrap();
        let full = MixedGraph::parse("nodes: A B C\nA -> B\nB -> C\nA <-> C\n").unwrap();
        let mut b = DMatrix::zeros(3, 3);
        b[(1, 0)] = 0.5;
        b[(2, 1)] = 0.5;
        let data = normal_data(300, 3, 5, &b);
        for engine in [Engine::Gaussian, Engine::El] {
            let r = nested_lr_test(&data, &sub, &full, engine, &FitOptions::default()).unwrap();
            assert_eq!(r.dof, 1);
            assert!(r.statistic >= 0.0 && (0.0..=1.0).contains(&r.p_value));
        }
    }

    #[test]
    fn qin_lawless_scalar_oracle() {
        let g = MixedGraph::parse("nodes: A\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..80)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                vec![z + 0.3 * z * z - 0.3]
            })
            .collect();
        let data = Dataset::from_rows(&rows).unwrap();
        let f = fit_profile(&data, &g, FitMethod::El, &FitOptions::default()).unwrap();
        assert!(f.converged());
        let v = asymp_variance_qin_lawless(&data, &g, &f).unwrap();
        let p = f.weights.as_ref().unwrap();
        let y = data.y().column(0);
        let mom = |k: i32| (0..80).map(|i| p[i] * y[i].powi(k)).sum::<f64>();
        let (m2, m3, m4) = (mom(2), mom(3), mom(4));
        let oracle = (m4 - m2 * m2 - m3 * m3 / m2) / 80.0;
        assert!(
            (v[(0, 0)] - oracle).abs() < 1e-10 * oracle.abs().max(1.0),
            "{} vs {oracle}",
            v[(0, 0)]
        );
    }

    #[test]
    fn qin_lawless_symmetric_psd() {
        let g = MixedGraph::parse("nodes: A B C\nA -> B\nB -> C\nA <-> C\n").unwrap();
        let mut b = DMatrix::zeros(3, 3);
        b[(1, 0)] = 0.7;
        b[(2, 1)] = 0.3;
        let data = normal_data(300, 3, 21, &b);
        let f = fit_profile(&data, &g, FitMethod::Hybrid, &FitOptions::default()).unwrap();
        let v = asymp_variance_qin_lawless(&data, &g, &f).unwrap();
        assert!((&v - v.transpose()).amax() < 1e-10);
        assert!(crate::params::min_eigenvalue(&v) > 0.0);
    }

    #[test]
    fn scores_sum_to_gradient() {
        let g = MixedGraph::parse("nodes: A B C\nA -> B\nA -> C\nB <-> C\n").unwrap();
        let data = normal_data(40, 3, 2, &DMatrix::zeros(3, 3));
        let mut omega = DMatrix::identity(3, 3);
        omega[(1, 2)] = 0.3;
        omega[(2, 1)] = 0.3;
        let mut b = DMatrix::zeros(3, 3);
        b[(1, 0)] = 0.2;
        b[(2, 0)] = -0.5;
        let params = ModelParams::new(&g, b, omega).unwrap();
        let s = gaussian_scores(&data, &g, &params).unwrap();
        let (_, grad) = gaussian_loglik_grad(&data, &g, &params).unwrap();
        for (k, gk) in grad.iter().enumerate() {
            assert!((s.column(k).sum() - gk).abs() < 1e-10 * (1.0 + gk.abs()));
        }
    }

    #[test]
    fn sandwich_matches_inverse_information_for_gaussian_data() {
        let g = MixedGraph::parse("nodes: A B C\nA -> B\nB -> C\nA <-> C\n").unwrap();
        let mut b = DMatrix::zeros(3, 3);
        b[(1, 0)] = 0.5;
        b[(2, 1)] = -0.5;
        let data = normal_data(5000, 3, 8, &b);
        let gfit = gaussian_mle(&data, &g, &FitOptions::default()).unwrap();
        assert!(gfit.converged());
        let s = sandwich_variance_gaussian(&data, &g, &gfit).unwrap();
        let w = mle_variance_gaussian(&data, &g, &gfit).unwrap();
        assert!((&s - s.transpose()).amax() < 1e-12);
        assert!((&s - &w).norm() / w.norm() < 0.1);
    }

    #[test]
    fn wald_statistic() {
        let v = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let r = wald_test(&[2.0, 1.0], &[0.0, 0.0], &v, "wald").unwrap();
        assert!((r.statistic - 2.0).abs() < 1e-14);
        assert!((r.p_value - (-1.0f64).exp()).abs() < 1e-12);
    }
}
