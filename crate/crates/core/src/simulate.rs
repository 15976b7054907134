//! Random graphs, parameters and error distributions, and the replicated
//! experiment runner behind the convergence, timing, error and coverage
//! studies.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimation::{fit, FitMethod, FitOptions, FitResult, FitStatus};
use crate::graph::MixedGraph;
use crate::inference::{
    asymp_variance_qin_lawless, lr_test_point, mle_variance_gaussian, sandwich_variance_gaussian, wald_test,
    Calibration,
};
use crate::params::{i_minus_b, sigma_of, vech, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDistribution {
    Gaussian,
    /// Multivariate t with `dof > 2` degrees of freedom and covariance `Omega`.
    T {
        dof: f64,
    },
    /// `exp(Z) - sqrt(e)` with `Z ~ N(0, C)`, `C` the correlation matrix of `Omega`.
    Lognormal,
    /// Recentered gamma marginals with covariance `Omega`.
    Gamma,
}

impl ErrorDistribution {
    pub fn label(self) -> &'static str {
        match self {
            ErrorDistribution::Gaussian => "gaussian",
            ErrorDistribution::T { .. } => "t",
            ErrorDistribution::Lognormal => "lognormal",
            ErrorDistribution::Gamma => "gamma",
        }
    }
}

/// Confidence-region constructions scored for coverage at the true
/// parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    /// EL ratio with chi-square calibration.
    El,
    Ael,
    Eel,
    /// Wald region from the inverse Gaussian information.
    WaldMle,
    WaldSandwich,
    /// Wald region from the plug-in EL variance.
    WaldQin,
}

impl Region {
    pub fn label(self) -> &'static str {
        match self {
            Region::El => "cr_el",
            Region::Ael => "cr_ael",
            Region::Eel => "cr_eel",
            Region::WaldMle => "wald_mle",
            Region::WaldSandwich => "wald_sandwich",
            Region::WaldQin => "wald_qin",
        }
    }

    /// The estimator the region is built around.
    pub fn base_fit(self) -> FitMethod {
        match self {
            Region::WaldMle | Region::WaldSandwich => FitMethod::Gaussian,
            _ => FitMethod::Hybrid,
        }
    }
}

/// One entry of an experiment's method list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MethodSpec {
    Fit(FitMethod),
    Region(Region),
}

impl MethodSpec {
    pub fn label(self) -> &'static str {
        match self {
            MethodSpec::Fit(m) => m.label(),
            MethodSpec::Region(r) => r.label(),
        }
    }

    pub fn from_label(s: &str) -> Option<MethodSpec> {
        let regions = [
            Region::El,
            Region::Ael,
            Region::Eel,
            Region::WaldMle,
            Region::WaldSandwich,
            Region::WaldQin,
        ];
        if let Some(r) = regions
            .into_iter()
            .find(|r| r.label() == s || r.label().replace('_', "-") == s)
        {
            return Some(MethodSpec::Region(r));
        }
        FitMethod::from_label(s).map(MethodSpec::Fit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub m: usize,
    pub n_directed: usize,
    pub n_bidirected: usize,
    /// Sample size per replication.
    pub n: usize,
    pub distribution: ErrorDistribution,
    pub replications: usize,
    pub seed: u64,
    pub methods: Vec<MethodSpec>,
    pub nominal_level: f64,
    /// Draw one graph for all replications instead of one per replication.
    pub fixed_graph: bool,
    /// Record wall times; when off the `seconds` column is `NA` and the
    /// output is fully reproducible.
    pub timing: bool,
    pub fit: FitOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            m: 8,
            n_directed: 10,
            n_bidirected: 6,
            n: 100,
            distribution: ErrorDistribution::Gaussian,
            replications: 20,
            seed: 1,
            methods: vec![MethodSpec::Fit(FitMethod::Hybrid), MethodSpec::Fit(FitMethod::NaiveEl)],
            nominal_level: 0.9,
            fixed_graph: false,
            timing: true,
            fit: FitOptions::default(),
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "m",
    "n_directed",
    "n_bidirected",
    "n",
    "distribution",
    "t_dof",
    "replications",
    "seed",
    "methods",
    "nominal_level",
    "fixed_graph",
    "timing",
    "tol_inner",
    "max_iter_inner",
    "tol_outer",
    "max_iter",
    "ael_level",
];

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Some(true),
        "false" | "no" | "0" | "off" => Some(false),
        _ => None,
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines (`#` starts a comment) over the defaults.
    /// Every problem found is reported, one per line.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut t_dof = 4.0;
        let mut problems = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = lineno + 1;
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {lineno}: expected `key = value`"));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| format!("line {lineno}: invalid value `{value}` for `{key}` ({what})");
            macro_rules! set {
                ($field:expr, $ty:ty, $what:expr) => {
                    match value.parse::<$ty>() {
                        Ok(x) => $field = x,
                        Err(_) => problems.push(bad($what)),
                    }
                };
            }
            match key {
                "m" => set!(cfg.m, usize, "non-negative integer"),
                "n_directed" => set!(cfg.n_directed, usize, "non-negative integer"),
                "n_bidirected" => set!(cfg.n_bidirected, usize, "non-negative integer"),
                "n" => set!(cfg.n, usize, "non-negative integer"),
                "t_dof" => set!(t_dof, f64, "number"),
                "replications" => set!(cfg.replications, usize, "non-negative integer"),
                "seed" => set!(cfg.seed, u64, "64-bit unsigned integer"),
                "nominal_level" => set!(cfg.nominal_level, f64, "number"),
                "tol_inner" => set!(cfg.fit.dual.tol, f64, "number"),
                "max_iter_inner" => set!(cfg.fit.dual.max_iter, usize, "non-negative integer"),
                "tol_outer" => set!(cfg.fit.tol_outer, f64, "number"),
                "max_iter" => set!(cfg.fit.max_outer, usize, "non-negative integer"),
                "ael_level" => match value.parse::<f64>() {
                    Ok(x) => cfg.fit.ael_level = Some(x),
                    Err(_) => problems.push(bad("number")),
                },
                "distribution" => match value {
                    "gaussian" => cfg.distribution = ErrorDistribution::Gaussian,
                    "t" => cfg.distribution = ErrorDistribution::T { dof: 0.0 },
                    "lognormal" => cfg.distribution = ErrorDistribution::Lognormal,
                    "gamma" => cfg.distribution = ErrorDistribution::Gamma,
                    _ => problems.push(bad("one of gaussian, t, lognormal, gamma")),
                },
                "methods" => {
                    let mut methods = Vec::new();
                    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                        match MethodSpec::from_label(item) {
                            Some(m) if !methods.contains(&m) => methods.push(m),
                            Some(_) => {}
                            None => problems.push(format!("line {lineno}: unknown method `{item}`")),
                        }
                    }
                    cfg.methods = methods;
                }
                "fixed_graph" | "timing" => match parse_bool(value) {
                    Some(b) if key == "timing" => cfg.timing = b,
                    Some(b) => cfg.fixed_graph = b,
                    None => problems.push(bad("true or false")),
                },
                _ => problems.push(format!(
                    "line {lineno}: unknown key `{key}` (expected one of {})",
                    CONFIG_KEYS.join(", ")
                )),
            }
        }
        if let ErrorDistribution::T { .. } = cfg.distribution {
            cfg.distribution = ErrorDistribution::T { dof: t_dof };
        }
        if let Err(Error::Config(msg)) = cfg.validate() {
            problems.push(msg);
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let pairs = self.m * self.m.saturating_sub(1) / 2;
        if self.m == 0 {
            problems.push("m must be at least 1".to_string());
        }
        if self.n_directed > pairs {
            problems.push(format!("n_directed = {} exceeds m(m-1)/2 = {pairs}", self.n_directed));
        } else if self.n_bidirected > pairs - self.n_directed {
            problems.push(format!(
                "n_bidirected = {} exceeds the {} pairs left after directed edges",
                self.n_bidirected,
                pairs - self.n_directed
            ));
        }
        if self.n < 2 {
            problems.push("n must be at least 2".to_string());
        }
        if self.replications == 0 {
            problems.push("replications must be at least 1".to_string());
        }
        if let ErrorDistribution::T { dof } = self.distribution {
            if !(dof > 2.0) {
                problems.push(format!("t_dof = {dof} must exceed 2"));
            }
        }
        if !(self.nominal_level > 0.0 && self.nominal_level < 1.0) {
            problems.push(format!("nominal_level = {} must lie in (0, 1)", self.nominal_level));
        }
        if self.methods.is_empty() {
            problems.push("methods must list at least one method".to_string());
        }
        if !(self.fit.dual.tol > 0.0 && self.fit.tol_outer > 0.0) {
            problems.push("tolerances must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("\n")))
        }
    }

    /// Key-value rendering accepted by [`parse`](Self::parse).
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let t_dof = match self.distribution {
            ErrorDistribution::T { dof } => dof,
            _ => 4.0,
        };
        let mut out = vec![
            ("m", self.m.to_string()),
            ("n_directed", self.n_directed.to_string()),
            ("n_bidirected", self.n_bidirected.to_string()),
            ("n", self.n.to_string()),
            ("distribution", self.distribution.label().to_string()),
            ("t_dof", t_dof.to_string()),
            ("replications", self.replications.to_string()),
            ("seed", self.seed.to_string()),
            (
                "methods",
                self.methods.iter().map(|m| m.label()).collect::<Vec<_>>().join(","),
            ),
            ("nominal_level", self.nominal_level.to_string()),
            ("fixed_graph", self.fixed_graph.to_string()),
            ("timing", self.timing.to_string()),
            ("tol_inner", self.fit.dual.tol.to_string()),
            ("max_iter_inner", self.fit.dual.max_iter.to_string()),
            ("tol_outer", self.fit.tol_outer.to_string()),
            ("max_iter", self.fit.max_outer.to_string()),
        ];
        if let Some(a) = self.fit.ael_level {
            out.push(("ael_level", a.to_string()));
        }
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_config_string(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Random acyclic mixed graph: directed edges `u -> v` (`u < v`) drawn
/// uniformly from all pairs, then bidirected edges from the remaining pairs.
pub fn gen_graph<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Result<MixedGraph> {
    let m = cfg.m;
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|u| (u + 1..m).map(move |v| (u, v))).collect();
    if cfg.n_directed + cfg.n_bidirected > pairs.len() {
        return Err(Error::Config("more edges requested than vertex pairs".into()));
    }
    let chosen = sample(rng, pairs.len(), cfg.n_directed);
    let mut taken = vec![false; pairs.len()];
    for i in chosen.iter() {
        taken[i] = true;
    }
    let directed: Vec<_> = chosen.iter().map(|i| pairs[i]).collect();
    let rest: Vec<_> = (0..pairs.len()).filter(|&i| !taken[i]).map(|i| pairs[i]).collect();
    let bidirected: Vec<_> = sample(rng, rest.len(), cfg.n_bidirected)
        .iter()
        .map(|i| rest[i])
        .collect();
    let names = (1..=m).map(|i| format!("V{i}")).collect();
    Ok(MixedGraph::new(names, directed, bidirected)?)
}

fn uniform_two_sided<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let magnitude = rng.random_range(lo..hi);
    if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

/// `beta` uniform on `(-1, -0.2) U (0.2, 1)`; supported off-diagonal `omega`
/// uniform on `(-0.8, -0.3) U (0.3, 0.8)`; `omega_vv` is the row's absolute
/// off-diagonal sum plus `1 + E`, `E ~ Exp(1)`.
pub fn gen_params<R: Rng + ?Sized>(graph: &MixedGraph, rng: &mut R) -> ModelParams {
    let m = graph.num_vertices();
    let mut b = DMatrix::zeros(m, m);
    for &(s, v) in graph.directed_edges() {
        b[(v, s)] = uniform_two_sided(rng, 0.2, 1.0);
    }
    let mut omega = DMatrix::zeros(m, m);
    for &(u, v) in graph.bidirected_edges() {
        let w = uniform_two_sided(rng, 0.3, 0.8);
        omega[(u, v)] = w;
        omega[(v, u)] = w;
    }
    for v in 0..m {
        let off: f64 = (0..m).filter(|&u| u != v).map(|u| omega[(v, u)].abs()).sum();
        let e: f64 = Exp1.sample(rng);
        omega[(v, v)] = off + 1.0 + e;
    }
    ModelParams { b, omega }
}

fn gaussian_rows<R: Rng + ?Sized>(cov: &DMatrix<f64>, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let m = cov.nrows();
    let l = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("error covariance".into()))?
        .unpack();
    let z = DMatrix::from_fn(n, m, |_, _| -> f64 { StandardNormal.sample(rng) });
    Ok(z * l.transpose())
}

fn correlation(omega: &DMatrix<f64>) -> DMatrix<f64> {
    let m = omega.nrows();
    DMatrix::from_fn(m, m, |i, j| omega[(i, j)] / (omega[(i, i)] * omega[(j, j)]).sqrt())
}

/// `n x m` matrix of independent error rows with mean zero.
pub fn sample_errors<R: Rng + ?Sized>(
    dist: ErrorDistribution,
    omega: &DMatrix<f64>,
    n: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let m = omega.nrows();
    match dist {
        ErrorDistribution::Gaussian => gaussian_rows(omega, n, rng),
        ErrorDistribution::T { dof } => {
            if !(dof > 2.0) {
                return Err(Error::Config(format!("t degrees of freedom {dof} must exceed 2")));
            }
            let scale = omega * ((dof - 2.0) / dof);
            let mut z = gaussian_rows(&scale, n, rng)?;
            let chi = ChiSquared::new(dof).map_err(|e| Error::Config(e.to_string()))?;
            for mut row in z.row_iter_mut() {
                let w: f64 = chi.sample(rng);
                row *= (dof / w).sqrt();
            }
            Ok(z)
        }
        ErrorDistribution::Lognormal => {
            let z = gaussian_rows(&correlation(omega), n, rng)?;
            let shift = 0.5f64.exp();
            Ok(z.map(|x| x.exp() - shift))
        }
        ErrorDistribution::Gamma => {
            let mut shapes = Vec::with_capacity(m);
            for v in 0..m {
                let off: f64 = (0..m).filter(|&u| u != v).map(|u| omega[(v, u)].abs()).sum();
                let shape = omega[(v, v)] - off;
                if !(shape > 0.0) {
                    return Err(Error::Config(format!(
                        "gamma shape {shape} at vertex {v} is not positive"
                    )));
                }
                shapes.push(shape);
            }
            let mut eps = DMatrix::zeros(n, m);
            let mut mean = shapes.clone();
            for (v, &shape) in shapes.iter().enumerate() {
                let g = Gamma::new(shape, 1.0).map_err(|e| Error::Config(e.to_string()))?;
                for i in 0..n {
                    eps[(i, v)] = g.sample(rng);
                }
            }
            for u in 0..m {
                for v in u + 1..m {
                    let w = omega[(u, v)];
                    if w == 0.0 {
                        continue;
                    }
                    // one sign per edge and dataset
                    let xi = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let other = if w > 0.0 { xi } else { -xi };
                    let g = Gamma::new(w.abs(), 1.0).map_err(|e| Error::Config(e.to_string()))?;
                    for i in 0..n {
                        let delta: f64 = g.sample(rng);
                        eps[(i, u)] += xi * delta;
                        eps[(i, v)] += other * delta;
                    }
                    mean[u] += xi * w.abs();
                    mean[v] += other * w.abs();
                }
            }
            for (v, mu) in mean.iter().enumerate() {
                eps.column_mut(v).add_scalar_mut(-mu);
            }
            Ok(eps)
        }
    }
}

/// `Y = E (I - B)^{-T}`: each error row mapped through `(I - B)^{-1}`.
pub fn sample_data(b: &DMatrix<f64>, errors: DMatrix<f64>) -> Result<Dataset> {
    let a = i_minus_b(b)?;
    let det = a.determinant();
    let inv = a.try_inverse().ok_or(Error::SingularSystem { det })?;
    Dataset::new(errors * inv.transpose())
}

/// Error covariance actually produced by [`sample_errors`].
pub fn effective_omega(dist: ErrorDistribution, omega: &DMatrix<f64>) -> DMatrix<f64> {
    match dist {
        ErrorDistribution::Lognormal => {
            let e = 1f64.exp();
            correlation(omega).map(|c| e * (c.exp() - 1.0))
        }
        _ => omega.clone(),
    }
}

pub fn true_sigma(dist: ErrorDistribution, b: &DMatrix<f64>, omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    sigma_of(b, &effective_omega(dist, omega))
}

/// `||vech(est) - vech(truth)||^2 / ||vech(truth)||^2`.
pub fn relative_error(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let (a, b) = (vech(est), vech(truth));
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    num / den
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub method: MethodSpec,
    /// Fit status label, `error` when the fit raised, or `undefined` when a
    /// region's statistic could not be computed.
    pub status: String,
    pub seconds: Option<f64>,
    pub rel_err_sigma: Option<f64>,
    pub covered: Option<bool>,
    /// Region statistic (likelihood ratio or Wald).
    pub statistic: Option<f64>,
    pub sigma_hat: Option<DMatrix<f64>>,
}

/// The generated truth of one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationTruth {
    pub rep: usize,
    pub graph: MixedGraph,
    pub params: ModelParams,
    pub sigma: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub replications: usize,
    pub converged: usize,
    pub convergence_rate: f64,
    pub convergence_se: f64,
    /// Replications where every fit method in the run converged.
    pub joint_count: usize,
    pub mean_seconds: Option<f64>,
    pub se_seconds: Option<f64>,
    pub mean_rel_err: Option<f64>,
    pub se_rel_err: Option<f64>,
    pub coverage: Option<f64>,
    pub coverage_se: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub records: Vec<ReplicationRecord>,
    pub truths: Vec<ReplicationTruth>,
    pub summaries: Vec<MethodSummary>,
    pub joint_converged: Vec<usize>,
}

fn status_label(s: FitStatus) -> &'static str {
    match s {
        FitStatus::ValidStationary => "valid_stationary",
        FitStatus::NoConvergence => "no_convergence",
        FitStatus::HullAtOptimum => "hull_at_optimum",
    }
}

/// Random stream of replication `rep`; stream 0 is reserved for a fixed
/// graph.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

fn fixed_graph_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

type FitCache = HashMap<FitMethod, (std::result::Result<FitResult, String>, f64)>;

fn cached_fit<'a>(
    cache: &'a mut FitCache,
    data: &Dataset,
    graph: &MixedGraph,
    method: FitMethod,
    opts: &FitOptions,
) -> &'a (std::result::Result<FitResult, String>, f64) {
    cache.entry(method).or_insert_with(|| {
        let start = Instant::now();
        let result = fit(data, graph, method, opts).map_err(|e| e.to_string());
        (result, start.elapsed().as_secs_f64())
    })
}

fn region_statistic(
    region: Region,
    data: &Dataset,
    graph: &MixedGraph,
    truth: &ModelParams,
    f: &FitResult,
    opts: &FitOptions,
) -> Result<crate::inference::TestReport> {
    let theta0 = truth.to_theta(graph);
    let theta_hat = || f.params().map(|p| p.to_theta(graph)).unwrap_or_default();
    match region {
        Region::El => lr_test_point(data, graph, truth, Calibration::El, f, opts),
        Region::Ael => lr_test_point(data, graph, truth, Calibration::Ael, f, opts),
        Region::Eel => lr_test_point(data, graph, truth, Calibration::Eel, f, opts),
        Region::WaldMle => wald_test(
            &theta_hat(),
            &theta0,
            &mle_variance_gaussian(data, graph, f)?,
            region.label(),
        ),
        Region::WaldSandwich => wald_test(
            &theta_hat(),
            &theta0,
            &sandwich_variance_gaussian(data, graph, f)?,
            region.label(),
        ),
        Region::WaldQin => wald_test(
            &theta_hat(),
            &theta0,
            &asymp_variance_qin_lawless(data, graph, f)?,
            region.label(),
        ),
    }
}

fn run_replication(
    cfg: &ExperimentConfig,
    rep: usize,
    fixed: Option<&MixedGraph>,
) -> Result<(Vec<ReplicationRecord>, ReplicationTruth)> {
    let mut rng = replication_rng(cfg.seed, rep);
    let graph = match fixed {
        Some(g) => g.clone(),
        None => gen_graph(cfg, &mut rng)?,
    };
    let params = gen_params(&graph, &mut rng);
    let errors = sample_errors(cfg.distribution, &params.omega, cfg.n, &mut rng)?;
    let data = sample_data(&params.b, errors)?;
    let sigma = true_sigma(cfg.distribution, &params.b, &params.omega)?;
    // coverage is judged at the parameter that actually generated the data
    let target = ModelParams {
        b: params.b.clone(),
        omega: effective_omega(cfg.distribution, &params.omega),
    };

    let mut cache = FitCache::new();
    let mut records = Vec::with_capacity(cfg.methods.len());
    for &spec in &cfg.methods {
        let mut rec = ReplicationRecord {
            rep,
            method: spec,
            status: String::new(),
            seconds: None,
            rel_err_sigma: None,
            covered: None,
            statistic: None,
            sigma_hat: None,
        };
        match spec {
            MethodSpec::Fit(method) => {
                let (result, secs) = cached_fit(&mut cache, &data, &graph, method, &cfg.fit);
                rec.seconds = Some(*secs);
                match result {
                    Ok(f) => {
                        rec.status = status_label(f.status).into();
                        if f.converged() {
                            rec.sigma_hat = f.sigma_hat();
                            rec.rel_err_sigma = rec.sigma_hat.as_ref().map(|s| relative_error(s, &sigma));
                        }
                    }
                    Err(_) => rec.status = "error".into(),
                }
            }
            MethodSpec::Region(region) => {
                let (result, fit_secs) = cached_fit(&mut cache, &data, &graph, region.base_fit(), &cfg.fit).clone();
                let start = Instant::now();
                rec.covered = Some(false);
                match result {
                    Ok(f) if f.converged() => match region_statistic(region, &data, &graph, &target, &f, &cfg.fit) {
                        Ok(report) => {
                            rec.status = if report.converged {
                                "valid_stationary"
                            } else {
                                "undefined"
                            }
                            .into();
                            rec.statistic = Some(report.statistic);
                            rec.covered = Some(report.covers(cfg.nominal_level));
                        }
                        Err(_) => rec.status = "error".into(),
                    },
                    Ok(f) => rec.status = status_label(f.status).into(),
                    Err(_) => rec.status = "error".into(),
                }
                rec.seconds = Some(fit_secs + start.elapsed().as_secs_f64());
            }
        }
        if !cfg.timing {
            rec.seconds = None;
        }
        records.push(rec);
    }
    Ok((
        records,
        ReplicationTruth {
            rep,
            graph,
            params,
            sigma,
        },
    ))
}

fn mean_se(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (Some(mean), Some((var / k).sqrt()))
}

/// Replications in which every fit method of the run reached a valid
/// stationary point.
pub fn joint_converged(methods: &[MethodSpec], records: &[ReplicationRecord], replications: usize) -> Vec<usize> {
    (0..replications)
        .filter(|&rep| {
            records
                .iter()
                .filter(|r| r.rep == rep && matches!(r.method, MethodSpec::Fit(_)) && methods.contains(&r.method))
                .all(|r| r.status == "valid_stationary")
        })
        .collect()
}

/// Per-method aggregates with Monte Carlo standard errors. Times and
/// errors are averaged over the jointly converged replications; coverage
/// over all replications.
pub fn summarize(methods: &[MethodSpec], records: &[ReplicationRecord], replications: usize) -> Vec<MethodSummary> {
    let joint = joint_converged(methods, records, replications);
    let in_joint = |rep: usize| joint.binary_search(&rep).is_ok();
    methods
        .iter()
        .map(|&spec| {
            let rows: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == spec).collect();
            let reps = rows.len();
            let converged = rows.iter().filter(|r| r.status == "valid_stationary").count();
            let rate = converged as f64 / reps.max(1) as f64;
            let joint_rows: Vec<&&ReplicationRecord> = rows.iter().filter(|r| in_joint(r.rep)).collect();
            let secs: Vec<f64> = joint_rows.iter().filter_map(|r| r.seconds).collect();
            let errs: Vec<f64> = joint_rows.iter().filter_map(|r| r.rel_err_sigma).collect();
            let (mean_seconds, se_seconds) = mean_se(&secs);
            let (mean_rel_err, se_rel_err) = mean_se(&errs);
            let covered: Vec<bool> = rows.iter().filter_map(|r| r.covered).collect();
            let (coverage, coverage_se) = if covered.is_empty() {
                (None, None)
            } else {
                let c = covered.iter().filter(|&&b| b).count() as f64 / covered.len() as f64;
                (Some(c), Some((c * (1.0 - c) / covered.len() as f64).sqrt()))
            };
            MethodSummary {
                method: spec.label().to_string(),
                replications: reps,
                converged,
                convergence_rate: rate,
                convergence_se: (rate * (1.0 - rate) / reps.max(1) as f64).sqrt(),
                joint_count: joint.len(),
                mean_seconds,
                se_seconds,
                mean_rel_err,
                se_rel_err,
                coverage,
                coverage_se,
            }
        })
        .collect()
}

/// Runs all replications on the current rayon pool. Results do not depend
/// on the number of worker threads.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let fixed = if cfg.fixed_graph {
        Some(gen_graph(cfg, &mut fixed_graph_rng(cfg.seed))?)
    } else {
        None
    };
    let outcomes: Vec<Result<(Vec<ReplicationRecord>, ReplicationTruth)>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| run_replication(cfg, rep, fixed.as_ref()))
        .collect();
    let mut records = Vec::new();
    let mut truths = Vec::new();
    for outcome in outcomes {
        let (recs, truth) = outcome?;
        records.extend(recs);
        truths.push(truth);
    }
    let summaries = summarize(&cfg.methods, &records, cfg.replications);
    let joint_converged = joint_converged(&cfg.methods, &records, cfg.replications);
    Ok(ExperimentReport {
        config: cfg.clone(),
        records,
        truths,
        summaries,
        joint_converged,
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:e}"))
}

/// Per-replication CSV: `rep,method,status,seconds,rel_err_sigma,covered`.
pub fn records_csv(records: &[ReplicationRecord]) -> String {
    let mut out = String::from("rep,method,status,seconds,rel_err_sigma,covered\n");
    for r in records {
        let covered = r.covered.map_or("NA", |c| if c { "1" } else { "0" });
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.rep,
            r.method.label(),
            r.status,
            fmt_opt(r.seconds),
            fmt_opt(r.rel_err_sigma),
            covered
        );
    }
    out
}

/// Long-format dump of estimated and true covariance entries (`u <= v`)
/// for every converged fit.
pub fn estimates_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("rep,method,row,col,sigma_hat,sigma_true\n");
    for r in &report.records {
        let Some(est) = &r.sigma_hat else { continue };
        let truth = &report.truths[r.rep];
        let names = truth.graph.names();
        for u in 0..est.nrows() {
            for v in u..est.ncols() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:e},{:e}",
                    r.rep,
                    r.method.label(),
                    names[u],
                    names[v],
                    est[(u, v)],
                    truth.sigma[(u, v)]
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(m: usize, nd: usize, nb: usize) -> ExperimentConfig {
        ExperimentConfig {
            m,
            n_directed: nd,
            n_bidirected: nb,
            ..Default::default()
        }
    }

    fn sample_cov(e: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let n = e.nrows() as f64;
        let mean: Vec<f64> = e.column_iter().map(|c| c.sum() / n).collect();
        (mean, e.tr_mul(e) / n)
    }

    #[test]
    fn unique_two_node_graph() {
        let g = gen_graph(&cfg(2, 1, 0), &mut replication_rng(3, 0)).unwrap();
        assert_eq!(g.directed_edges(), &[(0, 1)]);
        assert!(g.bidirected_edges().is_empty());
    }

    #[test]
    fn graphs_are_acyclic_with_disjoint_pairs() {
        for rep in 0..200 {
            let g = gen_graph(&cfg(8, 10, 6), &mut replication_rng(7, rep)).unwrap();
            assert!(g.is_acyclic());
            assert_eq!(g.directed_edges().len(), 10);
            assert_eq!(g.bidirected_edges().len(), 6);
            for &(u, v) in g.directed_edges() {
                assert!(u < v && !g.has_bidirected(u, v));
            }
        }
        let a = gen_graph(&cfg(8, 10, 6), &mut replication_rng(7, 5)).unwrap();
        let b = gen_graph(&cfg(8, 10, 6), &mut replication_rng(7, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parameter_ranges() {
        let g = gen_graph(&cfg(8, 10, 6), &mut replication_rng(1, 0)).unwrap();
        let mut rng = replication_rng(1, 1);
        for _ in 0..10_000 {
            let p = gen_params(&g, &mut rng);
            for &(s, v) in g.directed_edges() {
                let x = p.b[(v, s)].abs();
                assert!(x > 0.2 && x < 1.0);
            }
            for &(u, v) in g.bidirected_edges() {
                let x = p.omega[(u, v)].abs();
                assert!(x > 0.3 && x < 0.8);
            }
            for v in 0..8 {
                let off: f64 = (0..8).filter(|&u| u != v).map(|u| p.omega[(v, u)].abs()).sum();
                assert!(p.omega[(v, v)] - off > 1.0);
            }
        }
    }

    #[test]
    fn diagonal_excess_is_exponential() {
        let g = gen_graph(&cfg(4, 2, 3), &mut replication_rng(2, 0)).unwrap();
        let mut rng = replication_rng(2, 1);
        let mut draws = Vec::with_capacity(100_000);
        while draws.len() < 100_000 {
            let p = gen_params(&g, &mut rng);
            for v in 0..4 {
                let off: f64 = (0..4).filter(|&u| u != v).map(|u| p.omega[(v, u)].abs()).sum();
                draws.push(p.omega[(v, v)] - off - 1.0);
            }
        }
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 1.0 - (-x).exp();
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS distance {ks}");
    }

    #[test]
    fn gaussian_identity_covariance() {
        let e = sample_errors(
            ErrorDistribution::Gaussian,
            &DMatrix::identity(3, 3),
            100_000,
            &mut replication_rng(4, 0),
        )
        .unwrap();
        let (_, cov) = sample_cov(&e);
        assert!((cov - DMatrix::identity(3, 3)).amax() < 0.02);
    }

    #[test]
    fn lognormal_marginal_variance() {
        let e = sample_errors(
            ErrorDistribution::Lognormal,
            &DMatrix::identity(2, 2),
            200_000,
            &mut replication_rng(5, 0),
        )
        .unwrap();
        let (mean, cov) = sample_cov(&e);
        let target = 1f64.exp() * (1f64.exp() - 1.0);
        for v in 0..2 {
            assert!(mean[v].abs() < 0.03);
            assert!((cov[(v, v)] - target).abs() / target < 0.03);
        }
    }

    #[test]
    fn gamma_construction_matches_omega() {
        let g = gen_graph(&cfg(6, 0, 6), &mut replication_rng(6, 0)).unwrap();
        let p = gen_params(&g, &mut replication_rng(6, 1));
        let e = sample_errors(ErrorDistribution::Gamma, &p.omega, 200_000, &mut replication_rng(6, 2)).unwrap();
        let (mean, cov) = sample_cov(&e);
        assert!(mean.iter().all(|x| x.abs() < 0.03));
        assert!((cov - &p.omega).norm() / p.omega.norm() < 0.02);
    }

    #[test]
    fn t_covariance_is_omega() {
        let omega = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let e = sample_errors(
            ErrorDistribution::T { dof: 7.0 },
            &omega,
            200_000,
            &mut replication_rng(8, 0),
        )
        .unwrap();
        let (_, cov) = sample_cov(&e);
        assert!((cov - &omega).norm() / omega.norm() < 0.03);
        assert!(sample_errors(
            ErrorDistribution::T { dof: 2.0 },
            &omega,
            10,
            &mut replication_rng(8, 1)
        )
        .is_err());
    }

    #[test]
    fn data_transform() {
        let d = sample_data(&DMatrix::zeros(2, 2), DMatrix::from_row_slice(1, 2, &[1.0, 2.0])).unwrap();
        assert_eq!(d.y(), &DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
        let mut b = DMatrix::zeros(2, 2);
        b[(1, 0)] = 0.5;
        let d = sample_data(&b, DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).unwrap();
        assert!((d.y() - DMatrix::from_row_slice(1, 2, &[1.0, 1.5])).amax() < 1e-15);
    }

    #[test]
    fn lognormal_effective_covariance() {
        let omega = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.6, 0.0, 1.0, 0.0, 0.6, 0.0, 3.0]);
        let eff = effective_omega(ErrorDistribution::Lognormal, &omega);
        let e = 1f64.exp();
        assert!((eff[(1, 1)] - e * (e - 1.0)).abs() < 1e-12);
        assert_eq!(eff[(0, 1)], 0.0);
        assert_eq!(eff[(1, 2)], 0.0);
        assert!(eff[(0, 2)] > 0.0);
        let b = DMatrix::zeros(3, 3);
        assert_eq!(
            true_sigma(ErrorDistribution::Gaussian, &b, &omega).unwrap(),
            sigma_of(&b, &omega).unwrap()
        );
    }

    #[test]
    fn relative_error_examples() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(relative_error(&s, &s), 0.0);
        assert!((relative_error(&(&s * 2.0), &s) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_round_trip_and_errors() {
        let c = ExperimentConfig::parse(
            "# study\nm = 6\nn_directed = 8\nn_bidirected = 4\nn = 150\ndistribution = t\nt_dof = 7\n\
             methods = hybrid, cr_eel, wald_mle\nreplications = 3\nseed = 99\ntiming = false\n",
        )
        .unwrap();
        assert_eq!(c.distribution, ErrorDistribution::T { dof: 7.0 });
        assert_eq!(c.methods.len(), 3);
        assert_eq!(ExperimentConfig::parse(&c.to_config_string()).unwrap(), c);
        let err = ExperimentConfig::parse("m = 3\nbogus = 1\nn = x\nn_directed = 4\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus") && err.contains("`x`"), "{err}");
        let err = ExperimentConfig::parse("m = 3\nn_directed = 4\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("n_directed"));
        assert!(ExperimentConfig::parse("distribution = t\nt_dof = 2\n").is_err());
    }

    #[test]
    fn experiment_is_deterministic_and_aggregates_recompute() {
        let c = ExperimentConfig {
            m: 4,
            n_directed: 3,
            n_bidirected: 1,
            n: 120,
            replications: 4,
            seed: 42,
            timing: false,
            methods: vec![
                MethodSpec::Fit(FitMethod::Hybrid),
                MethodSpec::Fit(FitMethod::Gaussian),
                MethodSpec::Region(Region::El),
                MethodSpec::Region(Region::WaldMle),
            ],
            ..Default::default()
        };
        let a = run_experiment(&c).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| run_experiment(&c).unwrap());
        assert_eq!(records_csv(&a.records), records_csv(&b.records));
        assert_eq!(a.records.len(), 16);
        let again = summarize(&c.methods, &a.records, c.replications);
        assert_eq!(again, a.summaries);
        let hybrid = &a.summaries[0];
        let errs: Vec<f64> = a
            .records
            .iter()
            .filter(|r| r.method == c.methods[0] && a.joint_converged.contains(&r.rep))
            .map(|r| r.rel_err_sigma.unwrap())
            .collect();
        if !errs.is_empty() {
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            assert!((hybrid.mean_rel_err.unwrap() - mean).abs() < 1e-15);
        }
    }
}
