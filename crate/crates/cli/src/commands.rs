use std::path::{Path, PathBuf};
use std::time::Instant;

use elsem::gaussian::{gaussian_loglik, gaussian_mle};
use elsem::inference::{
    asymp_variance_qin_lawless, gof_test, lr_test_point, mle_variance_gaussian, nested_lr_test,
    sandwich_variance_gaussian, wald_test,
};
use elsem::simulate::{estimates_csv, records_csv, run_experiment};
use elsem::{
    fit, Calibration, Dataset, Engine, Error, ExperimentConfig, FitMethod, FitOptions, FitResult, MethodSpec,
    MixedGraph, ModelParams, TestReport,
};
use serde_json::{json, Value};

use crate::report::{
    labeled_matrix, number17, opt_number17, read_labeled_matrix, write_json, Failure, Manifest, EXIT_NO_CONVERGENCE,
    EXIT_OK,
};

pub const FIT_METHODS: [&str; 7] = ["el", "ael", "hybrid", "naive", "naive-ael", "gaussian", "hybrid-gauss"];
pub const TEST_METHODS: [&str; 7] = ["el", "ael", "eel", "gaussian", "wald-mle", "wald-qin", "wald-sandwich"];

pub struct SolverArgs {
    pub tol_inner: Option<f64>,
    pub tol_outer: Option<f64>,
    pub max_iter: Option<usize>,
    pub ael_level: Option<f64>,
}

impl SolverArgs {
    fn options(&self, manifest: &mut Manifest) -> FitOptions {
        let mut opts = FitOptions::default();
        if let Some(t) = self.tol_inner {
            opts.dual.tol = t;
        }
        if let Some(t) = self.tol_outer {
            opts.tol_outer = t;
        }
        if let Some(k) = self.max_iter {
            opts.max_outer = k;
        }
        opts.ael_level = self.ael_level;
        manifest.option("tol_inner", opts.dual.tol);
        manifest.option("max_iter_inner", opts.dual.max_iter);
        manifest.option("tol_outer", opts.tol_outer);
        manifest.option("max_iter", opts.max_outer);
        manifest.option("ael_level", opts.ael_level);
        opts
    }
}

fn load_graph(manifest: &mut Manifest, role: &str, path: &Path) -> Result<MixedGraph, Failure> {
    let text = manifest.read_input(role, path)?;
    MixedGraph::parse(&text).map_err(|e| {
        let mut f = Failure::from(Error::from(e));
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

fn load_data(manifest: &mut Manifest, path: &Path, graph: &MixedGraph, center: bool) -> Result<Dataset, Failure> {
    let text = manifest.read_input("data", path)?;
    let data = Dataset::from_csv(text.as_bytes(), graph)?;
    Ok(if center { data.centered() } else { data })
}

pub struct FitCmd {
    pub graph: PathBuf,
    pub data: PathBuf,
    pub method: String,
    pub center: bool,
    pub solver: SolverArgs,
    pub out: Option<PathBuf>,
}

fn fit_json(graph: &MixedGraph, data: &Dataset, res: &FitResult) -> Value {
    let names = graph.names();
    json!({
        "method": res.method.label(),
        "status": res.status,
        "n": data.n(),
        "B": labeled_matrix(names, &res.b_hat),
        "Omega": res.omega_hat.as_ref().map(|o| labeled_matrix(names, o)),
        "Sigma": res.sigma_hat().map(|s| labeled_matrix(names, &s)),
        "log_el": opt_number17(res.log_el),
        "objective": number17(res.objective),
        "grad_norm": number17(res.grad_norm),
        "iterations": res.outer_iterations,
        "feasibility": opt_number17(res.feasibility),
    })
}

pub fn run_fit(cmd: &FitCmd, start: Instant) -> (u8, Value) {
    let mut manifest = Manifest::new("fit");
    manifest.option("method", cmd.method.as_str());
    manifest.option("center", cmd.center);
    let opts = cmd.solver.options(&mut manifest);
    let outcome = (|| -> Result<(u8, Value), Failure> {
        let method = FitMethod::from_label(&cmd.method)
            .ok_or_else(|| Failure::usage(format!("unknown fit method `{}`", cmd.method)))?;
        let graph = load_graph(&mut manifest, "graph", &cmd.graph)?;
        let data = load_data(&mut manifest, &cmd.data, &graph, cmd.center)?;
        let res = fit(&data, &graph, method, &opts)?;
        let code = if res.converged() { EXIT_OK } else { EXIT_NO_CONVERGENCE };
        Ok((code, fit_json(&graph, &data, &res)))
    })();
    finish(outcome, manifest, start, cmd.out.as_deref())
}

pub enum TestTarget {
    Gof,
    Nested(PathBuf),
    Point(PathBuf),
    Statistic { statistic: f64, dof: usize },
}

pub struct TestCmd {
    pub graph: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub method: String,
    pub target: TestTarget,
    pub center: bool,
    pub solver: SolverArgs,
    pub out: Option<PathBuf>,
}

fn load_theta0(manifest: &mut Manifest, path: &Path, graph: &MixedGraph) -> Result<ModelParams, Failure> {
    let text = manifest.read_input("theta0", path)?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: invalid JSON: {e}", path.display())))?;
    let b = read_labeled_matrix(v.get("B").unwrap_or(&Value::Null), graph, "theta0 B")?;
    let omega = read_labeled_matrix(v.get("Omega").unwrap_or(&Value::Null), graph, "theta0 Omega")?;
    Ok(ModelParams::new(graph, b, omega)?)
}

fn require_converged(res: FitResult) -> Result<FitResult, Failure> {
    if res.converged() {
        Ok(res)
    } else {
        Err(Error::NoConvergence(format!("{} fit ended with status {:?}", res.method.label(), res.status)).into())
    }
}

fn point_test(
    data: &Dataset,
    graph: &MixedGraph,
    theta0: &ModelParams,
    method: &str,
    opts: &FitOptions,
) -> Result<TestReport, Failure> {
    let calibration = match method {
        "el" => Some(Calibration::El),
        "ael" => Some(Calibration::Ael),
        "eel" => Some(Calibration::Eel),
        _ => None,
    };
    if let Some(c) = calibration {
        let hat = require_converged(fit(data, graph, FitMethod::Hybrid, opts)?)?;
        return Ok(lr_test_point(data, graph, theta0, c, &hat, opts)?);
    }
    let theta0_vec = theta0.to_theta(graph);
    match method {
        "gaussian" => {
            let g = require_converged(gaussian_mle(data, graph, opts)?)?;
            let l0 = gaussian_loglik(data, theta0)?;
            let statistic = (2.0 * (g.objective - l0)).max(0.0);
            Ok(TestReport::from_statistic(statistic, graph.dof_counts().d, "gaussian")?)
        }
        "wald-mle" | "wald-sandwich" => {
            let g = require_converged(gaussian_mle(data, graph, opts)?)?;
            let v = if method == "wald-mle" {
                mle_variance_gaussian(data, graph, &g)?
            } else {
                sandwich_variance_gaussian(data, graph, &g)?
            };
            let hat = g.params().expect("converged Gaussian fit has Omega").to_theta(graph);
            Ok(wald_test(&hat, &theta0_vec, &v, &method.replace('-', "_"))?)
        }
        "wald-qin" => {
            let hat = require_converged(fit(data, graph, FitMethod::Hybrid, opts)?)?;
            let v = asymp_variance_qin_lawless(data, graph, &hat)?;
            let theta_hat = hat.params().expect("converged fit has Omega").to_theta(graph);
            Ok(wald_test(&theta_hat, &theta0_vec, &v, "wald_qin")?)
        }
        other => Err(Failure::usage(format!("unknown test method `{other}`"))),
    }
}

fn test_report(cmd: &TestCmd, manifest: &mut Manifest, opts: &FitOptions) -> Result<TestReport, Failure> {
    if !TEST_METHODS.contains(&cmd.method.as_str()) {
        return Err(Failure::usage(format!("unknown test method `{}`", cmd.method)));
    }
    if let TestTarget::Statistic { statistic, dof } = cmd.target {
        manifest.option("statistic", statistic);
        manifest.option("dof", dof);
        return Ok(TestReport::from_statistic(statistic, dof, &cmd.method)?);
    }
    let graph_path = cmd
        .graph
        .as_ref()
        .ok_or_else(|| Failure::usage("--graph is required"))?;
    let graph = load_graph(manifest, "graph", graph_path)?;
    let data_path = cmd.data.as_ref().ok_or_else(|| Failure::usage("--data is required"))?;
    let data = load_data(manifest, data_path, &graph, cmd.center)?;
    match &cmd.target {
        TestTarget::Gof => {
            if cmd.method != "el" {
                return Err(Failure::usage("goodness-of-fit testing supports --method el only"));
            }
            let hat = require_converged(fit(&data, &graph, FitMethod::Hybrid, opts)?)?;
            Ok(gof_test(&hat, &graph, data.n())?)
        }
        TestTarget::Nested(path) => {
            let full = load_graph(manifest, "full_graph", path)?;
            if full.names() != graph.names() {
                return Err(Error::InvalidTest("graphs must list the same vertices in the same order".into()).into());
            }
            let engine = match cmd.method.as_str() {
                "el" => Engine::El,
                "gaussian" => Engine::Gaussian,
                _ => return Err(Failure::usage("nested testing supports --method el or gaussian")),
            };
            Ok(nested_lr_test(&data, &graph, &full, engine, opts)?)
        }
        TestTarget::Point(path) => {
            let theta0 = load_theta0(manifest, path, &graph)?;
            point_test(&data, &graph, &theta0, &cmd.method, opts)
        }
        TestTarget::Statistic { .. } => unreachable!("handled above"),
    }
}

pub fn run_test(cmd: &TestCmd, start: Instant) -> (u8, Value) {
    let mut manifest = Manifest::new("test");
    manifest.option("method", cmd.method.as_str());
    manifest.option("center", cmd.center);
    let opts = cmd.solver.options(&mut manifest);
    let outcome = test_report(cmd, &mut manifest, &opts).map(|r| {
        let v = json!({
            "statistic": number17(r.statistic),
            "dof": r.dof,
            "p_value": number17(r.p_value),
            "method": r.method,
            "converged": r.converged,
        });
        (EXIT_OK, v)
    });
    finish(outcome, manifest, start, cmd.out.as_deref())
}

pub struct SimulateCmd {
    pub config: PathBuf,
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    pub dump_estimates: bool,
    pub seed_override: Option<String>,
    pub coverage: bool,
}

fn simulate(cmd: &SimulateCmd, manifest: &mut Manifest) -> Result<Value, Failure> {
    let text = manifest.read_input("config", &cmd.config)?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(s) = &cmd.seed_override {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("ELSEM_SEED must be a non-negative integer, got `{s}`")))?;
    }
    if cmd.coverage && !cfg.methods.iter().any(|m| matches!(m, MethodSpec::Region(_))) {
        return Err(Error::Config("coverage requires at least one confidence-region method".into()).into());
    }
    manifest.seed = Some(cfg.seed);
    for (k, v) in cfg.to_pairs() {
        manifest.option(&k, v);
    }
    manifest.option("threads", cmd.threads);
    manifest.option("dump_estimates", cmd.dump_estimates);

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cmd.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Failure::usage(format!("cannot start worker pool: {e}")))?;
    let report = pool.install(|| run_experiment(&cfg))?;

    std::fs::create_dir_all(&cmd.out_dir)?;
    std::fs::write(cmd.out_dir.join("records.csv"), records_csv(&report.records))?;
    if cmd.dump_estimates {
        std::fs::write(cmd.out_dir.join("estimates.csv"), estimates_csv(&report))?;
    }
    let mut summary = json!({
        "replications": cfg.replications,
        "joint_converged": report.joint_converged.len(),
        "methods": report.summaries,
    });
    if cmd.coverage {
        let rows: Vec<Value> = report
            .summaries
            .iter()
            .filter(|s| s.coverage.is_some())
            .map(|s| {
                json!({
                    "method": s.method,
                    "nominal_level": cfg.nominal_level,
                    "coverage": s.coverage,
                    "coverage_se": s.coverage_se,
                    "error": s.coverage.map(|c| c - cfg.nominal_level),
                })
            })
            .collect();
        summary["coverage"] = Value::Array(rows);
    }
    Ok(summary)
}

pub fn run_simulate(cmd: &SimulateCmd, start: Instant) -> (u8, Value) {
    let mut manifest = Manifest::new(if cmd.coverage { "coverage" } else { "simulate" });
    let outcome = simulate(cmd, &mut manifest).map(|v| (EXIT_OK, v));
    let out = cmd.out_dir.join("summary.json");
    let write_to = if outcome.is_ok() { Some(out.as_path()) } else { None };
    finish(outcome, manifest, start, write_to)
}

/// Attaches the manifest, writes the JSON document, and returns the exit
/// code together with what was written.
fn finish(
    outcome: Result<(u8, Value), Failure>,
    manifest: Manifest,
    start: Instant,
    out: Option<&Path>,
) -> (u8, Value) {
    let (code, mut doc) = match outcome {
        Ok(ok) => ok,
        Err(f) => {
            eprintln!("error: {}", f.message);
            (f.code, json!({ "error": f.to_json() }))
        }
    };
    doc["manifest"] = manifest.to_json(start.elapsed().as_secs_f64());
    if let Err(f) = write_json(out, &doc) {
        eprintln!("error: {}", f.message);
        return (f.code, doc);
    }
    (code, doc)
}
