//! `elsem`: fit, test, and simulate linear SEMs over mixed graphs with
//! empirical likelihood.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand};

use commands::{FitCmd, SimulateCmd, SolverArgs, TestCmd, TestTarget, FIT_METHODS, TEST_METHODS};

#[derive(Parser)]
#[command(
    name = "elsem",
    version,
    about = "Empirical likelihood for linear SEMs over mixed graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate B and Omega for a graph and a data set.
    Fit(FitArgs),
    /// Goodness-of-fit, nested, or point hypothesis tests.
    Test(TestArgs),
    /// Run a replicated simulation experiment.
    Simulate(SimArgs),
    /// Run a coverage study for confidence regions.
    Coverage(SimArgs),
}

#[derive(Args)]
struct Solver {
    /// Inner dual tolerance on the weighted constraint means.
    #[arg(long)]
    tol_inner: Option<f64>,
    /// Outer tolerance on the gradient infinity-norm.
    #[arg(long)]
    tol_outer: Option<f64>,
    /// Maximum outer iterations.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Adjusted-EL level (default log(n)/2).
    #[arg(long)]
    ael_level: Option<f64>,
}

impl From<Solver> for SolverArgs {
    fn from(s: Solver) -> SolverArgs {
        SolverArgs {
            tol_inner: s.tol_inner,
            tol_outer: s.tol_outer,
            max_iter: s.max_iter,
            ael_level: s.ael_level,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = FIT_METHODS)]
    method: String,
    /// Subtract column means before fitting.
    #[arg(long)]
    center: bool,
    #[command(flatten)]
    solver: Solver,
    /// Output file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("target").args(["full_graph", "theta0", "statistic"])))]
struct TestArgs {
    #[arg(long, required_unless_present = "statistic")]
    graph: Option<PathBuf>,
    #[arg(long, required_unless_present = "statistic")]
    data: Option<PathBuf>,
    #[arg(long, value_parser = TEST_METHODS)]
    method: String,
    /// Larger graph for a nested likelihood-ratio test.
    #[arg(long)]
    full_graph: Option<PathBuf>,
    /// JSON file with labeled `B` and `Omega` matrices to test.
    #[arg(long)]
    theta0: Option<PathBuf>,
    /// Report the p-value of a precomputed statistic.
    #[arg(long, requires = "dof")]
    statistic: Option<f64>,
    #[arg(long, requires = "statistic")]
    dof: Option<usize>,
    #[arg(long)]
    center: bool,
    #[command(flatten)]
    solver: Solver,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    /// Key-value experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for the replication pool.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write every estimated covariance entry to estimates.csv.
    #[arg(long)]
    dump_estimates: bool,
    /// Overrides the configured seed.
    #[arg(long = "seed-override", env = "ELSEM_SEED", hide = true)]
    seed_override: Option<String>,
}

impl SimArgs {
    fn into_cmd(self, coverage: bool) -> SimulateCmd {
        SimulateCmd {
            config: self.config,
            threads: self.threads,
            out_dir: self.out_dir,
            dump_estimates: self.dump_estimates,
            seed_override: self.seed_override,
            coverage,
        }
    }
}

fn main() -> ExitCode {
    let start = Instant::now();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                report::EXIT_USAGE
            } else {
                report::EXIT_OK
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (code, _) = match cli.command {
        Command::Fit(a) => commands::run_fit(
            &FitCmd {
                graph: a.graph,
                data: a.data,
                method: a.method,
                center: a.center,
                solver: a.solver.into(),
                out: a.out,
            },
            start,
        ),
        Command::Test(a) => {
            let target = match (a.full_graph, a.theta0, a.statistic, a.dof) {
                (Some(p), _, _, _) => TestTarget::Nested(p),
                (_, Some(p), _, _) => TestTarget::Point(p),
                (_, _, Some(statistic), Some(dof)) => TestTarget::Statistic { statistic, dof },
                _ => TestTarget::Gof,
            };
            commands::run_test(
                &TestCmd {
                    graph: a.graph,
                    data: a.data,
                    method: a.method,
                    target,
                    center: a.center,
                    solver: a.solver.into(),
                    out: a.out,
                },
                start,
            )
        }
        Command::Simulate(a) => commands::run_simulate(&a.into_cmd(false), start),
        Command::Coverage(a) => commands::run_simulate(&a.into_cmd(true), start),
    };
    ExitCode::from(code)
}
