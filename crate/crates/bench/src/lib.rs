//! Shared benchmark inputs.

use elsem::simulate::{gen_graph, gen_params, replication_rng, sample_data, sample_errors};
use elsem::{Dataset, ErrorDistribution, ExperimentConfig, MixedGraph};

/// A random graph and a Gaussian data set drawn from a model on it.
pub fn instance(m: usize, n_directed: usize, n_bidirected: usize, n: usize, seed: u64) -> (MixedGraph, Dataset) {
    let cfg = ExperimentConfig {
        m,
        n_directed,
        n_bidirected,
        n,
        ..Default::default()
    };
    let mut rng = replication_rng(seed, 0);
    let graph = gen_graph(&cfg, &mut rng).expect("benchmark graph sizes are valid");
    let params = gen_params(&graph, &mut rng);
    let errors = sample_errors(ErrorDistribution::Gaussian, &params.omega, n, &mut rng).expect("positive definite");
    let data = sample_data(&params.b, errors).expect("acyclic graph");
    (graph, data)
}
