use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use elsem::el::{solve_dual, DualOptions};
use elsem::estfun::estfun_profile;
use elsem::{fit, FitMethod, FitOptions};
use elsem_bench::instance;

fn profile_vs_naive(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    let opts = FitOptions::default();
    for (m, nd, nb) in [(5, 5, 3), (8, 10, 6)] {
        let (graph, data) = instance(m, nd, nb, 100, 1);
        for method in [
            FitMethod::El,
            FitMethod::Hybrid,
            FitMethod::NaiveEl,
            FitMethod::Gaussian,
        ] {
            group.bench_with_input(BenchmarkId::new(method.label(), m), &method, |b, &method| {
                b.iter(|| fit(&data, &graph, method, &opts).expect("fit runs"))
            });
        }
    }
    group.finish();
}

fn dual_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("dual");
    for n in [100, 1000] {
        let (graph, data) = instance(8, 10, 6, n, 2);
        let b = elsem::fit(&data, &graph, FitMethod::Hybrid, &FitOptions::default())
            .expect("fit runs")
            .b_hat;
        let g = estfun_profile(&data, &graph, &b).expect("estimating functions");
        group.bench_with_input(BenchmarkId::from_parameter(n), &g, |bench, g| {
            bench.iter(|| solve_dual(g, &DualOptions::default(), None))
        });
    }
    group.finish();
}

criterion_group!(benches, profile_vs_naive, dual_solve);
criterion_main!(benches);
