use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use omar_core::data::{ClusterData, Household};
use omar_core::estimands::{outcome_surface, Estimand, Grid, Target};
use omar_core::loss::{LossConfig, LossTable, PsiVariant};
use omar_core::nuisance::poisson_binomial_pmf;
use omar_core::simulation::{simulate, SimConfig, TrueOutcomeModel, TruePropensityModel};
use omar_core::solver::{dc_fit, kernel_matrix, DcConfig};
use omar_core::util::Standardizer;
use omar_core::Dataset;

fn cluster_of(n: usize) -> ClusterData {
    let hh = (0..n)
        .map(|j| Household { y: (j % 2) as u8, a: ((j + 1) % 2) as u8, x: vec![j as f64, -(j as f64)] })
        .collect();
    ClusterData::new(format!("b{n}"), hh).unwrap()
}

fn bench_outcome_surface(c: &mut Criterion) {
    let mut group = c.benchmark_group("outcome_surface");
    for n in [5usize, 15, 30] {
        let cluster = cluster_of(n);
        let mu = |a: u8, pf: f64, _: &ClusterData, _: usize| 0.2 + 0.3 * a as f64 + 0.4 * pf;
        group.bench_with_input(BenchmarkId::from_parameter(n), &cluster, |b, cl| {
            b.iter(|| outcome_surface(&mu, black_box(cl), Estimand::Overall, 1e-3).unwrap())
        });
    }
    group.finish();
}

fn bench_poisson_binomial(c: &mut Criterion) {
    let probs: Vec<f64> = (0..29).map(|k| 0.1 + 0.8 * (k as f64) / 29.0).collect();
    c.bench_function("poisson_binomial_pmf_29", |b| {
        b.iter(|| poisson_binomial_pmf(black_box(&probs)))
    });
}

fn bench_loss_table(c: &mut Criterion) {
    let data = simulate(&SimConfig { n_clusters: 200, ..Default::default() }, 1).unwrap();
    let mu = TrueOutcomeModel::default();
    let e = TruePropensityModel::default();
    let cfg = LossConfig::new(
        Estimand::Overall,
        PsiVariant::DoublyRobust,
        Target::new(0.7).unwrap(),
        0.1,
    )
    .unwrap();
    c.bench_function("loss_table_build_200", |b| {
        b.iter(|| LossTable::build(black_box(&data), cfg, &mu, &e).unwrap())
    });
}

fn bench_kernel_matrix(c: &mut Criterion) {
    let data = simulate(&SimConfig { n_clusters: 200, ..Default::default() }, 2).unwrap();
    let raw: Vec<Vec<f64>> = data.clusters().iter().map(Dataset::cluster_features).collect();
    let scaler = Standardizer::fit(&raw);
    let z: Vec<Vec<f64>> = raw.iter().map(|p| scaler.apply(p)).collect();
    c.bench_function("kernel_matrix_200", |b| {
        b.iter(|| kernel_matrix(black_box(&z), 2.0).unwrap())
    });
}

fn bench_dc_fit(c: &mut Criterion) {
    let data = simulate(&SimConfig { n_clusters: 60, ..Default::default() }, 3).unwrap();
    let mu = TrueOutcomeModel::default();
    let e = TruePropensityModel::default();
    let cfg = LossConfig::new(
        Estimand::Overall,
        PsiVariant::DoublyRobust,
        Target::new(0.7).unwrap(),
        0.1,
    )
    .unwrap();
    let loss = LossTable::build(&data, cfg, &mu, &e).unwrap();
    let grid = Grid::from_step(1e-3).unwrap();
    c.bench_function("dc_fit_60", |b| {
        b.iter(|| {
            dc_fit(
                black_box(&data),
                black_box(&loss),
                &mu,
                &e,
                2.0,
                0.01,
                &grid,
                &DcConfig::default(),
                None,
            )
            .unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_outcome_surface,
    bench_poisson_binomial,
    bench_loss_table,
    bench_kernel_matrix,
    bench_dc_fit
);
criterion_main!(benches);
