//! Parallel versus sequential execution of independent chains and of
//! per-coordinate ESS. Without the `parallel` feature both arms are
//! sequential.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fsmcmc::dataset::teacher_regression;
use fsmcmc::diagnostics::ess_1d;
use fsmcmc::network::{Activation, NetworkConfig};
use fsmcmc::par::map_indices;
use fsmcmc::posterior::{PosteriorTarget, SamplingMode};
use fsmcmc::samplers::{run_chains, RunOptions, SamplerConfig, SamplerKind};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn chains(c: &mut Criterion) {
    let data = teacher_regression(32, 8, 1, 256, 0.1, 0).unwrap();
    let cfg = NetworkConfig::wide_default(8, vec![128], 1, Activation::Gelu).unwrap();
    let target = PosteriorTarget::new(cfg, data, 0.01, SamplingMode::FullPhi).unwrap();
    let sc = SamplerConfig::new(SamplerKind::Pcnl, 0.1, 200, 50, 5, 1).unwrap();
    let opts = RunOptions {
        monitor: Some((0..20).collect()),
        ..RunOptions::default()
    };
    let mut group = c.benchmark_group("run_chains_x4");
    group.sample_size(10);
    for (name, strict) in [("sequential", true), ("parallel", false)] {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_chains(&target, &sc, &opts, 4, strict))
        });
    }
    group.finish();
}

fn ess_columns(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples = DMatrix::from_fn(4_000, 64, |_, _| rng.sample::<f64, _>(StandardNormal));
    let columns: Vec<Vec<f64>> = samples.column_iter().map(|c| c.iter().copied().collect()).collect();
    let mut group = c.benchmark_group("ess_64_columns");
    for (name, strict) in [("sequential", true), ("parallel", false)] {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_indices(columns.len(), strict, |j| ess_1d(&columns[j])))
        });
    }
    group.finish();
}

criterion_group!(benches, chains, ess_columns);
criterion_main!(benches);
