use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eibench_core::metrics::{ei_aggregate, EiMean};
use eibench_core::predstore::pair;
use eibench_core::stats::{bootstrap_band, SampleXY};
use eibench_core::synth::{self, PopulationConfig};
use rayon::ThreadPool;

fn pools() -> Vec<(&'static str, ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("sequential", one), ("parallel", all)]
}

fn ei(c: &mut Criterion) {
    let pop = synth::generate_population(&PopulationConfig::new(1, 100_000, 100, 1)).unwrap();
    let unit = &pop.units[0];
    let pp = pair(&unit.original, &unit.transformed).unwrap();
    let mut group = c.benchmark_group("ei_aggregate_100k_x_100");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| black_box(ei_aggregate(&pp, EiMean::Geometric).unwrap().score)))
        });
    }
    group.finish();
}

fn bootstrap(c: &mut Criterion) {
    let x: Vec<f64> = (0..200).map(|i| i as f64 / 20.0).collect();
    let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| 2.0 * v + ((i * 7919) % 13) as f64 / 13.0).collect();
    let s = SampleXY::new(x, y).unwrap();
    let mut group = c.benchmark_group("bootstrap_band_200pts_1000");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| black_box(bootstrap_band(&s, 1000, 0.95, 7).unwrap().skipped)))
        });
    }
    group.finish();
}

fn population(c: &mut Criterion) {
    let cfg = PopulationConfig::new(50, 2_000, 10, 3);
    let mut group = c.benchmark_group("synth_population_50");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| black_box(synth::generate_population(&cfg).unwrap().units.len())))
        });
    }
    group.finish();
}

criterion_group!(benches, ei, bootstrap, population);
criterion_main!(benches);
