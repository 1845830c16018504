//! Backend comparison: the data-parallel paths (Monte-Carlo runs, per-node
//! filter updates, bound trajectories) against a forced single-thread
//! execution of the same code, plus the always-sequential map helper.
//!
//! With `--no-default-features` the crate compiles without rayon and only the
//! sequential flavor exists.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use cfdpf::harness::{monte_carlo, pcrlb_bounds, ScenarioConfig};
use cfdpf::pcrlb::BoundVariant;

fn small_bot() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::desk_bot();
    cfg.n_steps = 10;
    cfg.n_particles_central = 400;
    cfg.n_particles_local = 100;
    cfg.n_particles_fusion = 100;
    cfg.pcrlb.n_trajectories = 100;
    cfg
}

fn bench_monte_carlo(c: &mut Criterion) {
    let cfg = small_bot();
    let runs = 8;
    let mut group = c.benchmark_group("monte_carlo");
    group.sample_size(10);

    #[cfg(feature = "parallel")]
    {
        group.bench_function("rayon_default_pool", |b| {
            b.iter(|| black_box(monte_carlo(&cfg, runs).unwrap()))
        });
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        group.bench_function("rayon_single_thread", |b| {
            b.iter(|| single.install(|| black_box(monte_carlo(&cfg, runs).unwrap())))
        });
    }
    #[cfg(not(feature = "parallel"))]
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(monte_carlo(&cfg, runs).unwrap()))
    });

    group.finish();
}

fn bench_bounds(c: &mut Criterion) {
    let cfg = small_bot();
    let variants = [
        BoundVariant::Central,
        BoundVariant::Exact,
        BoundVariant::Tharmarasa,
        BoundVariant::Sum,
    ];
    let mut group = c.benchmark_group("pcrlb_bounds");
    group.sample_size(10);

    #[cfg(feature = "parallel")]
    {
        group.bench_function("rayon_default_pool", |b| {
            b.iter(|| black_box(pcrlb_bounds(&cfg, &variants).unwrap()))
        });
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        group.bench_function("rayon_single_thread", |b| {
            b.iter(|| single.install(|| black_box(pcrlb_bounds(&cfg, &variants).unwrap())))
        });
    }
    #[cfg(not(feature = "parallel"))]
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(pcrlb_bounds(&cfg, &variants).unwrap()))
    });

    group.finish();
}

fn bench_map_helpers(c: &mut Criterion) {
    // the raw helper pair, on a compute-heavy item
    let work = |i: usize| -> f64 {
        let mut acc = i as f64;
        for _ in 0..20_000 {
            acc = (acc * 1.000001).sin() + 1.0;
        }
        acc
    };
    let mut group = c.benchmark_group("map_indexed");
    group.sample_size(10);
    group.bench_function("feature_selected", |b| {
        b.iter(|| black_box(cfdpf::par::map_indexed(64, work)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| black_box(cfdpf::par::map_indexed_seq(64, work)))
    });
    group.finish();
}

criterion_group!(benches, bench_monte_carlo, bench_bounds, bench_map_helpers);
criterion_main!(benches);
