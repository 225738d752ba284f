use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use diffaug_bench::fixture_2d;
use diffaug_core::flow::exponentiate;
use diffaug_core::hmc::{hmc_step, ChainState};
use diffaug_core::posterior::{grad_log_posterior, Posterior};
use diffaug_core::warp_image;

fn bench_flow(c: &mut Criterion) {
    let mut group = c.benchmark_group("flow");
    for n in [32usize, 64] {
        let fx = fixture_2d(n, 8);
        let g = fx.moving.geometry().clone();
        group.bench_with_input(BenchmarkId::new("exponentiate", n), &n, |b, _| {
            b.iter(|| exponentiate(black_box(&fx.field), &g, &fx.rc.flow).unwrap())
        });
        let d = exponentiate(&fx.field, &g, &fx.rc.flow).unwrap();
        group.bench_with_input(BenchmarkId::new("warp_image", n), &n, |b, _| {
            b.iter(|| warp_image(black_box(&fx.moving), &d).unwrap())
        });
    }
    group.finish();
}

fn bench_posterior(c: &mut Criterion) {
    let mut group = c.benchmark_group("posterior");
    for n in [32usize, 64] {
        let fx = fixture_2d(n, 8);
        group.bench_with_input(BenchmarkId::new("grad_log_posterior", n), &n, |b, _| {
            b.iter(|| grad_log_posterior(&fx.moving, black_box(&fx.field), &fx.template, &fx.rc, &fx.prior))
        });
    }
    let fx = fixture_2d(32, 8);
    let target = Posterior::new(&fx.moving, &fx.template, &fx.prior, fx.rc).unwrap();
    group.bench_function("hmc_step_32", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut state = ChainState::new(&target, fx.field.to_flat());
        b.iter(|| hmc_step(&mut state, &target, 0.01, 20, &mut rng))
    });
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_flow, bench_posterior
}
criterion_main!(benches);
