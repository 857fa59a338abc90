use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rsprox::estimators::{BatchSize, BatchSpec, EstimatorState};
use rsprox::manifold::{random_point, random_tangent, retract, RetractionKind};
use rsprox::optimizers::{run_r_prox_spb, Algorithm, Budget, OptimizerConfig};
use rsprox::problems::{full_gradient, SparsePcaProblem, SpcaSynthConfig};
use rsprox::prox::{solve_subproblem, NonsmoothTerm, SubproblemOptions};
use rsprox::rng::{stream, Stream};
use rsprox::StochasticProblem;

fn instance() -> SparsePcaProblem {
    let cfg = SpcaSynthConfig { n: 500, d: 50, r: 5, mu: 0.2, ..Default::default() };
    SparsePcaProblem::synthetic(&cfg, &mut stream(1, Stream::Data)).unwrap()
}

fn retractions(c: &mut Criterion) {
    let mut group = c.benchmark_group("retract");
    for (d, r) in [(50, 5), (200, 10)] {
        let x = random_point(d, r, 3).unwrap();
        let xi = random_tangent(&x, 4).unwrap().scaled(0.1);
        for kind in [RetractionKind::Polar, RetractionKind::Qr, RetractionKind::Cayley, RetractionKind::Exponential] {
            group.bench_with_input(BenchmarkId::new(format!("{kind:?}"), format!("{d}x{r}")), &xi, |b, xi| {
                b.iter(|| retract(black_box(&x), black_box(xi), kind).unwrap())
            });
        }
    }
    group.finish();
}

fn subproblem(c: &mut Criterion) {
    let p = instance();
    let x = random_point(50, 5, 5).unwrap();
    let v = full_gradient(&p, x.matrix()).unwrap();
    let opts = SubproblemOptions::default();
    let mut group = c.benchmark_group("subproblem");
    for mu in [0.0, 0.2, 1.0] {
        let h = NonsmoothTerm::l1(mu);
        group.bench_with_input(BenchmarkId::from_parameter(mu), &h, |b, h| {
            b.iter(|| solve_subproblem(black_box(&x), black_box(&v), 0.4, h, &opts).unwrap())
        });
    }
    group.finish();
}

fn estimators(c: &mut Criterion) {
    let p = instance();
    let x = random_point(50, 5, 6).unwrap();
    let y = retract(&x, &random_tangent(&x, 7).unwrap().scaled(0.01), RetractionKind::Polar).unwrap();
    let mut group = c.benchmark_group("estimator");
    group.bench_function("full_gradient", |b| b.iter(|| full_gradient(&p, black_box(x.matrix())).unwrap()));
    group.bench_function("sarah_step_23", |b| {
        let spec = BatchSpec { anchor: BatchSize::Count(23), inner: BatchSize::Count(23), epoch: usize::MAX };
        let mut rng = stream(8, Stream::Batches);
        b.iter_batched(
            || {
                let mut st = EstimatorState::new(spec);
                st.sarah_estimate(&p, &x, &mut rng).unwrap();
                st
            },
            |mut st| st.sarah_estimate(&p, black_box(&y), &mut stream(9, Stream::Batches)).unwrap(),
            criterion::BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn outer_loop(c: &mut Criterion) {
    let p = instance();
    let x0 = random_point(50, 5, 10).unwrap();
    let cfg = OptimizerConfig::new(Algorithm::RProxSpb, 0.5, Budget::ifo(5 * p.num_samples() as u64));
    let mut group = c.benchmark_group("r_prox_spb");
    group.sample_size(10);
    group.bench_function("5n_ifo", |b| b.iter(|| run_r_prox_spb(&mut p.clone(), &x0, &cfg, None).unwrap()));
    group.finish();
}

criterion_group!(benches, retractions, subproblem, estimators, outer_loop);
criterion_main!(benches);
