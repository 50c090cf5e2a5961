use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sscn::edsc::{build_affinity, solve_edsc_closed_form};
use sscn::siamese::{analytic_optimum, RotationChoice};
use sscn::spectral::spectral_cluster;
use sscn::stiefel::{AxisAlignedSubspaces, Classifier};
use sscn::{Matrix, RngState};
use sscn_bench::fixture;

fn closed_form(c: &mut Criterion) {
    let mut g = c.benchmark_group("edsc_closed_form");
    for n in [50, 100, 200] {
        let x = fixture(20, 3, n);
        g.bench_with_input(BenchmarkId::from_parameter(3 * n), &x, |b, x| {
            b.iter(|| solve_edsc_closed_form(x, 100.0).unwrap())
        });
    }
    g.finish();
}

fn analytic(c: &mut Criterion) {
    let mut g = c.benchmark_group("analytic_optimum");
    for n in [100, 1000, 10000] {
        let x = fixture(20, 3, n);
        g.bench_with_input(BenchmarkId::from_parameter(3 * n), &x, |b, x| {
            b.iter(|| analytic_optimum(x, 100.0, 21, RotationChoice::Random { seed: 1 }).unwrap())
        });
    }
    g.finish();
}

fn spectral(c: &mut Criterion) {
    let x = fixture(20, 3, 100);
    let a = build_affinity(&solve_edsc_closed_form(&x, 100.0).unwrap());
    c.bench_function("spectral_cluster_300", |b| {
        b.iter(|| spectral_cluster(&a, 3, &mut RngState::new(0)).unwrap())
    });
}

fn classify(c: &mut Criterion) {
    let train = fixture(20, 3, 200);
    let model = analytic_optimum(&train, 100.0, 21, RotationChoice::Random { seed: 1 }).unwrap();
    let subspaces = AxisAlignedSubspaces::new(3, 7).unwrap();
    let rotation = Matrix::identity(21, 21);
    let clf = Classifier::new(&model, &rotation, subspaces).unwrap();
    let fresh = fixture(20, 3, 10000);
    c.bench_function("classify_streaming_30000", |b| {
        b.iter(|| clf.classify_streaming(fresh.x(), 1000).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = closed_form, analytic, spectral, classify
}
criterion_main!(benches);
