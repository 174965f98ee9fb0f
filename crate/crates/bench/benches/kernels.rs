use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use aoed_bench::fixture;
use aoed_core::hessian::HessianMode;
use aoed_core::map::{solve_map, MapOptions};
use aoed_core::oed::{OedEvaluator, OedOptions};

fn state_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("state_solve");
    for cells in [21, 32, 45] {
        let f = fixture(cells, 1, 1);
        let m = f.problem.truth.clone();
        g.bench_with_input(BenchmarkId::from_parameter(f.problem.model.num_nodes()), &m, |b, m| {
            b.iter(|| f.problem.model.solve_state(black_box(m)).unwrap())
        });
    }
    g.finish();
}

fn hessian_apply(c: &mut Criterion) {
    let f = fixture(32, 1, 1);
    let pb = &f.problem;
    let w = vec![1.0; pb.model.num_sensors()];
    let sol = solve_map(&pb.model, &pb.prior, &w, &f.samples[0].d, None, &MapOptions::default()).unwrap();
    let y = f.probes.probes[0].clone();
    let mut g = c.benchmark_group("hessian_apply");
    for (name, mode) in [("gauss_newton", HessianMode::GaussNewton), ("full", HessianMode::Full)] {
        let ctx = sol.hessian(&pb.model, &pb.prior, &w, mode).unwrap();
        g.bench_function(name, |b| b.iter(|| ctx.apply(black_box(&y)).unwrap()));
    }
    g.finish();
}

fn objective(c: &mut Criterion) {
    let f = fixture(21, 2, 4);
    let pb = &f.problem;
    let w = vec![0.5; pb.model.num_sensors()];
    let opts = OedOptions {
        parallel: false,
        warm_start: false,
        ..OedOptions::default()
    };
    let ev = OedEvaluator::new(&pb.model, &pb.prior, &f.samples, &f.probes, opts).unwrap();
    let mut g = c.benchmark_group("oed");
    g.sample_size(10);
    g.bench_function("objective", |b| b.iter(|| ev.objective(black_box(&w)).unwrap().psi_hat));
    g.bench_function("objective_and_gradient", |b| {
        b.iter(|| ev.objective_and_gradient(black_box(&w)).unwrap().psi_hat)
    });
    g.finish();
}

criterion_group!(benches, state_solve, hessian_apply, objective);
criterion_main!(benches);
