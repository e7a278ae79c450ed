use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use imstab_bench::cosine_problem;
use imstab_core::solver::solve_forward;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_forward");
    group.sample_size(10);
    for n in [32, 64, 128] {
        let (grid, spec) = cosine_problem(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| solve_forward(&spec, &grid).expect("solve"));
        });
    }
    group.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
