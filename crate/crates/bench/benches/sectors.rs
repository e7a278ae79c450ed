use std::f64::consts::PI;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use imstab_bench::{complex_bump, cosine_problem};
use imstab_core::sectors::sector_decompose;

fn decompose(c: &mut Criterion) {
    let mut group = c.benchmark_group("sector_decompose");
    group.sample_size(20);
    for n in [64, 128] {
        let (grid, _) = cosine_problem(n);
        let psi = complex_bump(&grid);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| sector_decompose(&psi, 0.1 * PI, &grid).expect("decompose"));
        });
    }
    group.finish();
}

criterion_group!(benches, decompose);
criterion_main!(benches);
