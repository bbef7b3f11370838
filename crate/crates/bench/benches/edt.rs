use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use selfprompt_bench::sphere_mask;
use selfprompt_core::{edt_bruteforce, edt_exact};

/// The separable transform on growing grids, including the doubled-axis
/// shape used to demonstrate near-linear scaling.
fn bench_exact(c: &mut Criterion) {
    let mut g = c.benchmark_group("edt_exact");
    for dims in [[32, 32, 32], [64, 64, 64], [128, 64, 64]] {
        let mask = sphere_mask(dims);
        let id = format!("{}x{}x{}", dims[0], dims[1], dims[2]);
        g.bench_with_input(BenchmarkId::from_parameter(id), &mask, |b, m| {
            b.iter(|| edt_exact(black_box(m)))
        });
    }
    g.finish();
}

/// The quadratic oracle, kept tiny so the comparison stays visible.
fn bench_bruteforce(c: &mut Criterion) {
    let mask = sphere_mask([16, 16, 16]);
    c.bench_function("edt_bruteforce/16x16x16", |b| {
        b.iter(|| edt_bruteforce(black_box(&mask)).unwrap())
    });
}

criterion_group!(benches, bench_exact, bench_bruteforce);
criterion_main!(benches);
