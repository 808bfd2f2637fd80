//! Criterion benches comparing the rayon data-parallel paths against their
//! sequential fallbacks. Placeholder groups are filled in alongside the
//! modules they exercise.

use criterion::{criterion_group, criterion_main, Criterion};

fn placeholder(c: &mut Criterion) {
    c.bench_function("placeholder", |b| b.iter(|| 1 + 1));
}

criterion_group!(benches, placeholder);
criterion_main!(benches);
