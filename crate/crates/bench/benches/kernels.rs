use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use qupel::proxops::{self, ProxParams};
use qupel::quantizer::{self, QuantConfig};
use qupel_bench::{even_centers, random_weights};

fn quantizer_kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("quantizer");
    let x = random_weights(10_000, 1);
    for m in [2, 4, 16] {
        let centers = even_centers(m);
        let cfg = QuantConfig::soft(10.0);
        g.bench_with_input(BenchmarkId::new("soft_quantize", m), &m, |b, _| {
            b.iter(|| quantizer::soft_quantize(black_box(&x), &centers, cfg).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("grad_x", m), &m, |b, _| {
            b.iter(|| quantizer::grad_soft_quantize_x(black_box(&x), &centers, cfg).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("grad_c", m), &m, |b, _| {
            b.iter(|| quantizer::grad_soft_quantize_c(black_box(&x), &centers, cfg).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("hard_quantize", m), &m, |b, _| {
            b.iter(|| quantizer::hard_quantize(black_box(&x), &centers).unwrap())
        });
    }
    g.finish();
}

fn prox_kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("prox");
    let x = random_weights(10_000, 2);
    let centers = even_centers(4);
    let p = ProxParams::new(0.1, 0.5).unwrap();
    g.bench_function("prox_x", |b| b.iter(|| proxops::prox_x(black_box(&x), &centers, p).unwrap()));
    g.bench_function("prox_c", |b| {
        b.iter(|| {
            proxops::prox_c(centers.values(), black_box(&x), &centers, p, proxops::CenterPull::TowardMedian, 10.0)
                .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, quantizer_kernels, prox_kernels);
criterion_main!(benches);
