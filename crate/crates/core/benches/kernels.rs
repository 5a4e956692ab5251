//! Sequential vs rayon execution of the hot kernels.
//!
//! Without the `parallel` feature only the sequential rows are reported.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stairseg::par::{self, Exec};
use stairseg::tensor::kernels::{gemm, im2col, ConvGeom};

fn modes() -> Vec<(&'static str, Exec)> {
    let mut m = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    m.push(("parallel", Exec::Parallel));
    m
}

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for size in [64usize, 256] {
        let (a, b) = (random(size * size, 1), random(size * size, 2));
        group.throughput(Throughput::Elements((size * size * size) as u64));
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, size), &size, |bch, &s| {
                bch.iter(|| gemm(exec, &a, &b, s, s, s))
            });
        }
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    // A 3×3, 64 → 64 convolution on a 32×32 map as im2col + GEMM.
    let g = ConvGeom {
        channels: 64,
        height: 32,
        width: 32,
        kh: 3,
        kw: 3,
        stride: 1,
        pad_h: 1,
        pad_w: 1,
    };
    let x = random(g.channels * g.height * g.width, 3);
    let w = random(64 * g.channels * 9, 4);
    let positions = g.out_h() * g.out_w();
    let mut group = c.benchmark_group("conv3x3_64");
    for (name, exec) in modes() {
        group.bench_function(name, |bch| {
            bch.iter(|| {
                let cols = im2col(&x, &g);
                gemm(exec, &w, &cols, 64, g.channels * 9, positions)
            })
        });
    }
    group.finish();
}

fn bench_map(c: &mut Criterion) {
    // Per-query work of the kind the deformable sampler hands to `map_indices`.
    let table = random(4096, 5);
    let mut group = c.benchmark_group("map_indices");
    for (name, exec) in modes() {
        group.bench_function(name, |bch| {
            bch.iter(|| {
                par::map_indices(exec, 4096, |q| {
                    (0..256).map(|j| table[(q * 31 + j * 7) % table.len()].tanh()).sum::<f64>()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_conv, bench_map);
criterion_main!(benches);
