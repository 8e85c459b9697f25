use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use sunetkit::init::ParamRng;
use sunetkit::metrics::evaluate_maps;
use sunetkit::ops::{conv2d, ConvParams};
use sunetkit::panoptic::CategoryTable;
use sunetkit::par;
use sunetkit::pixel_relation::{nonlocal_reference, AttentionKernel, NonLocalParams, PbParams};
use sunetkit::scene::random_map_pair;
use sunetkit::Tensor;

/// Benchmarks `f` once on the default pool and once pinned to one thread.
fn both<F: Fn() + Sync>(c: &mut Criterion, group: &str, size: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(20);
    g.bench_function(BenchmarkId::new("parallel", size), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("sequential", size), |b| par::sequential(|| b.iter(&f)));
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ParamRng::new(1);
    let x: Tensor<f32> = rng.tensor([1, 64, 64, 64], -1.0, 1.0);
    let p: ConvParams<f32> = rng.conv(64, 64, 3, 1, 1);
    both(c, "conv2d", "64x64x64", || {
        black_box(conv2d(&x, &p).unwrap());
    });
}

fn nonlocal(c: &mut Criterion) {
    let mut rng = ParamRng::new(2);
    let x: Tensor<f64> = rng.tensor([1, 32, 16, 16], -1.0, 1.0);
    let pb = PbParams::random(&mut rng, 32);
    let p = NonLocalParams::identity(32, AttentionKernel::QueryIndependent { w: pb.w });
    both(c, "nonlocal_reference", "32x16x16", || {
        black_box(nonlocal_reference(&x, &p).unwrap());
    });
}

fn batch_eval(c: &mut Criterion) {
    let cats = CategoryTable::cityscapes();
    let mut rng = ParamRng::new(3);
    let pairs: Vec<_> = (0..64).map(|_| random_map_pair(&mut rng, 64, 64, 8, &cats)).collect();
    both(c, "batch_eval", "64 pairs", || {
        black_box(par::map_slice(&pairs, |(p, g)| evaluate_maps(p, g).unwrap()));
    });
}

criterion_group!(benches, conv, nonlocal, batch_eval);
criterion_main!(benches);
