use std::hint::black_box;

use anomseg::dissimilarity::{DissimilarityNet, DissimilaritySpec};
use anomseg::ensemble::{grid_search, Objective, PixelTable};
use anomseg::metrics::evaluate_pixels;
use anomseg::uncertainty::{softmax_distance, softmax_entropy};
use anomseg::data::SoftmaxMap;
use anomseg_bench::{inputs, map_sets, scored_pixels};
use candle_core::DType;
use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array3;

fn metrics(c: &mut Criterion) {
    let (scores, labels) = scored_pixels(100_000, 0.05, 1);
    c.bench_function("evaluate_pixels 100k", |b| b.iter(|| evaluate_pixels(black_box(&scores), black_box(&labels)).unwrap()));
}

fn dispersion(c: &mut Criterion) {
    let logits = Array3::from_shape_fn((4, 128, 256), |(k, y, x)| ((k * 7 + y * 3 + x) % 11) as f32 / 3.0);
    let sm = SoftmaxMap::from_logits(&logits).unwrap();
    c.bench_function("entropy+distance 128x256", |b| {
        b.iter(|| (softmax_entropy(black_box(&sm)).unwrap(), softmax_distance(black_box(&sm)).unwrap()))
    });
}

fn ensemble(c: &mut Criterion) {
    let (maps, labels) = map_sets(4, 32, 64, 2);
    let table = PixelTable::new(&maps, &labels).unwrap();
    let mut g = c.benchmark_group("ensemble");
    g.sample_size(10);
    g.bench_function("grid_search step 0.1", |b| b.iter(|| grid_search(black_box(&table), 0.1, Objective::Ap).unwrap()));
    g.finish();
}

fn dissimilarity(c: &mut Criterion) {
    let mut spec = DissimilaritySpec::full(4).scaled(16);
    spec.input_size = (32, 64);
    let net = DissimilarityNet::new(spec, 0, DType::F32).unwrap();
    let xs = inputs(8, 32, 64, 4, 3);
    let refs: Vec<_> = xs.iter().collect();
    let mut g = c.benchmark_group("dissimilarity");
    g.sample_size(10);
    g.bench_function("predict 8x32x64 width/16", |b| b.iter(|| net.predict(black_box(&refs)).unwrap()));
    g.finish();
}

criterion_group!(benches, metrics, dispersion, ensemble, dissimilarity);
criterion_main!(benches);
