//! Seeded fixtures shared by the benchmarks.

use anomseg::data::{AnomalyLabelMap, AnomalyScoreMap, RgbImage, SemanticMap};
use anomseg::dissimilarity::DissimilarityInputs;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random scores with roughly `rate` anomalous pixels that score higher on average.
pub fn scored_pixels(n: usize, rate: f64, seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let pos = rng.random_bool(rate);
            let s: f64 = rng.random::<f64>() * 0.7 + if pos { 0.3 } else { 0.0 };
            (s, pos as u8)
        })
        .unzip()
}

/// Four random score maps and labels per image.
pub fn map_sets(images: usize, h: usize, w: usize, seed: u64) -> (Vec<[AnomalyScoreMap; 4]>, Vec<AnomalyLabelMap>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..images {
        let l = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.05) as u8);
        let m = |rng: &mut ChaCha8Rng| {
            AnomalyScoreMap::new(l.mapv(|v| (v as f32 * 0.3 + rng.random::<f32>() * 0.7).min(1.0))).unwrap()
        };
        maps.push([m(&mut rng), m(&mut rng), m(&mut rng), m(&mut rng)]);
        labels.push(AnomalyLabelMap::new(l).unwrap());
    }
    (maps, labels)
}

/// Random network inputs of the given size with `classes` semantic classes.
pub fn inputs(n: usize, h: usize, w: usize, classes: u8, seed: u64) -> Vec<DissimilarityInputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let img = |rng: &mut ChaCha8Rng| RgbImage::new(Array3::from_shape_fn((3, h, w), |_| rng.random())).unwrap();
            let (a, b) = (img(&mut rng), img(&mut rng));
            let sem = SemanticMap::new(Array2::from_shape_fn((h, w), |_| rng.random_range(0..classes)), classes).unwrap();
            let unc = Array3::from_shape_fn((3, h, w), |_| rng.random());
            DissimilarityInputs::new(a, b, sem, unc).unwrap()
        })
        .collect()
}
