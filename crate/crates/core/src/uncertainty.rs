//! Dispersion maps computed from segmentation output and deep features:
//! softmax entropy, softmax distance and perceptual difference, each
//! normalized to `[0, 1]`.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::backbones::FeaturePyramid;
use crate::data::resize::{self, Interpolation};
use crate::data::{AnomalyScoreMap, SoftmaxMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispersionKind {
    Entropy,
    Distance,
    Perceptual,
}

impl DispersionKind {
    pub const ALL: [DispersionKind; 3] = [DispersionKind::Entropy, DispersionKind::Distance, DispersionKind::Perceptual];

    pub fn name(self) -> &'static str {
        match self {
            DispersionKind::Entropy => "entropy",
            DispersionKind::Distance => "distance",
            DispersionKind::Perceptual => "perceptual",
        }
    }
}

/// Per-pixel dispersion in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DispersionMap {
    pub kind: DispersionKind,
    values: Array2<f64>,
}

impl DispersionMap {
    pub fn new(kind: DispersionKind, mut values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite {} value", kind.name())));
        }
        values.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(DispersionMap { kind, values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn to_f32(&self) -> Array2<f32> {
        self.values.mapv(|v| v as f32)
    }

    pub fn to_score_map(&self) -> AnomalyScoreMap {
        AnomalyScoreMap::new(self.to_f32()).expect("dispersion values are finite")
    }

    /// Area downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let d = resize::area_downsample(&self.to_f32(), factor);
        Self::new(self.kind, d.mapv(|v| v as f64))
    }
}

fn check_classes(softmax: &SoftmaxMap) -> Result<usize> {
    let c = softmax.num_classes();
    if c < 2 {
        return Err(Error::Invalid(format!("dispersion needs at least 2 classes, got {c}")));
    }
    Ok(c)
}

/// Entropy of one pixel's distribution in bits, divided by `log2(C)`.
///
/// Evaluated as `1 - KL(p || uniform) / log2(C)` with `C * p_c / sum(p)` formed
/// directly, so a uniform pixel gives exactly 1 and a one-hot pixel exactly 0.
pub fn normalized_entropy(probs: impl IntoIterator<Item = f32> + Clone) -> f64 {
    let c = probs.clone().into_iter().count() as f64;
    let sum: f64 = probs.clone().into_iter().map(|p| p as f64).sum();
    let mut kl = 0.0;
    for p in probs {
        let p = p as f64;
        if p > 0.0 {
            kl += (p / sum) * (c * p / sum).log2();
        }
    }
    (1.0 - kl / c.log2()).clamp(0.0, 1.0)
}

/// `1 - (max - second max)`.
pub fn top2_distance(probs: impl IntoIterator<Item = f32>) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in probs {
        let p = p as f64;
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    (1.0 - (first - second)).clamp(0.0, 1.0)
}

pub fn softmax_entropy(softmax: &SoftmaxMap) -> Result<DispersionMap> {
    check_classes(softmax)?;
    let (h, w) = (softmax.height(), softmax.width());
    let values = Array2::from_shape_fn((h, w), |(y, x)| normalized_entropy(softmax.pixel(y, x).iter().copied()));
    DispersionMap::new(DispersionKind::Entropy, values)
}

pub fn softmax_distance(softmax: &SoftmaxMap) -> Result<DispersionMap> {
    check_classes(softmax)?;
    let (h, w) = (softmax.height(), softmax.width());
    let values = Array2::from_shape_fn((h, w), |(y, x)| top2_distance(softmax.pixel(y, x).iter().copied()));
    DispersionMap::new(DispersionKind::Distance, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerceptualNorm {
    /// Divide by the map's maximum; an all-zero map stays zero.
    #[default]
    ImageMax,
    /// Clamp the raw sum into `[0, 1]`.
    Clamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptualConfig {
    /// Pyramid levels to compare, strictly increasing.
    pub taps: Vec<usize>,
    pub interpolation: Interpolation,
    pub normalization: PerceptualNorm,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            taps: vec![0, 1, 2, 3],
            interpolation: Interpolation::Bilinear,
            normalization: PerceptualNorm::ImageMax,
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Config("perceptual difference needs at least one layer tap".into()));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("perceptual taps must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Sum over tapped levels of the per-pixel L1 feature difference divided by
/// the level's channel count, each resampled to the pyramid's input size.
/// Symmetric in its two arguments.
pub fn perceptual_difference(
    feat_x: &FeaturePyramid,
    feat_r: &FeaturePyramid,
    cfg: &PerceptualConfig,
) -> Result<DispersionMap> {
    cfg.validate()?;
    if feat_x.input_size() != feat_r.input_size() || feat_x.levels().len() != feat_r.levels().len() {
        return Err(Error::Shape("feature pyramids come from different inputs".into()));
    }
    let (out_h, out_w) = feat_x.input_size();
    let mut total = Array2::<f32>::zeros((out_h, out_w));
    for &tap in &cfg.taps {
        let (a, b) = match (feat_x.levels().get(tap), feat_r.levels().get(tap)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Shape(format!("pyramid has no level {tap}"))),
        };
        if a.features.dim() != b.features.dim() {
            return Err(Error::Shape(format!(
                "level {tap}: {:?} vs {:?}",
                a.features.dim(),
                b.features.dim()
            )));
        }
        let (c, h, w) = a.features.dim();
        let mut diff = Array2::<f32>::zeros((h, w));
        Zip::from(a.features.outer_iter()).and(b.features.outer_iter()).for_each(|fa, fb| {
            Zip::from(&mut diff).and(&fa).and(&fb).for_each(|d, x, r| *d += (x - r).abs());
        });
        diff /= c as f32;
        total += &resize::resize(&diff, out_h, out_w, cfg.interpolation);
    }
    let values = match cfg.normalization {
        PerceptualNorm::ImageMax => {
            let max = total.iter().fold(0f32, |m, v| m.max(*v));
            if max > 0.0 {
                total.mapv(|v| (v / max) as f64)
            } else {
                Array2::zeros((out_h, out_w))
            }
        }
        PerceptualNorm::Clamp => total.mapv(|v| v as f64),
    };
    DispersionMap::new(DispersionKind::Perceptual, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{FeatureLevel, FeaturePyramid};
    use ndarray::Array3;
    use proptest::prelude::*;

    fn softmax_from(pixels: Vec<Vec<f32>>) -> SoftmaxMap {
        let c = pixels[0].len();
        let n = pixels.len();
        SoftmaxMap::new(Array3::from_shape_fn((c, 1, n), |(k, _, x)| pixels[x][k])).unwrap()
    }

    #[test]
    fn uniform_is_one_and_one_hot_is_zero() {
        let mut one_hot = vec![0.0; 19];
        one_hot[4] = 1.0;
        let s = softmax_from(vec![vec![1.0 / 19.0; 19], one_hot]);
        let e = softmax_entropy(&s).unwrap();
        let d = softmax_distance(&s).unwrap();
        assert_eq!(e.values()[[0, 0]], 1.0);
        assert_eq!(e.values()[[0, 1]], 0.0);
        assert_eq!(d.values()[[0, 0]], 1.0);
        assert_eq!(d.values()[[0, 1]], 0.0);
    }

    #[test]
    fn two_class_symmetric_entropy() {
        let mut p = vec![0.0; 19];
        p[0] = 0.5;
        p[1] = 0.5;
        let e = softmax_entropy(&softmax_from(vec![p])).unwrap();
        assert!((e.values()[[0, 0]] - 1.0 / 19f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn distance_direct_substitution() {
        let d = softmax_distance(&softmax_from(vec![vec![0.6, 0.3, 0.1]])).unwrap();
        assert!((d.values()[[0, 0]] - 0.7).abs() < 1e-7);
    }

    #[test]
    fn single_class_is_rejected() {
        let s = SoftmaxMap::new(Array3::ones((1, 2, 2))).unwrap();
        assert!(softmax_entropy(&s).is_err());
        assert!(softmax_distance(&s).is_err());
    }

    fn pyramid(levels: Vec<Array3<f32>>, size: (usize, usize)) -> FeaturePyramid {
        let levels = levels
            .into_iter()
            .enumerate()
            .map(|(i, f)| FeatureLevel { stride: 1 << i, features: f })
            .collect();
        FeaturePyramid::new(levels, size).unwrap()
    }

    #[test]
    fn perceptual_hand_computed_single_level() {
        // Two channels on a 4x4 grid; oracle: mean |a - b| per pixel, divided by the max.
        let a = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| (c * 16 + y * 4 + x) as f32 / 10.0);
        let b = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| if c == 0 { (y * x) as f32 / 10.0 } else { 1.0 });
        let mut expect = [[0f64; 4]; 4];
        let mut max = 0f64;
        for (y, row) in expect.iter_mut().enumerate() {
            for (x, e) in row.iter_mut().enumerate() {
                let d0 = ((y * 4 + x) as f64 / 10.0 - (y * x) as f64 / 10.0).abs();
                let d1 = ((16 + y * 4 + x) as f64 / 10.0 - 1.0).abs();
                *e = (d0 + d1) / 2.0;
                max = max.max(*e);
            }
        }
        let cfg = PerceptualConfig {
            taps: vec![0],
            ..PerceptualConfig::default()
        };
        let v = perceptual_difference(&pyramid(vec![a], (4, 4)), &pyramid(vec![b], (4, 4)), &cfg).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert!((v.values()[[y, x]] - expect[y][x] / max).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn perceptual_identity_and_mismatch() {
        let a = pyramid(vec![Array3::ones((3, 4, 4)), Array3::ones((5, 2, 2))], (4, 4));
        let cfg = PerceptualConfig {
            taps: vec![0, 1],
            ..PerceptualConfig::default()
        };
        let v = perceptual_difference(&a, &a, &cfg).unwrap();
        assert!(v.values().iter().all(|x| *x == 0.0));
        let b = pyramid(vec![Array3::ones((3, 4, 4)), Array3::ones((4, 2, 2))], (4, 4));
        assert!(perceptual_difference(&a, &b, &cfg).is_err());
        let bad = PerceptualConfig {
            taps: vec![1, 0],
            ..PerceptualConfig::default()
        };
        assert!(perceptual_difference(&a, &a, &bad).is_err());
    }

    fn simplex_pixels(c: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        proptest::collection::vec(proptest::collection::vec(0.0f32..1.0, c), 1..6).prop_map(|px| {
            px.into_iter()
                .map(|v| {
                    let s: f32 = v.iter().sum::<f32>() + 1e-3;
                    let mut out: Vec<f32> = v.iter().map(|x| (x + 1e-3 / v.len() as f32) / s).collect();
                    let t: f32 = out.iter().sum();
                    out.iter_mut().for_each(|x| *x /= t);
                    out
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn maps_in_unit_range_and_permutation_invariant(px in simplex_pixels(5), rot in 0usize..5) {
            let s = softmax_from(px.clone());
            let rotated: Vec<Vec<f32>> = px.iter().map(|p| {
                let mut q = p.clone();
                q.rotate_left(rot);
                q
            }).collect();
            let e = softmax_entropy(&s).unwrap();
            let e2 = softmax_entropy(&softmax_from(rotated)).unwrap();
            let d = softmax_distance(&s).unwrap();
            for (a, b) in e.values().iter().zip(e2.values().iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            prop_assert!(e.values().iter().chain(d.values().iter()).all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn perceptual_symmetric_in_unit_range(seed: u64) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut lv = |c, h, w| Array3::from_shape_fn((c, h, w), |_| rng.random::<f32>());
            let a = pyramid(vec![lv(2, 8, 4), lv(3, 4, 2)], (8, 4));
            let b = pyramid(vec![lv(2, 8, 4), lv(3, 4, 2)], (8, 4));
            let cfg = PerceptualConfig { taps: vec![0, 1], ..PerceptualConfig::default() };
            let ab = perceptual_difference(&a, &b, &cfg).unwrap();
            let ba = perceptual_difference(&b, &a, &cfg).unwrap();
            prop_assert_eq!(ab.values(), ba.values());
            prop_assert!(ab.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
