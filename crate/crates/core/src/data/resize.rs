//! Resampling helpers shared by the pipeline stages.

use ndarray::{Array2, Array3, Axis};

use super::maps::{AnomalyLabelMap, RgbImage, SemanticMap, SoftmaxMap};
use crate::error::Result;

/// Interpolation used when upsampling continuous maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let coord = |o: usize, scale: f32, n: usize| {
        let c = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (c.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f32)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, sy, h);
        let (x0, x1, fx) = coord(x, sx, w);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

pub fn nearest<T: Copy>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = ((y * h) / out_h).min(h - 1);
        let sx = ((x * w) / out_w).min(w - 1);
        src[[sy, sx]]
    })
}

pub fn resize(src: &Array2<f32>, out_h: usize, out_w: usize, mode: Interpolation) -> Array2<f32> {
    match mode {
        Interpolation::Bilinear => bilinear(src, out_h, out_w),
        Interpolation::Nearest => nearest(src, out_h, out_w),
    }
}

/// Mean over non-overlapping `factor x factor` blocks. Trailing rows/columns
/// that do not fill a block are dropped.
pub fn area_downsample(src: &Array2<f32>, factor: usize) -> Array2<f32> {
    if factor == 1 {
        return src.clone();
    }
    let (h, w) = src.dim();
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f32;
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += src[[y * factor + dy, x * factor + dx]];
            }
        }
        s / norm
    })
}

/// Applies a 2-D resampler to every channel plane.
pub fn per_channel(src: &Array3<f32>, f: impl Fn(&Array2<f32>) -> Array2<f32>) -> Array3<f32> {
    let planes: Vec<Array2<f32>> = src.axis_iter(Axis(0)).map(|p| f(&p.to_owned())).collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal plane shapes")
}

pub fn downsample_image(img: &RgbImage, factor: usize) -> Result<RgbImage> {
    RgbImage::from_clamped(per_channel(img.data(), |p| area_downsample(p, factor)))
}

pub fn resize_image(img: &RgbImage, out_h: usize, out_w: usize) -> Result<RgbImage> {
    RgbImage::from_clamped(per_channel(img.data(), |p| bilinear(p, out_h, out_w)))
}

/// Area-downsampled probabilities stay normalized (means of distributions).
pub fn downsample_softmax(map: &SoftmaxMap, factor: usize) -> Result<SoftmaxMap> {
    let mut probs = per_channel(map.probs(), |p| area_downsample(p, factor));
    let sums = probs.sum_axis(Axis(0));
    for mut lane in probs.axis_iter_mut(Axis(0)) {
        lane /= &sums;
    }
    SoftmaxMap::new(probs)
}

pub fn resize_semantic(map: &SemanticMap, out_h: usize, out_w: usize) -> Result<SemanticMap> {
    map.with_ids(nearest(map.ids(), out_h, out_w))
}

pub fn resize_labels(map: &AnomalyLabelMap, out_h: usize, out_w: usize) -> Result<AnomalyLabelMap> {
    AnomalyLabelMap::new(nearest(map.raw(), out_h, out_w))
}
