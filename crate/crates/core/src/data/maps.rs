//! Per-pixel maps exchanged between pipeline stages.
//!
//! All multi-channel maps are stored channel-first (`C x H x W`), matching the
//! layout the networks consume.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Reserved class id for pixels that belong to no training class.
pub const VOID: u8 = 255;

/// Tolerance on per-pixel probability sums accepted by [`SoftmaxMap::new`].
pub const SOFTMAX_SUM_TOL: f32 = 1e-5;

/// RGB image with values in `[0, 1]`, shape `3 x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage(Array3<f32>);

impl RgbImage {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, found {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("image dimensions must be positive".into()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("image values outside [0, 1]".into()));
        }
        Ok(RgbImage(data))
    }

    /// Builds an image, clamping values into `[0, 1]`. Used for network outputs.
    pub fn from_clamped(mut data: Array3<f32>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(data)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        RgbImage(Array3::zeros((3, height, width)))
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.0
    }

    /// Left-right mirror.
    pub fn flip_horizontal(&self) -> Self {
        RgbImage(flip_last(&self.0))
    }
}

/// Per-pixel class probabilities, shape `C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMap(Array3<f32>);

impl SoftmaxMap {
    /// Validates range and per-pixel normalization.
    pub fn new(probs: Array3<f32>) -> Result<Self> {
        let (c, h, w) = probs.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("empty softmax map {c}x{h}x{w}")));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid("softmax values outside [0, 1]".into()));
        }
        let sums = probs.sum_axis(Axis(0));
        if let Some(s) = sums.iter().find(|s| (**s - 1.0).abs() > SOFTMAX_SUM_TOL) {
            return Err(Error::Invalid(format!(
                "softmax not normalized: pixel sums to {s}"
            )));
        }
        Ok(SoftmaxMap(probs))
    }

    /// Numerically stable softmax over the class axis of raw logits.
    pub fn from_logits(logits: &Array3<f32>) -> Result<Self> {
        let (c, h, w) = logits.dim();
        let mut out = Array3::<f32>::zeros((c, h, w));
        let mut buf = vec![0f64; c];
        for y in 0..h {
            for x in 0..w {
                let lane = logits.slice(ndarray::s![.., y, x]);
                let max = lane.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v)) as f64;
                let mut total = 0.0;
                for (b, v) in buf.iter_mut().zip(lane.iter()) {
                    *b = (*v as f64 - max).exp();
                    total += *b;
                }
                for (k, b) in buf.iter().enumerate() {
                    out[[k, y, x]] = (b / total) as f32;
                }
            }
        }
        Self::new(out)
    }

    pub fn num_classes(&self) -> usize {
        self.0.dim().0
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn probs(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn pixel(&self, y: usize, x: usize) -> ArrayView1<'_, f32> {
        self.0.slice(ndarray::s![.., y, x])
    }

    /// Arg-max class per pixel. Ties resolve to the lowest class id.
    pub fn argmax(&self) -> SemanticMap {
        let (c, h, w) = self.0.dim();
        let ids = Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = 0;
            for k in 1..c {
                if self.0[[k, y, x]] > self.0[[best, y, x]] {
                    best = k;
                }
            }
            best as u8
        });
        SemanticMap {
            ids,
            num_classes: c as u8,
        }
    }
}

/// Class id per pixel; [`VOID`] marks pixels outside every training class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    ids: Array2<u8>,
    num_classes: u8,
}

impl SemanticMap {
    pub fn new(ids: Array2<u8>, num_classes: u8) -> Result<Self> {
        if num_classes == 0 || num_classes == VOID {
            return Err(Error::Invalid(format!("invalid class count {num_classes}")));
        }
        let (h, w) = ids.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape("semantic map dimensions must be positive".into()));
        }
        if let Some(bad) = ids.iter().find(|v| **v != VOID && **v >= num_classes) {
            return Err(Error::Invalid(format!(
                "unknown class id {bad} (num_classes = {num_classes})"
            )));
        }
        Ok(SemanticMap { ids, num_classes })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes as usize
    }

    pub fn height(&self) -> usize {
        self.ids.dim().0
    }

    pub fn width(&self) -> usize {
        self.ids.dim().1
    }

    pub fn ids(&self) -> &Array2<u8> {
        &self.ids
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[[y, x]]
    }

    /// One-hot encoding with `C + 1` channels; the last channel flags VOID.
    pub fn one_hot_with_void(&self) -> Array3<f32> {
        let c = self.num_classes();
        let (h, w) = self.ids.dim();
        let mut out = Array3::zeros((c + 1, h, w));
        for ((y, x), id) in self.ids.indexed_iter() {
            let k = if *id == VOID { c } else { *id as usize };
            out[[k, y, x]] = 1.0;
        }
        out
    }

    pub fn flip_horizontal(&self) -> Self {
        SemanticMap {
            ids: flip_last2(&self.ids),
            num_classes: self.num_classes,
        }
    }

    pub fn with_ids(&self, ids: Array2<u8>) -> Result<Self> {
        Self::new(ids, self.num_classes)
    }
}

/// Instance id per pixel with its class; id 0 is background (no instance).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    ids: Array2<u16>,
    classes: BTreeMap<u16, u8>,
}

impl InstanceMap {
    pub const BACKGROUND: u16 = 0;

    /// Derives the instance to class mapping from a semantic map and checks
    /// that every instance covers a single class.
    pub fn new(ids: Array2<u16>, semantic: &SemanticMap) -> Result<Self> {
        if ids.dim() != semantic.ids().dim() {
            return Err(Error::Shape(format!(
                "instance map {:?} vs semantic map {:?}",
                ids.dim(),
                semantic.ids().dim()
            )));
        }
        let mut classes = BTreeMap::new();
        for (inst, class) in ids.iter().zip(semantic.ids().iter()) {
            if *inst == Self::BACKGROUND {
                continue;
            }
            match classes.insert(*inst, *class) {
                Some(prev) if prev != *class => {
                    return Err(Error::Invalid(format!(
                        "instance {inst} spans classes {prev} and {class}"
                    )))
                }
                _ => {}
            }
        }
        Ok(InstanceMap { ids, classes })
    }

    pub fn ids(&self) -> &Array2<u16> {
        &self.ids
    }

    pub fn class_of(&self, instance: u16) -> Option<u8> {
        self.classes.get(&instance).copied()
    }

    pub fn instances(&self) -> impl Iterator<Item = (u16, u8)> + '_ {
        self.classes.iter().map(|(i, c)| (*i, *c))
    }

    pub fn area(&self, instance: u16) -> usize {
        self.ids.iter().filter(|v| **v == instance).count()
    }
}

/// Training / evaluation target per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AnomalyLabel {
    Inlier = 0,
    Anomaly = 1,
    Ignore = 255,
}

impl AnomalyLabel {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Inlier),
            1 => Some(Self::Anomaly),
            255 => Some(Self::Ignore),
            _ => None,
        }
    }
}

/// Per-pixel anomaly labels stored as raw bytes (`0`, `1` or `255`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnomalyLabelMap(Array2<u8>);

impl AnomalyLabelMap {
    pub fn new(raw: Array2<u8>) -> Result<Self> {
        if let Some(bad) = raw.iter().find(|v| AnomalyLabel::from_u8(**v).is_none()) {
            return Err(Error::Invalid(format!("invalid anomaly label {bad}")));
        }
        Ok(AnomalyLabelMap(raw))
    }

    pub fn filled(height: usize, width: usize, label: AnomalyLabel) -> Self {
        AnomalyLabelMap(Array2::from_elem((height, width), label as u8))
    }

    /// Ground-truth labels for evaluation: VOID pixels are anomalies, the rest
    /// inliers.
    pub fn from_void(semantic: &SemanticMap) -> Self {
        AnomalyLabelMap(semantic.ids().mapv(|v| u8::from(v == VOID)))
    }

    pub fn raw(&self) -> &Array2<u8> {
        &self.0
    }

    pub fn raw_mut(&mut self) -> &mut Array2<u8> {
        &mut self.0
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn count(&self, label: AnomalyLabel) -> usize {
        self.0.iter().filter(|v| **v == label as u8).count()
    }

    pub fn flip_horizontal(&self) -> Self {
        AnomalyLabelMap(flip_last2(&self.0))
    }
}

/// Per-pixel anomaly score, higher means more anomalous.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyScoreMap(Array2<f32>);

impl AnomalyScoreMap {
    pub fn new(scores: Array2<f32>) -> Result<Self> {
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite anomaly score".into()));
        }
        Ok(AnomalyScoreMap(scores))
    }

    pub fn scores(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }
}

fn flip_last<T: Clone>(a: &Array3<T>) -> Array3<T> {
    a.slice(ndarray::s![.., .., ..;-1]).to_owned()
}

fn flip_last2<T: Clone>(a: &Array2<T>) -> Array2<T> {
    a.slice(ndarray::s![.., ..;-1]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_rejects_unnormalized() {
        let p = Array3::from_elem((2, 1, 1), 0.4f32);
        assert!(SoftmaxMap::new(p).is_err());
    }

    #[test]
    fn logits_shift_invariant() {
        let logits = Array3::from_shape_fn((4, 2, 3), |(c, y, x)| (c * 3 + y + x) as f32 * 0.7);
        let shifted = logits.mapv(|v| v + 12.5);
        let a = SoftmaxMap::from_logits(&logits).unwrap();
        let b = SoftmaxMap::from_logits(&shifted).unwrap();
        for (p, q) in a.probs().iter().zip(b.probs().iter()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn semantic_rejects_unknown_class() {
        let err = SemanticMap::new(array![[0u8, 7]], 4).unwrap_err();
        assert!(err.to_string().contains("unknown class id 7"));
        assert!(SemanticMap::new(array![[0u8, VOID]], 4).is_ok());
    }

    #[test]
    fn instance_spanning_two_classes_is_rejected() {
        let sem = SemanticMap::new(array![[1u8, 2]], 4).unwrap();
        assert!(InstanceMap::new(array![[3u16, 3]], &sem).is_err());
        let inst = InstanceMap::new(array![[3u16, 4]], &sem).unwrap();
        assert_eq!(inst.class_of(4), Some(2));
    }

    #[test]
    fn one_hot_marks_void_in_last_channel() {
        let sem = SemanticMap::new(array![[0u8, VOID]], 2).unwrap();
        let oh = sem.one_hot_with_void();
        assert_eq!(oh.dim(), (3, 1, 2));
        assert_eq!(oh[[0, 0, 0]], 1.0);
        assert_eq!(oh[[2, 0, 1]], 1.0);
        assert_eq!(oh.sum(), 2.0);
    }

    #[test]
    fn label_map_validates_values() {
        assert!(AnomalyLabelMap::new(array![[0u8, 1, 255]]).is_ok());
        assert!(AnomalyLabelMap::new(array![[2u8]]).is_err());
    }
}
