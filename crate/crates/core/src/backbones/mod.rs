//! Backbone adapters: segmentation, synthesis and feature extraction.
//!
//! Every implementation goes through the provided trait methods, which check
//! resolutions and validate outputs, so a [`SoftmaxMap`] or [`RgbImage`]
//! leaving an adapter always satisfies its invariants.

pub mod features;
pub mod precomputed;
pub mod toy;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{RgbImage, SemanticMap, SoftmaxMap};
use crate::error::{Error, Result};

pub use features::{ExtractorSpec, FeatureExtractor, TapPlacement, VggEncoder};
pub use precomputed::PrecomputedBackbone;
pub use toy::{
    load_toy_backbones, reconstruction_error, segmentation_accuracy, train_toy_backbones, BackboneReport, SegmenterSpec,
    SynthesizerSpec, ToyBackboneConfig, ToySegmenter, ToySynthesizer,
};

/// One level of a feature pyramid, `channels x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub stride: usize,
    pub features: Array3<f32>,
}

impl FeatureLevel {
    pub fn channels(&self) -> usize {
        self.features.dim().0
    }
}

/// Multi-resolution features of one image, finest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureLevel>,
    input_size: (usize, usize),
}

impl FeaturePyramid {
    /// `input_size` is `(height, width)` of the image the features came from.
    /// Strides must be strictly increasing and each level must measure
    /// `ceil(input / stride)` in both directions.
    pub fn new(levels: Vec<FeatureLevel>, input_size: (usize, usize)) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Shape("feature pyramid has no levels".into()));
        }
        if levels.windows(2).any(|w| w[0].stride >= w[1].stride) {
            return Err(Error::Shape("feature pyramid strides must be strictly increasing".into()));
        }
        for (i, l) in levels.iter().enumerate() {
            let (_, h, w) = l.features.dim();
            let expect = (input_size.0.div_ceil(l.stride), input_size.1.div_ceil(l.stride));
            if l.stride == 0 || (h, w) != expect {
                return Err(Error::Shape(format!(
                    "pyramid level {i} with stride {} is {h}x{w}, expected {}x{}",
                    l.stride, expect.0, expect.1
                )));
            }
        }
        Ok(FeaturePyramid { levels, input_size })
    }

    pub fn levels(&self) -> &[FeatureLevel] {
        &self.levels
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(|l| l.features.iter().all(|v| v.is_finite()))
    }
}

/// Semantic segmentation network with a softmax output.
pub trait SegmentationBackbone {
    fn num_classes(&self) -> usize;

    /// `(height, width)` of accepted images.
    fn input_size(&self) -> (usize, usize);

    /// Per-class probabilities (`C x H x W`) for each image. Implementations
    /// need not validate; [`segment_batch`](Self::segment_batch) does.
    fn predict(&self, stems: &[&str], images: &[&RgbImage]) -> Result<Vec<Array3<f32>>>;

    fn segment_batch(&self, stems: &[&str], images: &[&RgbImage]) -> Result<Vec<SoftmaxMap>> {
        let (h, w) = self.input_size();
        for (stem, img) in stems.iter().zip(images) {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "image `{stem}` is {}x{}, segmentation backbone expects {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
        }
        let out = self.predict(stems, images)?;
        if out.len() != images.len() {
            return Err(Error::Shape(format!("backbone returned {} maps for {} images", out.len(), images.len())));
        }
        out.into_iter()
            .map(|p| {
                if p.dim() != (self.num_classes(), h, w) {
                    return Err(Error::Shape(format!(
                        "softmax output {:?}, expected {:?}",
                        p.dim(),
                        (self.num_classes(), h, w)
                    )));
                }
                SoftmaxMap::new(p)
            })
            .collect()
    }

    fn segment(&self, stem: &str, image: &RgbImage) -> Result<SoftmaxMap> {
        Ok(self.segment_batch(&[stem], &[image])?.remove(0))
    }
}

/// Conditional image generator from semantic label maps.
pub trait SynthesisBackbone {
    fn num_classes(&self) -> usize;

    /// `(height, width)` of accepted semantic maps.
    fn input_size(&self) -> (usize, usize);

    /// RGB output (`3 x H x W`) per map. Validated by [`synthesize_batch`](Self::synthesize_batch).
    fn generate(&self, stems: &[&str], maps: &[&SemanticMap]) -> Result<Vec<Array3<f32>>>;

    fn synthesize_batch(&self, stems: &[&str], maps: &[&SemanticMap]) -> Result<Vec<RgbImage>> {
        let (h, w) = self.input_size();
        for (stem, m) in stems.iter().zip(maps) {
            if m.height() == 0 || m.width() == 0 {
                return Err(Error::Shape(format!("semantic map `{stem}` is empty")));
            }
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "semantic map `{stem}` is {}x{}, synthesis backbone expects {h}x{w}",
                    m.height(),
                    m.width()
                )));
            }
            if m.num_classes() != self.num_classes() {
                return Err(Error::Invalid(format!(
                    "semantic map `{stem}` has {} classes, synthesis backbone knows {}",
                    m.num_classes(),
                    self.num_classes()
                )));
            }
        }
        let out = self.generate(stems, maps)?;
        if out.len() != maps.len() {
            return Err(Error::Shape(format!("backbone returned {} images for {} maps", out.len(), maps.len())));
        }
        out.into_iter()
            .map(|img| {
                if img.dim() != (3, h, w) {
                    return Err(Error::Shape(format!("synthesized image {:?}, expected {:?}", img.dim(), (3, h, w))));
                }
                RgbImage::from_clamped(img)
            })
            .collect()
    }

    fn synthesize(&self, stem: &str, map: &SemanticMap) -> Result<RgbImage> {
        Ok(self.synthesize_batch(&[stem], &[map])?.remove(0))
    }
}

/// Which backbone family a run uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneChoice {
    Toy,
    Precomputed(std::path::PathBuf),
}

impl std::str::FromStr for BackboneChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(BackboneChoice::Toy),
            _ => match s.strip_prefix("precomputed:") {
                Some(dir) if !dir.is_empty() => Ok(BackboneChoice::Precomputed(dir.into())),
                _ => Err(Error::Config(format!("unknown backbone `{s}`; expected `toy` or `precomputed:<dir>`"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(stride: usize, c: usize, h: usize, w: usize) -> FeatureLevel {
        FeatureLevel {
            stride,
            features: Array3::zeros((c, h, w)),
        }
    }

    #[test]
    fn pyramid_checks_stride_arithmetic() {
        assert!(FeaturePyramid::new(vec![level(1, 2, 4, 6), level(2, 2, 2, 3)], (4, 6)).is_ok());
        assert!(FeaturePyramid::new(vec![level(1, 2, 4, 6), level(2, 2, 3, 3)], (4, 6)).is_err());
        assert!(FeaturePyramid::new(vec![level(2, 2, 2, 3), level(2, 2, 2, 3)], (4, 6)).is_err());
        assert!(FeaturePyramid::new(vec![], (4, 6)).is_err());
    }

    #[test]
    fn backbone_choice_parses() {
        assert_eq!("toy".parse::<BackboneChoice>().unwrap(), BackboneChoice::Toy);
        assert_eq!(
            "precomputed:/a/b".parse::<BackboneChoice>().unwrap(),
            BackboneChoice::Precomputed("/a/b".into())
        );
        assert!("resnet".parse::<BackboneChoice>().is_err());
    }
}
