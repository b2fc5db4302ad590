//! VGG-style convolutional encoder and the fixed feature extractor built on it.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{FeatureLevel, FeaturePyramid};
use crate::data::RgbImage;
use crate::error::{Error, Result};
use crate::nn::convert::{batch3, to_array4};
use crate::nn::{max_pool2x2, CheckpointManifest, Conv2d, ConvOpts, Init, InputNorm, ParamStore};

/// Where pyramid levels are read off each convolution block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapPlacement {
    /// Last convolution of each block: strides 1, 2, 4, 8.
    #[default]
    BeforePool,
    /// Output of the pooling layer closing each block: strides 2, 4, 8, 16.
    AfterPool,
}

impl TapPlacement {
    pub fn strides(self) -> [usize; 4] {
        match self {
            TapPlacement::BeforePool => [1, 2, 4, 8],
            TapPlacement::AfterPool => [2, 4, 8, 16],
        }
    }
}

/// Blocks of 3x3 ReLU convolutions separated by 2x2 max pooling.
#[derive(Debug, Clone)]
pub struct VggEncoder {
    blocks: Vec<Vec<Conv2d>>,
}

impl VggEncoder {
    pub fn new(ps: &mut ParamStore, prefix: &str, widths: &[usize], convs_per_block: &[usize], bias: bool) -> Result<Self> {
        if widths.is_empty() || widths.len() != convs_per_block.len() {
            return Err(Error::Invalid(format!(
                "encoder needs one conv count per block ({} widths, {} counts)",
                widths.len(),
                convs_per_block.len()
            )));
        }
        let mut blocks = Vec::with_capacity(widths.len());
        let mut c_in = 3;
        for (b, (&width, &n)) in widths.iter().zip(convs_per_block).enumerate() {
            if n == 0 {
                return Err(Error::Invalid(format!("encoder block {b} has no convolutions")));
            }
            let mut convs = Vec::with_capacity(n);
            for i in 0..n {
                let opts = ConvOpts {
                    bias,
                    init: Init::He,
                    ..ConvOpts::default()
                };
                convs.push(Conv2d::new(ps, &format!("{prefix}.b{b}.c{i}"), c_in, width, 3, opts)?);
                c_in = width;
            }
            blocks.push(convs);
        }
        Ok(VggEncoder { blocks })
    }

    pub fn channels(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.last().expect("non-empty block").out_channels()).collect()
    }

    /// Feature maps of each block, finest first.
    pub fn forward(&self, x: &Tensor, taps: TapPlacement) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                h = max_pool2x2(&h)?;
            }
            for conv in block {
                h = conv.forward(&h)?.relu()?;
            }
            match taps {
                TapPlacement::BeforePool => outs.push(h.clone()),
                TapPlacement::AfterPool => outs.push(max_pool2x2(&h)?),
            }
        }
        Ok(outs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorSpec {
    pub widths: [usize; 4],
    pub convs_per_block: [usize; 4],
    pub taps: TapPlacement,
    /// `(height, width)` of accepted images.
    pub input_size: (usize, usize),
    pub norm: InputNorm,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec {
            widths: [64, 128, 256, 512],
            convs_per_block: [2, 2, 3, 3],
            taps: TapPlacement::BeforePool,
            input_size: (32, 64),
            norm: InputNorm::IMAGENET,
        }
    }
}

impl ExtractorSpec {
    /// Divides every width by `divisor` (at least one channel each).
    pub fn scaled(mut self, divisor: usize) -> Self {
        self.widths = self.widths.map(|w| (w / divisor.max(1)).max(1));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let deepest = self.taps.strides()[3];
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % deepest != 0 || w % deepest != 0 {
            return Err(Error::Config(format!(
                "feature extractor input {h}x{w} must be a positive multiple of {deepest}"
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("feature extractor widths must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed-weight VGG feature extractor producing four-level pyramids.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    spec: ExtractorSpec,
    params: ParamStore,
    encoder: VggEncoder,
}

impl FeatureExtractor {
    pub const KIND: &'static str = "feature-extractor";

    /// Seeded random weights, kept fixed.
    pub fn random(spec: ExtractorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new(seed, DType::F32);
        let encoder = VggEncoder::new(&mut params, "vgg", &spec.widths, &spec.convs_per_block, true)?;
        Ok(FeatureExtractor { spec, params, encoder })
    }

    /// Loads externally supplied weights from a checkpoint directory whose
    /// manifest carries the extractor spec.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = CheckpointManifest::read(dir)?;
        if manifest.kind != Self::KIND {
            return Err(Error::Invalid(format!("{} holds a `{}` checkpoint", dir.display(), manifest.kind)));
        }
        let spec: ExtractorSpec = serde_json::from_value(manifest.spec.clone())?;
        let fx = Self::random(spec, manifest.seed)?;
        fx.params.load(dir)?;
        Ok(fx)
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        let manifest = CheckpointManifest::new(Self::KIND, &self.spec, seed, false)?;
        self.params.save(dir, &manifest)
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn extract(&self, image: &RgbImage) -> Result<FeaturePyramid> {
        Ok(self.extract_batch(&[image])?.remove(0))
    }

    pub fn extract_batch(&self, images: &[&RgbImage]) -> Result<Vec<FeaturePyramid>> {
        let (h, w) = self.spec.input_size;
        for img in images {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::Shape(format!(
                    "feature extractor expects {h}x{w}, got {}x{}",
                    img.height(),
                    img.width()
                )));
            }
        }
        let data: Vec<_> = images.iter().map(|i| i.data()).collect();
        let x = self.spec.norm.apply(&batch3(&data, DType::F32)?)?;
        let levels = self.encoder.forward(&x, self.spec.taps)?;
        let arrays = levels.iter().map(to_array4).collect::<Result<Vec<_>>>()?;
        let strides = self.spec.taps.strides();
        (0..images.len())
            .map(|b| {
                let lv = arrays
                    .iter()
                    .zip(strides)
                    .map(|(a, stride)| FeatureLevel {
                        stride,
                        features: a.index_axis(ndarray::Axis(0), b).to_owned(),
                    })
                    .collect();
                FeaturePyramid::new(lv, (h, w))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn full_width_pyramid_shapes() {
        let fx = FeatureExtractor::random(ExtractorSpec::default(), 0).unwrap();
        let p = fx.extract(&RgbImage::zeros(32, 64)).unwrap();
        let dims: Vec<_> = p.levels().iter().map(|l| l.features.dim()).collect();
        assert_eq!(dims, vec![(64, 32, 64), (128, 16, 32), (256, 8, 16), (512, 4, 8)]);
        assert!(p.is_finite());
    }

    #[test]
    fn identical_images_identical_pyramids() {
        let fx = FeatureExtractor::random(ExtractorSpec::default().scaled(8), 3).unwrap();
        let img = RgbImage::new(Array3::from_shape_fn((3, 32, 64), |(c, y, x)| ((c + y * x) % 7) as f32 / 7.0)).unwrap();
        assert_eq!(fx.extract(&img).unwrap(), fx.extract(&img).unwrap());
    }

    #[test]
    fn after_pool_taps_halve_every_level() {
        let spec = ExtractorSpec {
            taps: TapPlacement::AfterPool,
            ..ExtractorSpec::default().scaled(16)
        };
        let fx = FeatureExtractor::random(spec, 0).unwrap();
        let p = fx.extract(&RgbImage::zeros(32, 64)).unwrap();
        let strides: Vec<_> = p.levels().iter().map(|l| l.stride).collect();
        assert_eq!(strides, vec![2, 4, 8, 16]);
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let fx = FeatureExtractor::random(ExtractorSpec::default().scaled(16), 0).unwrap();
        assert!(fx.extract(&RgbImage::zeros(16, 64)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fx = FeatureExtractor::random(ExtractorSpec::default().scaled(16), 5).unwrap();
        fx.save(dir.path(), 5).unwrap();
        let back = FeatureExtractor::load(dir.path()).unwrap();
        let img = RgbImage::new(Array3::from_elem((3, 32, 64), 0.3)).unwrap();
        assert_eq!(fx.extract(&img).unwrap(), back.extract(&img).unwrap());
    }
}
