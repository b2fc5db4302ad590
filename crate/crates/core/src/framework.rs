//! Per-image stages shared by training-data generation and inference:
//! segmentation, dispersion maps, re-synthesis, perceptual difference and
//! packaging of dissimilarity inputs on the 1 : 1/2 : 1/4 resolution ladder.

use ndarray::{stack, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::backbones::{FeatureExtractor, SegmentationBackbone, SynthesisBackbone};
use crate::data::resize::{self, downsample_image, resize_semantic};
use crate::data::{RgbImage, SemanticMap, SoftmaxMap};
use crate::dissimilarity::DissimilarityInputs;
use crate::error::{Error, Result};
use crate::uncertainty::{perceptual_difference, softmax_distance, softmax_entropy, DispersionMap, PerceptualConfig};

/// Images processed per backbone call.
pub const CHUNK: usize = 8;

/// Image resolution `R`; synthesis runs at `R/2` and dissimilarity at `R/4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ladder {
    pub image: (usize, usize),
    pub synthesis: (usize, usize),
    pub dissimilarity: (usize, usize),
}

impl Ladder {
    pub fn new(image: (usize, usize)) -> Result<Self> {
        let (h, w) = image;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("image resolution {h}x{w} must be a positive multiple of 4")));
        }
        Ok(Ladder {
            image,
            synthesis: (h / 2, w / 2),
            dissimilarity: (h / 4, w / 4),
        })
    }

    /// Custom ladder; each stage must divide the one above by an integer.
    pub fn custom(image: (usize, usize), synthesis: (usize, usize), dissimilarity: (usize, usize)) -> Result<Self> {
        let ladder = Ladder {
            image,
            synthesis,
            dissimilarity,
        };
        ladder.factor(image)?;
        ladder.factor(synthesis)?;
        Ok(ladder)
    }

    /// Integer factor from `from` down to the dissimilarity resolution.
    pub fn factor(&self, from: (usize, usize)) -> Result<usize> {
        let (dh, dw) = self.dissimilarity;
        if dh == 0 || dw == 0 || from.0 % dh != 0 || from.1 % dw != 0 || from.0 / dh != from.1 / dw {
            return Err(Error::Config(format!(
                "{}x{} does not reduce to {dh}x{dw} by one integer factor",
                from.0, from.1
            )));
        }
        Ok(from.0 / dh)
    }
}

/// Segmentation output for one image at full resolution.
#[derive(Debug, Clone)]
pub struct ImageAnalysis {
    pub softmax: SoftmaxMap,
    pub predicted: SemanticMap,
    pub entropy: DispersionMap,
    pub distance: DispersionMap,
}

/// Everything computed for one image on the way to the dissimilarity net.
#[derive(Debug, Clone)]
pub struct Resynthesis {
    pub analysis: ImageAnalysis,
    /// Synthesized from `semantic` at the synthesis resolution.
    pub synthesized: RgbImage,
    pub perceptual: DispersionMap,
    pub inputs: DissimilarityInputs,
}

/// Backbones and feature extractor wired to a resolution ladder.
pub struct Stages<'a> {
    pub segmenter: &'a dyn SegmentationBackbone,
    pub synthesizer: &'a dyn SynthesisBackbone,
    pub features: &'a FeatureExtractor,
    pub perceptual: PerceptualConfig,
    pub ladder: Ladder,
}

impl<'a> Stages<'a> {
    pub fn new(
        segmenter: &'a dyn SegmentationBackbone,
        synthesizer: &'a dyn SynthesisBackbone,
        features: &'a FeatureExtractor,
        perceptual: PerceptualConfig,
        ladder: Ladder,
    ) -> Result<Self> {
        let checks = [
            ("segmentation backbone", segmenter.input_size(), ladder.image),
            ("synthesis backbone", synthesizer.input_size(), ladder.synthesis),
            ("feature extractor", features.spec().input_size, ladder.dissimilarity),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Config(format!(
                    "{name} runs at {}x{}, the resolution ladder needs {}x{}",
                    got.0, got.1, want.0, want.1
                )));
            }
        }
        if segmenter.num_classes() != synthesizer.num_classes() {
            return Err(Error::Config(format!(
                "segmenter has {} classes, synthesizer {}",
                segmenter.num_classes(),
                synthesizer.num_classes()
            )));
        }
        perceptual.validate()?;
        Ok(Stages {
            segmenter,
            synthesizer,
            features,
            perceptual,
            ladder,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.segmenter.num_classes()
    }

    /// Softmax, argmax prediction, entropy and distance at full resolution.
    pub fn analyze(&self, stems: &[&str], images: &[&RgbImage]) -> Result<Vec<ImageAnalysis>> {
        let mut out = Vec::with_capacity(images.len());
        for (s, i) in stems.chunks(CHUNK).zip(images.chunks(CHUNK)) {
            for softmax in self.segmenter.segment_batch(s, i)? {
                out.push(ImageAnalysis {
                    predicted: softmax.argmax(),
                    entropy: softmax_entropy(&softmax)?,
                    distance: softmax_distance(&softmax)?,
                    softmax,
                });
            }
        }
        Ok(out)
    }

    /// Re-synthesizes full-resolution label maps at the synthesis resolution.
    pub fn synthesize(&self, stems: &[&str], maps: &[&SemanticMap]) -> Result<Vec<RgbImage>> {
        let (h, w) = self.ladder.synthesis;
        let resized = maps.iter().map(|m| resize_semantic(m, h, w)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = resized.iter().collect();
        let mut out = Vec::with_capacity(maps.len());
        for (s, m) in stems.chunks(CHUNK).zip(refs.chunks(CHUNK)) {
            out.extend(self.synthesizer.synthesize_batch(s, m)?);
        }
        Ok(out)
    }

    /// Perceptual difference at the dissimilarity resolution.
    pub fn perceptual(&self, images: &[&RgbImage], synthesized: &[&RgbImage]) -> Result<Vec<DispersionMap>> {
        let fi = self.ladder.factor(self.ladder.image)?;
        let fs = self.ladder.factor(self.ladder.synthesis)?;
        let mut out = Vec::with_capacity(images.len());
        for (xi, ri) in images.chunks(CHUNK).zip(synthesized.chunks(CHUNK)) {
            let mut batch = Vec::with_capacity(2 * xi.len());
            for x in xi {
                batch.push(shrink(x, fi)?);
            }
            for r in ri {
                batch.push(shrink(r, fs)?);
            }
            let refs: Vec<_> = batch.iter().collect();
            let pyramids = self.features.extract_batch(&refs)?;
            let (fx, fr) = pyramids.split_at(xi.len());
            for (a, b) in fx.iter().zip(fr) {
                out.push(perceptual_difference(a, b, &self.perceptual)?);
            }
        }
        Ok(out)
    }

    /// Packs full-resolution maps and the synthesized image into network inputs.
    pub fn inputs(
        &self,
        image: &RgbImage,
        synthesized: &RgbImage,
        semantic: &SemanticMap,
        entropy: &DispersionMap,
        distance: &DispersionMap,
        perceptual: &DispersionMap,
    ) -> Result<DissimilarityInputs> {
        let (h, w) = self.ladder.dissimilarity;
        let fi = self.ladder.factor(self.ladder.image)?;
        let planes = [
            entropy.downsample(fi)?.to_f32(),
            distance.downsample(fi)?.to_f32(),
            perceptual.to_f32(),
        ];
        if planes.iter().any(|p| p.dim() != (h, w)) {
            return Err(Error::Shape(format!("uncertainty maps do not reduce to {h}x{w}")));
        }
        let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
        let uncertainty: Array3<f32> = stack(Axis(0), &views).expect("equal plane shapes");
        DissimilarityInputs::new(
            shrink(image, fi)?,
            shrink(synthesized, self.ladder.factor(self.ladder.synthesis)?)?,
            resize_semantic(semantic, h, w)?,
            uncertainty,
        )
    }

    /// Full inference path: segment, re-synthesize the prediction, compare.
    pub fn run(&self, stems: &[&str], images: &[&RgbImage]) -> Result<Vec<Resynthesis>> {
        let analyses = self.analyze(stems, images)?;
        let preds: Vec<_> = analyses.iter().map(|a| &a.predicted).collect();
        let synthesized = self.synthesize(stems, &preds)?;
        let srefs: Vec<_> = synthesized.iter().collect();
        let perceptual = self.perceptual(images, &srefs)?;
        analyses
            .into_iter()
            .zip(synthesized)
            .zip(perceptual)
            .zip(images)
            .map(|(((analysis, synthesized), perceptual), image)| {
                let inputs = self.inputs(
                    image,
                    &synthesized,
                    &analysis.predicted,
                    &analysis.entropy,
                    &analysis.distance,
                    &perceptual,
                )?;
                Ok(Resynthesis {
                    analysis,
                    synthesized,
                    perceptual,
                    inputs,
                })
            })
            .collect()
    }
}

fn shrink(img: &RgbImage, factor: usize) -> Result<RgbImage> {
    if factor == 1 {
        Ok(img.clone())
    } else {
        downsample_image(img, factor)
    }
}

/// Bilinear upsampling of a low-resolution map to `(h, w)`.
pub fn upsample(map: &ndarray::Array2<f32>, size: (usize, usize)) -> ndarray::Array2<f32> {
    if map.dim() == size {
        map.clone()
    } else {
        resize::bilinear(map, size.0, size.1)
    }
}
