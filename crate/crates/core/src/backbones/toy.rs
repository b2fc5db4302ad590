//! Small trainable segmentation and synthesis networks, so the pipeline runs
//! without external pretrained weights.

use std::path::Path;

use candle_core::{DType, Tensor};
use log::info;
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SegmentationBackbone, SynthesisBackbone};
use crate::data::resize::{self, bilinear, nearest, per_channel};
use crate::data::{DatasetIndex, RgbImage, Sample, SemanticMap, SoftmaxMap, Split, VOID};
use crate::error::{Error, Result};
use crate::nn::convert::{batch3, to_array4};
use crate::nn::{
    cross_entropy, l1, sigmoid, Adam, CheckpointManifest, ClassWeighting, Conv2d, ConvOpts, Init, InputNorm, ParamStore,
    UpConv2x,
};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterSpec {
    pub num_classes: usize,
    pub width: usize,
    /// `(height, width)` of accepted images; both must be multiples of 4.
    pub input_size: (usize, usize),
    pub norm: InputNorm,
}

/// Encoder-decoder FCN predicting logits at half resolution, upsampled
/// bilinearly to the input size at inference.
#[derive(Debug, Clone)]
pub struct ToySegmenter {
    spec: SegmenterSpec,
    params: ParamStore,
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    c4: Conv2d,
    up: UpConv2x,
    c5: Conv2d,
    head: Conv2d,
}

impl ToySegmenter {
    pub const KIND: &'static str = "toy-segmenter";

    pub fn new(spec: SegmenterSpec, seed: u64) -> Result<Self> {
        let (h, w) = spec.input_size;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("segmenter input {h}x{w} must be a positive multiple of 4")));
        }
        if spec.num_classes < 2 {
            return Err(Error::Config("segmenter needs at least 2 classes".into()));
        }
        let mut ps = ParamStore::new(seed, DType::F32);
        let wd = spec.width;
        let s2 = ConvOpts {
            stride: 2,
            ..ConvOpts::default()
        };
        let d = ConvOpts::default();
        let c1 = Conv2d::new(&mut ps, "seg.c1", 3, wd, 3, s2)?;
        let c2 = Conv2d::new(&mut ps, "seg.c2", wd, wd, 3, d)?;
        let c3 = Conv2d::new(&mut ps, "seg.c3", wd, 2 * wd, 3, s2)?;
        let c4 = Conv2d::new(&mut ps, "seg.c4", 2 * wd, 2 * wd, 3, d)?;
        let up = UpConv2x::new(&mut ps, "seg.up", 2 * wd, wd)?;
        let c5 = Conv2d::new(&mut ps, "seg.c5", 2 * wd, wd, 3, d)?;
        let head = Conv2d::new(
            &mut ps,
            "seg.head",
            wd,
            spec.num_classes,
            1,
            ConvOpts {
                init: Init::Lecun,
                ..d
            },
        )?;
        Ok(ToySegmenter {
            spec,
            params: ps,
            c1,
            c2,
            c3,
            c4,
            up,
            c5,
            head,
        })
    }

    pub fn spec(&self) -> &SegmenterSpec {
        &self.spec
    }

    /// Half-resolution logits for a `B x 3 x H x W` batch in `[0,1]`.
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.spec.norm.apply(x)?;
        let skip = self.c2.forward(&self.c1.forward(&x)?.relu()?)?.relu()?;
        let deep = self.c4.forward(&self.c3.forward(&skip)?.relu()?)?.relu()?;
        let up = self.up.forward(&deep)?.relu()?;
        let fused = self.c5.forward(&Tensor::cat(&[&skip, &up], 1)?)?.relu()?;
        self.head.forward(&fused)
    }

    pub fn save(&self, dir: &Path, seed: u64, trained: bool) -> Result<()> {
        self.params.save(dir, &CheckpointManifest::new(Self::KIND, &self.spec, seed, trained)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = CheckpointManifest::read(dir)?;
        check_kind(&m, Self::KIND, dir)?;
        let net = Self::new(serde_json::from_value(m.spec.clone())?, m.seed)?;
        net.params.load(dir)?;
        Ok(net)
    }
}

impl SegmentationBackbone for ToySegmenter {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn input_size(&self) -> (usize, usize) {
        self.spec.input_size
    }

    fn predict(&self, _stems: &[&str], images: &[&RgbImage]) -> Result<Vec<Array3<f32>>> {
        let (h, w) = self.spec.input_size;
        let data: Vec<_> = images.iter().map(|i| i.data()).collect();
        let logits = to_array4(&self.logits(&batch3(&data, DType::F32)?)?)?;
        logits
            .axis_iter(Axis(0))
            .map(|l| {
                let full = per_channel(&l.to_owned(), |p| bilinear(p, h, w));
                Ok(SoftmaxMap::from_logits(&full)?.probs().clone())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizerSpec {
    pub num_classes: usize,
    pub width: usize,
    /// `(height, width)` of accepted semantic maps; both must be even.
    pub input_size: (usize, usize),
}

/// Conditional encoder-decoder mapping a one-hot label map (with a VOID
/// channel) to an RGB image, trained with an L1 reconstruction loss.
#[derive(Debug, Clone)]
pub struct ToySynthesizer {
    spec: SynthesizerSpec,
    params: ParamStore,
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    up: UpConv2x,
    c4: Conv2d,
    out: Conv2d,
}

impl ToySynthesizer {
    pub const KIND: &'static str = "toy-synthesizer";

    pub fn new(spec: SynthesizerSpec, seed: u64) -> Result<Self> {
        let (h, w) = spec.input_size;
        if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("synthesizer input {h}x{w} must be positive and even")));
        }
        let mut ps = ParamStore::new(seed, DType::F32);
        let wd = spec.width;
        let d = ConvOpts::default();
        let c1 = Conv2d::new(&mut ps, "syn.c1", spec.num_classes + 1, wd, 3, d)?;
        let c2 = Conv2d::new(
            &mut ps,
            "syn.c2",
            wd,
            wd,
            3,
            ConvOpts {
                stride: 2,
                ..d
            },
        )?;
        let c3 = Conv2d::new(&mut ps, "syn.c3", wd, wd, 3, d)?;
        let up = UpConv2x::new(&mut ps, "syn.up", wd, wd)?;
        let c4 = Conv2d::new(&mut ps, "syn.c4", 2 * wd, wd, 3, d)?;
        let out = Conv2d::new(
            &mut ps,
            "syn.out",
            wd,
            3,
            1,
            ConvOpts {
                init: Init::Lecun,
                ..d
            },
        )?;
        Ok(ToySynthesizer {
            spec,
            params: ps,
            c1,
            c2,
            c3,
            up,
            c4,
            out,
        })
    }

    pub fn spec(&self) -> &SynthesizerSpec {
        &self.spec
    }

    fn forward(&self, one_hot: &Tensor) -> Result<Tensor> {
        let skip = self.c1.forward(one_hot)?.relu()?;
        let deep = self.c3.forward(&self.c2.forward(&skip)?.relu()?)?.relu()?;
        let up = self.up.forward(&deep)?.relu()?;
        let fused = self.c4.forward(&Tensor::cat(&[&skip, &up], 1)?)?.relu()?;
        sigmoid(&self.out.forward(&fused)?)
    }

    pub fn save(&self, dir: &Path, seed: u64, trained: bool) -> Result<()> {
        self.params.save(dir, &CheckpointManifest::new(Self::KIND, &self.spec, seed, trained)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = CheckpointManifest::read(dir)?;
        check_kind(&m, Self::KIND, dir)?;
        let net = Self::new(serde_json::from_value(m.spec.clone())?, m.seed)?;
        net.params.load(dir)?;
        Ok(net)
    }
}

impl SynthesisBackbone for ToySynthesizer {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn input_size(&self) -> (usize, usize) {
        self.spec.input_size
    }

    fn generate(&self, _stems: &[&str], maps: &[&SemanticMap]) -> Result<Vec<Array3<f32>>> {
        let hots: Vec<Array3<f32>> = maps.iter().map(|m| m.one_hot_with_void()).collect();
        let refs: Vec<_> = hots.iter().collect();
        let out = to_array4(&self.forward(&batch3(&refs, DType::F32)?)?)?;
        Ok(out.axis_iter(Axis(0)).map(|a| a.to_owned()).collect())
    }
}

fn check_kind(m: &CheckpointManifest, kind: &str, dir: &Path) -> Result<()> {
    if m.kind != kind {
        return Err(Error::Invalid(format!(
            "{} holds a `{}` checkpoint, expected `{kind}`",
            dir.display(),
            m.kind
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackboneConfig {
    pub seg_width: usize,
    pub synth_width: usize,
    pub seg_epochs: usize,
    pub synth_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Use at most this many training images (all when `None`).
    pub max_train_images: Option<usize>,
    /// `(height, width)`; the synthesizer works at half of it.
    pub image_size: (usize, usize),
    pub norm: InputNorm,
    pub min_pixel_accuracy: f64,
    pub max_recon_error: f64,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        ToyBackboneConfig {
            seg_width: 12,
            synth_width: 16,
            seg_epochs: 4,
            synth_epochs: 4,
            batch_size: 8,
            lr: 3e-3,
            max_train_images: None,
            image_size: (128, 256),
            norm: InputNorm::IMAGENET,
            min_pixel_accuracy: 0.9,
            max_recon_error: 0.08,
        }
    }
}

/// Outcome of [`train_toy_backbones`], persisted next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneReport {
    pub seed: u64,
    /// False when no optimization step was taken.
    pub trained: bool,
    pub seg_steps: usize,
    pub synth_steps: usize,
    pub seg_epoch_losses: Vec<f64>,
    pub synth_epoch_losses: Vec<f64>,
    /// Non-VOID pixel accuracy on the validation split.
    pub pixel_accuracy: f64,
    /// Mean absolute RGB error of re-synthesized validation ground truth.
    pub recon_error: f64,
    pub meets_accuracy_target: bool,
    pub meets_recon_target: bool,
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

fn finite(loss: &Tensor, seed: u64, step: usize) -> Result<f64> {
    let v = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::Diverged { seed, step });
    }
    Ok(v)
}

fn half(size: (usize, usize)) -> (usize, usize) {
    (size.0 / 2, size.1 / 2)
}

/// Trains both toy backbones on the training split and measures them on the
/// validation split. VOID pixels are excluded from the segmentation loss.
/// When `out_dir` is given, checkpoints go to `segmenter/` and
/// `synthesizer/` below it together with `report.json`.
pub fn train_toy_backbones(
    dataset: &DatasetIndex,
    cfg: &ToyBackboneConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(ToySegmenter, ToySynthesizer, BackboneReport)> {
    let c = dataset.num_classes() as usize;
    let mut train = dataset.load_split(Split::Train)?;
    if let Some(m) = cfg.max_train_images {
        train.truncate(m);
    }
    if train.is_empty() && (cfg.seg_epochs > 0 || cfg.synth_epochs > 0) {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let val = dataset.load_split(Split::Val)?;
    let seg = ToySegmenter::new(
        SegmenterSpec {
            num_classes: c,
            width: cfg.seg_width,
            input_size: cfg.image_size,
            norm: cfg.norm,
        },
        seed,
    )?;
    let syn = ToySynthesizer::new(
        SynthesizerSpec {
            num_classes: c,
            width: cfg.synth_width,
            input_size: half(cfg.image_size),
        },
        seed.wrapping_add(1),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (seg_losses, seg_steps) = fit_segmenter(&seg, &train, cfg, seed, &mut rng)?;
    let (synth_losses, synth_steps) = fit_synthesizer(&syn, &train, cfg, seed, &mut rng)?;

    let pixel_accuracy = segmentation_accuracy(&seg, &val)?;
    let recon_error = reconstruction_error(&syn, &val)?;
    let report = BackboneReport {
        seed,
        trained: seg_steps + synth_steps > 0,
        seg_steps,
        synth_steps,
        seg_epoch_losses: seg_losses,
        synth_epoch_losses: synth_losses,
        pixel_accuracy,
        recon_error,
        meets_accuracy_target: pixel_accuracy >= cfg.min_pixel_accuracy,
        meets_recon_target: recon_error <= cfg.max_recon_error,
    };
    info!(
        "toy backbones: pixel accuracy {:.4}, reconstruction error {:.4}",
        report.pixel_accuracy, report.recon_error
    );
    if let Some(dir) = out_dir {
        seg.save(&dir.join("segmenter"), seed, seg_steps > 0)?;
        syn.save(&dir.join("synthesizer"), seed.wrapping_add(1), synth_steps > 0)?;
        let path = dir.join(REPORT_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok((seg, syn, report))
}

/// Loads backbones written by [`train_toy_backbones`].
pub fn load_toy_backbones(dir: &Path) -> Result<(ToySegmenter, ToySynthesizer, BackboneReport)> {
    let seg = ToySegmenter::load(&dir.join("segmenter"))?;
    let syn = ToySynthesizer::load(&dir.join("synthesizer"))?;
    let path = dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok((seg, syn, serde_json::from_str(&text)?))
}

fn fit_segmenter(
    net: &ToySegmenter,
    train: &[Sample],
    cfg: &ToyBackboneConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, usize)> {
    let (hh, hw) = half(cfg.image_size);
    let vars = net.params.iter().map(|(_, v)| v.clone()).collect();
    let mut opt = Adam::new(vars, cfg.lr)?;
    let mut losses = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.seg_epochs {
        let mut total = 0.0;
        let order = batches(train.len(), cfg.batch_size, rng);
        for idx in &order {
            let mut images = Vec::with_capacity(idx.len());
            let mut targets = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &train[i];
                let t = nearest(s.semantic.ids(), hh, hw);
                if rng.random_bool(0.5) {
                    images.push(s.image.flip_horizontal().into_inner());
                    targets.push(flip(&t));
                } else {
                    images.push(s.image.data().clone());
                    targets.push(t);
                }
            }
            let refs: Vec<_> = images.iter().collect();
            let logits = net.logits(&batch3(&refs, DType::F32)?)?;
            let trefs: Vec<_> = targets.iter().collect();
            let loss = cross_entropy(&logits, &trefs, VOID, ClassWeighting::Uniform)?;
            total += finite(&loss, seed, step)?;
            opt.step(&loss.backward()?)?;
            step += 1;
        }
        losses.push(total / order.len().max(1) as f64);
        info!("segmenter epoch {}: loss {:.4}", losses.len(), losses[losses.len() - 1]);
    }
    Ok((losses, step))
}

fn fit_synthesizer(
    net: &ToySynthesizer,
    train: &[Sample],
    cfg: &ToyBackboneConfig,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, usize)> {
    let (hh, hw) = half(cfg.image_size);
    let vars = net.params.iter().map(|(_, v)| v.clone()).collect();
    let mut opt = Adam::new(vars, cfg.lr)?;
    let mut losses = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.synth_epochs {
        let mut total = 0.0;
        let order = batches(train.len(), cfg.batch_size, rng);
        for idx in &order {
            let mut hots = Vec::with_capacity(idx.len());
            let mut targets = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &train[i];
                hots.push(resize::resize_semantic(&s.semantic, hh, hw)?.one_hot_with_void());
                targets.push(resize::downsample_image(&s.image, 2)?.into_inner());
            }
            let hrefs: Vec<_> = hots.iter().collect();
            let trefs: Vec<_> = targets.iter().collect();
            let pred = net.forward(&batch3(&hrefs, DType::F32)?)?;
            let loss = l1(&pred, &batch3(&trefs, DType::F32)?, None)?;
            total += finite(&loss, seed, step)?;
            opt.step(&loss.backward()?)?;
            step += 1;
        }
        losses.push(total / order.len().max(1) as f64);
        info!("synthesizer epoch {}: loss {:.4}", losses.len(), losses[losses.len() - 1]);
    }
    Ok((losses, step))
}

fn flip<T: Clone>(a: &Array2<T>) -> Array2<T> {
    a.slice(ndarray::s![.., ..;-1]).to_owned()
}

/// Fraction of non-VOID ground-truth pixels whose argmax class is correct.
pub fn segmentation_accuracy(net: &dyn SegmentationBackbone, samples: &[Sample]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in samples.chunks(8) {
        let stems: Vec<&str> = chunk.iter().map(|s| s.stem.as_str()).collect();
        let imgs: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        for (s, p) in chunk.iter().zip(net.segment_batch(&stems, &imgs)?) {
            let pred = p.argmax();
            for (g, q) in s.semantic.ids().iter().zip(pred.ids().iter()) {
                if *g != VOID {
                    total += 1;
                    hit += usize::from(g == q);
                }
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Mean absolute error of synthesizing each sample's ground-truth map
/// against its half-resolution image.
pub fn reconstruction_error(net: &dyn SynthesisBackbone, samples: &[Sample]) -> Result<f64> {
    let (h, w) = net.input_size();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for chunk in samples.chunks(8) {
        let maps = chunk
            .iter()
            .map(|s| resize::resize_semantic(&s.semantic, h, w))
            .collect::<Result<Vec<_>>>()?;
        let stems: Vec<&str> = chunk.iter().map(|s| s.stem.as_str()).collect();
        let refs: Vec<_> = maps.iter().collect();
        for (s, out) in chunk.iter().zip(net.synthesize_batch(&stems, &refs)?) {
            let target = resize::downsample_image(&s.image, 2)?;
            sum += out
                .data()
                .iter()
                .zip(target.data().iter())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>();
            n += out.data().len();
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shapes::{generate_shapes_dataset, ShapesConfig};

    fn tiny_dataset(dir: &Path) -> DatasetIndex {
        let cfg = ShapesConfig {
            width: 64,
            height: 64,
            train_images: 12,
            val_images: 4,
            test_images: 0,
            anomaly_images: 0,
            ..ShapesConfig::default()
        };
        generate_shapes_dataset(&cfg, 1, dir).unwrap()
    }

    fn tiny_cfg(epochs: usize) -> ToyBackboneConfig {
        ToyBackboneConfig {
            seg_width: 4,
            synth_width: 4,
            seg_epochs: epochs,
            synth_epochs: epochs,
            batch_size: 4,
            image_size: (64, 64),
            ..ToyBackboneConfig::default()
        }
    }

    #[test]
    fn zero_steps_is_flagged_untrained() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let ck = dir.path().join("ck");
        let (_, _, r) = train_toy_backbones(&ds, &tiny_cfg(0), 0, Some(&ck)).unwrap();
        assert!(!r.trained);
        assert!(!CheckpointManifest::read(&ck.join("segmenter")).unwrap().trained);
    }

    #[test]
    fn same_seed_same_metrics_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(&dir.path().join("ds"));
        let ck = dir.path().join("ck");
        let (seg, _, a) = train_toy_backbones(&ds, &tiny_cfg(1), 7, Some(&ck)).unwrap();
        let (_, _, b) = train_toy_backbones(&ds, &tiny_cfg(1), 7, None).unwrap();
        assert_eq!(a, b);
        assert!(a.trained);
        let (seg2, _, r2) = load_toy_backbones(&ck).unwrap();
        assert_eq!(r2, a);
        let img = RgbImage::zeros(64, 64);
        assert_eq!(seg.segment("x", &img).unwrap(), seg2.segment("x", &img).unwrap());
    }

    #[test]
    fn outputs_satisfy_invariants() {
        let seg = ToySegmenter::new(
            SegmenterSpec {
                num_classes: 4,
                width: 4,
                input_size: (16, 32),
                norm: InputNorm::IMAGENET,
            },
            0,
        )
        .unwrap();
        let p = seg.segment("x", &RgbImage::zeros(16, 32)).unwrap();
        assert_eq!((p.num_classes(), p.height(), p.width()), (4, 16, 32));
        assert!(seg.segment("x", &RgbImage::zeros(8, 32)).is_err());

        let syn = ToySynthesizer::new(
            SynthesizerSpec {
                num_classes: 4,
                width: 4,
                input_size: (8, 16),
            },
            0,
        )
        .unwrap();
        let map = SemanticMap::new(Array2::from_elem((8, 16), VOID), 4).unwrap();
        let img = syn.synthesize("x", &map).unwrap();
        assert_eq!((img.height(), img.width()), (8, 16));
        let wrong = SemanticMap::new(Array2::zeros((8, 16)), 3).unwrap();
        assert!(syn.synthesize("x", &wrong).is_err());
        assert!(SemanticMap::new(Array2::zeros((0, 0)), 4).is_err());
        let small = SemanticMap::new(Array2::zeros((4, 16)), 4).unwrap();
        assert!(syn.synthesize("x", &small).is_err());
    }
}
