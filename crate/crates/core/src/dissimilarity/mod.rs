//! Spatially-aware dissimilarity network: image, synthesized, semantic and
//! uncertainty encoders, per-level fusion gated by the uncertainty features,
//! and a SPADE-normalized decoder producing a two-class anomaly prediction.

pub mod train;

use std::path::Path;

use candle_core::{DType, Tensor, Var};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::backbones::{TapPlacement, VggEncoder};
use crate::data::resize::nearest;
use crate::data::{AnomalyScoreMap, RgbImage, SemanticMap};
use crate::error::{Error, Result};
use crate::nn::convert::{batch3, to_array4};
use crate::nn::{selu, CheckpointManifest, Conv2d, ConvOpts, Init, InputNorm, ParamStore, Spade, UpConv2x};

pub use train::{train, train_joint, EpochLog, TrainConfig, TrainLog};

/// How the uncertainty features enter the fusion module.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyMode {
    /// Fused features are multiplied element-wise by the uncertainty features.
    #[default]
    Gated,
    /// No uncertainty encoder; fused features pass through unchanged.
    Off,
}

/// Channel layout of the network. Lists are ordered finest level first and
/// all have one entry per pyramid level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissimilaritySpec {
    pub num_classes: usize,
    /// `(height, width)` of the inputs.
    pub input_size: (usize, usize),
    pub image_widths: Vec<usize>,
    pub image_convs: Vec<usize>,
    /// Semantic and uncertainty encoders: a 7x7 stride-1 layer then 3x3 stride-2 layers.
    pub encoder_widths: Vec<usize>,
    /// Per decoder block, coarsest first: `[conv_a, conv_b, upsampling]`.
    /// The last block ends in the two-filter head instead of upsampling.
    pub decoder: Vec<[usize; 3]>,
    pub spade_hidden: usize,
    pub uncertainty: UncertaintyMode,
    pub norm: InputNorm,
}

impl DissimilaritySpec {
    /// Full-width layout for `num_classes` semantic classes.
    pub fn full(num_classes: usize) -> Self {
        DissimilaritySpec {
            num_classes,
            input_size: (32, 64),
            image_widths: vec![64, 128, 256, 512],
            image_convs: vec![2, 2, 3, 3],
            encoder_widths: vec![32, 64, 128, 256],
            decoder: vec![[256, 256, 256], [256, 256, 256], [384, 128, 128], [192, 64, 0]],
            spade_hidden: 128,
            uncertainty: UncertaintyMode::Gated,
            norm: InputNorm::IMAGENET,
        }
    }

    /// Divides every channel count by `divisor`, keeping at least one channel.
    pub fn scaled(mut self, divisor: usize) -> Self {
        let d = divisor.max(1);
        let f = |w: usize| if w == 0 { 0 } else { (w / d).max(1) };
        self.image_widths = self.image_widths.iter().map(|w| f(*w)).collect();
        self.encoder_widths = self.encoder_widths.iter().map(|w| f(*w)).collect();
        self.decoder = self.decoder.iter().map(|b| b.map(f)).collect();
        self.spade_hidden = f(self.spade_hidden);
        self
    }

    /// Three-level network on 4x8 inputs with a handful of channels per layer.
    pub fn micro(num_classes: usize) -> Self {
        DissimilaritySpec {
            num_classes,
            input_size: (4, 8),
            image_widths: vec![2, 3, 4],
            image_convs: vec![1, 1, 1],
            encoder_widths: vec![2, 3, 4],
            decoder: vec![[4, 4, 3], [3, 3, 2], [3, 2, 0]],
            spade_hidden: 2,
            uncertainty: UncertaintyMode::Gated,
            norm: InputNorm::IMAGENET,
        }
    }

    pub fn levels(&self) -> usize {
        self.image_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 || l > 5 {
            return Err(Error::Config(format!("dissimilarity network needs 1 to 5 levels, got {l}")));
        }
        if self.image_convs.len() != l || self.encoder_widths.len() != l || self.decoder.len() != l {
            return Err(Error::Config("dissimilarity layer lists must all have one entry per level".into()));
        }
        let zero_width = self.image_widths.contains(&0)
            || self.image_convs.contains(&0)
            || self.encoder_widths.contains(&0)
            || self.spade_hidden == 0
            || self.decoder.iter().enumerate().any(|(i, b)| b[0] == 0 || b[1] == 0 || (i + 1 < l && b[2] == 0));
        if zero_width {
            return Err(Error::Invalid("dissimilarity spec has a layer with zero channels".into()));
        }
        if self.num_classes < 1 {
            return Err(Error::Config("dissimilarity network needs at least one semantic class".into()));
        }
        let coarsest = 1 << (l - 1);
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % coarsest != 0 || w % coarsest != 0 {
            return Err(Error::Config(format!(
                "dissimilarity input {h}x{w} must be a positive multiple of {coarsest}"
            )));
        }
        Ok(())
    }

    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels()).map(|i| 1 << i).collect()
    }
}

/// One training or inference example at the network's resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DissimilarityInputs {
    pub image: RgbImage,
    pub synthesized: RgbImage,
    pub semantic: SemanticMap,
    /// Entropy, distance and perceptual difference, `3 x H x W` in `[0,1]`.
    pub uncertainty: Array3<f32>,
}

impl DissimilarityInputs {
    pub fn new(image: RgbImage, synthesized: RgbImage, semantic: SemanticMap, uncertainty: Array3<f32>) -> Result<Self> {
        let size = (image.height(), image.width());
        if (synthesized.height(), synthesized.width()) != size
            || (semantic.height(), semantic.width()) != size
            || (uncertainty.dim().1, uncertainty.dim().2) != size
        {
            return Err(Error::Shape("dissimilarity inputs differ in spatial size".into()));
        }
        if uncertainty.dim().0 != 3 {
            return Err(Error::Shape(format!("uncertainty stack has {} channels, expected 3", uncertainty.dim().0)));
        }
        if uncertainty.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("uncertainty values must lie in [0,1]".into()));
        }
        Ok(DissimilarityInputs {
            image,
            synthesized,
            semantic,
            uncertainty,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.height(), self.image.width())
    }

    pub fn flip_horizontal(&self) -> Self {
        DissimilarityInputs {
            image: self.image.flip_horizontal(),
            synthesized: self.synthesized.flip_horizontal(),
            semantic: self.semantic.flip_horizontal(),
            uncertainty: self.uncertainty.slice(ndarray::s![.., .., ..;-1]).to_owned(),
        }
    }

    pub fn with_zero_uncertainty(&self) -> Self {
        let mut out = self.clone();
        out.uncertainty.fill(0.0);
        out
    }
}

/// Inputs of a batch as tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub image: Tensor,
    pub synthesized: Tensor,
    pub semantic: Tensor,
    pub uncertainty: Tensor,
    /// One-hot semantic maps at each decoder resolution, finest first.
    pub labels: Vec<Tensor>,
}

/// Tensors produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B x 2 x H x W`; channel 1 is the anomaly class.
    pub logits: Tensor,
    /// Fusion module outputs, finest first.
    pub fusion: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct EncoderLevels {
    layers: Vec<Conv2d>,
}

impl EncoderLevels {
    fn new(ps: &mut ParamStore, prefix: &str, c_in: usize, widths: &[usize], bias: bool) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut c = c_in;
        for (i, &w) in widths.iter().enumerate() {
            let (kernel, stride) = if i == 0 { (7, 1) } else { (3, 2) };
            let opts = ConvOpts {
                stride,
                bias,
                init: Init::He,
                ..ConvOpts::default()
            };
            layers.push(Conv2d::new(ps, &format!("{prefix}.l{i}"), c, w, kernel, opts)?);
            c = w;
        }
        Ok(EncoderLevels { layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?.relu()?;
            outs.push(h.clone());
        }
        Ok(outs)
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    conv_a: Conv2d,
    spade_a: Spade,
    conv_b: Conv2d,
    spade_b: Spade,
    up: Option<UpConv2x>,
    head: Option<Conv2d>,
}

impl DecoderBlock {
    fn forward(&self, x: &Tensor, labels: &Tensor) -> Result<Tensor> {
        let h = selu(&self.spade_a.forward(&self.conv_a.forward(x)?, labels)?)?;
        let h = selu(&self.spade_b.forward(&self.conv_b.forward(&h)?, labels)?)?;
        match (&self.up, &self.head) {
            (Some(up), _) => up.forward(&h),
            (None, Some(head)) => head.forward(&h),
            (None, None) => unreachable!("decoder block ends in upsampling or the head"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DissimilarityNet {
    spec: DissimilaritySpec,
    params: ParamStore,
    image_encoder: VggEncoder,
    semantic_encoder: EncoderLevels,
    uncertainty_encoder: Option<EncoderLevels>,
    fusion: Vec<Conv2d>,
    decoder: Vec<DecoderBlock>,
}

pub const IMAGE_ENCODER_PREFIX: &str = "enc_img.";

/// Deterministic initialization: fan-in scaled normal weights (He for ReLU
/// layers, LeCun for SELU and linear ones) and zero biases.
pub fn init_weights(spec: &DissimilaritySpec, seed: u64) -> Result<DissimilarityNet> {
    DissimilarityNet::new(spec.clone(), seed, DType::F32)
}

impl DissimilarityNet {
    pub const KIND: &'static str = "dissimilarity";

    pub fn new(spec: DissimilaritySpec, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let mut ps = ParamStore::new(seed, dtype);
        let image_encoder = VggEncoder::new(&mut ps, "enc_img", &spec.image_widths, &spec.image_convs, true)?;
        let label_ch = spec.num_classes + 1;
        let semantic_encoder = EncoderLevels::new(&mut ps, "enc_sem", label_ch, &spec.encoder_widths, true)?;
        // Bias-free so that a zero uncertainty stack encodes to exactly zero.
        let uncertainty_encoder = match spec.uncertainty {
            UncertaintyMode::Gated => Some(EncoderLevels::new(&mut ps, "enc_unc", 3, &spec.encoder_widths, false)?),
            UncertaintyMode::Off => None,
        };
        let lin = ConvOpts {
            init: Init::Lecun,
            ..ConvOpts::default()
        };
        let mut fusion = Vec::new();
        for (l, (&img_c, &enc_c)) in spec.image_widths.iter().zip(&spec.encoder_widths).enumerate() {
            fusion.push(Conv2d::new(&mut ps, &format!("fuse.l{l}"), 2 * img_c + enc_c, enc_c, 1, lin)?);
        }
        let levels = spec.levels();
        let mut decoder = Vec::new();
        let mut prev = 0;
        for (i, &[a, b, up]) in spec.decoder.iter().enumerate() {
            let level = levels - 1 - i;
            let c_in = spec.encoder_widths[level] + prev;
            let p = format!("dec.b{i}");
            let last = i + 1 == levels;
            decoder.push(DecoderBlock {
                conv_a: Conv2d::new(&mut ps, &format!("{p}.conv_a"), c_in, a, 3, lin)?,
                spade_a: Spade::new(&mut ps, &format!("{p}.spade_a"), label_ch, spec.spade_hidden, a)?,
                conv_b: Conv2d::new(&mut ps, &format!("{p}.conv_b"), a, b, 3, lin)?,
                spade_b: Spade::new(&mut ps, &format!("{p}.spade_b"), label_ch, spec.spade_hidden, b)?,
                up: if last { None } else { Some(UpConv2x::new(&mut ps, &format!("{p}.up"), b, up)?) },
                head: if last { Some(Conv2d::new(&mut ps, &format!("{p}.head"), b, 2, 1, lin)?) } else { None },
            });
            prev = up;
        }
        Ok(DissimilarityNet {
            spec,
            params: ps,
            image_encoder,
            semantic_encoder,
            uncertainty_encoder,
            fusion,
            decoder,
        })
    }

    pub fn spec(&self) -> &DissimilaritySpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Parameters the optimizer updates; the image encoder is left out when frozen.
    pub fn trainable_vars(&self, freeze_image_encoder: bool) -> Vec<Var> {
        self.params
            .iter()
            .filter(|(k, _)| !(freeze_image_encoder && k.starts_with(IMAGE_ENCODER_PREFIX)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Converts examples into batch tensors, checking every size.
    pub fn assemble(&self, inputs: &[&DissimilarityInputs]) -> Result<Batch> {
        let (h, w) = self.spec.input_size;
        for (i, x) in inputs.iter().enumerate() {
            if x.size() != (h, w) {
                return Err(Error::Shape(format!(
                    "dissimilarity input {i} is {:?}, network expects {:?}",
                    x.size(),
                    (h, w)
                )));
            }
            if x.semantic.num_classes() != self.spec.num_classes {
                return Err(Error::Shape(format!(
                    "semantic map has {} classes, network expects {}",
                    x.semantic.num_classes(),
                    self.spec.num_classes
                )));
            }
        }
        let dt = self.dtype();
        let imgs: Vec<_> = inputs.iter().map(|x| x.image.data()).collect();
        let syns: Vec<_> = inputs.iter().map(|x| x.synthesized.data()).collect();
        let uncs: Vec<_> = inputs.iter().map(|x| &x.uncertainty).collect();
        let hots: Vec<_> = inputs.iter().map(|x| x.semantic.one_hot_with_void()).collect();
        let hot_refs: Vec<_> = hots.iter().collect();
        let mut labels = Vec::with_capacity(self.spec.levels());
        for s in self.spec.strides() {
            if s == 1 {
                labels.push(batch3(&hot_refs, dt)?);
                continue;
            }
            let level: Vec<Array3<f32>> = inputs
                .iter()
                .map(|x| Ok(x.semantic.with_ids(nearest(x.semantic.ids(), h / s, w / s))?.one_hot_with_void()))
                .collect::<Result<_>>()?;
            let refs: Vec<_> = level.iter().collect();
            labels.push(batch3(&refs, dt)?);
        }
        Ok(Batch {
            image: batch3(&imgs, dt)?,
            synthesized: batch3(&syns, dt)?,
            semantic: batch3(&hot_refs, dt)?,
            uncertainty: batch3(&uncs, dt)?,
            labels,
        })
    }

    /// Encoder features of the image branch and the synthesized branch. Both
    /// pass through the same weights in one batch.
    pub fn branch_features(&self, batch: &Batch) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let b = batch.image.dim(0)?;
        let both = Tensor::cat(
            &[&self.spec.norm.apply(&batch.image)?, &self.spec.norm.apply(&batch.synthesized)?],
            0,
        )?;
        let feats = self.image_encoder.forward(&both, TapPlacement::BeforePool)?;
        let mut img = Vec::with_capacity(feats.len());
        let mut syn = Vec::with_capacity(feats.len());
        for f in feats {
            img.push(f.narrow(0, 0, b)?);
            syn.push(f.narrow(0, b, b)?);
        }
        Ok((img, syn))
    }

    pub fn forward(&self, batch: &Batch) -> Result<ForwardOutput> {
        let (img_feats, syn_feats) = self.branch_features(batch)?;
        let sem_feats = self.semantic_encoder.forward(&batch.semantic)?;
        let unc_feats = match &self.uncertainty_encoder {
            Some(enc) => Some(enc.forward(&batch.uncertainty)?),
            None => None,
        };
        let mut fusion = Vec::with_capacity(self.spec.levels());
        for (l, conv) in self.fusion.iter().enumerate() {
            let parts = [&img_feats[l], &syn_feats[l], &sem_feats[l]];
            let cat = Tensor::cat(&parts, 1).map_err(|e| Error::Shape(format!("fusion level {l}: {e}")))?;
            let fused = conv.forward(&cat)?;
            fusion.push(match &unc_feats {
                Some(u) => fused
                    .mul(&u[l])
                    .map_err(|e| Error::Shape(format!("fusion level {l}: {e}")))?,
                None => fused,
            });
        }
        let levels = self.spec.levels();
        let mut x = fusion[levels - 1].clone();
        for (i, block) in self.decoder.iter().enumerate() {
            let level = levels - 1 - i;
            if i > 0 {
                x = Tensor::cat(&[&fusion[level], &x], 1)
                    .map_err(|e| Error::Shape(format!("decoder input at level {level}: {e}")))?;
            }
            x = block.forward(&x, &batch.labels[level])?;
        }
        Ok(ForwardOutput { logits: x, fusion })
    }

    /// Anomaly-class probabilities, one map per input at the input resolution.
    pub fn predict(&self, inputs: &[&DissimilarityInputs]) -> Result<Vec<AnomalyScoreMap>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(16) {
            let logits = to_array4(&self.forward(&self.assemble(chunk)?)?.logits)?;
            for l in logits.axis_iter(Axis(0)) {
                out.push(AnomalyScoreMap::new(anomaly_probability(&l.to_owned()))?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path, seed: u64, extra: serde_json::Value) -> Result<()> {
        let mut m = CheckpointManifest::new(Self::KIND, &self.spec, seed, true)?;
        m.extra = extra;
        self.params.save(dir, &m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join(crate::nn::params::MANIFEST_FILE).exists() {
            return Err(Error::Invalid(format!(
                "dissimilarity checkpoint not found at {}",
                dir.display()
            )));
        }
        let m = CheckpointManifest::read(dir)?;
        if m.kind != Self::KIND {
            return Err(Error::Invalid(format!("{} holds a `{}` checkpoint", dir.display(), m.kind)));
        }
        let net = Self::new(serde_json::from_value(m.spec.clone())?, m.seed, DType::F32)?;
        net.params.load(dir)?;
        Ok(net)
    }
}

/// Two-channel softmax, anomaly channel: `1 / (1 + exp(l0 - l1))`.
pub fn anomaly_probability(logits: &Array3<f32>) -> Array2<f32> {
    let l0 = logits.index_axis(Axis(0), 0);
    let l1 = logits.index_axis(Axis(0), 1);
    ndarray::Zip::from(&l0)
        .and(&l1)
        .map_collect(|a, b| (1.0 / (1.0 + ((*a - *b) as f64).exp())) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VOID;

    pub(crate) fn example(spec: &DissimilaritySpec, seed: u64) -> DissimilarityInputs {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = spec.input_size;
        let img = Array3::from_shape_fn((3, h, w), |_| rng.random::<f32>());
        let syn = Array3::from_shape_fn((3, h, w), |_| rng.random::<f32>());
        let c = spec.num_classes as u8;
        let ids = Array2::from_shape_fn((h, w), |_| {
            let v = rng.random_range(0..=c);
            if v == c {
                VOID
            } else {
                v
            }
        });
        let unc = Array3::from_shape_fn((3, h, w), |_| rng.random::<f32>());
        DissimilarityInputs::new(
            RgbImage::new(img).unwrap(),
            RgbImage::new(syn).unwrap(),
            SemanticMap::new(ids, c).unwrap(),
            unc,
        )
        .unwrap()
    }

    fn small_spec() -> DissimilaritySpec {
        DissimilaritySpec::full(3).scaled(16)
    }

    #[test]
    fn output_matches_input_size_and_range() {
        let spec = small_spec();
        let net = init_weights(&spec, 0).unwrap();
        let x = example(&spec, 1);
        let s = net.predict(&[&x]).unwrap().remove(0);
        assert_eq!((s.height(), s.width()), spec.input_size);
        assert!(s.scores().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn fusion_maps_follow_stride_arithmetic() {
        let spec = small_spec();
        let net = init_weights(&spec, 0).unwrap();
        let out = net.forward(&net.assemble(&[&example(&spec, 1)]).unwrap()).unwrap();
        let dims: Vec<_> = out.fusion.iter().map(|f| f.dims().to_vec()).collect();
        assert_eq!(dims, vec![vec![1, 2, 32, 64], vec![1, 4, 16, 32], vec![1, 8, 8, 16], vec![1, 16, 4, 8]]);
    }

    #[test]
    fn same_seed_same_weights_different_seed_differs() {
        let spec = DissimilaritySpec::micro(2);
        let a = init_weights(&spec, 4).unwrap();
        let b = init_weights(&spec, 4).unwrap();
        let c = init_weights(&spec, 5).unwrap();
        let flat = |n: &DissimilarityNet| -> Vec<f32> {
            n.params()
                .iter()
                .flat_map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap())
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn zero_channel_spec_is_rejected() {
        let mut spec = DissimilaritySpec::micro(2);
        spec.encoder_widths[1] = 0;
        assert!(init_weights(&spec, 0).is_err());
    }

    #[test]
    fn zero_uncertainty_zeroes_fusion() {
        let spec = small_spec();
        let net = init_weights(&spec, 2).unwrap();
        let x = example(&spec, 3).with_zero_uncertainty();
        let out = net.forward(&net.assemble(&[&x]).unwrap()).unwrap();
        for f in &out.fusion {
            let v = f.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|a| *a == 0.0));
        }
    }

    #[test]
    fn zero_uncertainty_makes_score_ignore_appearance() {
        let spec = small_spec();
        let net = init_weights(&spec, 2).unwrap();
        let x = example(&spec, 3).with_zero_uncertainty();
        let mut y = example(&spec, 4).with_zero_uncertainty();
        y.semantic = x.semantic.clone();
        let a = net.predict(&[&x]).unwrap().remove(0);
        let b = net.predict(&[&y]).unwrap().remove(0);
        assert_eq!(a, b);
    }

    #[test]
    fn semantic_perturbation_changes_output() {
        let spec = small_spec();
        let net = init_weights(&spec, 2).unwrap();
        let x = example(&spec, 3);
        let mut y = x.clone();
        let mut ids = y.semantic.ids().clone();
        ids[[5, 5]] = (ids[[5, 5]] + 1) % 3;
        y.semantic = y.semantic.with_ids(ids).unwrap();
        let a = net.predict(&[&x]).unwrap().remove(0);
        let b = net.predict(&[&y]).unwrap().remove(0);
        assert_ne!(a, b);
    }

    #[test]
    fn ungated_network_ignores_uncertainty() {
        let mut spec = small_spec();
        spec.uncertainty = UncertaintyMode::Off;
        let net = init_weights(&spec, 2).unwrap();
        let x = example(&spec, 3);
        let a = net.predict(&[&x]).unwrap().remove(0);
        let b = net.predict(&[&x.with_zero_uncertainty()]).unwrap().remove(0);
        assert_eq!(a, b);
        assert!(a.scores().iter().any(|v| *v != a.scores()[[0, 0]]));
    }

    #[test]
    fn wrong_size_input_is_rejected() {
        let net = init_weights(&small_spec(), 0).unwrap();
        let x = example(&DissimilaritySpec::micro(3), 0);
        assert!(net.predict(&[&x]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_missing_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let net = init_weights(&spec, 9).unwrap();
        net.save(dir.path(), 9, serde_json::Value::Null).unwrap();
        let back = DissimilarityNet::load(dir.path()).unwrap();
        let x = example(&spec, 1);
        assert_eq!(net.predict(&[&x]).unwrap(), back.predict(&[&x]).unwrap());
        let err = DissimilarityNet::load(&dir.path().join("nope")).unwrap_err();
        assert!(err.to_string().contains("dissimilarity checkpoint not found"));
    }
}
