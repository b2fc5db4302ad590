//! Orchestration of whole runs: dataset, backbones, training-data
//! generation, dissimilarity training, ensemble search, inference and
//! evaluation, with every artifact cached below one output directory.
//!
//! Layout of the output directory:
//!
//! ```text
//! run.json                       artifact hash guarding the caches
//! config.txt                     effective configuration
//! dataset/                       generated shapes dataset (unless `dataset` is set)
//! backbones/                     toy segmenter + synthesizer
//! features/                      feature-extractor weights
//! datagen/<split>-mix<m>-seed<s> generated training examples
//! seed-<s>/nets/<net>/           dissimilarity checkpoints
//! seed-<s>/ensemble.json         grid search and learned weights
//! seed-<s>/eval/<variant>.json   anomaly-test evaluations
//! ablation/                      ablation tables and reports
//! ```

pub mod config;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::DType;
use log::{info, warn};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backbones::{
    load_toy_backbones, train_toy_backbones, BackboneChoice, BackboneReport, FeatureExtractor, PrecomputedBackbone,
    SegmentationBackbone, SynthesisBackbone, ToySegmenter, ToySynthesizer,
};
use crate::data::io::{save_gray, save_image};
use crate::data::tensor_file::{save_tensor, TensorData};
use crate::data::{generate_shapes_dataset, load_image, AnomalyLabelMap, AnomalyScoreMap, DatasetIndex, RgbImage, Split};
use crate::datagen::{self, GeneratedSample};
use crate::dissimilarity::{self, DissimilarityInputs, DissimilarityNet, TrainLog, UncertaintyMode};
use crate::ensemble::{
    combine, grid_search, learn_weights, EnsembleHead, EnsembleWeights, GridPoint, GridSearch, LearnMode,
    LearnedWeights, MapSet, PixelTable,
};
use crate::error::{Error, Result};
use crate::framework::{upsample, ImageAnalysis, Stages, CHUNK};
use crate::metrics::{curves, evaluate_with, EvalResult};
use crate::nn::params::MANIFEST_FILE;
use crate::nn::CheckpointManifest;
use crate::uncertainty::{softmax_distance, softmax_entropy};

pub use config::{EnsembleConfig, EvalConfig, FeaturesConfig, Limits, NetConfig, RunConfig};
pub use report::{emit_report, write_overlays, AblationReport, Stat, VariantSummary, REPORT_FILES};

/// Names of the six per-image stages, in execution order.
pub const STAGES: [&str; 6] = ["segment", "uncertainty", "synthesize", "perceptual", "dissimilarity", "ensemble"];

const RUN_FILE: &str = "run.json";
const ENSEMBLE_FILE: &str = "ensemble.json";
/// Points kept per exported PR or ROC curve.
const CURVE_POINTS: usize = 512;

/// Ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoEnsemble,
    NoUncertainty,
    NoDatagenNoUncertainty,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoEnsemble,
        Variant::NoUncertainty,
        Variant::NoDatagenNoUncertainty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEnsemble => "no-ensemble",
            Variant::NoUncertainty => "no-uncertainty",
            Variant::NoDatagenNoUncertainty => "no-datagen-no-uncertainty",
        }
    }

    /// Row label in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "Full Framework",
            Variant::NoEnsemble => "w/o ensemble",
            Variant::NoUncertainty => "w/o unc. maps",
            Variant::NoDatagenNoUncertainty => "w/o data generator & w/o unc. maps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown configuration `{s}`; valid names: {}", names.join(", ")))
        })
    }

    pub fn net(self) -> NetKind {
        match self {
            Variant::Full | Variant::NoEnsemble => NetKind::Full,
            Variant::NoUncertainty => NetKind::NoUncertainty,
            Variant::NoDatagenNoUncertainty => NetKind::NoDatagen,
        }
    }
}

/// The distinct dissimilarity networks behind the variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetKind {
    /// Gated uncertainty fusion, mixed swap and void examples.
    Full,
    /// No uncertainty branch, zero uncertainty stack.
    NoUncertainty,
    /// As above, trained on swap examples only.
    NoDatagen,
}

impl NetKind {
    pub fn name(self) -> &'static str {
        match self {
            NetKind::Full => "full",
            NetKind::NoUncertainty => "no-uncertainty",
            NetKind::NoDatagen => "no-datagen",
        }
    }

    pub fn mode(self) -> UncertaintyMode {
        match self {
            NetKind::Full => UncertaintyMode::Gated,
            _ => UncertaintyMode::Off,
        }
    }

    /// Share of swap examples in the training set.
    pub fn mix(self, configured: f64) -> f64 {
        match self {
            NetKind::NoDatagen => 1.0,
            _ => configured,
        }
    }

    pub fn zero_uncertainty(self) -> bool {
        self != NetKind::Full
    }
}

/// Segmentation and synthesis networks in use.
pub enum Backbones {
    Toy {
        segmenter: ToySegmenter,
        synthesizer: ToySynthesizer,
        report: BackboneReport,
    },
    Precomputed(PrecomputedBackbone),
}

impl Backbones {
    pub fn segmenter(&self) -> &dyn SegmentationBackbone {
        match self {
            Backbones::Toy { segmenter, .. } => segmenter,
            Backbones::Precomputed(p) => p,
        }
    }

    pub fn synthesizer(&self) -> &dyn SynthesisBackbone {
        match self {
            Backbones::Toy { synthesizer, .. } => synthesizer,
            Backbones::Precomputed(p) => p,
        }
    }

    pub fn report(&self) -> Option<&BackboneReport> {
        match self {
            Backbones::Toy { report, .. } => Some(report),
            Backbones::Precomputed(_) => None,
        }
    }
}

/// A trained network with its training history.
pub struct TrainedNet {
    pub net: DissimilarityNet,
    pub log: TrainLog,
    /// Ensemble weights learned jointly with the network, if requested.
    pub joint_weights: Option<EnsembleWeights>,
}

/// Ensemble weights chosen on void-labelled validation examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRecord {
    pub seed: u64,
    pub validation_images: usize,
    pub validation_pixels: usize,
    pub search: GridSearch,
    /// Each map alone, in ensemble order.
    pub single_maps: Vec<GridPoint>,
    pub learned: LearnedWeights,
}

impl EnsembleRecord {
    pub fn dissimilarity_only(&self) -> &GridPoint {
        &self.single_maps[0]
    }

    pub fn best_single_ap(&self) -> f64 {
        self.single_maps.iter().map(|p| p.ap).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Anomaly-test images pushed through the backbone stages once.
pub struct EvalSet {
    pub stems: Vec<String>,
    pub images: Vec<RgbImage>,
    pub inputs: Vec<DissimilarityInputs>,
    /// Full-resolution labels: VOID ground truth is the anomaly.
    pub labels: Vec<AnomalyLabelMap>,
}

impl EvalSet {
    /// Fraction of non-ignored pixels that are anomalous.
    pub fn positive_rate(&self) -> f64 {
        use crate::data::AnomalyLabel;
        let (p, n) = self.labels.iter().fold((0, 0), |(p, n), l| {
            (p + l.count(AnomalyLabel::Anomaly), n + l.count(AnomalyLabel::Inlier))
        });
        p as f64 / (p + n).max(1) as f64
    }
}

/// Metrics of one variant and seed on the anomaly-test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub name: String,
    pub seed: u64,
    pub weights: EnsembleWeights,
    pub result: EvalResult,
    /// `(recall, precision)` points, thinned.
    pub pr_curve: Vec<(f64, f64)>,
    /// `(fpr, tpr)` points, thinned.
    pub roc_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// One stage of an inference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    /// Directory of per-image outputs; kept stages only.
    pub artifact: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub variant: Variant,
    pub weights: EnsembleWeights,
    /// Processed images, sorted.
    pub stems: Vec<String>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    /// Every artifact the manifest names.
    pub fn artifacts(&self) -> Vec<&Path> {
        self.stages.iter().filter_map(|s| s.artifact.as_deref()).collect()
    }
}

/// Images for [`Pipeline::run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Split(Split),
    Images(Vec<PathBuf>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferRequest {
    pub seed: u64,
    pub variant: Variant,
    pub source: Source,
    pub out_dir: PathBuf,
    pub keep_intermediates: bool,
    pub limit: Option<usize>,
}

/// Score maps by stem, plus the run manifest.
pub struct InferOutput {
    pub scores: Vec<(String, AnomalyScoreMap)>,
    pub manifest: RunManifest,
}

#[derive(Serialize, Deserialize)]
struct RunStamp {
    artifact_hash: String,
    code_version: String,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    timings: std::cell::RefCell<Vec<StageTiming>>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn stage<T>(name: &str, trail: &[PathBuf], r: Result<T>) -> Result<T> {
    r.map_err(|e| {
        let trail: Vec<_> = trail.iter().map(|p| p.display().to_string()).collect();
        let message = if trail.is_empty() {
            e.to_string()
        } else {
            format!("{e} (artifacts written so far: {})", trail.join(", "))
        };
        Error::Stage {
            stage: name.into(),
            message,
        }
    })
}

/// Evenly spaced subset of `points`, always keeping the last one.
fn thin(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    if points.len() <= CURVE_POINTS {
        return points;
    }
    let last = points.len() - 1;
    (0..CURVE_POINTS).map(|i| points[i * last / (CURVE_POINTS - 1)]).collect()
}

fn channel_map(inputs: &DissimilarityInputs, c: usize) -> Result<AnomalyScoreMap> {
    AnomalyScoreMap::new(inputs.uncertainty.index_axis(Axis(0), c).mapv(|v| v.clamp(0.0, 1.0)))
}

/// Dissimilarity scores paired with the three dispersion maps.
pub fn map_sets(net: &DissimilarityNet, inputs: &[DissimilarityInputs], zero_uncertainty: bool) -> Result<Vec<MapSet>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let zeroed: Vec<DissimilarityInputs>;
        let refs: Vec<&DissimilarityInputs> = if zero_uncertainty {
            zeroed = chunk.iter().map(|x| x.with_zero_uncertainty()).collect();
            zeroed.iter().collect()
        } else {
            chunk.iter().collect()
        };
        for (x, d) in chunk.iter().zip(net.predict(&refs)?) {
            out.push([d, channel_map(x, 0)?, channel_map(x, 1)?, channel_map(x, 2)?]);
        }
    }
    Ok(out)
}

impl Pipeline {
    /// Validates `cfg` and claims its output directory. A directory holding
    /// artifacts of an incompatible configuration is refused.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        mkdir(&cfg.output)?;
        let stamp = RunStamp {
            artifact_hash: artifact_hash(&cfg)?,
            code_version: env!("CARGO_PKG_VERSION").into(),
        };
        let path = cfg.output.join(RUN_FILE);
        if path.exists() {
            let old: RunStamp = read_json(&path)?;
            if old.artifact_hash != stamp.artifact_hash {
                return Err(Error::Config(format!(
                    "{} holds artifacts of a different configuration; use another output directory",
                    cfg.output.display()
                )));
            }
        } else {
            write_json(&path, &stamp)?;
        }
        let text_path = cfg.output.join("config.txt");
        fs::write(&text_path, cfg.to_text()?).map_err(|e| Error::io(&text_path, e))?;
        Ok(Pipeline {
            cfg,
            timings: Default::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.cfg.output
    }

    /// Wall-clock seconds per stage recorded so far.
    pub fn timings(&self) -> Vec<StageTiming> {
        self.timings.borrow().clone()
    }

    fn timed<T>(&self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f();
        self.timings.borrow_mut().push(StageTiming {
            stage: name.into(),
            seconds: t.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root().join(format!("seed-{seed}"))
    }

    pub fn net_dir(&self, seed: u64, kind: NetKind) -> PathBuf {
        self.seed_dir(seed).join("nets").join(kind.name())
    }

    pub fn datagen_dir(&self, split: Split, mix: f64, seed: u64) -> PathBuf {
        self.root().join("datagen").join(format!("{}-mix{mix}-seed{seed}", split.dir_name()))
    }

    pub fn eval_path(&self, seed: u64, variant: Variant) -> PathBuf {
        self.seed_dir(seed).join("eval").join(format!("{}.json", variant.name()))
    }

    fn backbone_dir(&self) -> PathBuf {
        self.root().join("backbones")
    }

    /// Renders the shapes dataset, replacing any previous one.
    pub fn make_dataset(&self) -> Result<DatasetIndex> {
        self.timed("dataset", || generate_shapes_dataset(&self.cfg.shapes, self.cfg.dataset_seed, self.cfg.dataset_root()))
    }

    /// Opens the dataset, rendering it first when it is missing and the
    /// run uses the default location.
    pub fn dataset(&self) -> Result<DatasetIndex> {
        let root = self.cfg.dataset_root();
        if root.join(crate::data::dataset::INDEX_FILE).exists() || self.cfg.dataset.is_some() {
            DatasetIndex::open(root)
        } else {
            self.make_dataset()
        }
    }

    /// Trains the toy backbones (or opens the precomputed store).
    pub fn train_backbones(&self, index: &DatasetIndex) -> Result<Backbones> {
        match self.cfg.backbone_choice()? {
            BackboneChoice::Toy => self.timed("backbones", || {
                let (segmenter, synthesizer, report) =
                    train_toy_backbones(index, &self.cfg.toy, self.cfg.backbone_seed, Some(&self.backbone_dir()))?;
                if !report.meets_accuracy_target || !report.meets_recon_target {
                    warn!(
                        "toy backbones below target: pixel accuracy {:.3}, reconstruction error {:.3}",
                        report.pixel_accuracy, report.recon_error
                    );
                }
                Ok(Backbones::Toy {
                    segmenter,
                    synthesizer,
                    report,
                })
            }),
            BackboneChoice::Precomputed(dir) => Ok(Backbones::Precomputed(PrecomputedBackbone::open(dir)?)),
        }
    }

    /// Loads backbones; toy backbones are trained first when an index is
    /// given and no checkpoint exists.
    pub fn backbones(&self, train_on: Option<&DatasetIndex>) -> Result<Backbones> {
        match self.cfg.backbone_choice()? {
            BackboneChoice::Toy => {
                let dir = self.backbone_dir();
                if dir.join(crate::backbones::toy::REPORT_FILE).exists() {
                    let (segmenter, synthesizer, report) = load_toy_backbones(&dir)?;
                    Ok(Backbones::Toy {
                        segmenter,
                        synthesizer,
                        report,
                    })
                } else if let Some(index) = train_on {
                    self.train_backbones(index)
                } else {
                    Err(Error::Invalid(format!("backbone checkpoint not found at {}", dir.display())))
                }
            }
            BackboneChoice::Precomputed(dir) => Ok(Backbones::Precomputed(PrecomputedBackbone::open(dir)?)),
        }
    }

    /// Images of `source` sorted by stem, at most `limit` of them.
    pub fn load_source(&self, source: &Source, limit: Option<usize>) -> Result<Vec<(String, RgbImage)>> {
        let mut items: Vec<(String, RgbImage)> = match source {
            Source::Split(split) => {
                let ix = self.dataset()?;
                ix.split(*split)
                    .map(|r| Ok((r.stem.clone(), ix.load_sample(r)?.image)))
                    .collect::<Result<_>>()?
            }
            Source::Images(paths) => paths
                .iter()
                .map(|p| {
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    Ok((stem, load_image(p)?))
                })
                .collect::<Result<_>>()?,
        };
        items.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(n) = limit {
            items.truncate(n);
        }
        if items.is_empty() {
            return Err(Error::Invalid("no images to process".into()));
        }
        Ok(items)
    }

    /// Entropy, distance and perceptual maps as `.tsr` stacks (full
    /// resolution for the first two) and grayscale PNGs below `out`.
    pub fn export_uncertainty(&self, source: &Source, out: &Path, limit: Option<usize>) -> Result<Vec<String>> {
        let backbones = self.backbones(None)?;
        let fx = self.features()?;
        let stages = self.stages(&backbones, &fx)?;
        let items = self.load_source(source, limit)?;
        mkdir(out)?;
        for chunk in items.chunks(CHUNK) {
            let stems: Vec<&str> = chunk.iter().map(|(s, _)| s.as_str()).collect();
            let images: Vec<&RgbImage> = chunk.iter().map(|(_, i)| i).collect();
            for (s, r) in stems.iter().zip(stages.run(&stems, &images)?) {
                let maps = [
                    ("entropy", r.analysis.entropy.to_f32()),
                    ("distance", r.analysis.distance.to_f32()),
                    ("perceptual", r.perceptual.to_f32()),
                ];
                for (name, m) in &maps {
                    save_gray(out.join(format!("{s}.{name}.png")), m)?;
                    save_tensor(out.join(format!("{s}.{name}.tsr")), &TensorData::F32(m.clone().into_dyn()))?;
                }
            }
        }
        Ok(items.into_iter().map(|(s, _)| s).collect())
    }

    /// External weights when configured, else seeded random weights
    /// persisted under `features/`.
    pub fn features(&self) -> Result<FeatureExtractor> {
        let fx = match &self.cfg.features.weights {
            Some(dir) => FeatureExtractor::load(dir)?,
            None => {
                let dir = self.root().join("features");
                if dir.join(MANIFEST_FILE).exists() {
                    FeatureExtractor::load(&dir)?
                } else {
                    let fx = FeatureExtractor::random(self.cfg.extractor_spec()?, self.cfg.features.seed)?;
                    fx.save(&dir, self.cfg.features.seed)?;
                    fx
                }
            }
        };
        let want = self.cfg.ladder()?.dissimilarity;
        if fx.spec().input_size != want {
            return Err(Error::Config(format!(
                "feature extractor expects {:?}, the dissimilarity resolution is {want:?}",
                fx.spec().input_size
            )));
        }
        Ok(fx)
    }

    pub fn stages<'a>(&self, backbones: &'a Backbones, features: &'a FeatureExtractor) -> Result<Stages<'a>> {
        Stages::new(
            backbones.segmenter(),
            backbones.synthesizer(),
            features,
            self.cfg.perceptual.clone(),
            self.cfg.ladder()?,
        )
    }

    /// Generated examples from `split`, cached on disk.
    pub fn generated(
        &self,
        index: &DatasetIndex,
        stages: &Stages,
        split: Split,
        mix: f64,
        seed: u64,
    ) -> Result<Vec<GeneratedSample>> {
        let dir = self.datagen_dir(split, mix, seed);
        if dir.join(datagen::MANIFEST).exists() {
            return Ok(datagen::load_training_set(&dir)?.0);
        }
        let limit = match split {
            Split::Train => self.cfg.limits.train,
            _ => self.cfg.limits.val,
        };
        let cfg = datagen::DatagenConfig {
            mix,
            ..self.cfg.datagen.clone()
        };
        self.timed("datagen", || {
            let (samples, log) = datagen::build_training_set(index, split, stages, &cfg, seed, limit)?;
            datagen::save_training_set(&dir, &samples, &log)?;
            Ok(samples)
        })
    }

    /// Trains (or loads) the network of `kind` for `seed`.
    pub fn train_dissimilarity(
        &self,
        index: &DatasetIndex,
        stages: &Stages,
        seed: u64,
        kind: NetKind,
    ) -> Result<TrainedNet> {
        let dir = self.net_dir(seed, kind);
        if dir.join(MANIFEST_FILE).exists() {
            return load_trained(&dir);
        }
        let mix = kind.mix(self.cfg.datagen.mix);
        let prepare = |samples: Vec<GeneratedSample>| -> Vec<(DissimilarityInputs, AnomalyLabelMap)> {
            datagen::as_pairs(samples)
                .into_iter()
                .map(|(x, l)| if kind.zero_uncertainty() { (x.with_zero_uncertainty(), l) } else { (x, l) })
                .collect()
        };
        let train_set = prepare(self.generated(index, stages, Split::Train, mix, seed)?);
        let val_set = prepare(self.generated(index, stages, Split::Val, mix, seed)?);
        let spec = self.cfg.net_spec(stages.num_classes(), kind.mode())?;
        self.timed("train", || {
            info!("training {} network for seed {seed} on {} examples", kind.name(), train_set.len());
            let net = DissimilarityNet::new(spec, seed, DType::F32)?;
            let joint = kind == NetKind::Full && self.cfg.ensemble.learn.mode == LearnMode::Joint;
            let (log, joint_weights) = if joint {
                let head = EnsembleHead::new(DType::F32)?;
                let log = dissimilarity::train_joint(&net, &head, &train_set, &val_set, &self.cfg.train, seed)?;
                (log, Some(head.weights()?))
            } else {
                (dissimilarity::train(&net, &train_set, &val_set, &self.cfg.train, seed)?, None)
            };
            net.save(&dir, seed, json!({ "log": log, "joint_weights": joint_weights }))?;
            Ok(TrainedNet {
                net,
                log,
                joint_weights,
            })
        })
    }

    /// Loads a trained network without training.
    pub fn load_dissimilarity(&self, seed: u64, kind: NetKind) -> Result<TrainedNet> {
        let dir = self.net_dir(seed, kind);
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Error::Invalid(format!("dissimilarity checkpoint not found at {}", dir.display())));
        }
        load_trained(&dir)
    }

    /// Grid search (and weight learning) on void-labelled validation
    /// examples scored by the full network; cached per seed.
    pub fn ensemble_search(
        &self,
        index: &DatasetIndex,
        stages: &Stages,
        seed: u64,
        full: &TrainedNet,
    ) -> Result<EnsembleRecord> {
        let path = self.seed_dir(seed).join(ENSEMBLE_FILE);
        if path.exists() {
            return read_json(&path);
        }
        let val = self.generated(index, stages, Split::Val, 0.0, seed)?;
        self.timed("ensemble", || {
            let inputs: Vec<_> = val.iter().map(|g| g.inputs.clone()).collect();
            let labels: Vec<_> = val.iter().map(|g| g.labels.clone()).collect();
            let maps = map_sets(&full.net, &inputs, false)?;
            let table = PixelTable::new(&maps, &labels)?;
            let search = grid_search(&table, self.cfg.ensemble.step, self.cfg.ensemble.objective)?;
            let single_maps = (0..4).map(|i| table.score(&EnsembleWeights::corner(i))).collect::<Result<Vec<_>>>()?;
            let learned = match full.joint_weights {
                Some(weights) => LearnedWeights {
                    weights,
                    mode: LearnMode::Joint,
                    losses: full.log.epochs.iter().map(|e| e.train_loss).collect(),
                },
                None => learn_weights(&table, &self.cfg.ensemble.learn)?,
            };
            let record = EnsembleRecord {
                seed,
                validation_images: val.len(),
                validation_pixels: table.len(),
                search,
                single_maps,
                learned,
            };
            info!(
                "seed {seed}: ensemble weights {:?}, validation AP {:.4} (dissimilarity alone {:.4})",
                record.search.best.weights.get(),
                record.search.best.ap,
                record.dissimilarity_only().ap
            );
            write_json(&path, &record)?;
            Ok(record)
        })
    }

    /// Saved ensemble weights for `seed`.
    pub fn load_ensemble(&self, seed: u64) -> Result<EnsembleRecord> {
        let path = self.seed_dir(seed).join(ENSEMBLE_FILE);
        if !path.exists() {
            return Err(Error::Invalid(format!("ensemble weights not found at {}", path.display())));
        }
        read_json(&path)
    }

    /// Runs the backbone stages over the anomaly-test split.
    pub fn eval_set(&self, index: &DatasetIndex, stages: &Stages) -> Result<EvalSet> {
        self.timed("eval-inputs", || {
            let mut records: Vec<_> = index.split(Split::AnomalyTest).collect();
            if let Some(n) = self.cfg.eval.limit {
                records.truncate(n);
            }
            if records.is_empty() {
                return Err(Error::Invalid("the anomaly-test split is empty".into()));
            }
            let mut set = EvalSet {
                stems: Vec::new(),
                images: Vec::new(),
                inputs: Vec::new(),
                labels: Vec::new(),
            };
            for chunk in records.chunks(CHUNK) {
                let samples = chunk.iter().map(|r| index.load_sample(r)).collect::<Result<Vec<_>>>()?;
                let stems: Vec<&str> = samples.iter().map(|s| s.stem.as_str()).collect();
                let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
                for (s, r) in samples.iter().zip(stages.run(&stems, &images)?) {
                    set.stems.push(s.stem.clone());
                    set.images.push(s.image.clone());
                    set.inputs.push(r.inputs);
                    set.labels.push(AnomalyLabelMap::from_void(&s.semantic));
                }
            }
            Ok(set)
        })
    }

    /// Ensemble scores upsampled to the image resolution and evaluated.
    pub fn evaluate_maps(
        &self,
        name: &str,
        seed: u64,
        maps: &[MapSet],
        weights: EnsembleWeights,
        set: &EvalSet,
    ) -> Result<(Evaluation, Vec<AnomalyScoreMap>)> {
        let size = self.cfg.ladder()?.image;
        let scores = maps
            .iter()
            .map(|m| AnomalyScoreMap::new(upsample(combine(m, &weights)?.scores(), size)))
            .collect::<Result<Vec<_>>>()?;
        let result = evaluate_with(&scores, &set.labels, self.cfg.eval.pooling)?;
        let (c, _) = curves(&scores, &set.labels)?;
        let eval = Evaluation {
            name: name.into(),
            seed,
            weights,
            result,
            pr_curve: thin(c.pr_curve()),
            roc_curve: thin(c.roc_curve()),
        };
        Ok((eval, scores))
    }

    /// Evaluates `variants` for one seed. With `train` set, missing
    /// networks and ensemble weights are produced first; otherwise they
    /// must exist.
    pub fn evaluate_seed(
        &self,
        index: &DatasetIndex,
        stages: &Stages,
        set: &EvalSet,
        seed: u64,
        variants: &[Variant],
        train: bool,
    ) -> Result<(Vec<(Variant, Evaluation)>, Option<EnsembleRecord>)> {
        let mut nets: Vec<NetKind> = variants.iter().map(|v| v.net()).collect();
        nets.sort();
        nets.dedup();
        let mut out = Vec::new();
        let mut ensemble = None;
        for kind in nets {
            let trained = if train {
                self.train_dissimilarity(index, stages, seed, kind)?
            } else {
                self.load_dissimilarity(seed, kind)?
            };
            if kind == NetKind::Full && variants.contains(&Variant::Full) {
                ensemble = Some(if train {
                    self.ensemble_search(index, stages, seed, &trained)?
                } else {
                    self.load_ensemble(seed)?
                });
            }
            let maps = self.timed("evaluate", || map_sets(&trained.net, &set.inputs, kind.zero_uncertainty()))?;
            for &v in variants.iter().filter(|v| v.net() == kind) {
                let weights = match (v, &ensemble) {
                    (Variant::Full, Some(r)) => r.search.best.weights,
                    _ => EnsembleWeights::corner(0),
                };
                let (eval, _) = self.timed("evaluate", || self.evaluate_maps(v.name(), seed, &maps, weights, set))?;
                info!("seed {seed} {}: AP {:.4} FPR95 {:.4}", v.name(), eval.result.ap, eval.result.fpr95);
                write_json(&self.eval_path(seed, v), &eval)?;
                out.push((v, eval));
            }
        }
        out.sort_by_key(|(v, _)| *v);
        Ok((out, ensemble))
    }

    /// Trains what is missing and evaluates `variants` for every seed;
    /// writes `ablation/ablation.json`, `ablation/table.md` and the report
    /// files.
    pub fn run_ablation(&self, variants: &[Variant]) -> Result<AblationReport> {
        if variants.is_empty() {
            return Err(Error::Config("no ablation configurations selected".into()));
        }
        let index = self.dataset()?;
        let backbones = self.backbones(Some(&index))?;
        let fx = self.features()?;
        let stages = self.stages(&backbones, &fx)?;
        let set = self.eval_set(&index, &stages)?;
        let mut evaluations = Vec::new();
        let mut ensembles = Vec::new();
        for &seed in &self.cfg.seeds {
            let (evals, ensemble) = self.evaluate_seed(&index, &stages, &set, seed, variants, true)?;
            evaluations.extend(evals);
            ensembles.extend(ensemble);
        }
        let report = AblationReport::build(
            self.cfg.hash()?,
            &self.cfg.seeds,
            set.positive_rate(),
            variants,
            &evaluations,
            &ensembles,
            self.timings(),
        )?;
        let dir = self.root().join("ablation");
        write_json(&dir.join("ablation.json"), &report)?;
        let table = dir.join("table.md");
        fs::write(&table, report.table()).map_err(|e| Error::io(&table, e))?;
        let evals: Vec<Evaluation> = evaluations.into_iter().map(|(_, e)| e).collect();
        emit_report(&evals, &dir)?;
        Ok(report)
    }

    /// Heat overlays of the first `count` anomaly-test images for one
    /// seed and variant.
    pub fn overlays(&self, seed: u64, variant: Variant, count: usize, dir: &Path) -> Result<Vec<PathBuf>> {
        let index = self.dataset()?;
        let backbones = self.backbones(None)?;
        let fx = self.features()?;
        let stages = self.stages(&backbones, &fx)?;
        let mut cfg = self.cfg.clone();
        cfg.eval.limit = Some(count.min(cfg.eval.limit.unwrap_or(usize::MAX)));
        let limited = Pipeline {
            cfg,
            timings: Default::default(),
        };
        let set = limited.eval_set(&index, &stages)?;
        let trained = self.load_dissimilarity(seed, variant.net())?;
        let weights = match variant {
            Variant::Full => self.load_ensemble(seed)?.search.best.weights,
            _ => EnsembleWeights::corner(0),
        };
        let maps = map_sets(&trained.net, &set.inputs, variant.net().zero_uncertainty())?;
        let (_, scores) = self.evaluate_maps(variant.name(), seed, &maps, weights, &set)?;
        let items: Vec<_> = (0..set.stems.len())
            .map(|i| (set.stems[i].as_str(), &set.images[i], &scores[i], &set.labels[i]))
            .collect();
        write_overlays(dir, &items)
    }

    /// Evaluations written by earlier runs, ordered by seed then variant.
    pub fn collect_evaluations(&self) -> Result<Vec<Evaluation>> {
        let mut out = Vec::new();
        for &seed in &self.cfg.seeds {
            for v in Variant::ALL {
                let p = self.eval_path(seed, v);
                if p.exists() {
                    out.push(read_json(&p)?);
                }
            }
        }
        Ok(out)
    }

    /// Full inference over a split or explicit image files. Requires trained
    /// backbones, network and (for the full variant) ensemble weights.
    pub fn run_pipeline(&self, req: &InferRequest) -> Result<InferOutput> {
        let mut trail: Vec<PathBuf> = Vec::new();
        let setup = || -> Result<_> {
            let trained = self.load_dissimilarity(req.seed, req.variant.net())?;
            let weights = match req.variant {
                Variant::Full => self.load_ensemble(req.seed)?.search.best.weights,
                _ => EnsembleWeights::corner(0),
            };
            let backbones = self.backbones(None)?;
            let fx = self.features()?;
            let items = self.load_source(&req.source, req.limit)?;
            Ok((trained, weights, backbones, fx, items))
        };
        let (trained, weights, backbones, fx, items) = stage("setup", &trail, setup())?;
        let stages = stage("setup", &trail, self.stages(&backbones, &fx))?;

        let out = &req.out_dir;
        let dirs: Vec<PathBuf> = STAGES
            .iter()
            .map(|s| out.join(if *s == "ensemble" { "scores" } else { s }))
            .collect();
        for (i, d) in dirs.iter().enumerate() {
            if req.keep_intermediates || i == STAGES.len() - 1 {
                mkdir(d)?;
            }
        }
        let mut seconds = [0.0f64; 6];
        let mut scores = Vec::with_capacity(items.len());
        let image_size = stages.ladder.image;
        for chunk in items.chunks(CHUNK) {
            let stems: Vec<&str> = chunk.iter().map(|(s, _)| s.as_str()).collect();
            let images: Vec<&RgbImage> = chunk.iter().map(|(_, i)| i).collect();
            let keep = req.keep_intermediates;

            let t = Instant::now();
            let softmax = stage(STAGES[0], &trail, stages.segmenter.segment_batch(&stems, &images))?;
            seconds[0] += t.elapsed().as_secs_f64();
            if keep {
                for (s, m) in stems.iter().zip(&softmax) {
                    save_tensor(dirs[0].join(format!("{s}.tsr")), &TensorData::F32(m.probs().clone().into_dyn()))?;
                }
            }

            let t = Instant::now();
            let analyses = stage(
                STAGES[1],
                &trail,
                softmax
                    .into_iter()
                    .map(|softmax| {
                        Ok(ImageAnalysis {
                            predicted: softmax.argmax(),
                            entropy: softmax_entropy(&softmax)?,
                            distance: softmax_distance(&softmax)?,
                            softmax,
                        })
                    })
                    .collect::<Result<Vec<_>>>(),
            )?;
            seconds[1] += t.elapsed().as_secs_f64();
            if keep {
                for (s, a) in stems.iter().zip(&analyses) {
                    let planes = [a.entropy.to_f32(), a.distance.to_f32()];
                    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
                    let stacked: Array3<f32> = ndarray::stack(Axis(0), &views).expect("equal shapes");
                    save_tensor(dirs[1].join(format!("{s}.tsr")), &TensorData::F32(stacked.into_dyn()))?;
                }
            }

            let t = Instant::now();
            let preds: Vec<_> = analyses.iter().map(|a| &a.predicted).collect();
            let synthesized = stage(STAGES[2], &trail, stages.synthesize(&stems, &preds))?;
            seconds[2] += t.elapsed().as_secs_f64();
            if keep {
                for (s, img) in stems.iter().zip(&synthesized) {
                    save_image(dirs[2].join(format!("{s}.png")), img)?;
                }
            }

            let t = Instant::now();
            let srefs: Vec<_> = synthesized.iter().collect();
            let perceptual = stage(STAGES[3], &trail, stages.perceptual(&images, &srefs))?;
            seconds[3] += t.elapsed().as_secs_f64();
            if keep {
                for (s, p) in stems.iter().zip(&perceptual) {
                    save_tensor(dirs[3].join(format!("{s}.tsr")), &TensorData::F32(p.to_f32().into_dyn()))?;
                }
            }

            let t = Instant::now();
            let inputs = stage(
                STAGES[4],
                &trail,
                analyses
                    .iter()
                    .zip(&synthesized)
                    .zip(&perceptual)
                    .zip(&images)
                    .map(|(((a, syn), p), img)| stages.inputs(img, syn, &a.predicted, &a.entropy, &a.distance, p))
                    .collect::<Result<Vec<_>>>(),
            )?;
            let maps = stage(STAGES[4], &trail, map_sets(&trained.net, &inputs, req.variant.net().zero_uncertainty()))?;
            seconds[4] += t.elapsed().as_secs_f64();
            if keep {
                for (s, m) in stems.iter().zip(&maps) {
                    save_tensor(dirs[4].join(format!("{s}.tsr")), &TensorData::F32(m[0].scores().clone().into_dyn()))?;
                }
            }

            let t = Instant::now();
            for (s, m) in stems.iter().zip(&maps) {
                let combined = stage(STAGES[5], &trail, combine(m, &weights))?;
                let full = AnomalyScoreMap::new(upsample(combined.scores(), image_size))?;
                save_tensor(dirs[5].join(format!("{s}.tsr")), &TensorData::F32(full.scores().clone().into_dyn()))?;
                save_gray(dirs[5].join(format!("{s}.png")), full.scores())?;
                scores.push((s.to_string(), full));
            }
            seconds[5] += t.elapsed().as_secs_f64();
            if trail.is_empty() && keep {
                trail.extend(dirs[..5].iter().cloned());
            }
        }

        let manifest = RunManifest {
            config_hash: self.cfg.hash()?,
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed: req.seed,
            variant: req.variant,
            weights,
            stems: items.iter().map(|(s, _)| s.clone()).collect(),
            stages: STAGES
                .iter()
                .zip(seconds)
                .zip(&dirs)
                .enumerate()
                .map(|(i, ((name, secs), dir))| StageRecord {
                    name: name.to_string(),
                    seconds: secs,
                    artifact: (req.keep_intermediates || i == STAGES.len() - 1).then(|| dir.clone()),
                })
                .collect(),
        };
        write_json(&out.join(RunManifest::FILE), &manifest)?;
        Ok(InferOutput { scores, manifest })
    }
}

fn load_trained(dir: &Path) -> Result<TrainedNet> {
    let net = DissimilarityNet::load(dir)?;
    let extra = CheckpointManifest::read(dir)?.extra;
    Ok(TrainedNet {
        net,
        log: serde_json::from_value(extra["log"].clone())?,
        joint_weights: serde_json::from_value(extra["joint_weights"].clone())?,
    })
}

/// Hash of the settings that shape cached artifacts. Seeds and evaluation
/// options are excluded: artifacts are stored per seed and evaluations are
/// recomputed on every run.
fn artifact_hash(cfg: &RunConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.seeds.clear();
    c.output = PathBuf::new();
    c.eval = EvalConfig::default();
    c.hash()
}
