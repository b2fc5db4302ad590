//! Dissimilarity training data from two sources: instances whose ground-truth
//! class is swapped before re-synthesis, and VOID objects seen through the
//! predicted semantics.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use log::{info, warn};
use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::resize::{nearest, resize_image};
use crate::data::{
    load_tensor, save_tensor, AnomalyLabel, AnomalyLabelMap, DatasetIndex, InstanceMap, RgbImage, Sample, SemanticMap,
    Split, TensorData, VOID,
};
use crate::dissimilarity::DissimilarityInputs;
use crate::error::{Error, Result};
use crate::framework::{ImageAnalysis, Stages, CHUNK};

pub const MANIFEST: &str = "samples.json";

/// Appended to a stem when synthesizing its altered map, so stored-output
/// backbones never return the synthesis of the unaltered prediction.
pub const SWAP_SUFFIX: &str = ".swap";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Swap,
    Void,
}

/// Which softmax feeds the uncertainty maps of a swap sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwapUncertainty {
    /// Segmentation of the original image.
    #[default]
    RealImage,
    /// Segmentation of the synthesized image, upsampled to full resolution.
    Resynthesized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatagenConfig {
    /// Fraction of candidate images assigned to the swap source.
    pub mix: f64,
    /// Smallest instance (full-resolution pixels) that may be swapped.
    pub min_swap_area: usize,
    pub min_swaps: usize,
    pub max_swaps: usize,
    /// VOID components below this area become IGNORE instead of anomalies.
    pub min_void_area: usize,
    /// Classes never swapped nor used as replacements.
    pub background_classes: Vec<u8>,
    pub swap_uncertainty: SwapUncertainty,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            mix: 0.5,
            min_swap_area: 64,
            min_swaps: 1,
            max_swaps: 3,
            min_void_area: 64,
            background_classes: vec![0],
            swap_uncertainty: SwapUncertainty::RealImage,
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::Config(format!("mix ratio {} outside [0,1]", self.mix)));
        }
        if self.min_swaps == 0 || self.min_swaps > self.max_swaps {
            return Err(Error::Config("swap counts need 1 <= min_swaps <= max_swaps".into()));
        }
        Ok(())
    }

    fn swappable(&self, class: u8, num_classes: usize) -> bool {
        class != VOID && (class as usize) < num_classes && !self.background_classes.contains(&class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSwap {
    pub instance: u16,
    pub original: u8,
    pub replacement: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapRecord {
    pub stem: String,
    pub swaps: Vec<InstanceSwap>,
}

/// One labelled example for the dissimilarity network.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub stem: String,
    pub provenance: Provenance,
    pub inputs: DissimilarityInputs,
    pub labels: AnomalyLabelMap,
    pub swap: Option<SwapRecord>,
}

/// Picks 1..=max instances to swap and a different class for each, or
/// `None` when no instance qualifies.
pub fn choose_swaps(
    instances: &InstanceMap,
    num_classes: usize,
    cfg: &DatagenConfig,
    rng: &mut impl Rng,
) -> Option<Vec<InstanceSwap>> {
    let objects: Vec<u8> = (0..num_classes as u8).filter(|c| cfg.swappable(*c, num_classes)).collect();
    let mut areas = BTreeMap::new();
    for id in instances.ids().iter().filter(|i| **i != InstanceMap::BACKGROUND) {
        *areas.entry(*id).or_insert(0usize) += 1;
    }
    let eligible: Vec<(u16, u8)> = instances
        .instances()
        .filter(|(id, c)| {
            cfg.swappable(*c, num_classes) && areas.get(id).copied().unwrap_or(0) >= cfg.min_swap_area
        })
        .collect();
    if eligible.is_empty() || objects.len() < 2 {
        return None;
    }
    let count = rng.random_range(cfg.min_swaps..=cfg.max_swaps).min(eligible.len());
    let mut chosen: Vec<_> = eligible.choose_multiple(rng, count).copied().collect();
    chosen.sort_unstable();
    Some(
        chosen
            .into_iter()
            .map(|(instance, original)| {
                let others: Vec<u8> = objects.iter().copied().filter(|c| *c != original).collect();
                InstanceSwap {
                    instance,
                    original,
                    replacement: *others.choose(rng).expect("at least two object classes"),
                }
            })
            .collect(),
    )
}

/// Altered semantic map and full-resolution labels: anomaly on swapped
/// pixels, IGNORE on VOID, inlier elsewhere.
pub fn apply_swaps(
    semantic: &SemanticMap,
    instances: &InstanceMap,
    swaps: &[InstanceSwap],
) -> Result<(SemanticMap, AnomalyLabelMap)> {
    let by_id: BTreeMap<u16, u8> = swaps.iter().map(|s| (s.instance, s.replacement)).collect();
    let mut ids = semantic.ids().clone();
    let mut labels = Array2::from_elem(ids.dim(), AnomalyLabel::Inlier as u8);
    ndarray::Zip::from(&mut ids)
        .and(&mut labels)
        .and(instances.ids())
        .for_each(|c, l, inst| {
            if *c == VOID {
                *l = AnomalyLabel::Ignore as u8;
            } else if let Some(r) = by_id.get(inst) {
                *c = *r;
                *l = AnomalyLabel::Anomaly as u8;
            }
        });
    Ok((semantic.with_ids(ids)?, AnomalyLabelMap::new(labels)?))
}

/// 4-connected components of `mask`, as pixel lists in scan order.
pub fn components(mask: &Array2<bool>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || seen[[y, x]] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(y, x)]);
            seen[[y, x]] = true;
            while let Some((cy, cx)) = queue.pop_front() {
                comp.push((cy, cx));
                let next = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in next {
                    if ny < h && nx < w && mask[[ny, nx]] && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                }
            }
            out.push(comp);
        }
    }
    out
}

/// Anomaly on VOID components of at least `min_area` pixels, IGNORE on
/// smaller ones, inlier elsewhere; `None` when no component qualifies.
pub fn void_labels(semantic: &SemanticMap, min_area: usize) -> Option<AnomalyLabelMap> {
    let mask = semantic.ids().mapv(|v| v == VOID);
    let mut labels = Array2::from_elem(mask.dim(), AnomalyLabel::Inlier as u8);
    let mut any = false;
    for comp in components(&mask) {
        let label = if comp.len() >= min_area.max(1) {
            any = true;
            AnomalyLabel::Anomaly
        } else {
            AnomalyLabel::Ignore
        };
        for p in comp {
            labels[p] = label as u8;
        }
    }
    any.then(|| AnomalyLabelMap::new(labels).expect("valid label values"))
}

fn downsample_labels(labels: &AnomalyLabelMap, size: (usize, usize)) -> Result<AnomalyLabelMap> {
    AnomalyLabelMap::new(nearest(labels.raw(), size.0, size.1))
}

/// Swap sample: the altered ground truth drives synthesis and the semantic
/// input, the uncertainty maps come from the real segmentation. Returns
/// `None` when the image has no swappable instance.
pub fn make_swap_sample(
    stages: &Stages,
    sample: &Sample,
    analysis: &ImageAnalysis,
    cfg: &DatagenConfig,
    rng: &mut impl Rng,
) -> Result<Option<GeneratedSample>> {
    let Some(swaps) = choose_swaps(&sample.instance, stages.num_classes(), cfg, rng) else {
        return Ok(None);
    };
    let (altered, labels) = apply_swaps(&sample.semantic, &sample.instance, &swaps)?;
    let stem = format!("{}{SWAP_SUFFIX}", sample.stem);
    let stem = stem.as_str();
    let synthesized = stages.synthesize(&[stem], &[&altered])?.remove(0);
    let resegmented;
    let unc = match cfg.swap_uncertainty {
        SwapUncertainty::RealImage => analysis,
        SwapUncertainty::Resynthesized => {
            let (h, w) = stages.ladder.image;
            let up = resize_image(&synthesized, h, w)?;
            resegmented = stages.analyze(&[stem], &[&up])?.remove(0);
            &resegmented
        }
    };
    let perceptual = stages.perceptual(&[&sample.image], &[&synthesized])?.remove(0);
    let inputs = stages.inputs(&sample.image, &synthesized, &altered, &unc.entropy, &unc.distance, &perceptual)?;
    Ok(Some(GeneratedSample {
        stem: sample.stem.clone(),
        provenance: Provenance::Swap,
        labels: downsample_labels(&labels, stages.ladder.dissimilarity)?,
        inputs,
        swap: Some(SwapRecord {
            stem: sample.stem.clone(),
            swaps,
        }),
    }))
}

/// Void sample: ground-truth VOID objects are the anomalies, every input
/// derives from the predicted semantics. Returns `None` without a
/// qualifying VOID component.
pub fn make_void_sample(
    stages: &Stages,
    sample: &Sample,
    analysis: &ImageAnalysis,
    cfg: &DatagenConfig,
) -> Result<Option<GeneratedSample>> {
    let Some(labels) = void_labels(&sample.semantic, cfg.min_void_area) else {
        return Ok(None);
    };
    let synthesized = stages.synthesize(&[sample.stem.as_str()], &[&analysis.predicted])?.remove(0);
    let perceptual = stages.perceptual(&[&sample.image], &[&synthesized])?.remove(0);
    let inputs = stages.inputs(
        &sample.image,
        &synthesized,
        &analysis.predicted,
        &analysis.entropy,
        &analysis.distance,
        &perceptual,
    )?;
    Ok(Some(GeneratedSample {
        stem: sample.stem.clone(),
        provenance: Provenance::Void,
        labels: downsample_labels(&labels, stages.ladder.dissimilarity)?,
        inputs,
        swap: None,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub stem: String,
    pub source: Provenance,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatagenLog {
    pub candidates: usize,
    pub assigned_swap: usize,
    pub assigned_void: usize,
    pub swap: usize,
    pub void: usize,
    pub skipped: Vec<Skipped>,
}

/// Splits `n` candidates: the first `round(mix * n)` of a seeded shuffle go
/// to the swap source.
pub fn assign_sources(n: usize, mix: f64, seed: u64) -> Vec<Provenance> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_swap = (mix * n as f64).round() as usize;
    let mut out = vec![Provenance::Void; n];
    for &i in &order[..n_swap.min(n)] {
        out[i] = Provenance::Swap;
    }
    out
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Refuses the anomaly-test split and any stem shared with it.
pub fn check_no_leak(index: &DatasetIndex, split: Split, stems: &[&str]) -> Result<()> {
    if split == Split::AnomalyTest {
        return Err(Error::Invalid("training data may not be generated from the anomaly-test split".into()));
    }
    let held_out: BTreeSet<&str> = index.split(Split::AnomalyTest).map(|r| r.stem.as_str()).collect();
    if let Some(s) = stems.iter().find(|s| held_out.contains(**s)) {
        return Err(Error::Invalid(format!("stem `{s}` also belongs to the anomaly-test split")));
    }
    Ok(())
}

/// Generates labelled examples from every image of `split`, ordered by
/// (source, stem). Deterministic in `seed`.
pub fn build_training_set(
    index: &DatasetIndex,
    split: Split,
    stages: &Stages,
    cfg: &DatagenConfig,
    seed: u64,
    limit: Option<usize>,
) -> Result<(Vec<GeneratedSample>, DatagenLog)> {
    cfg.validate()?;
    let mut records: Vec<_> = index.split(split).collect();
    if let Some(n) = limit {
        records.truncate(n);
    }
    let stems: Vec<&str> = records.iter().map(|r| r.stem.as_str()).collect();
    check_no_leak(index, split, &stems)?;
    let sources = assign_sources(records.len(), cfg.mix, seed);
    let mut log = DatagenLog {
        candidates: records.len(),
        assigned_swap: sources.iter().filter(|s| **s == Provenance::Swap).count(),
        ..DatagenLog::default()
    };
    log.assigned_void = log.candidates - log.assigned_swap;
    let mut out = Vec::new();
    for (start, chunk) in records.chunks(CHUNK).enumerate().map(|(i, c)| (i * CHUNK, c)) {
        let samples = chunk.iter().map(|r| index.load_sample(r)).collect::<Result<Vec<_>>>()?;
        let s_stems: Vec<&str> = samples.iter().map(|s| s.stem.as_str()).collect();
        let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
        let analyses = stages.analyze(&s_stems, &images)?;
        for (k, (sample, analysis)) in samples.iter().zip(&analyses).enumerate() {
            let i = start + k;
            let made = match sources[i] {
                Provenance::Swap => match make_swap_sample(stages, sample, analysis, cfg, &mut sample_rng(seed, i)) {
                    Err(Error::NoStoredOutput(s)) => Err(format!("no stored synthesis for `{s}`")),
                    other => other?.ok_or_else(|| format!("no instance with area >= {}", cfg.min_swap_area)),
                },
                Provenance::Void => make_void_sample(stages, sample, analysis, cfg)?
                    .ok_or_else(|| format!("no VOID component with area >= {}", cfg.min_void_area)),
            };
            match made {
                Ok(g) => out.push(g),
                Err(reason) => {
                    warn!("skipping {} for {:?}: {reason}", sample.stem, sources[i]);
                    log.skipped.push(Skipped {
                        stem: sample.stem.clone(),
                        source: sources[i],
                        reason,
                    });
                }
            }
        }
    }
    out.sort_by(|a, b| (a.provenance, &a.stem).cmp(&(b.provenance, &b.stem)));
    log.swap = out.iter().filter(|g| g.provenance == Provenance::Swap).count();
    log.void = out.len() - log.swap;
    info!(
        "generated {} swap and {} void samples from {} candidates ({} skipped)",
        log.swap,
        log.void,
        log.candidates,
        log.skipped.len()
    );
    if out.is_empty() {
        return Err(Error::Invalid(format!(
            "no training samples could be generated from {} candidates",
            log.candidates
        )));
    }
    Ok((out, log))
}

/// Pixel-level check of a generated sample against its source ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub anomaly_pixels: usize,
    /// Anomaly pixels outside swapped instances (swap) or outside VOID (void).
    pub misplaced: usize,
    /// VOID pixels of a swap sample not labelled IGNORE.
    pub void_not_ignored: usize,
}

impl Audit {
    pub fn passed(&self) -> bool {
        self.misplaced == 0 && self.void_not_ignored == 0
    }

    pub fn merge(self, other: Audit) -> Audit {
        Audit {
            anomaly_pixels: self.anomaly_pixels + other.anomaly_pixels,
            misplaced: self.misplaced + other.misplaced,
            void_not_ignored: self.void_not_ignored + other.void_not_ignored,
        }
    }
}

pub fn audit(sample: &GeneratedSample, source: &Sample) -> Audit {
    let (h, w) = (sample.labels.height(), sample.labels.width());
    let sem = nearest(source.semantic.ids(), h, w);
    let inst = nearest(source.instance.ids(), h, w);
    let swapped: BTreeSet<u16> = sample
        .swap
        .iter()
        .flat_map(|r| r.swaps.iter().map(|s| s.instance))
        .collect();
    let mut a = Audit::default();
    for ((l, c), i) in sample.labels.raw().iter().zip(sem.iter()).zip(inst.iter()) {
        if *l == AnomalyLabel::Anomaly as u8 {
            a.anomaly_pixels += 1;
            let ok = match sample.provenance {
                Provenance::Swap => swapped.contains(i),
                Provenance::Void => *c == VOID,
            };
            a.misplaced += usize::from(!ok);
        }
        if sample.provenance == Provenance::Swap && *c == VOID && *l != AnomalyLabel::Ignore as u8 {
            a.void_not_ignored += 1;
        }
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    stem: String,
    provenance: Provenance,
    swap: Option<SwapRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    num_classes: usize,
    samples: Vec<Entry>,
    log: DatagenLog,
}

const GROUPS: [&str; 5] = ["image", "synthesized", "semantic", "uncertainty", "labels"];

fn stack3(planes: impl Iterator<Item = Array3<f32>>) -> Result<TensorData> {
    let planes: Vec<_> = planes.collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    let out: Array4<f32> =
        ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(format!("cannot stack samples: {e}")))?;
    Ok(TensorData::F32(out.into_dyn()))
}

fn stack2(planes: impl Iterator<Item = Array2<u8>>) -> Result<TensorData> {
    let planes: Vec<_> = planes.collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    let out: Array3<u8> =
        ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(format!("cannot stack samples: {e}")))?;
    Ok(TensorData::U8(out.into_dyn()))
}

/// Writes one tensor file per input group plus a JSON manifest.
pub fn save_training_set(dir: &Path, samples: &[GeneratedSample], log: &DatagenLog) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::Invalid("no samples to save".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let groups = [
        stack3(samples.iter().map(|s| s.inputs.image.data().clone()))?,
        stack3(samples.iter().map(|s| s.inputs.synthesized.data().clone()))?,
        stack2(samples.iter().map(|s| s.inputs.semantic.ids().clone()))?,
        stack3(samples.iter().map(|s| s.inputs.uncertainty.clone()))?,
        stack2(samples.iter().map(|s| s.labels.raw().clone()))?,
    ];
    for (name, t) in GROUPS.iter().zip(&groups) {
        save_tensor(dir.join(format!("{name}.tsr")), t)?;
    }
    let manifest = Manifest {
        num_classes: first.inputs.semantic.num_classes(),
        samples: samples
            .iter()
            .map(|s| Entry {
                stem: s.stem.clone(),
                provenance: s.provenance,
                swap: s.swap.clone(),
            })
            .collect(),
        log: log.clone(),
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

fn read_group(dir: &Path, name: &str) -> Result<TensorData> {
    load_tensor(dir.join(format!("{name}.tsr")))
}

fn f32_group(dir: &Path, name: &str) -> Result<Array4<f32>> {
    read_group(dir, name)?
        .into_f32()?
        .into_dimensionality()
        .map_err(|e| Error::Shape(format!("{name}: {e}")))
}

fn u8_group(dir: &Path, name: &str) -> Result<Array3<u8>> {
    match read_group(dir, name)? {
        TensorData::U8(a) => {
            let a: ArrayD<u8> = a;
            a.into_dimensionality().map_err(|e| Error::Shape(format!("{name}: {e}")))
        }
        other => Err(Error::TensorFile(format!("{name}: expected u8 tensor, found {:?}", other.dtype()))),
    }
}

/// Reads a set written by [`save_training_set`].
pub fn load_training_set(dir: &Path) -> Result<(Vec<GeneratedSample>, DatagenLog)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let image = f32_group(dir, GROUPS[0])?;
    let synthesized = f32_group(dir, GROUPS[1])?;
    let semantic = u8_group(dir, GROUPS[2])?;
    let uncertainty = f32_group(dir, GROUPS[3])?;
    let labels = u8_group(dir, GROUPS[4])?;
    let n = manifest.samples.len();
    if [image.dim().0, synthesized.dim().0, semantic.dim().0, uncertainty.dim().0, labels.dim().0]
        .iter()
        .any(|k| *k != n)
    {
        return Err(Error::Shape(format!("tensor groups in {} disagree with {n} manifest entries", dir.display())));
    }
    let samples = manifest
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(GeneratedSample {
                stem: e.stem,
                provenance: e.provenance,
                swap: e.swap,
                inputs: DissimilarityInputs::new(
                    RgbImage::new(image.index_axis(Axis(0), i).to_owned())?,
                    RgbImage::new(synthesized.index_axis(Axis(0), i).to_owned())?,
                    SemanticMap::new(semantic.index_axis(Axis(0), i).to_owned(), manifest.num_classes as u8)?,
                    uncertainty.index_axis(Axis(0), i).to_owned(),
                )?,
                labels: AnomalyLabelMap::new(labels.index_axis(Axis(0), i).to_owned())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, manifest.log))
}

/// Pairs of inputs and labels as consumed by training.
pub fn as_pairs(samples: Vec<GeneratedSample>) -> Vec<(DissimilarityInputs, AnomalyLabelMap)> {
    samples.into_iter().map(|s| (s.inputs, s.labels)).collect()
}
