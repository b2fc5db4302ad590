//! Run configuration and its flat `key = value` text format.
//!
//! Keys are dotted paths into [`RunConfig`] (`train.epochs = 4`). Values are
//! read as JSON when they parse as JSON and as plain strings otherwise, so
//! `seeds = [0, 1, 2]`, `train.flip = false` and `backbone = toy` all work.
//! `include = other.conf` splices another file in place, resolved relative
//! to the including file; later assignments win. `#` starts a comment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backbones::{BackboneChoice, ExtractorSpec, TapPlacement, ToyBackboneConfig};
use crate::data::ShapesConfig;
use crate::datagen::DatagenConfig;
use crate::dissimilarity::{DissimilaritySpec, TrainConfig, UncertaintyMode};
use crate::ensemble::{LearnConfig, Objective};
use crate::error::{Error, Result};
use crate::framework::Ladder;
use crate::metrics::Pooling;
use crate::uncertainty::PerceptualConfig;

const MAX_INCLUDE_DEPTH: usize = 16;

/// Keys whose values are derived from `image_size`.
const DERIVED_KEYS: [&str; 3] = ["shapes.width", "shapes.height", "toy.image_size"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesConfig {
    pub width_divisor: usize,
    /// Seed of the random fixed weights used when `weights` is unset.
    pub seed: u64,
    /// Checkpoint directory with externally supplied extractor weights.
    pub weights: Option<PathBuf>,
    pub taps: TapPlacement,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            width_divisor: 8,
            seed: 7,
            weights: None,
            taps: TapPlacement::BeforePool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub width_divisor: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { width_divisor: 16 }
    }
}

/// Caps on the number of source images fed to the data generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Limits {
    pub train: Option<usize>,
    pub val: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub step: f64,
    pub objective: Objective,
    pub learn: LearnConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            step: 0.1,
            objective: Objective::Ap,
            learn: LearnConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub pooling: Pooling,
    /// Evaluate on at most this many anomaly-test images.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root for every artifact of the run.
    pub output: PathBuf,
    /// Dataset root; `<output>/dataset` when unset.
    pub dataset: Option<PathBuf>,
    /// `toy` or `precomputed:<dir>`.
    pub backbone: String,
    /// `(height, width)` of input images.
    pub image_size: (usize, usize),
    /// Overrides of the half and quarter resolutions.
    pub synthesis_size: Option<(usize, usize)>,
    pub dissimilarity_size: Option<(usize, usize)>,
    pub seeds: Vec<u64>,
    pub backbone_seed: u64,
    pub dataset_seed: u64,
    pub shapes: ShapesConfig,
    pub toy: ToyBackboneConfig,
    pub features: FeaturesConfig,
    pub perceptual: PerceptualConfig,
    pub dissimilarity: NetConfig,
    pub train: TrainConfig,
    pub datagen: DatagenConfig,
    pub limits: Limits,
    pub ensemble: EnsembleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output: PathBuf::from("runs"),
            dataset: None,
            backbone: "toy".into(),
            image_size: (128, 256),
            synthesis_size: None,
            dissimilarity_size: None,
            seeds: vec![0, 1, 2],
            backbone_seed: 0,
            dataset_seed: 0,
            shapes: ShapesConfig::default(),
            toy: ToyBackboneConfig::default(),
            features: FeaturesConfig::default(),
            perceptual: PerceptualConfig::default(),
            dissimilarity: NetConfig::default(),
            train: TrainConfig {
                epochs: 3,
                lr: 1e-3,
                patience: 1,
                lr_factor: 0.3,
                ..TrainConfig::default()
            },
            datagen: DatagenConfig::default(),
            limits: Limits::default(),
            ensemble: EnsembleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(p) = path {
            read_pairs(p, 0, &mut pairs)?;
        }
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    /// Parses configuration text; `include` paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        parse_pairs(text, base, "<text>", 0, &mut pairs)?;
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut flat = BTreeMap::new();
        for (k, v) in pairs {
            if DERIVED_KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("`{k}` follows `image_size`; set that instead")));
            }
            flat.insert(k.clone(), parse_value(v));
        }
        let Value::Object(mut root) = serde_json::to_value(RunConfig::default())? else {
            unreachable!("configuration serializes to an object")
        };
        for (k, v) in &flat {
            insert_path(&mut root, k, v.clone())?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(Value::Object(root)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync_sizes();
        let back = serde_json::to_value(&cfg)?;
        for k in flat.keys() {
            if lookup(&back, k).is_none() {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn sync_sizes(&mut self) {
        self.shapes.height = self.image_size.0;
        self.shapes.width = self.image_size.1;
        self.toy.image_size = self.image_size;
    }

    pub fn validate(&self) -> Result<()> {
        self.ladder()?;
        self.backbone_choice()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.features.width_divisor == 0 || self.dissimilarity.width_divisor == 0 {
            return Err(Error::Config("width divisors must be positive".into()));
        }
        if !(self.ensemble.step > 0.0 && self.ensemble.step <= 1.0) {
            return Err(Error::Config(format!("ensemble step {} outside (0, 1]", self.ensemble.step)));
        }
        self.train.validate()?;
        self.datagen.validate()?;
        self.perceptual.validate()?;
        Ok(())
    }

    pub fn backbone_choice(&self) -> Result<BackboneChoice> {
        self.backbone.parse()
    }

    pub fn ladder(&self) -> Result<Ladder> {
        let base = Ladder::new(self.image_size)?;
        match (self.synthesis_size, self.dissimilarity_size) {
            (None, None) => Ok(base),
            (s, d) => Ladder::custom(
                self.image_size,
                s.unwrap_or(base.synthesis),
                d.unwrap_or(base.dissimilarity),
            ),
        }
    }

    pub fn dataset_root(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.output.join("dataset"))
    }

    pub fn extractor_spec(&self) -> Result<ExtractorSpec> {
        Ok(ExtractorSpec {
            input_size: self.ladder()?.dissimilarity,
            taps: self.features.taps,
            ..ExtractorSpec::default()
        }
        .scaled(self.features.width_divisor))
    }

    pub fn net_spec(&self, num_classes: usize, mode: UncertaintyMode) -> Result<DissimilaritySpec> {
        let mut spec = DissimilaritySpec::full(num_classes).scaled(self.dissimilarity.width_divisor);
        spec.input_size = self.ladder()?.dissimilarity;
        spec.uncertainty = mode;
        spec.validate()?;
        Ok(spec)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        crate::nn::params::spec_hash(&serde_json::to_value(self)?)
    }

    /// Every leaf as a `key = value` line, loadable by [`RunConfig::parse`].
    pub fn to_text(&self) -> Result<String> {
        let mut lines = Vec::new();
        flatten("", &serde_json::to_value(self)?, &mut lines);
        Ok(lines.join("\n") + "\n")
    }
}

fn read_pairs(path: &Path, depth: usize, out: &mut Vec<(String, String)>) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_pairs(&text, base, &path.display().to_string(), depth, out)
}

fn parse_pairs(text: &str, base: &Path, origin: &str, depth: usize, out: &mut Vec<(String, String)>) -> Result<()> {
    if depth > MAX_INCLUDE_DEPTH {
        return Err(Error::Config(format!("includes nested deeper than {MAX_INCLUDE_DEPTH} at {origin}")));
    }
    for (n, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("{origin}:{}: expected `key = value`", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("{origin}:{}: empty key", n + 1)));
        }
        if k == "include" {
            read_pairs(&base.join(v.trim_matches('"')), depth + 1, out)?;
        } else {
            out.push((k.to_string(), v.to_string()));
        }
    }
    Ok(())
}

/// Drops a trailing `#` comment unless the `#` sits inside double quotes.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_value(v: &str) -> Value {
    serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

fn insert_path(root: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
        node = entry
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` nests below a value that is not a section")))?;
    }
    let last = parts[parts.len() - 1];
    if node.get(last).is_some_and(Value::is_object) {
        return Err(Error::Config(format!("`{key}` is a section, not a value")));
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn lookup<'v>(v: &'v Value, key: &str) -> Option<&'v Value> {
    key.split('.').try_fold(v, |node, p| node.as_object()?.get(p))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ if DERIVED_KEYS.contains(&prefix) => {}
        other => out.push(format!("{prefix} = {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn nested_keys_and_plain_strings() {
        let cfg = RunConfig::parse(
            "seeds = [4, 5]   # two seeds\ntrain.epochs = 2\nbackbone = toy\nfeatures.taps = after-pool\nlimits.train = 40",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, RunConfig::default().train.batch_size);
        assert_eq!(cfg.features.taps, TapPlacement::AfterPool);
        assert_eq!(cfg.limits.train, Some(40));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for key in ["train.epoch", "nonsense", "shapes.colour"] {
            let err = RunConfig::from_pairs(&pairs(&[(key, "1")])).unwrap_err().to_string();
            assert!(err.contains(key), "{err}");
        }
        assert!(RunConfig::from_pairs(&pairs(&[("shapes.width", "64")])).is_err());
        assert!(RunConfig::from_pairs(&pairs(&[("train", "3")])).is_err());
    }

    #[test]
    fn include_resolves_relative_and_later_wins() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/base.conf"), "train.epochs = 9\ntrain.lr = 0.5\n").unwrap();
        fs::write(dir.path().join("run.conf"), "include = sub/base.conf\ntrain.epochs = 2\n").unwrap();
        let cfg = RunConfig::load(Some(&dir.path().join("run.conf")), &pairs(&[("train.lr", "0.25")])).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.lr), (2, 0.25));

        fs::write(dir.path().join("loop.conf"), "include = loop.conf\n").unwrap();
        assert!(RunConfig::load(Some(&dir.path().join("loop.conf")), &[]).is_err());
    }

    #[test]
    fn text_round_trip_and_hash() {
        let mut cfg = RunConfig::default();
        cfg.image_size = (64, 128);
        cfg.sync_sizes();
        cfg.limits.val = Some(3);
        let back = RunConfig::parse(&cfg.to_text().unwrap(), Path::new(".")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        cfg.train.epochs += 1;
        assert_ne!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn one_nested_key_keeps_run_defaults_for_its_siblings() {
        let cfg = RunConfig::from_pairs(&pairs(&[("train.epochs", "6")])).unwrap();
        let want = RunConfig::default();
        assert_eq!(cfg.train.epochs, 6);
        assert_eq!(cfg.train.lr, want.train.lr);
        assert_eq!(cfg.train.patience, want.train.patience);
    }

    #[test]
    fn image_size_drives_the_ladder() {
        let cfg = RunConfig::from_pairs(&pairs(&[("image_size", "[64, 128]")])).unwrap();
        let l = cfg.ladder().unwrap();
        assert_eq!((l.synthesis, l.dissimilarity), ((32, 64), (16, 32)));
        assert_eq!((cfg.shapes.height, cfg.shapes.width), (64, 128));
        assert_eq!(cfg.extractor_spec().unwrap().input_size, (16, 32));
        assert!(RunConfig::from_pairs(&pairs(&[("image_size", "[66, 128]")])).is_err());
        assert!(RunConfig::from_pairs(&pairs(&[("backbone", "remote")])).is_err());
    }
}
