//! Synthetic shapes dataset.
//!
//! Each image is a noisy background with a handful of filled shapes. Inlier
//! shapes form the training classes (class 0 is background). `void_shapes`
//! appear in the train/val splits and are labeled [`VOID`]; `anomaly_shapes`
//! appear only in the anomaly-test split, also labeled [`VOID`]. Masks are
//! rasterized without anti-aliasing so labels are pixel exact.

use std::f32::consts::PI;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetIndex, Record, Sample, Split};
use super::io;
use super::maps::{InstanceMap, RgbImage, SemanticMap, VOID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Hexagon,
    Cross,
    Ring,
    Star,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Hexagon => "hexagon",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Star => "star",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.trim().to_lowercase()))
            .map_err(|_| Error::Config(format!("unknown shape `{s}`")))
    }

    /// Fixed palette color for inlier classes.
    fn palette(self) -> [f32; 3] {
        match self {
            ShapeKind::Circle => [0.85, 0.25, 0.20],
            ShapeKind::Square => [0.20, 0.40, 0.85],
            ShapeKind::Triangle => [0.92, 0.82, 0.22],
            ShapeKind::Diamond => [0.60, 0.25, 0.75],
            ShapeKind::Hexagon => [0.25, 0.75, 0.75],
            ShapeKind::Cross => [0.95, 0.55, 0.15],
            ShapeKind::Ring => [0.55, 0.85, 0.35],
            ShapeKind::Star => [0.90, 0.45, 0.65],
        }
    }
}

/// Geometry of one drawn shape.
#[derive(Debug, Clone, Copy)]
struct Placement {
    kind: ShapeKind,
    cx: f32,
    cy: f32,
    radius: f32,
    angle: f32,
}

impl Placement {
    fn contains(&self, px: f32, py: f32) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = (-self.angle).sin_cos();
        // Rotate into the shape frame, then normalize by radius.
        let u = (dx * c - dy * s) / self.radius;
        let v = (dx * s + dy * c) / self.radius;
        match self.kind {
            ShapeKind::Circle => u * u + v * v <= 1.0,
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ShapeKind::Triangle => in_polygon(u, v, &regular(3, 1.0, 0.0)),
            ShapeKind::Hexagon => in_polygon(u, v, &regular(6, 1.0, 0.0)),
            ShapeKind::Star => in_polygon(u, v, &star(5, 1.0, 0.42)),
        }
    }
}

fn regular(n: usize, r: f32, phase: f32) -> Vec<(f32, f32)> {
    (0..n)
        .map(|i| {
            let a = phase - PI / 2.0 + 2.0 * PI * i as f32 / n as f32;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

fn star(points: usize, outer: f32, inner: f32) -> Vec<(f32, f32)> {
    (0..2 * points)
        .map(|i| {
            let r = if i % 2 == 0 { outer } else { inner };
            let a = -PI / 2.0 + PI * i as f32 / points as f32;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Even-odd rule point-in-polygon test.
fn in_polygon(x: f32, y: f32, poly: &[(f32, f32)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesConfig {
    pub width: usize,
    pub height: usize,
    /// Object classes; class ids are `1..=len`, background is class 0.
    pub inlier_shapes: Vec<ShapeKind>,
    /// Unlabeled objects present in the train/val splits (VOID in ground truth).
    pub void_shapes: Vec<ShapeKind>,
    /// Held-out anomalies; only drawn in the anomaly-test split.
    pub anomaly_shapes: Vec<ShapeKind>,
    pub train_images: usize,
    pub val_images: usize,
    pub test_images: usize,
    pub anomaly_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that a train/val image receives one VOID object.
    pub void_probability: f64,
    pub min_anomalies: usize,
    pub max_anomalies: usize,
    /// Shape radius range as a fraction of the image height.
    pub min_radius: f32,
    pub max_radius: f32,
    pub color_jitter: f32,
    pub noise_std: f32,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            width: 256,
            height: 128,
            inlier_shapes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            void_shapes: vec![ShapeKind::Cross, ShapeKind::Ring],
            anomaly_shapes: vec![ShapeKind::Star],
            train_images: 500,
            val_images: 100,
            test_images: 50,
            anomaly_images: 100,
            min_objects: 2,
            max_objects: 4,
            void_probability: 0.8,
            min_anomalies: 1,
            max_anomalies: 2,
            min_radius: 0.10,
            max_radius: 0.20,
            color_jitter: 0.08,
            noise_std: 0.03,
        }
    }
}

const BACKGROUND_COLOR: [f32; 3] = [0.45, 0.50, 0.42];

impl ShapesConfig {
    pub fn class_names(&self) -> Vec<String> {
        std::iter::once("background".to_string())
            .chain(self.inlier_shapes.iter().map(|s| s.name().to_string()))
            .collect()
    }

    pub fn num_classes(&self) -> u8 {
        (self.inlier_shapes.len() + 1) as u8
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 64 || self.height < 64 {
            return Err(Error::Config(format!(
                "image size {}x{} below the 64x64 minimum",
                self.width, self.height
            )));
        }
        if self.inlier_shapes.is_empty() {
            return Err(Error::Config("at least one inlier shape is required".into()));
        }
        if self.inlier_shapes.len() >= VOID as usize {
            return Err(Error::Config("too many inlier classes".into()));
        }
        for a in self.anomaly_shapes.iter().chain(&self.void_shapes) {
            if self.inlier_shapes.contains(a) {
                return Err(Error::Config(format!(
                    "shape `{}` is listed among the inlier classes",
                    a.name()
                )));
            }
        }
        if let Some(a) = self.anomaly_shapes.iter().find(|a| self.void_shapes.contains(a)) {
            return Err(Error::Config(format!(
                "anomaly shape `{}` must not also be a void shape",
                a.name()
            )));
        }
        if self.anomaly_images > 0 && self.anomaly_shapes.is_empty() {
            return Err(Error::Config("anomaly images requested but no anomaly shapes".into()));
        }
        if self.min_objects > self.max_objects || self.min_anomalies > self.max_anomalies {
            return Err(Error::Config("min counts exceed max counts".into()));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return Err(Error::Config("invalid radius range".into()));
        }
        Ok(())
    }

    pub fn images_in(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_images,
            Split::Val => self.val_images,
            Split::Test => self.test_images,
            Split::AnomalyTest => self.anomaly_images,
        }
    }
}

/// Per-image RNG stream derived from `(seed, split, index)`.
pub fn image_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.code() << 32) | index as u64);
    rng
}

pub fn stem(split: Split, index: usize) -> String {
    format!("{}_{index:05}", split.dir_name())
}

/// Renders one image with ground truth. Deterministic in `(cfg, seed, split, index)`.
pub fn render_sample(cfg: &ShapesConfig, seed: u64, split: Split, index: usize) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = image_rng(seed, split, index);
    let (h, w) = (cfg.height, cfg.width);

    let mut placements: Vec<(Placement, u8, [f32; 3])> = Vec::new();
    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    for _ in 0..n_obj {
        let k = rng.random_range(0..cfg.inlier_shapes.len());
        let kind = cfg.inlier_shapes[k];
        let base = kind.palette();
        let color = base.map(|c| (c + rng.random_range(-cfg.color_jitter..=cfg.color_jitter)).clamp(0.0, 1.0));
        placements.push((place(cfg, &mut rng, kind), (k + 1) as u8, color));
    }
    let extra: Vec<ShapeKind> = match split {
        Split::Train | Split::Val if !cfg.void_shapes.is_empty() && rng.random_bool(cfg.void_probability) => {
            vec![cfg.void_shapes[rng.random_range(0..cfg.void_shapes.len())]]
        }
        Split::AnomalyTest => {
            let n = rng.random_range(cfg.min_anomalies..=cfg.max_anomalies);
            (0..n)
                .map(|_| cfg.anomaly_shapes[rng.random_range(0..cfg.anomaly_shapes.len())])
                .collect()
        }
        _ => Vec::new(),
    };
    for kind in extra {
        let color = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        placements.push((place(cfg, &mut rng, kind), VOID, color));
    }

    let bg = BACKGROUND_COLOR.map(|c| (c + rng.random_range(-cfg.color_jitter..=cfg.color_jitter)).clamp(0.0, 1.0));
    let mut pixels = Array3::<f32>::zeros((3, h, w));
    for c in 0..3 {
        pixels.slice_mut(ndarray::s![c, .., ..]).fill(bg[c]);
    }
    let mut sem = Array2::<u8>::zeros((h, w));
    let mut inst = Array2::<u16>::zeros((h, w));
    for (i, (p, class, color)) in placements.iter().enumerate() {
        let (y0, y1, x0, x1) = bbox(p, h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                if p.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    sem[[y, x]] = *class;
                    inst[[y, x]] = (i + 1) as u16;
                    for c in 0..3 {
                        pixels[[c, y, x]] = color[c];
                    }
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
        pixels.mapv_inplace(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0));
    }
    // Quantize as the PNG round trip would, so in-memory and on-disk samples agree.
    pixels.mapv_inplace(|v| (v * 255.0).round() / 255.0);

    let semantic = SemanticMap::new(sem, cfg.num_classes())?;
    let instance = InstanceMap::new(inst, &semantic)?;
    Ok(Sample {
        stem: stem(split, index),
        image: RgbImage::new(pixels)?,
        semantic,
        instance,
    })
}

fn place(cfg: &ShapesConfig, rng: &mut ChaCha8Rng, kind: ShapeKind) -> Placement {
    let h = cfg.height as f32;
    let radius = h * rng.random_range(cfg.min_radius..=cfg.max_radius);
    let margin = radius * 0.5;
    Placement {
        kind,
        cx: rng.random_range(margin..(cfg.width as f32 - margin)),
        cy: rng.random_range(margin..(h - margin)),
        radius,
        angle: rng.random_range(0.0..(2.0 * PI)),
    }
}

fn bbox(p: &Placement, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let r = p.radius * 1.5 + 1.0;
    let clampi = |v: f32, n: usize| (v.max(0.0) as usize).min(n);
    (
        clampi(p.cy - r, h),
        clampi(p.cy + r + 1.0, h),
        clampi(p.cx - r, w),
        clampi(p.cx + r + 1.0, w),
    )
}

/// Writes the dataset under `root` and returns its index.
pub fn generate_shapes_dataset(cfg: &ShapesConfig, seed: u64, root: impl AsRef<Path>) -> Result<DatasetIndex> {
    cfg.validate()?;
    let root = root.as_ref();
    let mut records = Vec::new();
    for split in Split::ALL {
        for i in 0..cfg.images_in(split) {
            let s = render_sample(cfg, seed, split, i)?;
            let (image, semantic, instance) = DatasetIndex::relative_paths(split, &s.stem);
            io::save_image(root.join(&image), &s.image)?;
            io::save_semantic(root.join(&semantic), &s.semantic)?;
            io::save_instances(root.join(&instance), &s.instance)?;
            records.push(Record {
                stem: s.stem,
                split,
                image,
                semantic,
                instance,
            });
        }
    }
    let index = DatasetIndex {
        root: root.to_path_buf(),
        class_names: cfg.class_names(),
        records,
    };
    index.write()?;
    let cfg_path = root.join("shapes.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> ShapesConfig {
        ShapesConfig {
            width: 64,
            height: 64,
            train_images: 3,
            val_images: 2,
            test_images: 1,
            anomaly_images: 2,
            ..ShapesConfig::default()
        }
    }

    #[test]
    fn rejects_anomaly_among_inliers() {
        let cfg = ShapesConfig {
            anomaly_shapes: vec![ShapeKind::Circle],
            ..small()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("inlier classes"), "{err}");
    }

    #[test]
    fn rejects_small_images() {
        let cfg = ShapesConfig { height: 32, ..small() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_anomaly_images_gives_empty_split() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ShapesConfig {
            anomaly_images: 0,
            ..small()
        };
        let index = generate_shapes_dataset(&cfg, 3, dir.path()).unwrap();
        assert_eq!(index.len(Split::AnomalyTest), 0);
        assert_eq!(index.len(Split::Train), 3);
    }

    #[test]
    fn single_circle_has_two_ids() {
        let cfg = ShapesConfig {
            min_objects: 1,
            max_objects: 1,
            inlier_shapes: vec![ShapeKind::Circle],
            void_probability: 0.0,
            ..small()
        };
        let s = render_sample(&cfg, 11, Split::Train, 0).unwrap();
        let ids: BTreeSet<u8> = s.semantic.ids().iter().copied().collect();
        assert_eq!(ids, BTreeSet::from([0, 1]));
    }

    #[test]
    fn void_only_from_void_or_anomaly_shapes() {
        let cfg = ShapesConfig {
            void_probability: 0.0,
            ..small()
        };
        for split in [Split::Train, Split::Val, Split::Test] {
            for i in 0..cfg.images_in(split) {
                let s = render_sample(&cfg, 5, split, i).unwrap();
                assert!(s.semantic.ids().iter().all(|v| *v != VOID), "{split:?} {i}");
            }
        }
        let s = render_sample(&cfg, 5, Split::AnomalyTest, 0).unwrap();
        assert!(s.semantic.ids().iter().any(|v| *v == VOID));
    }

    #[test]
    fn instances_are_pixel_consistent_with_semantics() {
        let s = render_sample(&small(), 9, Split::Train, 1).unwrap();
        for (inst, sem) in s.instance.ids().iter().zip(s.semantic.ids().iter()) {
            match *inst {
                0 => assert_eq!(*sem, 0),
                i => assert_eq!(s.instance.class_of(i), Some(*sem)),
            }
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ia = generate_shapes_dataset(&small(), 42, a.path()).unwrap();
        let ib = generate_shapes_dataset(&small(), 42, b.path()).unwrap();
        assert_eq!(ia.records, ib.records);
        for r in &ia.records {
            for p in [&r.image, &r.semantic, &r.instance] {
                assert_eq!(std::fs::read(a.path().join(p)).unwrap(), std::fs::read(b.path().join(p)).unwrap());
            }
        }
        let reopened = DatasetIndex::open(a.path()).unwrap();
        assert_eq!(reopened.records, ia.records);
        let loaded = reopened.load_sample(&reopened.records[0]).unwrap();
        let direct = render_sample(&small(), 42, Split::Train, 0).unwrap();
        assert_eq!(loaded.image, direct.image);
        assert_eq!(loaded.semantic, direct.semantic);
    }

    #[test]
    fn star_polygon_contains_center_not_notch() {
        let p = Placement {
            kind: ShapeKind::Star,
            cx: 0.0,
            cy: 0.0,
            radius: 10.0,
            angle: 0.0,
        };
        assert!(p.contains(0.0, 0.0));
        assert!(p.contains(0.0, -9.0));
        // Between two tips, outside the inner radius.
        let a = -PI / 2.0 + PI / 5.0;
        assert!(!p.contains(7.0 * a.cos(), 7.0 * a.sin()));
    }
}
