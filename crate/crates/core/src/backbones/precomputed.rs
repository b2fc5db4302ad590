//! Backbone outputs read from disk, keyed by image stem.
//!
//! Layout: `<dir>/precomputed.json` describing the outputs, softmax tensors
//! in `<dir>/softmax/<stem>.tsr` (`C x H x W`) and synthesized images in
//! `<dir>/synthesis/<stem>.tsr` (`3 x H x W`).

use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use serde::{Deserialize, Serialize};

use super::{SegmentationBackbone, SynthesisBackbone};
use crate::data::tensor_file::load_tensor;
use crate::data::{RgbImage, SemanticMap};
use crate::error::{Error, Result};

pub const META_FILE: &str = "precomputed.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecomputedMeta {
    pub num_classes: usize,
    /// `(height, width)` of the softmax outputs.
    pub image_size: (usize, usize),
    /// `(height, width)` of the synthesized images.
    pub synthesis_size: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct PrecomputedBackbone {
    dir: PathBuf,
    meta: PrecomputedMeta,
}

impl PrecomputedBackbone {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(PrecomputedBackbone {
            meta: serde_json::from_str(&text)?,
            dir,
        })
    }

    pub fn create(dir: impl AsRef<Path>, meta: PrecomputedMeta) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        for sub in ["softmax", "synthesis"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let path = dir.join(META_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
        Ok(PrecomputedBackbone { dir, meta })
    }

    pub fn meta(&self) -> &PrecomputedMeta {
        &self.meta
    }

    pub fn softmax_path(&self, stem: &str) -> PathBuf {
        self.dir.join("softmax").join(format!("{stem}.tsr"))
    }

    pub fn synthesis_path(&self, stem: &str) -> PathBuf {
        self.dir.join("synthesis").join(format!("{stem}.tsr"))
    }

    fn read(&self, path: PathBuf, stem: &str) -> Result<Array3<f32>> {
        if !path.exists() {
            return Err(Error::NoStoredOutput(stem.to_string()));
        }
        load_tensor(&path)?
            .into_f32()?
            .into_dimensionality::<Ix3>()
            .map_err(|_| Error::Shape(format!("stored output for `{stem}` is not rank 3")))
    }
}

impl SegmentationBackbone for PrecomputedBackbone {
    fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    fn input_size(&self) -> (usize, usize) {
        self.meta.image_size
    }

    fn predict(&self, stems: &[&str], _images: &[&RgbImage]) -> Result<Vec<Array3<f32>>> {
        stems.iter().map(|s| self.read(self.softmax_path(s), s)).collect()
    }
}

impl SynthesisBackbone for PrecomputedBackbone {
    fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    fn input_size(&self) -> (usize, usize) {
        self.meta.synthesis_size
    }

    fn generate(&self, stems: &[&str], _maps: &[&SemanticMap]) -> Result<Vec<Array3<f32>>> {
        stems.iter().map(|s| self.read(self.synthesis_path(s), s)).collect()
    }
}
