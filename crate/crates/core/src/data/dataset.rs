//! On-disk dataset layout: `<root>/<split>/{images,semantic,instance}/<stem>.png`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io;
use super::maps::{InstanceMap, RgbImage, SemanticMap};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    /// Held-out inlier images, used to measure backbone quality.
    Test,
    /// The only split that contains the held-out anomaly shapes.
    AnomalyTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::AnomalyTest];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::AnomalyTest => "anomaly-test",
        }
    }

    pub(crate) fn code(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub stem: String,
    pub split: Split,
    pub image: PathBuf,
    pub semantic: PathBuf,
    pub instance: PathBuf,
}

/// A loaded image together with its ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub stem: String,
    pub image: RgbImage,
    pub semantic: SemanticMap,
    pub instance: InstanceMap,
}

/// Listing of every sample in a dataset. Paths are relative to `root`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    #[serde(skip)]
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub records: Vec<Record>,
}

impl DatasetIndex {
    pub fn num_classes(&self) -> u8 {
        self.class_names.len() as u8
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn len(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn relative_paths(split: Split, stem: &str) -> (PathBuf, PathBuf, PathBuf) {
        let base = PathBuf::from(split.dir_name());
        let file = format!("{stem}.png");
        (
            base.join("images").join(&file),
            base.join("semantic").join(&file),
            base.join("instance").join(&file),
        )
    }

    pub fn load_sample(&self, record: &Record) -> Result<Sample> {
        let image = io::load_image(self.root.join(&record.image))?;
        let semantic = io::load_semantic(self.root.join(&record.semantic), self.num_classes())?;
        let instance = io::load_instances(self.root.join(&record.instance), &semantic)?;
        Ok(Sample {
            stem: record.stem.clone(),
            image,
            semantic,
            instance,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.split(split).map(|r| self.load_sample(r)).collect()
    }

    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads `index.json` under `root` and validates it.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut index: DatasetIndex = serde_json::from_str(&text)?;
        index.root = root.to_path_buf();
        index.validate()?;
        Ok(index)
    }

    /// Checks that referenced files exist and splits are disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(&r.stem) {
                return Err(Error::Invalid(format!("stem `{}` appears in more than one record", r.stem)));
            }
            for p in [&r.image, &r.semantic, &r.instance] {
                let full = self.root.join(p);
                if !full.exists() {
                    return Err(Error::Invalid(format!("missing dataset file {}", full.display())));
                }
            }
        }
        Ok(())
    }
}
