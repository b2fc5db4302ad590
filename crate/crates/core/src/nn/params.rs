//! Named trainable parameters with deterministic initialization and
//! `.tsr`-per-parameter checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::tensor_file::{load_tensor, save_tensor, TensorData};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Ordered map of parameter name to variable. All parameters share one dtype.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        let v = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Normal(0, std) entries drawn from the store's seeded stream.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        if shape.iter().any(|d| *d == 0) {
            return Err(Error::Invalid(format!("parameter `{name}` has a zero dimension {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        self.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        if shape.iter().any(|d| *d == 0) {
            return Err(Error::Invalid(format!("parameter `{name}` has a zero dimension {shape:?}")));
        }
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn vars_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a Var> + 'a {
        self.vars
            .iter()
            .filter(move |(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copy of every parameter value, for best-epoch bookkeeping.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, v) in &self.vars {
            let t = snapshot
                .get(k)
                .ok_or_else(|| Error::Invalid(format!("snapshot lacks `{k}`")))?;
            v.set(t)?;
        }
        Ok(())
    }

    /// Writes one `.tsr` file per parameter plus a manifest.
    pub fn save(&self, dir: &Path, manifest: &CheckpointManifest) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, var) in &self.vars {
            let t = var.as_tensor().to_dtype(DType::F32)?;
            let shape = t.dims().to_vec();
            let data = t.flatten_all()?.to_vec1::<f32>()?;
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| Error::Shape(e.to_string()))?;
            save_tensor(dir.join(format!("{name}.tsr")), &TensorData::F32(arr))?;
        }
        let mut m = manifest.clone();
        m.parameters = self.vars.keys().cloned().collect();
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))
    }

    /// Overwrites every parameter from `dir`; shapes must match.
    pub fn load(&self, dir: &Path) -> Result<CheckpointManifest> {
        let manifest = CheckpointManifest::read(dir)?;
        for (name, var) in &self.vars {
            let arr = load_tensor(dir.join(format!("{name}.tsr")))?.into_f32()?;
            if arr.shape() != var.dims() {
                return Err(Error::Shape(format!(
                    "checkpoint parameter `{name}` has shape {:?}, expected {:?}",
                    arr.shape(),
                    var.dims()
                )));
            }
            let data: Vec<f32> = arr.iter().copied().collect();
            let t = Tensor::from_vec(data, var.dims(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(manifest)
    }
}

/// Metadata written next to checkpoint tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: String,
    pub spec_hash: String,
    pub spec: serde_json::Value,
    pub seed: u64,
    pub trained: bool,
    #[serde(default)]
    pub parameters: Vec<String>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl CheckpointManifest {
    pub const VERSION: u32 = 1;

    pub fn new<S: Serialize>(kind: &str, spec: &S, seed: u64, trained: bool) -> Result<Self> {
        let spec = serde_json::to_value(spec)?;
        Ok(CheckpointManifest {
            format_version: Self::VERSION,
            kind: kind.to_string(),
            spec_hash: spec_hash(&spec)?,
            spec,
            seed,
            trained,
            parameters: Vec::new(),
            extra: serde_json::Value::Null,
        })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest = serde_json::from_str(&text)?;
        if m.format_version != Self::VERSION {
            return Err(Error::Invalid(format!("unsupported checkpoint version {}", m.format_version)));
        }
        Ok(m)
    }
}

/// SHA-256 of the compact JSON encoding.
pub fn spec_hash(value: &serde_json::Value) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
