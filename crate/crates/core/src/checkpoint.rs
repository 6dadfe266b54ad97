//! Checkpoint directories: `manifest.json` plus raw little-endian `weights.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `weights.bin`.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Number of completed optimizer steps.
    pub step: usize,
    pub tau: f64,
    /// Lowest smoothed total loss seen at a checkpoint, and its step.
    pub best: Option<(f64, usize)>,
    /// Trailing total losses used for smoothing.
    pub recent_totals: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub config: RunConfig,
    pub training: Option<TrainingMeta>,
    pub tensors: Vec<TensorEntry>,
}

/// An in-memory checkpoint: ordered named tensors and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: RunConfig,
    pub training: Option<TrainingMeta>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset: bytes.len() as u64,
            });
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            training: self.training.clone(),
            tensors: entries,
        };
        let weights = dir.join(WEIGHTS_FILE);
        fs::write(&weights, bytes).map_err(|e| Error::io(&weights, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let wpath = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let width = match e.dtype.as_str() {
                "f64" => 8,
                "f32" => 4,
                other => return Err(Error::format(&wpath, format!("unsupported dtype {other:?}"))),
            };
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * width;
            let raw = bytes.get(start..end).ok_or_else(|| {
                Error::format(&wpath, format!("tensor {} runs past the end of the file", e.name))
            })?;
            let data = if width == 8 {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect()
            };
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)));
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            training: manifest.training,
            tensors,
        })
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported format version {}", m.format_version),
        ));
    }
    Ok(m)
}

/// Directory name of the checkpoint written after `step` updates.
pub fn step_dir(root: &Path, step: usize) -> PathBuf {
    root.join(format!("step_{step:06}.ckpt"))
}

pub fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to).map_err(|e| Error::io(to, e))?;
    for f in [MANIFEST_FILE, WEIGHTS_FILE] {
        let (src, dst) = (from.join(f), to.join(f));
        fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
    }
    Ok(())
}

/// Copies every model tensor from `ckpt` into `store`, checking shapes.
pub fn load_params(store: &mut ParamStore, ckpt: &Checkpoint, origin: &Path) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = ckpt
            .get(&name)
            .ok_or_else(|| Error::format(origin, format!("missing tensor {name}")))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::format(
                origin,
                format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), store.get(id).shape()),
            ));
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}
