//! Checkpoint directory: `manifest.json` (config, normalization, tensor index
//! with byte offsets, optional optimizer bookkeeping) next to `params.bin`,
//! a blob of little-endian `f32` values.

use super::{ModelConfig, ModelError};
use crate::dataset::NormStats;
use crate::nn::TensorData;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const CHECKPOINT_FORMAT: &str = "mstraj-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

/// Adam moments for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first: Vec<(String, TensorData)>,
    pub second: Vec<(String, TensorData)>,
}

/// What is needed to continue training where a run stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub epochs_completed: usize,
    pub seed: u64,
    pub optimizers: BTreeMap<String, OptimizerSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub norm: NormStats,
    pub params: Vec<(String, TensorData)>,
    pub training: Option<TrainingState>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingMeta {
    epochs_completed: usize,
    seed: u64,
    optimizers: BTreeMap<String, OptimizerMeta>,
}

/// The JSON manifest as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub norm: NormStats,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingMeta>,
}

impl Manifest {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().filter(|t| !t.name.starts_with("opt/")).map(|t| t.shape.iter().product::<usize>()).sum()
    }

    pub fn epochs_completed(&self) -> Option<usize> {
        self.training.as_ref().map(|t| t.epochs_completed)
    }
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

/// Reads and validates only the manifest.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest, ModelError> {
    let raw = fs::read(dir.as_ref().join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&raw).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(corrupt(format!("unknown format `{}`", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {} (supported: {CHECKPOINT_VERSION})", manifest.version)));
    }
    manifest.config.validate()?;
    Ok(manifest)
}

impl ModelCheckpoint {
    fn tensors(&self) -> Vec<(String, &TensorData)> {
        let mut out: Vec<(String, &TensorData)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(tr) = &self.training {
            for (group, snap) in &tr.optimizers {
                out.extend(snap.first.iter().map(|(n, t)| (format!("opt/{group}/m/{n}"), t)));
                out.extend(snap.second.iter().map(|(n, t)| (format!("opt/{group}/v/{n}"), t)));
            }
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), ModelError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut index = Vec::new();
        for (name, t) in self.tensors() {
            if t.data.len() != t.shape.iter().product::<usize>() {
                return Err(corrupt(format!("tensor `{name}` data does not match its shape")));
            }
            index.push(TensorEntry { name, shape: t.shape.clone(), offset: blob.len() as u64 });
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            norm: self.norm.clone(),
            blob: BLOB_FILE.into(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
            tensors: index,
            training: self.training.as_ref().map(|t| TrainingMeta {
                epochs_completed: t.epochs_completed,
                seed: t.seed,
                optimizers: t.optimizers.iter().map(|(k, s)| (k.clone(), OptimizerMeta { step: s.step })).collect(),
            }),
        };
        fs::write(dir.join(BLOB_FILE), &blob)?;
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| corrupt(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, ModelError> {
        let dir = dir.as_ref();
        let manifest = read_manifest(dir)?;
        let blob = fs::read(dir.join(&manifest.blob))?;
        if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
            return Err(corrupt("parameter blob checksum mismatch"));
        }
        let mut params = Vec::new();
        let mut moments: BTreeMap<String, (Vec<(String, TensorData)>, Vec<(String, TensorData)>)> = BTreeMap::new();
        for entry in &manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + 4 * n;
            if end > blob.len() {
                return Err(corrupt(format!("tensor `{}` extends past the blob", entry.name)));
            }
            let data = blob[start..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = TensorData { shape: entry.shape.clone(), data };
            match entry.name.strip_prefix("opt/") {
                None => params.push((entry.name.clone(), t)),
                Some(rest) => {
                    let mut parts = rest.splitn(3, '/');
                    let (group, which, name) = match (parts.next(), parts.next(), parts.next()) {
                        (Some(g), Some(w), Some(n)) => (g, w, n),
                        _ => return Err(corrupt(format!("malformed optimizer entry `{}`", entry.name))),
                    };
                    let slot = moments.entry(group.to_string()).or_default();
                    match which {
                        "m" => slot.0.push((name.to_string(), t)),
                        "v" => slot.1.push((name.to_string(), t)),
                        _ => return Err(corrupt(format!("malformed optimizer entry `{}`", entry.name))),
                    }
                }
            }
        }
        let training = match manifest.training {
            None => None,
            Some(meta) => {
                let mut optimizers = BTreeMap::new();
                for (group, m) in meta.optimizers {
                    let (first, second) = moments.remove(&group).unwrap_or_default();
                    optimizers.insert(group, OptimizerSnapshot { step: m.step, first, second });
                }
                Some(TrainingState { epochs_completed: meta.epochs_completed, seed: meta.seed, optimizers })
            }
        };
        Ok(Self { config: manifest.config, norm: manifest.norm, params, training })
    }
}
