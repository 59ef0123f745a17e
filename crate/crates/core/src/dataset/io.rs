//! Dataset container: 8-byte magic, little-endian `u32` header length, UTF-8
//! JSON header, then `n * T * K * d` little-endian `f32` values in
//! `(trajectory, time, agent, dim)` order.

use super::{Dataset, DatasetError, Domain, NormStats, Result, Split, Trajectory};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const DATASET_MAGIC: &[u8; 8] = b"MSTRAJ01";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    n: usize,
    #[serde(rename = "T")]
    t_len: usize,
    #[serde(rename = "K")]
    agents: usize,
    d: usize,
    domain: Domain,
    norm_mean: Vec<f64>,
    norm_scale: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

/// Writes `dataset` to `path`. States are stored as `f32`.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let (t_len, agents, d) = dataset.shape().unwrap_or((0, 0, dataset.stats.mean.len()));
    let header = Header {
        version: DATASET_VERSION,
        n: dataset.len(),
        t_len,
        agents,
        d,
        domain: dataset.domain,
        norm_mean: dataset.stats.mean.clone(),
        norm_scale: dataset.stats.scale.clone(),
        split: Some(dataset.split),
    };
    let json = serde_json::to_vec(&header).map_err(|e| DatasetError::CorruptHeader(e.to_string()))?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for tr in dataset.trajectories() {
        for &v in tr.states() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != DATASET_MAGIC {
        return Err(DatasetError::CorruptHeader("missing MSTRAJ01 magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body_start = 12 + hlen;
    if bytes.len() < body_start {
        return Err(DatasetError::CorruptHeader(format!(
            "header length {hlen} exceeds file size {}",
            bytes.len()
        )));
    }
    let header: Header =
        serde_json::from_slice(&bytes[12..body_start]).map_err(|e| DatasetError::CorruptHeader(e.to_string()))?;
    if header.version != DATASET_VERSION {
        return Err(DatasetError::UnsupportedVersion { found: header.version, supported: DATASET_VERSION });
    }
    let per_traj = header.t_len * header.agents * header.d;
    let expected = header.n * per_traj * 4;
    let body = &bytes[body_start..];
    if body.len() != expected {
        return Err(DatasetError::ShapeMismatch(format!(
            "header declares {} x {}x{}x{} values ({expected} bytes), file holds {} bytes",
            header.n,
            header.t_len,
            header.agents,
            header.d,
            body.len()
        )));
    }
    let stats = NormStats { mean: header.norm_mean, scale: header.norm_scale };
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let trajectories = if per_traj == 0 {
        Vec::new()
    } else {
        values
            .chunks_exact(per_traj)
            .map(|s| Trajectory::new(header.domain, header.t_len, header.agents, header.d, s.to_vec()))
            .collect::<Result<Vec<_>>>()?
    };
    Dataset::new(header.domain, header.split.unwrap_or(Split::Train), stats, trajectories)
}

/// Per-trajectory labels stored as a JSON array next to a dataset file.
pub fn save_sidecar_labels(labels: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_vec(labels).map_err(|e| DatasetError::CorruptHeader(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_sidecar_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| DatasetError::CorruptHeader(e.to_string()))
}
