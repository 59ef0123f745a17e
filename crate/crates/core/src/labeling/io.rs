//! Label file: 8-byte magic, little-endian `u32` header length, JSON header,
//! then one `T x K` block of little-endian `i16` labels per trajectory.

use super::{LabelError, MacroIntentSequence, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const LABELS_MAGIC: &[u8; 8] = b"MSLABL01";
pub const LABELS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    n: usize,
    #[serde(rename = "T")]
    t_len: usize,
    #[serde(rename = "K")]
    agents: usize,
    #[serde(rename = "C")]
    categories: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labeling: Option<serde_json::Value>,
}

/// Writes label sequences; `labeling` records the function that produced
/// them (free-form JSON).
pub fn save_labels(seqs: &[MacroIntentSequence], labeling: Option<serde_json::Value>, path: impl AsRef<Path>) -> Result<()> {
    let first = seqs.first();
    let header = Header {
        version: LABELS_VERSION,
        n: seqs.len(),
        t_len: first.map_or(0, |s| s.len()),
        agents: first.map_or(0, |s| s.agents()),
        categories: first.map_or(0, |s| s.categories()),
        labeling,
    };
    if seqs.iter().any(|s| (s.len(), s.agents(), s.categories()) != (header.t_len, header.agents, header.categories)) {
        return Err(LabelError::ShapeMismatch("label sequences must share T, K and C".into()));
    }
    let json = serde_json::to_vec(&header).map_err(|e| LabelError::Corrupt(e.to_string()))?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(LABELS_MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for s in seqs {
        for &l in s.labels() {
            out.write_all(&(l as i16).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<MacroIntentSequence>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != LABELS_MAGIC {
        return Err(LabelError::Corrupt("missing MSLABL01 magic".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(LabelError::Corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| LabelError::Corrupt(e.to_string()))?;
    if header.version != LABELS_VERSION {
        return Err(LabelError::Corrupt(format!("unsupported label file version {}", header.version)));
    }
    let per = header.t_len * header.agents;
    let body = &bytes[12 + hlen..];
    if body.len() != header.n * per * 2 {
        return Err(LabelError::ShapeMismatch(format!(
            "expected {} label bytes, found {}",
            header.n * per * 2,
            body.len()
        )));
    }
    let values: Vec<i16> = body.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
    if per == 0 {
        return Ok(Vec::new());
    }
    values
        .chunks_exact(per)
        .map(|chunk| {
            let labels = chunk
                .iter()
                .map(|&v| u16::try_from(v).map_err(|_| LabelError::Corrupt(format!("negative label {v}"))))
                .collect::<Result<Vec<u16>>>()?;
            MacroIntentSequence::new(header.t_len, header.agents, header.categories, labels)
        })
        .collect()
}
