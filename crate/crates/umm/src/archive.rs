//! Embedding archives: JSON Lines with a `{"version","dim","count"}` header.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use umm_core::retrieval::EmbeddingRecord;
use umm_core::ModalitySet;

use crate::error::{Result, UmmError};
use crate::fsutil;

pub const ARCHIVE_VERSION: u32 = 1;
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dim: usize,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    sample_id: String,
    identity_id: u32,
    view_index: u32,
    modalities: ModalitySet,
    vec: Vec<f64>,
}

pub fn encode_archive(records: &[EmbeddingRecord]) -> Vec<u8> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    let mut out = serde_json::to_vec(&Header { version: ARCHIVE_VERSION, dim, count: records.len() }).expect("header");
    out.push(b'\n');
    for r in records {
        let line = Line {
            sample_id: r.sample_id.clone(),
            identity_id: r.identity_id,
            view_index: r.view_index,
            modalities: r.modalities,
            vec: r.vector.clone(),
        };
        serde_json::to_writer(&mut out, &line).expect("record");
        out.push(b'\n');
    }
    out
}

pub fn save_archive(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode_archive(records))
}

pub fn load_archive(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = fsutil::read_string(path)?;
    let bad = |message: String| UmmError::InvalidArchive { path: path.to_path_buf(), message };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Header = fsutil::parse_json(path, lines.next().ok_or_else(|| bad("empty archive".into()))?)?;
    if header.version != ARCHIVE_VERSION {
        return Err(UmmError::VersionMismatch { what: "archive", expected: ARCHIVE_VERSION, found: header.version });
    }
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(header.count);
    for (i, l) in lines.enumerate() {
        let line: Line = fsutil::parse_json(path, l)?;
        if line.vec.len() != header.dim {
            return Err(bad(format!("record {i} has dimension {}, header says {}", line.vec.len(), header.dim)));
        }
        let norm = line.vec.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(bad(format!("record {} has norm {norm}", line.sample_id)));
        }
        if !seen.insert(line.sample_id.clone()) {
            return Err(bad(format!("duplicate sample_id {}", line.sample_id)));
        }
        records.push(EmbeddingRecord {
            sample_id: line.sample_id,
            identity_id: line.identity_id,
            view_index: line.view_index,
            modalities: line.modalities,
            vector: line.vec,
        });
    }
    if records.len() != header.count {
        return Err(bad(format!("header count {} but {} records", header.count, records.len())));
    }
    Ok(records)
}
