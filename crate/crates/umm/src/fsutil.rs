//! Atomic file output and little-endian float blobs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, UmmError};

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(UmmError::io(dir))?;
        }
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(UmmError::io(&tmp))?;
    f.write_all(bytes).map_err(UmmError::io(&tmp))?;
    f.sync_all().map_err(UmmError::io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(UmmError::io(path))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(UmmError::io(path))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(UmmError::io(path))
}

pub fn f32_le_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

/// Decodes a blob of little-endian `f32`, checking its length.
pub fn f32_from_le(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) || bytes.len() / 4 != expected {
        return Err(UmmError::RasterLengthMismatch { path: path.to_path_buf(), expected, got: bytes.len() / 4 });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable value");
    v.push(b'\n');
    v
}

pub fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| UmmError::ConfigParse { path: path.to_path_buf(), message: e.to_string() })
}
