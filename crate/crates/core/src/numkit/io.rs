//! Container file format shared by checkpoints, banks, and layer stacks.
//!
//! Layout: an 8-byte magic, a little-endian u64 JSON length, the JSON
//! manifest, then the payload blob. Matrices are row-major little-endian
//! f64 runs; each manifest entry records `{name, rows, cols, byte_offset}`
//! with the offset relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Matrix;

const MAGIC: &[u8; 8] = b"RESAGBIN";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest<H> {
    header: H,
    matrices: Vec<ManifestEntry>,
}

pub fn to_bytes<H: Serialize>(header: &H, matrices: &[(&str, &Matrix)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(matrices.len());
    let mut offset = 0u64;
    for (name, m) in matrices {
        if !m.is_finite() {
            return Err(Error::invalid_input(format!(
                "matrix {name} has non-finite entries"
            )));
        }
        entries.push(ManifestEntry {
            name: (*name).to_string(),
            rows: m.rows(),
            cols: m.cols(),
            byte_offset: offset,
        });
        offset += (m.data().len() * 8) as u64;
    }
    let manifest = Manifest {
        header,
        matrices: entries,
    };
    let json = serde_json::to_vec(&manifest)?;

    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in matrices {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<(String, Matrix)>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing container magic".into()));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json_end = 16 + json_len;
    if bytes.len() < json_end {
        return Err(Error::Format("truncated manifest".into()));
    }
    let manifest: Manifest<H> = serde_json::from_slice(&bytes[16..json_end])?;
    let payload = &bytes[json_end..];

    let mut matrices = Vec::with_capacity(manifest.matrices.len());
    for entry in &manifest.matrices {
        let start = entry.byte_offset as usize;
        let len = entry.rows * entry.cols * 8;
        let end = start + len;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "matrix {} extends past payload end",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(entry.rows * entry.cols);
        for chunk in payload[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        matrices.push((
            entry.name.clone(),
            Matrix::from_vec(entry.rows, entry.cols, data),
        ));
    }
    Ok((manifest.header, matrices))
}

pub fn write_container<H: Serialize>(
    path: &Path,
    header: &H,
    matrices: &[(&str, &Matrix)],
) -> Result<()> {
    let bytes = to_bytes(header, matrices)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<(String, Matrix)>)> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

/// Lookup helper for the matrix list returned by [`read_container`].
pub fn take_matrix(matrices: &[(String, Matrix)], name: &str) -> Result<Matrix> {
    matrices
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, m)| m.clone())
        .ok_or_else(|| Error::Format(format!("container is missing matrix {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_preserves_bits() {
        let a = Matrix::from_rows(&[vec![1.5, -2.25], vec![f64::MIN_POSITIVE, 3e300]]);
        let b = Matrix::col_vec(&[0.1, 0.2, 0.3]);
        let header = json!({"kind": "test", "n": 2});
        let bytes = to_bytes(&header, &[("a", &a), ("b", &b)]).unwrap();
        let (h, mats): (serde_json::Value, _) = from_bytes(&bytes).unwrap();
        assert_eq!(h["kind"], "test");
        let a2 = take_matrix(&mats, "a").unwrap();
        let b2 = take_matrix(&mats, "b").unwrap();
        assert_eq!(a2.shape(), (2, 2));
        for (x, y) in a.data().iter().zip(a2.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in b.data().iter().zip(b2.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOTMAGIC\0\0\0\0\0\0\0\0".to_vec();
        let res: Result<(serde_json::Value, _)> = from_bytes(&bytes);
        assert!(matches!(res, Err(Error::Format(_))));
    }
}
