//! Checkpoint tensor store: a JSON manifest plus little-endian f32 blobs.
//!
//! Directory layout: `manifest.json`, `base.bin` (frozen encoder tensors),
//! `adapters.bin` (one `<block>.<site>.<step>.{down,up}` pair per bank
//! entry), `prototypes.bin`, `stats/<domain>.stats`, `log.csv`.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
    pub offset: u64,
}

/// Accumulates tensors for one blob file, recording manifest entries.
pub struct BlobWriter {
    file: &'static str,
    buf: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl BlobWriter {
    pub fn new(file: &'static str) -> Self {
        Self {
            file,
            buf: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, m: &Matrix<f32>) {
        self.entries.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            file: self.file.to_string(),
            offset: self.buf.len() as u64,
        });
        for &v in m.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish(self, dir: &Path) -> Result<Vec<TensorEntry>> {
        std::fs::write(dir.join(self.file), &self.buf)?;
        Ok(self.entries)
    }
}

/// Reads tensors back out of the blob files by manifest name.
pub struct BlobReader {
    entries: BTreeMap<String, TensorEntry>,
    files: BTreeMap<String, Vec<u8>>,
}

impl BlobReader {
    pub fn open(dir: &Path, entries: &[TensorEntry]) -> Result<Self> {
        let mut files = BTreeMap::new();
        let mut map = BTreeMap::new();
        for e in entries {
            if !files.contains_key(&e.file) {
                files.insert(e.file.clone(), std::fs::read(dir.join(&e.file))?);
            }
            if map.insert(e.name.clone(), e.clone()).is_some() {
                return Err(Error::Format(format!("duplicate tensor '{}'", e.name)));
            }
        }
        Ok(Self { entries: map, files })
    }

    pub fn get(&self, name: &str) -> Result<Matrix<f32>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))?;
        let bytes = &self.files[&e.file];
        let n = e.rows * e.cols;
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > bytes.len() {
            return Err(Error::Format(format!(
                "tensor '{name}' overruns {} ({} > {})",
                e.file,
                end,
                bytes.len()
            )));
        }
        let mut data = vec![0.0f32; n];
        for (v, chunk) in data.iter_mut().zip(bytes[start..end].chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        Matrix::from_vec(e.rows, e.cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = BlobWriter::new("base.bin");
        let a = Matrix::from_rows(&[vec![1.0f32, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::filled(1, 3, -0.5f32);
        w.push("a", &a);
        w.push("b", &b);
        let entries = w.finish(dir.path()).unwrap();
        let r = BlobReader::open(dir.path(), &entries).unwrap();
        assert_eq!(r.get("a").unwrap(), a);
        assert_eq!(r.get("b").unwrap(), b);
        assert!(matches!(r.get("missing"), Err(Error::Format(_))));
    }
}
