//! Tensor container: a JSON manifest plus one raw little-endian f64 blob.
//!
//! `save_tensors("path/base", ...)` writes `base.json` and `base.bin`.
//! Loading validates the blob length against the manifest, checks every
//! value is finite, and reports byte offsets on corruption. Checkpoints and
//! dataset dumps share this container.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this tensor's first value inside the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub total_bytes: u64,
    pub tensors: Vec<ManifestEntry>,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

/// Write named tensors to `base.json` + `base.bin`.
pub fn save_tensors(base: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut manifest = Manifest {
        total_bytes: 0,
        tensors: Vec::with_capacity(entries.len()),
    };
    let mut offset = 0u64;
    for (name, t) in entries {
        manifest.tensors.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        offset += (t.numel() * 8) as u64;
    }
    manifest.total_bytes = offset;

    let (mpath, bpath) = paths(base);
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    std::fs::write(&mpath, json)?;

    let mut blob = std::io::BufWriter::new(std::fs::File::create(&bpath)?);
    for (_, t) in entries {
        for v in &t.data {
            blob.write_all(&v.to_le_bytes())?;
        }
    }
    blob.flush()?;
    Ok(())
}

/// Read a container back as (name, tensor) pairs in manifest order.
pub fn load_tensors(base: &Path) -> Result<Vec<(String, Tensor)>> {
    let (mpath, bpath) = paths(base);
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&mpath)?)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;

    let mut blob = Vec::new();
    std::fs::File::open(&bpath)?.read_to_end(&mut blob)?;
    if blob.len() as u64 != manifest.total_bytes {
        return Err(Error::Checkpoint(format!(
            "blob length {} does not match manifest total {} (truncated at byte {})",
            blob.len(),
            manifest.total_bytes,
            blob.len().min(manifest.total_bytes as usize)
        )));
    }

    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} spans bytes {start}..{end} beyond blob of {}",
                entry.name,
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for (i, chunk) in blob[start..end].chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "non-finite value in tensor {} at byte offset {}",
                    entry.name,
                    start + i * 8
                )));
            }
            data.push(v);
        }
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ckpt");
        let a = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.1, 7.0, -0.0, 3.125]).unwrap();
        let b = Tensor::new(vec![4], vec![0.3, f64::MIN_POSITIVE, 1e300, -1e-300]).unwrap();
        save_tensors(&base, &[("alpha".into(), &a), ("beta".into(), &b)]).unwrap();
        let loaded = load_tensors(&base).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "alpha");
        assert_eq!(loaded[0].1.shape, a.shape);
        assert_eq!(loaded[0].1.data, a.data);
        assert_eq!(loaded[1].1.data, b.data);
    }

    #[test]
    fn truncated_blob_reports_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ckpt");
        let a = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        save_tensors(&base, &[("a".into(), &a)]).unwrap();
        let bin = base.with_extension("bin");
        let blob = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &blob[..16]).unwrap();
        match load_tensors(&base) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("16"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn corrupted_values_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ckpt");
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        save_tensors(&base, &[("a".into(), &a)]).unwrap();
        let bin = base.with_extension("bin");
        let mut blob = std::fs::read(&bin).unwrap();
        blob[8..16].copy_from_slice(&f64::NAN.to_le_bytes());
        std::fs::write(&bin, &blob).unwrap();
        match load_tensors(&base) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("offset 8"), "{msg}"),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }
}
