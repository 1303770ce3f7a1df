//! Versioned binary checkpoint for the proxy model.
//!
//! Layout: 8-byte magic, little-endian u32 version, little-endian u64 JSON
//! manifest length, the JSON manifest (tensor names/shapes in order), then
//! raw little-endian 32-bit float parameter blobs in manifest order. A JSON
//! mirror of the manifest is written next to the checkpoint for inspection.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::ProxyModel;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RSPROXY\x01";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub seed: u64,
    pub total_params: usize,
    pub tensors: Vec<TensorEntry>,
}

/// `<checkpoint>.manifest.json` next to the binary file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

pub fn save_checkpoint(model: &ProxyModel, path: &Path) -> Result<()> {
    let tensors = model.tensors();
    let manifest = CheckpointManifest {
        version: VERSION,
        seed: model.seed,
        total_params: tensors.iter().map(|(_, _, d)| d.len()).sum(),
        tensors: tensors
            .iter()
            .map(|(name, shape, data)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                count: data.len(),
            })
            .collect(),
    };
    let manifest_json = serde_json::to_vec_pretty(&manifest)?;
    let mut buf = Vec::with_capacity(manifest_json.len() + manifest.total_params * 4 + 24);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_json);
    for (_, _, data) in &tensors {
        for &v in *data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &buf)?;
    write_atomic(&manifest_path(path), &manifest_json)?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ProxyModel> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let fail = |reason: &str| Error::format("checkpoint", reason);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + mlen {
        return Err(fail("truncated manifest"));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[20..20 + mlen])?;
    let blob = &bytes[20 + mlen..];
    if blob.len() != manifest.total_params * 4 {
        return Err(fail(&format!(
            "parameter blob is {} bytes, expected {}",
            blob.len(),
            manifest.total_params * 4
        )));
    }
    let mut model = ProxyModel::new(manifest.seed);
    let mut offset = 0usize;
    let expected = model.tensors().len();
    if manifest.tensors.len() != expected {
        return Err(fail(&format!(
            "manifest lists {} tensors, model has {expected}",
            manifest.tensors.len()
        )));
    }
    for ((name, shape, data), entry) in model.tensors_mut().into_iter().zip(&manifest.tensors) {
        if entry.name != name || entry.shape != shape || entry.count != data.len() {
            return Err(Error::format(
                "checkpoint",
                &format!("tensor mismatch at {}: expected {name} {shape:?}", entry.name),
            ));
        }
        for v in data.iter_mut() {
            let raw: [u8; 4] = blob[offset..offset + 4].try_into().unwrap();
            *v = f32::from_le_bytes(raw) as f64;
            offset += 4;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::BayerPattern;
    use crate::synth::photo_like_raw;

    #[test]
    fn round_trip_preserves_f32_quantized_parameters() {
        let model = ProxyModel::new(21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proxy.ckpt");
        save_checkpoint(&model, &path).unwrap();
        assert!(manifest_path(&path).exists());
        let loaded = load_checkpoint(&path).unwrap();
        for ((n1, _, t1), (_, _, t2)) in model.tensors().into_iter().zip(loaded.tensors()) {
            for (a, b) in t1.iter().zip(t2.iter()) {
                assert_eq!(*a as f32, *b as f32, "tensor {n1}");
            }
        }
        assert_eq!(loaded.seed, 21);
    }

    #[test]
    fn reloaded_model_reproduces_outputs() {
        let model = ProxyModel::new(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proxy.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let raw = photo_like_raw(16, 16, BayerPattern::Rggb, 3).unwrap();
        let a = model.forward_unclamped(&raw).unwrap();
        let b = loaded.forward_unclamped(&raw).unwrap();
        // parameters round-trip through f32, so outputs agree to f32 noise
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn save_is_byte_deterministic() {
        let model = ProxyModel::new(4);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&model, &p1).unwrap();
        save_checkpoint(&model, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
        // valid header, truncated blob
        let model = ProxyModel::new(0);
        let good = dir.path().join("good.ckpt");
        save_checkpoint(&model, &good).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 100);
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
