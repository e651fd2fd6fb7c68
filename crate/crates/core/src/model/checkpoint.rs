use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CclmConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    params: Vec<Entry>,
    total_bytes: u64,
}

/// Named f32 tensors plus free-form metadata, stored as a JSON manifest and a
/// little-endian blob.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl TensorArchive {
    pub fn save(&self, dir: &Path, manifest_file: &str, blob_file: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut params = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            params.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            meta: self.meta.clone(),
            params,
            total_bytes: blob.len() as u64,
        };
        // Blob first: a manifest on disk always describes a complete blob.
        write_atomic(&dir.join(blob_file), &blob)?;
        write_atomic(
            &dir.join(manifest_file),
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )
    }

    pub fn load(dir: &Path, manifest_file: &str, blob_file: &str) -> Result<Self> {
        let mpath = dir.join(manifest_file);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let bpath = dir.join(blob_file);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if blob.len() as u64 != manifest.total_bytes {
            return Err(Error::Checkpoint(format!(
                "{} holds {} bytes, manifest expects {}",
                bpath.display(),
                blob.len(),
                manifest.total_bytes
            )));
        }
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in manifest.params {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n as u64;
            if e.offset != expected_offset || end > manifest.total_bytes {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has an inconsistent byte range",
                    e.name
                )));
            }
            expected_offset = end;
            let data = blob[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            tensors.insert(e.name, Tensor::new(e.shape, data)?);
        }
        if expected_offset != manifest.total_bytes {
            return Err(Error::Checkpoint(
                "manifest does not cover the whole blob".into(),
            ));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }
}

pub fn save_checkpoint(dir: &Path, weights: &ModelWeights) -> Result<()> {
    let archive = TensorArchive {
        meta: serde_json::json!({ "config": weights.config }),
        tensors: weights.tensors().clone(),
    };
    archive.save(dir, MANIFEST_FILE, WEIGHTS_FILE)
}

/// Loads and shape-checks a checkpoint against the config stored with it.
pub fn load_checkpoint(dir: &Path) -> Result<ModelWeights> {
    let archive = TensorArchive::load(dir, MANIFEST_FILE, WEIGHTS_FILE)?;
    let config: CclmConfig = serde_json::from_value(
        archive
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("manifest has no config".into()))?,
    )?;
    ModelWeights::from_tensors(config, archive.tensors)
}

/// SHA-256 over the manifest and weight blob of a checkpoint directory.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for f in [MANIFEST_FILE, WEIGHTS_FILE] {
        let p = dir.join(f);
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}
