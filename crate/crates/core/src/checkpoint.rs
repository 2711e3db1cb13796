//! Checkpoint container.
//!
//! ```text
//! SDCKPT1\n
//! <manifest length in bytes, decimal>\n
//! <manifest JSON>
//! <blob>
//! ```
//!
//! The manifest holds the model config, one record per tensor and per mask
//! `{path, shape, offset, nbytes}` with offsets into the blob, and free-form
//! metadata. Tensors are little-endian f32. Masks are one bit per weight,
//! least-significant bit first, each mask padded to a whole byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{expected_shapes, ModelWeights, Transformer, TransformerConfig};
use crate::sparsity::{Bitmap, SparsityMask};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"SDCKPT1\n";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRecord {
    path: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: TransformerConfig,
    tensors: Vec<BlobRecord>,
    #[serde(default)]
    masks: Vec<BlobRecord>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Transformer<f32>,
    pub mask: Option<SparsityMask>,
    /// Provenance and anything else the writer chose to record.
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Transformer<f32>) -> Self {
        Self {
            model,
            mask: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (path, t) in self.model.weights.iter() {
            let offset = blob.len();
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            tensors.push(BlobRecord {
                path: path.clone(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: blob.len() - offset,
            });
        }
        let mut masks = Vec::new();
        if let Some(mask) = &self.mask {
            mask.check_against(&self.model.weights)?;
            for (path, bitmap) in mask.iter() {
                let offset = blob.len();
                blob.extend_from_slice(&bitmap.pack());
                masks.push(BlobRecord {
                    path: path.clone(),
                    shape: bitmap.shape().to_vec(),
                    offset,
                    nbytes: blob.len() - offset,
                });
            }
        }
        let manifest = serde_json::to_vec(&Manifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.model.config.clone(),
            tensors,
            masks,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 16 + manifest.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(format!("{}\n", manifest.len()).as_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptManifest(m.to_string());
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| corrupt("bad magic"))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("missing manifest length"))?;
        let len: usize = std::str::from_utf8(&rest[..nl])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("unreadable manifest length"))?;
        let rest = &rest[nl + 1..];
        if rest.len() < len {
            return Err(corrupt("manifest runs past end of file"));
        }
        let manifest: Manifest = serde_json::from_slice(&rest[..len])
            .map_err(|e| Error::CorruptManifest(e.to_string()))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::CorruptManifest(format!(
                "unsupported format version {}",
                manifest.format_version
            )));
        }
        let blob = &rest[len..];
        manifest
            .config
            .validate()
            .map_err(|e| Error::CorruptManifest(e.to_string()))?;

        let slice = |r: &BlobRecord, expect: usize| -> Result<&[u8]> {
            if r.nbytes != expect {
                return Err(Error::CheckpointShape {
                    path: r.path.clone(),
                    detail: format!("shape {:?} needs {expect} bytes, record says {}", r.shape, r.nbytes),
                });
            }
            let end = r.offset.checked_add(r.nbytes).unwrap_or(usize::MAX);
            if end > blob.len() {
                return Err(Error::TruncatedBlob {
                    path: r.path.clone(),
                    needed: end,
                    available: blob.len(),
                });
            }
            Ok(&blob[r.offset..end])
        };

        let shapes = expected_shapes(&manifest.config);
        let mut weights = ModelWeights::from_map(Default::default());
        let mut used = 0;
        for r in &manifest.tensors {
            match shapes.get(&r.path) {
                Some(s) if *s == r.shape => {}
                Some(s) => {
                    return Err(Error::CheckpointShape {
                        path: r.path.clone(),
                        detail: format!("stored {:?}, config implies {s:?}", r.shape),
                    })
                }
                None => {
                    return Err(Error::CheckpointShape {
                        path: r.path.clone(),
                        detail: "not part of this architecture".into(),
                    })
                }
            }
            let numel: usize = r.shape.iter().product();
            let bytes = slice(r, numel * 4)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            weights.insert(r.path.clone(), Tensor::new(r.shape.clone(), data)?);
            used = used.max(r.offset + r.nbytes);
        }
        let model = Transformer::new(manifest.config.clone(), weights).map_err(|e| match e {
            Error::Shape(detail) => Error::CheckpointShape {
                path: "<weights>".into(),
                detail,
            },
            other => other,
        })?;

        let mask = if manifest.masks.is_empty() {
            None
        } else {
            let mut mask = SparsityMask::new();
            for r in &manifest.masks {
                let numel: usize = r.shape.iter().product();
                let bytes = slice(r, numel.div_ceil(8))?;
                mask.insert(r.path.clone(), Bitmap::unpack(&r.shape, bytes)?);
                used = used.max(r.offset + r.nbytes);
            }
            mask.check_against(&model.weights).map_err(|e| Error::CheckpointShape {
                path: "<masks>".into(),
                detail: e.to_string(),
            })?;
            Some(mask)
        };
        if used != blob.len() {
            return Err(Error::CorruptManifest(format!(
                "blob holds {} bytes, records cover {used}",
                blob.len()
            )));
        }
        Ok(Self {
            model,
            mask,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Hex SHA-256 of the serialized weights (config included), used to tie
/// datasets and reports to the model that produced them.
pub fn fingerprint(model: &Transformer<f32>) -> Result<String> {
    let bytes = Checkpoint::new(model.clone()).to_bytes()?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}
