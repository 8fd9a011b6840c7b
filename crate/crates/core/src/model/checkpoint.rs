//! On-disk checkpoints: a JSON manifest next to one little-endian blob.
//!
//! The blob holds every parameter array in layout order, followed by the
//! Adam first and second moments when present. The manifest records names,
//! shapes and byte offsets so the blob can be read without this crate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::linalg::Scalar;
use crate::rng::RngPosition;

use super::{ModelConfig, ModelError, ModelParams};

const FORMAT: &str = "icl-lab-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
    pub byte_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentRecord {
    /// Adam step counter.
    pub t: u64,
    pub first_byte_offset: usize,
    pub second_byte_offset: usize,
    pub byte_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub dtype: String,
    pub step: u64,
    pub master_seed: u64,
    pub rng: Option<RngPosition>,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub blob_bytes: usize,
    pub params: Vec<TensorRecord>,
    pub optimizer: Option<MomentRecord>,
    /// Free-form run metadata (training config, run id, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Adam moments mirroring the parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentBlob<T> {
    pub t: u64,
    pub first: Vec<T>,
    pub second: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub moments: Option<MomentBlob<T>>,
    pub step: u64,
    pub master_seed: u64,
    pub rng: Option<RngPosition>,
    pub extra: serde_json::Value,
}

/// Parameters of either precision, for callers that only know the path.
#[derive(Clone, Debug)]
pub enum AnyParams {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

impl AnyParams {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyParams::F32(p) => p.config(),
            AnyParams::F64(p) => p.config(),
        }
    }

    pub fn load(manifest: &Path) -> Result<Self, ModelError> {
        let m = read_manifest(manifest)?;
        match m.dtype.as_str() {
            "f32" => Ok(AnyParams::F32(load_checkpoint::<f32>(manifest)?.params)),
            "f64" => Ok(AnyParams::F64(load_checkpoint::<f64>(manifest)?.params)),
            other => Err(ModelError::Format(format!("unknown dtype {other}"))),
        }
    }
}

/// File stem used for the checkpoint at `step`.
pub fn checkpoint_stem(step: u64) -> String {
    format!("ckpt-{step:09}")
}

/// Writes `<dir>/ckpt-<step>.json` and `.bin` and returns the manifest path.
/// Both files are written to temporaries and renamed into place.
pub fn save_checkpoint<T: Scalar>(dir: &Path, ck: &Checkpoint<T>) -> Result<PathBuf, ModelError> {
    fs::create_dir_all(dir)?;
    let stem = checkpoint_stem(ck.step);
    let n = ck.params.flat().len();
    let mut blob = Vec::with_capacity(n * T::BYTES * if ck.moments.is_some() { 3 } else { 1 });
    for v in ck.params.flat() {
        v.write_le(&mut blob);
    }
    let records = ck
        .params
        .layout()
        .entries()
        .iter()
        .map(|e| TensorRecord {
            name: e.name.clone(),
            shape: e.shape.clone(),
            byte_offset: e.offset * T::BYTES,
            byte_len: e.len * T::BYTES,
        })
        .collect();
    let optimizer = match &ck.moments {
        Some(m) => {
            if m.first.len() != n || m.second.len() != n {
                return Err(ModelError::Shape("optimizer moments do not mirror the parameters".into()));
            }
            let first_byte_offset = blob.len();
            for v in &m.first {
                v.write_le(&mut blob);
            }
            let second_byte_offset = blob.len();
            for v in &m.second {
                v.write_le(&mut blob);
            }
            Some(MomentRecord { t: m.t, first_byte_offset, second_byte_offset, byte_len: n * T::BYTES })
        }
        None => None,
    };
    let blob_name = format!("{stem}.bin");
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        model: ck.params.config().clone(),
        dtype: T::DTYPE.into(),
        step: ck.step,
        master_seed: ck.master_seed,
        rng: ck.rng,
        blob: blob_name.clone(),
        blob_bytes: blob.len(),
        params: records,
        optimizer,
        extra: ck.extra.clone(),
    };
    write_atomic(&dir.join(&blob_name), &blob)?;
    let path = dir.join(format!("{stem}.json"));
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ModelError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest, ModelError> {
    let m: CheckpointManifest = serde_json::from_slice(&fs::read(path)?)?;
    if m.format != FORMAT {
        return Err(ModelError::Format(format!("unsupported format {:?}", m.format)));
    }
    Ok(m)
}

fn decode<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes.chunks_exact(T::BYTES).map(T::read_le).collect()
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, ModelError> {
    let m = read_manifest(path)?;
    if m.dtype != T::DTYPE {
        return Err(ModelError::Format(format!("checkpoint holds {} values, requested {}", m.dtype, T::DTYPE)));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let blob = fs::read(dir.join(&m.blob))?;
    if blob.len() != m.blob_bytes {
        return Err(ModelError::Format(format!("blob has {} bytes, manifest says {}", blob.len(), m.blob_bytes)));
    }
    let mut params = ModelParams::<T>::zeros(&m.model)?;
    if params.layout().entries().len() != m.params.len() {
        return Err(ModelError::Format("parameter list does not match the model config".into()));
    }
    let entries = params.layout().entries().to_vec();
    for (e, r) in entries.iter().zip(&m.params) {
        if e.name != r.name || e.shape != r.shape || r.byte_len != e.len * T::BYTES {
            return Err(ModelError::Format(format!("unexpected tensor {} {:?}", r.name, r.shape)));
        }
        let src = blob
            .get(r.byte_offset..r.byte_offset + r.byte_len)
            .ok_or_else(|| ModelError::Format(format!("tensor {} lies outside the blob", r.name)))?;
        params.at_mut(e.offset, e.len).copy_from_slice(&decode::<T>(src));
    }
    let moments = match &m.optimizer {
        Some(o) => {
            let n = params.flat().len();
            if o.byte_len != n * T::BYTES {
                return Err(ModelError::Format("optimizer moments do not mirror the parameters".into()));
            }
            let get = |off: usize| {
                blob.get(off..off + o.byte_len)
                    .map(decode::<T>)
                    .ok_or_else(|| ModelError::Format("optimizer moments lie outside the blob".into()))
            };
            Some(MomentBlob { t: o.t, first: get(o.first_byte_offset)?, second: get(o.second_byte_offset)? })
        }
        None => None,
    };
    Ok(Checkpoint { params, moments, step: m.step, master_seed: m.master_seed, rng: m.rng, extra: m.extra })
}

/// Manifest with the highest step in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>, ModelError> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
        let Some(step) = name.strip_prefix("ckpt-").and_then(|s| s.strip_suffix(".json")) else {
            continue;
        };
        if let Ok(step) = step.parse::<u64>() {
            if best.as_ref().is_none_or(|(s, _)| step > *s) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
