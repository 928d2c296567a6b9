//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "SARFUSE\0"
//! version    u32       1
//! header_len u64       length of the JSON header in bytes
//! header     JSON      CheckpointMeta
//! payload    f32 LE    tensors concatenated in header order
//! ```
//!
//! Readers must reject unknown versions. New header fields may be added as
//! long as they carry serde defaults.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{build_model, BackboneConfig, ModelBundle, Variant};
use crate::error::{Error, Result};
use crate::nn::{Module, StateDict};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SARFUSE\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub seed: u64,
    /// Epoch the parameters were taken from, when known.
    #[serde(default)]
    pub epoch: Option<usize>,
    /// Validation F1 at that epoch, when known.
    #[serde(default)]
    pub val_f1: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    bundle: &ModelBundle,
    epoch: Option<usize>,
    val_f1: Option<f64>,
    path: &Path,
) -> Result<()> {
    let state = bundle.state_dict();
    let meta = CheckpointMeta {
        variant: bundle.variant,
        backbone: bundle.config,
        seed: bundle.seed,
        epoch,
        val_f1,
        tensors: state
            .iter()
            .map(|(k, v)| TensorEntry {
                name: k.clone(),
                len: v.len(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&meta).map_err(|e| Error::Internal(e.to_string()))?;
    let total: usize = state.values().map(Vec::len).sum();
    let mut buf = Vec::with_capacity(20 + header.len() + 4 * total);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in state.values() {
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so an interrupted save never leaves a truncated file
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("checkpoint {} is truncated", path.display())));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, StateDict)> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = raw.as_slice();
    if take(&mut bytes, 8, path)? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, path)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint {} has version {version}, expected {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(take(&mut bytes, 8, path)?.try_into().unwrap()) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut bytes, header_len, path)?)
        .map_err(|e| Error::Format(format!("checkpoint {} header: {e}", path.display())))?;
    let mut state = StateDict::new();
    for t in &meta.tensors {
        let chunk = take(&mut bytes, 4 * t.len, path)?;
        let v = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        state.insert(t.name.clone(), v);
    }
    if !bytes.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint {} has {} trailing bytes",
            path.display(),
            bytes.len()
        )));
    }
    Ok((meta, state))
}

/// Restores a bundle and the metadata stored with it.
pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, CheckpointMeta)> {
    let (meta, state) = read_checkpoint(path)?;
    // initial values are overwritten, the random source only fixes shapes
    let mut bundle = build_model(meta.variant, &meta.backbone, &mut ChaCha8Rng::seed_from_u64(0))?;
    bundle.load_state("", &state)?;
    bundle.seed = meta.seed;
    Ok((bundle, meta))
}
