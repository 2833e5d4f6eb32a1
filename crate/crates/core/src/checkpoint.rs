//! Versioned binary checkpoints with a JSON config sidecar.
//!
//! Layout: magic `CTVQ-CKPT`, `u32` format version, `u32` tensor count, then
//! per tensor a `u32` name length, the UTF-8 name, `u32` rows, `u32` cols and
//! `rows·cols` little-endian `f64` values. All integers are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, VqaModel};
use crate::numerics::Tensor2;
use crate::params::ParamStore;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"CTVQ-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// `model.ckpt` → `model.ckpt.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_params(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let available = bytes.len() - *pos;
    if available < n {
        return Err(Error::Format {
            offset: *pos,
            detail: format!("truncated {what}: expected {n} bytes, found {available}"),
        });
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let b = take(bytes, pos, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

/// Named tensors in file order.
pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, Tensor2)>> {
    let mut pos = 0;
    let magic = take(bytes, &mut pos, CHECKPOINT_MAGIC.len(), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = read_u32(bytes, &mut pos, "format version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint format {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = read_u32(bytes, &mut pos, "tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(bytes, &mut pos, "name length")? as usize;
        let at = pos;
        let name = std::str::from_utf8(take(bytes, &mut pos, len, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rows = read_u32(bytes, &mut pos, "rows")? as usize;
        let cols = read_u32(bytes, &mut pos, "cols")? as usize;
        let raw = take(bytes, &mut pos, rows * cols * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor2::from_vec(rows, cols, data)?));
    }
    if pos != bytes.len() {
        return Err(Error::Format {
            offset: pos,
            detail: format!("{} trailing bytes", bytes.len() - pos),
        });
    }
    Ok(out)
}

pub fn save(path: &Path, model: &VqaModel, train: &TrainConfig) -> Result<()> {
    fs::write(path, encode_params(&model.params))?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        train: train.clone(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Rebuilds the model described by the sidecar and fills in the stored
/// tensors; any disagreement in names or shapes is a version error.
pub fn load(path: &Path) -> Result<(VqaModel, CheckpointMeta)> {
    let meta_text = fs::read_to_string(sidecar_path(path))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint config format {} is not supported (expected {CHECKPOINT_VERSION})",
            meta.format_version
        )));
    }
    let tensors = decode_params(&fs::read(path)?)?;
    let mut model = VqaModel::new(meta.model.clone(), 0)?;
    if tensors.len() != model.params.len() {
        return Err(Error::Version(format!(
            "checkpoint holds {} tensors but its config describes {}",
            tensors.len(),
            model.params.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for (id, (name, t)) in ids.into_iter().zip(tensors) {
        let expected_name = model.params.name(id).to_string();
        let slot = model.params.get_mut(id);
        if name != expected_name || t.shape() != slot.shape() {
            return Err(Error::Version(format!(
                "checkpoint tensor '{name}' {}x{} does not match config tensor '{expected_name}' {}x{}",
                t.rows(),
                t.cols(),
                slot.rows(),
                slot.cols()
            )));
        }
        *slot = t;
    }
    Ok((model, meta))
}
