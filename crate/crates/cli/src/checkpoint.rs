//! PCSK: the model checkpoint format.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! magic "PCSK" | version u32 | meta_len u32 | metadata JSON |
//!   tensor count u32 |
//!   per tensor: name_len u32 | name | dtype u8 (3 = f32) | rank u8 (2) |
//!               dims u64 x 2 | f32 little-endian payload
//! ```
//!
//! Metadata carries the layer config, the class schema the head predicts,
//! and training provenance. Writes go to a temp file and are renamed into
//! place; a checkpoint file is never mutated.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use urbanseg_core::cloud::ClassSchema;
use urbanseg_core::network::{LayerConfig, ModelParams};
use urbanseg_core::tensor::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"PCSK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 3;

/// Where a checkpoint came from. Deliberately free of wall-clock time so
/// that identical runs produce identical files.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    pub tool: String,
    pub seed: Option<u64>,
    pub epochs_trained: Option<u32>,
    /// Checkpoint this one was initialized from, if any.
    pub source: Option<String>,
    pub note: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: LayerConfig,
    schema: ClassSchema,
    provenance: Provenance,
}

pub fn checkpoint_to_bytes(params: &ModelParams, provenance: &Provenance) -> Result<Vec<u8>> {
    params.validate_shapes().map_err(CliError::Validation)?;
    let meta = Metadata {
        config: params.config.clone(),
        schema: params.schema.clone(),
        provenance: provenance.clone(),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &params.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(2);
        out.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ModelParams, Provenance)> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if bytes.len() < *pos + n {
            return Err(CliError::format("truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let mut pos = 0usize;
    if take(&mut pos, 4)? != MAGIC {
        return Err(CliError::format("bad magic: not a PCSK checkpoint"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CliError::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let meta: Metadata = serde_json::from_slice(take(&mut pos, meta_len)?)?;
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = core::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| CliError::format("tensor name is not utf-8"))?
            .to_string();
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F32 {
            return Err(CliError::format(format!(
                "tensor `{name}` has unsupported dtype {dtype}"
            )));
        }
        let rank = take(&mut pos, 1)?[0];
        if rank != 2 {
            return Err(CliError::format(format!(
                "tensor `{name}` has rank {rank}, expected 2"
            )));
        }
        let rows = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let raw = take(&mut pos, rows * cols * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor::from_vec(rows, cols, data)).is_some() {
            return Err(CliError::format(format!("duplicate tensor `{name}`")));
        }
    }
    if pos != bytes.len() {
        return Err(CliError::format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - pos
        )));
    }
    let params = ModelParams {
        config: meta.config,
        schema: meta.schema,
        tensors,
    };
    // Shape/metadata consistency (head rows vs class count included) is part
    // of the format contract.
    params
        .validate_shapes()
        .map_err(|e| CliError::format(format!("inconsistent checkpoint: {e}")))?;
    Ok((params, meta.provenance))
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(params: &ModelParams, provenance: &Provenance, path: &Path) -> Result<()> {
    let bytes = checkpoint_to_bytes(params, provenance)?;
    let tmp = path.with_extension("pcsk.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Provenance)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
