//! Checkpoint files: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header, then every parameter as raw little-endian `f64`s in header
//! order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraspConfig, GraspModel, ModelSeeds, Param, ParamGroup};
use crate::error::{GraspError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "grasp-checkpoint/1";
const MAGIC: &[u8; 8] = b"GRSPCKPT";

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    bytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: String,
    config: GraspConfig,
    seeds: ModelSeeds,
    step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
    group_bytes: BTreeMap<ParamGroup, usize>,
    params: Vec<ParamHeader>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: GraspModel,
    /// Optimizer steps taken before the snapshot.
    pub step: usize,
    pub provenance: Option<serde_json::Value>,
}

pub fn encode_checkpoint(
    model: &GraspModel,
    step: usize,
    provenance: Option<&serde_json::Value>,
) -> Vec<u8> {
    let params = model.store().params();
    let mut group_bytes = BTreeMap::new();
    for p in params {
        *group_bytes.entry(p.group).or_insert(0) += p.value.numel() * 8;
    }
    let header = Header {
        format: CHECKPOINT_VERSION.to_string(),
        version: crate::VERSION.to_string(),
        config: model.config().clone(),
        seeds: model.seeds(),
        step,
        provenance: provenance.cloned(),
        group_bytes,
        params: params
            .iter()
            .map(|p| ParamHeader {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                bytes: p.value.numel() * 8,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let body: usize = params.iter().map(|p| p.value.numel() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err("not a checkpoint file".into());
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
    let body = bytes.get(16..).ok_or("truncated header")?;
    if body.len() < len {
        return Err("truncated header".into());
    }
    let header: Header =
        serde_json::from_slice(&body[..len]).map_err(|e| format!("header: {e}"))?;
    if header.format != CHECKPOINT_VERSION {
        return Err(format!("unsupported checkpoint format {}", header.format));
    }
    let mut data = &body[len..];
    let mut params = Vec::with_capacity(header.params.len());
    for ph in header.params {
        let numel: usize = ph.shape.iter().product();
        if ph.bytes != numel * 8 || data.len() < ph.bytes {
            return Err(format!("parameter {} is truncated or mis-sized", ph.name));
        }
        let values = data[..ph.bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        data = &data[ph.bytes..];
        let value = Tensor::new(ph.shape, values).map_err(|e| e.to_string())?;
        params.push(Param {
            name: ph.name,
            group: ph.group,
            value,
        });
    }
    if !data.is_empty() {
        return Err(format!("{} trailing bytes", data.len()));
    }
    let model =
        GraspModel::from_params(header.config, header.seeds, params).map_err(|e| e.to_string())?;
    Ok(Checkpoint {
        model,
        step: header.step,
        provenance: header.provenance,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &GraspModel,
    step: usize,
    provenance: Option<&serde_json::Value>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GraspError::io(dir, e))?;
    }
    fs::write(path, encode_checkpoint(model, step, provenance)).map_err(|e| GraspError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| GraspError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|reason| GraspError::Format {
        path: path.to_path_buf(),
        reason,
    })
}
