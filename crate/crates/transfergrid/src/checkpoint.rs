//! Model checkpoints: `checkpoint.json` (metadata and tensor index) plus
//! `weights.f32` (little-endian f32, parameters then batch-norm buffers).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use transfergrid_core::engine::Tensor;
use transfergrid_core::models::{ArchitectureSpec, Mode, Model};
use transfergrid_core::split::AlignedSplitPlan;
use transfergrid_core::transfer::GridConfig;

use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_atomic, write_json};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const META_FILE: &str = "checkpoint.json";
pub const WEIGHTS_FILE: &str = "weights.f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    BnMean,
    BnVar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Offset in f32 elements.
    pub offset: usize,
}

/// Where the model came from; enough to probe it later with the same seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub fold: usize,
    pub grid: GridConfig,
    pub plan: AlignedSplitPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub spec: ArchitectureSpec,
    pub provenance: Provenance,
    pub representer_digest: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_model(model: &Model<f32>, provenance: &Provenance, dir: &Path) -> Result<()> {
    let mut data: Vec<f32> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, kind, shape: Vec<usize>, values: &[f32]| {
        tensors.push(TensorEntry { name: name.into(), kind, shape, offset: data.len() });
        data.extend_from_slice(values);
    };
    for p in model.params.iter() {
        push(&p.name, TensorKind::Param, p.value.shape().to_vec(), p.value.data());
    }
    for b in &model.buffers {
        push(&b.name, TensorKind::BnMean, vec![b.mean.len()], &b.mean);
        push(&b.name, TensorKind::BnVar, vec![b.var.len()], &b.var);
    }
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        provenance: provenance.clone(),
        representer_digest: model.representer_digest(),
        tensors,
    };
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(&dir.join(WEIGHTS_FILE), &bytes)?;
    write_json(&dir.join(META_FILE), &meta)
}

/// Rebuilds the model and verifies its representer digest. The model is
/// returned in eval mode.
pub fn load_model(dir: &Path) -> Result<(Model<f32>, Provenance)> {
    let mpath = dir.join(META_FILE);
    let wpath = dir.join(WEIGHTS_FILE);
    let meta: CheckpointMeta = read_json(&mpath)?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(&mpath, format!("checkpoint version {} is not supported", meta.format_version)));
    }
    let bytes = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(&wpath, "length is not a multiple of 4"));
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let mut model = Model::<f32>::build(&meta.spec, 0)?;
    let n_params = model.params.len();
    let n_buffers = model.buffers.len();
    let mut seen = (0, 0);
    for t in &meta.tensors {
        let len: usize = t.shape.iter().product();
        let Some(values) = data.get(t.offset..t.offset + len) else {
            return Err(Error::format(&wpath, format!("tensor {} runs past the end of the weights", t.name)));
        };
        match t.kind {
            TensorKind::Param => {
                let id = model.params.by_name(&t.name).ok_or_else(|| Error::format(&mpath, format!("unknown parameter {}", t.name)))?;
                if model.params.get(id).value.shape() != t.shape.as_slice() {
                    return Err(Error::format(&mpath, format!("parameter {} has shape {:?}, model expects {:?}", t.name, t.shape, model.params.get(id).value.shape())));
                }
                model.params.replace(id, Tensor::from_vec(&t.shape, values.to_vec())?);
                seen.0 += 1;
            }
            kind => {
                let b = model.buffers.iter_mut().find(|b| b.name == t.name).ok_or_else(|| Error::format(&mpath, format!("unknown buffer {}", t.name)))?;
                let slot = if kind == TensorKind::BnMean { &mut b.mean } else { &mut b.var };
                if slot.len() != len {
                    return Err(Error::format(&mpath, format!("buffer {} has {len} entries, model expects {}", t.name, slot.len())));
                }
                slot.copy_from_slice(values);
                seen.1 += 1;
            }
        }
    }
    if seen != (n_params, 2 * n_buffers) {
        return Err(Error::format(&mpath, "checkpoint does not cover every parameter and buffer"));
    }
    if model.representer_digest() != meta.representer_digest {
        return Err(Error::format(&mpath, "representer digest does not match the stored weights"));
    }
    model.set_mode(Mode::Eval);
    Ok((model, meta.provenance))
}
