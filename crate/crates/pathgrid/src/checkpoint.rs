//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "PGCKPT\0\0"
//! version      u32      1
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON (see `Header`)
//! parameters   f64 LE, every tensor in declared order, row-major
//! first moment f64 LE, same layout, present when header.first_moment
//! second moment f64 LE, same layout, present when header.second_moment
//! ```
//!
//! Floats are stored as raw bits, so parameters round-trip bit-exactly.

use std::fs;
use std::path::Path;

use pathgrid_core::autodiff::Tensor;
use pathgrid_core::model::{ModelConfig, OptimizerConfig, OptimizerState, PathModel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PGCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PathModel,
    pub optimizer: OptimizerConfig,
    pub state: OptimizerState,
    /// Seed of the corpus the model was trained on.
    pub generation_seed: u64,
    /// Seed used to initialise the parameters.
    pub init_seed: u64,
    pub epochs_completed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    optimizer: OptimizerConfig,
    step: u64,
    epochs_completed: u64,
    generation_seed: u64,
    init_seed: u64,
    tensors: Vec<TensorEntry>,
    first_moment: bool,
    second_moment: bool,
}

fn push_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn to_bytes(c: &Checkpoint) -> Vec<u8> {
    let header = Header {
        model_config: c.model.config().clone(),
        optimizer: c.optimizer,
        step: c.state.step,
        epochs_completed: c.epochs_completed,
        generation_seed: c.generation_seed,
        init_seed: c.init_seed,
        tensors: c
            .model
            .param_specs()
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                rows: s.rows,
                cols: s.cols,
            })
            .collect(),
        first_moment: !c.state.first_moment.is_empty(),
        second_moment: !c.state.second_moment.is_empty(),
    };
    let h = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + h.len() + 8 * c.model.param_count() * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for t in c.model.params() {
        push_f64s(&mut out, &t.data);
    }
    for buf in [&c.state.first_moment, &c.state.second_moment] {
        for t in buf.iter() {
            push_f64s(&mut out, t);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format!("checkpoint version {version} is not supported (expected {VERSION})"));
    }
    let hlen = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| "header too large")?;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| format!("bad header: {e}"))?;
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        params.push(Tensor::from_vec(t.rows, t.cols, r.f64s(t.rows * t.cols)?));
    }
    let model = PathModel::from_parts(header.model_config, params).map_err(|e| e.to_string())?;
    for (spec, entry) in model.param_specs().iter().zip(&header.tensors) {
        if spec.name != entry.name {
            return Err(format!("tensor {} found where {} was expected", entry.name, spec.name));
        }
    }
    let mut moments = [Vec::new(), Vec::new()];
    for (slot, present) in moments.iter_mut().zip([header.first_moment, header.second_moment]) {
        if present {
            for t in &header.tensors {
                slot.push(r.f64s(t.rows * t.cols)?);
            }
        }
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes after checkpoint".into());
    }
    let [first_moment, second_moment] = moments;
    Ok(Checkpoint {
        model,
        optimizer: header.optimizer,
        state: OptimizerState {
            step: header.step,
            first_moment,
            second_moment,
        },
        generation_seed: header.generation_seed,
        init_seed: header.init_seed,
        epochs_completed: header.epochs_completed,
    })
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    parse(bytes).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}

pub fn save(path: &Path, c: &Checkpoint) -> Result<()> {
    fs::write(path, to_bytes(c)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
