//! Named-tensor checkpoint container.
//!
//! ```text
//! "AFTN" | version u32 (= 2) | header_len u32 | header JSON
//!        | count u32 | { name_len u32 | UTF-8 name | rank | dims | f32 payload } * count
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autodiff::serialize::{read_tensor_record, read_u32, write_tensor_record, write_u32, TENSOR_MAGIC};
use crate::autodiff::Scalar;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Free-form provenance (front-end settings, epoch, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl CheckpointHeader {
    /// JSON with sorted keys.
    pub fn canonical_json(&self) -> Result<String> {
        let v = serde_json::to_value(self).map_err(|e| Error::Load(e.to_string()))?;
        Ok(v.to_string())
    }
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &Model<T>, meta: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        model: model.config.clone(),
        meta,
    }
    .canonical_json()?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    w.write_all(TENSOR_MAGIC).map_err(io)?;
    write_u32(&mut w, CHECKPOINT_VERSION).map_err(io)?;
    write_u32(&mut w, header.len() as u32).map_err(io)?;
    w.write_all(header.as_bytes()).map_err(io)?;
    write_u32(&mut w, model.params.len() as u32).map_err(io)?;
    for p in model.params.iter() {
        write_u32(&mut w, p.name.len() as u32).map_err(io)?;
        w.write_all(p.name.as_bytes()).map_err(io)?;
        write_tensor_record(&mut w, &p.tensor)?;
    }
    w.flush().map_err(io)
}

fn open(path: &Path) -> Result<(BufReader<std::fs::File>, CheckpointHeader)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |what: String| Error::Load(format!("{}: {what}", path.display()));
    let trunc = |e: std::io::Error| Error::Load(format!("{}: truncated checkpoint: {e}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != TENSOR_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r).map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let n = read_u32(&mut r).map_err(trunc)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(trunc)?;
    let header: CheckpointHeader = serde_json::from_slice(&buf).map_err(|e| bad(format!("header: {e}")))?;
    Ok((r, header))
}

pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    Ok(open(path.as_ref())?.1)
}

/// Rebuilds the model described by the header and fills in its tensors.
/// Missing, extra or mis-shaped tensors are load errors.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, CheckpointHeader)> {
    let path = path.as_ref();
    let (mut r, header) = open(path)?;
    let model = Model::<T>::new(header.model.clone(), 0)
        .map_err(|e| Error::Load(format!("{}: checkpoint config rejected: {e}", path.display())))?;
    let trunc = |e: std::io::Error| Error::Load(format!("{}: truncated checkpoint: {e}", path.display()));
    let count = read_u32(&mut r).map_err(trunc)? as usize;
    if count != model.params.len() {
        return Err(Error::Load(format!(
            "{}: {count} tensors stored, model expects {}",
            path.display(),
            model.params.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let len = read_u32(&mut r).map_err(trunc)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(trunc)?;
        let name = String::from_utf8(name).map_err(|_| Error::Load("tensor name is not UTF-8".into()))?;
        let t = read_tensor_record::<T>(&mut r)?;
        let p = model
            .params
            .get(&name)
            .ok_or_else(|| Error::Load(format!("{}: unexpected tensor {name}", path.display())))?;
        if p.tensor.shape() != t.shape() {
            return Err(Error::Load(format!(
                "{}: tensor {name} has shape {:?}, model expects {:?}",
                path.display(),
                t.shape(),
                p.tensor.shape()
            )));
        }
        if !seen.insert(name) {
            return Err(Error::Load(format!("{}: duplicate tensor", path.display())));
        }
        p.tensor.data_mut().copy_from_slice(&t.data());
    }
    Ok((model, header))
}
