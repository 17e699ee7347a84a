//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `IFBCKPT1`, a little-endian `u64` header length,
//! a JSON header (model config, training step, tensor table), then every
//! tensor's data as little-endian `f32` in table order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IfBlend, ModelConfig};
use crate::params::EntryKind;

const MAGIC: &[u8; 8] = b"IFBCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 4],
    kind: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    step: usize,
    tensors: Vec<TensorRecord>,
}

fn kind_name(k: EntryKind) -> &'static str {
    match k {
        EntryKind::Param => "param",
        EntryKind::Buffer => "buffer",
    }
}

/// Serializes parameters and buffers together with the model config.
pub fn to_bytes(model: &IfBlend<f32>, step: usize) -> Result<Vec<u8>> {
    let entries = model.store().entries();
    let header = Header {
        model_config: model.config().clone(),
        step,
        tensors: entries
            .iter()
            .map(|e| TensorRecord { name: e.name.clone(), shape: e.value.shape(), kind: kind_name(e.kind).into() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let data_len: usize = entries.iter().map(|e| e.value.len() * 4).sum();
    let mut out = Vec::with_capacity(16 + json.len() + data_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in entries {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes atomically (temporary file, then rename).
pub fn save(path: &Path, model: &IfBlend<f32>, step: usize) -> Result<()> {
    let bytes = to_bytes(model, step)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Rebuilds the model from its embedded config and restores every tensor;
/// names, kinds and shapes must match the architecture exactly.
pub fn from_bytes(bytes: &[u8]) -> Result<(IfBlend<f32>, usize)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(hlen).ok().and_then(|h| h.checked_add(16)).ok_or_else(|| bad("truncated header"))?;
    let body = bytes.get(16..end).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = IfBlend::<f32>::new(&header.model_config, 0)?;
    let store = model.store_mut();
    if header.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, architecture expects {}",
            header.tensors.len(),
            store.len()
        )));
    }
    let mut off = end;
    let ids: Vec<_> = store.ids().collect();
    for (rec, id) in header.tensors.iter().zip(ids) {
        let expect_shape = store.get(id).shape();
        if rec.name != store.name(id) || rec.shape != expect_shape || rec.kind != kind_name(store.kind(id)) {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} ({}) does not match {} {:?}",
                rec.name,
                rec.shape,
                rec.kind,
                store.name(id),
                expect_shape
            )));
        }
        let t = store.get_mut(id);
        let n = t.len() * 4;
        let raw = bytes.get(off..off + n).ok_or_else(|| bad("truncated tensor data"))?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        off += n;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((model, header.step))
}

pub fn load(path: &Path) -> Result<(IfBlend<f32>, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
