//! `HETCKPT1` parameter checkpoints.
//!
//! Layout (little-endian): magic `HETCKPT1`, u32 param count, then per
//! parameter in lexicographic name order: u16 name length, name bytes,
//! u8 rank, rank x u32 dims, f32 data.

use std::fs;
use std::path::Path;

use super::{ParamStore, Real, Result, Tensor, TensorError};

pub const CKPT_MAGIC: &[u8; 8] = b"HETCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_checkpoint<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter_sorted() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in p.value.data() {
            out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let bad = |msg: &str| TensorError::BadCheckpoint(msg.to_string());
    if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        let chunk = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(chunk)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec()).map_err(|_| bad("name is not utf-8"))?;
        let rank = take(1)?[0] as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let data = take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push(CheckpointEntry { name, shape, data });
    }
    Ok(entries)
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

/// Loads a checkpoint into a store whose parameter names and shapes must match.
pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let entries = decode_checkpoint(&fs::read(path)?)?;
    if entries.len() != store.len() {
        return Err(TensorError::BadCheckpoint(format!(
            "checkpoint has {} parameters, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        let id = store
            .id(&e.name)
            .ok_or_else(|| TensorError::UnknownParameter(e.name.clone()))?;
        let p = store.get_mut(id);
        if p.value.shape() != e.shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "load_checkpoint",
                lhs: p.value.shape().to_vec(),
                rhs: e.shape,
            });
        }
        p.value = Tensor::new(e.shape, e.data.iter().map(|&x| T::of(x as f64)).collect())?;
    }
    Ok(())
}
