//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian u32):
//! `SQCK`, version, header length, JSON header `{config, vocab}`, tensor count,
//! then per tensor: name length, UTF-8 name, rank, dims, and the values as
//! little-endian f32 in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LocaleVocab, ModelConfig, ModelParameters};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SQCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: LocaleVocab,
}

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn checkpoint_to_bytes(p: &ModelParameters) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION as usize);
    let header = serde_json::to_vec(&Header {
        config: p.config.clone(),
        vocab: p.vocab.clone(),
    })
    .expect("header serializes");
    push_u32(&mut buf, header.len());
    buf.extend_from_slice(&header);
    let tensors = p.tensors();
    push_u32(&mut buf, tensors.len());
    for t in tensors {
        push_u32(&mut buf, t.name.len());
        buf.extend_from_slice(t.name.as_bytes());
        push_u32(&mut buf, t.shape.len());
        for d in &t.shape {
            push_u32(&mut buf, *d);
        }
        for v in t.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParameters> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = r.u32()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut params = ModelParameters::init(&header.config, &header.vocab, 0)?;
    let count = r.u32()?;
    {
        let mut slots = params.tensors_mut();
        if count != slots.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                slots.len()
            )));
        }
        for slot in slots.iter_mut() {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            if name != slot.name || shape != slot.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {shape:?} does not match {} {:?}",
                    slot.name, slot.shape
                )));
            }
            let raw = r.take(4 * slot.data.len())?;
            for (dst, chunk) in slot.data.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    if !params.all_finite() {
        return Err(Error::Checkpoint("non-finite weights".into()));
    }
    Ok(params)
}

pub fn save_checkpoint(path: &Path, p: &ModelParameters) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(p)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParameters> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
