//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `TLM1` · u32 version · u32 header length ·
//! JSON header · u32 tensor count · per tensor: u16 name length + name ·
//! u32 ndim · ndim × u32 dims · f32 values.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lora::{LoraConfig, LoraWeights};
use super::model::{ModelConfig, ToyLm};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TLM1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    lora: Option<LoraConfig>,
    head_classes: Option<usize>,
}

pub fn checkpoint_bytes(model: &ToyLm) -> Vec<u8> {
    let header = Header {
        model: model.config.clone(),
        lora: model.lora.as_ref().map(|l| l.config),
        head_classes: model.head.as_ref().map(|h| h.num_classes()),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut tensors = model.base.tensors();
    if let Some(l) = &model.lora {
        tensors.extend(l.tensors());
    }
    if let Some(h) = &model.head {
        tensors.extend(h.tensors());
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, values) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated in {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ToyLm> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a TLM1 checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut model = ToyLm::new(header.model.clone(), 0)?;
    // Tensors are overwritten below, so the initial values do not matter.
    if let Some(cfg) = header.lora {
        cfg.validate()?;
        model.lora = Some(LoraWeights::init(
            &cfg,
            header.model.d_model,
            header.model.n_blocks,
            &mut ChaCha8Rng::seed_from_u64(0),
        ));
    }
    if let Some(k) = header.head_classes {
        model.attach_classifier(k, 0);
    }
    let count = r.u32("tensor count")? as usize;
    let expected: Vec<(String, Vec<usize>)> = {
        let mut t: Vec<(String, Vec<usize>)> = model.base.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if let Some(l) = &model.lora {
            t.extend(l.tensors().into_iter().map(|(n, s, _)| (n, s)));
        }
        if let Some(h) = &model.head {
            t.extend(h.tensors().into_iter().map(|(n, s, _)| (n, s)));
        }
        t
    };
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    let mut data = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let nlen = r.u16("tensor name")? as usize;
        let found = std::str::from_utf8(r.take(nlen, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if found != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {found}")));
        }
        let ndim = r.u32(name)? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32(name).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {dims:?}, expected {shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4, name)?;
        data.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect::<Vec<_>>(),
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    let mut slots = model.base.tensors_mut();
    if let Some(l) = &mut model.lora {
        slots.extend(l.tensors_mut());
    }
    if let Some(h) = &mut model.head {
        slots.extend(h.tensors_mut());
    }
    for (slot, values) in slots.into_iter().zip(data) {
        slot.copy_from_slice(&values);
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ToyLm, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyLm> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyLm {
        let cfg = ModelConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            ff_mult: 2,
            context: 16,
            init_std: 0.1,
        };
        ToyLm::new(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_preserves_f32_values() {
        let mut m = tiny();
        m.attach_lora(LoraConfig { rank: 2, alpha: 4.0 }, 1).unwrap();
        m.attach_classifier(3, 1);
        let bytes = checkpoint_bytes(&m);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&back), bytes);
        assert_eq!(back.config, m.config);
        assert_eq!(back.head.unwrap().num_classes(), 3);
    }

    #[test]
    fn rejects_garbage() {
        assert!(checkpoint_from_bytes(b"nope").is_err());
        let bytes = checkpoint_bytes(&tiny());
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            checkpoint_from_bytes(&bad),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
    }
}
