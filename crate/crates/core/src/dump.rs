//! EDF1: the binary interchange format for last-token embeddings and
//! first-class-token logits.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EDF1" | u32 version=1 | u32 n | u32 d | u32 K
//! K x (u16 byte-length, UTF-8 class name)
//! n x record:
//!     u16 id byte-length, UTF-8 id
//!     i32 label index (-1 = absent)
//!     d x f32 embedding
//!     K x f32 class logits (only when K > 0)
//! ```
//!
//! Serialization is a pure function of the dump value, so writing the same
//! dump twice yields identical bytes.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"EDF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: Option<u32>,
    /// Last-token representation from the layer feeding the LM head.
    pub embedding: Vec<f32>,
    /// Pre-softmax scores of each class's first token; `None` iff K = 0.
    pub class_logits: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub dim: usize,
    pub class_names: Vec<String>,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingDump {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn has_logits(&self) -> bool {
        !self.class_names.is_empty()
    }

    /// Field-for-field equality that also distinguishes float bit patterns
    /// (`-0.0` vs `0.0`, NaN payloads).
    pub fn bit_eq(&self, other: &Self) -> bool {
        fn bits(v: &[f32]) -> impl Iterator<Item = u32> + '_ {
            v.iter().map(|x| x.to_bits())
        }
        self.dim == other.dim
            && self.class_names == other.class_names
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.id == b.id
                    && a.label == b.label
                    && a.embedding.len() == b.embedding.len()
                    && bits(&a.embedding).eq(bits(&b.embedding))
                    && match (&a.class_logits, &b.class_logits) {
                        (None, None) => true,
                        (Some(x), Some(y)) => x.len() == y.len() && bits(x).eq(bits(y)),
                        _ => false,
                    }
            })
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidDump(msg));
        if self.records.is_empty() {
            return invalid("a dump needs at least one record (n >= 1)".into());
        }
        if self.dim == 0 {
            return invalid("embedding dimension must be >= 1".into());
        }
        if self.records.len() > u32::MAX as usize
            || self.dim > u32::MAX as usize
            || self.class_names.len() > u32::MAX as usize
        {
            return invalid("n, d or K does not fit in u32".into());
        }
        let mut seen = HashSet::new();
        for name in &self.class_names {
            if name.len() > u16::MAX as usize {
                return invalid(format!("class name longer than {} bytes", u16::MAX));
            }
            if !seen.insert(name.as_str()) {
                return invalid(format!("duplicate class name {name:?}"));
            }
        }
        let k = self.class_names.len();
        for (i, rec) in self.records.iter().enumerate() {
            if rec.id.len() > u16::MAX as usize {
                return invalid(format!("record {i}: id longer than {} bytes", u16::MAX));
            }
            if rec.embedding.len() != self.dim {
                return invalid(format!(
                    "record {i}: embedding has {} components, header d = {}",
                    rec.embedding.len(),
                    self.dim
                ));
            }
            match (&rec.class_logits, k) {
                (None, 0) => {}
                (Some(l), k) if k > 0 && l.len() == k => {}
                (Some(l), _) => return invalid(format!("record {i}: {} class logits, header K = {k}", l.len())),
                (None, _) => return invalid(format!("record {i}: class logits missing with K = {k}")),
            }
            if let Some(label) = rec.label {
                if label > i32::MAX as u32 {
                    return invalid(format!("record {i}: label {label} does not fit in i32"));
                }
                if k > 0 && label as usize >= k {
                    return invalid(format!("record {i}: label {label} out of range for K = {k}"));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let k = self.class_names.len();
        let per_record = 2 + 4 + 4 * (self.dim + k);
        let mut out = Vec::with_capacity(20 + self.records.len() * (per_record + 16));
        out.extend_from_slice(&MAGIC);
        for v in [FORMAT_VERSION, self.records.len() as u32, self.dim as u32, k as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for name in &self.class_names {
            put_str(&mut out, name);
        }
        for rec in &self.records {
            put_str(&mut out, &rec.id);
            let label = rec.label.map_or(-1, |l| l as i32);
            out.extend_from_slice(&label.to_le_bytes());
            for x in &rec.embedding {
                out.extend_from_slice(&x.to_le_bytes());
            }
            if let Some(logits) = &rec.class_logits {
                for x in logits {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes, pos: 0 };
        let magic: [u8; 4] = match cur.take(4) {
            Some(m) => m.try_into().expect("4 bytes"),
            None => {
                let mut found = [0u8; 4];
                found[..bytes.len()].copy_from_slice(bytes);
                return Err(Error::BadMagic { found });
            }
        };
        if magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let header = |cur: &mut Cursor| cur.u32().ok_or_else(|| truncated("header"));
        let version = header(&mut cur)?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let n = header(&mut cur)? as usize;
        let dim = header(&mut cur)? as usize;
        let k = header(&mut cur)? as usize;
        if n == 0 {
            return Err(Error::Inconsistent("header declares n = 0".into()));
        }
        if dim == 0 {
            return Err(Error::Inconsistent("header declares d = 0".into()));
        }

        let mut class_names = Vec::with_capacity(k.min(1 << 16));
        for c in 0..k {
            let name = cur
                .string()
                .ok_or_else(|| truncated(&format!("class name {c}")))?
                .map_err(|_| Error::Inconsistent(format!("class name {c} is not valid UTF-8")))?;
            class_names.push(name);
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Inconsistent(format!("duplicate class name {name:?}")));
            }
        }

        let mut records = Vec::with_capacity(n.min(1 << 20));
        for i in 0..n {
            let rec_trunc = || truncated(&format!("record {i}"));
            let id = cur
                .string()
                .ok_or_else(rec_trunc)?
                .map_err(|_| Error::Inconsistent(format!("record {i}: id is not valid UTF-8")))?;
            let raw_label = cur.i32().ok_or_else(rec_trunc)?;
            let label = match raw_label {
                -1 => None,
                l if l < 0 => return Err(Error::Inconsistent(format!("record {i}: negative label {l}"))),
                l if k > 0 && l as usize >= k => {
                    return Err(Error::Inconsistent(format!(
                        "record {i}: label {l} out of range for K = {k}"
                    )))
                }
                l => Some(l as u32),
            };
            let embedding = cur.f32s(dim).ok_or_else(rec_trunc)?;
            let class_logits = if k > 0 {
                Some(cur.f32s(k).ok_or_else(rec_trunc)?)
            } else {
                None
            };
            records.push(EmbeddingRecord {
                id,
                label,
                embedding,
                class_logits,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Inconsistent(format!(
                "{} trailing bytes after record {}",
                bytes.len() - cur.pos,
                n - 1
            )));
        }
        Ok(EmbeddingDump {
            dim,
            class_names,
            records,
        })
    }
}

pub fn write_dump(dump: &EmbeddingDump, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = dump.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<EmbeddingDump> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingDump::from_bytes(&bytes)
}

fn truncated(context: &str) -> Error {
    Error::Truncated {
        context: format!("payload ends inside {context}"),
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn i32(&mut self) -> Option<i32> {
        self.take(4).map(|b| i32::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<std::result::Result<String, std::string::FromUtf8Error>> {
        let len = self.u16()? as usize;
        self.take(len).map(|b| String::from_utf8(b.to_vec()))
    }

    fn f32s(&mut self, count: usize) -> Option<Vec<f32>> {
        let bytes = self.take(count.checked_mul(4)?)?;
        Some(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
}
