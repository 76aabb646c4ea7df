// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned binary weight file.
//!
//! ```text
//! magic        4 bytes   "BSTW"
//! version      u32       1
//! config       5 × u32   layer_count, hidden_dim, vocab_size, head_count, max_context
//! vocab        vocab_size × (u32 byte length, UTF-8 bytes)
//! tensor_count u32
//! tensors      tensor_count × (u32 name length, name, u32 rank, rank × u32 dims,
//!                              prod(dims) × f32)
//! ```
//!
//! Every integer and float is little-endian, so files load bit-identically
//! on any platform.

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub(crate) const MAGIC: &[u8; 4] = b"BSTW";
pub(crate) const VERSION: u32 = 1;

/// A named tensor with its shape.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Parsed contents of a weight file.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct WeightFile {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl WeightFile {
    pub(crate) fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let c = &self.config;
        for v in [c.layer_count, c.hidden_dim, c.vocab_size, c.head_count, c.max_context] {
            put_u32(&mut out, v as u32);
        }
        for piece in &self.vocab {
            put_u32(&mut out, piece.len() as u32);
            out.extend_from_slice(piece.as_bytes());
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_u32(&mut out, t.name.len() as u32);
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.dims.len() as u32);
            for &d in &t.dims {
                put_u32(&mut out, d as u32);
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a file, checking every tensor against `expected` shapes derived
    /// from the header.
    pub(crate) fn from_bytes(
        bytes: &[u8],
        expected: impl Fn(&ModelConfig) -> Vec<(String, Vec<usize>)>,
    ) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic: not a beliefscope weight file".to_owned()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported weight file version {version} (expected {VERSION})"
            )));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            layer_count: dims[0],
            hidden_dim: dims[1],
            vocab_size: dims[2],
            head_count: dims[3],
            max_context: dims[4],
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
        let mut vocab = Vec::with_capacity(config.vocab_size);
        for _ in 0..config.vocab_size {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            vocab.push(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| Error::Format("vocabulary entry is not UTF-8".to_owned()))?,
            );
        }
        let expected = expected(&config);
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Shape(format!(
                "payload holds {count} tensors, header implies {}",
                expected.len()
            )));
        }
        let mut tensors = Vec::with_capacity(count);
        for (want_name, want_dims) in expected {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".to_owned()))?;
            if name != want_name {
                return Err(Error::Format(format!("expected tensor {want_name}, found {name}")));
            }
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            if dims != want_dims {
                return Err(Error::Shape(format!(
                    "tensor {name} has shape {dims:?}, header implies {want_dims:?}"
                )));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor { name, dims, data });
        }
        if r.at != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.at
            )));
        }
        Ok(Self { config, vocab, tensors })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
