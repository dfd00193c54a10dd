//! Binary checkpoint format.
//!
//! ```text
//! "SPND1"
//! u32 config_len, config_len bytes of JSON (CheckpointMeta)
//! u32 record_count
//! record: u32 name_len, name, u32 rank, rank x u32 dims, f32 data
//! ```
//!
//! All integers and floats are little-endian. Model tensors come first in
//! [`DenoiserParams::for_each`] order; any further records (optimizer
//! state) follow.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{DenoiserConfig, DenoiserParams, Tensor};
use crate::corpus::TokenizerKind;
use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"SPND1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub vocab_hash: String,
    pub tokenizer: TokenizerKind,
    pub smoothing_count: f64,
    /// Vocabulary TSV, so a checkpoint can be sampled without side files.
    #[serde(default)]
    pub vocab_tsv: Option<String>,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
    /// Updates applied by the optimizer in the current training phase.
    #[serde(default)]
    pub optimizer_step: u64,
    /// Free-form run configuration echo.
    #[serde(default)]
    pub run: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: DenoiserParams<f32>,
    pub extra: Vec<(String, Tensor<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape.len() as u32);
    for &dim in &t.shape {
        put_u32(out, dim as u32);
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let bytes = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor { shape, data }))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let meta = serde_json::to_vec(&self.meta)?;
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        let tensors = self.params.tensors();
        put_u32(&mut out, (tensors.len() + self.extra.len()) as u32);
        for (name, t) in tensors {
            put_record(&mut out, &name, t);
        }
        for (name, t) in &self.extra {
            put_record(&mut out, name, t);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut r = Reader { buf, pos: MAGIC.len() };
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                meta.format_version
            )));
        }
        meta.model.validate()?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            records.push(r.record()?);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let mut params = DenoiserParams::<f32>::init(&meta.model, 0)?;
        let mut it = records.into_iter();
        let mut failure = None;
        params.for_each_mut(|name, slot| {
            if failure.is_some() {
                return;
            }
            match it.next() {
                Some((found, t)) if found == name && t.shape == slot.shape => *slot = t,
                Some((found, t)) => {
                    failure = Some(format!("expected {name} {:?}, found {found} {:?}", slot.shape, t.shape))
                }
                None => failure = Some(format!("missing tensor {name}")),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Checkpoint(msg));
        }
        Ok(Checkpoint {
            meta,
            params,
            extra: it.collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        // Write-then-rename so an interrupted run never leaves a torn file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn check_vocab(&self, vocab_hash: &str) -> Result<()> {
        if self.meta.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch {
                expected: vocab_hash.to_owned(),
                found: self.meta.vocab_hash.clone(),
            });
        }
        Ok(())
    }
}
