//! Self-describing binary checkpoint container.
//!
//! Layout: magic `BGCK`, `u32` format version, `u64` header length, JSON
//! header, then every parameter tensor as little-endian `f32` in header
//! order, then (optionally) the Adam step counter and both moment sets.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::nn::ParamStore;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BGCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "bgflow-checkpoint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Acoustic,
    Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub model_config: serde_json::Value,
    pub seed: u64,
    pub step: usize,
    pub tensors: Vec<TensorInfo>,
    pub has_optimizer: bool,
    /// Free-form run metadata (normalization, flow and optimizer settings, vocabulary).
    pub metadata: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model_config: serde_json::Value,
    pub seed: u64,
    pub step: usize,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState>,
    pub metadata: serde_json::Value,
}

fn put_tensor(out: &mut Vec<u8>, a: &Array2<f32>) {
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what}"))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: [usize; 2], what: &str) -> Result<Array2<f32>> {
        let n = shape[0]
            .checked_mul(shape[1])
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("absurd shape for {what}")))?;
        let bytes = self.take(n, what)?;
        let vals = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Array2::from_shape_vec((shape[0], shape[1]), vals).expect("length checked"))
    }
}

impl Checkpoint {
    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format: FORMAT_TAG.into(),
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            model_config: self.model_config.clone(),
            seed: self.seed,
            step: self.step,
            tensors: self
                .params
                .names()
                .iter()
                .zip(self.params.values())
                .map(|(n, v)| TensorInfo {
                    name: n.clone(),
                    shape: [v.nrows(), v.ncols()],
                })
                .collect(),
            has_optimizer: self.optimizer.is_some(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.params.n_scalars() * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.params.values() {
            put_tensor(&mut out, v);
        }
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(&(opt.step as u64).to_le_bytes());
            for m in &opt.m {
                put_tensor(&mut out, m);
            }
            for v in &opt.v {
                put_tensor(&mut out, v);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = r.u64("header length")? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT_TAG || header.version != version {
            return Err(Error::Checkpoint(format!(
                "header tag {} v{} does not match container",
                header.format, header.version
            )));
        }
        let mut params = ParamStore::new();
        for t in &header.tensors {
            let v = r.tensor(t.shape, &t.name)?;
            params.add(t.name.clone(), v);
        }
        let optimizer = if header.has_optimizer {
            let step = r.u64("optimizer step")? as usize;
            let mut m = Vec::with_capacity(header.tensors.len());
            for t in &header.tensors {
                m.push(r.tensor(t.shape, "adam m")?);
            }
            let mut v = Vec::with_capacity(header.tensors.len());
            for t in &header.tensors {
                v.push(r.tensor(t.shape, "adam v")?);
            }
            Some(AdamState { step, m, v })
        } else {
            None
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            kind: header.kind,
            model_config: header.model_config,
            seed: header.seed,
            step: header.step,
            params,
            optimizer,
            metadata: header.metadata,
        })
    }

    /// Written to a sibling temporary file first, then renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.model_config.clone())
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))
    }
}
