//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GPIC"  u32 version
//! u32 metadata length, then UTF-8 "key=value\n" lines
//! u32 tensor count, then per tensor:
//!     u32 name length, UTF-8 name, u32 rank, u32 dims[rank], u32 dtype, raw data
//! ```
//!
//! The only dtype is `0`, little-endian `f32`.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::network::{DenoiserModel, NetworkConfig};
use crate::schedule::Schedule;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GPIC";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;

const WHAT: &str = "checkpoint";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.metadata.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.metadata.push((key.to_string(), value)),
        }
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parses a required metadata entry.
    pub fn meta<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta_str(key)
            .ok_or_else(|| Error::format(WHAT, format!("missing metadata key {key}")))?;
        raw.parse()
            .map_err(|_| Error::format(WHAT, format!("metadata {key}={raw} is not valid")))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::invalid(format!("metadata entry {k:?}={v:?} cannot be encoded")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        let mut out = Vec::with_capacity(64 + meta.len() + self.tensors.iter().map(|(_, t)| 4 * t.len() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_len(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        put_len(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.rank())?;
            for &d in t.shape() {
                put_len(&mut out, d)?;
            }
            put_u32(&mut out, DTYPE_F32);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(WHAT, "bad magic, not a GPIC checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(WHAT, format!("unsupported version {version}, expected {VERSION}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::format(WHAT, "metadata is not UTF-8"))?;
        let mut metadata = Vec::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(WHAT, format!("metadata line {line:?} has no '='")))?;
            metadata.push((k.to_string(), v.to_string()));
        }

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(WHAT, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let dtype = r.u32()?;
            if dtype != DTYPE_F32 {
                return Err(Error::format(WHAT, format!("tensor {name} has unknown dtype code {dtype}")));
            }
            let len = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(WHAT, format!("tensor {name} is too large")))?;
            let data = r
                .take(len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(WHAT, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?)
    }

    /// Model weights plus the architecture and schedule needed to rebuild them.
    pub fn from_model(model: &DenoiserModel<f32>, schedule: &Schedule, step: u64) -> Self {
        let c = model.config();
        let mut ckpt = Checkpoint::default();
        ckpt.set_meta("C", c.channels);
        ckpt.set_meta("depth", c.depth);
        ckpt.set_meta("D", c.fourier_dim);
        ckpt.set_meta("fourier_seed", c.fourier_seed);
        ckpt.set_meta("T", schedule.steps());
        ckpt.set_meta("lambda", schedule.lambda());
        ckpt.set_meta("image_size", c.image_size);
        ckpt.set_meta("step", step);
        ckpt.tensors = model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        ckpt
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        Ok(NetworkConfig {
            channels: self.meta("C")?,
            depth: self.meta("depth")?,
            fourier_dim: self.meta("D")?,
            fourier_seed: self.meta("fourier_seed")?,
            image_size: self.meta("image_size")?,
        })
    }

    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.meta("T")?, self.meta("lambda")?)
    }

    /// Rebuilds the model; every parameter must be present with its exact shape.
    pub fn to_model(&self) -> Result<DenoiserModel<f32>> {
        let mut model = DenoiserModel::zeroed(self.network_config()?)?;
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::format(WHAT, format!("missing parameter {name}")))?;
            model.params_mut().set(&name, t.clone())?;
        }
        Ok(model)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit the u32 checkpoint field")))?;
    put_u32(out, v);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(WHAT, format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
