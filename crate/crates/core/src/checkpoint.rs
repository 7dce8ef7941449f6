//! RGC1 checkpoint files.
//!
//! ```text
//! "RGC1" | u32 version | u32 record count
//! per record: u32 name length | UTF-8 name | u32 rank | rank x u32 dims | f32 data
//! [32] config hash | u32 blob length | RNG state blob | u64 checksum
//! ```
//!
//! All integers and floats are little-endian; the checksum is the wrapping
//! sum of every preceding byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"RGC1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub records: Vec<Record>,
    pub config_hash: [u8; 32],
    pub rng_state: Vec<u8>,
}

impl Checkpoint {
    pub fn new(config_hash: [u8; 32]) -> Self {
        Self {
            version: CKPT_VERSION,
            records: Vec::new(),
            config_hash,
            rng_state: Vec::new(),
        }
    }

    pub fn push_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.records.push(Record {
            name: name.into(),
            dims: t.dims().to_vec(),
            data: t.data().iter().map(|v| v.as_f32()).collect(),
        });
    }

    pub fn push_params<T: Real>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for (name, t) in params.iter() {
            self.push_tensor(format!("{prefix}{name}"), t);
        }
    }

    /// Stores an integer counter as a one-element record. Exact below 2^24.
    pub fn push_counter(&mut self, name: &str, value: u64) {
        self.records.push(Record {
            name: name.to_string(),
            dims: vec![1],
            data: vec![value as f32],
        });
    }

    pub fn record(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Mismatch(format!("checkpoint has no record {name:?}")))
    }

    pub fn counter(&self, name: &str) -> Result<u64> {
        let r = self.record(name)?;
        match r.data.as_slice() {
            [v] if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as u64),
            _ => Err(Error::Mismatch(format!("record {name:?} is not a counter"))),
        }
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let r = self.record(name)?;
        Tensor::new(r.dims.clone(), r.data.iter().map(|&v| T::of_f32(v)).collect())
    }

    /// Overwrites `params` from records named `prefix + param name`. Fails on
    /// the first record whose dims disagree, before modifying anything.
    pub fn load_params<T: Real>(&self, prefix: &str, params: &mut ParamSet<T>) -> Result<()> {
        let mut staged = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let full = format!("{prefix}{name}");
            let r = self.record(&full)?;
            if r.dims != t.dims() {
                return Err(Error::shape(
                    "load_checkpoint",
                    format!("record {full} has dims {:?}, model expects {:?}", r.dims, t.dims()),
                ));
            }
            staged.push(self.tensor::<T>(&full)?);
        }
        for (dst, src) in params.tensors_mut().zip(staged) {
            *dst = src;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&(self.rng_state.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.rng_state);
        let sum = out.iter().fold(0u64, |a, &b| a.wrapping_add(b as u64));
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format {
                offset: bytes.len(),
                reason: "truncated checkpoint".into(),
            });
        }
        let body = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body..].try_into().expect("sized"));
        let sum = bytes[..body].iter().fold(0u64, |a, &b| a.wrapping_add(b as u64));
        let mut r = Reader { bytes: &bytes[..body], pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CKPT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: format!("bad magic {magic:?}"),
            });
        }
        if stored != sum {
            return Err(Error::Format {
                offset: body,
                reason: "checksum mismatch".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(Error::Format {
                offset: 4,
                reason: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.u32("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at,
                    reason: "record name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank)
                .map(|_| r.u32("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                Error::Format {
                    offset: at,
                    reason: "record size overflows".into(),
                }
            })?;
            let raw = r.take(numel.checked_mul(4).unwrap_or(usize::MAX), "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("sized")))
                .collect();
            records.push(Record { name, dims, data });
        }
        let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("sized");
        let blob_len = r.u32("rng blob length")? as usize;
        let rng_state = r.take(blob_len, "rng blob")?.to_vec();
        if r.pos != r.bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                reason: "trailing bytes before checksum".into(),
            });
        }
        Ok(Self {
            version,
            records,
            config_hash,
            rng_state,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("sized")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &ckpt.encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}
