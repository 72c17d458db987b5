//! Binary checkpoint container.
//!
//! Little-endian layout: magic `DYNS`, `u32` version, `u32` tensor count, then
//! per tensor `u16` name length, UTF-8 name, `u8` rank, `u32` dims and the raw
//! `f64` payload; then a `u32`-length-prefixed UTF-8 config text, the `u64`
//! RNG counter and the `u64` step.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::ParamSet;

pub const MAGIC: &[u8; 4] = b"DYNS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub config: String,
    pub rng_counter: u64,
    pub step: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: PathBuf,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.clone(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self, n: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| {
            self.pos = start;
            self.fail(format!("{what} is not UTF-8"))
        })
    }
}

impl Checkpoint {
    pub fn new(config: impl Into<String>, rng_counter: u64, step: u64) -> Self {
        Self {
            tensors: Vec::new(),
            config: config.into(),
            rng_counter,
            step,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    /// Appends every parameter of `params` under its own name.
    pub fn push_params(&mut self, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.push(name, t.shape(), t.to_vec());
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Overwrites every parameter of `params` with the stored tensor of the same name.
    pub fn restore_params(&self, params: &ParamSet) -> Result<()> {
        for (name, t) in params.iter() {
            let stored = self
                .get(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {name}")))?;
            if stored.shape != t.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    stored.shape,
                    t.shape()
                )));
            }
            t.set_data(stored.data.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(u32::try_from(self.tensors.len()).map_err(|_| Error::Contract("too many tensors".into()))?.to_le_bytes());
        for t in &self.tensors {
            let name_len = u16::try_from(t.name.len())
                .map_err(|_| Error::Contract(format!("tensor name {} too long", t.name)))?;
            let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Contract(format!("tensor {} rank too high", t.name)))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Dimension(format!("tensor {} shape disagrees with its data", t.name)));
            }
            out.extend(name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(rank);
            for &d in &t.shape {
                out.extend(u32::try_from(d).map_err(|_| Error::Contract("dimension too large".into()))?.to_le_bytes());
            }
            for v in &t.data {
                out.extend(v.to_le_bytes());
            }
        }
        out.extend(u32::try_from(self.config.len()).map_err(|_| Error::Contract("config too long".into()))?.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend(self.rng_counter.to_le_bytes());
        out.extend(self.step.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], file: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            file: file.to_path_buf(),
        };
        if r.take(4, "magic")? != MAGIC {
            r.pos = 0;
            return Err(r.fail("not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            r.pos = 4;
            return Err(r.fail(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16("name length")? as usize;
            let name = r.text(n, "tensor name")?;
            let rank = r.u8("rank")? as usize;
            let shape = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.fail("tensor too large"))?, "tensor payload")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let n = r.u32("config length")? as usize;
        let config = r.text(n, "config text")?;
        let rng_counter = r.u64("rng counter")?;
        let step = r.u64("step")?;
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes after checkpoint"));
        }
        Ok(Self {
            tensors,
            config,
            rng_counter,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
