//! Flat binary container of named f32 tensors.
//!
//! Layout, all little-endian: magic `LPNT`, version `u32` (1), tensor count
//! `u32`, then per tensor: name length `u16`, UTF-8 name, rank `u8`, each
//! dimension as `u32`, and the `f32` payload.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LPNT";
pub const VERSION: u32 = 1;
/// Name suffix of optimizer momentum buffers.
pub const VELOCITY_SUFFIX: &str = ".velocity";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn write_tensors<W: Write>(out: &mut W, tensors: &[NamedTensor]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidParams(format!("tensor name longer than 65535 bytes: {}", t.name)))?;
        let rank = u8::try_from(t.tensor.shape.len())
            .map_err(|_| Error::InvalidParams(format!("{}: rank above 255", t.name)))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&[rank])?;
        for &d in &t.tensor.shape {
            let d = u32::try_from(d).map_err(|_| Error::InvalidParams(format!("{}: dimension above u32", t.name)))?;
            out.write_all(&d.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.tensor.data.len() * 4);
        for v in &t.tensor.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&payload)?;
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            message: "bad magic, expected LPNT".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let start = r.pos as u64;
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint {
                offset: start + 2,
                message: format!("tensor {i}: name is not UTF-8"),
            })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| Error::Checkpoint {
            offset: start,
            message: format!("{name}: element count overflows"),
        })?;
        let payload = r.take(count.checked_mul(4).unwrap_or(usize::MAX), &format!("{name} payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push(NamedTensor {
            name,
            tensor: Tensor::from_vec(&shape, data),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            offset: r.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

/// Parameters plus optional velocity buffers, in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub velocity: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .params
            .iter()
            .map(|(name, p)| NamedTensor {
                name: name.clone(),
                tensor: p.value.clone(),
            })
            .collect();
        out.extend(self.velocity.iter().cloned());
        out
    }

    pub fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut ck = Checkpoint::default();
        for t in tensors {
            if t.name.ends_with(VELOCITY_SUFFIX) {
                ck.velocity.push(t);
                continue;
            }
            let kind = ParamKind::from_name(&t.name)
                .ok_or_else(|| Error::InvalidParams(format!("unrecognized tensor name {}", t.name)))?;
            if ck.params.contains(&t.name) {
                return Err(Error::InvalidParams(format!("duplicate tensor {}", t.name)));
            }
            ck.params.insert(t.name, kind, t.tensor);
        }
        ck.params.validate()?;
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &self.to_tensors())?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_tensors(read_tensors(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
