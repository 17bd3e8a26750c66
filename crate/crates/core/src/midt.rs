//! The MIDT binary tensor container.
//!
//! A single-tensor file is laid out as
//!
//! ```text
//! "MIDT" | version: u16 | dtype: u8 | rank: u8 | dims: rank x u64 | payload (row-major)
//! ```
//!
//! with every integer little-endian. Dtype codes are `0 = u8`, `1 = f32`,
//! `2 = u64`. A named collection (checkpoints, embedding tables) uses the same
//! header with dtype `255` and rank 1; its single dim is the entry count and
//! the payload is a sequence of `name_len: u64 | name (UTF-8) | tensor record`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MIDT";
pub const FORMAT_VERSION: u16 = 1;

const DTYPE_U8: u8 = 0;
const DTYPE_F32: u8 = 1;
const DTYPE_U64: u8 = 2;
const DTYPE_BUNDLE: u8 = 255;

/// Upper bound on any single allocation driven by header dims.
const MAX_ELEMENTS: u64 = 1 << 34;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    U64(Vec<u64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            TensorData::U8(_) => DTYPE_U8,
            TensorData::F32(_) => DTYPE_F32,
            TensorData::U64(_) => DTYPE_U64,
        }
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let expected: u64 = dims.iter().product();
        if expected != data.len() as u64 {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} elements for dims {dims:?}"),
                actual: format!("{} elements", data.len()),
            });
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", dims.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn u8(dims: Vec<u64>, data: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::U8(data))
    }

    pub fn u64(dims: Vec<u64>, data: Vec<u64>) -> Result<Self> {
        Self::new(dims, TensorData::U64(data))
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(Error::Format("expected an f32 tensor".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            _ => Err(Error::Format("expected a u8 tensor".into())),
        }
    }

    pub fn as_u64(&self) -> Result<&[u64]> {
        match &self.data {
            TensorData::U64(v) => Ok(v),
            _ => Err(Error::Format("expected a u64 tensor".into())),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, self.data.code(), &self.dims)?;
        match &self.data {
            TensorData::U8(v) => w.write_all(v)?,
            TensorData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            TensorData::U64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (code, dims) = read_header(r)?;
        read_payload(r, code, dims)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

/// An ordered collection of named tensors stored in one MIDT file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub entries: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing entry {name:?}")))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, DTYPE_BUNDLE, &[self.entries.len() as u64])?;
        for (name, tensor) in &self.entries {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            tensor.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (code, dims) = read_header(r)?;
        if code != DTYPE_BUNDLE || dims.len() != 1 {
            return Err(Error::Format("not a named-tensor bundle".into()));
        }
        let count = dims[0];
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = read_u64(r)?;
            if len > 4096 {
                return Err(Error::Format(format!("entry name length {len} too large")));
            }
            let mut name = vec![0u8; len as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            entries.push((name, Tensor::read_from(r)?));
        }
        Ok(Self { entries })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn write_header<W: Write>(w: &mut W, code: u8, dims: &[u64]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&[code, dims.len() as u8])?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(u8, Vec<u64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version)?;
    let version = u16::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut code_rank = [0u8; 2];
    r.read_exact(&mut code_rank)?;
    let dims = (0..code_rank[1])
        .map(|_| read_u64(r))
        .collect::<Result<Vec<_>>>()?;
    Ok((code_rank[0], dims))
}

fn read_payload<R: Read>(r: &mut R, code: u8, dims: Vec<u64>) -> Result<Tensor> {
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Format(format!("dims {dims:?} too large")))?
        as usize;
    let data = match code {
        DTYPE_U8 => {
            let mut v = vec![0u8; count];
            r.read_exact(&mut v)?;
            TensorData::U8(v)
        }
        DTYPE_F32 => {
            let mut bytes = vec![0u8; count * 4];
            r.read_exact(&mut bytes)?;
            TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        DTYPE_U64 => {
            let mut bytes = vec![0u8; count * 8];
            r.read_exact(&mut bytes)?;
            TensorData::U64(
                bytes
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    Tensor::new(dims, data)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
