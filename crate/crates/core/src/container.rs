//! Binary tensor container shared by models, datasets and checkpoints.
//!
//! Layout (little-endian): `"SPRT"`, format version `u32`, entry count `u32`,
//! then per entry: name length `u16`, UTF-8 name, dtype `u8` (0 = f32,
//! 1 = i64, 2 = u8), rank `u8`, `rank` dims as `u64`, raw data.

use std::path::Path;

use crate::error::{ContainerError, Error, Result};

pub const MAGIC: &[u8; 4] = b"SPRT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::I64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I64(_) => "i64",
            TensorData::U8(_) => "u8",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

/// Ordered set of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<Entry>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn insert(&mut self, name: &str, dims: &[usize], data: TensorData) -> Result<()> {
        if name.len() > u16::MAX as usize || name.is_empty() {
            return Err(ContainerError::BadName.into());
        }
        if self.contains(name) {
            return Err(ContainerError::DuplicateName(name.to_string()).into());
        }
        if dims.len() > u8::MAX as usize || dims.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!("entry `{name}` dims {dims:?} do not match {} values", data.len())));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            dims: dims.iter().map(|d| *d as u64).collect(),
            data,
        });
        Ok(())
    }

    /// Stores `f64` values as `f32`.
    pub fn insert_f64(&mut self, name: &str, dims: &[usize], values: &[f64]) -> Result<()> {
        self.insert(name, dims, TensorData::F32(values.iter().map(|v| *v as f32).collect()))
    }

    pub fn insert_i64(&mut self, name: &str, dims: &[usize], values: &[i64]) -> Result<()> {
        self.insert(name, dims, TensorData::I64(values.to_vec()))
    }

    pub fn insert_u8(&mut self, name: &str, dims: &[usize], values: &[u8]) -> Result<()> {
        self.insert(name, dims, TensorData::U8(values.to_vec()))
    }

    /// Stores a UTF-8 string as a rank-1 `u8` tensor.
    pub fn insert_str(&mut self, name: &str, s: &str) -> Result<()> {
        self.insert_u8(name, &[s.len()], s.as_bytes())
    }

    pub fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| ContainerError::Missing(name.to_string()).into())
    }

    fn mismatch(e: &Entry, expected: String) -> Error {
        ContainerError::Mismatch {
            name: e.name.clone(),
            found: format!("{}{:?}", e.data.dtype_name(), e.dims),
            expected,
        }
        .into()
    }

    fn check_dims(e: &Entry, dims: Option<&[usize]>, dtype: &str) -> Result<()> {
        if let Some(d) = dims {
            if e.dims.len() != d.len() || e.dims.iter().zip(d).any(|(a, b)| *a as usize != *b) {
                return Err(Self::mismatch(e, format!("{dtype}{d:?}")));
            }
        }
        Ok(())
    }

    /// `f32` entry widened to `f64`; `dims` is checked when given.
    pub fn f64s(&self, name: &str, dims: Option<&[usize]>) -> Result<Vec<f64>> {
        let e = self.get(name)?;
        Self::check_dims(e, dims, "f32")?;
        match &e.data {
            TensorData::F32(v) => Ok(v.iter().map(|x| *x as f64).collect()),
            _ => Err(Self::mismatch(e, "f32".into())),
        }
    }

    pub fn i64s(&self, name: &str, dims: Option<&[usize]>) -> Result<Vec<i64>> {
        let e = self.get(name)?;
        Self::check_dims(e, dims, "i64")?;
        match &e.data {
            TensorData::I64(v) => Ok(v.clone()),
            _ => Err(Self::mismatch(e, "i64".into())),
        }
    }

    pub fn u8s(&self, name: &str, dims: Option<&[usize]>) -> Result<Vec<u8>> {
        let e = self.get(name)?;
        Self::check_dims(e, dims, "u8")?;
        match &e.data {
            TensorData::U8(v) => Ok(v.clone()),
            _ => Err(Self::mismatch(e, "u8".into())),
        }
    }

    pub fn string(&self, name: &str) -> Result<String> {
        String::from_utf8(self.u8s(name, None)?).map_err(|_| ContainerError::BadName.into())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.tag());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut c = TensorContainer::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| ContainerError::BadName)?.to_string();
            if name.is_empty() {
                return Err(ContainerError::BadName);
            }
            if c.contains(&name) {
                return Err(ContainerError::DuplicateName(name));
            }
            let tag = r.array::<1>()?[0];
            let rank = r.array::<1>()?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(r.array()?));
            }
            let n = dims
                .iter()
                .try_fold(1u64, |acc, d| acc.checked_mul(*d))
                .ok_or(ContainerError::Truncated)? as usize;
            let data = match tag {
                0 => TensorData::F32(r.take(n.checked_mul(4).ok_or(ContainerError::Truncated)?)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
                1 => TensorData::I64(r.take(n.checked_mul(8).ok_or(ContainerError::Truncated)?)?.chunks_exact(8).map(|b| i64::from_le_bytes(b.try_into().unwrap())).collect()),
                2 => TensorData::U8(r.take(n)?.to_vec()),
                t => return Err(ContainerError::UnknownDtype(t)),
            };
            c.entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(ContainerError::TrailingBytes);
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated)?;
        if end > self.bytes.len() {
            return Err(ContainerError::Truncated);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ContainerError> {
        Ok(self.take(N)?.try_into().unwrap())
    }
}

/// Rounds through `f32`, the precision every stored tensor has.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}
