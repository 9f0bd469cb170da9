//! Named-tensor archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SANT" | version u32 = 1 | count u32
//! per tensor: name_len u32 | name (UTF-8) | dtype u8 (0 = f32, 1 = f64)
//!             | rank u8 | dims u64 * rank | data
//! ```

use std::any::Any;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Parameters, Tensor};

pub const MAGIC: &[u8; 4] = b"SANT";
pub const VERSION: u32 = 1;

/// A tensor in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Stored {
    /// Keeps the precision of `T`; values are moved bit for bit.
    pub fn from_tensor<T: Float>(t: Tensor<T>) -> Self {
        let any: Box<dyn Any> = Box::new(t);
        match any.downcast::<Tensor<f32>>() {
            Ok(t) => Stored::F32(*t),
            Err(any) => match any.downcast::<Tensor<f64>>() {
                Ok(t) => Stored::F64(*t),
                Err(_) => unreachable!("Float is implemented for f32 and f64 only"),
            },
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Stored::F32(_) => DType::Float32,
            Stored::F64(_) => DType::Float64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::F64(t) => t.shape(),
        }
    }

    /// The tensor in precision `T`: bit-exact when `T` is the stored
    /// precision, otherwise converted.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        let any: Box<dyn Any> = match self {
            Stored::F32(t) => Box::new(t.clone()),
            Stored::F64(t) => Box::new(t.clone()),
        };
        match any.downcast::<Tensor<T>>() {
            Ok(t) => t.detached_copy(),
            Err(_) => match self {
                Stored::F32(t) => t.cast(),
                Stored::F64(t) => t.cast(),
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: IndexMap<String, Stored>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert<T: Float>(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::usage(format!("duplicate tensor name {name:?}")));
        }
        self.tensors.insert(name, Stored::from_tensor(t));
        Ok(())
    }

    pub fn get<T: Float>(&self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .get(name)
            .map(|s| s.to_tensor())
            .ok_or_else(|| Error::usage(format!("archive has no tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().tag());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                Stored::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Stored::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"SANT\""));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::format(at + 4, "tensor name is not UTF-8"))?
                .to_string();
            let tag_at = r.pos as u64;
            let dtype = DType::from_tag(r.u8("dtype")?).ok_or_else(|| Error::format(tag_at, "unknown dtype tag"))?;
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(tag_at, "tensor size overflows"))?;
            let bytes_len = numel
                .checked_mul(dtype.size_of())
                .ok_or_else(|| Error::format(tag_at, "tensor size overflows"))?;
            let bytes = r.take(bytes_len, "tensor data")?;
            let stored = match dtype {
                DType::Float32 => Stored::F32(Tensor::new(
                    shape,
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )?),
                DType::Float64 => Stored::F64(Tensor::new(
                    shape,
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )?),
            };
            if archive.tensors.contains_key(&name) {
                return Err(Error::format(at, format!("duplicate tensor name {name:?}")));
            }
            archive.tensors.insert(name, stored);
        }
        if r.pos != buf.len() {
            return Err(Error::format(
                r.pos as u64,
                format!("{} trailing bytes after last tensor", buf.len() - r.pos),
            ));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Every tensor of `params` under its visiting name.
    pub fn from_params<T: Float>(params: &impl Parameters<T>) -> Result<Self> {
        let mut a = Archive::new();
        let mut result = Ok(());
        params.visit(&mut |name, t| {
            if result.is_ok() {
                result = a.insert(name, t.detached_copy());
            }
        });
        result.map(|_| a)
    }

    /// Overwrites every tensor of `params` with the archived value of the same
    /// name, keeping identities and gradient flags.
    pub fn load_into<T: Float>(&self, params: &mut impl Parameters<T>) -> Result<()> {
        let mut result = Ok(());
        params.visit_mut(&mut |name, t| {
            if result.is_err() {
                return;
            }
            result = match self.tensors.get(name) {
                None => Err(Error::usage(format!("archive has no tensor {name:?}"))),
                Some(s) if s.shape() != t.shape() => Err(Error::dim(format!(
                    "archived {name} has shape {:?}, model expects {:?}",
                    s.shape(),
                    t.shape()
                ))),
                Some(s) => {
                    let v = s.to_tensor::<T>();
                    t.data_mut().copy_from_slice(v.data());
                    Ok(())
                }
            };
        });
        result
    }
}
