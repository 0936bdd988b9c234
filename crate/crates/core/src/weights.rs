//! The `TCPW` named-array container.
//!
//! Layout (little-endian, no padding): magic `TCPW`, `u32` version (1), `u32`
//! array count, then per array a `u16` name length, the UTF-8 name, a `u8`
//! rank, `rank` × `u32` extents and the row-major `f64` payload.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{put_f64s, FormatError, Reader};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"TCPW";
pub const VERSION: u32 = 1;

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArraySet {
    arrays: Vec<(String, Tensor)>,
}

impl ArraySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.arrays.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Removes `name`, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor, FormatError> {
        let idx = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| FormatError::ShapeTable(format!("missing array '{name}'")))?;
        let (_, t) = self.arrays.remove(idx);
        if t.shape() != shape {
            return Err(FormatError::ShapeTable(format!(
                "array '{name}' has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Errors if arrays remain after all expected ones were taken.
    pub fn expect_empty(&self) -> Result<(), FormatError> {
        match self.arrays.first() {
            None => Ok(()),
            Some((name, _)) => Err(FormatError::ShapeTable(format!(
                "unexpected array '{name}'"
            ))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(FormatError::Version {
                expected: VERSION,
                found: version,
            });
        }
        let count = r.u32("array count")? as usize;
        let mut seen = HashSet::new();
        let mut set = ArraySet::new();
        for index in 0..count {
            let name_len = r.u16(&format!("name length of array #{index}"))? as usize;
            let name = r.take(name_len, || format!("name of array #{index}"))?;
            let name = std::str::from_utf8(name)
                .map_err(|_| {
                    FormatError::ShapeTable(format!("name of array #{index} is not UTF-8"))
                })?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(FormatError::ShapeTable(format!("duplicate array '{name}'")));
            }
            let rank = r.u8(&format!("rank of array '{name}'"))? as usize;
            if rank == 0 {
                return Err(FormatError::ShapeTable(format!(
                    "array '{name}' has rank 0"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&format!("extents of array '{name}'"))? as usize);
            }
            if shape.contains(&0) {
                return Err(FormatError::ShapeTable(format!(
                    "array '{name}' has a zero extent {shape:?}"
                )));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| FormatError::ShapeTable(format!("array '{name}' is too large")))?;
            let data = r.f64s(numel, || format!("data of array '{name}'"))?;
            let t = Tensor::new(shape, data).map_err(|e| FormatError::ShapeTable(e.to_string()))?;
            set.push(name, t);
        }
        r.finish()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&bytes)?)
    }
}
