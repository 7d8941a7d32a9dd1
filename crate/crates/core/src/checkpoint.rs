//! Named-tensor parameter container.
//!
//! Layout, little-endian: version byte, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rank, `u64` per dimension and the
//! `f64` payload in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const VERSION: u8 = 1;

/// Tensors keyed by name, stored in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f64>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Corruption(format!("checkpoint has no tensor `{name}`")))
    }

    /// Removes and returns a tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<ArrayD<f64>> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Corruption(format!("checkpoint has no tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Corruption(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(&[VERSION])?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Corruption(format!("reading checkpoint: {e}")))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let version = cur.take(1)?[0];
        if version != VERSION {
            return Err(Error::Corruption(format!("unsupported checkpoint version {version}")));
        }
        let count = cur.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corruption(format!("tensor `{name}` shape overflows")))?;
            let payload = cur.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Corruption("payload overflows".into()))?,
            )?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("numel matches shape");
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Corruption(format!("duplicate tensor `{name}`")));
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Corruption("trailing bytes after last tensor".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec");
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corruption("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
