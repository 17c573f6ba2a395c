//! Checkpoint files: named tensors with shape headers and raw little-endian
//! 32-bit payloads, including the optimizer moments and step counter.
//!
//! Layout: `RRLCKPT1`, u64 step, u32 tensor count, then per tensor
//! u32 name length, UTF-8 name, u32 rank, u64 dims, f32 values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"RRLCKPT1";
const PARAM_PREFIX: &str = "param/";
const FIRST_MOMENT_PREFIX: &str = "adam.m/";
const SECOND_MOMENT_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn capture(params: &ParamSet<f32>, optimizer: Option<&Adam<f32>>) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = params
            .iter()
            .map(|p| (format!("{PARAM_PREFIX}{}", p.name), p.value.clone()))
            .collect();
        let mut step = 0;
        if let Some(adam) = optimizer {
            step = adam.step_count();
            let (first, second) = adam.moments();
            for (p, m) in params.iter().zip(first) {
                tensors.push((format!("{FIRST_MOMENT_PREFIX}{}", p.name), m.clone()));
            }
            for (p, v) in params.iter().zip(second) {
                tensors.push((format!("{SECOND_MOMENT_PREFIX}{}", p.name), v.clone()));
            }
        }
        Checkpoint { step, tensors }
    }

    fn find(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn collect(&self, prefix: &str, params: &ParamSet<f32>) -> Result<Vec<Tensor<f32>>> {
        params
            .iter()
            .map(|p| {
                let name = format!("{prefix}{}", p.name);
                let t = self
                    .find(&name)
                    .ok_or_else(|| Error::Invariant(format!("checkpoint lacks tensor {name}")))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Shape(format!(
                        "{name}: checkpoint {:?} vs model {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                Ok(t.clone())
            })
            .collect()
    }

    /// Copies the stored values into `params`, checking names and shapes.
    pub fn restore_params(&self, params: &mut ParamSet<f32>) -> Result<()> {
        let values = self.collect(PARAM_PREFIX, params)?;
        for (p, v) in params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, params: &ParamSet<f32>, optimizer: &mut Adam<f32>) -> Result<()> {
        let first = self.collect(FIRST_MOMENT_PREFIX, params)?;
        let second = self.collect(SECOND_MOMENT_PREFIX, params)?;
        optimizer.restore(first, second, self.step)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Invariant("not a checkpoint file (bad magic)".into()));
        }
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Invariant("checkpoint tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = r
                .take(len * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Invariant("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Invariant("truncated checkpoint".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
