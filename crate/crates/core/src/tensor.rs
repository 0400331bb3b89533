//! Dense row-major `f64` tensors and the `BNST` binary encoding.
//!
//! Layout on disk (all little-endian):
//!
//! ```text
//! "BNST" | u32 rank | u32 extent * rank | f64 payload * product(extents)
//! ```
//!
//! A rank-0 tensor is a scalar with a one-element payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const BNST_MAGIC: &[u8; 4] = b"BNST";

/// Upper bound on rank accepted by the decoder.
pub const MAX_RANK: usize = 8;

/// Upper bound on element count accepted by the decoder (1 GiB of payload).
pub const MAX_ELEMENTS: usize = 1 << 27;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

fn numel_of(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n = numel_of(&shape)
            .ok_or_else(|| Error::shape("tensor", format!("extent overflow in {shape:?}")))?;
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = numel_of(shape).expect("extent overflow");
        assert!(n > 0, "zero extent in {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value], requires_grad: false, grad: None }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[f64]) -> Self {
        Tensor::new(vec![values.len()], values.to_vec()).expect("non-empty slice")
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape("item", format!("expected one element, shape {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        match numel_of(&shape) {
            Some(n) if n == self.data.len() && shape.iter().all(|&d| d > 0) => {
                self.shape = shape;
                Ok(self)
            }
            _ => Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            )),
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("grad of {} values for tensor of {}", delta.len(), self.data.len()),
            ));
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (a, d) in g.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Encodes the value (not the gradient) in `BNST` form.
    pub fn to_bnst(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(BNST_MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes one `BNST` record from the front of `bytes`, returning the
    /// tensor and the number of bytes consumed.
    pub fn from_bnst_prefix(bytes: &[u8]) -> Result<(Tensor, usize)> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != BNST_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let rank = cur.u32()? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.u32()? as usize;
            if d == 0 {
                return Err(Error::Format("zero extent".into()));
            }
            shape.push(d);
        }
        let n = numel_of(&shape)
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Format(format!("element count too large for {shape:?}")))?;
        let payload = cur.take(n * 8)?;
        let mut data = Vec::with_capacity(n);
        for chunk in payload.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(Error::Format("non-finite value in payload".into()));
            }
            data.push(v);
        }
        Ok((Tensor { shape, data, requires_grad: false, grad: None }, cur.pos))
    }

    /// Decodes a buffer holding exactly one `BNST` record.
    pub fn from_bnst(bytes: &[u8]) -> Result<Tensor> {
        let (t, used) = Self::from_bnst_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(t)
    }

    pub fn write_bnst(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bnst())?;
        Ok(())
    }

    pub fn read_bnst(path: &Path) -> Result<Tensor> {
        Self::from_bnst(&fs::read(path)?)
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
            .ok_or_else(|| Error::Format("truncated record".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
