//! Dense row-major tensors with an optional gradient buffer, plus the
//! binary `TNSR` file format used to move feature maps between tools.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense multi-dimensional array of `f64` in row-major order.
///
/// The optional `grad` buffer, when present, always has the same length as
/// `data`; parameter tensors use it to accumulate reverse-mode gradients.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that the extents multiply to the data length.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::new",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Seeded uniform fill over `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn extent(&self, axis: usize) -> usize {
        self.shape[axis]
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

    /// Value at a fully-specified multi-index (test and export convenience).
    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < ext, "index {ix} out of range on axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated to zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_mut().unwrap().as_mut_slice()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Errors if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} of shape {:?} is {}",
                self.shape, self.data[i]
            ))),
        }
    }

    // ── TNSR serialization ──────────────────────────────────────────

    /// Encodes as `TNSR`: magic, u32 rank, u32 extents, f64 payload, all
    /// little-endian. The round trip is bit-exact.
    pub fn to_tnsr_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(b"TNSR");
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_tnsr_bytes(bytes: &[u8]) -> Result<Self> {
        let take = |off: usize, len: usize| -> Result<&[u8]> {
            bytes
                .get(off..off + len)
                .ok_or_else(|| Error::format("TNSR data truncated"))
        };
        if take(0, 4)? != b"TNSR" {
            return Err(Error::format("bad magic, expected TNSR"));
        }
        let rank = u32::from_le_bytes(take(4, 4)?.try_into().unwrap()) as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::format(format!("unreasonable TNSR rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut off = 8;
        for _ in 0..rank {
            let e = u32::from_le_bytes(take(off, 4)?.try_into().unwrap()) as usize;
            if e == 0 {
                return Err(Error::format("zero extent in TNSR header"));
            }
            shape.push(e);
            off += 4;
        }
        let numel: usize = shape.iter().try_fold(1usize, |acc, &e| {
            acc.checked_mul(e)
                .filter(|&n| n <= (1 << 32))
                .ok_or_else(|| Error::format("TNSR extent product overflows"))
        })?;
        if bytes.len() != off + 8 * numel {
            return Err(Error::format(format!(
                "TNSR payload length {} does not match header ({} elements)",
                bytes.len() - off,
                numel
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let v = f64::from_le_bytes(take(off + 8 * i, 8)?.try_into().unwrap());
            data.push(v);
        }
        Tensor::new(&shape, data)
    }

    pub fn write_tnsr(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tnsr_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_tnsr(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_tnsr_bytes(&bytes)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
