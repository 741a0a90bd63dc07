//! Dense f64 tensors and reverse-mode automatic differentiation.
//!
//! Everything downstream (the transformer, the samplers, training) runs on
//! these two pieces: an immutable [`Tensor`] value type with the usual dense
//! kernels, and a recording [`Graph`] tape that replays them in reverse for
//! gradients. 64-bit floats throughout; speed is irrelevant at this scale and
//! the tight cache-equivalence tolerances come for free.

mod graph;

pub use graph::{Gradients, Graph, NodeId};

use std::io::{Read, Write};
use std::sync::Arc;

use crate::masks::AttentionMask;

/// Result alias for tensor operations.
pub type TensorResult<T> = Result<T, TensorError>;

/// Errors emitted by tensor kernels and the autodiff tape.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("slice out of bounds: axis {axis} start {start} len {len} on dim {dim}")]
    SliceBounds {
        axis: usize,
        start: usize,
        len: usize,
        dim: usize,
    },
    #[error("concat axis {axis} invalid or shapes disagree off-axis")]
    ConcatShape { axis: usize },
    #[error("mask is {rows}x{cols} but logits have shape {shape:?}")]
    MaskShape {
        rows: usize,
        cols: usize,
        shape: Vec<usize>,
    },
    #[error("softmax row {row} has no admissible keys")]
    FullyMaskedRow { row: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("rotary embedding needs an even head dim, got {dim}")]
    OddRotaryDim { dim: usize },
    #[error("rotary embedding got {positions} positions for {rows} rows")]
    PositionCount { positions: usize, rows: usize },
    #[error("token id {id} outside table with {vocab} rows")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("tensor io: {0}")]
    Io(String),
}

impl From<std::io::Error> for TensorError {
    fn from(e: std::io::Error) -> Self {
        TensorError::Io(e.to_string())
    }
}

/// An immutable dense tensor: a shape plus row-major f64 storage.
///
/// Cloning is cheap (the storage is shared), and shared tensors are safe to
/// read from multiple threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from a shape and flat row-major data. Rejects length
    /// mismatches and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for op outputs; skips the finiteness scan.
    /// Divergence is caught by [`Tensor::all_finite`] where callers care.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_op(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_op(shape.to_vec(), vec![v; n])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_op(vec![1], vec![v])
    }

    /// 2-D convenience: rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> TensorResult<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::ConcatShape { axis: 0 });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// First dimension, or 1 for a scalar-shaped tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all dimensions after the first.
    pub fn cols(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Scalar extraction; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert!(self.data.len() == 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Validity check: true when no entry is NaN or infinite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View the same storage under a different shape with equal element count.
    pub fn reshape(&self, shape: Vec<usize>) -> TensorResult<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    // ── dense kernels ────────────────────────────────────────────────

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> TensorResult<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(Tensor::from_op(vec![m, n], out))
    }

    pub fn transpose(&self) -> TensorResult<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let a = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        Ok(Tensor::from_op(vec![n, m], out))
    }

    pub fn add(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.zip_same_shape("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.zip_same_shape("sub", other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.zip_same_shape("mul", other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|v| v * s).collect();
        Tensor::from_op(self.shape.clone(), data)
    }

    /// Add a single row to every row of a rank-2 tensor (bias broadcast).
    pub fn add_row(&self, row: &Tensor) -> TensorResult<Tensor> {
        let (m, n) = self.dims2("add_row")?;
        if row.len() != n {
            return Err(TensorError::DimMismatch {
                op: "add_row",
                left: self.shape.clone(),
                right: row.shape.clone(),
            });
        }
        let r = row.data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(self.data[i * n + j] + r[j]);
            }
        }
        Ok(Tensor::from_op(vec![m, n], out))
    }

    /// Concatenate along `axis` (0 = stack rows, 1 = widen columns; rank 2,
    /// except axis 0 which accepts any rank with matching trailing dims).
    pub fn concat(axis: usize, parts: &[&Tensor]) -> TensorResult<Tensor> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::ConcatShape { axis });
        }
        match axis {
            0 => {
                let tail = &parts[0].shape[1..];
                let mut rows = 0;
                let mut data = Vec::new();
                for p in parts {
                    if p.shape.len() != tail.len() + 1 || &p.shape[1..] != tail {
                        return Err(TensorError::ConcatShape { axis });
                    }
                    rows += p.shape[0];
                    data.extend_from_slice(p.data());
                }
                let mut shape = vec![rows];
                shape.extend_from_slice(tail);
                Ok(Tensor::from_op(shape, data))
            }
            _ => {
                let (m, _) = parts[0].dims2("concat")?;
                let mut widths = Vec::with_capacity(parts.len());
                let mut total = 0;
                for p in parts {
                    let (pm, pn) = p.dims2("concat")?;
                    if pm != m {
                        return Err(TensorError::ConcatShape { axis });
                    }
                    widths.push(pn);
                    total += pn;
                }
                let mut data = Vec::with_capacity(m * total);
                for i in 0..m {
                    for (p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
                    }
                }
                Ok(Tensor::from_op(vec![m, total], data))
            }
        }
    }

    /// Contiguous slice along `axis` (same axis rules as [`Tensor::concat`]).
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> TensorResult<Tensor> {
        match axis {
            0 => {
                let dim = *self.shape.first().unwrap_or(&0);
                if start + len > dim {
                    return Err(TensorError::SliceBounds {
                        axis,
                        start,
                        len,
                        dim,
                    });
                }
                let stride: usize = self.shape[1..].iter().product();
                let data = self.data[start * stride..(start + len) * stride].to_vec();
                let mut shape = vec![len];
                shape.extend_from_slice(&self.shape[1..]);
                Ok(Tensor::from_op(shape, data))
            }
            1 => {
                let (m, n) = self.dims2("slice")?;
                if start + len > n {
                    return Err(TensorError::SliceBounds {
                        axis,
                        start,
                        len,
                        dim: n,
                    });
                }
                let mut data = Vec::with_capacity(m * len);
                for i in 0..m {
                    data.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
                }
                Ok(Tensor::from_op(vec![m, len], data))
            }
            _ => Err(TensorError::SliceBounds {
                axis,
                start,
                len,
                dim: 0,
            }),
        }
    }

    /// Row-wise masked softmax with max-subtraction. Masked entries are
    /// exactly zero in the output; a fully masked row is an error because it
    /// signals a malformed mask upstream.
    pub fn softmax_masked(&self, mask: &AttentionMask) -> TensorResult<Tensor> {
        let (m, n) = self.dims2("softmax_masked")?;
        if mask.rows() != m || mask.cols() != n {
            return Err(TensorError::MaskShape {
                rows: mask.rows(),
                cols: mask.cols(),
                shape: self.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if mask.get(i, j) && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::FullyMaskedRow { row: i });
            }
            let mut sum = 0.0;
            for j in 0..n {
                if mask.get(i, j) {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        Ok(Tensor::from_op(vec![m, n], out))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> TensorResult<Tensor> {
        let (m, n) = self.dims2("layer_norm")?;
        if gain.len() != n || bias.len() != n {
            return Err(TensorError::DimMismatch {
                op: "layer_norm",
                left: self.shape.clone(),
                right: gain.shape.clone(),
            });
        }
        let g = gain.data();
        let b = bias.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op(vec![m, n], out))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Tensor {
        let data = self.data.iter().map(|&x| gelu_scalar(x)).collect();
        Tensor::from_op(self.shape.clone(), data)
    }

    /// Gather rows of an embedding table by token id.
    pub fn embedding_lookup(&self, ids: &[usize]) -> TensorResult<Tensor> {
        let (vocab, d) = self.dims2("embedding_lookup")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(&self.data[id * d..(id + 1) * d]);
        }
        Ok(Tensor::from_op(vec![ids.len(), d], data))
    }

    /// Mean squared error over all elements; scalar output.
    pub fn mse(&self, other: &Tensor) -> TensorResult<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::DimMismatch {
                op: "mse",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let n = self.len() as f64;
        let s: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(Tensor::scalar(s / n))
    }

    /// Cosine similarity of the flattened tensors. The denominator is clamped
    /// from below so near-zero vectors stay finite; well-conditioned inputs
    /// are computed exactly.
    pub fn cosine_similarity(&self, other: &Tensor) -> TensorResult<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::DimMismatch {
                op: "cosine_similarity",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let dot: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum();
        let na = self.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = other.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Tensor::scalar(dot / (na * nb).max(COSINE_EPS)))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Apply the rotary rotation for the given absolute positions to each row
    /// of a `[n, d_head]` tensor. `positions.len()` must equal `n` and the
    /// head dim must be even.
    pub fn rope(&self, positions: &[usize]) -> TensorResult<Tensor> {
        let (n, d) = self.dims2("rope")?;
        if d % 2 != 0 {
            return Err(TensorError::OddRotaryDim { dim: d });
        }
        if positions.len() != n {
            return Err(TensorError::PositionCount {
                positions: positions.len(),
                rows: n,
            });
        }
        let mut out = self.data.as_ref().clone();
        rope_rotate(&mut out, d, positions, 1.0);
        Ok(Tensor::from_op(vec![n, d], out))
    }

    // ── serialization ────────────────────────────────────────────────

    /// Binary form: little-endian u32 rank, u32 per dim, then f64 data.
    pub fn write_to<W: Write>(&self, w: &mut W) -> TensorResult<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> TensorResult<Tensor> {
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(TensorError::Io(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Tensor::new(shape, data)
    }

    fn dims2(&self, op: &'static str) -> TensorResult<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn zip_same_shape(
        &self,
        op: &'static str,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> TensorResult<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::DimMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_op(self.shape.clone(), data))
    }
}

pub(crate) const COSINE_EPS: f64 = 1e-8;
const GELU_C: f64 = 0.044715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let u = k * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = k * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place rotary rotation over a `[n, d]` buffer. `sign` -1 undoes the
/// rotation, which is what the backward pass uses.
pub(crate) fn rope_rotate(data: &mut [f64], d: usize, positions: &[usize], sign: f64) {
    let half = d / 2;
    for (row, &pos) in positions.iter().enumerate() {
        let base = row * d;
        for i in 0..half {
            let theta = pos as f64 / ROPE_BASE.powf(2.0 * i as f64 / d as f64);
            let (sin, cos) = (sign * theta).sin_cos();
            let a = data[base + 2 * i];
            let b = data[base + 2 * i + 1];
            data[base + 2 * i] = a * cos - b * sin;
            data[base + 2 * i + 1] = a * sin + b * cos;
        }
    }
}

const ROPE_BASE: f64 = 10000.0;

fn read_u32<R: Read>(r: &mut R) -> TensorResult<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
