//! Dense f64 tensor engine with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value; [`Tape`] records primitive
//! operations during the forward pass and replays them in reverse to
//! populate gradients. There is no broadcasting: every rank change is an
//! explicit reshape or gather, which removes a whole class of silent shape
//! bugs at this scale.
//!
//! A tape is single-threaded; distinct tapes share no state and may run on
//! distinct threads (the gradient checker and the acceptance suite rely on
//! that).

mod gradcheck;
#[cfg(test)]
mod op_tests;
pub(crate) mod raw;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{AttnWeights, Tape, TensorId};

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Input("from_rows: empty or ragged rows".into()));
        }
        Tensor::new(vec![m, n], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.shape.len(), 2);
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-sample row ranges inside a flattened `[total_rows, d]` tensor.
///
/// Token tensors for a batch are stored with all samples' rows
/// concatenated; `RowBlocks` records where each sample starts and how many
/// rows it owns. This is what lets ragged text batches share one matmul.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowBlocks {
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl RowBlocks {
    pub fn from_lens(lens: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        RowBlocks { offsets, lens }
    }

    pub fn uniform(samples: usize, len: usize) -> Self {
        RowBlocks::from_lens(vec![len; samples])
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn samples(&self) -> usize {
        self.lens.len()
    }

    /// Flat row index of (sample, position).
    pub fn flat(&self, sample: usize, pos: usize) -> usize {
        debug_assert!(pos < self.lens[sample]);
        self.offsets[sample] + pos
    }

    pub fn range(&self, sample: usize) -> std::ops::Range<usize> {
        self.offsets[sample]..self.offsets[sample] + self.lens[sample]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn row_blocks_flat_indexing() {
        let b = RowBlocks::from_lens(vec![3, 1, 2]);
        assert_eq!(b.total(), 6);
        assert_eq!(b.flat(0, 2), 2);
        assert_eq!(b.flat(1, 0), 3);
        assert_eq!(b.flat(2, 1), 5);
        assert_eq!(b.range(2), 4..6);
    }
}
