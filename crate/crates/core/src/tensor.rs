//! Dense row-major tensors used for operands and outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("zero-sized dimension in shape {0:?}")]
    EmptyDim(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Input words.
pub type InTensor = Tensor<i16>;
/// Accumulated outputs.
pub type OutTensor = Tensor<i32>;

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::default(); n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyDim(shape.to_vec()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                len: data.len(),
                expected,
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major element strides.
    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    pub fn offset(&self, coord: &[usize]) -> usize {
        debug_assert_eq!(coord.len(), self.shape.len());
        coord.iter().zip(self.strides()).map(|(c, s)| c * s).sum()
    }

    pub fn get(&self, coord: &[usize]) -> T {
        self.data[self.offset(coord)]
    }

    pub fn set(&mut self, coord: &[usize], v: T) {
        let o = self.offset(coord);
        self.data[o] = v;
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for r in (0..shape.len().saturating_sub(1)).rev() {
        strides[r] = strides[r + 1] * shape[r + 1];
    }
    strides
}

/// Uniform random words in `[-lim, lim)`.
pub fn random_tensor(shape: &[usize], lim: i16, rng: &mut ChaCha8Rng) -> InTensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-lim..lim)).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Deterministic operand pair for a workload.
pub fn random_inputs(w: &crate::workload::Workload, seed: u64) -> [InTensor; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_tensor(&w.operands[0].shape, 64, &mut rng);
    let b = random_tensor(&w.operands[1].shape, 64, &mut rng);
    [a, b]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strides_row_major() {
        assert_eq!(row_major_strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(row_major_strides(&[5]), vec![1]);
    }

    #[test]
    fn from_vec_checks_len() {
        assert!(Tensor::<i16>::from_vec(&[2, 2], vec![0; 3]).is_err());
        assert!(Tensor::<i16>::from_vec(&[0, 2], vec![]).is_err());
        let t = Tensor::from_vec(&[2, 2], vec![1i16, 2, 3, 4]).unwrap();
        assert_eq!(t.get(&[1, 0]), 3);
    }
}
