//! Dense f64 tensors with reverse-mode gradients.
//!
//! Compute is f64 throughout (file formats stay f32): the finite-difference
//! oracle in [`gradcheck`] needs the extra precision to resolve rule bugs
//! from roundoff. Tensors are value-semantic; differentiation happens on a
//! [`Graph`] tape that records every operation together with the inputs its
//! backward rule needs.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use graph::{Graph, NodeId};

use thiserror::Error;

/// Ranks above this are rejected; every shape in the pipeline fits in four axes.
pub const MAX_RANK: usize = 4;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rank {0} exceeds the supported maximum of {MAX_RANK}")]
    RankTooHigh(usize),
    #[error("data length {got} does not match shape product {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("reduction over an empty axis")]
    EmptyAxis,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss evaluated to a non-finite value")]
    NonFiniteLoss,
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("token index {index} out of bounds for axis length {len}")]
    IndexOutOfBounds { index: usize, len: usize },
}

/// Dense n-dimensional array of f64 values with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor from a shape and raw data. Rejects rank > [`MAX_RANK`],
    /// length mismatches, and non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.len() > MAX_RANK {
            return Err(TensorError::RankTooHigh(shape.len()));
        }
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(TensorError::LengthMismatch {
                got: data.len(),
                want,
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Self::from_vec(&[1], vec![value])
    }

    /// Fills a tensor with independent draws from `uniform(lo, hi)`.
    pub fn rand_uniform<R: rand::Rng>(
        shape: &[usize],
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_vec(shape, data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn ensure_grad(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub(crate) fn clear_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Flat offset of `[b, n, c]` in a rank-3 tensor.
    pub fn idx3(&self, b: usize, n: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (b * self.shape[1] + n) * self.shape[2] + c
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.rank());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }
}

/// Exact-CDF GELU: `x * Phi(x)` with `Phi` the standard normal CDF.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Derivative of the exact-CDF GELU: `Phi(x) + x * phi(x)`.
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_shape_and_rank() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::from_vec(&[2, 3], vec![0.0; 5]),
            Err(TensorError::LengthMismatch { got: 5, want: 6 })
        ));
        assert!(matches!(
            Tensor::from_vec(&[1, 1, 1, 1, 1], vec![0.0]),
            Err(TensorError::RankTooHigh(5))
        ));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(matches!(
            Tensor::from_vec(&[2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { .. })
        ));
        assert!(matches!(
            Tensor::from_vec(&[1], vec![f64::INFINITY]),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn gelu_matches_known_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // gelu(x) -> x for large x
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        // gelu(x) -> 0 for very negative x
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
        // gelu(1) = 1 * Phi(1) = 0.841344746...
        assert!((gelu_scalar(1.0) - 0.841344746068543).abs() < 1e-12);
    }

    #[test]
    fn idx3_is_row_major() {
        let t = Tensor::from_vec(&[2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0, 0]), 0.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
        assert_eq!(t.at(&[1, 0, 0]), 12.0);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.idx3(1, 2, 3), 23);
    }
}
