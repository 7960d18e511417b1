//! Dense row-major tensors.
//!
//! A `Tensor` is just a shape and a flat value buffer. Gradients do not
//! live here; they are held by the autodiff graph for the duration of a
//! forward/backward pass (see [`crate::graph`]). Finiteness is enforced
//! when values enter from outside so NaN/Inf never leak into the graph.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    /// Build from raw parts, validating extent product and finiteness.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::Dimension(format!(
                "shape {shape:?} implies {numel} values, got {}",
                data.len()
            )));
        }
        for v in &data {
            if !v.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "tensor of shape {shape:?} contains {v}"
                )));
            }
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Truncated-normal init: N(mu, sigma^2) rejection-sampled into [lo, hi].
    pub fn trunc_normal(
        shape: &[usize],
        mu: f64,
        sigma: f64,
        lo: f64,
        hi: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(F::from_f64(rng.next_trunc_normal(mu, sigma, lo, hi)?));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Glorot/Xavier uniform init for a [fan_in, fan_out] weight matrix.
    pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let numel = fan_in * fan_out;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(F::from_f64((rng.next_f64() * 2.0 - 1.0) * bound));
        }
        Tensor {
            shape: vec![fan_in, fan_out],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Rank-2 accessor; panics on rank mismatch (internal misuse, not input).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a rank-2 tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a rank-2 tensor");
        self.shape[1]
    }

    /// Convert element type (used when loading f32 checkpoints into f64 sessions).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Shape equality helper with a readable error.
pub fn check_same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(CoreError::Dimension(format!(
            "{op}: shapes {a:?} and {b:?} differ"
        )));
    }
    Ok(())
}
