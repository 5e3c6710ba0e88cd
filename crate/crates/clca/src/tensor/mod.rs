//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! All kernels are pure, single-threaded, and deterministic: identical inputs
//! produce bitwise-identical outputs on the same build. Every kernel checks
//! its output for NaN/Inf and surfaces an error instead of propagating it.

mod tape;
#[cfg(test)]
mod tape_tests;

pub use tape::{backward, BatchStats, Tape, TensorId};

use crate::error::{Error, Result};

/// Element type for tensors: `f32` for training and inference, `f64` for
/// gradient verification.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Exact Gauss error function at this precision.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Dense row-major numeric array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }
}

/// Indices of the `k` largest scores, returned in ascending original-index
/// order. Ties break toward the smaller original index.
pub fn topk_stable<S: Scalar>(scores: &[S], k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(Error::shape(
            "topk_stable",
            format!("k = {} out of range for {} scores", k, n),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort by descending score keeps equal scores in index order.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_shape_data_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![1.0f32; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains('5'), "{msg}");
    }

    #[test]
    fn topk_worked_example() {
        let scores = [0.3f64, 0.05, 0.2, 0.1, 0.25, 0.1];
        // Oracle: sort (score, index) pairs descending, take 3, sort indices.
        let mut pairs: Vec<(f64, usize)> = scores.iter().cloned().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expect: Vec<usize> = pairs[..3].iter().map(|p| p.1).collect();
        expect.sort_unstable();
        assert_eq!(expect, vec![0, 2, 4]);
        assert_eq!(topk_stable(&scores, 3).unwrap(), expect);
    }

    #[test]
    fn topk_keep_all() {
        let scores = [0.1f32, 0.9, 0.5, 0.5];
        assert_eq!(topk_stable(&scores, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn topk_all_equal_breaks_ties_to_smallest_index() {
        let scores = [0.25f32; 5];
        assert_eq!(topk_stable(&scores, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn topk_rejects_out_of_range_k() {
        let scores = [1.0f32, 2.0];
        assert!(topk_stable(&scores, 0).is_err());
        assert!(topk_stable(&scores, 3).is_err());
    }
}
