//! Images, synthetic degradations, quality metrics and attribution.

pub mod attribution;
pub mod dataset;
pub mod degrade;
pub mod metrics;
pub mod ppm;
pub mod synthetic;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Degraded input and its ground truth, both `H x W x 3` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair<T> {
    pub degraded: Tensor<T>,
    pub clean: Tensor<T>,
}

impl<T: Scalar> ImagePair<T> {
    pub fn new(degraded: Tensor<T>, clean: Tensor<T>) -> Result<Self> {
        if degraded.shape() != clean.shape() {
            return dim_err("image pair", degraded.shape(), clean.shape());
        }
        degraded.hwc()?;
        Ok(Self { degraded, clean })
    }
}

pub fn clamp01<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()).min(T::one()))
}
