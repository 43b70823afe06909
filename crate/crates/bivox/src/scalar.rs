//! Element-type abstraction over the two numeric modes.
//!
//! The whole model runs either in 32-bit (the default for training and
//! decoding) or in 64-bit (reserved for gradient checking and bitwise
//! causality probes). Everything numeric is generic over [`Scalar`] so both
//! modes share one implementation.

use std::fmt::{Debug, Display};

/// Element type tag stored in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

/// Floating-point element of the numeric kernels.
pub trait Scalar:
    num_traits::Float + Copy + Send + Sync + Debug + Display + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shorthand cast used throughout the kernels.
#[inline]
pub fn fl<S: Scalar>(x: f64) -> S {
    S::from_f64(x)
}
