//! Dense tensor math with closed-form backward rules.
//!
//! The model graph is static, so every primitive comes as a forward
//! function plus a matching `*_backward` function instead of a general tape.
//! All primitives are generic over [`Real`] so that gradient checks can run
//! in 64-bit while training runs in 32-bit.

pub(crate) mod ops;
mod rng;
mod tensor;

pub use ops::*;
pub use rng::RngStream;
pub use tensor::Tensor;

use core::fmt;
use num_traits::Float;

/// Storage tag used when tensors are serialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type of a [`Tensor`].
///
/// `exp`, `ln_1p` and `tanh` come from `libm` rather than `Float`, whose
/// implementation switches to the platform's when any crate in the build
/// enables `num-traits/std`. Call them as `Real::exp(x)`.
pub trait Real: Float + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const DTYPE: DType;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn exp(self) -> Self;

    fn ln_1p(self) -> Self;

    fn tanh(self) -> Self;

    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn exp(self) -> Self {
        libm::expf(self)
    }

    fn ln_1p(self) -> Self {
        libm::log1pf(self)
    }

    fn tanh(self) -> Self {
        libm::tanhf(self)
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn exp(self) -> Self {
        libm::exp(self)
    }

    fn ln_1p(self) -> Self {
        libm::log1p(self)
    }

    fn tanh(self) -> Self {
        libm::tanh(self)
    }
}
