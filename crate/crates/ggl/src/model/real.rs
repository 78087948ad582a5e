//! Scalar abstraction so the same model code monomorphizes to the f32
//! training path and the f64 analysis path.

use num_traits::Float;

pub trait Real:
    Float + Default + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    const PRECISION_TAG: u8;

    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Real for f32 {
    const PRECISION_TAG: u8 = 32;

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION_TAG: u8 = 64;

    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn into_f64(self) -> f64 {
        self
    }
}
