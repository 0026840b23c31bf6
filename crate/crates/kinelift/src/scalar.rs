//! Scalar abstraction for the numeric kernels.
//!
//! All core math (kinematics, networks, optimizers, alignment) is generic
//! over [`Real`], implemented for `f32` and `f64`. File formats and the CLI
//! operate at `f64`; see the concrete aliases at the crate root.

use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    nalgebra::RealField + FromPrimitive + ToPrimitive + Copy + Default + Send + Sync
{
    /// Converts an `f64` constant into the scalar type.
    fn from_f64c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("constant not representable in scalar type")
    }

    /// Widens the scalar to `f64` (exact for `f32` and `f64`).
    fn to_f64c(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar not representable as f64")
    }

    fn is_finite_real(self) -> bool {
        self.to_f64c().is_finite()
    }
}

impl<T> Real for T where
    T: nalgebra::RealField + FromPrimitive + ToPrimitive + Copy + Default + Send + Sync
{
}

/// Shorthand for `T::from_f64c` in expression position.
pub fn real<T: Real>(v: f64) -> T {
    T::from_f64c(v)
}
