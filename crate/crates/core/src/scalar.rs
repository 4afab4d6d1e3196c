//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the diffusion math, networks, and metrics are generic over.
///
/// Implemented for `f32` and `f64`. Schedule constants are always computed in
/// `f64` and narrowed on construction.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal or precomputed constant into `Self`.
    fn lit(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

macro_rules! impl_scalar {
    ($f:ty) => {
        impl Scalar for $f {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $f
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

pub(crate) fn all_finite<F: Scalar>(v: &[F]) -> bool {
    v.iter().all(|x| x.is_finite())
}
