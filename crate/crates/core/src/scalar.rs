//! Scalar abstraction for the element-level math.

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar the element and material kernels are generic over.
///
/// `f32` and `f64` both implement it; the global solver instantiates everything at
/// [`crate::Real`].
pub trait Scalar:
    Float + FromPrimitive + core::ops::AddAssign + core::ops::SubAssign + core::ops::MulAssign + core::fmt::Debug + core::fmt::Display + Default + Send + Sync + 'static
{
    /// Shorthand for lossy conversion of an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_convert_at_both_widths() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f32::lit(0.25), 0.25f32);
    }
}
