//! Floating point abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits as nt;

/// Real scalar usable by the dynamics, barrier functions and the autodiff tape.
pub trait Scalar:
    nt::Float
    + nt::FloatConst
    + nt::FromPrimitive
    + nt::NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

macro_rules! impl_scalar {
    ($f:ty) => {
        impl Scalar for $f {
            #[inline]
            fn lit(x: f64) -> Self {
                x as $f
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

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle<F: Scalar>(theta: F) -> F {
    let two_pi = F::PI() + F::PI();
    let mut t = theta % two_pi;
    if t <= -F::PI() {
        t += two_pi;
    } else if t > F::PI() {
        t -= two_pi;
    }
    t
}

/// Euclidean norm of a slice.
pub fn norm<F: Scalar>(v: &[F]) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn wrap_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5_f64) - 0.5).abs() < 1e-15);
        assert!((wrap_angle(6.0_f64) - (6.0 - 2.0 * PI)).abs() < 1e-12);
        assert!((wrap_angle(1.0_f32) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn norm_345() {
        assert_eq!(norm(&[3.0, 4.0]), 5.0);
    }
}
