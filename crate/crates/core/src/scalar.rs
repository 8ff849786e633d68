//! Floating-point scalar abstraction shared by the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the numeric kernels are written against.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for literals.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dot product accumulated in the scalar type.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Squared Euclidean distance accumulated in the scalar type.
pub fn squared_l2<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// Squared Euclidean distance between `f32` slices with `f64` accumulation.
pub fn squared_l2_wide(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |acc, (&x, &y)| {
        let d = f64::from(x) - f64::from(y);
        acc + d * d
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_across_precisions() {
        let a = [1.0f32, 2.0, 3.0];
        let b = [0.5f32, -1.0, 4.0];
        assert_eq!(dot(&a, &b), 10.5);
        assert_eq!(squared_l2(&a, &b), 0.25 + 9.0 + 1.0);
        assert_eq!(squared_l2_wide(&a, &b), 10.25);
        let a64: Vec<f64> = a.iter().map(|&v| v.into()).collect();
        let b64: Vec<f64> = b.iter().map(|&v| v.into()).collect();
        assert_eq!(dot(&a64, &b64), 10.5);
    }
}
