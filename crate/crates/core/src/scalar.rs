//! Floating-point scalar abstraction.
//!
//! All numeric code in this crate is generic over [`Scalar`], which is
//! implemented for `f32` and `f64`. Concrete aliases for the common types
//! live at the crate root.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::distr::uniform::SampleUniform;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + SampleUniform
    + Serialize
    + DeserializeOwned
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Conversion from an `f64` constant.
    fn cast(value: f64) -> Self;

    /// Widen to `f64`.
    fn as_f64(self) -> f64;

    /// Draw a standard-normal variate.
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Draw a uniform variate in `[0, 1)`.
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random_range(Self::zero()..Self::one())
    }

    /// Conversion from a count.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn cast(value: f64) -> Self {
                value as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                rng.sample(StandardNormal)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Left-to-right sum. Used wherever bit-reproducible accumulation matters.
pub fn sum<F: Scalar>(values: &[F]) -> F {
    values.iter().fold(F::zero(), |acc, &v| acc + v)
}

/// Euclidean norm of a slice.
pub fn norm<F: Scalar>(values: &[F]) -> F {
    values
        .iter()
        .fold(F::zero(), |acc, &v| acc + v * v)
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn casts_round_trip() {
        assert_eq!(f64::cast(1.5), 1.5);
        assert_eq!(f32::cast(1.5), 1.5f32);
        assert_eq!(2.5f64.as_f64(), 2.5);
    }

    #[test]
    fn unit_uniform_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let u: f64 = Scalar::unit_uniform(&mut rng);
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn sum_is_left_to_right() {
        let xs = [1.0f64, 1e-16, 1e-16];
        // (1 + 1e-16) + 1e-16 stays 1.0 in f64; a different association would not.
        assert_eq!(sum(&xs), ((1.0 + 1e-16) + 1e-16));
    }
}
