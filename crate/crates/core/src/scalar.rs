//! Scalar abstraction.
//!
//! All numerical code in this crate is generic over [`Scalar`], so the same
//! routines run in `f32` or `f64`. Concrete aliases for the common `f64`
//! instantiation live at the crate root.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Real scalar type the lab can run on.
///
/// The bound set is what the dense linear algebra needs ([`RealField`]) plus
/// conversions for counts/literals and a standard normal sampler.
pub trait Scalar: RealField + FromPrimitive + ToPrimitive + Copy + Default + Send + Sync {
    /// Machine epsilon of the type.
    fn eps() -> Self;

    /// Lossy conversion from `f64`, used for tolerances and literals.
    fn of(x: f64) -> Self;

    /// Conversion from a count. Panics only if the count overflows the
    /// mantissa, which no dimension in this crate approaches.
    fn from_count(n: usize) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn finite(self) -> bool;

    /// One N(0, 1) draw.
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn eps() -> Self {
        f32::EPSILON
    }
    fn of(x: f64) -> Self {
        x as f32
    }
    fn from_count(n: usize) -> Self {
        n as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    fn eps() -> Self {
        f64::EPSILON
    }
    fn of(x: f64) -> Self {
        x
    }
    fn from_count(n: usize) -> Self {
        n as f64
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}
