use std::fmt::{Debug, Display};

/// Floating-point scalar the tensor stack is generic over.
///
/// Codec paths instantiate `f32`; gradient checks and numeric oracles use
/// `f64`. Conversions get explicit `_lossy`/`_exact` names so call sites show
/// where precision can drop, and `below_one` exposes the exact binary
/// neighbor of 1.0 so clamped sigmoids can honor an open upper bound.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Copy + Send + Sync + Debug + Display + 'static
{
    /// Largest representable value strictly below 1.
    fn below_one() -> Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn from_f32_exact(v: f32) -> Self;
    fn to_f32_lossy(self) -> f32;
    fn from_usize(v: usize) -> Self;
}

impl Scalar for f32 {
    fn below_one() -> Self {
        f32::from_bits(1.0f32.to_bits() - 1)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn from_f32_exact(v: f32) -> Self {
        v
    }
    fn to_f32_lossy(self) -> f32 {
        self
    }
    fn from_usize(v: usize) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn below_one() -> Self {
        f64::from_bits(1.0f64.to_bits() - 1)
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn from_f32_exact(v: f32) -> Self {
        v as f64
    }
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
    fn from_usize(v: usize) -> Self {
        v as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn below_one_is_adjacent() {
        assert!(f32::below_one() < 1.0);
        assert_eq!(f32::below_one().to_bits() + 1, 1.0f32.to_bits());
        assert!(f64::below_one() < 1.0);
        assert_eq!(f64::below_one().to_bits() + 1, 1.0f64.to_bits());
    }

    #[test]
    fn f32_round_trips_through_f64_exactly() {
        for v in [0.1f32, -3.25, 1e-20, 7.5e12] {
            assert_eq!(f64::from_f32_exact(v).to_f32_lossy(), v);
        }
    }
}
