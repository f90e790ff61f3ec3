//! Scalar abstraction shared by every solver in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real floating-point type the solvers are generic over (`f32` or `f64`).
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Serialize + DeserializeOwned + Send + Sync
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    /// Lossy conversion to `f64` for reporting.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Rescales a tolerance written for `f64` to the precision of `Self`.
    ///
    /// The scale factor is `sqrt(eps_self / eps_f64)`, so `f64` keeps the value
    /// verbatim and `f32` loosens it by roughly four orders of magnitude.
    fn tol(base: f64) -> Self {
        let eps_self = Self::default_epsilon().to_f64_lossy();
        let ratio = (eps_self / f64::EPSILON).max(1.0).sqrt();
        Self::lit((base * ratio).min(0.1))
    }

    /// Upper bound on the KKT condition estimate before a system counts as singular.
    fn cond_limit() -> Self {
        let eps_self = Self::default_epsilon().to_f64_lossy();
        // 1e12 for f64; about 1e5 for f32
        Self::lit(1e12 * (f64::EPSILON / eps_self).clamp(1e-7, 1.0))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerances_keep_f64_values() {
        assert_eq!(<f64 as Scalar>::tol(1e-8), 1e-8);
        assert_eq!(<f64 as Scalar>::cond_limit(), 1e12);
    }

    #[test]
    fn tolerances_loosen_for_f32() {
        let t = <f32 as Scalar>::tol(1e-8);
        assert!(t > 1e-6 && t < 1e-3);
        let c = <f32 as Scalar>::cond_limit();
        assert!(c >= 1e4 && c < 1e8);
    }
}
