//! Scalar abstraction shared by every numeric kernel.
//!
//! The runtime is written once over [`Scalar`] and instantiated for `f32`
//! (the production path, matching the container dtype) and `f64` (used by
//! reference checks that want extra headroom).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of tensors, models and caches.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Short dtype tag written into manifests and metadata.
    const DTYPE: &'static str;

    /// Converts from `f64`, rounding to nearest.
    #[inline]
    fn of(v: f64) -> Self {
        // from_f64 only fails for non-float targets
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    /// Widens to `f64` (exact for both supported types).
    #[inline]
    fn wide(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Canonical bit pattern used for fingerprinting.
    fn canonical_bits(self) -> u64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn canonical_bits(self) -> u64 {
        u64::from(self.to_bits())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn canonical_bits(self) -> u64 {
        self.to_bits()
    }
}
