//! Floating-point scalar abstraction.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! code runs at `f32` or `f64`. Conversions go through `f64`, which keeps RNG
//! streams identical across precisions: random draws are made in `f64` and
//! then narrowed.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Name used in self-describing file formats ("f32" / "f64").
    fn type_name() -> &'static str;

    /// Hex encoding of the IEEE-754 bit pattern (bit-exact round trip).
    fn to_bit_hex(self) -> String;

    /// Inverse of [`Scalar::to_bit_hex`].
    fn from_bit_hex(s: &str) -> Option<Self>;

    /// Conversion from `f64` (used for constants and RNG draws).
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 constant converts to scalar")
    }

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f64 {
    fn type_name() -> &'static str {
        "f64"
    }

    fn to_bit_hex(self) -> String {
        format!("{:016x}", self.to_bits())
    }

    fn from_bit_hex(s: &str) -> Option<Self> {
        u64::from_str_radix(s, 16).ok().map(f64::from_bits)
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn type_name() -> &'static str {
        "f32"
    }

    fn to_bit_hex(self) -> String {
        format!("{:08x}", self.to_bits())
    }

    fn from_bit_hex(s: &str) -> Option<Self> {
        u32::from_str_radix(s, 16).ok().map(f32::from_bits)
    }

    fn to_f64_lossy(self) -> f64 {
        f64::from(self)
    }
}
