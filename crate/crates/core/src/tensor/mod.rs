//! Dense tensor substrate: host-side arrays, precision control, and the
//! reverse-mode tape in [`tape`].

mod array;
pub mod tape;

pub use array::Array;
pub use tape::{Tape, Tensor};

/// Numeric working precision.
///
/// `F32` is the production mode: every stored value is rounded to the nearest
/// `f32` after each operation, while accumulation still runs in 64-bit.
/// `F64Verify` keeps full 64-bit values end to end so gradients can be checked
/// against central finite differences at tight tolerances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64Verify,
}

impl Precision {
    /// Round a value to storage precision.
    #[inline]
    pub fn store(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64Verify => x,
        }
    }

    /// Round a buffer in place to storage precision.
    pub fn store_slice(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            for x in xs.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// Resolve from the `FEDPFT_PRECISION` environment variable
    /// (`f32` | `f64-verify`, default `f32`).
    pub fn from_env() -> crate::error::Result<Self> {
        match std::env::var("FEDPFT_PRECISION") {
            Ok(v) if v == "f32" => Ok(Precision::F32),
            Ok(v) if v == "f64-verify" => Ok(Precision::F64Verify),
            Ok(v) => Err(crate::error::Error::config(
                "FEDPFT_PRECISION",
                format!("unknown precision `{v}` (expected `f32` or `f64-verify`)"),
            )),
            Err(_) => Ok(Precision::F32),
        }
    }
}
