use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar used by the numerical cores: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Byte width of the little-endian serialized form.
    const BYTES: usize;

    /// Converts an `f64` literal. Panics only if the target type cannot hold it,
    /// which never happens for `f32`/`f64` (values saturate to infinity).
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Rounds half-up and clamps into `[0, max]`.
#[inline]
pub fn quantize(v: f64, max: u16) -> u16 {
    if v.is_nan() {
        return 0;
    }
    let r = (v + 0.5).floor();
    if r <= 0.0 {
        0
    } else if r >= max as f64 {
        max
    } else {
        r as u16
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(127.5, 255), 128);
        assert_eq!(quantize(127.4999, 255), 127);
        assert_eq!(quantize(-3.0, 255), 0);
        assert_eq!(quantize(300.0, 255), 255);
    }

    #[test]
    fn le_round_trip() {
        let mut buf = Vec::new();
        1.25f32.write_le(&mut buf);
        (-2.5f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), 1.25);
        assert_eq!(f64::read_le(&buf[4..]), -2.5);
    }
}
