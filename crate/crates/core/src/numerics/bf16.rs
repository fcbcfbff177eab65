//! Software bfloat16: 1 sign bit, 8 exponent bits, 7 fraction bits.
//!
//! bf16 keeps the full binary32 exponent range and drops 16 fraction bits,
//! so encoding is a round-to-nearest-even truncation of the f32 bit pattern
//! and decoding is an exact zero-extension.

/// A bfloat16 value stored as its 16-bit pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0);

    /// Encode an `f32`, rounding the low 16 fraction bits to nearest-even.
    /// Values beyond the largest finite bf16 round to infinity; NaN inputs
    /// become a quiet NaN with the sign preserved.
    pub fn from_f32(x: f32) -> Self {
        let bits = x.to_bits();
        if x.is_nan() {
            let sign = (bits >> 16) as u16 & 0x8000;
            return Bf16(sign | 0x7FC0);
        }
        // Round to nearest even: add 0x7FFF plus the parity of the kept LSB.
        let rounded = bits.wrapping_add(0x7FFF + ((bits >> 16) & 1));
        Bf16((rounded >> 16) as u16)
    }

    /// Encode an `f64` by first narrowing to `f32` (round-to-nearest-even),
    /// then truncating to bf16.
    pub fn from_f64(x: f64) -> Self {
        Self::from_f32(x as f32)
    }

    /// Decode to `f32` exactly (zero-fill the low 16 bits).
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    /// Decode to `f64` exactly.
    pub fn to_f64(self) -> f64 {
        self.to_f32() as f64
    }

    pub fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    pub fn to_bits(self) -> u16 {
        self.0
    }

    pub fn is_nan(self) -> bool {
        (self.0 & 0x7F80) == 0x7F80 && (self.0 & 0x007F) != 0
    }
}

/// Round a scalar to the nearest bf16-representable value, ties to even.
/// NaN propagates; values beyond the finite bf16 range become infinite.
pub fn bf16_round(x: f64) -> f64 {
    Bf16::from_f64(x).to_f64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values_survive() {
        assert_eq!(bf16_round(1.0), 1.0);
        assert_eq!(bf16_round(0.0), 0.0);
        assert_eq!(bf16_round(-2.5), -2.5);
        assert_eq!(bf16_round(0.09375), 0.09375); // 3/32, 7-bit fraction
    }

    #[test]
    fn tie_rounds_to_even() {
        // 1 + 2^-8 sits halfway between 1.0 and 1 + 2^-7; even mantissa wins.
        let x = 1.0 + f64::powi(2.0, -8);
        assert_eq!(bf16_round(x), 1.0);
        // 1 + 3*2^-8 is halfway between 1 + 2^-7 and 1 + 2^-6; rounds up to even.
        let y = 1.0 + 3.0 * f64::powi(2.0, -8);
        assert_eq!(bf16_round(y), 1.0 + f64::powi(2.0, -6));
    }

    #[test]
    fn roundtrip_all_bit_patterns() {
        // encode(decode(b)) == b for every non-NaN pattern, all 65 536 cases.
        for bits in 0..=u16::MAX {
            let v = Bf16::from_bits(bits);
            if v.is_nan() {
                assert!(Bf16::from_f32(v.to_f32()).is_nan());
                continue;
            }
            assert_eq!(Bf16::from_f32(v.to_f32()).to_bits(), bits, "pattern {bits:#06x}");
        }
    }

    #[test]
    fn rounding_is_idempotent() {
        for &x in &[3.14159, -0.007, 1e30, -1e-30, 123456.789] {
            let once = bf16_round(x);
            assert_eq!(bf16_round(once), once);
        }
    }

    #[test]
    fn relative_error_bound_in_normal_range() {
        // decode(encode(x)) within 2^-8 relative error for normal-range values.
        let mut x = 1.1e-30f64;
        while x < 1.0e30 {
            let r = bf16_round(x);
            assert!(((r - x) / x).abs() <= f64::powi(2.0, -8), "x={x}");
            x *= 3.7;
        }
    }

    #[test]
    fn nan_propagates_and_overflow_goes_infinite() {
        assert!(bf16_round(f64::NAN).is_nan());
        assert!(Bf16::from_f32(f32::NAN).is_nan());
        assert_eq!(bf16_round(f64::INFINITY), f64::INFINITY);
        assert_eq!(bf16_round(f64::NEG_INFINITY), f64::NEG_INFINITY);
        // f32::MAX rounds up past the largest finite bf16.
        assert_eq!(bf16_round(f32::MAX as f64), f64::INFINITY);
    }
}
