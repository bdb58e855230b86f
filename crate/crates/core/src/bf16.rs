//! Software bfloat16.
//!
//! Layout: sign bit 15, exponent bits 14..=7, mantissa bits 6..=0. A value is
//! the upper half of the corresponding `f32`, so widening is a shift and
//! narrowing is a round-to-nearest-even truncation of the low 16 bits.

use core::fmt;

/// A bfloat16 value kept as its raw bit pattern.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0x0000);
    pub const ONE: Bf16 = Bf16(0x3F80);
    pub const INFINITY: Bf16 = Bf16(0x7F80);
    pub const NEG_INFINITY: Bf16 = Bf16(0xFF80);
    pub const NAN: Bf16 = Bf16(0x7FC0);
    /// Largest finite value, about `3.39e38`.
    pub const MAX: Bf16 = Bf16(0x7F7F);

    /// Bit index of the exponent's most significant bit.
    pub const EXPONENT_MSB: u32 = 14;
    pub const SIGN_BIT: u32 = 15;

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    #[inline]
    pub fn from_f32(x: f32) -> Self {
        bf16_encode(x)
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        bf16_decode(self)
    }

    /// XOR `mask` into the bit pattern. The receiver is `Copy`, so the source
    /// value is never touched.
    #[inline]
    pub const fn flip_bits(self, mask: u16) -> Self {
        Bf16(self.0 ^ mask)
    }

    #[inline]
    pub const fn is_nan(self) -> bool {
        (self.0 & 0x7F80) == 0x7F80 && (self.0 & 0x007F) != 0
    }

    #[inline]
    pub const fn is_infinite(self) -> bool {
        (self.0 & 0x7FFF) == 0x7F80
    }

    #[inline]
    pub const fn is_finite(self) -> bool {
        (self.0 & 0x7F80) != 0x7F80
    }

    /// Biased 8-bit exponent field.
    #[inline]
    pub const fn exponent(self) -> u8 {
        ((self.0 >> 7) & 0xFF) as u8
    }
}

impl fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bf16({:#06x} = {:e})", self.0, self.to_f32())
    }
}

impl fmt::Display for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f32(), f)
    }
}

impl From<f32> for Bf16 {
    fn from(x: f32) -> Self {
        bf16_encode(x)
    }
}

impl From<Bf16> for f32 {
    fn from(v: Bf16) -> Self {
        bf16_decode(v)
    }
}

/// Narrow an `f32` with round-to-nearest-even on the dropped 16 bits.
///
/// NaNs keep their sign and upper payload and get the quiet bit forced so a
/// payload living only in the dropped bits cannot turn into an infinity.
#[inline]
pub fn bf16_encode(x: f32) -> Bf16 {
    let bits = x.to_bits();
    if x.is_nan() {
        return Bf16(((bits >> 16) as u16) | 0x0040);
    }
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb);
    Bf16((rounded >> 16) as u16)
}

/// Exact widening: the pattern becomes the high half of an `f32`.
#[inline]
pub fn bf16_decode(v: Bf16) -> f32 {
    f32::from_bits((v.0 as u32) << 16)
}

#[inline]
pub fn flip_bits(v: Bf16, mask: u16) -> Bf16 {
    v.flip_bits(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Rounding oracle that never looks at bit tricks: pick the closer of the
    /// two bf16 neighbours in f64, ties to the even mantissa.
    fn oracle_encode(x: f32) -> u16 {
        if x.is_nan() {
            return 0x7FC0;
        }
        if x.is_infinite() {
            return if x > 0.0 { 0x7F80 } else { 0xFF80 };
        }
        let truncated = (x.to_bits() >> 16) as u16;
        let down = f32::from_bits((truncated as u32) << 16) as f64;
        let up_bits = truncated.wrapping_add(1);
        let up = f32::from_bits((up_bits as u32) << 16) as f64;
        let xd = x as f64;
        let dd = (xd - down).abs();
        let du = (up - xd).abs();
        if dd < du {
            truncated
        } else if du < dd {
            up_bits
        } else if truncated & 1 == 0 {
            truncated
        } else {
            up_bits
        }
    }

    #[test]
    fn encode_examples() {
        assert_eq!(bf16_encode(1.0).to_bits(), 0x3F80);
        assert_eq!(bf16_encode(f32::INFINITY).to_bits(), 0x7F80);
        assert_eq!(bf16_encode(f32::NEG_INFINITY).to_bits(), 0xFF80);
        let tie = f32::from_bits(0x3F80_8000);
        assert_eq!(tie, 1.00390625);
        assert_eq!(oracle_encode(tie), 0x3F80);
        assert_eq!(bf16_encode(tie).to_bits(), 0x3F80);
        // odd truncation rounds up on a tie
        assert_eq!(bf16_encode(f32::from_bits(0x3F81_8000)).to_bits(), 0x3F82);
    }

    #[test]
    fn encode_overflow_and_nan() {
        assert_eq!(bf16_encode(f32::MAX).to_bits(), 0x7F80);
        assert!(bf16_encode(f32::NAN).is_nan());
        // payload only in the low half must still decode as NaN
        let low_payload = f32::from_bits(0x7F80_0001);
        assert!(low_payload.is_nan());
        assert!(bf16_encode(low_payload).is_nan());
        assert_eq!(bf16_encode(-0.0).to_bits(), 0x8000);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(Bf16::from_bits(0x3F80).to_f32(), 1.0);
        assert_eq!(Bf16::from_bits(0xBF80).to_f32(), -1.0);
        assert_eq!(Bf16::from_bits(0x7F80).to_f32(), f32::INFINITY);
    }

    #[test]
    fn flip_examples() {
        let one = Bf16::ONE;
        assert_eq!(one.flip_bits(1 << 14), Bf16::INFINITY);
        let shrunk = one.flip_bits(1 << 10);
        assert_eq!(shrunk.exponent(), 127 ^ 8);
        assert_eq!(shrunk.to_f32(), 0.00390625);
        assert_eq!(one.flip_bits(0), one);
        assert_eq!(one.flip_bits(1 << 15).to_f32(), -1.0);
    }

    #[test]
    fn nan_patterns_survive_flips() {
        let nan = Bf16::from_bits(0x7FA5);
        assert!(nan.is_nan());
        assert!(nan.flip_bits(1 << 15).is_nan());
        assert!(nan.flip_bits(0x0001).is_nan());
    }

    proptest! {
        #[test]
        fn encode_matches_oracle(bits in any::<u32>()) {
            let x = f32::from_bits(bits);
            let got = bf16_encode(x);
            if x.is_nan() {
                prop_assert!(got.is_nan());
            } else {
                prop_assert_eq!(got.to_bits(), oracle_encode(x));
            }
        }

        #[test]
        fn round_trip_keeps_upper_bits(bits in any::<u32>()) {
            let x = f32::from_bits(bits);
            prop_assume!(x.is_finite());
            let back = bf16_encode(x).to_f32();
            prop_assume!(back.is_finite());
            // at most half a bf16 ulp away
            let ulp = f32::from_bits((bits & 0x7F80_0000).max(0x0080_0000)) * (1.0 / 128.0);
            prop_assert!(((back as f64) - (x as f64)).abs() <= (ulp as f64) * 0.5 + f64::EPSILON);
        }

        #[test]
        fn decode_encode_identity(bits in any::<u16>()) {
            let v = Bf16::from_bits(bits);
            prop_assume!(!v.is_nan());
            prop_assert_eq!(bf16_encode(v.to_f32()), v);
        }

        #[test]
        fn flip_is_involution(bits in any::<u16>(), mask in any::<u16>()) {
            let v = Bf16::from_bits(bits);
            prop_assert_eq!(v.flip_bits(mask).flip_bits(mask), v);
        }
    }
}
