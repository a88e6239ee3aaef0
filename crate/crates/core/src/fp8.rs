//! Software codec for the 8-bit E4M3 floating point format.
//!
//! Layout: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits. There are no
//! infinities; the only NaN encodings are `0x7F` and `0xFF`. The largest finite
//! magnitude is 448 (`0x7E`). Encoding rounds to nearest, ties to even, and
//! saturates out-of-range magnitudes (including infinities) to ±448.

/// Largest finite E4M3 magnitude.
pub const FP8_MAX: f32 = 448.0;
/// Canonical NaN encoding.
pub const FP8_NAN: u8 = 0x7F;
/// Encoding of +448.
pub const FP8_MAX_CODE: u8 = 0x7E;

const MIN_NORMAL: f64 = 1.0 / 64.0; // 2^-6
const SUBNORMAL_STEP_INV: f64 = 512.0; // 1 / 2^-9

/// An E4M3 value stored as its raw bit pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
#[repr(transparent)]
pub struct Fp8E4M3(u8);

impl Fp8E4M3 {
    pub const fn from_bits(bits: u8) -> Self {
        Self(bits)
    }

    pub const fn to_bits(self) -> u8 {
        self.0
    }

    pub fn from_f32(x: f32) -> Self {
        Self(fp8_encode(x))
    }

    pub fn to_f32(self) -> f32 {
        fp8_decode(self.0)
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7F == 0x7F
    }
}

/// Encode an `f32` as E4M3 (round-to-nearest-even, saturating).
pub fn fp8_encode(x: f32) -> u8 {
    if x.is_nan() {
        return FP8_NAN;
    }
    let sign = if x.is_sign_negative() { 0x80u8 } else { 0 };
    let a = f64::from(x.abs());
    if a >= f64::from(FP8_MAX) {
        return sign | FP8_MAX_CODE;
    }
    let mag = if a < MIN_NORMAL {
        // Subnormal grid m * 2^-9; m == 8 lands exactly on the smallest normal code.
        (a * SUBNORMAL_STEP_INV).round_ties_even() as u8
    } else {
        let exp = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
        let frac = a / f64::powi(2.0, exp) - 1.0;
        let m = (frac * 8.0).round_ties_even() as u8;
        // A mantissa carry (m == 8) rolls into the exponent field.
        let code = (((exp + 7) as u8) << 3) + m;
        code.min(FP8_MAX_CODE)
    };
    sign | mag
}

/// Decode an E4M3 bit pattern to `f32`. Every finite code decodes exactly.
pub fn fp8_decode(b: u8) -> f32 {
    let negative = b & 0x80 != 0;
    let exp = i32::from((b >> 3) & 0x0F);
    let mant = f32::from(b & 0x07);
    if exp == 0x0F && b & 0x07 == 0x07 {
        return f32::NAN;
    }
    let mag = if exp == 0 {
        mant * f32::powi(2.0, -9)
    } else {
        (1.0 + mant / 8.0) * f32::powi(2.0, exp - 7)
    };
    if negative {
        -mag
    } else {
        mag
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_codes() {
        assert_eq!(fp8_encode(1.0), 0x38);
        assert_eq!(fp8_decode(0x38), 1.0);
        assert_eq!(fp8_encode(448.0), 0x7E);
        assert_eq!(fp8_decode(0x7E), 448.0);
        assert_eq!(fp8_encode(1000.0), 0x7E);
        assert_eq!(fp8_encode(-1000.0), 0xFE);
        assert_eq!(fp8_encode(f32::INFINITY), 0x7E);
        assert_eq!(fp8_encode(0.0), 0x00);
        assert_eq!(fp8_decode(0x00), 0.0);
        assert_eq!(fp8_decode(0x01), 2f32.powi(-9));
        assert_eq!(fp8_decode(0x08), 2f32.powi(-6));
        assert!(fp8_decode(0x7F).is_nan());
        assert!(fp8_decode(0xFF).is_nan());
        assert_eq!(fp8_encode(f32::NAN), FP8_NAN);
    }

    #[test]
    fn ties_round_to_even() {
        // 1.0625 sits halfway between 1.0 (m=0) and 1.125 (m=1).
        assert_eq!(fp8_encode(1.0625), 0x38);
        // 1.1875 sits halfway between 1.125 (m=1) and 1.25 (m=2).
        assert_eq!(fp8_encode(1.1875), 0x3A);
        // Halfway between the two smallest subnormals.
        assert_eq!(fp8_encode(1.5 * 2f32.powi(-9)), 0x02);
        assert_eq!(fp8_encode(0.5 * 2f32.powi(-9)), 0x00);
        // Mantissa carry: 1.9375 is halfway between 1.875 and 2.0, rounds to 2.0.
        assert_eq!(fp8_decode(fp8_encode(1.9375)), 2.0);
    }

    #[test]
    fn exhaustive_round_trip() {
        for b in 0..=255u8 {
            let v = fp8_decode(b);
            if v.is_nan() {
                continue;
            }
            let back = fp8_encode(v);
            if b == 0x80 {
                assert_eq!(back, 0x80);
            }
            assert_eq!(fp8_decode(back), v, "code {b:#04x}");
        }
    }
}
