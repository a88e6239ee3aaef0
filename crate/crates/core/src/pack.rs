//! Dense packing of integer quantization codes.
//!
//! Power-of-two and 3-bit widths use an LSB-first bitstream: code `i` occupies
//! stream bits `[i*b, (i+1)*b)`, and stream bit `j` is bit `j % 8` of byte `j / 8`.
//! Ternary codes pack five per byte in base 3 (`byte = sum(c_i * 3^i)`).

use crate::error::{Result, SkvqError};
use crate::quant::Bits;

const TERNARY_PER_BYTE: usize = 5;
const POW3: [u16; 5] = [1, 3, 9, 27, 81];

/// Number of bytes needed to hold `count` codes of the given width.
pub fn packed_len(count: usize, bits: Bits) -> usize {
    match bits {
        Bits::Ternary => count.div_ceil(TERNARY_PER_BYTE),
        Bits::Full => count * 2,
        other => (count * other.width() as usize).div_ceil(8),
    }
}

fn check_code(code: u8, bits: Bits) -> Result<()> {
    if code > bits.max_code() {
        return Err(SkvqError::CodeOutOfRange {
            code: code.into(),
            bits: bits.to_string(),
        });
    }
    Ok(())
}

fn require_integer(bits: Bits) -> Result<()> {
    if bits == Bits::Full {
        return Err(crate::error::invalid("16-bit passthrough has no integer codes"));
    }
    Ok(())
}

pub fn pack_codes(codes: &[u8], bits: Bits) -> Result<Vec<u8>> {
    require_integer(bits)?;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    match bits {
        Bits::Ternary => {
            for (chunk, byte) in codes.chunks(TERNARY_PER_BYTE).zip(out.iter_mut()) {
                let mut acc = 0u16;
                for (&c, &p) in chunk.iter().zip(POW3.iter()) {
                    check_code(c, bits)?;
                    acc += u16::from(c) * p;
                }
                *byte = acc as u8;
            }
        }
        Bits::Eight => out.copy_from_slice(codes),
        _ => {
            let width = bits.width() as usize;
            for (i, &c) in codes.iter().enumerate() {
                check_code(c, bits)?;
                let bit = i * width;
                let (byte, shift) = (bit / 8, bit % 8);
                let wide = u16::from(c) << shift;
                out[byte] |= wide as u8;
                if shift + width > 8 {
                    out[byte + 1] |= (wide >> 8) as u8;
                }
            }
        }
    }
    Ok(out)
}

pub fn unpack_codes(bytes: &[u8], count: usize, bits: Bits) -> Result<Vec<u8>> {
    require_integer(bits)?;
    let expected = packed_len(count, bits);
    if bytes.len() != expected {
        return Err(crate::error::shape(format!(
            "{count} codes of {bits} need {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    match bits {
        Bits::Ternary => {
            for &byte in bytes {
                if byte > 242 {
                    return Err(SkvqError::CodeOutOfRange {
                        code: byte.into(),
                        bits: "ternary byte".into(),
                    });
                }
                let mut v = byte;
                for _ in 0..TERNARY_PER_BYTE {
                    if out.len() == count {
                        break;
                    }
                    out.push(v % 3);
                    v /= 3;
                }
            }
        }
        Bits::Eight => out.extend_from_slice(bytes),
        _ => {
            let width = bits.width() as usize;
            let mask = bits.max_code() as u16;
            for i in 0..count {
                let bit = i * width;
                let (byte, shift) = (bit / 8, bit % 8);
                let mut wide = u16::from(bytes[byte]);
                if shift + width > 8 {
                    wide |= u16::from(bytes[byte + 1]) << 8;
                }
                out.push(((wide >> shift) & mask) as u8);
            }
        }
    }
    Ok(out)
}
