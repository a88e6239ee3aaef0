//! Group-wise asymmetric integer quantization with clipping.
//!
//! A group of values `x` with clipped range `[lo, hi] = [a*min(x), a*max(x)]` is
//! mapped to codes `q = clamp(round((x - z) / h), 0, 2^N - 1)` and reconstructed
//! as `q*h + z`. The scale `h` and zero `z` are stored in a reduced-precision
//! [`ParamFormat`]; quantization always uses the decoded stored values, and the
//! stored pair is rounded outward so that the grid still covers `[lo, hi]`.

use std::fmt;
use std::str::FromStr;

use half::f16;

use crate::error::{invalid, shape, Result, SkvqError};
use crate::fp8::{fp8_decode, fp8_encode};
use crate::pack::{pack_codes, unpack_codes};

/// Code width of a quantized cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Bits {
    One,
    Two,
    Three,
    Four,
    Eight,
    /// Three levels `{0, 1, 2}`, packed five per byte (1.6 bits/element).
    Ternary,
    /// Full precision passthrough; nothing is quantized.
    Full,
}

impl Bits {
    pub const ALL: [Bits; 7] = [
        Bits::One,
        Bits::Two,
        Bits::Three,
        Bits::Four,
        Bits::Eight,
        Bits::Ternary,
        Bits::Full,
    ];

    /// Bit width of the packed code stream (ternary reports 2, see [`Bits::storage_bits`]).
    pub fn width(self) -> u32 {
        match self {
            Bits::One => 1,
            Bits::Two | Bits::Ternary => 2,
            Bits::Three => 3,
            Bits::Four => 4,
            Bits::Eight => 8,
            Bits::Full => 16,
        }
    }

    /// Largest code value. Meaningless for [`Bits::Full`], which returns 0.
    pub fn max_code(self) -> u8 {
        match self {
            Bits::One => 1,
            Bits::Two => 3,
            Bits::Three => 7,
            Bits::Four => 15,
            Bits::Eight => 255,
            Bits::Ternary => 2,
            Bits::Full => 0,
        }
    }

    /// Storage cost per element of the code stream alone.
    pub fn storage_bits(self) -> f64 {
        match self {
            Bits::Ternary => 1.6,
            other => f64::from(other.width()),
        }
    }

    pub fn is_lossless(self) -> bool {
        self == Bits::Full
    }

    /// Stable numeric key used in configs, reports and files.
    pub fn code(self) -> u8 {
        match self {
            Bits::One => 1,
            Bits::Two => 2,
            Bits::Three => 3,
            Bits::Four => 4,
            Bits::Eight => 8,
            Bits::Ternary => 15,
            Bits::Full => 16,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Bits::ALL
            .into_iter()
            .find(|b| b.code() == code)
            .ok_or_else(|| invalid(format!("unknown bit width code {code}")))
    }
}

impl fmt::Display for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bits::Ternary => f.write_str("1.5"),
            other => write!(f, "{}", other.width()),
        }
    }
}

impl FromStr for Bits {
    type Err = SkvqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" => Ok(Bits::One),
            "2" => Ok(Bits::Two),
            "3" => Ok(Bits::Three),
            "4" => Ok(Bits::Four),
            "8" => Ok(Bits::Eight),
            "1.5" | "ternary" => Ok(Bits::Ternary),
            "16" | "fp16" | "full" => Ok(Bits::Full),
            other => Err(SkvqError::Config(format!("unsupported bit width {other:?}"))),
        }
    }
}

/// Storage format of per-group scale and zero-point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamFormat {
    Fp16,
    Fp8E4M3,
}

impl ParamFormat {
    pub fn bits(self) -> u32 {
        match self {
            ParamFormat::Fp16 => 16,
            ParamFormat::Fp8E4M3 => 8,
        }
    }

    pub fn byte_len(self) -> usize {
        self.bits() as usize / 8
    }

    fn sign_bit(self) -> u16 {
        match self {
            ParamFormat::Fp16 => 0x8000,
            ParamFormat::Fp8E4M3 => 0x80,
        }
    }

    fn max_magnitude_code(self) -> u16 {
        match self {
            ParamFormat::Fp16 => 0x7BFF,
            ParamFormat::Fp8E4M3 => 0x7E,
        }
    }

    /// Round-to-nearest encoding, saturating to the largest finite value.
    pub fn encode(self, x: f32) -> u16 {
        match self {
            ParamFormat::Fp16 => {
                let h = f16::from_f32(x);
                if h.is_infinite() {
                    (h.to_bits() & 0x8000) | 0x7BFF
                } else {
                    h.to_bits()
                }
            }
            ParamFormat::Fp8E4M3 => u16::from(fp8_encode(x)),
        }
    }

    pub fn decode(self, code: u16) -> f32 {
        match self {
            ParamFormat::Fp16 => f16::from_bits(code).to_f32(),
            ParamFormat::Fp8E4M3 => fp8_decode(code as u8),
        }
    }

    pub fn round_nearest(self, x: f32) -> f32 {
        self.decode(self.encode(x))
    }

    /// Neighbouring code in value order (sign-magnitude stepping, saturating).
    fn step(self, code: u16, up: bool) -> u16 {
        let sign = self.sign_bit();
        let max = self.max_magnitude_code();
        let mag = code & !sign;
        let negative = code & sign != 0 && mag != 0;
        match (negative, up) {
            (false, true) => (mag + 1).min(max),
            (false, false) if mag == 0 => sign | 1,
            (false, false) => mag - 1,
            (true, true) if mag == 1 => 0,
            (true, true) => sign | (mag - 1),
            (true, false) => sign | (mag + 1).min(max),
        }
    }

    /// Largest representable value `<= x` (saturating at the format minimum).
    pub fn round_down(self, x: f32) -> f32 {
        let mut code = self.encode(x);
        if self.decode(code) > x {
            code = self.step(code, false);
        }
        self.decode(code)
    }

    /// Smallest representable value `>= x` (saturating at the format maximum).
    pub fn round_up(self, x: f32) -> f32 {
        let mut code = self.encode(x);
        if self.decode(code) < x {
            code = self.step(code, true);
        }
        self.decode(code)
    }

    fn next_up(self, x: f32) -> f32 {
        self.decode(self.step(self.encode(x), true))
    }

    pub fn code(self) -> u8 {
        match self {
            ParamFormat::Fp16 => 0,
            ParamFormat::Fp8E4M3 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ParamFormat::Fp16),
            1 => Ok(ParamFormat::Fp8E4M3),
            other => Err(invalid(format!("unknown parameter format code {other}"))),
        }
    }
}

impl fmt::Display for ParamFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamFormat::Fp16 => "fp16",
            ParamFormat::Fp8E4M3 => "fp8",
        })
    }
}

impl FromStr for ParamFormat {
    type Err = SkvqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fp16" | "f16" => Ok(ParamFormat::Fp16),
            "fp8" | "e4m3" | "fp8-e4m3" => Ok(ParamFormat::Fp8E4M3),
            other => Err(SkvqError::Config(format!("unsupported param format {other:?}"))),
        }
    }
}

/// Quantization settings for one cache (K or V).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantSpec {
    pub bits: Bits,
    /// Target number of channels per group.
    pub group_size: usize,
    pub param_format: ParamFormat,
}

impl QuantSpec {
    pub fn new(bits: Bits, group_size: usize, param_format: ParamFormat) -> Result<Self> {
        if group_size == 0 {
            return Err(invalid("group size must be at least 1"));
        }
        Ok(Self {
            bits,
            group_size,
            param_format,
        })
    }

    pub fn lossless() -> Self {
        Self {
            bits: Bits::Full,
            group_size: 1,
            param_format: ParamFormat::Fp16,
        }
    }

    pub fn average_bits(&self) -> f64 {
        average_bits(self)
    }
}

/// Key and value cache specs; the two may use different widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KvSpec {
    pub key: QuantSpec,
    pub value: QuantSpec,
}

impl KvSpec {
    pub fn uniform(spec: QuantSpec) -> Self {
        Self { key: spec, value: spec }
    }

    pub fn lossless() -> Self {
        Self::uniform(QuantSpec::lossless())
    }

    pub fn get(&self, kind: CacheKind) -> &QuantSpec {
        match kind {
            CacheKind::Key => &self.key,
            CacheKind::Value => &self.value,
        }
    }
}

/// Which of the two caches a plan, schedule or codec applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CacheKind {
    Key,
    Value,
}

impl CacheKind {
    pub const BOTH: [CacheKind; 2] = [CacheKind::Key, CacheKind::Value];
}

impl fmt::Display for CacheKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CacheKind::Key => "key",
            CacheKind::Value => "value",
        })
    }
}

/// Effective storage bits per element for asymmetric quantization, including
/// one scale and one zero-point per group.
pub fn average_bits(spec: &QuantSpec) -> f64 {
    if spec.bits.is_lossless() {
        return 16.0;
    }
    spec.bits.storage_bits() + 2.0 * f64::from(spec.param_format.bits()) / spec.group_size as f64
}

/// Scale and zero-point of one group, as decoded from their stored encoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupParams {
    pub scale: f32,
    pub zero: f32,
}

impl GroupParams {
    /// Representable `(h, z)` for the range `[lo, hi]`.
    ///
    /// Candidates are the representable neighbours of `z = lo` and of the
    /// matching `h`. Among those that keep every point of the range within
    /// `h/2` of the grid `z + [0, steps]*h`, the one whose end points lie
    /// closest to `lo` and `hi` wins.
    pub fn fit(lo: f32, hi: f32, steps: u8, format: ParamFormat) -> Self {
        let top = f32::from(steps);
        // Degenerate groups (hi == lo) still need a strictly positive step.
        let floor = lo.abs().max(1.0) * f32::powi(2.0, -24);
        let reaches = |p: &GroupParams| lo - p.zero >= -p.scale / 2.0 && p.zero + (top + 0.5) * p.scale >= hi;
        let deviation = |p: &GroupParams| (p.zero - lo).abs().max((p.zero + top * p.scale - hi).abs());

        let mut best: Option<(f32, GroupParams)> = None;
        for zero in [format.round_nearest(lo), format.round_down(lo), format.round_up(lo)] {
            let needed = ((hi - zero) / top).max(floor);
            let up = format.round_up(needed);
            for scale in [
                format.round_nearest(needed),
                format.round_down(needed),
                up,
                format.next_up(up),
            ] {
                let p = GroupParams { scale, zero };
                if scale <= 0.0 || !reaches(&p) {
                    continue;
                }
                let d = deviation(&p);
                if best.is_none_or(|(b, _)| d < b) {
                    best = Some((d, p));
                }
            }
        }
        if let Some((_, p)) = best {
            return p;
        }

        let zero = format.round_down(lo);
        let mut scale = format.round_up(((hi - zero) / top).max(floor));
        while zero + top * scale < hi {
            let next = format.next_up(scale);
            if next == scale {
                break;
            }
            scale = next;
        }
        Self { scale, zero }
    }

    pub fn encode(&self, format: ParamFormat) -> (u16, u16) {
        (format.encode(self.scale), format.encode(self.zero))
    }

    pub fn decode(scale: u16, zero: u16, format: ParamFormat) -> Self {
        Self {
            scale: format.decode(scale),
            zero: format.decode(zero),
        }
    }
}

fn validate_group(values: &[f32], alpha: f32) -> Result<()> {
    if values.is_empty() {
        return Err(invalid("cannot quantize an empty group"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(format!("clipping scale {alpha} outside (0, 1]")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(SkvqError::NonFinite(i));
    }
    Ok(())
}

fn min_max(values: &[f32]) -> (f32, f32) {
    values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

/// Codes for `values` on the grid described by `params`.
pub fn encode_with(values: &[f32], params: &GroupParams, max_code: u8) -> Vec<u8> {
    let top = f32::from(max_code);
    values
        .iter()
        .map(|&x| ((x - params.zero) / params.scale).round().clamp(0.0, top) as u8)
        .collect()
}

/// Clipped dynamic quantization of one group.
pub fn quantize_group(values: &[f32], alpha: f32, spec: &QuantSpec) -> Result<(Vec<u8>, GroupParams)> {
    validate_group(values, alpha)?;
    if spec.bits.is_lossless() {
        return Err(invalid("16-bit passthrough does not quantize groups"));
    }
    let (min, max) = min_max(values);
    let params = GroupParams::fit(alpha * min, alpha * max, spec.bits.max_code(), spec.param_format);
    Ok((encode_with(values, &params, spec.bits.max_code()), params))
}

pub fn dequantize_group(codes: &[u8], params: &GroupParams, bits: Bits) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(codes.len());
    dequantize_into(codes, params, bits, &mut out)?;
    Ok(out)
}

fn dequantize_into(codes: &[u8], params: &GroupParams, bits: Bits, out: &mut Vec<f32>) -> Result<()> {
    let max = bits.max_code();
    for &c in codes {
        if c > max || bits.is_lossless() {
            return Err(SkvqError::CodeOutOfRange {
                code: c.into(),
                bits: bits.to_string(),
            });
        }
        out.push(f32::from(c) * params.scale + params.zero);
    }
    Ok(())
}

/// Symmetric per-group quantization with signed codes `[-m, m]`, `m = 2^(N-1) - 1`,
/// stored offset by `m`. Ternary uses `m = 1`. One-bit codes are not supported.
pub fn quantize_group_symmetric(values: &[f32], spec: &QuantSpec) -> Result<(Vec<u8>, GroupParams)> {
    validate_group(values, 1.0)?;
    let half = symmetric_half_range(spec.bits)?;
    let absmax = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let needed = (absmax / f32::from(half)).max(f32::powi(2.0, -24));
    let scale = spec.param_format.round_up(needed);
    let params = GroupParams { scale, zero: 0.0 };
    let top = f32::from(half);
    let codes = values
        .iter()
        .map(|&x| ((x / scale).round().clamp(-top, top) + top) as u8)
        .collect();
    Ok((codes, params))
}

pub fn dequantize_group_symmetric(codes: &[u8], params: &GroupParams, bits: Bits) -> Result<Vec<f32>> {
    let half = symmetric_half_range(bits)?;
    codes
        .iter()
        .map(|&c| {
            if c > 2 * half {
                return Err(SkvqError::CodeOutOfRange {
                    code: c.into(),
                    bits: bits.to_string(),
                });
            }
            Ok((f32::from(c) - f32::from(half)) * params.scale)
        })
        .collect()
}

pub(crate) fn symmetric_half_range(bits: Bits) -> Result<u8> {
    match bits {
        Bits::One | Bits::Full => Err(invalid(format!("symmetric quantization unsupported at {bits} bits"))),
        Bits::Ternary => Ok(1),
        other => Ok(other.max_code() / 2),
    }
}

/// One token row of one cache, quantized group by group in channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBlock {
    /// Packed codes for the whole row.
    pub codes: Vec<u8>,
    pub params: Vec<GroupParams>,
    /// Number of elements in the row.
    pub len: usize,
}

impl QuantizedBlock {
    /// Exact storage footprint: packed codes plus encoded parameters.
    pub fn byte_len(&self, format: ParamFormat, stores_zero: bool) -> usize {
        let per_group = if stores_zero { 2 } else { 1 };
        self.codes.len() + self.params.len() * per_group * format.byte_len()
    }
}

fn check_boundaries(len: usize, boundaries: &[usize]) -> Result<()> {
    let ok = boundaries.len() >= 2
        && boundaries[0] == 0
        && *boundaries.last().unwrap() == len
        && boundaries.windows(2).all(|w| w[0] < w[1]);
    if !ok {
        return Err(shape(format!(
            "group boundaries {boundaries:?} do not partition a row of {len} channels"
        )));
    }
    Ok(())
}

/// Quantize a row whose channels are already in group order.
pub fn quantize_row(row: &[f32], boundaries: &[usize], alphas: &[f32], spec: &QuantSpec) -> Result<QuantizedBlock> {
    check_boundaries(row.len(), boundaries)?;
    if alphas.len() + 1 != boundaries.len() {
        return Err(shape(format!(
            "{} clipping scales for {} groups",
            alphas.len(),
            boundaries.len() - 1
        )));
    }
    let mut codes = Vec::with_capacity(row.len());
    let mut params = Vec::with_capacity(alphas.len());
    for (w, &alpha) in boundaries.windows(2).zip(alphas) {
        let (c, p) = quantize_group(&row[w[0]..w[1]], alpha, spec)?;
        codes.extend_from_slice(&c);
        params.push(p);
    }
    Ok(QuantizedBlock {
        codes: pack_codes(&codes, spec.bits)?,
        params,
        len: row.len(),
    })
}

pub fn dequantize_row(block: &QuantizedBlock, boundaries: &[usize], bits: Bits) -> Result<Vec<f32>> {
    check_boundaries(block.len, boundaries)?;
    if block.params.len() + 1 != boundaries.len() {
        return Err(shape("parameter count does not match group count"));
    }
    let codes = unpack_codes(&block.codes, block.len, bits)?;
    let mut out = Vec::with_capacity(block.len);
    for (w, params) in boundaries.windows(2).zip(&block.params) {
        dequantize_into(&codes[w[0]..w[1]], params, bits, &mut out)?;
    }
    Ok(out)
}
