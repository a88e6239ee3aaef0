//! Row codecs: how a single K or V row leaving the window is stored.

use crate::error::{shape, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::pack::{pack_codes, packed_len, unpack_codes};
use crate::quant::{
    average_bits, dequantize_group_symmetric, dequantize_row, quantize_group_symmetric, quantize_row, Bits,
    GroupParams, ParamFormat, QuantSpec, QuantizedBlock,
};

/// Stored form of a token row outside the full-precision window.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredRow {
    Full(Vec<f32>),
    Quantized(QuantizedBlock),
}

#[derive(Clone, Debug, PartialEq)]
pub enum RowCodec {
    /// No quantization; rows are kept as-is.
    Lossless,
    /// Clipped asymmetric group quantization (one scale per group from the schedule).
    Clipped {
        spec: QuantSpec,
        boundaries: Vec<usize>,
        alphas: Vec<f32>,
    },
    /// Symmetric round-to-nearest with a scale-only group parameter.
    Symmetric { spec: QuantSpec, boundaries: Vec<usize> },
    /// Per-channel smoothing followed by asymmetric round-to-nearest.
    Smoothed {
        spec: QuantSpec,
        boundaries: Vec<usize>,
        factors: Vec<f32>,
    },
}

impl RowCodec {
    /// Plain asymmetric round-to-nearest (no clipping) over the given groups.
    pub fn rtn(spec: QuantSpec, boundaries: Vec<usize>) -> Self {
        if spec.bits.is_lossless() {
            return RowCodec::Lossless;
        }
        let alphas = vec![1.0; boundaries.len().saturating_sub(1)];
        RowCodec::Clipped {
            spec,
            boundaries,
            alphas,
        }
    }

    pub fn clipped(spec: QuantSpec, boundaries: Vec<usize>, alphas: Vec<f32>) -> Result<Self> {
        if spec.bits.is_lossless() {
            return Ok(RowCodec::Lossless);
        }
        if alphas.len() + 1 != boundaries.len() {
            return Err(shape("clipping schedule does not match the group count"));
        }
        Ok(RowCodec::Clipped {
            spec,
            boundaries,
            alphas,
        })
    }

    pub fn symmetric(spec: QuantSpec, boundaries: Vec<usize>) -> Result<Self> {
        if spec.bits.is_lossless() {
            return Ok(RowCodec::Lossless);
        }
        crate::quant::symmetric_half_range(spec.bits)?;
        Ok(RowCodec::Symmetric { spec, boundaries })
    }

    pub fn smoothed(spec: QuantSpec, boundaries: Vec<usize>, factors: Vec<f32>) -> Result<Self> {
        if spec.bits.is_lossless() {
            return Ok(RowCodec::Lossless);
        }
        if factors.iter().any(|f| *f <= 0.0 || !f.is_finite()) {
            return Err(crate::error::invalid("smoothing factors must be positive"));
        }
        Ok(RowCodec::Smoothed {
            spec,
            boundaries,
            factors,
        })
    }

    pub fn spec(&self) -> Option<&QuantSpec> {
        match self {
            RowCodec::Lossless => None,
            RowCodec::Clipped { spec, .. } | RowCodec::Symmetric { spec, .. } | RowCodec::Smoothed { spec, .. } => {
                Some(spec)
            }
        }
    }

    pub fn boundaries(&self) -> Option<&[usize]> {
        match self {
            RowCodec::Lossless => None,
            RowCodec::Clipped { boundaries, .. }
            | RowCodec::Symmetric { boundaries, .. }
            | RowCodec::Smoothed { boundaries, .. } => Some(boundaries),
        }
    }

    fn stores_zero(&self) -> bool {
        !matches!(self, RowCodec::Symmetric { .. })
    }

    /// Declared storage bits per element.
    pub fn declared_bits(&self) -> f64 {
        match self {
            RowCodec::Lossless => 16.0,
            RowCodec::Symmetric { spec, .. } => {
                spec.bits.storage_bits() + f64::from(spec.param_format.bits()) / spec.group_size as f64
            }
            RowCodec::Clipped { spec, .. } | RowCodec::Smoothed { spec, .. } => average_bits(spec),
        }
    }

    /// Exact bytes used by a stored row; full-precision rows count 16 bits per element.
    pub fn stored_bytes(&self, row: &StoredRow) -> usize {
        match (row, self.spec()) {
            (StoredRow::Full(v), _) => 2 * v.len(),
            (StoredRow::Quantized(b), Some(spec)) => b.byte_len(spec.param_format, self.stores_zero()),
            (StoredRow::Quantized(b), None) => b.codes.len(),
        }
    }

    pub fn encode(&self, row: &[f32]) -> Result<StoredRow> {
        match self {
            RowCodec::Lossless => Ok(StoredRow::Full(row.to_vec())),
            RowCodec::Clipped {
                spec,
                boundaries,
                alphas,
            } => Ok(StoredRow::Quantized(quantize_row(row, boundaries, alphas, spec)?)),
            RowCodec::Symmetric { spec, boundaries } => {
                check_row(row.len(), boundaries)?;
                let mut codes = Vec::with_capacity(row.len());
                let mut params = Vec::with_capacity(boundaries.len() - 1);
                for w in boundaries.windows(2) {
                    let (c, p) = quantize_group_symmetric(&row[w[0]..w[1]], spec)?;
                    codes.extend(c);
                    params.push(p);
                }
                Ok(StoredRow::Quantized(QuantizedBlock {
                    codes: pack_codes(&codes, spec.bits)?,
                    params,
                    len: row.len(),
                }))
            }
            RowCodec::Smoothed {
                spec,
                boundaries,
                factors,
            } => {
                if factors.len() != row.len() {
                    return Err(shape("smoothing factors do not match the row width"));
                }
                let scaled: Vec<f32> = row.iter().zip(factors).map(|(x, s)| x / s).collect();
                let alphas = vec![1.0; boundaries.len().saturating_sub(1)];
                Ok(StoredRow::Quantized(quantize_row(&scaled, boundaries, &alphas, spec)?))
            }
        }
    }

    pub fn decode(&self, stored: &StoredRow) -> Result<Vec<f32>> {
        let block = match stored {
            StoredRow::Full(v) => return Ok(v.clone()),
            StoredRow::Quantized(b) => b,
        };
        match self {
            RowCodec::Lossless => Err(shape("lossless codec cannot decode a quantized row")),
            RowCodec::Clipped { spec, boundaries, .. } => dequantize_row(block, boundaries, spec.bits),
            RowCodec::Symmetric { spec, boundaries } => {
                check_row(block.len, boundaries)?;
                let codes = unpack_codes(&block.codes, block.len, spec.bits)?;
                let mut out = Vec::with_capacity(block.len);
                for (w, p) in boundaries.windows(2).zip(&block.params) {
                    out.extend(dequantize_group_symmetric(&codes[w[0]..w[1]], p, spec.bits)?);
                }
                Ok(out)
            }
            RowCodec::Smoothed {
                spec,
                boundaries,
                factors,
            } => {
                let mut out = dequantize_row(block, boundaries, spec.bits)?;
                for (v, s) in out.iter_mut().zip(factors) {
                    *v *= s;
                }
                Ok(out)
            }
        }
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        let write_spec = |w: &mut ByteWriter, spec: &QuantSpec| {
            w.u8(spec.bits.code())
                .usize32(spec.group_size)
                .u8(spec.param_format.code());
        };
        let write_bounds = |w: &mut ByteWriter, b: &[usize]| {
            w.usize32(b.len());
            for &x in b {
                w.usize32(x);
            }
        };
        match self {
            RowCodec::Lossless => {
                w.u8(0);
            }
            RowCodec::Clipped {
                spec,
                boundaries,
                alphas,
            } => {
                w.u8(1);
                write_spec(w, spec);
                write_bounds(w, boundaries);
                w.usize32(alphas.len()).f32s(alphas);
            }
            RowCodec::Symmetric { spec, boundaries } => {
                w.u8(2);
                write_spec(w, spec);
                write_bounds(w, boundaries);
            }
            RowCodec::Smoothed {
                spec,
                boundaries,
                factors,
            } => {
                w.u8(3);
                write_spec(w, spec);
                write_bounds(w, boundaries);
                w.usize32(factors.len()).f32s(factors);
            }
        }
    }

    pub(crate) fn read(r: &mut ByteReader<'_>, limit: usize) -> Result<Self> {
        let tag = r.u8()?;
        if tag == 0 {
            return Ok(RowCodec::Lossless);
        }
        let spec = QuantSpec::new(
            Bits::from_code(r.u8()?)?,
            r.usize32()?,
            ParamFormat::from_code(r.u8()?)?,
        )?;
        let n = r.len32(limit + 1)?;
        let mut boundaries = Vec::with_capacity(n);
        for _ in 0..n {
            boundaries.push(r.usize32()?);
        }
        match tag {
            1 => {
                let n = r.len32(limit)?;
                let alphas = r.f32s(n)?;
                RowCodec::clipped(spec, boundaries, alphas)
            }
            2 => RowCodec::symmetric(spec, boundaries),
            3 => {
                let n = r.len32(limit)?;
                let factors = r.f32s(n)?;
                RowCodec::smoothed(spec, boundaries, factors)
            }
            other => Err(crate::error::format_err(format!("unknown codec tag {other}"))),
        }
    }

    pub(crate) fn write_row(&self, w: &mut ByteWriter, row: &StoredRow) {
        match row {
            StoredRow::Full(v) => {
                w.u8(0).usize32(v.len()).f32s(v);
            }
            StoredRow::Quantized(b) => {
                let format = self.spec().map_or(ParamFormat::Fp16, |s| s.param_format);
                w.u8(1).usize32(b.len).usize32(b.codes.len()).bytes(&b.codes);
                w.usize32(b.params.len());
                for p in &b.params {
                    write_param(w, format, p.scale);
                    if self.stores_zero() {
                        write_param(w, format, p.zero);
                    }
                }
            }
        }
    }

    pub(crate) fn read_row(&self, r: &mut ByteReader<'_>, limit: usize) -> Result<StoredRow> {
        match r.u8()? {
            0 => {
                let n = r.len32(limit)?;
                Ok(StoredRow::Full(r.f32s(n)?))
            }
            1 => {
                let spec = self
                    .spec()
                    .ok_or_else(|| crate::error::format_err("quantized row under a lossless codec"))?;
                let len = r.len32(limit)?;
                let n_codes = r.len32(packed_len(limit, spec.bits))?;
                if n_codes != packed_len(len, spec.bits) {
                    return Err(crate::error::format_err("packed code length does not match row length"));
                }
                let codes = r.take(n_codes)?.to_vec();
                let n_params = r.len32(limit)?;
                let mut params = Vec::with_capacity(n_params);
                for _ in 0..n_params {
                    let scale = read_param(r, spec.param_format)?;
                    let zero = if self.stores_zero() {
                        read_param(r, spec.param_format)?
                    } else {
                        0.0
                    };
                    params.push(GroupParams { scale, zero });
                }
                Ok(StoredRow::Quantized(QuantizedBlock { codes, params, len }))
            }
            other => Err(crate::error::format_err(format!("unknown row tag {other}"))),
        }
    }
}

fn write_param(w: &mut ByteWriter, format: ParamFormat, v: f32) {
    let code = format.encode(v);
    match format {
        ParamFormat::Fp16 => w.u16(code),
        ParamFormat::Fp8E4M3 => w.u8(code as u8),
    };
}

fn read_param(r: &mut ByteReader<'_>, format: ParamFormat) -> Result<f32> {
    let code = match format {
        ParamFormat::Fp16 => r.u16()?,
        ParamFormat::Fp8E4M3 => u16::from(r.u8()?),
    };
    Ok(format.decode(code))
}

fn check_row(len: usize, boundaries: &[usize]) -> Result<()> {
    if boundaries.len() < 2 || boundaries[0] != 0 || boundaries[boundaries.len() - 1] != len {
        return Err(shape(format!("boundaries {boundaries:?} do not cover {len} channels")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(bits: Bits) -> QuantSpec {
        QuantSpec::new(bits, 4, ParamFormat::Fp16).unwrap()
    }

    #[test]
    fn unit_smoothing_matches_rtn() {
        let row = [0.3, -1.2, 4.0, 0.0, 2.5, -0.7, 1.1, 3.3];
        let b = vec![0, 4, 8];
        let rtn = RowCodec::rtn(spec(Bits::Two), b.clone());
        let smooth = RowCodec::smoothed(spec(Bits::Two), b, vec![1.0; 8]).unwrap();
        assert_eq!(rtn.encode(&row).unwrap(), smooth.encode(&row).unwrap());
    }

    #[test]
    fn lossless_widths_pass_through() {
        let row = [0.1, 0.2, 0.3];
        for codec in [
            RowCodec::rtn(QuantSpec::lossless(), vec![0, 3]),
            RowCodec::smoothed(QuantSpec::lossless(), vec![0, 3], vec![3.0; 3]).unwrap(),
            RowCodec::symmetric(QuantSpec::lossless(), vec![0, 3]).unwrap(),
        ] {
            let s = codec.encode(&row).unwrap();
            assert_eq!(codec.decode(&s).unwrap(), row);
        }
    }

    #[test]
    fn symmetric_bytes_skip_zero_point() {
        let codec =
            RowCodec::symmetric(QuantSpec::new(Bits::Two, 64, ParamFormat::Fp16).unwrap(), vec![0, 64]).unwrap();
        let row: Vec<f32> = (0..64).map(|i| (i as f32 - 30.0) / 7.0).collect();
        let stored = codec.encode(&row).unwrap();
        assert_eq!(codec.stored_bytes(&stored), 16 + 2);
        assert_eq!(8.0 * codec.stored_bytes(&stored) as f64 / 64.0, 2.25);
        assert_eq!(codec.declared_bits(), 2.25);
    }

    #[test]
    fn rejects_bad_factors() {
        assert!(RowCodec::smoothed(spec(Bits::Two), vec![0, 2], vec![1.0, 0.0]).is_err());
    }
}
