//! Scaled dot-product attention kernels and rotary position embedding.

use crate::error::{shape, Result};

/// Head geometry shared by the kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn kv_head_of(&self, head: usize) -> usize {
        head / (self.n_heads / self.n_kv_heads)
    }
}

/// Numerically stable softmax (row max subtracted before exponentiation).
pub fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

#[allow(clippy::too_many_arguments)]
fn attend_head(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    stride: usize,
    offset: usize,
    n_keys: usize,
    scores: &mut Vec<f64>,
    out: &mut [f32],
) {
    let hd = q.len();
    let scale = 1.0 / (hd as f64).sqrt();
    scores.clear();
    for j in 0..n_keys {
        let k = &keys[j * stride + offset..j * stride + offset + hd];
        let dot: f64 = q.iter().zip(k).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
        scores.push(dot * scale);
    }
    softmax_in_place(scores);
    let mut acc = vec![0.0f64; hd];
    for (j, &w) in scores.iter().enumerate() {
        let v = &values[j * stride + offset..j * stride + offset + hd];
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += w * f64::from(x);
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = a as f32;
    }
}

fn check(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    q_width: usize,
    kv_width: usize,
    first_pos: usize,
) -> Result<(usize, usize)> {
    if q_width == 0
        || kv_width == 0
        || !q.len().is_multiple_of(q_width)
        || !keys.len().is_multiple_of(kv_width)
        || keys.len() != values.len()
    {
        return Err(shape("attention inputs have inconsistent widths"));
    }
    let n = q.len() / q_width;
    let total = keys.len() / kv_width;
    if first_pos + n > total {
        return Err(shape(format!(
            "queries at positions {first_pos}..{} but only {total} keys",
            first_pos + n
        )));
    }
    Ok((n, total))
}

/// Causal grouped-query attention. Query row `i` sits at absolute position
/// `first_pos + i` and attends keys `0..=first_pos + i`. Returns the
/// concatenated head outputs (before the output projection).
pub fn attend(q: &[f32], keys: &[f32], values: &[f32], layout: &HeadLayout, first_pos: usize) -> Result<Vec<f32>> {
    let (qw, kw, hd) = (layout.q_width(), layout.kv_width(), layout.head_dim);
    let (n, _) = check(q, keys, values, qw, kw, first_pos)?;
    let mut out = vec![0.0f32; n * qw];
    let mut scores = Vec::new();
    for i in 0..n {
        for h in 0..layout.n_heads {
            let qh = &q[i * qw + h * hd..i * qw + (h + 1) * hd];
            let offset = layout.kv_head_of(h) * hd;
            let dst = &mut out[i * qw + h * hd..i * qw + (h + 1) * hd];
            attend_head(qh, keys, values, kw, offset, first_pos + i + 1, &mut scores, dst);
        }
    }
    Ok(out)
}

/// Causal multi-head attention over keys/values with one head per query head.
pub fn attend_mha(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    n_heads: usize,
    head_dim: usize,
    first_pos: usize,
) -> Result<Vec<f32>> {
    let w = n_heads * head_dim;
    let (n, _) = check(q, keys, values, w, w, first_pos)?;
    let mut out = vec![0.0f32; n * w];
    let mut scores = Vec::new();
    for i in 0..n {
        for h in 0..n_heads {
            let qh = &q[i * w + h * head_dim..i * w + (h + 1) * head_dim];
            let dst = &mut out[i * w + h * head_dim..i * w + (h + 1) * head_dim];
            attend_head(qh, keys, values, w, h * head_dim, first_pos + i + 1, &mut scores, dst);
        }
    }
    Ok(out)
}

/// Duplicate every KV head for the query heads that share it.
pub fn repeat_kv(rows: &[f32], layout: &HeadLayout) -> Vec<f32> {
    let (kw, hd) = (layout.kv_width(), layout.head_dim);
    let mut out = Vec::with_capacity(rows.len() / kw * layout.q_width());
    for row in rows.chunks_exact(kw) {
        for h in 0..layout.n_heads {
            let kv = layout.kv_head_of(h);
            out.extend_from_slice(&row[kv * hd..(kv + 1) * hd]);
        }
    }
    out
}

/// Rotary embedding (rotate-half pairing) for rows whose stored channel `c`
/// holds original channel `channel_map[c]`. Pairing and frequencies follow the
/// original channel order, so a permuted row rotates exactly like the original.
#[derive(Clone, Debug)]
pub struct Rope {
    head_dim: usize,
    /// For each stored channel: (frequency index, stored partner, sign of partner term).
    pairs: Vec<(usize, usize, f64)>,
    inv_freq: Vec<f64>,
}

impl Rope {
    pub fn new(channel_map: &[usize], head_dim: usize, base: f32) -> Result<Self> {
        if !head_dim.is_multiple_of(2) || !channel_map.len().is_multiple_of(head_dim) {
            return Err(shape("rotary embedding needs whole heads of even width"));
        }
        let half = head_dim / 2;
        let mut inverse = vec![usize::MAX; channel_map.len()];
        for (stored, &orig) in channel_map.iter().enumerate() {
            if orig >= channel_map.len() || inverse[orig] != usize::MAX {
                return Err(shape("rotary channel map is not a permutation"));
            }
            inverse[orig] = stored;
        }
        let pairs = channel_map
            .iter()
            .map(|&orig| {
                let j = orig % head_dim;
                let (partner, sign) = if j < half {
                    (orig + half, -1.0)
                } else {
                    (orig - half, 1.0)
                };
                (j % half, inverse[partner], sign)
            })
            .collect();
        let inv_freq = (0..half)
            .map(|f| f64::from(base).powf(-(2.0 * f as f64) / head_dim as f64))
            .collect();
        Ok(Self {
            head_dim,
            pairs,
            inv_freq,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Rotate flat rows in place; row `i` is at position `first_pos + i`.
    pub fn apply(&self, rows: &mut [f32], first_pos: usize) {
        let width = self.pairs.len();
        let mut src = vec![0.0f32; width];
        for (i, row) in rows.chunks_exact_mut(width).enumerate() {
            let pos = (first_pos + i) as f64;
            src.copy_from_slice(row);
            for (c, &(f, partner, sign)) in self.pairs.iter().enumerate() {
                let theta = pos * self.inv_freq[f];
                let (sin, cos) = theta.sin_cos();
                row[c] = (f64::from(src[c]) * cos + sign * f64::from(src[partner]) * sin) as f32;
            }
        }
    }
}
