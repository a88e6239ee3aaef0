//! Offline search for per-group clipping scales.
//!
//! The objective for one layer is the mean squared error of the attention
//! output (after the output projection) when every cached row of the
//! calibration sequences is quantized, against the full-precision output.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::RowCodec;
use crate::engine::{capture_layer_traces, LayerTrace};
use crate::error::{invalid, shape, Result, SkvqError};
use crate::model::Model;
use crate::quant::{dequantize_group, quantize_group, CacheKind, KvSpec, QuantSpec};
use crate::reorder::{ChannelStats, KvStats, LayerPlan, ReorderPlan};
use crate::tensor::Matrix;

/// The clipping grid `{0.80, 0.82, ..., 1.00}`.
pub fn default_grid() -> Vec<f32> {
    (0..=10).map(|i| (80 + 2 * i) as f32 / 100.0).collect()
}

pub fn validate_grid(grid: &[f32]) -> Result<()> {
    if grid.is_empty() {
        return Err(invalid("clipping grid is empty"));
    }
    if let Some(a) = grid.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(invalid(format!("clipping scale {a} outside (0, 1]")));
    }
    Ok(())
}

/// Token sequences used for statistics and clipping search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
}

impl CalibrationSet {
    /// `count` sequences of `len` tokens drawn uniformly from the vocabulary.
    pub fn synthetic(count: usize, len: usize, vocab: usize, seed: u64) -> Result<Self> {
        if count == 0 || len == 0 || vocab == 0 {
            return Err(invalid("calibration set needs at least one token"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sequences = (0..count)
            .map(|_| (0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
            .collect();
        Ok(Self { sequences })
    }

    /// One sequence per non-empty line, whitespace-separated token ids.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sequences = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let seq = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| SkvqError::Config(format!("line {}: bad token id {t:?}", n + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(seq);
        }
        if sequences.is_empty() {
            return Err(invalid("calibration file holds no sequences"));
        }
        Ok(Self { sequences })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for seq in &self.sequences {
            let line: Vec<String> = seq.iter().map(u32::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    /// Every sequence must be at least `min_len` tokens and inside the vocabulary.
    pub fn validate(&self, min_len: usize, vocab: usize) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(invalid("calibration set is empty"));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            if s.len() < min_len.max(1) {
                return Err(invalid(format!(
                    "calibration sequence {i} has {} tokens, need {min_len}",
                    s.len()
                )));
            }
            if let Some(t) = s.iter().find(|&&t| t as usize >= vocab) {
                return Err(invalid(format!(
                    "calibration sequence {i} has token {t} outside the vocabulary"
                )));
            }
        }
        Ok(())
    }
}

/// Attention inputs of one layer for one calibration sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSamples {
    pub tokens: usize,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// Captured attention inputs, indexed `[layer][sequence]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationData {
    pub layers: Vec<Vec<LayerSamples>>,
}

impl CalibrationData {
    /// Full-precision pass of `model` over every calibration sequence.
    pub fn capture(model: &Model, set: &CalibrationSet) -> Result<Self> {
        set.validate(1, model.config.vocab)?;
        let mut layers = vec![Vec::with_capacity(set.sequences.len()); model.config.n_layers];
        for seq in &set.sequences {
            for LayerTrace { layer, q, k, v, .. } in capture_layer_traces(model, seq)? {
                layers[layer].push(LayerSamples {
                    tokens: seq.len(),
                    q,
                    k,
                    v,
                });
            }
        }
        Ok(Self { layers })
    }

    /// Per-layer channel statistics of the captured keys and values.
    pub fn stats(&self, kv_channels: usize) -> Result<Vec<KvStats>> {
        self.layers
            .iter()
            .map(|samples| {
                let mut s = KvStats {
                    key: ChannelStats::new(kv_channels),
                    value: ChannelStats::new(kv_channels),
                };
                for x in samples {
                    s.key.observe(&x.k)?;
                    s.value.observe(&x.v)?;
                }
                Ok(s)
            })
            .collect()
    }
}

/// Smoothing factors `s_c = max |x_c|` per channel; zero ranges map to 1.
pub fn smoothing_factors(stats: &ChannelStats) -> Vec<f32> {
    stats
        .min
        .iter()
        .zip(&stats.max)
        .map(|(lo, hi)| {
            let m = lo.abs().max(hi.abs());
            if m > 0.0 && m.is_finite() {
                m
            } else {
                1.0
            }
        })
        .collect()
}

/// Clipping scales of one layer, one per group of the layer plan.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerClip {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

impl LayerClip {
    pub fn ones(plan: &LayerPlan) -> Self {
        Self {
            key: vec![1.0; plan.key.n_groups()],
            value: vec![1.0; plan.value.n_groups()],
        }
    }

    pub fn get(&self, kind: CacheKind) -> &[f32] {
        match kind {
            CacheKind::Key => &self.key,
            CacheKind::Value => &self.value,
        }
    }
}

/// Per-layer, per-cache, per-group clipping scales and the spec they were
/// searched for.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSchedule {
    pub spec: KvSpec,
    pub layers: Vec<LayerClip>,
}

impl ClipSchedule {
    pub fn ones(plan: &ReorderPlan, spec: KvSpec) -> Self {
        Self {
            spec,
            layers: plan.layers.iter().map(LayerClip::ones).collect(),
        }
    }

    /// Layer and group counts must agree with `plan`; every scale in (0, 1].
    pub fn validate(&self, plan: &ReorderPlan) -> Result<()> {
        if self.layers.len() != plan.layers.len() {
            return Err(shape(format!(
                "schedule has {} layers, plan has {}",
                self.layers.len(),
                plan.layers.len()
            )));
        }
        for (i, (c, p)) in self.layers.iter().zip(&plan.layers).enumerate() {
            if c.key.len() != p.key.n_groups() || c.value.len() != p.value.n_groups() {
                return Err(shape(format!(
                    "layer {i}: schedule group count does not match the plan"
                )));
            }
            validate_grid(&c.key).and(validate_grid(&c.value)).or_else(|e| {
                if c.key.is_empty() && c.value.is_empty() {
                    Ok(())
                } else {
                    Err(e)
                }
            })?;
        }
        Ok(())
    }

    pub fn is_all_ones(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.key.iter().chain(&l.value).all(|&a| a == 1.0))
    }

    /// Row codecs of one layer under this schedule.
    pub fn codecs(&self, plan: &ReorderPlan, layer: usize) -> Result<(RowCodec, RowCodec)> {
        let p = &plan.layers[layer];
        let c = &self.layers[layer];
        Ok((
            RowCodec::clipped(self.spec.key, p.key.boundaries.clone(), c.key.clone())?,
            RowCodec::clipped(self.spec.value, p.value.boundaries.clone(), c.value.clone())?,
        ))
    }
}

/// Loss of one layer before and after the search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerLoss {
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub layers: Vec<LayerLoss>,
}

struct Geometry {
    n_heads: usize,
    head_dim: usize,
    ratio: usize,
    hidden: usize,
    kv_hidden: usize,
}

impl Geometry {
    fn new(model: &Model) -> Self {
        let c = &model.config;
        Self {
            n_heads: c.n_heads,
            head_dim: c.head_dim,
            ratio: c.group_ratio(),
            hidden: c.hidden,
            kv_hidden: c.kv_hidden(),
        }
    }

    fn query_heads(&self, kv_head: usize) -> std::ops::Range<usize> {
        kv_head * self.ratio..(kv_head + 1) * self.ratio
    }
}

/// Causal attention probabilities of query head `h`, row-major `n x n`
/// (entries above the diagonal are zero).
fn head_probs(g: &Geometry, q: &[f32], k: &[f32], n: usize, h: usize) -> Vec<f64> {
    let hd = g.head_dim;
    let kv = h / g.ratio;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        let qi = &q[i * g.hidden + h * hd..i * g.hidden + (h + 1) * hd];
        let row = &mut p[i * n..i * n + i + 1];
        for (j, s) in row.iter_mut().enumerate() {
            let kj = &k[j * g.kv_hidden + kv * hd..j * g.kv_hidden + (kv + 1) * hd];
            *s = qi
                .iter()
                .zip(kj)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum::<f64>()
                * scale;
        }
        crate::attention::softmax_in_place(row);
    }
    p
}

/// Head output `P_h V` for the channels `[c0, c1)` of the head's KV head, `n x (c1 - c0)`.
fn weighted_values(g: &Geometry, p: &[f64], v: &[f32], n: usize, c0: usize, c1: usize) -> Vec<f64> {
    let w = c1 - c0;
    let mut out = vec![0.0f64; n * w];
    for i in 0..n {
        let dst = &mut out[i * w..(i + 1) * w];
        for (j, &pij) in p[i * n..i * n + i + 1].iter().enumerate() {
            let vj = &v[j * g.kv_hidden + c0..j * g.kv_hidden + c1];
            for (d, &x) in dst.iter_mut().zip(vj) {
                *d += pij * f64::from(x);
            }
        }
    }
    out
}

/// Attention module output `O = concat_h(P_h V) W_o` in f64, `n x hidden`.
fn attention_output(g: &Geometry, q: &[f32], k: &[f32], v: &[f32], n: usize, wo: &Matrix) -> Vec<f64> {
    let hd = g.head_dim;
    let mut heads = vec![0.0f64; n * g.hidden];
    for h in 0..g.n_heads {
        let kv = h / g.ratio;
        let p = head_probs(g, q, k, n, h);
        let pv = weighted_values(g, &p, v, n, kv * hd, (kv + 1) * hd);
        for i in 0..n {
            heads[i * g.hidden + h * hd..i * g.hidden + (h + 1) * hd].copy_from_slice(&pv[i * hd..(i + 1) * hd]);
        }
    }
    project(&heads, n, g.hidden, wo)
}

fn project(x: &[f64], n: usize, width: usize, w: &Matrix) -> Vec<f64> {
    let m = w.cols();
    let mut out = vec![0.0f64; n * m];
    for i in 0..n {
        let dst = &mut out[i * m..(i + 1) * m];
        for (c, &xv) in x[i * width..(i + 1) * width].iter().enumerate() {
            for (d, &wv) in dst.iter_mut().zip(w.row(c)) {
                *d += xv * f64::from(wv);
            }
        }
    }
    out
}

fn decode_rows(codec: &RowCodec, rows: &[f32], width: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(rows.len());
    for r in rows.chunks_exact(width) {
        out.extend(codec.decode(&codec.encode(r)?)?);
    }
    Ok(out)
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_layer(model: &Model, layer: usize, plan: &ReorderPlan, data: &CalibrationData) -> Result<()> {
    if layer >= model.config.n_layers || layer >= data.layers.len() || layer >= plan.layers.len() {
        return Err(invalid(format!("layer {layer} out of range")));
    }
    if data.layers[layer].is_empty() {
        return Err(invalid("no calibration samples"));
    }
    Ok(())
}

/// Mean squared attention-output error of `layer` with every cached row
/// quantized by the given clipping scales, against the full-precision output.
/// `model` must already carry the fused plan.
pub fn evaluate_clip_loss(
    model: &Model,
    layer: usize,
    plan: &ReorderPlan,
    spec: &KvSpec,
    clip: &LayerClip,
    data: &CalibrationData,
) -> Result<f64> {
    check_layer(model, layer, plan, data)?;
    let g = Geometry::new(model);
    let p = &plan.layers[layer];
    let key = RowCodec::clipped(spec.key, p.key.boundaries.clone(), clip.key.clone())?;
    let value = RowCodec::clipped(spec.value, p.value.boundaries.clone(), clip.value.clone())?;
    let wo = &model.layers[layer].attn.wo;
    let (mut total, mut count) = (0.0, 0usize);
    for s in &data.layers[layer] {
        let reference = attention_output(&g, &s.q, &s.k, &s.v, s.tokens, wo);
        let kq = decode_rows(&key, &s.k, g.kv_hidden)?;
        let vq = decode_rows(&value, &s.v, g.kv_hidden)?;
        let out = attention_output(&g, &s.q, &kq, &vq, s.tokens, wo);
        total += sq_err(&out, &reference);
        count += reference.len();
    }
    Ok(total / count as f64)
}

/// Dequantized copy of group `[c0, c1)` of every row at clipping scale `alpha`.
fn requantize_group(
    rows: &[f32],
    width: usize,
    c0: usize,
    c1: usize,
    alpha: f32,
    spec: &QuantSpec,
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(rows.len() / width * (c1 - c0));
    for r in rows.chunks_exact(width) {
        let (codes, params) = quantize_group(&r[c0..c1], alpha, spec)?;
        out.extend(dequantize_group(&codes, &params, spec.bits)?);
    }
    Ok(out)
}

fn write_group(rows: &mut [f32], width: usize, c0: usize, group: &[f32]) {
    let w = group.len() / (rows.len() / width).max(1);
    for (r, src) in rows.chunks_exact_mut(width).zip(group.chunks_exact(w.max(1))) {
        r[c0..c0 + w].copy_from_slice(src);
    }
}

/// Search state for one calibration sequence.
struct SeqState<'a> {
    s: &'a LayerSamples,
    reference: Vec<f64>,
    kq: Vec<f32>,
    vq: Vec<f32>,
    heads: Vec<f64>,
    out: Vec<f64>,
    probs: Vec<Vec<f64>>,
}

impl<'a> SeqState<'a> {
    fn new(g: &Geometry, s: &'a LayerSamples, key: &RowCodec, value: &RowCodec, wo: &Matrix) -> Result<Self> {
        let n = s.tokens;
        let reference = attention_output(g, &s.q, &s.k, &s.v, n, wo);
        let kq = decode_rows(key, &s.k, g.kv_hidden)?;
        let vq = decode_rows(value, &s.v, g.kv_hidden)?;
        let hd = g.head_dim;
        let mut heads = vec![0.0; n * g.hidden];
        let mut probs = Vec::with_capacity(g.n_heads);
        for h in 0..g.n_heads {
            let kv = h / g.ratio;
            let p = head_probs(g, &s.q, &kq, n, h);
            let pv = weighted_values(g, &p, &vq, n, kv * hd, (kv + 1) * hd);
            for i in 0..n {
                heads[i * g.hidden + h * hd..i * g.hidden + (h + 1) * hd].copy_from_slice(&pv[i * hd..(i + 1) * hd]);
            }
            probs.push(p);
        }
        let out = project(&heads, n, g.hidden, wo);
        Ok(Self {
            s,
            reference,
            kq,
            vq,
            heads,
            out,
            probs,
        })
    }

    /// Squared error after replacing head-output columns `cols` by `new`
    /// (`n x cols.len()`), plus the output delta that realizes it.
    fn trial(&self, g: &Geometry, cols: &[usize], new: &[f64], wo: &Matrix) -> (f64, Vec<f64>) {
        let n = self.s.tokens;
        let w = cols.len();
        let mut out = self.out.clone();
        for i in 0..n {
            let dst = &mut out[i * g.hidden..(i + 1) * g.hidden];
            for (j, &c) in cols.iter().enumerate() {
                let delta = new[i * w + j] - self.heads[i * g.hidden + c];
                if delta != 0.0 {
                    for (d, &wv) in dst.iter_mut().zip(wo.row(c)) {
                        *d += delta * f64::from(wv);
                    }
                }
            }
        }
        (sq_err(&out, &self.reference), out)
    }

    fn commit(&mut self, g: &Geometry, cols: &[usize], new: &[f64], out: Vec<f64>) {
        let w = cols.len();
        for i in 0..self.s.tokens {
            for (j, &c) in cols.iter().enumerate() {
                self.heads[i * g.hidden + c] = new[i * w + j];
            }
        }
        self.out = out;
    }
}

/// Key-group candidate: recompute the query heads that read this KV head.
fn key_candidate(
    g: &Geometry,
    st: &SeqState<'_>,
    kv: usize,
    c0: usize,
    group: &[f32],
) -> (Vec<usize>, Vec<f64>, Vec<Vec<f64>>) {
    let n = st.s.tokens;
    let hd = g.head_dim;
    let mut k = st.kq.clone();
    write_group(&mut k, g.kv_hidden, c0, group);
    let heads = g.query_heads(kv);
    let cols: Vec<usize> = heads.clone().flat_map(|h| h * hd..(h + 1) * hd).collect();
    let w = cols.len();
    let mut new = vec![0.0; n * w];
    let mut probs = Vec::new();
    for (hi, h) in heads.enumerate() {
        let p = head_probs(g, &st.s.q, &k, n, h);
        let pv = weighted_values(g, &p, &st.vq, n, kv * hd, (kv + 1) * hd);
        for i in 0..n {
            new[i * w + hi * hd..i * w + (hi + 1) * hd].copy_from_slice(&pv[i * hd..(i + 1) * hd]);
        }
        probs.push(p);
    }
    (cols, new, probs)
}

/// Value-group candidate: only the head-output columns of this group change.
fn value_candidate(
    g: &Geometry,
    st: &SeqState<'_>,
    kv: usize,
    c0: usize,
    c1: usize,
    group: &[f32],
) -> (Vec<usize>, Vec<f64>) {
    let n = st.s.tokens;
    let hd = g.head_dim;
    let mut v = st.vq.clone();
    write_group(&mut v, g.kv_hidden, c0, group);
    let heads = g.query_heads(kv);
    let gw = c1 - c0;
    let cols: Vec<usize> = heads
        .clone()
        .flat_map(|h| (c0 - kv * hd..c1 - kv * hd).map(move |c| h * hd + c))
        .collect();
    let w = cols.len();
    let mut new = vec![0.0; n * w];
    for (hi, h) in heads.enumerate() {
        let pv = weighted_values(g, &st.probs[h], &v, n, c0, c1);
        for i in 0..n {
            new[i * w + hi * gw..i * w + (hi + 1) * gw].copy_from_slice(&pv[i * gw..(i + 1) * gw]);
        }
    }
    (cols, new)
}

/// Coordinate-descent clip search for one layer: every key group, then every
/// value group, each set to the grid value with the lowest loss (ties go to
/// the larger scale). Falls back to all ones if the result is worse.
pub fn calibrate_layer(
    model: &Model,
    layer: usize,
    plan: &ReorderPlan,
    spec: &KvSpec,
    data: &CalibrationData,
    grid: &[f32],
) -> Result<(LayerClip, LayerLoss)> {
    validate_grid(grid)?;
    check_layer(model, layer, plan, data)?;
    let p = &plan.layers[layer];
    let ones = LayerClip::ones(p);
    let before = evaluate_clip_loss(model, layer, plan, spec, &ones, data)?;
    if spec.key.bits.is_lossless() && spec.value.bits.is_lossless() {
        return Ok((ones, LayerLoss { before, after: before }));
    }
    let mut grid: Vec<f32> = grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();

    let g = Geometry::new(model);
    let wo = &model.layers[layer].attn.wo;
    let hd = g.head_dim;
    let mut clip = ones.clone();
    let (key_codec, value_codec) = (
        RowCodec::clipped(spec.key, p.key.boundaries.clone(), clip.key.clone())?,
        RowCodec::clipped(spec.value, p.value.boundaries.clone(), clip.value.clone())?,
    );
    let mut states = data.layers[layer]
        .iter()
        .map(|s| SeqState::new(&g, s, &key_codec, &value_codec, wo))
        .collect::<Result<Vec<_>>>()?;

    if !spec.key.bits.is_lossless() {
        for (gi, w) in p.key.boundaries.windows(2).enumerate() {
            let (c0, c1) = (w[0], w[1]);
            let kv = c0 / hd;
            let mut best: Option<(f64, f32, Vec<_>)> = None;
            for &alpha in &grid {
                let mut loss = 0.0;
                let mut trials = Vec::with_capacity(states.len());
                for st in &states {
                    let group = requantize_group(&st.s.k, g.kv_hidden, c0, c1, alpha, &spec.key)?;
                    let (cols, new, probs) = key_candidate(&g, st, kv, c0, &group);
                    let (err, out) = st.trial(&g, &cols, &new, wo);
                    loss += err;
                    trials.push((group, cols, new, probs, out));
                }
                if best.as_ref().is_none_or(|b| loss < b.0) {
                    best = Some((loss, alpha, trials));
                }
            }
            let (_, alpha, trials) = best.expect("grid is non-empty");
            clip.key[gi] = alpha;
            for (st, (group, cols, new, probs, out)) in states.iter_mut().zip(trials) {
                write_group(&mut st.kq, g.kv_hidden, c0, &group);
                for (h, pr) in g.query_heads(kv).zip(probs) {
                    st.probs[h] = pr;
                }
                st.commit(&g, &cols, &new, out);
            }
        }
    }

    if !spec.value.bits.is_lossless() {
        for (gi, w) in p.value.boundaries.windows(2).enumerate() {
            let (c0, c1) = (w[0], w[1]);
            let kv = c0 / hd;
            let mut best: Option<(f64, f32, Vec<_>)> = None;
            for &alpha in &grid {
                let mut loss = 0.0;
                let mut trials = Vec::with_capacity(states.len());
                for st in &states {
                    let group = requantize_group(&st.s.v, g.kv_hidden, c0, c1, alpha, &spec.value)?;
                    let (cols, new) = value_candidate(&g, st, kv, c0, c1, &group);
                    let (err, out) = st.trial(&g, &cols, &new, wo);
                    loss += err;
                    trials.push((group, cols, new, out));
                }
                if best.as_ref().is_none_or(|b| loss < b.0) {
                    best = Some((loss, alpha, trials));
                }
            }
            let (_, alpha, trials) = best.expect("grid is non-empty");
            clip.value[gi] = alpha;
            for (st, (group, cols, new, out)) in states.iter_mut().zip(trials) {
                write_group(&mut st.vq, g.kv_hidden, c0, &group);
                st.commit(&g, &cols, &new, out);
            }
        }
    }

    let after = evaluate_clip_loss(model, layer, plan, spec, &clip, data)?;
    if after > before {
        return Ok((ones, LayerLoss { before, after: before }));
    }
    Ok((clip, LayerLoss { before, after }))
}

/// Clip search over every layer. `model` must already carry the fused plan.
pub fn calibrate_alpha(
    model: &Model,
    plan: &ReorderPlan,
    spec: &KvSpec,
    data: &CalibrationData,
    grid: &[f32],
) -> Result<(ClipSchedule, CalibrationReport)> {
    validate_grid(grid)?;
    plan.validate(&model.config)?;
    if data.layers.len() != model.config.n_layers {
        return Err(shape("calibration data does not cover every layer"));
    }
    let mut layers = Vec::with_capacity(model.config.n_layers);
    let mut losses = Vec::with_capacity(model.config.n_layers);
    for l in 0..model.config.n_layers {
        let (clip, loss) = calibrate_layer(model, l, plan, spec, data, grid)?;
        layers.push(clip);
        losses.push(loss);
    }
    Ok((
        ClipSchedule { spec: *spec, layers },
        CalibrationReport { layers: losses },
    ))
}

/// Grid value minimizing the reconstruction error of one group on its own;
/// ties go to the larger scale.
pub fn best_group_alpha(values: &[f32], grid: &[f32], spec: &QuantSpec) -> Result<(f32, f64)> {
    validate_grid(grid)?;
    let mut best: Option<(f32, f64)> = None;
    let mut sorted = grid.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    for &a in &sorted {
        let err = group_mse(values, a, spec)?;
        if best.is_none_or(|b| err < b.1) {
            best = Some((a, err));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Reconstruction MSE of one group at clipping scale `alpha`.
pub fn group_mse(values: &[f32], alpha: f32, spec: &QuantSpec) -> Result<f64> {
    let (codes, params) = quantize_group(values, alpha, spec)?;
    let back = dequantize_group(&codes, &params, spec.bits)?;
    Ok(values
        .iter()
        .zip(&back)
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::quant::{Bits, ParamFormat};

    fn setup(seed: u64) -> (Model, CalibrationData) {
        let config = ModelConfig {
            n_layers: 1,
            hidden: 32,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 8,
            vocab: 32,
            ffn_hidden: 32,
            ..ModelConfig::default()
        };
        let model = Model::random(config, seed).unwrap();
        let set = CalibrationSet::synthetic(2, 24, 32, seed).unwrap();
        let data = CalibrationData::capture(&model, &set).unwrap();
        (model, data)
    }

    fn two_bit() -> KvSpec {
        KvSpec::uniform(QuantSpec::new(Bits::Two, 4, ParamFormat::Fp16).unwrap())
    }

    #[test]
    fn default_grid_has_eleven_points() {
        let g = default_grid();
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.8);
        assert_eq!(g[10], 1.0);
        assert!(validate_grid(&[]).is_err());
        assert!(validate_grid(&[1.2]).is_err());
        assert!(validate_grid(&[0.0]).is_err());
    }

    #[test]
    fn calibration_file_round_trip() {
        let set = CalibrationSet::parse("1 2 3\n\n# comment\n4 5\n").unwrap();
        assert_eq!(set.sequences, vec![vec![1, 2, 3], vec![4, 5]]);
        assert_eq!(CalibrationSet::parse(&set.to_text()).unwrap(), set);
        assert!(CalibrationSet::parse("1 x").is_err());
        assert!(set.validate(3, 10).is_err());
        assert!(set.validate(2, 5).is_err());
    }

    #[test]
    fn unit_grid_gives_all_ones() {
        let (model, data) = setup(1);
        let plan = ReorderPlan::identity(&model.config, 4, 4).unwrap();
        let (schedule, _) = calibrate_alpha(&model, &plan, &two_bit(), &data, &[1.0]).unwrap();
        assert!(schedule.is_all_ones());
        schedule.validate(&plan).unwrap();
    }

    #[test]
    fn lossless_loss_is_zero() {
        let (model, data) = setup(2);
        let plan = ReorderPlan::identity(&model.config, 4, 4).unwrap();
        let clip = LayerClip::ones(&plan.layers[0]);
        let loss = evaluate_clip_loss(&model, 0, &plan, &KvSpec::lossless(), &clip, &data).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn search_does_not_regress_and_is_deterministic() {
        let (model, data) = setup(3);
        let plan = ReorderPlan::identity(&model.config, 4, 4).unwrap();
        let (a, report) = calibrate_alpha(&model, &plan, &two_bit(), &data, &default_grid()).unwrap();
        let (b, _) = calibrate_alpha(&model, &plan, &two_bit(), &data, &default_grid()).unwrap();
        assert_eq!(a, b);
        for l in &report.layers {
            assert!(l.after <= l.before);
            assert!(l.after >= 0.0);
        }
    }

    #[test]
    fn last_value_group_is_coordinate_optimal() {
        let (model, data) = setup(4);
        let plan = ReorderPlan::identity(&model.config, 4, 4).unwrap();
        let spec = two_bit();
        let grid = default_grid();
        let (clip, loss) = calibrate_layer(&model, 0, &plan, &spec, &data, &grid).unwrap();
        assert_eq!(
            loss.after,
            evaluate_clip_loss(&model, 0, &plan, &spec, &clip, &data).unwrap()
        );
        if loss.after < loss.before {
            let last = clip.value.len() - 1;
            for &a in &grid {
                let mut trial = clip.clone();
                trial.value[last] = a;
                let l = evaluate_clip_loss(&model, 0, &plan, &spec, &trial, &data).unwrap();
                assert!(l >= loss.after * (1.0 - 1e-12), "alpha {a}: {l} < {}", loss.after);
            }
        }
    }

    fn outlier_group(outlier: f32) -> Vec<f32> {
        let mut values: Vec<f32> = (0..63).map(|i| i as f32 / 62.0).collect();
        values.push(outlier);
        values
    }

    #[test]
    fn moderate_outlier_group_prefers_clipping() {
        let spec = QuantSpec::new(Bits::Two, 64, ParamFormat::Fp16).unwrap();
        let values = outlier_group(4.0);
        let (alpha, err) = best_group_alpha(&values, &default_grid(), &spec).unwrap();
        assert!(alpha < 1.0);
        assert!(err < group_mse(&values, 1.0, &spec).unwrap());
    }

    #[test]
    fn extreme_outlier_keeps_full_range() {
        // Clipping a 100x outlier costs more than it saves on the bulk at 2 bits.
        let spec = QuantSpec::new(Bits::Two, 64, ParamFormat::Fp16).unwrap();
        let (alpha, _) = best_group_alpha(&outlier_group(100.0), &default_grid(), &spec).unwrap();
        assert_eq!(alpha, 1.0);
    }

    #[test]
    fn smoothing_factor_of_silent_channel_is_one() {
        let stats = ChannelStats {
            min: vec![-2.0, 0.0, 0.5],
            max: vec![1.0, 0.0, 3.0],
            tokens: 4,
        };
        assert_eq!(smoothing_factors(&stats), vec![2.0, 1.0, 3.0]);
    }
}
