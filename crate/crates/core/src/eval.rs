//! Baseline strategies and controlled comparisons.

use std::cell::OnceCell;
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{attend, HeadLayout};
use crate::calibration::{calibrate_alpha, smoothing_factors, CalibrationData, CalibrationSet, ClipSchedule};
use crate::codec::RowCodec;
use crate::engine::{capture_layer_traces, CachePolicy, Engine};
use crate::error::{invalid, Result};
use crate::kv_cache::{CacheLayout, FilterRule, SlidingKvCache};
use crate::model::Model;
use crate::quant::{Bits, KvSpec, ParamFormat, QuantSpec};
use crate::reorder::{plan_cache, CachePlan, ChannelStats, ReorderPlan};
use crate::tensor::{matmul_rows, Matrix};

/// Per-layer cache layouts of an SKVQ configuration.
pub fn skvq_policy(plan: &ReorderPlan, schedule: &ClipSchedule, window: usize, n_sink: usize) -> Result<CachePolicy> {
    schedule.validate(plan)?;
    let layers = (0..plan.layers.len())
        .map(|l| {
            let (key, value) = schedule.codecs(plan, l)?;
            Ok(CacheLayout { window, key, value })
        })
        .collect::<Result<_>>()?;
    Ok(CachePolicy {
        layers,
        filters: Vec::new(),
    }
    .with_sinks(n_sink))
}

/// Shared inputs for strategies that need calibration.
pub struct EvalContext<'a> {
    pub model: &'a Model,
    pub calib: &'a CalibrationSet,
    pub grid: Vec<f32>,
    pub seed: u64,
    captured: OnceCell<CalibrationData>,
}

impl<'a> EvalContext<'a> {
    pub fn new(model: &'a Model, calib: &'a CalibrationSet, grid: Vec<f32>, seed: u64) -> Self {
        Self {
            model,
            calib,
            grid,
            seed,
            captured: OnceCell::new(),
        }
    }

    /// Calibration traces of the unmodified model.
    pub fn captured(&self) -> Result<&CalibrationData> {
        if let Some(c) = self.captured.get() {
            return Ok(c);
        }
        let data = CalibrationData::capture(self.model, self.calib)?;
        Ok(self.captured.get_or_init(|| data))
    }
}

/// A model ready for evaluation together with its cache policy.
pub struct Prepared {
    pub model: Model,
    pub policy: CachePolicy,
}

/// A way of storing the KV cache, evaluated behind one interface.
pub trait QuantStrategy {
    fn name(&self) -> String;
    fn window(&self) -> usize {
        0
    }
    fn sink(&self) -> usize {
        0
    }
    /// The spec actually applied, for reporting.
    fn reported_spec(&self, spec: &KvSpec) -> KvSpec {
        *spec
    }
    fn prepare(&self, ctx: &EvalContext<'_>, spec: &KvSpec) -> Result<Prepared>;
}

fn identity_layouts(
    model: &Model,
    spec: &KvSpec,
    window: usize,
    codec: impl Fn(QuantSpec, Vec<usize>) -> Result<RowCodec>,
) -> Result<Vec<CacheLayout>> {
    let plan = ReorderPlan::identity(&model.config, spec.key.group_size, spec.value.group_size)?;
    plan.layers
        .iter()
        .map(|p| {
            Ok(CacheLayout {
                window,
                key: codec(spec.key, p.key.boundaries.clone())?,
                value: codec(spec.value, p.value.boundaries.clone())?,
            })
        })
        .collect()
}

/// Full-precision cache.
pub struct FpStrategy;

impl QuantStrategy for FpStrategy {
    fn name(&self) -> String {
        "fp16".into()
    }

    fn reported_spec(&self, _spec: &KvSpec) -> KvSpec {
        KvSpec::lossless()
    }

    fn prepare(&self, ctx: &EvalContext<'_>, _spec: &KvSpec) -> Result<Prepared> {
        Ok(Prepared {
            model: ctx.model.clone(),
            policy: CachePolicy::lossless(ctx.model.config.n_layers),
        })
    }
}

/// Per-token round-to-nearest over contiguous groups, no window.
pub struct RtnStrategy {
    pub symmetric: bool,
}

impl QuantStrategy for RtnStrategy {
    fn name(&self) -> String {
        if self.symmetric { "rtn-sym" } else { "rtn" }.into()
    }

    fn prepare(&self, ctx: &EvalContext<'_>, spec: &KvSpec) -> Result<Prepared> {
        let layers = if self.symmetric {
            identity_layouts(ctx.model, spec, 0, RowCodec::symmetric)?
        } else {
            identity_layouts(ctx.model, spec, 0, |s, b| Ok(RowCodec::rtn(s, b)))?
        };
        Ok(Prepared {
            model: ctx.model.clone(),
            policy: CachePolicy {
                layers,
                filters: Vec::new(),
            },
        })
    }
}

/// Per-channel smoothing by calibration maxima, then round-to-nearest.
pub struct SmoothStrategy {
    pub window: usize,
    pub sink: usize,
}

impl QuantStrategy for SmoothStrategy {
    fn name(&self) -> String {
        "smooth".into()
    }

    fn window(&self) -> usize {
        self.window
    }

    fn sink(&self) -> usize {
        self.sink
    }

    fn prepare(&self, ctx: &EvalContext<'_>, spec: &KvSpec) -> Result<Prepared> {
        let stats = ctx.captured()?.stats(ctx.model.config.kv_hidden())?;
        let plan = ReorderPlan::identity(&ctx.model.config, spec.key.group_size, spec.value.group_size)?;
        let layers = plan
            .layers
            .iter()
            .zip(&stats)
            .map(|(p, s)| {
                Ok(CacheLayout {
                    window: self.window,
                    key: RowCodec::smoothed(spec.key, p.key.boundaries.clone(), smoothing_factors(&s.key))?,
                    value: RowCodec::smoothed(spec.value, p.value.boundaries.clone(), smoothing_factors(&s.value))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Prepared {
            model: ctx.model.clone(),
            policy: CachePolicy {
                layers,
                filters: Vec::new(),
            }
            .with_sinks(self.sink),
        })
    }
}

/// SKVQ with each component switchable for ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SkvqStrategy {
    pub window: usize,
    pub clip: bool,
    pub reorder: bool,
    pub sink: usize,
    /// Store quantization parameters as FP8 (E4M3) regardless of the spec.
    pub fp8: bool,
}

impl SkvqStrategy {
    pub fn full(window: usize, sink: usize) -> Self {
        Self {
            window,
            clip: true,
            reorder: true,
            sink,
            fp8: false,
        }
    }

    pub fn effective_spec(&self, spec: &KvSpec) -> KvSpec {
        let fmt = |s: QuantSpec| QuantSpec {
            param_format: if self.fp8 { ParamFormat::Fp8E4M3 } else { s.param_format },
            ..s
        };
        KvSpec {
            key: fmt(spec.key),
            value: fmt(spec.value),
        }
    }
}

impl QuantStrategy for SkvqStrategy {
    fn name(&self) -> String {
        let mut s = String::from("skvq");
        if self.window > 0 {
            let _ = write!(s, "+window{}", self.window);
        }
        if self.clip {
            s.push_str("+clip");
        }
        if self.reorder {
            s.push_str("+reorder");
        }
        if self.sink > 0 {
            let _ = write!(s, "+sink{}", self.sink);
        }
        if self.fp8 {
            s.push_str("+fp8");
        }
        s
    }

    fn window(&self) -> usize {
        self.window
    }

    fn sink(&self) -> usize {
        self.sink
    }

    fn reported_spec(&self, spec: &KvSpec) -> KvSpec {
        self.effective_spec(spec)
    }

    fn prepare(&self, ctx: &EvalContext<'_>, spec: &KvSpec) -> Result<Prepared> {
        let spec = self.effective_spec(spec);
        let config = &ctx.model.config;
        let plan = if self.reorder {
            let stats = ctx.captured()?.stats(config.kv_hidden())?;
            ReorderPlan::from_stats(
                &stats,
                config.head_dim,
                spec.key.group_size,
                spec.value.group_size,
                ctx.seed,
            )?
        } else {
            ReorderPlan::identity(config, spec.key.group_size, spec.value.group_size)?
        };
        let model = ctx.model.fused(&plan)?;
        let schedule = if self.clip {
            let data = if self.reorder {
                CalibrationData::capture(&model, ctx.calib)?
            } else {
                ctx.captured()?.clone()
            };
            calibrate_alpha(&model, &plan, &spec, &data, &ctx.grid)?.0
        } else {
            ClipSchedule::ones(&plan, spec)
        };
        let policy = skvq_policy(&plan, &schedule, self.window, self.sink)?;
        Ok(Prepared { model, policy })
    }
}

/// Squared error sum and element count of one layer's attention output over
/// decode positions, with that layer's cache driven step by step from
/// full-precision attention inputs.
#[allow(clippy::too_many_arguments)]
pub fn layer_decode_error(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    wo: &Matrix,
    heads: &HeadLayout,
    layout: &CacheLayout,
    filters: &[Box<dyn FilterRule>],
    prefill: usize,
) -> Result<(f64, usize)> {
    let (qw, kw) = (heads.q_width(), heads.kv_width());
    let n = q.len() / qw;
    let prefill = prefill.clamp(1, n.max(1));
    let reference = matmul_rows(&attend(q, k, v, heads, 0)?, qw, wo)?;
    let mut cache = SlidingKvCache::new(layout.clone(), kw, kw)?;
    cache.append(&k[..prefill * kw], &v[..prefill * kw])?;
    cache.advance(filters)?;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for t in prefill..n {
        cache.append(&k[t * kw..(t + 1) * kw], &v[t * kw..(t + 1) * kw])?;
        let out = attend(&q[t * qw..(t + 1) * qw], cache.keys(), cache.values(), heads, t)?;
        let o = matmul_rows(&out, qw, wo)?;
        let r = &reference[t * wo.cols()..(t + 1) * wo.cols()];
        sum += o
            .iter()
            .zip(r)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum::<f64>();
        count += o.len();
        cache.advance(filters)?;
    }
    Ok((sum, count))
}

/// Mean attention-output MSE over every layer and sequence.
pub fn attention_mse(prepared: &Prepared, sequences: &[Vec<u32>], prefill: usize) -> Result<f64> {
    let model = &prepared.model;
    let c = &model.config;
    let heads = HeadLayout {
        n_heads: c.n_heads,
        n_kv_heads: c.n_kv_heads,
        head_dim: c.head_dim,
    };
    let (mut sum, mut count) = (0.0, 0usize);
    for seq in sequences {
        for t in capture_layer_traces(model, seq)? {
            let (s, n) = layer_decode_error(
                &t.q,
                &t.k,
                &t.v,
                &model.layers[t.layer].attn.wo,
                &heads,
                &prepared.policy.layers[t.layer],
                &prepared.policy.filters,
                prefill,
            )?;
            sum += s;
            count += n;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Evaluation sequences and the prefill length used for every metric.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalSuite {
    pub sequences: Vec<Vec<u32>>,
    pub prefill: usize,
}

impl EvalSuite {
    pub fn synthetic(count: usize, len: usize, vocab: usize, prefill: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            sequences: CalibrationSet::synthetic(count, len, vocab, seed)?.sequences,
            prefill,
        })
    }

    /// Sequences sampled from the model itself at temperature 1 with a full
    /// precision cache, so perplexity reflects how far a cache configuration
    /// moves the model away from its own distribution.
    pub fn sampled(model: &Model, count: usize, len: usize, prefill: usize, seed: u64) -> Result<Self> {
        if count == 0 || len < 2 {
            return Err(invalid("sampled suite needs at least one sequence of two tokens"));
        }
        let engine = Engine::reference(model)?;
        let vocab = model.config.vocab;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sequences = Vec::with_capacity(count);
        for _ in 0..count {
            let mut session = engine.new_session()?;
            let mut seq = vec![rng.random_range(0..vocab as u32)];
            while seq.len() < len {
                let logits = engine.forward(&mut session, &seq[seq.len() - 1..])?;
                let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let weights: Vec<f64> = logits.iter().map(|&l| f64::from(l - max).exp()).collect();
                let dist = WeightedIndex::new(&weights).map_err(|e| invalid(e.to_string()))?;
                seq.push(dist.sample(&mut rng) as u32);
            }
            sequences.push(seq);
        }
        Ok(Self { sequences, prefill })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub strategy: String,
    pub bits_key: Bits,
    pub bits_value: Bits,
    pub group_size: usize,
    pub window: usize,
    pub sink: usize,
    /// Bits per element measured from stored bytes of quantized rows.
    pub avg_bits: f64,
    pub mse: f64,
    pub ppl: f64,
}

/// Run one strategy under one spec.
pub fn evaluate_strategy(
    ctx: &EvalContext<'_>,
    suite: &EvalSuite,
    strategy: &dyn QuantStrategy,
    spec: &KvSpec,
) -> Result<ReportRow> {
    if suite.sequences.is_empty() {
        return Err(invalid("evaluation suite is empty"));
    }
    let prepared = strategy.prepare(ctx, spec)?;
    let mse = attention_mse(&prepared, &suite.sequences, suite.prefill)?;
    let engine = Engine::new(&prepared.model, prepared.policy)?;
    let kvh = prepared.model.config.kv_hidden();
    let (mut log_ppl, mut bytes, mut elements) = (0.0, 0usize, 0usize);
    for seq in &suite.sequences {
        let (ppl, session) = engine.perplexity_session(seq, suite.prefill)?;
        log_ppl += ppl.ln();
        let f = session.cache.footprint();
        bytes += f.key_quantized_bytes + f.value_quantized_bytes;
        elements += f.quantized_tokens * 2 * kvh;
    }
    let avg_bits = if elements == 0 {
        16.0
    } else {
        8.0 * bytes as f64 / elements as f64
    };
    let spec = strategy.reported_spec(spec);
    Ok(ReportRow {
        strategy: strategy.name(),
        bits_key: spec.key.bits,
        bits_value: spec.value.bits,
        group_size: spec.key.group_size,
        window: strategy.window(),
        sink: strategy.sink(),
        avg_bits,
        mse,
        ppl: (log_ppl / suite.sequences.len() as f64).exp(),
    })
}

/// Every strategy under every spec.
pub fn compare_strategies(
    ctx: &EvalContext<'_>,
    suite: &EvalSuite,
    strategies: &[Box<dyn QuantStrategy>],
    specs: &[KvSpec],
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for spec in specs {
        for s in strategies {
            rows.push(evaluate_strategy(ctx, suite, s.as_ref(), spec)?);
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "strategy,bits_key,bits_value,group_size,window,sink,avg_bits,mse,ppl";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.4},{:.6e},{:.4}",
            r.strategy, r.bits_key, r.bits_value, r.group_size, r.window, r.sink, r.avg_bits, r.mse, r.ppl
        );
    }
    s
}

pub fn report_text(rows: &[ReportRow]) -> String {
    let width = rows.iter().map(|r| r.strategy.len()).max().unwrap_or(8).max(8);
    let mut s = format!(
        "{:<width$} {:>4} {:>4} {:>5} {:>6} {:>4} {:>8} {:>12} {:>9}\n",
        "strategy", "K", "V", "group", "window", "sink", "avg bits", "mse", "ppl"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$} {:>4} {:>4} {:>5} {:>6} {:>4} {:>8.3} {:>12.4e} {:>9.3}",
            r.strategy,
            r.bits_key.to_string(),
            r.bits_value.to_string(),
            r.group_size,
            r.window,
            r.sink,
            r.avg_bits,
            r.mse,
            r.ppl
        );
    }
    s
}

/// Synthetic attention inputs with heterogeneous channels whose magnitude
/// also varies from token to token.
#[derive(Clone, Debug)]
pub struct AttentionFixture {
    pub heads: HeadLayout,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    pub wo: Matrix,
    pub tokens: usize,
}

impl AttentionFixture {
    pub fn channel_heterogeneous(tokens: usize, seed: u64) -> Self {
        let heads = HeadLayout {
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 32,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0f32, 1.0).unwrap();
        let kw = heads.kv_width();
        let channels = |rng: &mut ChaCha8Rng| -> Vec<(f32, f32)> {
            (0..kw)
                .map(|c| {
                    let mut scale = (0.8 * std.sample(rng)).exp();
                    if c % 11 == 5 {
                        scale *= 6.0;
                    }
                    (scale * std.sample(rng), scale)
                })
                .collect()
        };
        let key_channels = channels(&mut rng);
        let value_channels = channels(&mut rng);
        let rows = |ch: &[(f32, f32)], rng: &mut ChaCha8Rng| -> Vec<f32> {
            let mut out = Vec::with_capacity(tokens * kw);
            for _ in 0..tokens {
                let magnitude = (0.7 * std.sample(rng)).exp();
                out.extend(
                    ch.iter()
                        .map(|&(mean, scale)| mean + magnitude * scale * std.sample(rng)),
                );
            }
            out
        };
        let k = rows(&key_channels, &mut rng);
        let v = rows(&value_channels, &mut rng);
        let q: Vec<f32> = (0..tokens * heads.q_width())
            .map(|_| std.sample(&mut rng) * 0.5)
            .collect();
        let wo = Matrix::random_normal(
            heads.q_width(),
            heads.q_width(),
            1.0 / (heads.q_width() as f32).sqrt(),
            &mut rng,
        );
        Self {
            heads,
            q,
            k,
            v,
            wo,
            tokens,
        }
    }

    pub fn stats(&self, calib_tokens: usize) -> (ChannelStats, ChannelStats) {
        let kw = self.heads.kv_width();
        let n = calib_tokens.min(self.tokens) * kw;
        let mut k = ChannelStats::new(kw);
        let mut v = ChannelStats::new(kw);
        k.observe(&self.k[..n]).expect("fixture rows");
        v.observe(&self.v[..n]).expect("fixture rows");
        (k, v)
    }

    /// Attention-output MSE with every row of the evaluation tokens (those
    /// after `calib_tokens`) stored through the given codecs in original
    /// channel order, after gathering by the plans' permutations.
    pub fn output_mse(
        &self,
        key: (&CachePlan, &RowCodec),
        value: (&CachePlan, &RowCodec),
        calib_tokens: usize,
    ) -> Result<f64> {
        let (qw, kw) = (self.heads.q_width(), self.heads.kv_width());
        let start = calib_tokens.min(self.tokens);
        let n = self.tokens - start;
        let q = &self.q[start * qw..];
        let k = &self.k[start * kw..];
        let v = &self.v[start * kw..];
        let roundtrip = |rows: &[f32], plan: &CachePlan, codec: &RowCodec| -> Result<Vec<f32>> {
            let mut out = vec![0.0f32; rows.len()];
            for (src, dst) in rows.chunks_exact(kw).zip(out.chunks_exact_mut(kw)) {
                let gathered: Vec<f32> = plan.permutation.iter().map(|&i| src[i]).collect();
                let back = codec.decode(&codec.encode(&gathered)?)?;
                for (&i, x) in plan.permutation.iter().zip(back) {
                    dst[i] = x;
                }
            }
            Ok(out)
        };
        let kq = roundtrip(k, key.0, key.1)?;
        let vq = roundtrip(v, value.0, value.1)?;
        let reference = matmul_rows(&attend(q, k, v, &self.heads, 0)?, qw, &self.wo)?;
        let out = matmul_rows(&attend(q, &kq, &vq, &self.heads, 0)?, qw, &self.wo)?;
        let err: f64 = out
            .iter()
            .zip(&reference)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum();
        Ok(err / (n * qw) as f64)
    }
}

/// Reorder-versus-smoothing comparison on one fixture: returns
/// `(reorder_mse, smooth_mse)`. Statistics come from the first
/// `calib_tokens` tokens; errors are measured on the rest.
pub fn smooth_vs_reorder(
    fixture: &AttentionFixture,
    spec: &KvSpec,
    calib_tokens: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let hd = fixture.heads.head_dim;
    let kw = fixture.heads.kv_width();
    let (ks, vs) = fixture.stats(calib_tokens);
    let kp = plan_cache(&ks, hd, spec.key.group_size, seed)?;
    let vp = plan_cache(&vs, hd, spec.value.group_size, seed ^ 0x5555)?;
    let reorder_k = RowCodec::rtn(spec.key, kp.boundaries.clone());
    let reorder_v = RowCodec::rtn(spec.value, vp.boundaries.clone());
    let reorder = fixture.output_mse((&kp, &reorder_k), (&vp, &reorder_v), calib_tokens)?;

    let ik = CachePlan::identity(kw, hd, spec.key.group_size)?;
    let iv = CachePlan::identity(kw, hd, spec.value.group_size)?;
    let smooth_k = RowCodec::smoothed(spec.key, ik.boundaries.clone(), smoothing_factors(&ks))?;
    let smooth_v = RowCodec::smoothed(spec.value, iv.boundaries.clone(), smoothing_factors(&vs))?;
    let smooth = fixture.output_mse((&ik, &smooth_k), (&iv, &smooth_v), calib_tokens)?;
    Ok((reorder, smooth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> Model {
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
        Model::random(config, 9).unwrap()
    }

    fn two_bit() -> KvSpec {
        KvSpec::uniform(QuantSpec::new(Bits::Two, 4, ParamFormat::Fp16).unwrap())
    }

    #[test]
    fn lossless_spec_gives_zero_mse_for_every_strategy() {
        let model = small();
        let calib = CalibrationSet::synthetic(2, 16, 32, 1).unwrap();
        let ctx = EvalContext::new(&model, &calib, vec![0.9, 1.0], 3);
        let suite = EvalSuite::synthetic(2, 20, 32, 4, 2).unwrap();
        let strategies: Vec<Box<dyn QuantStrategy>> = vec![
            Box::new(FpStrategy),
            Box::new(RtnStrategy { symmetric: false }),
            Box::new(RtnStrategy { symmetric: true }),
            Box::new(SmoothStrategy { window: 0, sink: 0 }),
            Box::new(SkvqStrategy::full(4, 1)),
        ];
        let rows = compare_strategies(&ctx, &suite, &strategies, &[KvSpec::lossless()]).unwrap();
        let fp_ppl = rows[0].ppl;
        for r in &rows {
            assert_eq!(r.mse, 0.0, "{}", r.strategy);
            assert!((r.ppl - fp_ppl).abs() <= 1e-4 * fp_ppl, "{}", r.strategy);
        }
        let csv = report_csv(&rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn skvq_beats_rtn_and_reports_measured_bits() {
        let model = small();
        let calib = CalibrationSet::synthetic(2, 24, 32, 4).unwrap();
        let ctx = EvalContext::new(&model, &calib, crate::calibration::default_grid(), 5);
        let suite = EvalSuite::synthetic(2, 32, 32, 4, 6).unwrap();
        let rtn = evaluate_strategy(&ctx, &suite, &RtnStrategy { symmetric: false }, &two_bit()).unwrap();
        let skvq = evaluate_strategy(&ctx, &suite, &SkvqStrategy::full(8, 1), &two_bit()).unwrap();
        assert!(skvq.mse <= rtn.mse);
        assert!(rtn.mse > 0.0);
        // 2-bit codes with two FP16 params per 4 channels: 2 + 32/4 = 10 bits.
        assert!((rtn.avg_bits - 10.0).abs() < 1e-9, "{}", rtn.avg_bits);
    }

    #[test]
    fn sampled_suite_is_deterministic_and_likely_under_the_model() {
        let model = small();
        let a = EvalSuite::sampled(&model, 2, 24, 4, 8).unwrap();
        assert_eq!(a, EvalSuite::sampled(&model, 2, 24, 4, 8).unwrap());
        let engine = Engine::reference(&model).unwrap();
        let sampled = engine.perplexity(&a.sequences[0], 4).unwrap();
        let uniform = EvalSuite::synthetic(1, 24, 32, 4, 8).unwrap();
        assert!(sampled < engine.perplexity(&uniform.sequences[0], 4).unwrap());
    }

    #[test]
    fn strategy_names() {
        assert_eq!(SkvqStrategy::full(128, 5).name(), "skvq+window128+clip+reorder+sink5");
        let s = SkvqStrategy {
            fp8: true,
            ..SkvqStrategy::full(0, 0)
        };
        assert_eq!(s.name(), "skvq+clip+reorder+fp8");
        assert_eq!(s.effective_spec(&two_bit()).key.param_format, ParamFormat::Fp8E4M3);
    }

    #[test]
    fn fixture_is_deterministic() {
        let a = AttentionFixture::channel_heterogeneous(32, 1);
        let b = AttentionFixture::channel_heterogeneous(32, 1);
        assert_eq!(a.k, b.k);
        let spec = KvSpec::uniform(QuantSpec::new(Bits::Two, 8, ParamFormat::Fp16).unwrap());
        let (r, s) = smooth_vs_reorder(&a, &spec, 16, 2).unwrap();
        assert!(r > 0.0 && s > 0.0);
    }
}
