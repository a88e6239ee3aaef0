//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (uncaptured) and then asserts.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skvq_core::calibration::{
    best_group_alpha, calibrate_alpha, default_grid, group_mse, CalibrationData, CalibrationSet,
};
use skvq_core::eval::{
    attention_mse, smooth_vs_reorder, AttentionFixture, EvalContext, EvalSuite, QuantStrategy, SkvqStrategy,
};
use skvq_core::fp8::{FP8_MAX, FP8_MAX_CODE, FP8_NAN};
use skvq_core::roofline::{kv_bytes, speedup, ModelShape, RooflineConfig};
use skvq_core::*;

fn report(id: u32, name: &str, pass: bool, started: Instant, detail: impl AsRef<str>) {
    let line = format!(
        "{} [{id:>2}] {name} ({:.2}s): {}",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64(),
        detail.as_ref()
    );
    let _ = writeln!(std::io::stderr(), "\n{line}");
    assert!(pass, "{line}");
}

fn spec(bits: Bits, group: usize, format: ParamFormat) -> QuantSpec {
    QuantSpec::new(bits, group, format).unwrap()
}

#[test]
fn c01_average_bits_golden_numbers() {
    let t = Instant::now();
    let a = average_bits(&spec(Bits::Two, 32, ParamFormat::Fp16));
    let b = average_bits(&spec(Bits::Two, 32, ParamFormat::Fp8E4M3));
    let c = average_bits(&spec(Bits::Two, 64, ParamFormat::Fp8E4M3));
    let pass = a == 3.0 && b == 2.5 && c == 2.25;
    report(
        1,
        "average bits",
        pass,
        t,
        format!("gs32/fp16 {a}, gs32/fp8 {b}, gs64/fp8 {c}"),
    );
}

fn random_permutation_plan(channels: usize, head_dim: usize, group: usize, rng: &mut ChaCha8Rng) -> CachePlan {
    let mut plan = CachePlan::identity(channels, head_dim, group).unwrap();
    for head in plan.permutation.chunks_mut(head_dim) {
        head.shuffle(rng);
    }
    plan
}

#[test]
fn c02_reorder_invariance() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut nontrivial = 0;
    for trial in 0..100u64 {
        let head_dim = [4usize, 8, 16][rng.random_range(0..3)];
        let n_kv_heads = rng.random_range(1..=2);
        let n_heads = n_kv_heads * rng.random_range(1..=2);
        let config = ModelConfig {
            n_layers: rng.random_range(1..=2),
            hidden: n_heads * head_dim,
            n_heads,
            n_kv_heads,
            head_dim,
            vocab: 48,
            ffn_hidden: 32,
            rope: rng.random_bool(0.5),
            ..ModelConfig::default()
        };
        let model = Model::random(config.clone(), trial).unwrap();
        let kvh = config.kv_hidden();
        let layers = (0..config.n_layers)
            .map(|_| LayerPlan {
                key: random_permutation_plan(kvh, head_dim, 4, &mut rng),
                value: random_permutation_plan(kvh, head_dim, 4, &mut rng),
            })
            .collect();
        let fused = model.fused(&ReorderPlan { layers }).unwrap();
        if fused != model {
            nontrivial += 1;
        }
        let len = rng.random_range(2..24);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..48)).collect();
        let base = Engine::reference(&model).unwrap();
        let perm = Engine::reference(&fused).unwrap();
        let a = base.forward(&mut base.new_session().unwrap(), &tokens).unwrap();
        let b = perm.forward(&mut perm.new_session().unwrap(), &tokens).unwrap();
        let scale = a.iter().fold(0.0f32, |m, x| m.max(x.abs())).max(f32::MIN_POSITIVE);
        let err = a.iter().zip(&b).fold(0.0f32, |m, (x, y)| m.max((x - y).abs())) / scale;
        worst = worst.max(f64::from(err));
        if err > 1e-5 {
            failures += 1;
        }
    }
    report(
        2,
        "reorder invariance",
        failures == 0 && nontrivial >= 95,
        t,
        format!("100 triples ({nontrivial} with permuted weights), worst relative deviation {worst:.2e}, {failures} over 1e-5"),
    );
}

#[test]
fn c03_round_trip_bound() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let widths = [
        Bits::One,
        Bits::Two,
        Bits::Three,
        Bits::Four,
        Bits::Eight,
        Bits::Ternary,
    ];
    let mut violations = 0usize;
    let mut worst = [0.0f64; 2];
    for i in 0..10_000 {
        let bits = widths[i % widths.len()];
        let format = if i % 2 == 0 {
            ParamFormat::Fp16
        } else {
            ParamFormat::Fp8E4M3
        };
        let n = rng.random_range(1..=128);
        let center: f32 = rng.random_range(-20.0..20.0);
        let spread: f32 = 10f32.powf(rng.random_range(-1.0..1.5));
        let values: Vec<f32> = (0..n)
            .map(|_| center + spread * rng.random_range(-1.0f32..1.0))
            .collect();
        let s = spec(bits, n, format);
        let (codes, p) = quantize_group(&values, 1.0, &s).unwrap();
        let back = dequantize_group(&codes, &p, bits).unwrap();
        let top = f32::from(bits.max_code());
        let bound = match format {
            ParamFormat::Fp16 => p.scale / 2.0,
            ParamFormat::Fp8E4M3 => p.scale / 2.0 * (1.0 + 0.125),
        };
        for (x, y) in values.iter().zip(&back) {
            let slack = 4.0 * f32::EPSILON * (x.abs() + p.zero.abs() + top * p.scale);
            let ratio = f64::from((x - y).abs() / p.scale);
            let k = usize::from(format == ParamFormat::Fp8E4M3);
            worst[k] = worst[k].max(ratio);
            if (x - y).abs() > bound + slack {
                violations += 1;
            }
        }
    }
    report(
        3,
        "round-trip bound",
        violations == 0,
        t,
        format!(
            "10000 groups, max |err|/h: fp16 {:.4}, fp8 {:.4}; {violations} violations",
            worst[0], worst[1]
        ),
    );
}

#[test]
fn c04_fp8_codec() {
    let t = Instant::now();
    let mut bad = Vec::new();
    for code in 0..=255u8 {
        let v = fp8_decode(code);
        if code & 0x7F == 0x7F {
            if !v.is_nan() {
                bad.push(format!("{code:#04x} should be NaN"));
            }
        } else if fp8_encode(v) != code {
            bad.push(format!("{code:#04x} -> {v} -> {:#04x}", fp8_encode(v)));
        }
    }
    let checks = [
        (
            fp8_decode(FP8_MAX_CODE) == FP8_MAX && FP8_MAX == 448.0,
            "max finite is 448",
        ),
        (fp8_encode(1e6) == FP8_MAX_CODE, "large values saturate"),
        (fp8_encode(-1e6) == 0x80 | FP8_MAX_CODE, "large negatives saturate"),
        (fp8_encode(f32::INFINITY) == FP8_MAX_CODE, "infinity saturates"),
        (fp8_encode(464.0) == FP8_MAX_CODE, "just above max saturates"),
        (fp8_encode(f32::NAN) == FP8_NAN, "NaN encodes to NaN"),
        (fp8_encode(-0.0) == 0x80, "negative zero keeps its sign"),
        (fp8_decode(0x01) == 2f32.powi(-9), "smallest subnormal"),
        (fp8_encode(1.0625) == 0x38, "tie rounds to even"),
    ];
    bad.extend(checks.iter().filter(|c| !c.0).map(|c| c.1.to_string()));
    report(
        4,
        "fp8 codec",
        bad.is_empty(),
        t,
        if bad.is_empty() {
            "256 codes exact, saturation and NaN as specified".to_string()
        } else {
            bad.join("; ")
        },
    );
}

#[test]
fn c05_windowed_cache_trace() {
    let t = Instant::now();
    let width = 8;
    let s = spec(Bits::Two, 4, ParamFormat::Fp16);
    let bounds = vec![0, 4, 8];
    let layout = CacheLayout {
        window: 4,
        key: RowCodec::rtn(s, bounds.clone()),
        value: RowCodec::rtn(s, bounds),
    };
    let filters: Vec<Box<dyn FilterRule>> = vec![Box::new(AttentionSinkRule { n_sink: 2 })];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows =
        |n: usize, rng: &mut ChaCha8Rng| -> Vec<f32> { (0..n * width).map(|_| rng.random_range(-3.0..3.0)).collect() };
    let k = rows(11, &mut rng);
    let v = rows(11, &mut rng);
    let mut cache = SlidingKvCache::new(layout, width, width).unwrap();
    let mut problems = Vec::new();

    let mut check = |cache: &SlidingKvCache, total: usize, quantized: Vec<usize>, processed: usize| {
        let retained: Vec<usize> = cache.retained_indices().collect();
        let q: Vec<usize> = cache.quantized_indices().collect();
        if retained != [0, 1] || q != quantized || cache.processed() != processed || cache.len() != total {
            problems.push(format!(
                "total {total}: retained {retained:?}, quantized {q:?}, processed {}",
                cache.processed()
            ));
        }
        let (mk, mv) = cache.materialize();
        for tok in (0..2).chain(total - 4..total) {
            let r = tok * width..(tok + 1) * width;
            if mk[r.clone()] != k[r.clone()] || mv[r.clone()] != v[r] {
                problems.push(format!("total {total}: token {tok} is not bit-exact"));
            }
        }
    };

    cache.append(&k[..10 * width], &v[..10 * width]).unwrap();
    cache.advance(&filters).unwrap();
    check(&cache, 10, vec![2, 3, 4, 5], 6);
    cache.append(&k[10 * width..], &v[10 * width..]).unwrap();
    cache.advance(&filters).unwrap();
    check(&cache, 11, vec![2, 3, 4, 5, 6], 7);
    report(
        5,
        "windowed cache trace",
        problems.is_empty(),
        t,
        if problems.is_empty() {
            "sinks {0,1}, quantized 2..=5 then 2..=6, processed 6 then 7, window exact".to_string()
        } else {
            problems.join("; ")
        },
    );
}

#[test]
fn c06_calibration_non_regression() {
    let t = Instant::now();
    let model = Model::random(ModelConfig::default(), 6).unwrap();
    let set = CalibrationSet::synthetic(4, 128, 256, 60).unwrap();
    let kv = KvSpec::uniform(spec(Bits::Two, 16, ParamFormat::Fp16));
    let data = CalibrationData::capture(&model, &set).unwrap();
    let plan = ReorderPlan::identity(&model.config, 16, 16).unwrap();
    let (schedule, rep) = calibrate_alpha(&model, &plan, &kv, &data, &default_grid()).unwrap();
    let layers_ok = rep.layers.iter().all(|l| l.after <= l.before);
    let clipped = schedule
        .layers
        .iter()
        .flat_map(|l| l.key.iter().chain(&l.value))
        .filter(|&&a| a < 1.0)
        .count();

    let mut group: Vec<f32> = (0..63).map(|i| i as f32 / 62.0).collect();
    group.push(4.0);
    let gs = spec(Bits::Two, 64, ParamFormat::Fp16);
    let (alpha, err) = best_group_alpha(&group, &default_grid(), &gs).unwrap();
    let full = group_mse(&group, 1.0, &gs).unwrap();
    let outlier_ok = alpha < 1.0 && err < full;

    let losses: Vec<String> = rep
        .layers
        .iter()
        .map(|l| format!("{:.4e}->{:.4e}", l.before, l.after))
        .collect();
    report(
        6,
        "calibration non-regression",
        layers_ok && outlier_ok,
        t,
        format!(
            "layer loss {}; {clipped} groups clipped; outlier group alpha {alpha} mse {err:.4} < {full:.4}",
            losses.join(", ")
        ),
    );
}

fn base() -> SkvqStrategy {
    SkvqStrategy {
        window: 0,
        clip: false,
        reorder: false,
        sink: 0,
        fp8: false,
    }
}

#[test]
fn c07_ablation_direction() {
    let t = Instant::now();
    let kv = KvSpec::uniform(spec(Bits::Two, 16, ParamFormat::Fp16));
    let chain = [
        ("rtn", base()),
        ("+window128", SkvqStrategy { window: 128, ..base() }),
        (
            "+clip",
            SkvqStrategy {
                window: 128,
                clip: true,
                ..base()
            },
        ),
        (
            "+reorder",
            SkvqStrategy {
                window: 128,
                clip: true,
                reorder: true,
                ..base()
            },
        ),
        (
            "+fp8",
            SkvqStrategy {
                window: 128,
                clip: true,
                reorder: true,
                fp8: true,
                ..base()
            },
        ),
    ];
    let mut mse = [[0.0f64; 5]; 5];
    for seed in 0..5u64 {
        let model = Model::random(ModelConfig::default(), seed).unwrap();
        let calib = CalibrationSet::synthetic(4, 128, 256, 100 + seed).unwrap();
        let ctx = EvalContext::new(&model, &calib, default_grid(), seed);
        let suite = EvalSuite::synthetic(3, 320, 256, 16, 200 + seed).unwrap();
        for (i, (_, s)) in chain.iter().enumerate() {
            let prepared = s.prepare(&ctx, &kv).unwrap();
            mse[seed as usize][i] = attention_mse(&prepared, &suite.sequences, suite.prefill).unwrap();
        }
    }
    let mean: Vec<f64> = (0..5).map(|i| mse.iter().map(|r| r[i]).sum::<f64>() / 5.0).collect();
    let monotone = mean[..4].windows(2).all(|w| w[1] <= w[0]);
    let fp8_change = mean[4] / mean[3] - 1.0;
    let per_seed: Vec<String> = mse
        .iter()
        .map(|r| {
            format!(
                "[{}]",
                r.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
            )
        })
        .collect();
    let steps: Vec<String> = chain
        .iter()
        .zip(&mean)
        .map(|((n, _), m)| format!("{n} {m:.4}"))
        .collect();
    report(
        7,
        "ablation direction",
        monotone && fp8_change.abs() <= 0.02,
        t,
        format!(
            "mean mse {}; fp8 vs fp16 {:+.2}%; per seed {}",
            steps.join(" > "),
            100.0 * fp8_change,
            per_seed.join(" ")
        ),
    );
}

#[test]
fn c08_roofline() {
    let t = Instant::now();
    let llama = ModelShape::llama_7b();
    let gb = |batch, seq, bits| kv_bytes(&RooflineConfig::new(llama, batch, seq, bits)) / 1e9;
    let big = gb(128, 200 * 1024, 16.0);
    let mid = gb(64, 128 * 1024, 16.0);
    let fp16 = RooflineConfig::new(llama, 128, 200 * 1024, 16.0);
    let low = RooflineConfig::new(llama, 128, 200 * 1024, 2.25);
    let s = speedup(&fp16, &low);
    let within = |x: f64, target: f64| (x / target - 1.0).abs() <= 0.15;
    report(
        8,
        "roofline",
        within(big, 13_400.0) && within(mid, 4_300.0) && (s - 7.1).abs() <= 0.5,
        t,
        format!("KV {big:.0} GB (13400), {mid:.0} GB (4300), FP16 -> 2.25 bit speedup {s:.2}x"),
    );
}

#[test]
fn c09_smoothing_vs_reorder() {
    let t = Instant::now();
    let kv = KvSpec::uniform(spec(Bits::Two, 16, ParamFormat::Fp16));
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let fixture = AttentionFixture::channel_heterogeneous(512, seed);
        let (reorder, smooth) = smooth_vs_reorder(&fixture, &kv, 256, seed).unwrap();
        if reorder <= smooth {
            wins += 1;
        }
        detail.push(format!("{reorder:.3e}/{smooth:.3e}"));
    }
    report(
        9,
        "smoothing vs reorder",
        wins >= 4,
        t,
        format!("reorder wins {wins}/5 (reorder/smooth mse: {})", detail.join(", ")),
    );
}

#[test]
fn c10_lossless_identity() {
    let t = Instant::now();
    let model = Model::random(ModelConfig::default(), 10).unwrap();
    let reference = Engine::reference(&model).unwrap();
    let config = &model.config;
    let plan = ReorderPlan::identity(config, 16, 16).unwrap();
    let full = ClipSchedule::ones(&plan, KvSpec::lossless());
    let two = ClipSchedule::ones(&plan, KvSpec::uniform(spec(Bits::Two, 16, ParamFormat::Fp8E4M3)));
    let lossless = Engine::new(&model, skvq_core::eval::skvq_policy(&plan, &full, 0, 0).unwrap()).unwrap();
    let wide = Engine::new(&model, skvq_core::eval::skvq_policy(&plan, &two, 64, 0).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    for _ in 0..20 {
        let len = rng.random_range(1..=32);
        let prompt: Vec<u32> = (0..len).map(|_| rng.random_range(0..config.vocab as u32)).collect();
        let expect = reference.generate(&prompt, 24).unwrap();
        if lossless.generate(&prompt, 24).unwrap() != expect {
            mismatches += 1;
        }
        // Context is at most 56 tokens, inside the 64-token window.
        if wide.generate(&prompt, 24).unwrap() != expect {
            mismatches += 1;
        }
    }
    report(
        10,
        "lossless identity",
        mismatches == 0,
        t,
        format!("20 prompts x (16-bit, window >= context): {mismatches} mismatches"),
    );
}
