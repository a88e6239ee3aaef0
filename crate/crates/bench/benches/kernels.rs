use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use skvq_core::attention::{attend, HeadLayout};
use skvq_core::reorder::plan_cache;
use skvq_core::*;

fn data(n: usize, salt: f32) -> Vec<f32> {
    (0..n)
        .map(|i| ((i as f32 * 0.618 + salt).sin() * 3.0) + (i % 7) as f32 * 0.1)
        .collect()
}

fn quantization(c: &mut Criterion) {
    let row = data(4096, 0.3);
    let mut g = c.benchmark_group("quantize");
    g.throughput(Throughput::Elements(row.len() as u64));
    for (name, bits, format) in [
        ("2bit_fp16", Bits::Two, ParamFormat::Fp16),
        ("2bit_fp8", Bits::Two, ParamFormat::Fp8E4M3),
        ("ternary_fp8", Bits::Ternary, ParamFormat::Fp8E4M3),
    ] {
        let spec = QuantSpec::new(bits, 128, format).unwrap();
        let bounds: Vec<usize> = (0..=32).map(|i| i * 128).collect();
        let codec = RowCodec::clipped(spec, bounds, vec![0.9; 32]).unwrap();
        let stored = codec.encode(&row).unwrap();
        g.bench_function(format!("encode_{name}"), |b| {
            b.iter(|| codec.encode(black_box(&row)).unwrap())
        });
        g.bench_function(format!("decode_{name}"), |b| {
            b.iter(|| codec.decode(black_box(&stored)).unwrap())
        });
    }
    g.finish();

    let codes: Vec<u8> = (0..4096).map(|i| (i % 3) as u8).collect();
    c.bench_function("pack_ternary_4096", |b| {
        b.iter(|| pack_codes(black_box(&codes), Bits::Ternary).unwrap())
    });
    c.bench_function("fp8_encode_4096", |b| {
        b.iter(|| row.iter().map(|&x| fp8_encode(black_box(x)) as u32).sum::<u32>())
    });
}

fn cache(c: &mut Criterion) {
    let width = 256;
    let spec = QuantSpec::new(Bits::Two, 32, ParamFormat::Fp8E4M3).unwrap();
    let bounds: Vec<usize> = (0..=8).map(|i| i * 32).collect();
    let layout = CacheLayout {
        window: 128,
        key: RowCodec::rtn(spec, bounds.clone()),
        value: RowCodec::rtn(spec, bounds),
    };
    let rows = data(width * 512, 1.1);
    let filters: Vec<Box<dyn FilterRule>> = vec![Box::new(AttentionSinkRule { n_sink: 5 })];
    c.bench_function("cache_prefill_512_then_advance", |b| {
        b.iter_batched(
            || SlidingKvCache::new(layout.clone(), width, width).unwrap(),
            |mut cache| {
                cache.append(&rows, &rows).unwrap();
                cache.advance(&filters).unwrap();
                cache
            },
            BatchSize::SmallInput,
        )
    });
}

fn attention(c: &mut Criterion) {
    let layout = HeadLayout {
        n_heads: 8,
        n_kv_heads: 2,
        head_dim: 64,
    };
    let ctx = 1024;
    let keys = data(ctx * layout.kv_width(), 0.2);
    let values = data(ctx * layout.kv_width(), 0.7);
    let q = data(layout.q_width(), 0.5);
    c.bench_function("decode_attention_ctx1024", |b| {
        b.iter(|| attend(black_box(&q), &keys, &values, &layout, ctx - 1).unwrap())
    });

    let mut stats = ChannelStats::new(128);
    stats.observe(&data(128 * 64, 2.0)).unwrap();
    c.bench_function("reorder_plan_128ch", |b| {
        b.iter(|| plan_cache(black_box(&stats), 64, 16, 0).unwrap())
    });
}

criterion_group!(benches, quantization, cache, attention);
criterion_main!(benches);
