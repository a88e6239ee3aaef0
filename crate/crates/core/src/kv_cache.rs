//! Sliding-window quantized KV cache.
//!
//! The most recent `window` tokens are kept in full precision. Tokens that
//! slide out of the window are offered to the filter rules; a token any rule
//! retains stays full precision, every other token is quantized. `processed`
//! counts tokens that have already left the window.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::{RowCodec, StoredRow};
use crate::error::{format_err, shape, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SKVQ";
pub const SNAPSHOT_VERSION: u16 = 1;
const ROW_LIMIT: usize = 1 << 24;

/// Decides whether a token leaving the window stays full precision.
pub trait FilterRule: Send + Sync {
    fn name(&self) -> &str;
    fn retain(&self, token: usize, key: &[f32], value: &[f32], context_len: usize) -> bool;
}

/// Keeps the first `n_sink` tokens of the sequence in full precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSinkRule {
    pub n_sink: usize,
}

impl FilterRule for AttentionSinkRule {
    fn name(&self) -> &str {
        "attention-sink"
    }

    fn retain(&self, token: usize, _key: &[f32], _value: &[f32], _context_len: usize) -> bool {
        token < self.n_sink
    }
}

pub type Filters = [Box<dyn FilterRule>];

/// Window size and the key/value codecs of one layer's cache.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheLayout {
    pub window: usize,
    pub key: RowCodec,
    pub value: RowCodec,
}

impl CacheLayout {
    pub fn lossless() -> Self {
        Self {
            window: 0,
            key: RowCodec::Lossless,
            value: RowCodec::Lossless,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedToken {
    pub index: usize,
    pub key: StoredRow,
    pub value: StoredRow,
}

/// Byte accounting of a cache.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CacheFootprint {
    pub quantized_tokens: usize,
    pub fp_tokens: usize,
    pub key_quantized_bytes: usize,
    pub value_quantized_bytes: usize,
    /// Full-precision rows (retained and window) at 16 bits per element.
    pub fp_bytes: usize,
}

impl CacheFootprint {
    pub fn total_bytes(&self) -> usize {
        self.key_quantized_bytes + self.value_quantized_bytes + self.fp_bytes
    }

    /// Measured key-cache bits per element over quantized tokens.
    pub fn key_bits(&self, channels: usize) -> f64 {
        bits_per_element(self.key_quantized_bytes, self.quantized_tokens * channels)
    }

    pub fn value_bits(&self, channels: usize) -> f64 {
        bits_per_element(self.value_quantized_bytes, self.quantized_tokens * channels)
    }

    pub fn add(&mut self, other: &CacheFootprint) {
        self.quantized_tokens += other.quantized_tokens;
        self.fp_tokens += other.fp_tokens;
        self.key_quantized_bytes += other.key_quantized_bytes;
        self.value_quantized_bytes += other.value_quantized_bytes;
        self.fp_bytes += other.fp_bytes;
    }
}

fn bits_per_element(bytes: usize, elements: usize) -> f64 {
    if elements == 0 {
        0.0
    } else {
        8.0 * bytes as f64 / elements as f64
    }
}

/// One layer's KV cache for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SlidingKvCache {
    layout: CacheLayout,
    key_channels: usize,
    value_channels: usize,
    processed: usize,
    quantized: Vec<QuantizedToken>,
    retained: BTreeMap<usize, (Vec<f32>, Vec<f32>)>,
    // Materialized rows for every token: dequantized below `processed` unless
    // retained, exact full precision otherwise.
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl SlidingKvCache {
    pub fn new(layout: CacheLayout, key_channels: usize, value_channels: usize) -> Result<Self> {
        for (codec, c) in [(&layout.key, key_channels), (&layout.value, value_channels)] {
            if let Some(b) = codec.boundaries() {
                if b.last() != Some(&c) {
                    return Err(shape(format!(
                        "codec groups cover {:?} channels, cache has {c}",
                        b.last()
                    )));
                }
            }
        }
        if key_channels == 0 || value_channels == 0 {
            return Err(shape("cache rows need at least one channel"));
        }
        Ok(Self {
            layout,
            key_channels,
            value_channels,
            processed: 0,
            quantized: Vec::new(),
            retained: BTreeMap::new(),
            keys: Vec::new(),
            values: Vec::new(),
        })
    }

    pub fn layout(&self) -> &CacheLayout {
        &self.layout
    }

    pub fn window(&self) -> usize {
        self.layout.window
    }

    pub fn key_channels(&self) -> usize {
        self.key_channels
    }

    pub fn value_channels(&self) -> usize {
        self.value_channels
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.key_channels
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn processed(&self) -> usize {
        self.processed
    }

    /// Number of full-precision rows past `processed` (the window plus any
    /// not-yet-advanced rows).
    pub fn window_len(&self) -> usize {
        self.len() - self.processed
    }

    pub fn retained_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.retained.keys().copied()
    }

    pub fn quantized_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.quantized.iter().map(|t| t.index)
    }

    pub fn quantized_tokens(&self) -> &[QuantizedToken] {
        &self.quantized
    }

    /// Materialized keys, one row per token (read-only view).
    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Append full-precision rows (already in reordered channel order).
    pub fn append(&mut self, keys: &[f32], values: &[f32]) -> Result<()> {
        if !keys.len().is_multiple_of(self.key_channels) || !values.len().is_multiple_of(self.value_channels) {
            return Err(shape(format!(
                "rows of {}/{} values do not match {}/{} channels",
                keys.len(),
                values.len(),
                self.key_channels,
                self.value_channels
            )));
        }
        if keys.len() / self.key_channels != values.len() / self.value_channels {
            return Err(shape("key and value row counts differ"));
        }
        self.keys.extend_from_slice(keys);
        self.values.extend_from_slice(values);
        Ok(())
    }

    /// Quantize (or retain) every token that has left the window.
    pub fn advance(&mut self, filters: &Filters) -> Result<()> {
        let total = self.len();
        let target = total.saturating_sub(self.layout.window);
        let (kc, vc) = (self.key_channels, self.value_channels);
        for index in self.processed..target {
            let k = &self.keys[index * kc..(index + 1) * kc];
            let v = &self.values[index * vc..(index + 1) * vc];
            if filters.iter().any(|f| f.retain(index, k, v, total)) {
                self.retained.insert(index, (k.to_vec(), v.to_vec()));
                continue;
            }
            let key = self.layout.key.encode(k)?;
            let value = self.layout.value.encode(v)?;
            let kd = self.layout.key.decode(&key)?;
            let vd = self.layout.value.decode(&value)?;
            self.keys[index * kc..(index + 1) * kc].copy_from_slice(&kd);
            self.values[index * vc..(index + 1) * vc].copy_from_slice(&vd);
            self.quantized.push(QuantizedToken { index, key, value });
        }
        self.processed = self.processed.max(target);
        Ok(())
    }

    /// Full context in token order: dequantized history, exact retained and window rows.
    pub fn materialize(&self) -> (Vec<f32>, Vec<f32>) {
        (self.keys.clone(), self.values.clone())
    }

    pub fn footprint(&self) -> CacheFootprint {
        let mut f = CacheFootprint {
            quantized_tokens: self.quantized.len(),
            fp_tokens: self.retained.len() + self.window_len(),
            ..Default::default()
        };
        for t in &self.quantized {
            f.key_quantized_bytes += self.layout.key.stored_bytes(&t.key);
            f.value_quantized_bytes += self.layout.value.stored_bytes(&t.value);
        }
        f.fp_bytes = f.fp_tokens * (self.key_channels + self.value_channels) * 2;
        f
    }

    fn write(&self, w: &mut ByteWriter) {
        w.usize32(self.layout.window)
            .usize32(self.key_channels)
            .usize32(self.value_channels);
        self.layout.key.write(w);
        self.layout.value.write(w);
        w.usize32(self.len()).usize32(self.processed);
        w.usize32(self.quantized.len());
        for t in &self.quantized {
            w.usize32(t.index);
            self.layout.key.write_row(w, &t.key);
            self.layout.value.write_row(w, &t.value);
        }
        w.usize32(self.retained.len());
        for (&i, (k, v)) in &self.retained {
            w.usize32(i).f32s(k).f32s(v);
        }
        let (kc, vc) = (self.key_channels, self.value_channels);
        w.f32s(&self.keys[self.processed * kc..]);
        w.f32s(&self.values[self.processed * vc..]);
    }

    fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let window = r.usize32()?;
        let kc = r.len32(ROW_LIMIT)?;
        let vc = r.len32(ROW_LIMIT)?;
        let key = RowCodec::read(r, kc)?;
        let value = RowCodec::read(r, vc)?;
        let mut cache = Self::new(CacheLayout { window, key, value }, kc, vc)?;
        let total = r.len32(ROW_LIMIT)?;
        let processed = r.usize32()?;
        if processed > total {
            return Err(format_err("processed counter exceeds token count"));
        }
        cache.keys = vec![0.0; total * kc];
        cache.values = vec![0.0; total * vc];
        let mut seen = vec![false; processed];
        let mut mark = |i: usize| -> Result<()> {
            if i >= processed || std::mem::replace(&mut seen[i], true) {
                return Err(format_err(format!(
                    "token {i} stored twice or past the processed range"
                )));
            }
            Ok(())
        };

        let n_quantized = r.len32(total)?;
        for _ in 0..n_quantized {
            let index = r.usize32()?;
            mark(index)?;
            let k = cache.layout.key.read_row(r, kc)?;
            let v = cache.layout.value.read_row(r, vc)?;
            let kd = cache.layout.key.decode(&k)?;
            let vd = cache.layout.value.decode(&v)?;
            if kd.len() != kc || vd.len() != vc {
                return Err(format_err("stored row width does not match the cache"));
            }
            cache.keys[index * kc..(index + 1) * kc].copy_from_slice(&kd);
            cache.values[index * vc..(index + 1) * vc].copy_from_slice(&vd);
            cache.quantized.push(QuantizedToken {
                index,
                key: k,
                value: v,
            });
        }
        let n_retained = r.len32(total)?;
        for _ in 0..n_retained {
            let index = r.usize32()?;
            mark(index)?;
            let k = r.f32s(kc)?;
            let v = r.f32s(vc)?;
            cache.keys[index * kc..(index + 1) * kc].copy_from_slice(&k);
            cache.values[index * vc..(index + 1) * vc].copy_from_slice(&v);
            cache.retained.insert(index, (k, v));
        }
        if seen.iter().any(|s| !s) {
            return Err(format_err("processed token missing from snapshot"));
        }
        let tail = total - processed;
        let k = r.f32s(tail * kc)?;
        let v = r.f32s(tail * vc)?;
        cache.keys[processed * kc..].copy_from_slice(&k);
        cache.values[processed * vc..].copy_from_slice(&v);
        cache.processed = processed;
        Ok(cache)
    }
}

/// The per-layer caches of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceCache {
    pub layers: Vec<SlidingKvCache>,
}

impl SequenceCache {
    pub fn new(layers: Vec<SlidingKvCache>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, SlidingKvCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn footprint(&self) -> CacheFootprint {
        let mut total = CacheFootprint::default();
        for l in &self.layers {
            total.add(&l.footprint());
        }
        total
    }

    /// Snapshot layout: magic `SKVQ`, version `u16`, layer count, one stream per
    /// layer (codecs with their quantization specs, counters, quantized rows
    /// with packed codes and encoded parameters, retained rows and window rows
    /// as `f32`), trailing CRC32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(SNAPSHOT_MAGIC).u16(SNAPSHOT_VERSION).usize32(self.layers.len());
        for l in &self.layers {
            l.write(&mut w);
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::with_crc(bytes)?;
        r.expect_magic(SNAPSHOT_MAGIC)?;
        let version = r.u16()?;
        if version != SNAPSHOT_VERSION {
            return Err(format_err(format!("unsupported snapshot version {version}")));
        }
        let n = r.len32(1 << 16)?;
        let layers = (0..n).map(|_| SlidingKvCache::read(&mut r)).collect::<Result<_>>()?;
        r.finish()?;
        Ok(Self { layers })
    }

    pub fn snapshot(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn restore(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
