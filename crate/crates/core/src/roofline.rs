//! Analytical memory and decode-latency model.
//!
//! Sizes use binary thousands for sequence lengths (`128k = 131072`) and
//! decimal gigabytes (`1 GB = 1e9 bytes`).

use std::fmt::Write as _;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hardware {
    /// Peak dense throughput, FLOP/s.
    pub peak_flops: f64,
    /// Memory bandwidth, bytes/s.
    pub bandwidth: f64,
    /// Device memory, bytes.
    pub capacity: f64,
}

impl Hardware {
    /// A100-80GB: 312 TFLOP/s FP16 dense, 2.039 TB/s HBM.
    pub fn a100_80gb() -> Self {
        Self {
            peak_flops: 312e12,
            bandwidth: 2.039e12,
            capacity: 80e9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelShape {
    pub n_layers: usize,
    pub hidden: usize,
    /// `n_kv_heads * head_dim`.
    pub kv_hidden: usize,
    /// `n_heads / n_kv_heads`.
    pub heads_ratio: usize,
    pub weight_count: f64,
    pub weight_bits: f64,
}

impl ModelShape {
    /// Llama-7B: 32 layers, hidden 4096, multi-head attention, 6.74e9 FP16 weights.
    pub fn llama_7b() -> Self {
        Self {
            n_layers: 32,
            hidden: 4096,
            kv_hidden: 4096,
            heads_ratio: 1,
            weight_count: 6.74e9,
            weight_bits: 16.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RooflineConfig {
    pub hardware: Hardware,
    pub model: ModelShape,
    pub batch: usize,
    pub seq: usize,
    /// Average stored bits per KV element.
    pub kv_bits: f64,
    /// Extra bytes moved per decode step (activations); zero by default.
    pub activation_bytes: f64,
}

impl RooflineConfig {
    pub fn new(model: ModelShape, batch: usize, seq: usize, kv_bits: f64) -> Self {
        Self {
            hardware: Hardware::a100_80gb(),
            model,
            batch,
            seq,
            kv_bits,
            activation_bytes: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hardware;
        let m = &self.model;
        let positive = [
            h.peak_flops,
            h.bandwidth,
            h.capacity,
            m.weight_count,
            m.weight_bits,
            self.kv_bits,
        ];
        if positive.iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(invalid("roofline quantities must be positive"));
        }
        if m.n_layers == 0
            || m.hidden == 0
            || m.kv_hidden == 0
            || m.heads_ratio == 0
            || self.batch == 0
            || self.seq == 0
        {
            return Err(invalid("roofline shapes must be positive"));
        }
        if self.kv_bits > 16.0 {
            return Err(invalid(format!("kv bits {} above 16", self.kv_bits)));
        }
        if self.activation_bytes.is_nan() || self.activation_bytes < 0.0 {
            return Err(invalid("activation bytes must be non-negative"));
        }
        Ok(())
    }
}

/// `batch * seq * layers * 2 * kv_hidden * bits / 8`.
pub fn kv_bytes(cfg: &RooflineConfig) -> f64 {
    cfg.batch as f64 * cfg.seq as f64 * cfg.model.n_layers as f64 * 2.0 * cfg.model.kv_hidden as f64 * cfg.kv_bits / 8.0
}

pub fn weight_bytes(cfg: &RooflineConfig) -> f64 {
    cfg.model.weight_count * cfg.model.weight_bits / 8.0
}

/// Bytes moved by one decode step.
pub fn memory_access(cfg: &RooflineConfig) -> f64 {
    weight_bytes(cfg) + kv_bytes(cfg) + cfg.activation_bytes
}

/// Resident bytes: weights, KV cache and activations.
pub fn memory_consumption(cfg: &RooflineConfig) -> f64 {
    weight_bytes(cfg) + kv_bytes(cfg) + cfg.activation_bytes
}

/// FLOPs of one decode step: `2 * batch * (weights + seq * layers * 2 * kv_hidden * heads_ratio)`.
pub fn decode_flops(cfg: &RooflineConfig) -> f64 {
    let m = &cfg.model;
    let attention = cfg.seq as f64 * m.n_layers as f64 * 2.0 * m.kv_hidden as f64 * m.heads_ratio as f64;
    2.0 * cfg.batch as f64 * (m.weight_count + attention)
}

pub fn compute_time(cfg: &RooflineConfig) -> f64 {
    decode_flops(cfg) / cfg.hardware.peak_flops
}

pub fn memory_time(cfg: &RooflineConfig) -> f64 {
    memory_access(cfg) / cfg.hardware.bandwidth
}

/// Seconds per decode step: the larger of the compute and memory bounds.
pub fn decode_step_latency(cfg: &RooflineConfig) -> f64 {
    compute_time(cfg).max(memory_time(cfg))
}

pub fn speedup(a: &RooflineConfig, b: &RooflineConfig) -> f64 {
    decode_step_latency(a) / decode_step_latency(b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RooflineRow {
    pub batch: usize,
    pub seq: usize,
    pub kv_bits: f64,
    pub latency: f64,
    pub memory_access: f64,
    pub memory_consumption: f64,
    pub memory_bound: bool,
}

/// Batch sizes, sequence lengths and KV bit widths to tabulate.
#[derive(Clone, Debug, PartialEq)]
pub struct RooflineGrid {
    pub batches: Vec<usize>,
    pub seqs: Vec<usize>,
    pub kv_bits: Vec<f64>,
}

impl Default for RooflineGrid {
    fn default() -> Self {
        Self {
            batches: vec![1, 64, 128],
            seqs: vec![32 * 1024, 128 * 1024, 200 * 1024],
            kv_bits: vec![16.0, 4.0, 2.0],
        }
    }
}

pub fn report_table(model: ModelShape, hardware: Hardware, grid: &RooflineGrid) -> Result<Vec<RooflineRow>> {
    if grid.batches.is_empty() || grid.seqs.is_empty() || grid.kv_bits.is_empty() {
        return Err(invalid("roofline grid is empty"));
    }
    let mut rows = Vec::new();
    for &batch in &grid.batches {
        for &seq in &grid.seqs {
            for &kv_bits in &grid.kv_bits {
                let cfg = RooflineConfig {
                    hardware,
                    ..RooflineConfig::new(model, batch, seq, kv_bits)
                };
                cfg.validate()?;
                rows.push(RooflineRow {
                    batch,
                    seq,
                    kv_bits,
                    latency: decode_step_latency(&cfg),
                    memory_access: memory_access(&cfg),
                    memory_consumption: memory_consumption(&cfg),
                    memory_bound: memory_time(&cfg) >= compute_time(&cfg),
                });
            }
        }
    }
    Ok(rows)
}

fn seq_label(seq: usize) -> String {
    if seq.is_multiple_of(1024) {
        format!("{}k", seq / 1024)
    } else {
        seq.to_string()
    }
}

fn bits_label(bits: f64) -> String {
    if bits >= 16.0 {
        "FP16".into()
    } else {
        format!("KV{bits}")
    }
}

pub fn table_csv(rows: &[RooflineRow]) -> String {
    let mut s = String::from("batch,seq,kv_bits,latency_s,memory_access_gb,memory_consumption_gb,bound\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.3},{:.3},{}",
            r.batch,
            r.seq,
            r.kv_bits,
            r.latency,
            r.memory_access / 1e9,
            r.memory_consumption / 1e9,
            if r.memory_bound { "memory" } else { "compute" }
        );
    }
    s
}

pub fn table_text(rows: &[RooflineRow]) -> String {
    let mut s = format!(
        "{:>6} {:>6} {:>6} {:>12} {:>14} {:>14}\n",
        "batch", "seq", "kv", "time (s)", "access (GB)", "memory (GB)"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6} {:>6} {:>6} {:>12.4} {:>14.1} {:>14.1}",
            r.batch,
            seq_label(r.seq),
            bits_label(r.kv_bits),
            r.latency,
            r.memory_access / 1e9,
            r.memory_consumption / 1e9
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kv_bits: f64) -> RooflineConfig {
        let shape = ModelShape {
            n_layers: 1,
            hidden: 1,
            kv_hidden: 1,
            heads_ratio: 1,
            weight_count: 1.0,
            weight_bits: 16.0,
        };
        RooflineConfig::new(shape, 1, 1, kv_bits)
    }

    #[test]
    fn single_element_cache_is_four_bytes() {
        assert_eq!(kv_bytes(&tiny(16.0)), 4.0);
    }

    #[test]
    fn two_bit_is_an_eighth() {
        let a = RooflineConfig::new(ModelShape::llama_7b(), 128, 200 * 1024, 16.0);
        let b = RooflineConfig { kv_bits: 2.0, ..a };
        assert_eq!(kv_bytes(&b) * 8.0, kv_bytes(&a));
    }

    #[test]
    fn identical_configs_have_unit_speedup() {
        let a = RooflineConfig::new(ModelShape::llama_7b(), 8, 4096, 3.0);
        assert_eq!(speedup(&a, &a), 1.0);
    }

    #[test]
    fn infinite_bandwidth_is_compute_bound() {
        let mut a = RooflineConfig::new(ModelShape::llama_7b(), 8, 4096, 16.0);
        a.hardware.bandwidth = f64::INFINITY;
        assert_eq!(decode_step_latency(&a), decode_flops(&a) / a.hardware.peak_flops);
    }

    #[test]
    fn latency_dominates_both_bounds() {
        for bits in [16.0, 4.0, 2.25] {
            let a = RooflineConfig::new(ModelShape::llama_7b(), 4, 1000, bits);
            assert!(decode_step_latency(&a) >= compute_time(&a));
            assert!(decode_step_latency(&a) >= memory_time(&a));
        }
    }

    #[test]
    fn validation() {
        assert!(tiny(17.0).validate().is_err());
        assert!(tiny(0.0).validate().is_err());
        assert!(RooflineConfig { batch: 0, ..tiny(2.0) }.validate().is_err());
        tiny(2.0).validate().unwrap();
    }

    #[test]
    fn default_table_is_monotone_in_seq() {
        let rows = report_table(ModelShape::llama_7b(), Hardware::a100_80gb(), &RooflineGrid::default()).unwrap();
        assert_eq!(rows.len(), 27);
        for a in &rows {
            for b in &rows {
                if a.batch == b.batch && a.kv_bits == b.kv_bits && a.seq < b.seq {
                    assert!(a.memory_consumption < b.memory_consumption);
                }
            }
        }
        assert_eq!(table_csv(&rows).lines().count(), 28);
        assert!(table_text(&rows).contains("200k"));
    }
}
