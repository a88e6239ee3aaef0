//! Sliding-window KV-cache quantization: group quantization with clipping,
//! channel reordering, calibrated clipping scales, a windowed cache with
//! filter rules, a toy attention engine, baselines and a roofline model.

pub mod artifact;
pub mod attention;
pub mod calibration;
pub mod codec;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod fp8;
pub mod io;
pub mod kmeans;
pub mod kv_cache;
pub mod model;
pub mod pack;
pub mod quant;
pub mod reorder;
pub mod roofline;
pub mod tensor;

pub use artifact::{CalibrationArtifact, CalibrationOptions};
pub use calibration::{CalibrationSet, ClipSchedule};
pub use codec::{RowCodec, StoredRow};
pub use config::{Command, RunConfig};
pub use engine::{CachePolicy, Engine, LayerTrace, Session};
pub use error::{Result, SkvqError};
pub use fp8::{fp8_decode, fp8_encode, Fp8E4M3};
pub use kv_cache::{AttentionSinkRule, CacheFootprint, CacheLayout, FilterRule, SequenceCache, SlidingKvCache};
pub use model::{Model, ModelConfig, ToyInit};
pub use pack::{pack_codes, unpack_codes};
pub use quant::{
    average_bits, dequantize_group, quantize_group, Bits, CacheKind, GroupParams, KvSpec, ParamFormat, QuantSpec,
    QuantizedBlock,
};
pub use reorder::{CachePlan, ChannelStats, LayerPlan, ReorderPlan};
