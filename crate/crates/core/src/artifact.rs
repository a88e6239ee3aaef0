//! Calibration artifact: reorder plan, clipping schedule and smoothing
//! factors bound to one model checksum.
//!
//! Layout (little endian):
//!
//! ```text
//! "SKVC" | version u16 | model checksum u32
//! key spec (bits u8, group u32, format u8) | value spec
//! flags u8 (bit 0 reorder, bit 1 clip) | seed u64 | grid: u32 n, f32 x n
//! layers u32
//! per layer, key then value: channels u32, permutation u32 x C,
//!                             boundaries u32 n, u32 x n
//! plan CRC32 u32
//! per layer: key alphas f32 x G_k, value alphas f32 x G_v
//! per layer: key factors f32 x C, value factors f32 x C
//! CRC32 of everything above
//! ```

use std::path::Path;

use crate::calibration::{
    calibrate_alpha, smoothing_factors, validate_grid, CalibrationData, CalibrationReport, CalibrationSet,
    ClipSchedule, LayerClip,
};
use crate::engine::CachePolicy;
use crate::error::{format_err, Result, SkvqError};
use crate::eval::skvq_policy;
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::model::Model;
use crate::quant::{Bits, KvSpec, ParamFormat, QuantSpec};
use crate::reorder::{CachePlan, LayerPlan, ReorderPlan};

pub const ARTIFACT_MAGIC: &[u8; 4] = b"SKVC";
pub const ARTIFACT_VERSION: u16 = 1;
const LIMIT: usize = 1 << 24;

/// Settings of one calibration run.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationOptions {
    pub spec: KvSpec,
    pub grid: Vec<f32>,
    pub seed: u64,
    pub reorder: bool,
    pub clip: bool,
}

/// Per-layer smoothing factors for keys and values, in original channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSmoothing {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationArtifact {
    pub model_checksum: u32,
    pub options: CalibrationOptions,
    pub plan: ReorderPlan,
    pub schedule: ClipSchedule,
    pub smoothing: Vec<LayerSmoothing>,
}

impl CalibrationArtifact {
    /// Run the calibration prologue on `model`.
    pub fn calibrate(
        model: &Model,
        set: &CalibrationSet,
        options: CalibrationOptions,
    ) -> Result<(Self, CalibrationReport)> {
        validate_grid(&options.grid)?;
        let config = &model.config;
        let spec = options.spec;
        let data = CalibrationData::capture(model, set)?;
        let stats = data.stats(config.kv_hidden())?;
        let plan = if options.reorder {
            ReorderPlan::from_stats(
                &stats,
                config.head_dim,
                spec.key.group_size,
                spec.value.group_size,
                options.seed,
            )?
        } else {
            ReorderPlan::identity(config, spec.key.group_size, spec.value.group_size)?
        };
        let fused = model.fused(&plan)?;
        let grid: &[f32] = if options.clip { &options.grid } else { &[1.0] };
        let fused_data = if options.reorder {
            CalibrationData::capture(&fused, set)?
        } else {
            data
        };
        let (schedule, report) = calibrate_alpha(&fused, &plan, &spec, &fused_data, grid)?;
        let smoothing = stats
            .iter()
            .map(|s| LayerSmoothing {
                key: smoothing_factors(&s.key),
                value: smoothing_factors(&s.value),
            })
            .collect();
        let artifact = Self {
            model_checksum: model.checksum(),
            options,
            plan,
            schedule,
            smoothing,
        };
        Ok((artifact, report))
    }

    /// Fail unless the artifact was produced for `model`.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        let found = model.checksum();
        if found != self.model_checksum {
            return Err(SkvqError::Mismatch(format!(
                "artifact was calibrated for model {:#010x}, got {found:#010x}",
                self.model_checksum
            )));
        }
        self.plan
            .validate(&model.config)
            .map_err(|e| SkvqError::Mismatch(e.to_string()))
    }

    /// The reordered model and its cache policy.
    pub fn apply(&self, model: &Model, window: usize, n_sink: usize) -> Result<(Model, CachePolicy)> {
        self.check_model(model)?;
        let fused = model.fused(&self.plan)?;
        let policy = skvq_policy(&self.plan, &self.schedule, window, n_sink)?;
        Ok((fused, policy))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(ARTIFACT_MAGIC).u16(ARTIFACT_VERSION).u32(self.model_checksum);
        write_spec(&mut w, &self.options.spec.key);
        write_spec(&mut w, &self.options.spec.value);
        w.u8(u8::from(self.options.reorder) | (u8::from(self.options.clip) << 1))
            .u64(self.options.seed)
            .usize32(self.options.grid.len())
            .f32s(&self.options.grid);
        w.bytes(&plan_bytes(&self.plan))
            .u32(crc32fast::hash(&plan_bytes(&self.plan)));
        for l in &self.schedule.layers {
            w.f32s(&l.key).f32s(&l.value);
        }
        for s in &self.smoothing {
            w.f32s(&s.key).f32s(&s.value);
        }
        w.finish_with_crc()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::with_crc(bytes)?;
        r.expect_magic(ARTIFACT_MAGIC)?;
        let version = r.u16()?;
        if version != ARTIFACT_VERSION {
            return Err(format_err(format!("unsupported artifact version {version}")));
        }
        let model_checksum = r.u32()?;
        let spec = KvSpec {
            key: read_spec(&mut r)?,
            value: read_spec(&mut r)?,
        };
        let flags = r.u8()?;
        if flags > 3 {
            return Err(format_err(format!("unknown artifact flags {flags:#x}")));
        }
        let seed = r.u64()?;
        let n = r.len32(LIMIT)?;
        let grid = r.f32s(n)?;
        validate_grid(&grid).map_err(|e| format_err(e.to_string()))?;

        let plan_start = bytes.len() - r.remaining() - 4;
        let plan = read_plan(&mut r)?;
        let plan_end = bytes.len() - r.remaining() - 4;
        let expected = r.u32()?;
        let found = crc32fast::hash(&bytes[plan_start..plan_end]);
        if expected != found {
            return Err(SkvqError::Checksum { expected, found });
        }

        let layers = plan
            .layers
            .iter()
            .map(|p| {
                Ok(LayerClip {
                    key: r.f32s(p.key.n_groups())?,
                    value: r.f32s(p.value.n_groups())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let schedule = ClipSchedule { spec, layers };
        schedule.validate(&plan).map_err(|e| format_err(e.to_string()))?;
        let smoothing = plan
            .layers
            .iter()
            .map(|p| {
                Ok(LayerSmoothing {
                    key: r.f32s(p.key.channels())?,
                    value: r.f32s(p.value.channels())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            model_checksum,
            options: CalibrationOptions {
                spec,
                grid,
                seed,
                reorder: flags & 1 != 0,
                clip: flags & 2 != 0,
            },
            plan,
            schedule,
            smoothing,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Load and check the binding to `model` in one step.
    pub fn load_for(path: &Path, model: &Model) -> Result<Self> {
        let a = Self::load(path)?;
        a.check_model(model)?;
        Ok(a)
    }
}

fn write_spec(w: &mut ByteWriter, s: &QuantSpec) {
    w.u8(s.bits.code()).usize32(s.group_size).u8(s.param_format.code());
}

fn read_spec(r: &mut ByteReader<'_>) -> Result<QuantSpec> {
    let bits = Bits::from_code(r.u8()?).map_err(|e| format_err(e.to_string()))?;
    let group = r.usize32()?;
    let format = ParamFormat::from_code(r.u8()?).map_err(|e| format_err(e.to_string()))?;
    QuantSpec::new(bits, group, format).map_err(|e| format_err(e.to_string()))
}

fn plan_bytes(plan: &ReorderPlan) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.usize32(plan.layers.len());
    for l in &plan.layers {
        for p in [&l.key, &l.value] {
            w.usize32(p.permutation.len());
            for &i in &p.permutation {
                w.usize32(i);
            }
            w.usize32(p.boundaries.len());
            for &b in &p.boundaries {
                w.usize32(b);
            }
        }
    }
    w.into_inner()
}

fn read_plan(r: &mut ByteReader<'_>) -> Result<ReorderPlan> {
    let n = r.len32(1 << 16)?;
    let mut cache = || -> Result<CachePlan> {
        let c = r.len32(LIMIT)?;
        let permutation = (0..c).map(|_| r.usize32()).collect::<Result<_>>()?;
        let b = r.len32(c + 1)?;
        let boundaries = (0..b).map(|_| r.usize32()).collect::<Result<_>>()?;
        let plan = CachePlan {
            permutation,
            boundaries,
        };
        plan.validate(0).map_err(|e| format_err(e.to_string()))?;
        Ok(plan)
    };
    let layers = (0..n)
        .map(|_| {
            Ok(LayerPlan {
                key: cache()?,
                value: cache()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ReorderPlan { layers })
}
