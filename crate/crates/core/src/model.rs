//! Toy decoder-only transformer: configuration, weights, and the `SKVM` file
//! format.
//!
//! File layout (little-endian): magic `SKVM`, version `u16`, config header,
//! tensor count `u32`, then a table of `(name_len u16, name, ndim u8, dims u32..,
//! offset u64)` entries, then raw `f32` tensor data. Offsets are relative to the
//! start of the data section.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{format_err, invalid, shape, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::tensor::Matrix;

pub const MODEL_MAGIC: &[u8; 4] = b"SKVM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub ffn_hidden: usize,
    pub rope: bool,
    pub rope_base: f32,
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    /// Desk-scale grouped-query model used by the CLI and the test suites.
    fn default() -> Self {
        Self {
            n_layers: 2,
            hidden: 128,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 32,
            vocab: 256,
            ffn_hidden: 256,
            rope: true,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.vocab == 0 || self.head_dim == 0 || self.n_kv_heads == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if self.hidden != self.n_heads * self.head_dim {
            return Err(invalid(format!(
                "hidden {} != n_heads {} * head_dim {}",
                self.hidden, self.n_heads, self.head_dim
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(invalid("n_heads must be a multiple of n_kv_heads"));
        }
        if self.rope && !self.head_dim.is_multiple_of(2) {
            return Err(invalid("rotary embedding needs an even head_dim"));
        }
        Ok(())
    }

    pub fn kv_hidden(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// Query heads per KV head.
    pub fn group_ratio(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

/// Projection weights of one attention block. Activations are row vectors, so a
/// projection is `x * W + b` and output channels are columns.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub bq: Vec<f32>,
    pub bk: Vec<f32>,
    pub bv: Vec<f32>,
    /// Original (pre-reorder) channel index of every stored key channel. The
    /// rotary embedding pairs channels through this map, so it is evaluated in
    /// original channel order even after the permutation is fused.
    pub key_channel_map: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn: AttentionWeights,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub lm_head: Matrix,
}

/// Key/value channel heterogeneity of randomly initialised models. Real KV caches
/// show a few channels with much larger ranges and per-channel offsets; the toy
/// model reproduces that so grouping and clipping have something to act on.
#[derive(Clone, Copy, Debug)]
pub struct ToyInit {
    pub key_scale_sigma: f32,
    pub value_scale_sigma: f32,
    pub outlier_every: usize,
    pub outlier_gain: f32,
    pub key_bias_std: f32,
    pub value_bias_std: f32,
    pub logit_gain: f32,
}

impl Default for ToyInit {
    fn default() -> Self {
        Self {
            key_scale_sigma: 0.8,
            value_scale_sigma: 0.6,
            outlier_every: 11,
            outlier_gain: 6.0,
            key_bias_std: 1.0,
            value_bias_std: 0.5,
            logit_gain: 3.0,
        }
    }
}

fn scale_columns(m: &mut Matrix, scales: &[f32]) {
    let cols = m.cols();
    for row in m.data_mut().chunks_exact_mut(cols) {
        for (v, s) in row.iter_mut().zip(scales) {
            *v *= s;
        }
    }
}

impl Model {
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::random_with(config, seed, ToyInit::default())
    }

    pub fn random_with(config: ModelConfig, seed: u64, init: ToyInit) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let kvh = config.kv_hidden();
        let proj_std = 1.0 / (d as f32).sqrt();
        let std_normal = Normal::new(0.0f32, 1.0).unwrap();

        let channel_scales = |sigma: f32, rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..kvh)
                .map(|c| {
                    let base = (sigma * std_normal.sample(rng)).exp();
                    if init.outlier_every > 0 && c % init.outlier_every == init.outlier_every / 2 {
                        base * init.outlier_gain
                    } else {
                        base
                    }
                })
                .collect()
        };

        let embed = Matrix::random_normal(config.vocab, d, 1.0, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wq = Matrix::random_normal(d, d, proj_std, &mut rng);
            let mut wk = Matrix::random_normal(d, kvh, proj_std, &mut rng);
            let mut wv = Matrix::random_normal(d, kvh, proj_std, &mut rng);
            let key_scales = channel_scales(init.key_scale_sigma, &mut rng);
            let value_scales = channel_scales(init.value_scale_sigma, &mut rng);
            scale_columns(&mut wk, &key_scales);
            scale_columns(&mut wv, &value_scales);
            let bk = key_scales
                .iter()
                .map(|s| s * init.key_bias_std * std_normal.sample(&mut rng))
                .collect();
            let bv = value_scales
                .iter()
                .map(|s| s * init.value_bias_std * std_normal.sample(&mut rng))
                .collect();
            let wo = Matrix::random_normal(d, d, proj_std, &mut rng);
            layers.push(LayerWeights {
                attn: AttentionWeights {
                    wq,
                    wk,
                    wv,
                    wo,
                    bq: vec![0.0; d],
                    bk,
                    bv,
                    key_channel_map: (0..kvh).collect(),
                },
                w_up: Matrix::random_normal(d, config.ffn_hidden, proj_std, &mut rng),
                w_down: Matrix::random_normal(config.ffn_hidden, d, 1.0 / (config.ffn_hidden as f32).sqrt(), &mut rng),
            });
        }
        let lm_head = Matrix::random_normal(d, config.vocab, init.logit_gain * proj_std, &mut rng);
        let model = Self {
            config,
            embed,
            layers,
            lm_head,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, kvh) = (c.hidden, c.kv_hidden());
        let check = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(shape(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(())
        };
        check("embed", &self.embed, c.vocab, d)?;
        check("lm_head", &self.lm_head, d, c.vocab)?;
        if self.layers.len() != c.n_layers {
            return Err(shape(format!(
                "{} layers, config says {}",
                self.layers.len(),
                c.n_layers
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let a = &l.attn;
            check(&format!("layers.{i}.wq"), &a.wq, d, d)?;
            check(&format!("layers.{i}.wk"), &a.wk, d, kvh)?;
            check(&format!("layers.{i}.wv"), &a.wv, d, kvh)?;
            check(&format!("layers.{i}.wo"), &a.wo, d, d)?;
            check(&format!("layers.{i}.w_up"), &l.w_up, d, c.ffn_hidden)?;
            check(&format!("layers.{i}.w_down"), &l.w_down, c.ffn_hidden, d)?;
            if a.bq.len() != d || a.bk.len() != kvh || a.bv.len() != kvh || a.key_channel_map.len() != kvh {
                return Err(shape(format!("layers.{i} bias or channel map has the wrong length")));
            }
        }
        Ok(())
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        fn mat(name: String, m: &Matrix) -> (String, Vec<usize>, &[f32]) {
            (name, vec![m.rows(), m.cols()], m.data())
        }
        out.push(mat("embed".into(), &self.embed));
        out.push(mat("lm_head".into(), &self.lm_head));
        for (i, l) in self.layers.iter().enumerate() {
            let a = &l.attn;
            out.push(mat(format!("layers.{i}.wq"), &a.wq));
            out.push(mat(format!("layers.{i}.wk"), &a.wk));
            out.push(mat(format!("layers.{i}.wv"), &a.wv));
            out.push(mat(format!("layers.{i}.wo"), &a.wo));
            out.push((format!("layers.{i}.bq"), vec![a.bq.len()], &a.bq));
            out.push((format!("layers.{i}.bk"), vec![a.bk.len()], &a.bk));
            out.push((format!("layers.{i}.bv"), vec![a.bv.len()], &a.bv));
            out.push(mat(format!("layers.{i}.w_up"), &l.w_up));
            out.push(mat(format!("layers.{i}.w_down"), &l.w_down));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = ByteWriter::new();
        w.bytes(MODEL_MAGIC).u16(MODEL_VERSION);
        for v in [
            c.n_layers,
            c.hidden,
            c.n_heads,
            c.n_kv_heads,
            c.head_dim,
            c.vocab,
            c.ffn_hidden,
        ] {
            w.usize32(v);
        }
        w.u8(u8::from(c.rope)).f32(c.rope_base).f32(c.norm_eps);

        let tensors = self.tensors();
        w.usize32(tensors.len());
        let mut offset = 0u64;
        for (name, dims, data) in &tensors {
            w.u16(name.len() as u16).bytes(name.as_bytes()).u8(dims.len() as u8);
            for &d in dims {
                w.usize32(d);
            }
            w.u64(offset);
            offset += 4 * data.len() as u64;
        }
        for (_, _, data) in &tensors {
            w.f32s(data);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u16()?;
        if version != MODEL_VERSION {
            return Err(format_err(format!("unsupported model version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = r.usize32()?;
        }
        let config = ModelConfig {
            n_layers: dims[0],
            hidden: dims[1],
            n_heads: dims[2],
            n_kv_heads: dims[3],
            head_dim: dims[4],
            vocab: dims[5],
            ffn_hidden: dims[6],
            rope: r.u8()? != 0,
            rope_base: r.f32()?,
            norm_eps: r.f32()?,
        };
        config.validate()?;

        let count = r.len32(1 << 20)?;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name =
                String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| format_err("tensor name is not UTF-8"))?;
            let ndim = r.u8()? as usize;
            let mut shape_dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape_dims.push(r.usize32()?);
            }
            let offset = r.u64()?;
            table.push((name, shape_dims, offset));
        }
        let data = r.take(r.remaining())?;
        let lookup = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
            let (_, dims, offset) = table
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| format_err(format!("missing tensor {name}")))?;
            let n: usize = dims.iter().product();
            let start = *offset as usize;
            let end = start + 4 * n;
            if end > data.len() {
                return Err(format_err(format!("tensor {name} runs past end of file")));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((dims.clone(), values))
        };
        let matrix = |name: &str| -> Result<Matrix> {
            let (dims, values) = lookup(name)?;
            if dims.len() != 2 {
                return Err(format_err(format!("tensor {name} is not a matrix")));
            }
            Matrix::from_vec(dims[0], dims[1], values)
        };
        let vector = |name: &str| -> Result<Vec<f32>> { Ok(lookup(name)?.1) };

        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerWeights {
                attn: AttentionWeights {
                    wq: matrix(&format!("layers.{i}.wq"))?,
                    wk: matrix(&format!("layers.{i}.wk"))?,
                    wv: matrix(&format!("layers.{i}.wv"))?,
                    wo: matrix(&format!("layers.{i}.wo"))?,
                    bq: vector(&format!("layers.{i}.bq"))?,
                    bk: vector(&format!("layers.{i}.bk"))?,
                    bv: vector(&format!("layers.{i}.bv"))?,
                    key_channel_map: (0..config.kv_hidden()).collect(),
                },
                w_up: matrix(&format!("layers.{i}.w_up"))?,
                w_down: matrix(&format!("layers.{i}.w_down"))?,
            });
        }
        let model = Self {
            embed: matrix("embed")?,
            lm_head: matrix("lm_head")?,
            layers,
            config,
        };
        model.validate()?;
        Ok(model)
    }

    /// CRC32 of the serialized model; binds calibration artifacts to weights.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
