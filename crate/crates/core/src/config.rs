//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional
//! and falls back to [`RunConfig::default`]. Lists are comma separated.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, SkvqError};
use crate::io::read_file;
use crate::quant::{Bits, KvSpec, ParamFormat, QuantSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    InitModel,
    Calibrate,
    Generate,
    Eval,
    Roofline,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::InitModel,
        Command::Calibrate,
        Command::Generate,
        Command::Eval,
        Command::Roofline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::InitModel => "init-model",
            Command::Calibrate => "calibrate",
            Command::Generate => "generate",
            Command::Eval => "eval",
            Command::Roofline => "roofline",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = SkvqError;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| SkvqError::Config(format!("unknown command {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub model: PathBuf,
    pub artifact: PathBuf,
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub key_bits: Bits,
    pub value_bits: Bits,
    pub group_size: usize,
    pub param_format: ParamFormat,
    pub window: usize,
    pub n_sink: usize,
    pub grid: Vec<f32>,
    pub reorder: bool,
    pub clip: bool,
    pub seed: u64,
    pub model_seed: u64,
    pub calib_sequences: usize,
    pub calib_len: usize,
    pub eval_sequences: usize,
    pub eval_len: usize,
    pub prefill: usize,
    pub prompt: Vec<u32>,
    pub max_new_tokens: usize,
    pub strategies: Vec<String>,
    pub batches: Vec<usize>,
    pub seq_lens: Vec<usize>,
    pub kv_bits: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            model: "model.skvm".into(),
            artifact: "calib.skvc".into(),
            dataset: None,
            output: None,
            key_bits: Bits::Two,
            value_bits: Bits::Two,
            group_size: 128,
            param_format: ParamFormat::Fp8E4M3,
            window: 128,
            n_sink: 5,
            grid: crate::calibration::default_grid(),
            reorder: true,
            clip: true,
            seed: 0,
            model_seed: 0,
            calib_sequences: 8,
            calib_len: 512,
            eval_sequences: 4,
            eval_len: 320,
            prefill: 16,
            prompt: vec![1, 2, 3, 4],
            max_new_tokens: 16,
            strategies: ["fp16", "rtn", "smooth", "skvq"].map(String::from).to_vec(),
            batches: vec![1, 64, 128],
            seq_lens: vec![32 * 1024, 128 * 1024, 200 * 1024],
            kv_bits: vec![16.0, 4.0, 2.0],
        }
    }
}

/// Every recognised key, in serialization order.
pub const KEYS: &[&str] = &[
    "command",
    "model",
    "artifact",
    "dataset",
    "output",
    "key_bits",
    "value_bits",
    "group_size",
    "param_format",
    "window",
    "n_sink",
    "grid",
    "reorder",
    "clip",
    "seed",
    "model_seed",
    "calib_sequences",
    "calib_len",
    "eval_sequences",
    "eval_len",
    "prefill",
    "prompt",
    "max_new_tokens",
    "strategies",
    "batches",
    "seq_lens",
    "kv_bits",
];

fn bad(key: &str, value: &str, why: impl fmt::Display) -> SkvqError {
    SkvqError::Config(format!("{key} = {value:?}: {why}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn path(key: &str, value: &str) -> Result<PathBuf> {
    if value.is_empty() {
        return Err(bad(key, value, "empty path"));
    }
    Ok(value.into())
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| value.into())
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SkvqError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| SkvqError::Config("config is not UTF-8".into()))?;
        Self::parse(&text)
    }

    /// Override one key, as from a config line or a command-line flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "command" => self.command = if value.is_empty() { None } else { Some(value.parse()?) },
            "model" => self.model = path(key, value)?,
            "artifact" => self.artifact = path(key, value)?,
            "dataset" => self.dataset = opt_path(value),
            "output" => self.output = opt_path(value),
            "key_bits" => self.key_bits = value.parse()?,
            "value_bits" => self.value_bits = value.parse()?,
            "group_size" => {
                let g: usize = num(key, value)?;
                if g == 0 {
                    return Err(bad(key, value, "must be at least 1"));
                }
                self.group_size = g;
            }
            "param_format" => self.param_format = value.parse()?,
            "window" => self.window = num(key, value)?,
            "n_sink" => self.n_sink = num(key, value)?,
            "grid" => {
                let grid: Vec<f32> = list(key, value)?;
                crate::calibration::validate_grid(&grid).map_err(|e| bad(key, value, e))?;
                self.grid = grid;
            }
            "reorder" => self.reorder = flag(key, value)?,
            "clip" => self.clip = flag(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "model_seed" => self.model_seed = num(key, value)?,
            "calib_sequences" => self.calib_sequences = num(key, value)?,
            "calib_len" => self.calib_len = num(key, value)?,
            "eval_sequences" => self.eval_sequences = num(key, value)?,
            "eval_len" => self.eval_len = num(key, value)?,
            "prefill" => self.prefill = num(key, value)?,
            "prompt" => self.prompt = list(key, value)?,
            "max_new_tokens" => self.max_new_tokens = num(key, value)?,
            "strategies" => {
                self.strategies = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "batches" => self.batches = list(key, value)?,
            "seq_lens" => self.seq_lens = list(key, value)?,
            "kv_bits" => self.kv_bits = list(key, value)?,
            _ => return Err(SkvqError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| SkvqError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    fn get(&self, key: &str) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "command" => self.command.map(|c| c.to_string()).unwrap_or_default(),
            "model" => self.model.display().to_string(),
            "artifact" => self.artifact.display().to_string(),
            "dataset" => opt(&self.dataset),
            "output" => opt(&self.output),
            "key_bits" => self.key_bits.to_string(),
            "value_bits" => self.value_bits.to_string(),
            "group_size" => self.group_size.to_string(),
            "param_format" => self.param_format.to_string(),
            "window" => self.window.to_string(),
            "n_sink" => self.n_sink.to_string(),
            "grid" => join(&self.grid),
            "reorder" => self.reorder.to_string(),
            "clip" => self.clip.to_string(),
            "seed" => self.seed.to_string(),
            "model_seed" => self.model_seed.to_string(),
            "calib_sequences" => self.calib_sequences.to_string(),
            "calib_len" => self.calib_len.to_string(),
            "eval_sequences" => self.eval_sequences.to_string(),
            "eval_len" => self.eval_len.to_string(),
            "prefill" => self.prefill.to_string(),
            "prompt" => join(&self.prompt),
            "max_new_tokens" => self.max_new_tokens.to_string(),
            "strategies" => self.strategies.join(","),
            "batches" => join(&self.batches),
            "seq_lens" => join(&self.seq_lens),
            "kv_bits" => join(&self.kv_bits),
            _ => unreachable!("unknown key {key}"),
        }
    }

    pub fn kv_spec(&self) -> Result<KvSpec> {
        Ok(KvSpec {
            key: QuantSpec::new(self.key_bits, self.group_size, self.param_format)?,
            value: QuantSpec::new(self.value_bits, self.group_size, self.param_format)?,
        })
    }
}
