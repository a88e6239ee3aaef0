use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use skvq_core::calibration::CalibrationSet;
use skvq_core::eval::{
    compare_strategies, report_csv, report_text, EvalContext, EvalSuite, FpStrategy, QuantStrategy, RtnStrategy,
    SkvqStrategy, SmoothStrategy,
};
use skvq_core::roofline::{report_table, table_csv, table_text, Hardware, ModelShape, RooflineGrid};
use skvq_core::{
    CalibrationArtifact, CalibrationOptions, Command, Engine, Model, ModelConfig, Result, RunConfig, SkvqError,
};

#[derive(Parser, Debug)]
#[command(name = "skvq", version, about = "Sliding-window KV-cache quantization harness")]
struct Cli {
    /// Flat key = value config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Extra `key=value` overrides, applied after the config file and before flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Print the effective config and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(flatten)]
    flags: Flags,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a randomly initialised toy model.
    InitModel,
    /// Run the calibration prologue and write the artifact.
    Calibrate,
    /// Generate tokens with the calibrated quantized cache.
    Generate,
    /// Compare quantization strategies on sequences sampled from the model.
    Eval,
    /// Tabulate memory and latency estimates.
    Roofline,
}

impl Cmd {
    fn command(&self) -> Command {
        match self {
            Cmd::InitModel => Command::InitModel,
            Cmd::Calibrate => Command::Calibrate,
            Cmd::Generate => Command::Generate,
            Cmd::Eval => Command::Eval,
            Cmd::Roofline => Command::Roofline,
        }
    }
}

/// Flags mirroring config keys.
#[derive(Args, Debug, Default)]
struct Flags {
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    artifact: Option<String>,
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    output: Option<String>,
    #[arg(long, global = true)]
    key_bits: Option<String>,
    #[arg(long, global = true)]
    value_bits: Option<String>,
    /// Shorthand for both key and value bits.
    #[arg(long, global = true)]
    bits: Option<String>,
    #[arg(long, global = true)]
    group_size: Option<String>,
    #[arg(long, global = true)]
    param_format: Option<String>,
    #[arg(long, global = true)]
    window: Option<String>,
    #[arg(long, global = true)]
    n_sink: Option<String>,
    #[arg(long, global = true)]
    grid: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    model_seed: Option<String>,
    #[arg(long, global = true)]
    prompt: Option<String>,
    #[arg(long, global = true)]
    max_new_tokens: Option<String>,
    #[arg(long, global = true)]
    strategies: Option<String>,
}

impl Flags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("model", &self.model),
            ("artifact", &self.artifact),
            ("dataset", &self.dataset),
            ("output", &self.output),
            ("key_bits", &self.bits),
            ("value_bits", &self.bits),
            ("key_bits", &self.key_bits),
            ("value_bits", &self.value_bits),
            ("group_size", &self.group_size),
            ("param_format", &self.param_format),
            ("window", &self.window),
            ("n_sink", &self.n_sink),
            ("grid", &self.grid),
            ("seed", &self.seed),
            ("model_seed", &self.model_seed),
            ("prompt", &self.prompt),
            ("max_new_tokens", &self.max_new_tokens),
            ("strategies", &self.strategies),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.set.iter().map(String::as_str))?;
    for (k, v) in cli.flags.pairs() {
        cfg.set(k, v)?;
    }
    cfg.command = Some(cli.command.command());
    Ok(cfg)
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    if let Some(p) = path {
        fs::write(p, text)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    Model::load(&cfg.model).map_err(|e| match e {
        SkvqError::Io(io) => SkvqError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", cfg.model.display()))),
        other => other,
    })
}

fn calibration_set(cfg: &RunConfig, model: &Model) -> Result<CalibrationSet> {
    let set = match &cfg.dataset {
        Some(p) => CalibrationSet::load(p)?,
        None => CalibrationSet::synthetic(cfg.calib_sequences, cfg.calib_len, model.config.vocab, cfg.seed)?,
    };
    set.validate(2, model.config.vocab)?;
    Ok(set)
}

fn init_model(cfg: &RunConfig) -> Result<()> {
    let model = Model::random(ModelConfig::default(), cfg.model_seed)?;
    model.save(&cfg.model)?;
    println!("model {} checksum {:#010x}", cfg.model.display(), model.checksum());
    Ok(())
}

fn calibrate(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let set = calibration_set(cfg, &model)?;
    let options = CalibrationOptions {
        spec: cfg.kv_spec()?,
        grid: cfg.grid.clone(),
        seed: cfg.seed,
        reorder: cfg.reorder,
        clip: cfg.clip,
    };
    let (artifact, report) = CalibrationArtifact::calibrate(&model, &set, options)?;
    artifact.save(&cfg.artifact)?;
    println!("layer  loss(alpha=1)  loss(calibrated)");
    for (i, l) in report.layers.iter().enumerate() {
        println!("{i:>5}  {:>13.6e}  {:>16.6e}", l.before, l.after);
    }
    println!(
        "artifact {} model {:#010x} groups/layer k={} v={}",
        cfg.artifact.display(),
        artifact.model_checksum,
        artifact.plan.layers[0].key.n_groups(),
        artifact.plan.layers[0].value.n_groups()
    );
    Ok(())
}

fn generate(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let artifact = CalibrationArtifact::load_for(&cfg.artifact, &model)?;
    let (fused, policy) = artifact.apply(&model, cfg.window, cfg.n_sink)?;
    let engine = Engine::new(&fused, policy)?;
    let (tokens, session) = engine.generate_session(&cfg.prompt, cfg.max_new_tokens)?;
    let text = tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    println!("tokens {text}");
    let f = session.cache.footprint();
    let kvh = model.config.kv_hidden();
    let retained: usize = session.cache.layers.iter().map(|l| l.retained_indices().count()).sum();
    println!(
        "bits/element key {:.4} value {:.4} (declared {:.4}/{:.4})",
        f.key_bits(kvh),
        f.value_bits(kvh),
        artifact.options.spec.key.average_bits(),
        artifact.options.spec.value.average_bits()
    );
    println!(
        "cache bytes {} (key {} value {} fp {}), quantized rows {}, fp rows {}, retained {}",
        f.total_bytes(),
        f.key_quantized_bytes,
        f.value_quantized_bytes,
        f.fp_bytes,
        f.quantized_tokens,
        f.fp_tokens,
        retained
    );
    write_output(cfg.output.as_deref(), &format!("{text}\n"))
}

fn strategies(cfg: &RunConfig) -> Result<Vec<Box<dyn QuantStrategy>>> {
    let base = SkvqStrategy {
        window: 0,
        clip: false,
        reorder: false,
        sink: 0,
        fp8: false,
    };
    let (w, s) = (cfg.window, cfg.n_sink);
    let mut out: Vec<Box<dyn QuantStrategy>> = Vec::new();
    for name in &cfg.strategies {
        match name.as_str() {
            "fp16" => out.push(Box::new(FpStrategy)),
            "rtn" => out.push(Box::new(RtnStrategy { symmetric: false })),
            "rtn-sym" => out.push(Box::new(RtnStrategy { symmetric: true })),
            "smooth" => out.push(Box::new(SmoothStrategy { window: w, sink: s })),
            "skvq" => out.push(Box::new(SkvqStrategy::full(w, s))),
            "skvq-fp8" => out.push(Box::new(SkvqStrategy {
                fp8: true,
                ..SkvqStrategy::full(w, s)
            })),
            "ablation" => {
                let steps = [
                    base,
                    SkvqStrategy { window: w, ..base },
                    SkvqStrategy {
                        window: w,
                        clip: true,
                        ..base
                    },
                    SkvqStrategy {
                        window: w,
                        clip: true,
                        reorder: true,
                        ..base
                    },
                    SkvqStrategy {
                        window: w,
                        clip: true,
                        reorder: true,
                        sink: s,
                        ..base
                    },
                    SkvqStrategy {
                        window: w,
                        clip: true,
                        reorder: true,
                        sink: s,
                        fp8: true,
                    },
                ];
                out.extend(steps.into_iter().map(|x| Box::new(x) as Box<dyn QuantStrategy>));
            }
            other => return Err(SkvqError::Config(format!("unknown strategy {other:?}"))),
        }
    }
    if out.is_empty() {
        return Err(SkvqError::Config("no strategies selected".into()));
    }
    Ok(out)
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let set = calibration_set(cfg, &model)?;
    let ctx = EvalContext::new(&model, &set, cfg.grid.clone(), cfg.seed);
    let suite = EvalSuite::sampled(
        &model,
        cfg.eval_sequences,
        cfg.eval_len,
        cfg.prefill,
        cfg.seed.wrapping_add(1),
    )?;
    let rows = compare_strategies(&ctx, &suite, &strategies(cfg)?, &[cfg.kv_spec()?])?;
    print!("{}", report_text(&rows));
    write_output(cfg.output.as_deref(), &report_csv(&rows))
}

fn roofline(cfg: &RunConfig) -> Result<()> {
    let grid = RooflineGrid {
        batches: cfg.batches.clone(),
        seqs: cfg.seq_lens.clone(),
        kv_bits: cfg.kv_bits.clone(),
    };
    let rows = report_table(ModelShape::llama_7b(), Hardware::a100_80gb(), &grid)?;
    print!("{}", table_text(&rows));
    write_output(cfg.output.as_deref(), &table_csv(&rows))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    if cli.print_config {
        print!("{}", cfg.serialize());
        return Ok(());
    }
    match cli.command {
        Cmd::InitModel => init_model(&cfg),
        Cmd::Calibrate => calibrate(&cfg),
        Cmd::Generate => generate(&cfg),
        Cmd::Eval => eval(&cfg),
        Cmd::Roofline => roofline(&cfg),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
