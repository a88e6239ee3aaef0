use std::path::Path;
use std::process::{Command, Output};

use skvq_core::{CalibrationArtifact, Engine, Model, RunConfig};

fn skvq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skvq"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = skvq(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(dir: &Path, args: &[&str]) -> String {
    let out = skvq(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    stderr
}

const QUICK: &[&str] = &[
    "--set",
    "calib_sequences=2",
    "--set",
    "calib_len=48",
    "--group-size",
    "16",
];

fn with<'a>(base: &[&'a str], extra: &'a [&'a str]) -> Vec<&'a str> {
    base.iter().copied().chain(extra.iter().copied()).collect()
}

fn tokens(stdout: &str) -> Vec<u32> {
    let line = stdout.lines().find(|l| l.starts_with("tokens ")).unwrap();
    line[7..].split_whitespace().map(|t| t.parse().unwrap()).collect()
}

#[test]
fn calibrate_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init-model"]);
    let out = ok(d, &with(&["calibrate"], QUICK));
    assert!(out.contains("loss(calibrated)"));
    let first = std::fs::read(d.join("calib.skvc")).unwrap();
    ok(d, &with(&["calibrate", "--artifact", "again.skvc"], QUICK));
    assert_eq!(first, std::fs::read(d.join("again.skvc")).unwrap());

    let model = Model::load(&d.join("model.skvm")).unwrap();
    let a = CalibrationArtifact::load_for(&d.join("calib.skvc"), &model).unwrap();
    assert_eq!(a.options.spec.key.group_size, 16);

    ok(
        d,
        &with(&["calibrate", "--artifact", "ones.skvc", "--grid", "1.0"], QUICK),
    );
    let ones = CalibrationArtifact::load_for(&d.join("ones.skvc"), &model).unwrap();
    assert!(ones.schedule.is_all_ones());
    assert_eq!(ones.plan, a.plan);
}

#[test]
fn generate_reports_stats_and_matches_reference_when_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init-model", "--model-seed", "4"]);
    let model = Model::load(&d.join("model.skvm")).unwrap();
    let prompt = [5u32, 9, 1, 33, 7];
    let reference = Engine::reference(&model).unwrap().generate(&prompt, 12).unwrap();
    let gen = ["generate", "--prompt", "5,9,1,33,7", "--max-new-tokens", "12"];

    ok(d, &with(&["calibrate", "--bits", "16"], QUICK));
    let out = ok(d, &with(&gen, &["--window", "0", "--n-sink", "0"]));
    assert_eq!(tokens(&out), reference);

    ok(d, &with(&["calibrate", "--bits", "2"], QUICK));
    let out = ok(d, &with(&gen, &["--window", "64"]));
    assert_eq!(tokens(&out), reference);

    let out = ok(d, &with(&gen, &["--window", "4", "--n-sink", "2"]));
    assert_eq!(tokens(&out).len(), 17);
    assert!(out.contains("bits/element key 3.0000 value 3.0000"), "{out}");
    // 16 cached tokens per layer: 2 sinks and 4 window rows stay full precision.
    assert!(out.contains("quantized rows 20, fp rows 12, retained 4"), "{out}");
}

#[test]
fn mismatched_model_is_a_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init-model"]);
    ok(d, &with(&["calibrate"], QUICK));
    ok(d, &["init-model", "--model-seed", "9", "--model", "other.skvm"]);
    let e = err(d, &["generate", "--model", "other.skvm"]);
    assert!(e.starts_with("error: mismatch: "), "{e}");

    std::fs::write(d.join("broken.skvc"), b"SKVC not really").unwrap();
    let e = err(d, &["generate", "--artifact", "broken.skvc"]);
    assert!(e.starts_with("error: checksum: "), "{e}");

    let e = err(d, &["calibrate", "--model", "missing.skvm"]);
    assert!(e.starts_with("error: io: "), "{e}");
}

#[test]
fn eval_lossless_strategy_has_zero_mse() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["init-model"]);
    let args = with(
        &[
            "eval",
            "--strategies",
            "fp16,skvq",
            "--bits",
            "16",
            "--output",
            "eval.csv",
        ],
        &[
            "--set",
            "eval_sequences=1",
            "--set",
            "eval_len=40",
            "--set",
            "calib_sequences=2",
            "--set",
            "calib_len=32",
        ],
    );
    ok(d, &args);
    let csv = std::fs::read_to_string(d.join("eval.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r.split(',').nth(7).unwrap().parse::<f64>().unwrap(), 0.0, "{r}");
    }
}

#[test]
fn roofline_default_grid_contains_table_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["roofline", "--output", "roof.csv"]);
    let csv = std::fs::read_to_string(d.join("roof.csv")).unwrap();
    let row = csv.lines().find(|l| l.starts_with("128,204800,16,")).unwrap();
    let gb: f64 = row.split(',').nth(5).unwrap().parse().unwrap();
    assert!((gb / 13_400.0 - 1.0).abs() <= 0.15, "{row}");
}

#[test]
fn config_file_flags_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.cfg"),
        "# experiment\nwindow = 32\nvalue_bits = 1.5\nn_sink = 3\n",
    )
    .unwrap();
    let out = ok(
        d,
        &["roofline", "--config", "run.cfg", "--window", "16", "--print-config"],
    );
    let cfg = RunConfig::parse(&out).unwrap();
    assert_eq!(cfg.window, 16);
    assert_eq!(cfg.n_sink, 3);
    assert_eq!(cfg.value_bits.to_string(), "1.5");
    assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);

    let e = err(d, &["roofline", "--set", "nonsense=1"]);
    assert!(e.starts_with("error: config: "), "{e}");
    let e = err(d, &["frobnicate"]);
    assert!(e.starts_with("error: usage: "), "{e}");
}
