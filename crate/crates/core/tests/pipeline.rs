use skvq_core::calibration::{default_grid, CalibrationSet};
use skvq_core::eval::{
    compare_strategies, report_csv, EvalContext, EvalSuite, FpStrategy, QuantStrategy, RtnStrategy, SkvqStrategy,
    SmoothStrategy,
};
use skvq_core::roofline::{report_table, Hardware, ModelShape, RooflineGrid};
use skvq_core::*;

fn small_model(seed: u64) -> Model {
    let config = ModelConfig {
        hidden: 64,
        head_dim: 16,
        vocab: 64,
        ffn_hidden: 64,
        ..ModelConfig::default()
    };
    Model::random(config, seed).unwrap()
}

fn options(spec: KvSpec) -> CalibrationOptions {
    CalibrationOptions {
        spec,
        grid: default_grid(),
        seed: 7,
        reorder: true,
        clip: true,
    }
}

#[test]
fn artifact_file_round_trip_drives_generation() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(1);
    let model_path = dir.path().join("m.skvm");
    model.save(&model_path).unwrap();
    let model = Model::load(&model_path).unwrap();

    let set = CalibrationSet::synthetic(3, 40, 64, 2).unwrap();
    let spec = KvSpec::uniform(QuantSpec::new(Bits::Two, 8, ParamFormat::Fp8E4M3).unwrap());
    let (artifact, report) = CalibrationArtifact::calibrate(&model, &set, options(spec)).unwrap();
    assert!(report.layers.iter().all(|l| l.after <= l.before));
    let path = dir.path().join("c.skvc");
    artifact.save(&path).unwrap();
    let loaded = CalibrationArtifact::load_for(&path, &model).unwrap();
    assert_eq!(loaded, artifact);

    let (fused, policy) = loaded.apply(&model, 8, 2).unwrap();
    let engine = Engine::new(&fused, policy).unwrap();
    let (tokens, session) = engine.generate_session(&[1, 2, 3, 4, 5, 6], 20).unwrap();
    assert_eq!(tokens.len(), 26);
    let f = session.cache.footprint();
    // Two layers, each with 2 sinks + 8 window rows in full precision.
    assert_eq!(f.fp_tokens, 2 * 10);
    assert_eq!(f.quantized_tokens, 2 * (25 - 10));

    let other = small_model(2);
    assert!(matches!(
        CalibrationArtifact::load_for(&path, &other),
        Err(SkvqError::Mismatch(_))
    ));
}

#[test]
fn mixed_width_cache_reports_expected_bits() {
    let config = ModelConfig {
        n_layers: 1,
        hidden: 320,
        n_heads: 5,
        n_kv_heads: 5,
        head_dim: 64,
        vocab: 32,
        ffn_hidden: 64,
        ..ModelConfig::default()
    };
    let model = Model::random(config, 3).unwrap();
    let spec = KvSpec {
        key: QuantSpec::new(Bits::Two, 64, ParamFormat::Fp8E4M3).unwrap(),
        value: QuantSpec::new(Bits::Ternary, 64, ParamFormat::Fp8E4M3).unwrap(),
    };
    let plan = ReorderPlan::identity(&model.config, 64, 64).unwrap();
    let schedule = ClipSchedule::ones(&plan, spec);
    let policy = skvq_core::eval::skvq_policy(&plan, &schedule, 128, 5).unwrap();
    let engine = Engine::new(&model, policy).unwrap();
    let prompt: Vec<u32> = (0..150).map(|i| (i * 7 % 32) as u32).collect();
    let (_, session) = engine.generate_session(&prompt, 10).unwrap();
    let f = session.cache.footprint();
    let kvh = model.config.kv_hidden();
    assert_eq!(f.quantized_tokens, 159 - 128 - 5);
    assert_eq!(f.key_bits(kvh), 2.0 + 2.0 * 8.0 / 64.0);
    // Codes are packed across the whole 320-wide row, five ternary codes per byte.
    assert!((f.value_bits(kvh) - (1.6 + 2.0 * 8.0 / 64.0)).abs() < 1e-12);
    assert!((average_bits(&spec.value) - f.value_bits(kvh)).abs() < 1e-12);
}

#[test]
fn sixteen_bit_artifact_generation_matches_reference() {
    let model = small_model(4);
    let set = CalibrationSet::synthetic(2, 24, 64, 5).unwrap();
    let (artifact, _) = CalibrationArtifact::calibrate(&model, &set, options(KvSpec::lossless())).unwrap();
    assert!(artifact.schedule.is_all_ones());
    let (fused, policy) = artifact.apply(&model, 0, 0).unwrap();
    let engine = Engine::new(&fused, policy).unwrap();
    let reference = Engine::reference(&fused).unwrap();
    for p in 0..5u32 {
        let prompt = [p, p + 3, 2 * p + 1];
        assert_eq!(
            engine.generate(&prompt, 12).unwrap(),
            reference.generate(&prompt, 12).unwrap()
        );
    }
}

#[test]
fn comparison_report_has_a_row_per_strategy() {
    let model = small_model(5);
    let calib = CalibrationSet::synthetic(2, 32, 64, 6).unwrap();
    let ctx = EvalContext::new(&model, &calib, default_grid(), 1);
    let suite = EvalSuite::synthetic(2, 48, 64, 8, 7).unwrap();
    let strategies: Vec<Box<dyn QuantStrategy>> = vec![
        Box::new(FpStrategy),
        Box::new(RtnStrategy { symmetric: false }),
        Box::new(SmoothStrategy { window: 16, sink: 2 }),
        Box::new(SkvqStrategy::full(16, 2)),
    ];
    let spec = KvSpec::uniform(QuantSpec::new(Bits::Two, 8, ParamFormat::Fp16).unwrap());
    let rows = compare_strategies(&ctx, &suite, &strategies, &[spec]).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].mse, 0.0);
    assert_eq!(rows[0].avg_bits, 16.0);
    assert!(rows[1..].iter().all(|r| r.mse > 0.0 && r.ppl.is_finite()));
    assert!(rows[3].mse < rows[1].mse);
    assert_eq!(report_csv(&rows).lines().count(), 5);
}

#[test]
fn default_roofline_grid_contains_the_large_batch_row() {
    let rows = report_table(ModelShape::llama_7b(), Hardware::a100_80gb(), &RooflineGrid::default()).unwrap();
    assert_eq!(rows.len(), 27);
    let row = rows
        .iter()
        .find(|r| r.batch == 128 && r.seq == 200 * 1024 && r.kv_bits == 16.0)
        .unwrap();
    assert!((row.memory_consumption / 1e9 / 13_400.0 - 1.0).abs() <= 0.15);
    assert!(row.memory_bound);
}
