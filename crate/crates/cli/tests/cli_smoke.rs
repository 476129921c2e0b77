//! Exit-code and wiring checks against the real binary.

use std::path::PathBuf;
use std::process::Output;

use urbanseg::bundle::ArrayBundle;
use urbanseg::pipeline::{self, Ctx};
use urbanseg::ply::{read_ply, write_ply, PlyFormat, PlyReadOptions};
use urbanseg_core::cloud::PointCloud;
use urbanseg_core::network::{predict_labels, LayerConfig, ModelParams, PredictSettings};
use urbanseg_core::synth::{generate_scene, SceneSpec};
use urbanseg_core::ClassSchema;

fn run_cli(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_urbanseg"))
        .args(args)
        .output()
        .expect("spawn urbanseg")
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("urbanseg-smoke-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn convert_roundtrips_through_pcb() {
    let dir = temp_dir("convert");
    let scene = dir.join("scene.ply");
    let bundle_path = dir.join("scene.pcb");
    let back = dir.join("back.ply");

    let spec = SceneSpec {
        extent: 20.0,
        building_count: 2,
        tree_count: 3,
        seed: 3,
        ..SceneSpec::default()
    };
    let cloud = generate_scene(&spec).unwrap();
    write_ply(&scene, &cloud, PlyFormat::BinaryLittleEndian).unwrap();

    let out = run_cli(&[
        "--quiet",
        "convert",
        "--input",
        scene.to_str().unwrap(),
        "--out",
        bundle_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ArrayBundle::read(&bundle_path).is_ok());

    let out = run_cli(&[
        "--quiet",
        "convert",
        "--input",
        bundle_path.to_str().unwrap(),
        "--out",
        back.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let reread = read_ply(&back, &PlyReadOptions::default()).unwrap();
    assert_eq!(reread, cloud);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn convert_applies_builtin_class_map() {
    let dir = temp_dir("remap");
    let input = dir.join("source.ply");
    let output = dir.join("target.ply");
    // A cloud labeled in the eight-class synthetic source schema.
    let spec = SceneSpec {
        extent: 20.0,
        building_count: 2,
        tree_count: 3,
        seed: 6,
        ..SceneSpec::default()
    };
    let cloud = urbanseg_core::synth::generate_source_scene(&spec).unwrap();
    write_ply(&input, &cloud, PlyFormat::BinaryLittleEndian).unwrap();

    let out = run_cli(&[
        "--quiet",
        "convert",
        "--input",
        input.to_str().unwrap(),
        "--out",
        output.to_str().unwrap(),
        "--schema",
        "synth-source8",
        "--builtin-class-map",
        "synth-source8:urban5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let remapped = read_ply(&output, &PlyReadOptions::default()).unwrap();
    assert!(remapped.labels.unwrap().iter().all(|&l| l < 5));

    // Unknown builtin pair is a validation error (exit 1).
    let out = run_cli(&[
        "--quiet",
        "convert",
        "--input",
        input.to_str().unwrap(),
        "--out",
        output.to_str().unwrap(),
        "--builtin-class-map",
        "nope:urban5",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn evaluate_length_mismatch_exits_one() {
    let dir = temp_dir("evaluate");
    let a = dir.join("a.ply");
    let b = dir.join("b.ply");
    let mk = |n: usize| {
        PointCloud::new(vec![[0.0, 0.0, 0.0]; n], "urban5").with_labels(vec![0; n])
    };
    write_ply(&a, &mk(5), PlyFormat::BinaryLittleEndian).unwrap();
    write_ply(&b, &mk(6), PlyFormat::BinaryLittleEndian).unwrap();
    let out = run_cli(&[
        "--quiet",
        "evaluate",
        "--pred",
        a.to_str().unwrap(),
        "--truth",
        b.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn missing_and_malformed_inputs_exit_two() {
    let out = run_cli(&[
        "--quiet",
        "predict",
        "--model",
        "/nonexistent/model.pcsk",
        "--input",
        "/nonexistent/in.ply",
        "--out",
        "/nonexistent/out.ply",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let dir = temp_dir("malformed");
    let bad = dir.join("bad.ply");
    std::fs::write(&bad, b"not a ply file at all\n").unwrap();
    let out_dir = dir.join("batches");
    let out = run_cli(&[
        "--quiet",
        "preprocess",
        "--input",
        bad.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn synth_writes_scene_and_manifest() {
    let dir = temp_dir("synth");
    let out_ply = dir.join("scene.ply");
    let out = run_cli(&[
        "--quiet",
        "synth",
        "--seed",
        "9",
        "--out",
        out_ply.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cloud = read_ply(&out_ply, &PlyReadOptions::default()).unwrap();
    assert!(cloud.len() > 1000);
    assert!(cloud.labels.is_some() && cloud.colors.is_some());
    let manifest = dir.join("scene.ply.manifest.json");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(manifest).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seeds"]["scene"], 9);
    assert_eq!(manifest["outputs"][0]["path"], out_ply.to_str().unwrap());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn log_json_mode_emits_json_lines() {
    let dir = temp_dir("logjson");
    let out_ply = dir.join("scene.ply");
    let out = run_cli(&[
        "--log-json",
        "synth",
        "--seed",
        "1",
        "--out",
        out_ply.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().next().unwrap();
    let value: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(value["event"], "synth");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn pipeline_predict_matches_core_predict() {
    // The tile-parallel prediction path must agree with the reference
    // implementation for any thread count.
    let config = LayerConfig {
        k: 4,
        decimation_ratio: 2,
        num_layers: 2,
        feature_dims: vec![8, 16],
        stem_dim: 6,
        head_hidden: 12,
        ..LayerConfig::default()
    };
    let params = ModelParams::init(config, ClassSchema::target5(), 5).unwrap();
    let spec = SceneSpec {
        extent: 24.0,
        building_count: 2,
        tree_count: 4,
        seed: 8,
        ..SceneSpec::default()
    };
    let mut cloud = generate_scene(&spec).unwrap();
    cloud.labels = None;

    let settings = PredictSettings {
        n_points: 256,
        tile_size: 10.0,
        seed: 3,
    };
    let reference = predict_labels(&cloud, &params, &settings).unwrap();
    for threads in [1, 4] {
        let ctx = Ctx {
            threads,
            log_json: false,
            quiet: true,
        };
        let got = pipeline::predict_cloud(&ctx, &cloud, &params, 256, 10.0, 3).unwrap();
        assert_eq!(got, reference, "threads={threads}");
    }
}
