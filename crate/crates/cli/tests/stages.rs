use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use serde_json::{json, Value};
use tempfile::TempDir;

use flowgen::genlearn::{read_stacks, GeneratorModel};
use flowgen::imageops::TransformKind;
use flowgen_cli::artifacts::{read_json, StageStamp, STAMP};
use flowgen_cli::stages::{DataManifest, GeneratorSidecar};
use flowgen_cli::{run_all, run_stage, CliError, Context, Pipeline, Stage};

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.json");
const NETWORK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy-alex.net.json");

/// The toy config cut down to a few images, one epoch and tiny searches.
fn tiny_config() -> Value {
    let mut c: Value = serde_json::from_str(&std::fs::read_to_string(CONFIG).unwrap()).unwrap();
    c["network"] = json!(NETWORK);
    let d = &mut c["dataset"];
    d["image_count"] = json!(5);
    d["angle_grid"] = json!([0, 180]);
    d["delta_grid"] = json!([-10, 10, 20]);
    d["scale_grid"] = json!([0.9, 1.1, 1.2]);
    d["translate_grid"] = json!([-2, 2, 4]);
    c["train"]["epochs"] = json!(1);
    c["flow"] = json!([
        { "search_radius": 3, "smoothness_factor": 0.1, "icm_sweeps": 2 },
        { "search_radius": 2, "smoothness_factor": 0.1, "icm_sweeps": 2 },
        { "search_radius": 1, "smoothness_factor": 0.1, "icm_sweeps": 2 }
    ]);
    c["pca_k"] = json!(2);
    c["families"] = json!([
        { "kind": "rotation", "reference_delta": 10 },
        { "kind": "scale", "reference_delta": 1.1 },
        { "kind": "translate_x", "reference_delta": 2 },
        { "kind": "translate_y", "reference_delta": 2 }
    ]);
    c["heldout"]["image_count"] = json!(3);
    c["zeroshot"]["test_pairs"] = json!(6);
    let a = &mut c["augment"];
    a["generators"] = json!([
        { "name": "rot", "family": "rotation", "delta": 20 },
        { "name": "shift", "family": "translate_x", "delta": -2 }
    ]);
    a["seeds"] = json!([1]);
    a["epochs"] = json!(1);
    a["test_views"] = json!(1);
    a["roundtrip_images"] = json!(1);
    c.as_object_mut().unwrap().remove("output_dir");
    c
}

fn write_config(dir: &Path, c: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(c).unwrap()).unwrap();
    path
}

fn context(config: &Path, out: &Path) -> Context {
    Context::new(Pipeline::load_with_seed(config, None).unwrap(), out.to_path_buf())
}

/// One complete tiny run shared by the read-only tests.
fn base_run() -> &'static (TempDir, PathBuf, PathBuf) {
    static RUN: OnceLock<(TempDir, PathBuf, PathBuf)> = OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let config = write_config(tmp.path(), &tiny_config());
        let out = tmp.path().join("run");
        run_all(&context(&config, &out)).unwrap();
        (tmp, config, out)
    })
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.path().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A private copy of the shared run.
fn run_copy() -> (TempDir, PathBuf, PathBuf) {
    let (_, config, out) = base_run();
    let tmp = tempfile::tempdir().unwrap();
    let copy = tmp.path().join("run");
    copy_dir(out, &copy);
    (tmp, config.clone(), copy)
}

fn stage_bytes(out: &Path, stage: Stage) -> Vec<(PathBuf, Vec<u8>)> {
    let root = out.join(stage.dir());
    let mut files = Vec::new();
    let mut stack = vec![root.clone()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap();
                files.push((path.strip_prefix(&root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn every_stage_is_stamped() {
    let (_, config, out) = base_run();
    let hash = Pipeline::load_with_seed(config, None).unwrap().hash;
    for stage in Stage::ALL {
        let stamp: StageStamp = read_json(&out.join(stage.dir()).join(STAMP)).unwrap();
        assert_eq!(stamp.stage, stage.name());
        assert_eq!(stamp.config_hash, hash);
        assert!(!stamp.files.is_empty());
    }
    assert!(out.join("report/report.md").exists());
}

#[test]
fn existing_output_needs_force() {
    let (_tmp, config, out) = run_copy();
    let ctx = context(&config, &out);
    let err = run_stage(&ctx, Stage::Fit).unwrap_err();
    assert!(matches!(err, CliError::Exists { .. }), "{err}");
    assert!(err.to_string().contains("--force"));
}

#[test]
fn stale_upstream_is_refused() {
    let (tmp, _, out) = run_copy();
    let mut c = tiny_config();
    c["pca_k"] = json!(3);
    let config = write_config(tmp.path(), &c);
    let mut ctx = context(&config, &out);
    ctx.force = true;
    let err = run_stage(&ctx, Stage::TrainBase).unwrap_err();
    assert!(matches!(err, CliError::StaleArtifact { .. }), "{err}");
}

#[test]
fn missing_upstream_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let ctx = context(&config, &tmp.path().join("empty"));
    let err = run_stage(&ctx, Stage::Extract).unwrap_err();
    match &err {
        CliError::MissingArtifact { path, stage_needed, .. } => {
            assert_eq!(*stage_needed, "gen-data");
            assert!(path.ends_with(Path::new("data").join(STAMP)), "{}", path.display());
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(err.to_string().contains("stage.json"));
}

#[test]
fn refitting_is_byte_identical() {
    let (_tmp, config, out) = run_copy();
    let before = stage_bytes(&out, Stage::Fit);
    let mut ctx = context(&config, &out);
    ctx.force = true;
    run_stage(&ctx, Stage::Fit).unwrap();
    assert_eq!(stage_bytes(&out, Stage::Fit), before);
}

#[test]
fn zero_amount_keeps_only_the_constant_terms() {
    let (_tmp, config, out) = run_copy();
    let mut ctx = context(&config, &out);
    ctx.force = true;
    ctx.synth_deltas = vec![0.0];
    run_stage(&ctx, Stage::Synth).unwrap();
    let root = out.join("synth/deltas");
    let sidecar: GeneratorSidecar = read_json(&root.join("rotation_0.json")).unwrap();
    let stack = read_stacks(&std::fs::read(root.join("rotation_0.ffg")).unwrap(), &sidecar.stacks)
        .unwrap()
        .remove(0);
    let model = GeneratorModel::read_from(std::fs::File::open(out.join("models/rotation.gen")).unwrap()).unwrap();
    // sum_i a_i B_i from the stored coefficients
    let mut expected = vec![0.0f64; stack.dimension()];
    for (block, abc) in model.basis.blocks().zip(model.coefficients.chunks_exact(3)) {
        for (e, &b) in expected.iter_mut().zip(block) {
            *e += f64::from(abc[0]) * f64::from(b);
        }
    }
    for (&got, want) in stack.data().iter().zip(expected) {
        assert!((f64::from(got) - want).abs() <= 1e-5 * (1.0 + want.abs()), "{got} vs {want}");
    }
    assert_eq!(sidecar.family, TransformKind::Rotation);
}

#[test]
fn deleted_stage_is_rebuilt_identically() {
    let (_tmp, config, out) = run_copy();
    let before = stage_bytes(&out, Stage::Flow);
    std::fs::remove_dir_all(out.join(Stage::Flow.dir())).unwrap();
    run_all(&context(&config, &out)).unwrap();
    assert_eq!(stage_bytes(&out, Stage::Flow), before);
}

#[test]
fn paper_scale_manifest_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny_config();
    c["dataset"]["image_count"] = json!(91);
    c["dataset"]["angle_grid"] = json!((0..72).map(|i| i * 5).collect::<Vec<_>>());
    c["dataset"]["delta_grid"] = json!([10, 20, 30, 40, 50, 60]);
    let config = write_config(tmp.path(), &c);
    let out = tmp.path().join("run");
    run_stage(&context(&config, &out), Stage::GenData).unwrap();
    let m: DataManifest = read_json(&out.join("data/manifest.json")).unwrap();
    assert_eq!(m.image_count, 91);
    assert_eq!(m.rotation_pairs_per_delta, 6552);
    assert_eq!(m.rotation_pairs, 6 * 6552);
    assert_eq!(m.images.len(), 91);
}

#[test]
fn binary_runs_a_stage_and_honors_the_seed_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), &tiny_config());
    let out = tmp.path().join("run");
    let flowgen = env!("CARGO_BIN_EXE_flowgen");
    let run = |extra: &[&str]| {
        Command::new(flowgen)
            .args(["gen-data", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .args(extra)
            .env("FLOWGEN_SEED", "77")
            .output()
            .unwrap()
    };
    let first = run(&[]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let stamp: StageStamp = read_json(&out.join("data").join(STAMP)).unwrap();
    assert_eq!(stamp.seed, 77);

    let again = run(&[]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert!(run(&["--force", "--jobs", "2"]).status.success());
}
