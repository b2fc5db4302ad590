use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in seconds
image_size = [64, 128]
seeds = [1]
shapes.train_images = 16
shapes.val_images = 8
shapes.test_images = 2
shapes.anomaly_images = 12
toy.seg_epochs = 1
toy.synth_epochs = 1
train.epochs = 1
ensemble.step = 0.5
";

fn anomseg(config: &Path, output: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anomseg"))
        .arg("--config")
        .arg(config)
        .arg("--output")
        .arg(output)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "command failed: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn fail(out: Output) -> String {
    assert!(!out.status.success(), "command unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.conf");
    fs::write(&config, TINY).unwrap();
    let output = dir.path().join("run");
    (dir, config, output)
}

fn sorted_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn missing_checkpoint_is_reported() {
    let (_dir, config, output) = setup();
    let err = fail(anomseg(&config, &output, &["infer", "--limit", "1"]));
    assert!(err.contains("dissimilarity checkpoint not found"), "{err}");
}

#[test]
fn unknown_variant_lists_valid_names() {
    let (_dir, config, output) = setup();
    let err = fail(anomseg(&config, &output, &["infer", "--variant", "bogus"]));
    for name in ["full", "no-ensemble", "no-uncertainty", "no-datagen-no-uncertainty"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn derived_keys_are_rejected() {
    let (_dir, config, output) = setup();
    let err = fail(anomseg(&config, &output, &["--set", "shapes.width=32", "make-dataset"]));
    assert!(err.contains("shapes.width"), "{err}");
}

#[test]
fn train_then_infer() {
    let (dir, config, output) = setup();
    ok(anomseg(&config, &output, &["make-dataset"]));
    ok(anomseg(&config, &output, &["train-backbones"]));
    ok(anomseg(&config, &output, &["train-dissimilarity", "--net", "full"]));
    ok(anomseg(&config, &output, &["ensemble-search"]));

    let batch = dir.path().join("batch");
    let stdout = ok(anomseg(
        &config,
        &output,
        &["infer", "--limit", "10", "--out", batch.to_str().unwrap()],
    ));
    assert!(stdout.contains("10 score maps"), "{stdout}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(batch.join("manifest.json")).unwrap()).unwrap();
    let stems: Vec<String> = serde_json::from_value(manifest["stems"].clone()).unwrap();
    assert_eq!(stems.len(), 10);
    let mut sorted = stems.clone();
    sorted.sort();
    assert_eq!(stems, sorted);
    assert_eq!(sorted_names(&batch), vec!["manifest.json", "scores"]);

    let image = output.join("dataset/anomaly-test/images").join(format!("{}.png", stems[0]));
    let single = dir.path().join("single");
    ok(anomseg(
        &config,
        &output,
        &[
            "--keep-intermediates",
            "infer",
            "--image",
            image.to_str().unwrap(),
            "--out",
            single.to_str().unwrap(),
        ],
    ));
    let stage_dirs: Vec<String> = sorted_names(&single).into_iter().filter(|n| n != "manifest.json").collect();
    assert_eq!(stage_dirs.len(), 6, "{stage_dirs:?}");
    let scores = sorted_names(&single.join("scores"));
    assert_eq!(scores, vec![format!("{}.png", stems[0]), format!("{}.tsr", stems[0])]);
    for d in stage_dirs.iter().filter(|d| *d != "scores") {
        assert_eq!(sorted_names(&single.join(d)).len(), 1, "{d}");
    }

    let report = ok(anomseg(&config, &output, &["evaluate", "--variants", "full,no-ensemble"]));
    assert!(report.contains("seed 1 full"), "{report}");
}
