use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 3

[data]
split = [0.5, 0.25, 0.25]

[data.synthetic]
count = 16

[segmentation]
switch_epoch = 3
epochs = 6
batch_size = 4
learning_rate = 0.002

[segmentation.model]
input_size = [64, 32]
width_multiplier = 0.5
architecture = "mini"

[classifier]
descriptor_size = 16

[classifier.train]
epochs = 2
"#;

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    let output = Command::new(env!("CARGO_BIN_EXE_lanecascade"))
        .arg("--config")
        .arg(config)
        .arg("--output")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn first_image(dir: &Path) -> PathBuf {
    let mut images: Vec<_> = std::fs::read_dir(dir.join("data/images"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    images.sort();
    images.remove(0)
}

#[test]
fn full_run_writes_every_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let out = dir.path().join("out");

    run(&config, &out, &["gen-data"]);
    let image = first_image(&out);
    let image = image.to_str().unwrap();
    run(&config, &out, &["train-seg"]);
    run(&config, &out, &["train-cls"]);
    let infer = run(&config, &out, &["infer", image]);
    let json: serde_json::Value = serde_json::from_slice(&infer.stdout).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 1);
    run(&config, &out, &["eval"]);
    run(&config, &out, &["eval", "--segmentation-only"]);
    run(&config, &out, &["overlay", "--mode", "instances", image]);
    run(
        &config,
        &out,
        &["ablate", "--sizes", "16", "--schemes", "two_class", "--epochs", "1"],
    );

    for name in [
        "config.snapshot.toml",
        "config.resolved.toml",
        "seg.safetensors",
        "seg_state.safetensors",
        "seg_train_report.json",
        "cls.safetensors",
        "cls_train_report.json",
        "inference.json",
        "metrics.txt",
        "metrics.csv",
        "metrics.json",
        "ablation.csv",
        "ablation.txt",
        "ablation.json",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    assert_eq!(
        std::fs::read_to_string(out.join("config.snapshot.toml")).unwrap(),
        CONFIG
    );
    assert_eq!(std::fs::read_dir(out.join("overlays")).unwrap().count(), 1);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
}

#[test]
fn unknown_device_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_lanecascade"))
        .args(["--device", "cuda", "--output"])
        .arg(dir.path())
        .arg("gen-data")
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("cpu"));
}

#[test]
fn unknown_config_keys_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[segmentation]\nepochz = 3\n").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_lanecascade"))
        .arg("--config")
        .arg(&config)
        .arg("gen-data")
        .output()
        .unwrap();
    assert!(!output.status.success());
}
