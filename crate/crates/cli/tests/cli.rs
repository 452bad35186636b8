use std::fs;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use lmdis::data::{export_folder, Annotations};
use lmdis::raster::Image;
use ndarray::Array3;

fn lmdis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmdis")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn tiny_config(dir: &Path, iterations: u64) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        format!(
            r#"
batch_size = 8
iterations = {iterations}
finalize_batches = 1
log_every = 0
output_dir = "run"

[model]
image_size = [56, 56]
image_channels = 1
landmarks = 3
use_descriptors = false

[model.detector]
widths = [4, 8]
skip_convs = [1, 1]
resample = "same"

[model.decoder]
widths = [4, 8]
skip_convs = [1, 1]
resample = "same"

[dataset]
source = "mnist"
digit = 1
image_size = [28, 28]
padded_size = [56, 56]
channels = 1
"#
        ),
    )
    .unwrap();
    path
}

/// Blobs at known positions, annotated with the blob center and two offsets.
fn annotated_folder(root: &Path, n: usize) {
    let mut names = Vec::new();
    let mut images = Vec::new();
    let mut ann = Annotations {
        landmarks: vec!["a".into(), "b".into(), "c".into()],
        normalizer_pair: Some([0, 1]),
        ..Default::default()
    };
    for i in 0..n {
        let (x, y) = (15.0 + (i * 7 % 26) as f64, 15.0 + (i * 11 % 26) as f64);
        images.push(
            Image::new(Array3::from_shape_fn((1, 56, 56), |(_, r, c)| {
                let d2 = ((c + 1) as f64 - x).powi(2) + ((r + 1) as f64 - y).powi(2);
                (-d2 / 18.0).exp() as f32
            }))
            .unwrap(),
        );
        let name = format!("img{i:03}.png");
        ann.points.insert(name.clone(), vec![[x, y], [x + 8.0, y], [x, y + 5.0]]);
        names.push(name);
    }
    export_folder(root, &names, &images).unwrap();
    fs::write(root.join("annotations.json"), serde_json::to_string(&ann).unwrap()).unwrap();
}

#[test]
fn data_validate_accepts_good_folders_and_rejects_broken_ones() {
    let dir = tempfile::tempdir().unwrap();
    annotated_folder(dir.path(), 6);
    let ok = lmdis(&["data", "validate", dir.path().to_str().unwrap()]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));

    fs::write(dir.path().join("img000.png"), b"garbage").unwrap();
    let bad = lmdis(&["data", "validate", dir.path().to_str().unwrap()]);
    assert!(!bad.status.success());
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let out = lmdis(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for f in ["model.safetensors", "checkpoint.safetensors", "config.toml", "run.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    // resume continues from the checkpoint up to the new count
    let out = lmdis(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--resume",
        run.join("checkpoint.safetensors").to_str().unwrap(),
        "--iterations",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(summary["iterations"], 4);

    let data = dir.path().join("blobs");
    annotated_folder(&data, 30);
    let report = dir.path().join("report");
    let out = lmdis(&[
        "eval",
        "--ckpt",
        run.join("model.safetensors").to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--annotations",
        data.join("annotations.json").to_str().unwrap(),
        "--normalizer",
        "biocular",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("eval.json")).unwrap()).unwrap();
    assert!(json["test_nme"]["percent"].as_f64().unwrap().is_finite());
    let csv = fs::read_to_string(report.join("eval.csv")).unwrap();
    assert!(csv.starts_with("image,nme_percent") && csv.lines().count() > 1);
}

#[test]
fn ablated_training_goes_to_its_own_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let out = lmdis(&["train", "--config", cfg.to_str().unwrap(), "--disable", "sep"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let saved = fs::read_to_string(dir.path().join("run_nosep/config.toml")).unwrap();
    assert!(saved.contains("lambda_sep = 0.0"), "{saved}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn serve_answers_health_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    assert!(lmdis(&["train", "--config", cfg.to_str().unwrap()]).status.success());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_lmdis"))
        .args(["serve", "--ckpt", dir.path().join("run/model.safetensors").to_str().unwrap(), "--port", &port.to_string()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let url = format!("http://127.0.0.1:{port}");
    let start = Instant::now();
    let health = loop {
        match ureq::get(&format!("{url}/health")).call() {
            Ok(r) => break r.into_json::<serde_json::Value>().unwrap(),
            Err(_) if start.elapsed() < Duration::from_secs(30) => std::thread::sleep(Duration::from_millis(100)),
            Err(e) => panic!("server never came up: {e}"),
        }
    };
    let model: serde_json::Value = ureq::get(&format!("{url}/model")).call().unwrap().into_json().unwrap();
    child.kill().unwrap();
    let _ = child.wait();
    assert_eq!(health["model_loaded"], true);
    assert_eq!(model["landmarks"], 3);
}
