use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use boxseg::annotate::marker_from_mask;
use boxseg::imgproc::ImagePlane;
use boxseg::iohub::{self, RleMask};
use boxseg::metrics::read_csv;
use boxseg::model::{init_params, ModelConfig};
use serde_json::Value;

fn boxseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = boxseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn synth(dir: &Path, count: usize) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--count", &count.to_string(), "--out", s(&data)]);
    data
}

fn untrained_checkpoint(dir: &Path, data: &Path) -> PathBuf {
    let out = dir.join("train");
    ok(&["train", "--data", s(data), "--epochs", "0", "--out", s(&out)]);
    out.join("checkpoint.bsck")
}

#[test]
fn eval_of_ground_truth_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6);
    let out = dir.path().join("eval");
    ok(&["eval", "--data", s(&data), "--predictions", s(&data), "--out", s(&out)]);
    let records = read_csv(&std::fs::read(out.join("metrics.csv")).unwrap()[..]).unwrap();
    assert!(!records.is_empty());
    assert!(records.iter().all(|r| r.dsc == 1.0 && r.nsd == 1.0));
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary.as_array().unwrap().last().unwrap()["task"], "all");
}

#[test]
fn stats_on_identical_runs_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 6);
    let e = dir.path().join("eval");
    ok(&["eval", "--data", s(&data), "--predictions", s(&data), "--out", s(&e)]);
    let csv = e.join("metrics.csv");
    let out = dir.path().join("stats");
    let o = ok(&["stats", s(&csv), s(&csv), "--out", s(&out)]);
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed["p"], 1.0);
    assert_eq!(printed["degenerate"], true);
    assert_eq!(json(&out.join("stats.json")), printed);
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 30);
    let ckpt = untrained_checkpoint(dir.path(), &data);
    let cfg = ModelConfig::default();
    let want = iohub::encode_checkpoint(&init_params(&cfg).unwrap(), &cfg);
    assert_eq!(std::fs::read(&ckpt).unwrap(), want);
    let log = json(&ckpt.with_file_name("train_log.json"));
    assert_eq!(log.as_array().unwrap().len(), 0);
}

#[test]
fn failures_use_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let code = |args: &[&str]| boxseg(args).status.code().unwrap();

    assert_eq!(code(&["synth", "--bogus"]), 2);
    assert_eq!(code(&["synth", "--image-size", "8", "--out", s(&out)]), 3);
    assert_eq!(code(&["synth", "--style", "watercolor", "--out", s(&out)]), 3);
    assert_eq!(code(&["preprocess", "--input", "/nonexistent/x.miv", "--out", s(&out)]), 4);

    let bad = dir.path().join("bad.miv");
    std::fs::write(&bad, b"MIV1\xff\xff\xff\xff{").unwrap();
    let o = boxseg(&["preprocess", "--input", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(5));
    let err: Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"]["kind"], "format");
}

#[test]
fn replaying_a_manifest_reproduces_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    ok(&["synth", "--count", "4", "--seed", "9", "--out", s(&first)]);
    let manifest = json(&first.join("run.json"));
    assert_eq!(manifest["subcommand"], "synth");
    assert_eq!(manifest["seed"], 9);

    let second = dir.path().join("b");
    let argv: Vec<String> = manifest["argv"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a.as_str().unwrap().to_string())
        .map(|a| if a == s(&first) { s(&second).to_string() } else { a })
        .collect();
    ok(&argv.iter().map(String::as_str).collect::<Vec<_>>());
    let replay = json(&second.join("run.json"));
    assert!(!manifest["outputs"].as_array().unwrap().is_empty());
    assert_eq!(manifest["outputs"], replay["outputs"]);
    for o in manifest["outputs"].as_array().unwrap() {
        let a = std::fs::read(first.join(o["path"].as_str().unwrap())).unwrap();
        let b = std::fs::read(second.join(o["path"].as_str().unwrap())).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn preprocess_infer_and_assist_on_a_tumor_volume() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 30);
    let ckpt = untrained_checkpoint(dir.path(), &data);

    let vol_dir = dir.path().join("vol");
    ok(&["synth", "--tumor-depth", "12", "--out", s(&vol_dir)]);
    let volume = vol_dir.join("volume.miv");

    let pre = dir.path().join("pre");
    ok(&["preprocess", "--input", s(&volume), "--png", "--out", s(&pre)]);
    let norm = iohub::read_volume(&pre.join("normalized.miv")).unwrap().to_volume().unwrap();
    assert_eq!(norm.depth(), 12);
    assert!(norm.data().iter().all(|v| (0.0..=255.0).contains(v)));
    assert!(pre.join("slice0011.png").exists());

    let inf = dir.path().join("infer");
    ok(&["infer", "--checkpoint", s(&ckpt), "--image", s(&volume), "--slice", "6", "--box", "10,12,40,44", "--out", s(&inf)]);
    let pred = json(&inf.join("prediction.json"));
    let rle: RleMask = serde_json::from_value(pred["mask"].clone()).unwrap();
    assert_eq!(rle.dims, vec![64, 64]);
    let png = iohub::read_png(&inf.join("mask.png")).unwrap();
    assert_eq!((png.width(), png.height()), (64, 64));

    let photo = dir.path().join("photo.png");
    let pixels = (0..100 * 70 * 3).map(|i| (i % 251) as f32).collect();
    iohub::write_png(&photo, &ImagePlane::new(100, 70, 3, pixels).unwrap()).unwrap();
    let inf2 = dir.path().join("infer2");
    ok(&["infer", "--checkpoint", s(&ckpt), "--image", s(&photo), "--box", "5,5,60,50", "--out", s(&inf2)]);
    let png = iohub::read_png(&inf2.join("mask.png")).unwrap();
    assert_eq!((png.width(), png.height()), (100, 70));
    let code = boxseg(&["infer", "--checkpoint", s(&ckpt), "--image", s(&photo), "--box", "5,5,160,50", "--out", s(&inf2)]);
    assert_eq!(code.status.code(), Some(3));

    let truth = iohub::read_volume(&vol_dir.join("truth.miv")).unwrap().to_mask().unwrap();
    let tumor: Vec<usize> = (0..12).filter(|&k| truth.slice(k).unwrap().count() > 0).collect();
    let (a, b) = (tumor[0], *tumor.last().unwrap());
    let markers: Vec<_> = [a, b]
        .iter()
        .map(|&k| marker_from_mask(&truth.slice(k).unwrap(), k).unwrap())
        .collect();
    let markers_path = dir.path().join("markers.json");
    std::fs::write(&markers_path, serde_json::to_vec(&markers).unwrap()).unwrap();
    let asst = dir.path().join("assist");
    ok(&["assist", "--checkpoint", s(&ckpt), "--volume", s(&volume), "--markers", s(&markers_path), "--out", s(&asst)]);
    let labels = iohub::read_volume(&asst.join("masks.miv")).unwrap().to_mask().unwrap();
    assert_eq!(labels.dims(), &[12, 64, 64]);
    let session = json(&asst.join("session.json"));
    assert_eq!(session["segmented"].as_array().unwrap().len(), b - a + 1);
}
