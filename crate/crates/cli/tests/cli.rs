use std::path::Path;
use std::process::{Command, Output};

fn pcqa(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_pcqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "pcqa {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const PRETRAIN: &str = r#"
epochs = 1
batch = 8
views = 2

[render]
width = 16
height = 16
splat_radius = 1

[encoder]
patch = 4
height = 16
width = 16
embed = 6
blocks = 1
out_dim = 4
activation = "relu"
"#;

const TRAIN: &str = r#"
[model]
views = 2
splat_radius = 1

[model.grid]
grids = 4
patch = 4
height = 16
width = 16

[model.distortion]
patch = 4
height = 16
width = 16
embed = 6
blocks = 1
out_dim = 4
activation = "relu"

[train]
epochs = 2
batch = 8
inner_steps = 2
estimator_hidden = [8]
"#;

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = d.join("corpus");
    pcqa(&["synth", "--out", s(&corpus), "--contents", "3", "--points", "300", "--seed", "4"]);
    let manifest = corpus.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 3 * 7);

    let views = d.join("views");
    let ply = corpus.join("references").join("c00_sphere.ply");
    pcqa(&["render", "--input", s(&ply), "--out", s(&views), "--views", "6", "--size", "64", "--splat", "1"]);
    for n in 0..6 {
        assert!(views.join(format!("view_{n}.png")).exists());
        assert!(views.join(format!("view_{n}.mask")).exists());
    }
    assert!(views.join("poses.json").exists());

    let map = d.join("map.png");
    pcqa(&["minipatch", "--views", s(&views), "--out", s(&map), "--grids", "8", "--patch", "8", "--seed", "3"]);
    let prov = std::fs::read_to_string(d.join("map.csv")).unwrap();
    assert_eq!(prov.lines().count(), 1 + 64);
    let first = std::fs::read(&map).unwrap();
    pcqa(&["minipatch", "--views", s(&views), "--out", s(&map), "--grids", "8", "--patch", "8", "--seed", "3"]);
    assert_eq!(first, std::fs::read(&map).unwrap());

    let pre_cfg = d.join("pretrain.toml");
    std::fs::write(&pre_cfg, PRETRAIN).unwrap();
    let pre = d.join("pre");
    pcqa(&["pretrain", "--manifest", s(&manifest), "--config", s(&pre_cfg), "--out", s(&pre), "--threads", "2"]);
    let losses = std::fs::read_to_string(pre.join("pretrain_loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 2);

    let train_cfg = d.join("train.toml");
    std::fs::write(&train_cfg, TRAIN).unwrap();
    let model = d.join("model");
    let ckpt = pre.join("pretrain.ckpt");
    pcqa(&["train", "--manifest", s(&manifest), "--content-ckpt", s(&ckpt), "--config", s(&train_cfg), "--out", s(&model)]);
    let epochs = std::fs::read_to_string(model.join("epoch_log.csv")).unwrap();
    assert_eq!(epochs.lines().count(), 3);
    assert!(model.join("model.toml").exists());

    let folds = d.join("folds.json");
    std::fs::write(&folds, r#"{"kind": "k_fold", "k": 3}"#).unwrap();
    let report = d.join("report").join("report.json");
    pcqa(&["eval", "--ckpt", s(&model.join("model.ckpt")), "--manifest", s(&manifest), "--folds", s(&folds), "--out", s(&report)]);
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["folds"].as_array().unwrap().len(), 3);
    assert!(json["mean"]["srocc"].as_f64().unwrap().abs() <= 1.0);
    assert!(report.with_extension("csv").exists());
}

#[test]
fn mi_bench_csv() {
    let out = pcqa(&["mi-bench", "--rho", "0.5", "--dim", "1", "--samples", "64", "--steps", "5", "--eval-batches", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "rho,dim,true_mi,estimate,std_err,final_nll");
    assert_eq!(lines.len(), 2);
    let fields: Vec<f64> = lines[1].split(',').map(|f| f.parse().unwrap()).collect();
    assert!((fields[2] - 0.143841).abs() < 1e-6);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ply");
    std::fs::write(&bad, b"not a ply").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pcqa"))
        .args(["render", "--input", s(&bad), "--out", s(&dir.path().join("v"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ply") || String::from_utf8_lossy(&out.stderr).contains("PLY"));
}
