use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
width = 8
heads = 2
encoder_layers = 1
[phase1]
max_epochs = 2
[phase2]
max_epochs = 1
chunks_per_epoch = 2
[phase3]
max_epochs = 1
chunks_per_epoch = 2
[retrieval]
k = 8
context_size = 60
chunk_size = 40
"#;

fn iclct(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        std::fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_iclct"))
        .args(args)
        .args(["--synthetic", "1500", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.join("run"))
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let o = Command::new(env!("CARGO_BIN_EXE_iclct")).args(["train", "--phase", "4"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_iclct")).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = iclct(dir.path(), &["train", "--phase", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).lines().any(|l| l.starts_with("error: ")));
}

#[test]
fn credibility_analysis_reports_success() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&iclct(dir.path(), &["analyze", "credibility", "--trials", "5"]));
    assert!(out.contains("all checks passed"), "{out}");
}

#[test]
fn synthetic_pipeline_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    stdout(&iclct(dir.path(), &["prepare"]));
    stdout(&iclct(dir.path(), &["train", "--phase", "1"]));
    stdout(&iclct(dir.path(), &["train", "--phase", "2"]));
    let eval = stdout(&iclct(dir.path(), &["evaluate", "--mode", "icl"]));
    assert!(eval.contains("out-of-sample"), "{eval}");
    stdout(&iclct(dir.path(), &["retrieve"]));
    stdout(&iclct(dir.path(), &["analyze", "attention"]));
    stdout(&iclct(dir.path(), &["train", "--phase", "3"]));
    stdout(&iclct(dir.path(), &["analyze", "pca"]));
    stdout(&iclct(dir.path(), &["analyze", "neighbors", "--corpus", "300"]));
    for f in ["dataset.bin", "phase1.ckpt", "phase2.ckpt", "phase3.ckpt", "neighbors.cache", "report.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("phase,epoch,train_loss,val_loss\n"));
    let attention = std::fs::read_to_string(run.join("attention.csv")).unwrap();
    assert!(attention.starts_with("i,j,layer,weight\n"));
    let pca = std::fs::read_to_string(run.join("pca_projections.csv")).unwrap();
    assert!(pca.starts_with("instance,stage,pc1,pc2\n"));
    assert_eq!(pca.lines().count(), 61);
    let nb = std::fs::read_to_string(run.join("neighbors.csv")).unwrap();
    assert!(nb.starts_with("probe,stage,rank,euclidean_distance,id,Exposure,"));

    let input = dir.path().join("in.csv");
    let mut w = csv::Writer::from_path(&input).unwrap();
    let head = ["IDpol", "ClaimNb", "Exposure", "Area", "VehPower", "VehAge", "DrivAge", "BonusMalus", "VehBrand", "VehGas", "Density", "Region"];
    w.write_record(head).unwrap();
    w.write_record(["1", "0", "0.5", "C", "6", "3", "40", "50", "B12", "Regular", "900", "R99"]).unwrap();
    w.flush().unwrap();
    let output = dir.path().join("pred.csv");
    stdout(&iclct(
        dir.path(),
        &["predict", "--input", input.to_str().unwrap(), "--output", output.to_str().unwrap()],
    ));
    let pred = std::fs::read_to_string(output).unwrap();
    assert_eq!(pred.lines().count(), 2, "{pred}");
}

#[test]
fn zero_shot_split_only_prints_both_sets() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&iclct(dir.path(), &["zero-shot", "--stage", "split-only"]));
    assert!(out.contains("relabel") || out.contains("Relabel"), "{out}");
}
