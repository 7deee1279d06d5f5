use std::path::Path;
use std::process::{Command, Output};

fn involute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_involute")).args(args).output().expect("spawn involute")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, instances: &str) {
    let o = involute(&[
        "gen-data", "--desk", "--instances", instances, "--views", "8", "--n-surface", "128", "--seed", "3", "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn unknown_flags_are_validation_errors() {
    let o = involute(&["train", "--no-such-flag"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--no-such-flag"));
    assert_eq!(code(&involute(&["frobnicate"])), 1);
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&involute(&["--help"])), 0);
    let v = involute(&["--version"]);
    assert_eq!(code(&v), 0);
    let long = involute(&["--version"]);
    assert!(String::from_utf8_lossy(&long.stdout).contains("involute"));
}

#[test]
fn missing_inputs_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = involute(&["eval", "--checkpoint", "/definitely/missing.ivck", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--checkpoint"), "{}", stderr(&o));
    let o = involute(&["train", "--dataset", "/definitely/missing", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--dataset"), "{}", stderr(&o));
}

#[test]
fn bad_config_values_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"instances": 0}"#).unwrap();
    let o = involute(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    std::fs::write(&cfg, r#"{"instances": 2, "bogus_key": 1}"#).unwrap();
    let o = involute(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_manifest_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "3");
    assert!(dir.path().join("manifest.json").exists());
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["command"], "gen-data");
    assert_eq!(resolved["config"]["seed"], 3);
    assert_eq!(resolved["config"]["n_surface"], 128);
    assert_eq!(std::fs::read_dir(dir.path().join("obs")).unwrap().count(), 24);
}

#[test]
fn train_eval_extract_correspond_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "4");
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let o = involute(&[
        "train", "--desk", "--dataset", data.to_str().unwrap(), "--mode", "no_invo", "--iterations", "6",
        "--batch-size", "2", "--checkpoint-every", "4", "--out", &p("run"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("run/loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);
    assert!(log.lines().next().unwrap().contains("L_invo"));
    assert!(dir.path().join("run/checkpoints/iter_0000004.ivck").exists());

    let ckpt = p("run/final.ivck");
    let o = involute(&["eval", "--checkpoint", &ckpt, "--corr-pairs", "1", "--n-points", "128", "--out", &p("eval")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["metrics.json", "metrics.csv", "loss_curves.svg", "resolved_config.json"] {
        assert!(dir.path().join("eval").join(f).exists(), "{f}");
    }

    let obs = data.join("obs");
    let first = std::fs::read_dir(&obs).unwrap().map(|e| e.unwrap().path()).min().unwrap();
    let o = involute(&[
        "extract", "--checkpoint", &ckpt, "--input", first.to_str().unwrap(), "--n-points", "64", "--mesh",
        "--resolution", "24", "--eps", "0.05", "--out", &p("ex"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("ex/points.ply").exists() && dir.path().join("ex/mesh.ply").exists());

    let gt = |i: &str| data.join("gt").join(format!("{i}.pudf")).to_str().unwrap().to_string();
    let o = involute(&["correspond", "--checkpoint", &ckpt, "--source", &gt("0000"), "--target", &gt("0001"), "--out", &p("co")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("co/correspondences.csv")).unwrap();
    assert!(csv.lines().count() > 1);

    let o = involute(&["report", "--run", &p("eval"), "--out", &p("rep")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir.path().join("rep/summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().contains("no_invo"));
}

#[test]
fn selftest_quick_passes() {
    let o = involute(&["selftest", "--sequential"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 15);
    assert!(!out.contains("FAIL"));
}
