use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geo_repnet::config::RunConfigFile;
use geo_repnet::{checkpoint, json};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geo-repnet"))
        .args(args)
        .env_remove("GEO_REPNET_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small 32×32 dataset root with train and val splits.
fn small_data(root: &Path) -> PathBuf {
    let data = root.join("data");
    ok(&["gen-data", "--out", s(&data), "--scale", "0.01", "--val-scale", "0.02", "--size", "32", "--seed", "3"]);
    data
}

fn micro_config(root: &Path, edit: impl FnOnce(&mut RunConfigFile)) -> PathBuf {
    let mut cfg = RunConfigFile::micro();
    cfg.train.epochs = 1;
    cfg.train.batch_size = 8;
    edit(&mut cfg);
    let path = root.join(format!("cfg-{}.json", fs::read_dir(root).unwrap().count()));
    json::write_canonical(&cfg, &path).unwrap();
    path
}

#[test]
fn gen_data_is_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    let summary = ok(&["gen-data", "--out", s(&a), "--scale", "0.01", "--val-scale", "0.01", "--size", "16"]);
    ok(&["gen-data", "--out", s(&b), "--scale", "0.01", "--val-scale", "0.01", "--size", "16"]);
    assert_eq!(summary["train"], 70);
    for split in ["train", "val"] {
        let mut names: Vec<_> = fs::read_dir(a.join(split)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        for n in names {
            assert_eq!(fs::read(a.join(split).join(&n)).unwrap(), fs::read(b.join(split).join(&n)).unwrap());
        }
    }
}

#[test]
fn train_eval_reparam_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path());
    let cfg = micro_config(root.path(), |_| {});
    let out = root.path().join("run");
    let summary = ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--quiet"]);
    assert_eq!(summary["epochs"], 1);
    assert!(summary["validation"]["accuracy"].is_number());
    for f in ["checkpoint.grck", "history.json", "metrics.json", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ckpt = out.join("checkpoint.grck");
    let val = data.join("val");
    let before = ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&val)]);
    assert_eq!(before, summary["validation"]);

    let fused = root.path().join("fused").join("model.grck");
    let r = ok(&["reparam", "--checkpoint", s(&ckpt), "--out", s(&fused)]);
    assert_eq!(r["blocks"], 5);
    assert!(r["conv_invocations_after"].as_u64() < r["conv_invocations_before"].as_u64());
    let after = ok(&["eval", "--checkpoint", s(&fused), "--data", s(&val)]);
    let (a, b) = (before["accuracy"].as_f64().unwrap(), after["accuracy"].as_f64().unwrap());
    assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
    assert_eq!(code(&["reparam", "--checkpoint", s(&fused), "--out", s(&root.path().join("x.grck"))]), 2);

    let bench = ok(&["bench", "--checkpoint", s(&ckpt), "--fused", s(&fused), "--iters", "2"]);
    assert!(bench.is_object());
}

#[test]
fn cli_toggles_match_a_config_without_the_components() {
    let root = tempfile::tempdir().unwrap();
    let data = small_data(root.path());
    let full = micro_config(root.path(), |_| {});
    let plain = micro_config(root.path(), |c| {
        c.model.enable_dgpg = false;
        c.model.gema.enable_gsa = false;
        c.model.gema.enable_ema = false;
    });
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    ok(&["train", "--config", s(&full), "--data", s(&data), "--out", s(&a), "--quiet", "--no-dgpg", "--no-gsa", "--no-ema"]);
    ok(&["train", "--config", s(&plain), "--data", s(&data), "--out", s(&b), "--quiet"]);
    assert_eq!(fs::read(a.join("checkpoint.grck")).unwrap(), fs::read(b.join("checkpoint.grck")).unwrap());
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());
    let model = checkpoint::load(a.join("checkpoint.grck")).unwrap();
    assert!(model.dgpg.is_none() && model.gema.gsa.is_none() && model.gema.ema.is_none());
}

#[test]
fn gradcheck_reports_and_fails_on_tight_tolerances() {
    let summary = ok(&["gradcheck"]);
    assert_eq!(summary["passed"], true);
    assert!(summary["max_rel_error"].as_f64().unwrap() <= 1e-4);
    assert!(summary["groups"].as_object().unwrap().len() > 20);
    assert_eq!(code(&["gradcheck", "--tol", "1e-30"]), 1);
    assert_eq!(code(&["gradcheck", "--tol", "0"]), 2);
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let missing = root.path().join("missing.grck");
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["train", "--factor", "6"]), 2);
    assert_eq!(code(&["train", "--epochs", "0", "--out", s(root.path())]), 1);
    assert_eq!(code(&["bench", "--checkpoint", s(&missing), "--iters", "0"]), 2);
    assert_eq!(code(&["eval", "--checkpoint", s(&missing)]), 1);
    assert_eq!(code(&["gen-data", "--out", s(root.path()), "--scale", "0"]), 2);
    assert_eq!(code(&["--help"]), 0);
    fs::write(&missing, b"GRCK").unwrap();
    let out = run(&["eval", "--checkpoint", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte 0"));
}
