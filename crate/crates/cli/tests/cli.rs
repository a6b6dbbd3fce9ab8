use std::path::Path;
use std::process::{Command, Output};

fn aeml(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aeml")).args(args).env("AEML_RUN_DIR", root).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let desk = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap();
    let mut cfg: toml::Table = desk.parse().unwrap();
    let set = |cfg: &mut toml::Table, section: &str, key: &str, value: toml::Value| {
        cfg[section].as_table_mut().unwrap().insert(key.into(), value);
    };
    set(&mut cfg, "grid", "cells", toml::Value::Array(vec![16.into(), 16.into()]));
    set(&mut cfg, "time", "final_time", 0.5.into());
    set(&mut cfg, "newton", "max_newton_iters", 2.into());
    set(&mut cfg, "training", "epochs", 2.into());
    set(&mut cfg, "training", "finetune_epochs", 1.into());
    set(&mut cfg, "datagen", "samples", 2.into());
    set(&mut cfg, "datagen", "keep_fraction", 0.5.into());
    set(&mut cfg, "dias", "samples", 4.into());
    set(&mut cfg, "dias", "rank", 2.into());
    let path = dir.join("small.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn selftest_passes() {
    let root = tempfile::tempdir().unwrap();
    let out = aeml(root.path(), &["selftest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn bad_arguments_exit_with_two() {
    let root = tempfile::tempdir().unwrap();
    assert_eq!(aeml(root.path(), &["invert", "--store", "tape"]).status.code(), Some(2));
    assert_eq!(aeml(root.path(), &["invert", "--store", "full", "--config", "/nonexistent.toml"]).status.code(), Some(2));
    assert_eq!(aeml(root.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn pipeline_writes_comparable_runs() {
    let root = tempfile::tempdir().unwrap();
    let cfg = small_config(root.path());
    let ok = |args: &[&str]| {
        let out = aeml(root.path(), args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["synth-data", "--config", &cfg, "--seed", "3", "--run-id", "data"]);
    let data = root.path().join("data");
    ok(&["train", "--config", &cfg, "--data", data.to_str().unwrap(), "--run-id", "codec"]);
    let codec = root.path().join("codec/codec.aemw");
    assert!(codec.exists());
    ok(&["invert", "--config", &cfg, "--store", "checkpoint", "--run-id", "ckpt"]);
    ok(&["invert", "--config", &cfg, "--store", "full", "--run-id", "full"]);
    ok(&["invert", "--config", &cfg, "--store", "ae", "--codec-file", codec.to_str().unwrap(), "--run-id", "ae"]);
    ok(&["invert", "--config", &cfg, "--store", "quant", "--eta", "1e-4", "--run-id", "quant"]);
    ok(&["dias", "--config", &cfg, "--run-id", "dias"]);
    for run in ["ckpt", "full", "ae", "quant", "dias"] {
        for file in ["u.aefd", "history.csv", "config.toml", "run.json", "u.svg"] {
            assert!(root.path().join(run).join(file).exists(), "{run}/{file}");
        }
    }
    ok(&["compare", "--runs", "full,ckpt,ae,quant"]);
    let report = std::fs::read_to_string(root.path().join("compare/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    assert!(root.path().join("compare/convergence.svg").exists());

    let full = std::fs::read(root.path().join("full/u.aefd")).unwrap();
    let ckpt = std::fs::read(root.path().join("ckpt/u.aefd")).unwrap();
    assert_eq!(full, ckpt);
}
