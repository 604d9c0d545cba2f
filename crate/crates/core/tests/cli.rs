mod common;

use std::path::Path;
use std::process::Command;

use cofi::compile::Checkpoint;

fn cofi(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cofi")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    let out = cofi(args);
    out.status.code().unwrap_or_else(|| panic!("killed: {out:?}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["train", "--seed", "x"]), 1);
    assert_eq!(code(&["report", "--run-dir", "/nonexistent", "--format", "yaml"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[model]\nn_layers = 0\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&cfg), "--out-dir", s(dir.path())]), 1);
}

#[test]
fn end_to_end_and_gate_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("c.toml");
    std::fs::write(&cfg, common::small().to_toml_string().unwrap()).unwrap();
    let run = d.join("run");
    let c = s(&cfg);
    let r = s(&run);

    assert_eq!(code(&["train", "--config", c, "--out-dir", r]), 0);
    let teacher = run.join("teacher.ckpt");
    assert!(teacher.exists());
    let out = cofi(&["prune", "--config", c, "--out-dir", r, "--teacher", s(&teacher), "--target-sparsity", "0.4", "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["student.ckpt", "compact.ckpt", "report.json", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let shown = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(shown.contains("target_sparsity = 0.4") && shown.contains("seed = 2"));

    let student = run.join("student.ckpt");
    let ext = d.join("ext");
    assert_eq!(code(&["extract", "--checkpoint", s(&student), "--out-dir", s(&ext)]), 0);
    assert_eq!(
        std::fs::read(ext.join("compact.ckpt")).unwrap(),
        std::fs::read(run.join("compact.ckpt")).unwrap()
    );

    let bench = ["bench", "--checkpoint", s(&student), "--out-dir", r];
    assert_eq!(code(&bench), 0);
    assert!(run.join("latency.json").exists());
    assert_eq!(code(&["bench", "--checkpoint", s(&student), "--iters", "5"]), 1);

    let rep = d.join("rep");
    assert_eq!(code(&["report", "--run-dir", r, "--out-dir", s(&rep), "--format", "csv"]), 0);
    assert!(rep.join("layers.csv").exists());
    assert_eq!(code(&["report", "--run-dir", r, "--out-dir", s(&rep), "--format", "text"]), 0);
    let text = std::fs::read_to_string(rep.join("report.txt")).unwrap();
    assert!(text.contains("speedup"));

    // a compact model whose weights drifted from the masked one
    let mut ck = Checkpoint::load(run.join("compact.ckpt")).unwrap();
    let t = &mut ck.tensors.last_mut().unwrap().1;
    t.data_mut()[0] += 0.5;
    let bad = d.join("bad.ckpt");
    ck.save(&bad).unwrap();
    let gate = ["bench", "--checkpoint", s(&student), "--compact", s(&bad), "--out-dir", r];
    assert_eq!(code(&gate), 3);
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = common::small();
    c.training.lr_teacher = 1e30;
    c.training.clip_norm = f64::INFINITY;
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, c.to_toml_string().unwrap()).unwrap();
    assert_eq!(code(&["train", "--config", s(&cfg), "--out-dir", s(dir.path())]), 2);
}
