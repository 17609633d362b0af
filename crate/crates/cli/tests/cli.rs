use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use atlasforge::data::read_image;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atlasforge"))
        .args(args)
        .env("ATLASFORGE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A 4-class, class-scale dataset of 32×32 glyphs and a short training config.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    ok(&run(&[
        "synth-data",
        "--kind",
        "class-scale",
        "--n",
        "10",
        "--classes",
        "4",
        "--size",
        "32",
        "--seed",
        "3",
        "--out",
        s(&data),
    ]));
    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, r#"{"batch_size": 2, "iterations": 3, "mode": "conditional"}"#).unwrap();
    (data.join("images"), cfg)
}

#[test]
fn conditional_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(dir.path());
    let run_dir = dir.path().join("run");
    ok(&run(&[
        "train",
        "--config",
        s(&cfg),
        "--dataset",
        s(&data),
        "--seed",
        "7",
        "--out",
        s(&run_dir),
    ]));
    let ckpt = run_dir.join("checkpoint.dtc");
    assert!(ckpt.exists() && run_dir.join("log.csv").exists() && run_dir.join("resolved_config.json").exists());

    let t = dir.path().join("t.pgm");
    ok(&run(&[
        "template",
        "--checkpoint",
        s(&ckpt),
        "--class",
        "3",
        "--scale",
        "1.0",
        "--out",
        s(&t),
    ]));
    let img = read_image(&t).unwrap();
    assert_eq!(img.dims(), (32, 32));

    let reg = dir.path().join("reg");
    let image = data.join("img_00000.pgm");
    ok(&run(&[
        "register",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&image),
        "--class",
        "0",
        "--scale",
        "1.0",
        "--out",
        s(&reg),
    ]));
    for f in [
        "velocity.csv",
        "phi.csv",
        "phi_inv.csv",
        "warped.pgm",
        "resolved_config.json",
    ] {
        assert!(reg.join(f).exists(), "{f}");
    }
    let inv = dir.path().join("inv");
    ok(&run(&[
        "invert",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&image),
        "--class",
        "0",
        "--scale",
        "1.0",
        "--out",
        s(&inv),
    ]));
    assert!(inv.join("phi_inv.csv").exists());

    let eval = dir.path().join("eval");
    ok(&run(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&data),
        "--out",
        s(&eval),
    ]));
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("group,"));

    let pca = dir.path().join("pca");
    ok(&run(&[
        "pca",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&data),
        "--split",
        "train",
        "--class",
        "1",
        "--scale",
        "1.0",
        "--out",
        s(&pca),
    ]));
    assert!(pca.join("pc0.pgm").exists() || pca.join("pc1.pgm").exists());
}

#[test]
fn training_twice_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&run(&[
            "train",
            "--config",
            s(&cfg),
            "--dataset",
            s(&data),
            "--seed",
            "7",
            "--out",
            s(out),
        ]));
    }
    let la = std::fs::read(a.join("log.csv")).unwrap();
    assert_eq!(la, std::fs::read(b.join("log.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("checkpoint.dtc")).unwrap(),
        std::fs::read(b.join("checkpoint.dtc")).unwrap()
    );
}

#[test]
fn input_dataset_is_left_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = fixture(dir.path());
    let listing = |p: &Path| {
        let mut v: Vec<_> = std::fs::read_dir(p).unwrap().map(|e| e.unwrap().file_name()).collect();
        v.sort();
        v
    };
    let before = listing(&data);
    let csv = std::fs::read(data.join("attributes.csv")).unwrap();
    ok(&run(&[
        "train",
        "--config",
        s(&cfg),
        "--dataset",
        s(&data),
        "--out",
        s(&dir.path().join("r")),
    ]));
    assert_eq!(listing(&data), before);
    assert_eq!(std::fs::read(data.join("attributes.csv")).unwrap(), csv);
}

#[test]
fn grad_check_passes_at_the_default_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["grad-check", "--seed", "7", "--out", s(dir.path())]);
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("max relative error"), "{stdout}");
    assert!(dir.path().join("gradcheck.csv").exists());
}

#[test]
fn usage_and_validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let missing = dir.path().join("absent.dtc");
    let out = run(&[
        "template",
        "--checkpoint",
        s(&missing),
        "--out",
        s(&dir.path().join("t.pgm")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.dtc"));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
