//! Drives the built `tcpa` executable end to end through a tiny config.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
# small enough to train in well under a second
image_h = 4
image_w = 4
channels = 2
patch_h = 2
patch_w = 2
embed_dim = 8
num_layers = 2
num_heads = 2
ffn_dim = 12
cls_pool_size = 3
img_pool_size = 4
epochs = 2
batch_size = 5
";

fn tcpa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcpa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn last_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().last().expect("some output");
    serde_json::from_str(line).expect("json summary line")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("tiny.cfg"),
        format!("{TINY}dataset = synth.tcpd\noutput_dir = runs\n"),
    )
    .unwrap();
    let out = tcpa(
        dir.path(),
        &[
            "gen-synth",
            "--config",
            "tiny.cfg",
            "--classes",
            "3",
            "--per-class",
            "4",
            "--out",
            "synth.tcpd",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(last_json(&out)["samples"], 12);
    dir
}

#[test]
fn train_eval_inspect_round_trip() {
    let dir = setup();
    let data_before = std::fs::read(dir.path().join("synth.tcpd")).unwrap();

    let train = tcpa(dir.path(), &["train", "--config", "tiny.cfg"]);
    assert!(
        train.status.success(),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    let summary = last_json(&train);
    assert_eq!(summary["command"], "train");
    assert_eq!(summary["steps"], 6);
    let run_dir = Path::new(summary["run_dir"].as_str().unwrap());
    let weights = dir.path().join(run_dir).join("phi.tcpw");
    assert!(weights.is_file());
    assert_eq!(
        std::fs::read(dir.path().join("synth.tcpd")).unwrap(),
        data_before
    );

    let w = weights.to_str().unwrap();
    let eval = tcpa(
        dir.path(),
        &["eval", "--config", "tiny.cfg", "--weights", w],
    );
    assert!(eval.status.success());
    let text = String::from_utf8_lossy(&eval.stdout);
    assert!(text.starts_with("accuracy "), "{text}");
    assert_eq!(last_json(&eval)["accuracy"], summary["accuracy"]);

    let inspect = tcpa(
        dir.path(),
        &[
            "inspect",
            "--config",
            "tiny.cfg",
            "--weights",
            w,
            "--sample",
            "3",
            "--out",
            "inspect",
        ],
    );
    assert!(
        inspect.status.success(),
        "{}",
        String::from_utf8_lossy(&inspect.stderr)
    );
    let report = last_json(&inspect);
    assert_eq!(report["masks_verified"], 2);
    assert_eq!(report["ranks"].as_array().unwrap().len(), 4);
    for f in [
        "attn_l1_h0.csv",
        "mask_l2.csv",
        "layout.csv",
        "ranks.csv",
        "features.csv",
    ] {
        assert!(dir.path().join("inspect").join(f).is_file(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let dir = setup();
    let code = |args: &[&str]| tcpa(dir.path(), args).status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(
        code(&["train", "--config", "tiny.cfg", "--set", "no_such_key=1"]),
        Some(1)
    );
    assert_eq!(code(&["train", "--config", "missing.cfg"]), Some(2));
    assert_eq!(
        code(&["eval", "--config", "tiny.cfg", "--weights", "missing.tcpw"]),
        Some(2)
    );
    assert_eq!(
        code(&[
            "train",
            "--config",
            "tiny.cfg",
            "--set",
            "optimizer=sgd",
            "--set",
            "learning_rate=1e300"
        ]),
        Some(3)
    );
}
