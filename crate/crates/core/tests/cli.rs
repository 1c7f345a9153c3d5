// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use lmm_sae::pipeline::{demo_config, DemoOptions};

fn lmm_sae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmm-sae"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_world(dir: &Path) {
    let mut opts = DemoOptions::default();
    opts.world.n_images = 24;
    opts.world.images_per_shard = 10;
    opts.train.steps = 50;
    demo_config(dir, &opts).unwrap();
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stages_run_in_order_and_rerun_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    for stage in [
        "cache-activations",
        "train",
        "encode-cache",
        "top-images",
        "explain",
        "refine",
        "categorize",
    ] {
        let o = lmm_sae(dir.path(), &["-c", "demo.toml", stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let o = lmm_sae(dir.path(), &["-c", "demo.toml", "evaluate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stderr(&o);
    assert!(text.lines().any(|l| l.starts_with("concept\tiou")), "{text}");

    let params = dir.path().join("out/sae.prm");
    let before = std::fs::read(&params).unwrap();
    let o = lmm_sae(dir.path(), &["-c", "demo.toml", "train"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&params).unwrap(), before);
}

#[test]
fn zero_steps_writes_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    let o = lmm_sae(dir.path(), &["-c", "demo.toml", "cache-activations"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = lmm_sae(dir.path(), &["-c", "demo.toml", "--set", "train.steps=0", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let p = lmm_sae::sae::SaeParams::load(dir.path().join("out/sae.prm")).unwrap();
    assert_eq!((p.d_sae(), p.k()), (32, 1));
}

#[test]
fn steering_changes_generation() {
    let dir = tempfile::tempdir().unwrap();
    small_world(dir.path());
    for stage in ["cache-activations", "train"] {
        assert!(lmm_sae(dir.path(), &["-c", "demo.toml", stage]).status.success());
    }
    let o = lmm_sae(
        dir.path(),
        &[
            "-c",
            "demo.toml",
            "--set",
            "steer.feature=0",
            "--set",
            "steer.value=500",
            "steer",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stderr(&o);
    assert!(
        text.contains("unsteered:") && text.contains("steered (feature 0 = 500)"),
        "{text}"
    );
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let o = lmm_sae(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--config"));

    let o = lmm_sae(dir.path(), &["-c", "absent.toml", "train"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.toml"));

    small_world(dir.path());
    let o = lmm_sae(
        dir.path(),
        &["-c", "demo.toml", "--set", "train.no_such_key=1", "train"],
    );
    assert_eq!(o.status.code(), Some(1));

    let o = lmm_sae(
        dir.path(),
        &[
            "-c",
            "demo.toml",
            "--set",
            "host.kind=exchange",
            "--set",
            "host.addr=127.0.0.1:9",
            "cache-activations",
        ],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
