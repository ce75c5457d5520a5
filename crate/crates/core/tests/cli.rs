use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_omgsr");

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.toml")
}

fn omgsr(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .arg("--config")
        .arg(fixture())
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let help = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert_eq!(
        omgsr(dir.path(), &["no-such-command"]).status.code(),
        Some(1)
    );
    assert_eq!(
        omgsr(dir.path(), &["chunk-plan", "--patch", "8"])
            .status
            .code(),
        Some(1)
    );
    let missing = omgsr(
        dir.path(),
        &[
            "restore",
            "--checkpoint",
            "absent",
            "--input",
            "x.png",
            "--out",
            "y.png",
        ],
    );
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    let bad_plan = omgsr(
        dir.path(),
        &["chunk-plan", "--size", "100", "--patch", "224"],
    );
    assert_eq!(bad_plan.status.code(), Some(2));
}

#[test]
fn chunk_plan_reports_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = omgsr(
        dir.path(),
        &[
            "chunk-plan",
            "--size",
            "512",
            "--patch",
            "224",
            "--overlap",
            "32",
            "--out",
            "plan.json",
        ],
    );
    assert!(out.status.success());
    let plan: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["starts_y"].as_array().unwrap().len(), 3);
    assert_eq!(plan["starts_x"].as_array().unwrap().len(), 3);
}

#[test]
fn pretrain_finetune_restore_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(omgsr(
        d,
        &["degrade", "--out", "set", "--count", "2", "--size", "256"]
    )
    .status
    .success());
    assert!(omgsr(d, &["pretrain", "--out", "pre"]).status.success());
    assert!(d.join("pre/manifest.json").exists());
    assert!(omgsr(
        d,
        &[
            "finetune",
            "--checkpoint",
            "pre",
            "--t-star",
            "195",
            "--out",
            "ft"
        ]
    )
    .status
    .success());
    let log = std::fs::read_to_string(d.join("ft/loss.csv")).unwrap();
    assert!(log.starts_with("step,lan,mse,oc_lpips,gan_g,gan_d,total\n"));
    assert_eq!(log.lines().count(), 1 + 6);

    let out = omgsr(
        d,
        &[
            "restore",
            "--checkpoint",
            "ft/final",
            "--input",
            "set/lq/00000.png",
            "--out",
            "r.png",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let img = image::open(d.join("r.png")).unwrap();
    assert_eq!((img.width(), img.height()), (256, 256));

    let out = omgsr(
        d,
        &[
            "evaluate",
            "--checkpoint",
            "ft/final",
            "--data",
            "set",
            "--out",
            "eval.csv",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(d.join("eval.csv")).unwrap();
    assert!(csv.starts_with("file,psnr,ssim,pdist\n00000.png,"));
    assert_eq!(csv.lines().count(), 3);
}
