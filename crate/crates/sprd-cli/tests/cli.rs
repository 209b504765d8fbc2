//! End-to-end runs of the installed binary: synth -> train -> infer -> eval,
//! gradcheck exit codes, and flag handling.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sprd"))
}

fn work_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sprd-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_model_overrides(cmd: &mut Command) -> &mut Command {
    for kv in [
        "backbone.widths=8,16",
        "backbone.strides=4,8",
        "backbone.pyramid_width=8",
        "head.tower_depth=1",
        "anchors.base_sizes=16,32",
        "anchors.scales=1",
        "anchors.ratios=1",
        "fusion.point_width=8",
        "fusion.dilated_width=4",
        "decoder.deconv_widths=8,8,8",
        "decoder.up_widths=8,8",
        "train.batch_size=1",
        "infer.score_floor=0.001",
    ] {
        cmd.arg("--set").arg(kv);
    }
    cmd
}

#[test]
fn full_pipeline_runs_and_produces_the_documented_artifacts() {
    let dir = work_dir("pipeline");
    let ds = dir.join("ds");
    run_ok(bin().args(["synth", "--seed", "3", "--count", "3", "--image-size", "48", "--out"]).arg(&ds));
    assert!(ds.join("annotations.json").is_file());
    assert!(ds.join("img_000000.ppm").is_file());

    let ckpt = dir.join("model.sprd");
    let log = dir.join("train.csv");
    let mut train = bin();
    train
        .args(["train", "--steps", "2", "--seed", "5", "--data"])
        .arg(&ds)
        .arg("--out-ckpt")
        .arg(&ckpt)
        .arg("--log")
        .arg(&log);
    run_ok(tiny_model_overrides(&mut train));
    let csv = fs::read_to_string(&log).unwrap();
    assert!(csv.starts_with("step,L_cls,L_reg,L_mask,total,grad_norm"));
    assert_eq!(csv.lines().count(), 3, "header plus one row per step");

    let dets = dir.join("dets.json");
    run_ok(bin().args(["infer", "--ckpt"]).arg(&ckpt).arg("--data").arg(&ds).arg("--out-json").arg(&dets));
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&dets).unwrap()).unwrap();
    assert!(parsed.is_array());

    let result = dir.join("eval.json");
    let pr = dir.join("pr.csv");
    run_ok(
        bin()
            .args(["eval", "--pred-json"])
            .arg(&dets)
            .arg("--ann-json")
            .arg(&ds)
            .arg("--out")
            .arg(&result)
            .arg("--pr-csv")
            .arg(&pr),
    );
    let ev: serde_json::Value = serde_json::from_str(&fs::read_to_string(&result).unwrap()).unwrap();
    for kind in ["box", "mask"] {
        for field in ["AP", "AP50", "AP75", "AR_1", "AR_10", "AR_100"] {
            assert!(ev[kind].get(field).is_some(), "{kind}.{field} missing");
        }
    }
    let pr_text = fs::read_to_string(&pr).unwrap();
    assert!(pr_text.starts_with("kind,class,recall,precision"));
    assert_eq!(pr_text.lines().count(), 1 + 2 * 3 * 101);

    fs::remove_dir_all(&dir).ok();
}

#[test]
fn synth_is_byte_deterministic_per_seed() {
    let dir = work_dir("determinism");
    let (a, b) = (dir.join("a"), dir.join("b"));
    for out in [&a, &b] {
        run_ok(bin().args(["synth", "--seed", "7", "--count", "2", "--image-size", "48", "--out"]).arg(out));
    }
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "annotations.json"), read(&b, "annotations.json"));
    assert_eq!(read(&a, "img_000001.ppm"), read(&b, "img_000001.ppm"));
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn gradcheck_exit_codes_reflect_pass_and_failure() {
    let ok = bin().args(["gradcheck", "--ops", "sigmoid", "--trials", "5"]).output().unwrap();
    assert!(ok.status.success());
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(text.contains("sigmoid") && text.contains("ok"));

    let bad = bin().args(["gradcheck", "--ops", "not_an_op"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown op"));
}

#[test]
fn unknown_flags_exit_two_with_usage_text() {
    let out = bin().args(["synth", "--frobnicate", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = bin().arg("--no-such-global").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_rejects_bad_overrides_and_missing_data_with_diagnostics() {
    let dir = work_dir("badflags");
    let out = bin()
        .args(["train", "--data"])
        .arg(dir.join("nope"))
        .arg("--out-ckpt")
        .arg(dir.join("x.sprd"))
        .args(["--set", "no.such.key=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no.such.key"));

    let out = bin()
        .args(["train", "--data"])
        .arg(dir.join("nope"))
        .arg("--out-ckpt")
        .arg(dir.join("x.sprd"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn infer_honors_the_force_override_for_mismatched_configs() {
    let dir = work_dir("force");
    let ds = dir.join("ds");
    run_ok(bin().args(["synth", "--seed", "11", "--count", "2", "--image-size", "48", "--out"]).arg(&ds));
    let ckpt = dir.join("m.sprd");
    let mut train = bin();
    train
        .args(["train", "--steps", "1", "--data"])
        .arg(&ds)
        .arg("--out-ckpt")
        .arg(&ckpt);
    run_ok(tiny_model_overrides(&mut train));

    // A config file whose digest cannot match the tiny trained model.
    let other = dir.join("other.cfg");
    fs::write(&other, sprd_core::RunConfig::default().to_text()).unwrap();

    let dets = dir.join("d.json");
    let refused = bin()
        .args(["infer", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&ds)
        .arg("--out-json")
        .arg(&dets)
        .arg("--config")
        .arg(&other)
        .output()
        .unwrap();
    assert_eq!(refused.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&refused.stderr).contains("digest"));

    let forced = bin()
        .args(["infer", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&ds)
        .arg("--out-json")
        .arg(&dets)
        .arg("--config")
        .arg(&other)
        .arg("--force")
        .output()
        .unwrap();
    assert!(forced.status.success(), "{}", String::from_utf8_lossy(&forced.stderr));
    assert!(dets.is_file());
    fs::remove_dir_all(&dir).ok();
}
