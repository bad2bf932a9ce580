use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_convlora"));
    c.env("CONVLORA_THREADS", "2");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn convlora")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "convlora {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(str::trim))
        .unwrap_or_else(|| panic!("no '{key}' in:\n{text}"))
}

/// Tiny data suite plus a pretrained base with ESH, inside `dir`.
fn tiny_base(dir: &Path) -> PathBuf {
    ok(dir, &["gen-data", "--out", "data", "--seed", "3", "--size", "16", "--n-train", "8", "--n-test", "2"]);
    ok(
        dir,
        &["pretrain", "--data", "data", "--out", "pre", "--depth", "2", "--base-channels", "4", "--epochs", "2", "--batch-size", "4"],
    );
    ok(dir, &["train-esh", "--base", "pre/base.clra", "--data", "data", "--out", "esh", "--epochs", "1", "--batch-size", "4"]);
    dir.join("esh/base.clra")
}

#[test]
fn end_to_end_tiny_run_emits_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_base(d);
    ok(
        d,
        &[
            "adapt", "--base", "esh/base.clra", "--data", "data", "--out", "ad", "--target-domain", "t2-low,t5-severe",
            "--epochs", "1", "--seeds", "2", "--target-samples", "4",
        ],
    );
    let report = ok(
        d,
        &["eval", "--base", "esh/base.clra", "--adapter", "ad/t5-severe/seed0.clra", "ad/t5-severe/seed1.clra", "--data", "data", "--out", "ev"],
    );
    assert!(report.contains("aggregate domain=t5-severe runs=2"), "{report}");

    for f in [
        "data/domains.txt",
        "data/config.toml",
        "data/source/manifest.txt",
        "data/t3-moderate/test/s0011.clra",
        "pre/base.clra",
        "pre/source_bn.clra",
        "pre/train.log",
        "pre/config.toml",
        "esh/base.clra",
        "esh/esh.log",
        "esh/config.toml",
        "ad/adapt.txt",
        "ad/config.toml",
        "ad/t2-low/seed0.clra",
        "ad/t2-low/seed1.log",
        "ad/t5-severe/seed1.clra",
        "ev/report.txt",
        "ev/config.toml",
    ] {
        assert!(d.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(d.join("pre/train.log")).unwrap();
    assert!(log.lines().next().unwrap().starts_with("phase=pretrain epoch=0 step=0 loss="));
    let cfg = std::fs::read_to_string(d.join("ad/config.toml")).unwrap();
    assert!(cfg.contains("seeds = 2") && cfg.contains("depth = 2"), "{cfg}");
    assert!(!d.join("ad/t1-mild").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.toml"), "[adapt]\nrank = 2\nbogus = 1\n").unwrap();
    let out = run(d, &["gen-data", "--config", "run.toml", "--out", "data", "--size", "16"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    assert!(!d.join("data").exists());
}

#[test]
fn config_file_values_apply_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("run.toml"), "seed = 9\n[data]\nsize = 16\nn_train = 4\nn_test = 1\n").unwrap();
    ok(d, &["gen-data", "--config", "run.toml", "--out", "data", "--n-train", "6"]);
    let echoed = std::fs::read_to_string(d.join("data/config.toml")).unwrap();
    assert!(echoed.contains("seed = 9") && echoed.contains("size = 16") && echoed.contains("n_train = 6"), "{echoed}");
    let manifest = std::fs::read_to_string(d.join("data/source/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 8);
}

#[test]
fn params_on_frozen_model_reports_full_reduction() {
    let out = ok(Path::new("."), &["params", "--model", "tiny"]);
    assert_eq!(field(&out, "trainable_params "), "0");
    assert_eq!(field(&out, "reduction_percent "), "100.0000");
}

#[test]
fn first_block_trains_fewer_parameters_than_full_encoder() {
    let count = |blocks: &str| -> usize {
        let out = ok(Path::new("."), &["params", "--model", "desk", "--adapter-spec", &format!("2,{blocks}")]);
        field(&out, "trainable_params ").parse().unwrap()
    };
    let (one, all) = (count("1"), count("all"));
    assert!(one > 0 && one < all, "{one} vs {all}");

    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_base(d);
    let adapted = |blocks: &str, out: &str| -> usize {
        let text = ok(
            d,
            &[
                "adapt", "--base", "esh/base.clra", "--data", "data", "--out", out, "--target-domain", "t1-mild",
                "--blocks", blocks, "--epochs", "1", "--seeds", "1", "--target-samples", "4",
            ],
        );
        let tok = text.split_whitespace().find_map(|t| t.strip_prefix("trainable_params=")).unwrap();
        tok.parse().unwrap()
    };
    assert!(adapted("1", "b1") < adapted("all", "ball"));
}

fn image_scores(report: &str) -> Vec<(String, f64, f64)> {
    report
        .lines()
        .filter(|l| l.starts_with("image "))
        .map(|l| {
            let get = |k: &str| l.split_whitespace().find_map(|t| t.strip_prefix(k)).unwrap().to_string();
            (get("id="), get("sds=").parse().unwrap(), get("dice=").parse().unwrap())
        })
        .collect()
}

#[test]
fn merged_and_unmerged_eval_agree_per_image() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_base(d);
    ok(
        d,
        &[
            "adapt", "--base", "esh/base.clra", "--data", "data", "--out", "ad", "--target-domain", "t4-high",
            "--epochs", "2", "--seeds", "1", "--target-samples", "4", "--lr", "0.01",
        ],
    );
    ok(d, &["merge", "--base", "esh/base.clra", "--adapter", "ad/t4-high/seed0.clra", "--out", "merged/t4.clra"]);
    let a = image_scores(&ok(d, &["eval", "--base", "esh/base.clra", "--adapter", "ad/t4-high/seed0.clra", "--data", "data"]));
    let b = image_scores(&ok(d, &["eval", "--base", "merged/t4.clra", "--data", "data", "--domain", "t4-high"]));
    assert_eq!(a.len(), 2);
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.0, y.0);
        assert!((x.1 - y.1).abs() <= 1e-5 && (x.2 - y.2).abs() <= 1e-5, "{x:?} vs {y:?}");
    }
}

#[test]
fn failed_run_leaves_no_output() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_base(d);
    let out = run(d, &["adapt", "--base", "esh/base.clra", "--data", "data", "--out", "bad", "--blocks", "7"]);
    assert!(!out.status.success());
    assert!(!d.join("bad").exists());
    let out = run(d, &["adapt", "--base", "pre/base.clra", "--data", "data", "--out", "esh"]);
    assert!(!out.status.success(), "non-empty output directory must be refused");
    let leftovers: Vec<_> = std::fs::read_dir(d)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with('.'))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn adapter_for_another_base_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    tiny_base(d);
    ok(
        d,
        &["adapt", "--base", "esh/base.clra", "--data", "data", "--out", "ad", "--target-domain", "t1-mild", "--epochs", "1", "--seeds", "1"],
    );
    let out = run(d, &["eval", "--base", "pre/base.clra", "--adapter", "ad/t1-mild/seed0.clra", "--data", "data"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("expects base"));
}
