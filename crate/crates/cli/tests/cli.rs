use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vhgm(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vhgm")).arg("--workdir").arg(workdir).args(args).output().expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).expect("structured error")
}

#[test]
fn generate_is_reproducible_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["one", "two"] {
        let o = vhgm(dir.path(), &["--seed", "7", "generate", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &str| std::fs::read_to_string(dir.path().join(d).join("checksums.txt")).unwrap();
    assert_eq!(read("one"), read("two"));
    assert!(read("one").starts_with("# format_version"));
    assert_eq!(read("one").lines().count(), 1 + 2 + 9);

    let o = vhgm(dir.path(), &["--seed", "8", "generate", "--out", "three"]);
    assert!(o.status.success());
    assert_ne!(read("one"), read("three"));
}

#[test]
fn default_hivae_config_records_the_published_settings() {
    let dir = tempfile::tempdir().unwrap();
    let o = vhgm(dir.path(), &["train", "--model", "hivae", "--dry-run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/hivae/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["format_version"], 1);
    assert_eq!(cfg["model_kind"], "hivae");
    assert_eq!(cfg["train"]["learning_rate"], 4.6e-5);
    assert_eq!(cfg["train"]["mask_ratio"], 0.99);
    assert_eq!(cfg["train"]["beta_s_max"], 0.0002);
    assert_eq!(cfg["train"]["beta_z_max"], 0.00007);
}

#[test]
fn flags_beat_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"train": {"epochs": 9, "batch_size": 64}, "model": {"d_model": 48}}"#,
    )
    .unwrap();
    let o = vhgm(
        dir.path(),
        &["--seed", "3", "train", "--model", "mae", "--config", "c.json", "--epochs", "4", "--dry-run", "--out", "r"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["train"]["epochs"], 4);
    assert_eq!(cfg["train"]["batch_size"], 64);
    assert_eq!(cfg["train"]["seed"], 3);
    assert_eq!(cfg["model"]["d_model"], 48);
}

#[test]
fn validation_failures_exit_2_with_a_structured_message() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["train", "--model", "hivae", "--mask-ratio", "1.5", "--dry-run"],
        &["train", "--model", "transformer"],
        &["evaluate", "--checkpoint", "missing.json"],
        &["evaluate", "--baseline", "mode", "--data", "nowhere"],
        &["probe", "--checkpoint", "missing.json", "--x", "a", "--y", "b"],
        &["no-such-command"],
    ];
    for args in cases {
        let o = vhgm(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let e = stderr_json(&o);
        assert_eq!(e["error"]["kind"], "validation", "{args:?}");
        assert!(!e["error"]["message"].as_str().unwrap().is_empty());
    }
    std::fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let o = vhgm(dir.path(), &["train", "--model", "hivae", "--config", "bad.json", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("taken"), "a file, not a directory").unwrap();
    let o = vhgm(dir.path(), &["generate", "--out", "taken"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"]["kind"], "runtime");
}

#[test]
fn baselines_write_versioned_reports() {
    let dir = tempfile::tempdir().unwrap();
    assert!(vhgm(dir.path(), &["generate"]).status.success());
    for (b, id) in [("mode", "mode"), ("mode-mean", "mode-mean")] {
        let o = vhgm(dir.path(), &["evaluate", "--baseline", b]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let report: Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("reports").join(id).join("report.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report["format_version"], 1);
        assert_eq!(report["test_missing_rate"], 0.99);
        assert!(report["total"].as_f64().unwrap() > 0.0);
        let csv = std::fs::read_to_string(dir.path().join("reports").join(id).join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 48 + 5 + 2);
    }
}
