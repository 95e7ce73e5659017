use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_modmae");

const TINY: &str = r#"{
  "d_enc": 16, "d_dec": 8, "layers_enc": 1, "layers_dec": 1, "heads": 2, "mlp_ratio": 2,
  "modality_dim": 8, "patch_size": [4, 4, 4], "max_grid": [4, 4, 4], "target_shape": [16, 16, 16],
  "synth_dims": [16, 16, 16], "synth_cases": 4, "synth_modalities": ["t1", "flair"], "epochs": 2
}"#;

fn modmae(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("tiny.json"), TINY).unwrap();
    d
}

#[test]
fn help_lists_every_command() {
    let d = setup();
    let out = modmae(d.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for c in ["build-dict", "synth-data", "pretrain", "gradcheck", "finetune", "evaluate", "impute", "report"] {
        assert!(text.contains(c), "{c} missing from help");
    }
    assert!(text.contains("--lr-max"));
}

#[test]
fn exit_codes() {
    let d = setup();
    assert_eq!(modmae(d.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(modmae(d.path(), &[]).status.code(), Some(2));
    assert_eq!(modmae(d.path(), &["synth-data", "--bogus"]).status.code(), Some(2));
    std::fs::write(d.path().join("broken.json"), "{ not json").unwrap();
    assert_eq!(modmae(d.path(), &["synth-data", "--config", "broken.json"]).status.code(), Some(3));
    std::fs::write(d.path().join("unknown.json"), r#"{"learning_rate": 1}"#).unwrap();
    assert_eq!(modmae(d.path(), &["synth-data", "--config", "unknown.json"]).status.code(), Some(3));
    assert_eq!(modmae(d.path(), &["synth-data", "--batch-size", "many"]).status.code(), Some(3));
    assert_eq!(modmae(d.path(), &["synth-data", "--batch-size", "1"]).status.code(), Some(3));
    let missing = modmae(d.path(), &["finetune", "--config", "tiny.json", "--checkpoint", "absent.bfmc"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.bfmc"));
}

#[test]
fn overrides_win_over_config_file() {
    let d = setup();
    let out = modmae(d.path(), &["synth-data", "--config", "tiny.json", "--out", "c", "--synth-cases", "3", "--seed", "9", "--synth-dims", "16,18,16", "-q"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let snap: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("c/config.resolved.json")).unwrap()).unwrap();
    assert_eq!(snap["synth_cases"], 3);
    assert_eq!(snap["seed"], 9);
    assert_eq!(snap["synth_dims"], serde_json::json!([16, 18, 16]));
    assert_eq!(snap["d_enc"], 16);
    let cases = std::fs::read_dir(d.path().join("c")).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(cases, 3);
}

#[test]
fn build_dict_writes_manifest() {
    let d = setup();
    assert!(modmae(d.path(), &["synth-data", "--config", "tiny.json", "--out", "corpus", "-q"]).status.success());
    let out = modmae(d.path(), &["build-dict", "--root", "corpus", "--out", "manifest.json"]);
    assert_eq!(out.status.code(), Some(0));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("manifest.json")).unwrap()).unwrap();
    let text = m.to_string();
    assert!(text.contains("case_000") && text.contains("flair"), "{text}");
    assert!(d.path().join("config.resolved.json").exists());
}

#[test]
fn gradcheck_reports_error() {
    let d = setup();
    let out = modmae(d.path(), &["gradcheck", "--config", "tiny.json", "--coords", "40", "--out", "gc"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("gc/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(r["passed"], true);
    assert_eq!(r["checks"].as_array().unwrap().len(), 40);
    // an impossible tolerance fails with a runtime exit code
    let strict = modmae(d.path(), &["gradcheck", "--config", "tiny.json", "--coords", "40", "--tolerance", "1e-30", "--out", "gc2"]);
    assert_eq!(strict.status.code(), Some(1));
}

#[test]
fn full_workflow_is_rerunnable() {
    let d = setup();
    let p = d.path();
    let ok = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend(["--config", "tiny.json", "--threads", "1", "-q"]);
        let out = modmae(p, &all);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    ok(&["synth-data", "--out", "corpus"]);
    for run in ["p1", "p2"] {
        ok(&["pretrain", "--data", "corpus", "--out", run]);
    }
    for f in ["metrics.jsonl", "final.bfmc", "epoch_0001.bfmc", "epoch_0002.bfmc", "config.resolved.json"] {
        assert_eq!(std::fs::read(p.join("p1").join(f)).unwrap(), std::fs::read(p.join("p2").join(f)).unwrap(), "{f}");
    }

    ok(&["finetune", "--data", "corpus", "--checkpoint", "p1/final.bfmc", "--out", "ft", "--task", "classification"]);
    assert!(p.join("ft/finetune_history.json").exists());
    let csv = ok(&["evaluate", "--data", "corpus", "--checkpoint", "ft/finetuned.bfmc", "--out", "ev"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("all,NA,NA,"), "{csv}");
    let again = ok(&["evaluate", "--data", "corpus", "--checkpoint", "ft/finetuned.bfmc", "--out", "ev2"]);
    assert_eq!(csv, again);

    // a pretraining checkpoint has no task head to evaluate
    let out = modmae(p, &["evaluate", "--config", "tiny.json", "--data", "corpus", "--checkpoint", "p1/final.bfmc", "-q"]);
    assert_eq!(out.status.code(), Some(1));

    let msg = ok(&["impute", "--data", "corpus", "--checkpoint", "p1/final.bfmc", "--case", "case_001", "--target", "T2", "--out", "im"]);
    assert!(msg.contains("t2.nii"));
    assert!(!msg.contains("mean squared error"), "the case has no acquired T2");
    let vol = modmae::corpus::nifti::read_volume(p.join("im/case_001/t2.nii"), "t2").unwrap();
    assert_eq!(vol.dims, [16; 3]);

    let summary = ok(&["report", "--metrics", "p1/metrics.jsonl", "--out", "rep"]);
    assert!(summary.contains("| l_total |"));
    let svg = std::fs::read_to_string(p.join("rep/loss_curves.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("l_mae"));
    assert_eq!(std::fs::read_to_string(p.join("rep/summary.md")).unwrap(), summary);
}
