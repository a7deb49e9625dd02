use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn glied(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glied"))
        .args(args)
        .env_remove("GLIED_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = glied(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Synthesizes a small dataset and trains a tiny model on it.
fn trained(dir: &Path) {
    let data = dir.join("data");
    ok(&["synth-data", "--seed", "3", "--n-train", "40", "--n-val", "8", "--n-test", "8", "--out", p(&data)]);
    let config = dir.join("config.json");
    fs::write(
        &config,
        r#"{"model": {"d_e": 16, "d_h": 16, "d_f": 32, "heads": 2}, "min_count": 1, "xe": {"max_epochs": 2, "batch_size": 8}}"#,
    )
    .unwrap();
    ok(&[
        "train", "--data", p(&data), "--model", "glied", "--config", p(&config), "--out", p(&dir.join("run")),
    ]);
}

#[test]
fn pipeline_is_deterministic_and_self_describing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let ckpt = dir.join("run/model.ckpt");
    let test = dir.join("data/test.jsonl");

    let manifest = json(&dir.join("run/manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);
    assert_eq!(manifest["config"]["model"]["d_h"], 16);
    let log = fs::read_to_string(dir.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let (r1, r2) = (dir.join("r1.json"), dir.join("r2.json"));
    for r in [&r1, &r2] {
        ok(&["evaluate", "--checkpoint", p(&ckpt), "--data", p(&test), "--report", p(r)]);
    }
    let bytes = fs::read(&r1).unwrap();
    assert_eq!(bytes, fs::read(&r2).unwrap());
    let report = json(&r1);
    assert_eq!(report["images"], 8);
    assert!(report["structured_score"]["count"].is_number());
    assert!(report["manifest"]["inputs"].as_object().unwrap().len() >= 2);
    // Floats carry exactly six decimals.
    let text = String::from_utf8(bytes).unwrap();
    let cider = text.split("\"cider_d\":").nth(1).unwrap();
    let number: String = cider.chars().take_while(|c| c.is_ascii_digit() || *c == '.' || *c == '-').collect();
    assert_eq!(number.split('.').nth(1).unwrap().len(), 6, "{number}");

    let a = ok(&["caption", "--checkpoint", p(&ckpt), "--input", p(&test)]);
    let b = ok(&["caption", "--checkpoint", p(&ckpt), "--input", p(&test), "--beam", "3"]);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 8);
    let first: Value = serde_json::from_str(a.lines().next().unwrap()).unwrap();
    assert_eq!(first["image_id"], "test-00000");
    let out = dir.join("caps.jsonl");
    ok(&["caption", "--checkpoint", p(&ckpt), "--input", p(&test), "--out", p(&out)]);
    assert_eq!(fs::read_to_string(&out).unwrap(), a);
    assert!(dir.join("caps.manifest.json").exists());
}

#[test]
fn attention_dumps_are_normalized_standalone_documents() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let out = dir.join("attn");
    ok(&[
        "inspect-attention",
        "--checkpoint",
        p(&dir.join("run/model.ckpt")),
        "--data",
        p(&dir.join("data/val.jsonl")),
        "--image-id",
        "val-00002",
        "--out-dir",
        p(&out),
    ]);
    let dump = json(&out.join("trace.json"));
    let steps = dump["steps"].as_array().unwrap().len();
    let trace = &dump["trace"];
    let mut rows = Vec::new();
    for key in ["visual", "attribute_distill", "local_visual", "local_attribute"] {
        assert_eq!(trace[key].as_array().unwrap().len(), steps, "{key}");
        rows.extend(trace[key].as_array().unwrap().iter().cloned());
    }
    for head in trace["visual_distill"].as_array().unwrap() {
        rows.extend(head.as_array().unwrap().iter().cloned());
    }
    for row in rows {
        // Six printed decimals allow 5e-7 per entry.
        let sum: f64 = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-5, "{sum}");
    }
    let svgs: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "svg"))
        .collect();
    assert!(svgs.iter().any(|p| p.ends_with("region_self_attention_head0.svg")));
    assert!(svgs.iter().any(|p| p.ends_with("attribute_collocation.svg")));
    assert!(svgs.iter().any(|p| p.ends_with("local_visual.svg")));
    for path in svgs {
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
        assert!(text.trim_end().ends_with("</svg>"));
        assert!(!text.contains("href"), "{}", path.display());
        assert_eq!(text.matches("<svg").count(), 1);
        assert_eq!(text.matches("<text").count(), text.matches("</text>").count());
    }
}

#[test]
fn params_prints_the_comparison() {
    let out = ok(&["params", "--model", "glied"]);
    assert!(out.contains("17912064"), "{out}");
    assert!(out.contains("delta") && out.contains("5248000"), "{out}");
    let out = ok(&["params", "--model", "base"]);
    assert!(out.contains("12664064"), "{out}");
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    assert_eq!(glied(&["params", "--bogus"]).status.code(), Some(2));
    assert_eq!(glied(&["frobnicate"]).status.code(), Some(2));
    let missing = glied(&["evaluate", "--checkpoint", "/nonexistent/model.ckpt", "--data", "x", "--report", "y"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error:"));
    assert_eq!(glied(&["params", "--model", "nope"]).status.code(), Some(1));
}

#[test]
fn seed_environment_variable_overrides_the_default() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &Path, seed: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_glied"));
        cmd.args(["synth-data", "--n-train", "5", "--n-val", "2", "--n-test", "2", "--out", p(dir)]);
        match seed {
            Some(s) => cmd.env("GLIED_SEED", s),
            None => cmd.env_remove("GLIED_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        (fs::read(dir.join("train.jsonl")).unwrap(), json(&dir.join("manifest.json")))
    };
    let (a, ma) = run(&tmp.path().join("a"), Some("9"));
    let (b, _) = run(&tmp.path().join("b"), Some("9"));
    let (c, mc) = run(&tmp.path().join("c"), None);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(ma["seed"], 9);
    assert_eq!(mc["seed"], 0);
}
