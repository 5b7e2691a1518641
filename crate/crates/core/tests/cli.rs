use std::path::PathBuf;

use serde_json::Value;
use vitlite::cli::{run, EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE};

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("configs")
        .join(name)
        .display()
        .to_string()
}

fn call(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(
        std::iter::once("vitlite").chain(args.iter().copied()),
        &mut out,
        &mut err,
    );
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

#[test]
fn count_json_is_the_only_stdout() {
    let cfg = config("deit_s.json");
    let (code, out, _) = call(&[
        "count",
        "--config",
        &cfg,
        "--compare",
        "ours",
        "--format",
        "json",
    ]);
    assert_eq!(code, EXIT_OK);
    let v: Value = serde_json::from_str(&out).unwrap();
    let delta = v["comparison"]["params_delta_pct"].as_f64().unwrap();
    assert!((delta + 18.8).abs() < 1.0, "{delta}");
}

#[test]
fn count_table_shows_unicode_minus() {
    let cfg = config("deit_t.json");
    let (code, out, _) = call(&["count", "--config", &cfg, "--compare", "ours"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains('\u{2212}'), "{out}");
}

#[test]
fn reconcile_flag_succeeds_for_shipped_configs() {
    for name in ["deit_t.json", "deit_s.json", "toy.json"] {
        let cfg = config(name);
        let (code, out, err) =
            call(&["count", "--config", &cfg, "--reconcile", "--format", "json"]);
        assert_eq!(code, EXIT_OK, "{name}: {err}");
        let v: Value = serde_json::from_str(&out).unwrap();
        assert!(v["reconciliation"].is_array());
    }
}

#[test]
fn missing_config_is_a_usage_error() {
    let (code, out, err) = call(&["count"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(out.is_empty());
    assert!(err.contains("--config"));
    let (code, _, _) = call(&["count", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(code, EXIT_USAGE);
    let (code, _, _) = call(&["no-such-command"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    let text = std::fs::read_to_string(config("toy.json"))
        .unwrap()
        .replacen('{', "{\"heads\": 3,", 1);
    std::fs::write(&p, text).unwrap();
    let (code, _, err) = call(&["count", "--config", p.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE, "{err}");
}

#[test]
fn odd_heads_for_ours_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("odd.json");
    let mut v: Value =
        serde_json::from_str(&std::fs::read_to_string(config("toy.json")).unwrap()).unwrap();
    v["C"] = Value::from(30);
    v["h"] = Value::from(4);
    std::fs::write(&p, v.to_string()).unwrap();
    let (code, _, _) = call(&["count", "--config", p.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn reparam_verify_prints_the_bound() {
    let (code, out, _) = call(&["reparam-verify", "--trials", "200"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.starts_with("trials = 200\nmax |Δ| = "), "{out}");
    assert!(out.trim_end().ends_with("< 1e-9"), "{out}");
}

#[test]
fn reparam_verify_fails_under_an_impossible_tolerance() {
    let (code, out, err) = call(&["reparam-verify", "--trials", "5", "--tol", "0"]);
    assert_eq!(code, EXIT_CHECK_FAILED);
    assert!(out.contains(">="));
    assert!(err.contains("check failed"));
}

#[test]
fn grad_check_single_op() {
    let (code, out, _) = call(&[
        "grad-check",
        "--trials",
        "2",
        "--op",
        "ihh",
        "--op",
        "chh",
        "--format",
        "json",
    ]);
    assert_eq!(code, EXIT_OK);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["ops"].as_array().unwrap().len(), 2);
    let (code, _, _) = call(&["grad-check", "--op", "nope"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn ccs_compare_reports_both_variants() {
    let cfg = config("toy.json");
    let (code, out, _) = call(&[
        "ccs",
        "--config",
        &cfg,
        "--compare",
        "ours",
        "--batch",
        "2",
        "--format",
        "json",
    ]);
    assert_eq!(code, EXIT_OK);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["vanilla"]["h"], 4);
    assert_eq!(v["ours"]["h"], 8);
    for k in ["vanilla", "ours"] {
        let o = v[k]["overall"].as_f64().unwrap();
        assert!((0.0..=1.0 + 1e-12).contains(&o));
    }
}

#[test]
fn dump_attn_writes_one_file_per_block() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("toy.json");
    let out_dir = dir.path().join("maps");
    let (code, _, err) = call(&[
        "dump-attn",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    for b in 0..2 {
        let text = std::fs::read_to_string(out_dir.join(format!("attn_block{b}.json"))).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["block_index"], b);
        let prov = v["provenance"].as_array().unwrap();
        assert_eq!(prov.len(), 8);
        assert_eq!(prov.iter().filter(|p| *p == "hallucinated").count(), 4);
    }
}

#[test]
fn trained_weights_round_trip_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("toy.json");
    let csv = dir.path().join("loss.csv");
    let ckpt = dir.path().join("ckpt");
    let (code, out, err) = call(&[
        "train-toy",
        "--config",
        &cfg,
        "--steps",
        "5",
        "--images",
        "8",
        "--out",
        csv.to_str().unwrap(),
        "--save",
        ckpt.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(err.contains("training 5 steps"));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert!(v["final_train_loss"].as_f64().unwrap().is_finite());
    let lines: Vec<String> = std::fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 6);

    let (code, _, err) = call(&["ccs", "--config", &cfg, "--weights", ckpt.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");

    let vanilla = dir.path().join("vanilla.json");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("\"ours\"", "\"vanilla\"");
    std::fs::write(&vanilla, text).unwrap();
    let (code, _, err) = call(&[
        "ccs",
        "--config",
        vanilla.to_str().unwrap(),
        "--weights",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("block_variant"), "{err}");
}
