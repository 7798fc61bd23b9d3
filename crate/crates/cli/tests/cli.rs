use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use worldkit_cli::error::{EXIT_BUDGET, EXIT_CONFIG, EXIT_DATA, EXIT_OK};

fn worldkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_worldkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(path: &Path, text: &str) -> String {
    fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL_WORLDS: &str = r#"{
  "preset": "tiny",
  "world": {"worlds": 2, "samples_per_world": 30, "test_per_world": 6},
  "train": {"max_steps": 4, "eval_every": 2},
  "pretrain": {"options": {"steps": 3}},
  "eval": {"limit": 4}
}"#;

#[test]
fn diff_prints_canonical_changes() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(
        &dir.path().join("a.json"),
        r#"[["you","in","Lobby"],["door","is","closed"],["Lobby","north","Hall"]]"#,
    );
    let b = write(
        &dir.path().join("b.json"),
        r#"[["you","in","Hall"],["door","is","closed"],["Lobby","north","Hall"]]"#,
    );
    let o = worldkit(&["diff", &a, &b]);
    assert_eq!(code(&o), EXIT_OK);
    assert_eq!(stdout(&o), "+ you | in | hall\n- you | in | lobby\n");
    let same = worldkit(&["diff", &a, &a]);
    assert_eq!(code(&same), EXIT_OK);
    assert!(stdout(&same).is_empty());
    let bad = write(&dir.path().join("bad.json"), "[[\"only two\", \"parts\"]]");
    assert_eq!(code(&worldkit(&["diff", &a, &bad])), EXIT_DATA);
}

#[test]
fn config_errors_exit_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write(&dir.path().join("c.json"), r#"{"sead": 3}"#);
    assert_eq!(code(&worldkit(&["--config", &cfg, "--out", out, "stats"])), EXIT_CONFIG);
    assert_eq!(code(&worldkit(&["--out", out, "--loss", "bogus", "stats"])), EXIT_CONFIG);
    assert_eq!(code(&worldkit(&["--out", out, "--budget", "-1", "train"])), EXIT_CONFIG);
}

#[test]
fn missing_or_empty_corpus_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&worldkit(&["--out", out, "train"])), EXIT_DATA);
    write(&dir.path().join("train.jsonl"), "{\"format_version\": 1, \"kind\": \"worldkit-corpus\"}\n");
    assert_eq!(code(&worldkit(&["--out", out, "pretrain"])), EXIT_DATA);
}

#[test]
fn gen_world_is_seed_stable_and_reproducible_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("c.json"), SMALL_WORLDS);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for d in [&a, &b] {
        let o = worldkit(&["--config", &cfg, "--seed", "4", "--out", d.to_str().unwrap(), "gen-world"]);
        assert_eq!(code(&o), EXIT_OK, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let resolved = a.join("resolved_config.json");
    let o = worldkit(&["--config", resolved.to_str().unwrap(), "--out", c.to_str().unwrap(), "gen-world"]);
    assert_eq!(code(&o), EXIT_OK);
    for f in ["train.jsonl", "test.jsonl", "stats.json"] {
        let first = fs::read(a.join(f)).unwrap();
        assert_eq!(first, fs::read(b.join(f)).unwrap(), "{f}");
        assert_eq!(first, fs::read(c.join(f)).unwrap(), "{f}");
    }
    let header: serde_json::Value =
        serde_json::from_str(fs::read_to_string(a.join("train.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["format_version"], 1);
    let stats = worldkit(&["--config", &cfg, "--out", a.to_str().unwrap(), "stats"]);
    assert_eq!(code(&stats), EXIT_OK);
    assert!(stdout(&stats).contains("overall"));
}

#[test]
fn pipeline_trains_evaluates_and_rejects_foreign_vocabularies() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("c.json"), SMALL_WORLDS);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let base = ["--config", cfg.as_str(), "--out", out_s, "--beam-width", "2"];
    for cmd in ["gen-world", "pretrain", "train", "eval"] {
        let o = worldkit(&[&base[..], &[cmd]].concat());
        assert_eq!(code(&o), EXIT_OK, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["pretrained.ckpt", "model.ckpt", "train_log.jsonl", "eval_report.json", "predictions.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["kind"], "worldkit-train-log");
    assert_eq!(log.lines().count(), 5);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["format_version"], 1);
    assert!(report["body"]["metrics"].as_array().unwrap().iter().any(|m| m == "graph_em"));

    // Vocabularies from different worlds must not be accepted.
    let other = dir.path().join("other");
    let other_s = other.to_str().unwrap();
    let other_cfg = write(&dir.path().join("o.json"), &SMALL_WORLDS.replace("\"worlds\": 2", "\"worlds\": 2, \"world_seed\": 50"));
    for cmd in ["gen-world", "pretrain"] {
        assert_eq!(code(&worldkit(&["--config", &other_cfg, "--out", other_s, cmd])), EXIT_OK);
    }
    let mismatch = write(
        &dir.path().join("m.json"),
        &format!(
            r#"{{"preset": "tiny", "data": {{"checkpoint": "{}", "test": "{}", "vocab": "{}"}}, "eval": {{"limit": 2}}}}"#,
            out.join("model.ckpt").display(),
            out.join("test.jsonl").display(),
            other.join("vocab").display()
        ),
    );
    let o = worldkit(&["--config", &mismatch, "--out", dir.path().join("m").to_str().unwrap(), "eval"]);
    assert_eq!(code(&o), EXIT_DATA, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ablation_over_budget_exits_with_the_budget_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("c.json"),
        r#"{
  "preset": "tiny",
  "ablate": {
    "benchmark": {"worlds": 1, "train_per_world": 10, "test_per_world": 2},
    "options": {"steps": 1000000, "eval_samples": 1, "seeds": [0], "beam_width": 1}
  }
}"#,
    );
    let out = dir.path().join("ab");
    let o = worldkit(&["--config", &cfg, "--out", out.to_str().unwrap(), "--budget", "0.05", "ablate"]);
    assert_eq!(code(&o), EXIT_BUDGET, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(doc["body"]["results"].as_array().unwrap().len(), 8);
}
