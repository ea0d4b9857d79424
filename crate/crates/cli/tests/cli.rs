use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_cmlm");

fn cmlm(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("CMLM_SEED")
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn corpus(dir: &Path) -> PathBuf {
    let words = ["red", "green", "blue", "small", "large", "dog", "cat", "bird", "runs", "sleeps"];
    let lines: Vec<String> = (0..24)
        .map(|i| {
            let text: Vec<&str> = (0..6 + i % 5).map(|j| words[(i * 7 + j * 3) % words.len()]).collect();
            format!(r#"{{"text_a": "{}", "label": "{}"}}"#, text.join(" "), if i % 2 == 0 { "pos" } else { "neg" })
        })
        .collect();
    let p = dir.join("corpus.jsonl");
    std::fs::write(&p, lines.join("\n")).unwrap();
    p
}

const SMALL: &str = r#"{"layers": 1, "heads": 2, "hidden": 8, "ffn": 16, "max_len": 16,
  "lr": 0.001, "epochs": 1, "ft_lr": 0.01, "ft_epochs": 2, "batch_size": 4,
  "subset_size": 10, "dev_size": 20, "pool_size": 50, "eval_pool_size": 40,
  "unlabeled_pool_size": 30, "synth_vocab": 24 }"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

/// Rows of one `mask` block as whitespace-separated cells, label dropped.
fn blocks(text: &str) -> Vec<Vec<Vec<String>>> {
    text.split("\n\n")
        .filter(|b| !b.trim().is_empty())
        .map(|b| {
            b.lines()
                .map(|l| l.split_whitespace().skip(1).map(str::to_string).collect())
                .collect()
        })
        .collect()
}

#[test]
fn build_vocab_is_reproducible() {
    let d = TempDir::new().unwrap();
    corpus(d.path());
    let o = cmlm(d.path(), &["build-vocab", "--input", "corpus.jsonl", "--out", "v1.txt", "--max-size", "100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    cmlm(d.path(), &["build-vocab", "--input", "corpus.jsonl", "--out", "v2.txt", "--max-size", "100"]);
    let a = std::fs::read(d.path().join("v1.txt")).unwrap();
    assert_eq!(a, std::fs::read(d.path().join("v2.txt")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 15);
    assert_eq!(text.lines().take(5).collect::<Vec<_>>(), ["<s>", "</s>", "<mask>", "<pad>", "<unk>"]);
}

#[test]
fn missing_input_is_a_runtime_error() {
    let d = TempDir::new().unwrap();
    let o = cmlm(d.path(), &["build-vocab", "--input", "absent.jsonl", "--out", "v.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.jsonl"));
    assert!(!d.path().join("v.txt").exists());
}

#[test]
fn mask_complement_at_full_rate() {
    let d = TempDir::new().unwrap();
    corpus(d.path());
    cmlm(d.path(), &["build-vocab", "--input", "corpus.jsonl", "--out", "v.txt"]);
    let o = cmlm(
        d.path(),
        &["mask", "--input", "corpus.jsonl", "--vocab", "v.txt", "--pc", "1", "--seed", "5"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let bs = blocks(&stdout(&o));
    assert_eq!(bs.len(), 24);
    for b in bs {
        assert_eq!(b.len(), 3);
        let sel = |row: &[String]| -> Vec<bool> { row.iter().map(|c| c.starts_with('[')).collect() };
        let (t0, t1) = (sel(&b[1]), sel(&b[2]));
        // Column 0 is BOS, the only non-maskable position of a one-segment line.
        assert!(!t0[0] && !t1[0]);
        for i in 1..t0.len() {
            assert_ne!(t0[i], t1[i], "position {i}");
        }
    }
}

#[test]
fn mask_with_zero_rate_and_fixed_seed() {
    let d = TempDir::new().unwrap();
    corpus(d.path());
    cmlm(d.path(), &["build-vocab", "--input", "corpus.jsonl", "--out", "v.txt"]);
    let args = ["mask", "--input", "corpus.jsonl", "--vocab", "v.txt", "--pm", "0", "--k", "2", "--seed", "9"];
    let a = stdout(&cmlm(d.path(), &args));
    assert_eq!(a, stdout(&cmlm(d.path(), &args)));
    for b in blocks(&a) {
        assert_eq!(b.len(), 4);
        assert_eq!(b[0], b[1]);
    }
    let o = cmlm(d.path(), &["mask", "--input", "corpus.jsonl", "--vocab", "v.txt", "--pc", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_experiment_writes_fifteen_records_and_only_its_output() {
    let d = TempDir::new().unwrap();
    write_config(d.path(), "c.json", SMALL);
    let before = listing(d.path());
    let o = cmlm(d.path(), &["run-experiment", "--config", "c.json", "--method", "ft", "--out", "r.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut after = listing(d.path());
    after.retain(|f| f != "r.json");
    assert_eq!(before, after);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(r["records"].as_array().unwrap().len(), 15);
    assert_eq!(r["method"], "ft");
    assert_eq!(r["timestamp"], "2023-11-14T22:13:20Z");
    assert_eq!(r["config"]["ft_epochs"], 2);
}

#[test]
fn unsupported_method_and_bad_keys_are_usage_errors() {
    let d = TempDir::new().unwrap();
    write_config(d.path(), "c.json", SMALL);
    let o = cmlm(d.path(), &["run-experiment", "--config", "c.json", "--method", "scl", "--out", "r.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unsupported"));
    write_config(d.path(), "bad.json", r#"{"alhpa": 0.5}"#);
    let o = cmlm(d.path(), &["run-experiment", "--config", "bad.json", "--out", "r.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alhpa"));
    let o = cmlm(d.path(), &["grad-check", "--precision", "32"]);
    assert_eq!(o.status.code(), Some(1));
    let o = cmlm(d.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!d.path().join("r.json").exists());
}

#[test]
fn seed_precedence() {
    let d = TempDir::new().unwrap();
    write_config(d.path(), "c.json", SMALL);
    write_config(d.path(), "s.json", &SMALL.replace("\"lr\"", "\"seed\": 7, \"lr\""));
    let seed_of = |cfg: &str, flag: Option<&str>, env: Option<&str>| -> u64 {
        let mut args = vec!["run-experiment", "--config", cfg, "--method", "ft", "--out", "r.json"];
        if let Some(f) = flag {
            args.extend(["--seed", f]);
        }
        let mut c = Command::new(BIN);
        c.args(&args).current_dir(d.path()).env_remove("CMLM_SEED");
        if let Some(e) = env {
            c.env("CMLM_SEED", e);
        }
        assert!(c.output().unwrap().status.success());
        let r: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("r.json")).unwrap()).unwrap();
        r["config"]["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of("c.json", None, None), 42);
    assert_eq!(seed_of("c.json", None, Some("11")), 11);
    assert_eq!(seed_of("s.json", None, Some("11")), 7);
    assert_eq!(seed_of("s.json", Some("3"), Some("11")), 3);
}

#[test]
fn post_train_fine_tune_evaluate() {
    let d = TempDir::new().unwrap();
    corpus(d.path());
    write_config(d.path(), "c.json", SMALL);
    let o = cmlm(d.path(), &["post-train", "--config", "c.json", "--data", "corpus.jsonl", "--out", "p.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = cmlm(
        d.path(),
        &[
            "fine-tune", "--config", "c.json", "--train", "corpus.jsonl", "--dev", "corpus.jsonl", "--init", "p.ckpt", "--out",
            "f.ckpt",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = cmlm(d.path(), &["evaluate", "--ckpt", "f.ckpt", "--test", "corpus.jsonl", "--metric", "mcc"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("mcc "));
    let again = cmlm(d.path(), &["evaluate", "--ckpt", "f.ckpt", "--test", "corpus.jsonl", "--metric", "mcc"]);
    assert_eq!(stdout(&o), stdout(&again));

    // No classifier head yet.
    let o = cmlm(d.path(), &["evaluate", "--ckpt", "p.ckpt", "--test", "corpus.jsonl"]);
    assert_eq!(o.status.code(), Some(1));

    let mut bytes = std::fs::read(d.path().join("f.ckpt")).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(d.path().join("bad.ckpt"), bytes).unwrap();
    let o = cmlm(d.path(), &["evaluate", "--ckpt", "bad.ckpt", "--test", "corpus.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn fine_tune_from_scratch_and_sweep() {
    let d = TempDir::new().unwrap();
    corpus(d.path());
    write_config(d.path(), "c.json", SMALL);
    let o = cmlm(
        d.path(),
        &["fine-tune", "--config", "c.json", "--train", "corpus.jsonl", "--dev", "corpus.jsonl", "--out", "f.ckpt"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = cmlm(d.path(), &["sweep", "--config", "c.json", "--axis", "p_c", "--values", "0.3,0.9", "--out", "s.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("s.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["value"], 0.9);
    let o = cmlm(d.path(), &["sweep", "--config", "c.json", "--axis", "K", "--values", "1.5", "--out", "s2.json"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grad_check_objectives_pass() {
    let d = TempDir::new().unwrap();
    let o = cmlm(d.path(), &["grad-check", "--scope", "objectives", "--precision", "64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("ok")).count(), 5, "{out}");
}
