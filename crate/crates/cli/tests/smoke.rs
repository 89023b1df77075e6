//! End-to-end runs of the `selora` binary on a tiny model.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "name": "tiny-a",
  "model": {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32, "vocab_size": 32, "max_seq": 8},
  "data": {"n_train": 96, "n_eval": 16, "seq_len": 8, "vocab_size": 32},
  "train": {"total_steps": 8, "warmup_steps": 2, "batch_size": 4},
  "probe": {"n_batches": 2, "chunk_size": 1},
  "bench": {"n_items": 6, "seed": 1},
  "lora": {"attn_rank": 2, "mlp_rank": 2, "alpha": 4.0}
}"#;

fn selora(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selora")).current_dir(dir).env_remove("SELORA_JOBS").args(args).output().expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.json"), TINY).unwrap();
    dir
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn probe_writes_a_report() {
    let dir = setup();
    let out = selora(dir.path(), &["probe", "--config", "m.json", "--seed", "42", "--out", "p.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json = std::fs::read_to_string(dir.path().join("p.json")).unwrap();
    for key in ["\"layers\"", "\"g\"", "\"normalized\"", "\"ranking\""] {
        assert!(json.contains(key), "{json}");
    }
}

#[test]
fn pair_then_report() {
    let dir = setup();
    for seed in ["1", "2"] {
        let out = selora(dir.path(), &["pair", "--config", "m.json", "--select-percent", "50", "--seed", seed, "--out", "runs"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ledger = lines(&dir.path().join("runs/ledger.csv"));
    assert_eq!(ledger.len(), 5);
    assert!(ledger[1].contains(",standard,1,") && ledger[2].contains(",selective,1,"), "{ledger:?}");

    let out = selora(dir.path(), &["report", "--ledger", "runs/ledger.csv", "--out", "rpt", "--family", "tiny-a=tiny"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["summary.md", "speedup_bars.svg", "family_bars.svg", "benchmark_deltas.svg", "tradeoff_scatter.svg", "speedup.csv"] {
        assert!(dir.path().join("rpt").join(f).exists(), "missing {f}");
    }
    let family = std::fs::read_to_string(dir.path().join("rpt/family_bars.svg")).unwrap();
    assert!(family.contains(r#"data-group="tiny""#));
}

#[test]
fn train_respects_rank_and_selection() {
    let dir = setup();
    let out =
        selora(dir.path(), &["train", "--config", "m.json", "--select-percent", "50", "--rank", "4", "--mlp-rank", "2", "--steps", "6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ledger = lines(&dir.path().join("runs/ledger.csv"));
    assert_eq!(ledger.len(), 2);
    assert!(ledger[1].starts_with("tiny-a,selective,42,6,"), "{}", ledger[1]);
}

#[test]
fn campaign_resumes_and_honours_jobs_env() {
    let dir = setup();
    let spec = format!(
        r#"{{"models": [{TINY}], "seeds": [1, 2], "steps_matched": 6, "steps_cm": 8, "recipes": ["standard", "selective", "selective_cm"]}}"#
    );
    std::fs::write(dir.path().join("c.json"), spec).unwrap();
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_selora"))
            .current_dir(dir.path())
            .env("SELORA_JOBS", "2")
            .args(["campaign", "--config", "c.json", "--out", "camp"])
            .output()
            .unwrap()
    };
    let first = run();
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(String::from_utf8_lossy(&first.stdout).contains("6 records appended"));
    let second = run();
    assert!(String::from_utf8_lossy(&second.stdout).contains("0 records appended"));
    assert_eq!(lines(&dir.path().join("camp/ledger.csv")).len(), 7);
}

#[test]
fn autoresearch_stops_and_resumes() {
    let dir = setup();
    std::fs::write(dir.path().join("s.json"), r#"{"quick_steps": 4, "full_steps": 6, "ablation_steps": 6}"#).unwrap();
    let base = ["autoresearch", "--config", "m.json", "--spec", "s.json", "--out", "ar"];
    let out = selora(dir.path(), &[&base[..], &["--stop-after", "quick"]].concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&dir.path().join("ar/ledger.csv")).len(), 1 + 8);
    let out = selora(dir.path(), &base);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&dir.path().join("ar/ledger.csv")).len(), 1 + 8 + 3 + 2 + 36);
    assert!(String::from_utf8_lossy(&out.stdout).contains("Winner"));
}

#[test]
fn usage_and_runtime_errors() {
    let dir = setup();
    let out = selora(dir.path(), &["pair", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = selora(dir.path(), &["report", "--ledger", "missing.csv", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
    let out = selora(dir.path(), &["pair", "--config", "m.json", "--select-percent", "0"]);
    assert_eq!(out.status.code(), Some(1));
}
