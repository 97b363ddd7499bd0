use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn t2i(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_t2i")).args(args).output().expect("spawn t2i")
}

fn ok(args: &[&str]) -> String {
    let out = t2i(args);
    assert!(out.status.success(), "t2i {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Synthetic workspace with a shortened training schedule.
fn workspace(dir: &Path, seed: u64) -> PathBuf {
    let d = dir.to_str().unwrap();
    ok(&["synth", "--out", d, "--seed", &seed.to_string()]);
    let cfg = dir.join("run.toml");
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text.push_str("\n[train.sft]\nepochs = 8\n\n[train.rrhf]\nepochs = 1\n");
    std::fs::write(&cfg, text).unwrap();
    cfg
}

fn run_dir(root: &Path) -> PathBuf {
    let mut dirs: Vec<_> = std::fs::read_dir(root.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    dirs.remove(0)
}

fn digests(dir: &Path) -> BTreeMap<String, String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let d = Sha256::digest(std::fs::read(&p).unwrap());
            (p.file_name().unwrap().to_string_lossy().into_owned(), format!("{d:x}"))
        })
        .collect()
}

fn all_stages(cfg: &str) {
    ok(&["ingest", "--config", cfg]);
    ok(&["train-sft", "--config", cfg]);
    ok(&["align", "--config", cfg]);
    ok(&["evaluate", "--config", cfg]);
}

#[test]
fn full_run_is_byte_identical_across_reruns() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = workspace(a.path(), 2);
    let cfg_b = workspace(b.path(), 2);
    all_stages(cfg_a.to_str().unwrap());
    all_stages(cfg_b.to_str().unwrap());
    let (da, db) = (run_dir(a.path()), run_dir(b.path()));
    assert_eq!(da.file_name(), db.file_name());
    let first = digests(&da);
    assert_eq!(first.len(), 12, "{first:?}");
    assert_eq!(first, digests(&db));

    // Rerunning in place reproduces the same bytes, also with one worker.
    let cfg = cfg_a.to_str().unwrap();
    ok(&["--jobs", "1", "ingest", "--config", cfg]);
    ok(&["--jobs", "1", "train-sft", "--config", cfg]);
    ok(&["--jobs", "1", "align", "--config", cfg]);
    ok(&["--jobs", "1", "evaluate", "--config", cfg]);
    assert_eq!(first, digests(&da));

    let r1 = ok(&["recommend", "--config", cfg, "--record", "pixel", "sprite", "cat"]);
    let r2 = ok(&["recommend", "--config", cfg, "--record", "pixel", "sprite", "cat"]);
    assert_eq!(r1, r2);
    let v: serde_json::Value = serde_json::from_str(&r1).unwrap();
    assert!(v["api"]["model"].is_string());
}

#[test]
fn seed_override_gets_its_own_run_dir() {
    let a = tempfile::tempdir().unwrap();
    let cfg = workspace(a.path(), 1);
    let cfg = cfg.to_str().unwrap();
    ok(&["ingest", "--config", cfg]);
    ok(&["ingest", "--config", cfg, "--seed", "7"]);
    assert_eq!(std::fs::read_dir(a.path().join("runs")).unwrap().count(), 2);
}

#[test]
fn fixture_ingest_summary_matches_hand_counts() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures");
    std::fs::copy(fixtures.join("ingest_records.jsonl"), dir.path().join("records.jsonl")).unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 1\n[paths]\nrecords = \"records.jsonl\"\n[backend]\nname = \"styleworld\"\noptions = { world = \"none.json\" }\n",
    )
    .unwrap();
    ok(&["ingest", "--config", cfg.to_str().unwrap()]);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_dir(dir.path()).join("ingest_summary.json")).unwrap()).unwrap();
    let expected: serde_json::Value =
        serde_json::from_slice(&std::fs::read(fixtures.join("ingest_expected.json")).unwrap()).unwrap();
    assert_eq!(summary, expected["summary"]);
}

#[test]
fn missing_inputs_fail_without_partial_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 1\n[paths]\nrecords = \"absent.jsonl\"\n[backend]\nname = \"styleworld\"\noptions = { world = \"w.json\" }\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = t2i(&["ingest", "--config", cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest"));
    assert!(!dir.path().join("runs").exists());

    let out = t2i(&["train-sft", "--config", cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("t2i ingest"));
}

#[test]
fn align_needs_sft_checkpoint() {
    let a = tempfile::tempdir().unwrap();
    let cfg = workspace(a.path(), 1);
    let cfg = cfg.to_str().unwrap();
    ok(&["ingest", "--config", cfg]);
    let out = t2i(&["align", "--config", cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-sft"));
    assert!(!run_dir(a.path()).join("rrhf.ckpt.json").exists());
}

#[test]
fn missing_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[paths]\nrecords = \"r.jsonl\"\n[backend]\nname = \"styleworld\"\n").unwrap();
    let out = t2i(&["ingest", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}
