//! Behavioral tests of the experiment runner binary: exit codes, config
//! echoing, output cardinality, and flag handling.

use std::path::Path;
use std::process::Command;

fn run_cli(args: &[&str]) -> (String, String, i32) {
    let out = Command::new(env!("CARGO_BIN_EXE_sentencekv"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
        out.status.code().unwrap_or(-1),
    )
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.ini");
    std::fs::write(
        &path,
        "haystack_len = 320\nneedle_len = 16\ntopic_count = 8\nvocab_size = 128\n\
         tau = 32\nr = 2\nn_window = 12\nlayers = 2\nheads = 2\nhead_dim = 8\n\
         seeds = 0,1\ndepths = 0.25,0.75\nsteps = 6\nr_list = 1,2\n",
    )
    .unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn unreadable_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, stderr, code) = run_cli(&[
        "niah",
        "--config",
        "/nonexistent/nope.ini",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("usage error"));
}

#[test]
fn unknown_flag_exits_2() {
    let (_, _, code) = run_cli(&["niah", "--no-such-flag"]);
    assert_eq!(code, 2);
}

#[test]
fn unknown_config_key_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.ini");
    std::fs::write(&path, "definitely_not_a_key = 1\n").unwrap();
    let (_, stderr, code) = run_cli(&[
        "niah",
        "--config",
        path.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "stderr: {stderr}");
}

#[test]
fn niah_emits_one_row_per_policy_seed_depth() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let (_, stderr, code) =
        run_cli(&["niah", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0, "stderr: {stderr}");
    let csv = std::fs::read_to_string(out_dir.join("niah_results.csv")).unwrap();
    let data_rows =
        csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with("policy,")).count();
    // 6 policies (sentencekv, full, static_evict, h2o, quest16, quest32)
    // x 2 seeds x 2 depths.
    assert_eq!(data_rows, 6 * 2 * 2);
    assert!(csv.contains(sentencekv::SUMMARY_CSV_HEADER));
    // Memory projection file rides along.
    let proj = std::fs::read_to_string(out_dir.join("memory_projection.csv")).unwrap();
    assert!(proj.contains("context_tokens,bytes"));
}

#[test]
fn flag_overrides_are_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let (_, stderr, code) = run_cli(&[
        "niah",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--tau",
        "128",
        "--r",
        "3",
        "--policy",
        "sentencekv",
    ]);
    assert_eq!(code, 0, "stderr: {stderr}");
    let csv = std::fs::read_to_string(out_dir.join("niah_results.csv")).unwrap();
    assert!(csv.contains("# tau=128\n"), "tau echo missing");
    assert!(csv.contains("# r=3\n"), "r echo missing");
    assert!(csv.contains("# policy=sentencekv\n"));
    let data_rows =
        csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with("policy,")).count();
    assert_eq!(data_rows, 2 * 2, "policy restriction should keep one policy");
    for line in csv.lines().filter(|l| l.starts_with("sentencekv,")) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3], "128");
        assert_eq!(cols[4], "3");
    }
}

#[test]
fn ablate_cardinality_and_pairing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out_a = tmp.path().join("plain");
    let (_, stderr, code) =
        run_cli(&["ablate", "--config", &cfg, "--out", out_a.to_str().unwrap()]);
    assert_eq!(code, 0, "stderr: {stderr}");
    let csv = std::fs::read_to_string(out_a.join("ablation.csv")).unwrap();
    let rows: Vec<&str> =
        csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with("segmentation,")).collect();
    // r_list of 2 x 2 strategies, punctuation only.
    assert_eq!(rows.len(), 2 * 2);

    // Asking for equal-size chunks runs both modes and emits paired rows.
    let out_b = tmp.path().join("paired");
    let (_, _, code) = run_cli(&[
        "ablate",
        "--config",
        &cfg,
        "--out",
        out_b.to_str().unwrap(),
        "--segmentation",
        "equal_chunks:32",
    ]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(out_b.join("ablation.csv")).unwrap();
    let rows: Vec<&str> =
        csv.lines().filter(|l| !l.starts_with('#') && !l.starts_with("segmentation,")).collect();
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().any(|r| r.starts_with("punctuation,")));
    assert!(rows.iter().any(|r| r.starts_with("equal_chunks:32,")));
}

#[test]
fn decode_writes_trace_and_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let (_, stderr, code) = run_cli(&[
        "decode",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--steps",
        "5",
    ]);
    assert_eq!(code, 0, "stderr: {stderr}");
    let trace = std::fs::read_to_string(out_dir.join("trace.csv")).unwrap();
    assert!(trace.contains("policy,step,layer,top1_bucket,hot_count,onload_tokens,needle_hit"));
    let rows = trace.lines().filter(|l| l.starts_with("sentencekv,")).count();
    assert_eq!(rows, 5 * 2, "one row per step per layer");
    let ledger = std::fs::read_to_string(out_dir.join("ledger.csv")).unwrap();
    assert!(ledger.contains("step,layer,onload_tokens,onload_bytes,offload_bytes"));
}

#[test]
fn memcalc_zero_and_reference_values() {
    let (out, _, code) =
        run_cli(&["memcalc", "--m", "0", "--h", "32", "--d", "128", "--l", "32768"]);
    assert_eq!(code, 0);
    assert_eq!(out, "0 bytes\n0.00 GiB\n");
    let (out, _, _) =
        run_cli(&["memcalc", "--m", "32", "--h", "8", "--d", "128", "--l", "32768"]);
    assert_eq!(out, "4294967296 bytes\n4.00 GiB\n");
}

#[test]
fn quest_policy_uses_chunk_size_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out_dir = tmp.path().join("out");
    let (_, stderr, code) = run_cli(&[
        "niah",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--policy",
        "quest",
        "--chunk-size",
        "16",
    ]);
    assert_eq!(code, 0, "stderr: {stderr}");
    let csv = std::fs::read_to_string(out_dir.join("niah_results.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("quest16,")));
}
