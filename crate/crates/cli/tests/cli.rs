//! End-to-end CLI checks: exit codes, JSON outputs, and the shipped
//! configuration files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fpdt")
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout not JSON: {e}\n---\n{}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

#[test]
fn verify_with_defaults_exits_zero() {
    let out = run(&["verify", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["pass"], true);
    assert_eq!(v["format"], "fpdt-verify/1");
    assert!(v["max_abs_err_forward"].as_f64().unwrap() < 1e-9);
}

#[test]
fn verify_with_shipped_default_config_exits_zero() {
    let cfg = workspace_root().join("configs/default.toml");
    let out = run(&["verify", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn verify_stats_reports_residency_one() {
    let out = run(&["verify", "--stats"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["residency_highwater"], 1);
    assert!(v["ledger"]["bytes_offloaded"].as_u64().unwrap() > 0);
}

#[test]
fn bad_divisibility_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    // 16 tokens cannot split across p*u = 32.
    std::fs::write(&path, "[model]\nseq_len = 16\n[chunks]\nu_attn = 8\n").unwrap();
    let out = run(&["verify", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("divisible"), "stderr: {err}");
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[model]\nhiden = 4096\n").unwrap();
    let out = run(&["mem-report", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn explain_prints_resolved_defaults() {
    let out = run(&["verify", "--explain"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("u_attn = 4"));
    assert!(text.contains("flop_efficiency = 0.5"));
    assert!(text.contains("forward_max_abs"));
}

#[test]
fn mem_report_echoes_coefficients_and_halves_under_doubled_u() {
    let out = run(&["mem-report"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("# coeffs fwd: hidden=1 qkv_proj=3 all2all=4 attention=4 ffn=4 other=3"));
    assert!(text.contains("# coeffs bwd: hidden=2 qkv_proj=6 all2all=4 attention=8 ffn=8 other=0"));

    let dir = tempfile::tempdir().unwrap();
    let p4 = dir.path().join("u4.toml");
    let p8 = dir.path().join("u8.toml");
    std::fs::write(&p4, "[chunks]\nu_attn = 4\n").unwrap();
    std::fs::write(&p8, "[chunks]\nu_attn = 8\n").unwrap();
    let attn_row = |out: &Output| -> u64 {
        String::from_utf8_lossy(&out.stdout)
            .lines()
            .find(|l| l.starts_with("Attention"))
            .unwrap()
            .split_whitespace()
            .nth(2)
            .unwrap()
            .parse()
            .unwrap()
    };
    let a4 = attn_row(&run(&["mem-report", "--config", p4.to_str().unwrap()]));
    let a8 = attn_row(&run(&["mem-report", "--config", p8.to_str().unwrap()]));
    assert_eq!(a4, 2 * a8);
}

#[test]
fn crossover_in_band() {
    let out = run(&["crossover"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    let c = v["crossover_tokens"].as_u64().unwrap();
    assert!((32768..=65536).contains(&c), "crossover {c}");
}

#[test]
fn simulate_writes_valid_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.json");
    let out = run(&["simulate", "--trace", trace.to_str().unwrap()]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert!(v["mfu"].as_f64().unwrap() > 0.0);
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    let arr = doc.as_array().unwrap();
    assert!(!arr.is_empty());
    let complete = arr.iter().find(|e| e["ph"] == "X").unwrap();
    assert!(complete["pid"].is_number());
    assert!(complete["tid"].is_number());
}

#[test]
fn double_buffer_off_never_beats_on() {
    let makespan = |db: &str| -> f64 {
        let out = run(&["simulate", "--double-buffer", db]);
        assert!(out.status.success());
        stdout_json(&out)["makespan_s"].as_f64().unwrap()
    };
    assert!(makespan("on") <= makespan("off") + 1e-12);
}

#[test]
fn sweep_reports_interior_argmax() {
    let out = run(&["sweep"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let rows: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("chunk_tokens"))
        .collect();
    assert!(rows.len() >= 3);
    let argmax_line = text.lines().find(|l| l.contains("argmax")).unwrap();
    let first_chunk = rows.first().unwrap().split(',').next().unwrap();
    let last_chunk = rows.last().unwrap().split(',').next().unwrap();
    assert!(!argmax_line.contains(&format!("chunk_tokens={first_chunk} ")));
    assert!(!argmax_line.contains(&format!("chunk_tokens={last_chunk} ")));
}

#[test]
fn maxlen_ratio_on_8b_config_is_eight() {
    let cfg = workspace_root().join("configs/llama8b_8gpu.toml");
    let out = run(&["max-len", "--config", cfg.to_str().unwrap(), "--compare-offload"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["max_seq_len"].as_u64().unwrap(), 4_194_304);
    assert_eq!(v["max_seq_len_no_offload"].as_u64().unwrap(), 524_288);
    assert_eq!(v["ratio"].as_f64().unwrap(), 8.0);
}

#[test]
fn env_var_config_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("env.toml");
    std::fs::write(&path, "[chunks]\nu_attn = 2\n").unwrap();
    let out = Command::new(bin())
        .args(["verify", "--explain"])
        .env("FPDT_CONFIG", path.to_str().unwrap())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("u_attn = 2"));
}

#[test]
fn outputs_carry_config_hash() {
    let a = stdout_json(&run(&["crossover"]));
    let b = stdout_json(&run(&["simulate"]));
    assert_eq!(a["config_hash"], b["config_hash"]);
    assert!(a["config_hash"].as_str().unwrap().len() == 16);
}

#[test]
fn outputs_deterministic_across_runs() {
    let a = run(&["verify", "--seed", "9"]);
    let b = run(&["verify", "--seed", "9"]);
    assert_eq!(a.stdout, b.stdout);
    let a = run(&["simulate"]);
    let b = run(&["simulate"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn sweep_rejects_nondividing_size() {
    let out = run(&["sweep", "--sizes", "1000"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divide"));
}

#[test]
fn mem_report_8b_regression_snapshot() {
    // Frozen snapshot of the calibrated 8B report. Catches accidental
    // changes to the accounting formula or the shipped config.
    let cfg = workspace_root().join("configs/llama8b_8gpu.toml");
    let dir = tempfile::tempdir().unwrap();
    let json_path = dir.path().join("report.json");
    let out = run(&[
        "mem-report",
        "--config",
        cfg.to_str().unwrap(),
        "--json",
        json_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(doc["format"], "fpdt-mem-report/1");
    let ledger = &doc["ledger"];
    assert_eq!(ledger["peak_activation_bytes"].as_u64().unwrap(), 42_949_672_960);
    assert_eq!(ledger["model_state_bytes"].as_u64().unwrap(), 13_912_506_368);
    assert_eq!(ledger["cross_layer_bytes"].as_u64().unwrap(), 137_438_953_472);
    assert_eq!(ledger["cross_layer_on_host"], true);
    assert_eq!(ledger["host_bytes_used"].as_u64().unwrap(), 167_503_724_544);
    assert_eq!(doc["chunk_plan"]["u_ffn"], 16);
    assert_eq!(doc["chunk_plan"]["u_loss"], 64);
    // Attention backward row binds the peak.
    let attn = doc["ledger"]["step_bytes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["step"] == "Attention")
        .unwrap();
    assert_eq!(attn["backward"].as_u64().unwrap(), 42_949_672_960);
}
