//! End-to-end tests of the `pkus` binary: artifact determinism, exit codes,
//! tamper handling, and the serve/revoke/serve flow.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pkus() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pkus"))
}

fn scenario_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/standard.toml")
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("pkus-cli-test-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(args: &[&str]) -> Output {
    let out = pkus().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "pkus {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> Output {
    let out = pkus().args(args).output().unwrap();
    assert!(
        !out.status.success(),
        "pkus {args:?} unexpectedly succeeded"
    );
    out
}

fn prune_all(scenario: &str, out_dir: &str) {
    for provider in ["alice", "bob"] {
        run_ok(&[
            "prune",
            "--scenario",
            scenario,
            "--provider",
            provider,
            "--out-dir",
            out_dir,
        ]);
    }
}

#[test]
fn same_seed_produces_byte_identical_adapter_files() {
    let scenario = scenario_path();
    let scenario = scenario.to_str().unwrap();
    let dir_a = tmpdir("det-a");
    let dir_b = tmpdir("det-b");
    for dir in [&dir_a, &dir_b] {
        run_ok(&[
            "prune",
            "--scenario",
            scenario,
            "--provider",
            "alice",
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
    }
    let a = fs::read(dir_a.join("adapters-alice.bin")).unwrap();
    let b = fs::read(dir_b.join("adapters-alice.bin")).unwrap();
    assert_eq!(a, b);
    // a different seed changes the artifact
    let dir_c = tmpdir("det-c");
    run_ok(&[
        "prune",
        "--scenario",
        scenario,
        "--provider",
        "alice",
        "--seed",
        "777",
        "--out-dir",
        dir_c.to_str().unwrap(),
    ]);
    // key material differs but training inputs are scenario-level, so the
    // adapter payload itself is still identical
    let c = fs::read(dir_c.join("adapters-alice.bin")).unwrap();
    assert_eq!(a, c);
}

#[test]
fn unknown_provider_and_missing_blobs_exit_nonzero() {
    let scenario = scenario_path();
    let scenario = scenario.to_str().unwrap();
    let dir = tmpdir("errs");
    let dir = dir.to_str().unwrap();
    run_err(&[
        "prune",
        "--scenario",
        scenario,
        "--provider",
        "ghost",
        "--out-dir",
        dir,
    ]);
    // lifecycle without adapter payloads
    let out = run_err(&["lifecycle", "--scenario", scenario, "--out-dir", dir]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `pkus prune"));
}

#[test]
fn lifecycle_serve_and_audit_verify_roundtrip() {
    let scenario = scenario_path();
    let scenario = scenario.to_str().unwrap();
    let dir = tmpdir("happy");
    let dir_s = dir.to_str().unwrap();
    prune_all(scenario, dir_s);
    run_ok(&["lifecycle", "--scenario", scenario, "--out-dir", dir_s]);
    run_ok(&[
        "serve",
        "--scenario",
        scenario,
        "--request",
        "0",
        "--out-dir",
        dir_s,
    ]);
    let out = run_ok(&["audit", "verify", "--out-dir", dir_s]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("audit chain OK"));

    // serve artifacts exist and parse
    let serve_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("serve-0.json")).unwrap()).unwrap();
    assert_eq!(serve_json["client"], "carol");
    assert!(serve_json["output"].as_array().unwrap().len() == 6);
    let trace = fs::read_to_string(dir.join("trace-0.csv")).unwrap();
    assert!(trace.starts_with("token,event,actor,start,end,bytes"));
}

#[test]
fn tampered_adapter_file_fails_onboarding() {
    let scenario = scenario_path();
    let scenario = scenario.to_str().unwrap();
    let dir = tmpdir("tamper");
    let dir_s = dir.to_str().unwrap();
    prune_all(scenario, dir_s);
    // flip one byte in alice's payload
    let path = dir.join("adapters-alice.bin");
    let mut blob = fs::read(&path).unwrap();
    let idx = blob.len() / 2;
    blob[idx] ^= 0x01;
    fs::write(&path, &blob).unwrap();
    let out = run_err(&["lifecycle", "--scenario", scenario, "--out-dir", dir_s]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("failed its provider signature"),
        "unexpected error: {stderr}"
    );
}

#[test]
fn mutated_audit_log_is_rejected_with_position() {
    let scenario = scenario_path();
    let scenario = scenario.to_str().unwrap();
    let dir = tmpdir("audit");
    let dir_s = dir.to_str().unwrap();
    prune_all(scenario, dir_s);
    run_ok(&["lifecycle", "--scenario", scenario, "--out-dir", dir_s]);
    let log_path = dir.join("audit.log");
    let log = fs::read_to_string(&log_path).unwrap();
    let mut lines: Vec<String> = log.lines().map(String::from).collect();
    lines[3] = lines[3].replace("\"event\":\"", "\"event\":\"x");
    fs::write(&log_path, lines.join("\n")).unwrap();
    let out = run_err(&["audit", "verify", "--out-dir", dir_s]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 4"), "stderr: {stderr}");
}

#[test]
fn denied_client_exits_nonzero_and_is_audited() {
    let scenario = scenario_path();
    let scenario = scenario.to_str().unwrap();
    let dir = tmpdir("deny");
    let dir_s = dir.to_str().unwrap();
    prune_all(scenario, dir_s);
    // request 2 comes from a client with no lease
    let out = run_err(&[
        "serve",
        "--scenario",
        scenario,
        "--request",
        "2",
        "--out-dir",
        dir_s,
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("denied"));
    let log = fs::read_to_string(dir.join("audit.log")).unwrap();
    assert!(log.contains("authorize_denied"));
    run_ok(&["audit", "verify", "--out-dir", dir_s]);
}

#[test]
fn lease_budget_is_enforced_across_tokens() {
    let scenario = scenario_path();
    let scenario = scenario.to_str().unwrap();
    let dir = tmpdir("budget");
    let dir_s = dir.to_str().unwrap();
    prune_all(scenario, dir_s);
    // dave has max_requests = 2; his single-token request costs one batch
    // per layer (3 layers), so it is denied at the third batch
    let out = run_err(&[
        "serve",
        "--scenario",
        scenario,
        "--request",
        "1",
        "--out-dir",
        dir_s,
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("denied"));
}

#[test]
fn revoked_provider_is_excluded_and_serve_matches_counterfactual() {
    let scenario = scenario_path();
    let scenario = scenario.to_str().unwrap();
    let dir = tmpdir("revoke");
    let dir_s = dir.to_str().unwrap();
    prune_all(scenario, dir_s);
    run_ok(&[
        "serve",
        "--scenario",
        scenario,
        "--request",
        "0",
        "--out-dir",
        dir_s,
    ]);
    let before: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("serve-0.json")).unwrap()).unwrap();

    run_ok(&[
        "revoke",
        "--scenario",
        scenario,
        "--provider",
        "alice",
        "--out-dir",
        dir_s,
    ]);
    let quote: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("final-quote-alice.json")).unwrap())
            .unwrap();
    let marker_hex = hex::encode(b"PKUS-REVOKED\x00\x00\x00\x00");
    assert!(quote["user_data"]
        .as_str()
        .unwrap()
        .starts_with(&marker_hex));

    run_ok(&[
        "serve",
        "--scenario",
        scenario,
        "--request",
        "0",
        "--out-dir",
        dir_s,
    ]);
    let after: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("serve-0.json")).unwrap()).unwrap();
    assert_ne!(before["output"], after["output"]);
    // alice no longer appears in the per-provider stats
    assert!(after["per_provider"].get("alice").is_none());
    assert!(after["per_provider"].get("bob").is_some());
    // the audit log records the revocation and still verifies
    let log = fs::read_to_string(dir.join("audit.log")).unwrap();
    assert!(log.contains("\"revoked\""));
    run_ok(&["audit", "verify", "--out-dir", dir_s]);
}

#[test]
fn bench_reports_batching_gains() {
    let dir = tmpdir("bench");
    let dir_s = dir.to_str().unwrap();
    let batched = run_ok(&[
        "bench",
        "--providers",
        "2",
        "--tokens",
        "1",
        "--segment-size",
        "6",
        "--seed",
        "5",
        "--out-dir",
        dir_s,
    ]);
    let unbatched = run_ok(&[
        "bench",
        "--providers",
        "2",
        "--tokens",
        "1",
        "--segment-size",
        "1",
        "--seed",
        "5",
        "--out-dir",
        dir_s,
    ]);
    let parse = |out: &Output| {
        let line = String::from_utf8_lossy(&out.stdout);
        let makespan: f64 = line
            .split_whitespace()
            .find_map(|f| f.strip_prefix("makespan="))
            .unwrap()
            .parse()
            .unwrap();
        let messages: usize = line
            .split_whitespace()
            .find_map(|f| f.strip_prefix("messages="))
            .unwrap()
            .parse()
            .unwrap();
        (makespan, messages)
    };
    let (m_batched, n_batched) = parse(&batched);
    let (m_unbatched, n_unbatched) = parse(&unbatched);
    assert!(m_batched < m_unbatched);
    assert_eq!(n_unbatched, 6 * n_batched);
    assert!(dir.join("bench-trace.csv").exists());
}

#[test]
fn realtime_mode_matches_simulated_output() {
    let realtime = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/realtime.toml");
    let realtime = realtime.to_str().unwrap();
    let dir = tmpdir("realtime");
    let dir_s = dir.to_str().unwrap();
    run_ok(&[
        "prune",
        "--scenario",
        realtime,
        "--provider",
        "alice",
        "--out-dir",
        dir_s,
    ]);
    run_ok(&[
        "serve",
        "--scenario",
        realtime,
        "--request",
        "0",
        "--out-dir",
        dir_s,
    ]);
    let rt: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("serve-0.json")).unwrap()).unwrap();

    // same scenario, flipped to simulated mode
    let text = fs::read_to_string(realtime)
        .unwrap()
        .replace("mode = \"realtime\"", "mode = \"simulated\"");
    let sim_scenario = dir.join("simulated.toml");
    fs::write(&sim_scenario, text).unwrap();
    run_ok(&[
        "serve",
        "--scenario",
        sim_scenario.to_str().unwrap(),
        "--request",
        "0",
        "--out-dir",
        dir_s,
    ]);
    let sim: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("serve-0.json")).unwrap()).unwrap();
    assert_eq!(rt["output"], sim["output"]);
    assert_eq!(rt["message_count"], sim["message_count"]);
}

#[test]
fn prune_flag_overrides_reach_the_search() {
    let scenario = scenario_path();
    let scenario = scenario.to_str().unwrap();
    let dir = tmpdir("prune-flags");
    let dir_s = dir.to_str().unwrap();
    // tolerate any metric drop: the search must commit all the way to r_max
    run_ok(&[
        "prune",
        "--scenario",
        scenario,
        "--provider",
        "alice",
        "--epsilon",
        "1.0",
        "--r-max",
        "0.75",
        "--delta-r",
        "0.25",
        "--steps",
        "20",
        "--checkpoint-interval",
        "4",
        "--out-dir",
        dir_s,
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("prune-report-alice.json")).unwrap())
            .unwrap();
    assert_eq!(report["final_ratio"].as_f64().unwrap(), 0.75);
}

#[test]
fn serve_is_deterministic_across_runs() {
    let scenario = scenario_path();
    let scenario = scenario.to_str().unwrap();
    let dir = tmpdir("serve-det");
    let dir_s = dir.to_str().unwrap();
    prune_all(scenario, dir_s);
    run_ok(&[
        "serve",
        "--scenario",
        scenario,
        "--request",
        "0",
        "--out-dir",
        dir_s,
    ]);
    let first = fs::read_to_string(dir.join("serve-0.json")).unwrap();
    run_ok(&[
        "serve",
        "--scenario",
        scenario,
        "--request",
        "0",
        "--out-dir",
        dir_s,
    ]);
    let second = fs::read_to_string(dir.join("serve-0.json")).unwrap();
    assert_eq!(first, second);
}
