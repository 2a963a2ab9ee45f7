// SPDX-License-Identifier: Apache-2.0

//! Drives the built binary against the shipped manifests and scenarios.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_vmplsim")
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).current_dir(repo_root()).output().expect("spawn vmplsim")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

#[test]
fn measure_prints_pinned_golden() {
    let out = run(&["measure", "manifests/hello.toml"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    assert!(
        text.contains("mrenclave = cde56089fd17c8392f5328fc02f67b057ce5bc8dfc0414056d39cd7d2c5b38b8"),
        "{text}"
    );
    assert!(text.contains("launch_digest = "), "{text}");
}

#[test]
fn measure_parse_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\nthis is not toml").unwrap();
    let out = run(&["measure", bad.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn run_shipped_scenarios_succeed() {
    for scenario in
        ["ecall_roundtrip.toml", "ocall_roundtrip.toml", "aex_resume.toml", "attack_catalog.toml"]
    {
        let path = format!("scenarios/{scenario}");
        let out = run(&["run", &path, "--deterministic-crypto"]);
        assert_eq!(exit_code(&out), 0, "{scenario}: {}", stdout(&out));
        assert!(stdout(&out).contains("status = ok"), "{scenario}");
    }
}

#[test]
fn run_with_failing_assertion_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // Copy manifest next to the scenario so the relative path resolves.
    std::fs::create_dir(dir.path().join("m")).unwrap();
    std::fs::copy(
        repo_root().join("manifests/hello.toml"),
        dir.path().join("m/hello.toml"),
    )
    .unwrap();
    let scenario = r#"
seed = 5

[machine]
total_pages = 512
vmpl0_pages = 128
monitor_pages = 32

[[enclaves]]
manifest = "m/hello.toml"

[expected]
mrenclave = { hello = "0000000000000000000000000000000000000000000000000000000000000000" }
"#;
    let path = dir.path().join("wrong.toml");
    std::fs::write(&path, scenario).unwrap();
    let out = run(&["run", path.to_str().unwrap(), "--deterministic-crypto"]);
    assert_eq!(exit_code(&out), 1);
    assert!(stdout(&out).contains("mrenclave mismatch"));
}

#[test]
fn attest_verify_tamper_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("bundle.json");
    let anchors = dir.path().join("anchors.json");
    let out = run(&[
        "run",
        "scenarios/attest_pipeline.toml",
        "--deterministic-crypto",
        "--bundle-out",
        bundle.to_str().unwrap(),
        "--anchors-out",
        anchors.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stdout(&out));

    // Honest bundle verifies.
    let out = run(&["verify", bundle.to_str().unwrap(), anchors.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 0);
    assert!(stdout(&out).contains("accept"));

    // Each tamper transformation is rejected, with the reason reported.
    let cases = [
        ("flip-launch-digest", "reject(snp-signature)"),
        ("flip-report-data", "reject(snp-signature)"),
        ("flip-snp-signature", "reject(snp-signature)"),
        ("swap-aik", "reject(aik-binding)"),
        ("flip-mrenclave", "reject(enclave-signature)"),
        ("flip-enclave-sig", "reject(enclave-signature)"),
        // A byte-level vmpl edit voids the VCEK signature before the vmpl
        // check is reached.
        ("set-vmpl1", "reject(snp-signature)"),
    ];
    for (transform, expected) in cases {
        let tampered = dir.path().join(format!("{transform}.json"));
        let out = run(&[
            "tamper",
            bundle.to_str().unwrap(),
            transform,
            "--out",
            tampered.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "{transform}");
        let out = run(&["verify", tampered.to_str().unwrap(), anchors.to_str().unwrap()]);
        assert_eq!(exit_code(&out), 1, "{transform}");
        assert!(stdout(&out).contains(expected), "{transform}: {}", stdout(&out));
    }

    // Wrong trust anchors are reported by their own failing check.
    let anchors_json = std::fs::read_to_string(&anchors).unwrap();
    let mut parsed: serde_json_value::Value = serde_json_value::from_str(&anchors_json).unwrap();
    let launch = parsed["launch_digest"].as_str().unwrap().to_string();
    let mut flipped = base64_decode(&launch);
    flipped[0] ^= 1;
    parsed["launch_digest"] = serde_json_value::Value::String(base64_encode(&flipped));
    let wrong_anchors = dir.path().join("wrong_anchors.json");
    std::fs::write(&wrong_anchors, serde_json_value::to_string(&parsed).unwrap()).unwrap();
    let out = run(&["verify", bundle.to_str().unwrap(), wrong_anchors.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
    assert!(stdout(&out).contains("reject(launch-digest)"), "{}", stdout(&out));
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut artifacts = Vec::new();
    for round in 0..2 {
        let ledger = dir.path().join(format!("ledger{round}.txt"));
        let bundle = dir.path().join(format!("bundle{round}.json"));
        let report = dir.path().join(format!("report{round}.txt"));
        let out = run(&[
            "run",
            "scenarios/attest_pipeline.toml",
            "--deterministic-crypto",
            "--seed",
            "424242",
            "--ledger-out",
            ledger.to_str().unwrap(),
            "--bundle-out",
            bundle.to_str().unwrap(),
            "--report-out",
            report.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0);
        artifacts.push((
            std::fs::read(&ledger).unwrap(),
            std::fs::read(&bundle).unwrap(),
            std::fs::read(&report).unwrap(),
        ));
    }
    assert_eq!(artifacts[0], artifacts[1]);
}

// Minimal JSON/base64 helpers so the test crate needs no extra deps.
mod serde_json_value {
    pub use serde_json::{from_str, to_string, Value};
}

fn base64_decode(s: &str) -> Vec<u8> {
    use base64::Engine as _;
    base64::engine::general_purpose::STANDARD.decode(s).unwrap()
}

fn base64_encode(bytes: &[u8]) -> String {
    use base64::Engine as _;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}
