// SPDX-License-Identifier: Apache-2.0

//! Command-line front end for the simulator.
//!
//! Exit codes: 0 success, 1 assertion/attack/verification failure,
//! 2 parse or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vmplsim_core::attest::{verify_bundle, NestedBundle, TrustAnchors, Verdict};
use vmplsim_core::machine::{CryptoMode, MachineConfig};
use vmplsim_core::manifest::{offline_measurement, parse_manifest};
use vmplsim_core::scenario::{parse_scenario, run_scenario, ScenarioError};

#[derive(Parser)]
#[command(name = "vmplsim", version, about = "VMPL-isolated enclave simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute an enclave image's measurement offline, without running
    /// any guest code, plus the launch digest of the machine it targets.
    Measure {
        /// Enclave manifest (TOML).
        manifest: PathBuf,
        /// Scenario supplying the machine configuration (defaults apply
        /// otherwise).
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Run a scenario: build enclaves, execute the App and attack scripts,
    /// and evaluate the expected assertions.
    Run {
        /// Scenario file (TOML).
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Draw all key material from the seeded DRBG so ledgers and
        /// bundles are byte-stable. Default uses system entropy.
        #[arg(long)]
        deterministic_crypto: bool,
        /// Write the event ledger here.
        #[arg(long)]
        ledger_out: Option<PathBuf>,
        /// Write the attestation bundle here (requires an [attestation]
        /// section in the scenario).
        #[arg(long)]
        bundle_out: Option<PathBuf>,
        /// Write the matching trust anchors here.
        #[arg(long)]
        anchors_out: Option<PathBuf>,
        /// Write the run report here (also printed to stdout).
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Verify an attestation bundle against trust anchors.
    Verify {
        /// Bundle file (canonical JSON).
        bundle: PathBuf,
        /// Trust anchors file (canonical JSON).
        anchors: PathBuf,
    },
    /// Apply a named tamper transformation to a bundle, for testing the
    /// verifier.
    Tamper {
        /// Bundle file to read.
        bundle: PathBuf,
        /// One of: flip-launch-digest, flip-report-data,
        /// flip-snp-signature, swap-aik, flip-mrenclave, flip-enclave-sig,
        /// set-vmpl1.
        transform: String,
        /// Output path for the tampered bundle.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Measure { manifest, scenario } => cmd_measure(&manifest, scenario.as_deref()),
        Command::Run {
            scenario,
            seed,
            deterministic_crypto,
            ledger_out,
            bundle_out,
            anchors_out,
            report_out,
        } => cmd_run(
            &scenario,
            seed,
            deterministic_crypto,
            ledger_out.as_deref(),
            bundle_out.as_deref(),
            anchors_out.as_deref(),
            report_out.as_deref(),
        ),
        Command::Verify { bundle, anchors } => cmd_verify(&bundle, &anchors),
        Command::Tamper { bundle, transform, out } => cmd_tamper(&bundle, &transform, &out),
    }
}

fn cmd_measure(manifest_path: &Path, scenario_path: Option<&Path>) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| anyhow::anyhow!("{}: {e}", manifest_path.display()))?;
    let manifest = parse_manifest(&text)?.resolve(manifest_path.parent())?;
    let mrenclave = offline_measurement(&manifest);
    let cfg = match scenario_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
            parse_scenario(&text)?.machine.to_config()
        }
        None => MachineConfig::default(),
    };
    let launch_digest = vmplsim_core::machine::launch_digest_for(&cfg)
        .map_err(|e| anyhow::anyhow!("machine configuration: {e}"))?;
    println!("mrenclave = {}", hex::encode(mrenclave));
    println!("launch_digest = {}", hex::encode(launch_digest));
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    scenario_path: &Path,
    seed_override: Option<u64>,
    deterministic_crypto: bool,
    ledger_out: Option<&Path>,
    bundle_out: Option<&Path>,
    anchors_out: Option<&Path>,
    report_out: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(scenario_path)
        .map_err(|e| anyhow::anyhow!("{}: {e}", scenario_path.display()))?;
    let mut scenario = parse_scenario(&text)?;
    if let Some(seed) = seed_override {
        scenario.seed = seed;
    }
    let crypto = if deterministic_crypto {
        CryptoMode::Deterministic(scenario.seed)
    } else {
        CryptoMode::SystemEntropy
    };
    let base_dir = scenario_path.parent().unwrap_or(Path::new("."));
    let report = match run_scenario(&scenario, base_dir, crypto) {
        Ok(report) => report,
        // Parse/config-class problems exit 2 via the error path; runtime
        // aborts are scenario failures.
        Err(
            e @ (ScenarioError::Parse(_)
            | ScenarioError::Manifest(_, _)
            | ScenarioError::Io(_)
            | ScenarioError::UnknownEnclave(_)),
        ) => {
            return Err(e.into());
        }
        Err(e) => {
            eprintln!("scenario failed: {e}");
            return Ok(ExitCode::from(1));
        }
    };
    print!("{}", report.report_text);
    if let Some(path) = ledger_out {
        std::fs::write(path, report.ledger_text.as_bytes())?;
    }
    if let Some(path) = report_out {
        std::fs::write(path, report.report_text.as_bytes())?;
    }
    if let Some(path) = bundle_out {
        match &report.bundle_json {
            Some(bytes) => std::fs::write(path, bytes)?,
            None => anyhow::bail!("--bundle-out given but the scenario has no [attestation] section"),
        }
    }
    if let Some(path) = anchors_out {
        match &report.anchors_json {
            Some(bytes) => std::fs::write(path, bytes)?,
            None => anyhow::bail!("--anchors-out given but the scenario has no [attestation] section"),
        }
    }
    Ok(if report.failed() { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn cmd_verify(bundle_path: &Path, anchors_path: &Path) -> anyhow::Result<ExitCode> {
    let bundle_bytes = std::fs::read(bundle_path)
        .map_err(|e| anyhow::anyhow!("{}: {e}", bundle_path.display()))?;
    let anchors_bytes = std::fs::read(anchors_path)
        .map_err(|e| anyhow::anyhow!("{}: {e}", anchors_path.display()))?;
    let bundle = NestedBundle::from_json(&bundle_bytes)?;
    let anchors = TrustAnchors::from_json(&anchors_bytes)?;
    match verify_bundle(&bundle, &anchors) {
        Verdict::Accept => {
            println!("accept");
            Ok(ExitCode::SUCCESS)
        }
        Verdict::Reject(reason) => {
            println!("reject({reason})");
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_tamper(bundle_path: &Path, transform: &str, out: &Path) -> anyhow::Result<ExitCode> {
    let bytes = std::fs::read(bundle_path)
        .map_err(|e| anyhow::anyhow!("{}: {e}", bundle_path.display()))?;
    let mut bundle = NestedBundle::from_json(&bytes)?;
    match transform {
        "flip-launch-digest" => bundle.snp_report.launch_digest[0] ^= 0x01,
        "flip-report-data" => bundle.snp_report.report_data[0] ^= 0x01,
        "flip-snp-signature" => bundle.snp_report.signature[0] ^= 0x01,
        "swap-aik" => {
            // A fresh, validly-formed AIK that was never bound to the
            // platform; the enclave report is re-signed under it.
            let impostor = vmplsim_core::attest::Aik::generate(&mut rand::rngs::OsRng);
            bundle.aik_public = impostor.public_bytes();
            bundle.enclave_sig = impostor.sign_report(&bundle.enclave_report);
        }
        "flip-mrenclave" => bundle.enclave_report.mrenclave[0] ^= 0x01,
        "flip-enclave-sig" => bundle.enclave_sig[0] ^= 0x01,
        "set-vmpl1" => bundle.snp_report.vmpl = 1,
        other => anyhow::bail!(
            "unknown transform '{other}' (see `vmplsim tamper --help` for the list)"
        ),
    }
    std::fs::write(out, bundle.to_canonical_json())?;
    println!("wrote tampered bundle ({transform}) to {}", out.display());
    Ok(ExitCode::SUCCESS)
}
