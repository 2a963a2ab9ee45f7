// SPDX-License-Identifier: Apache-2.0

//! Scenario files: a seeded machine configuration, enclaves to build, an
//! App program, driver/hypervisor behavior, attack scripts, and expected
//! outcomes. Running a scenario is deterministic given its seed (with
//! deterministic crypto), down to the bytes of the ledger and bundle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::guest::{AttackScript, AttackVerdict, DriverPolicy};
use crate::machine::{AppRunOutcome, CryptoMode, Machine, MachineConfig};
use crate::manifest::{parse_manifest, LoadedEnclave};
use crate::types::{EnclaveId, PAGE_SIZE};
use crate::vcpu::HypervisorPolicy;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("manifest '{0}': {1}")]
    Manifest(String, String),
    #[error("io: {0}")]
    Io(String),
    #[error("unknown enclave name '{0}'")]
    UnknownEnclave(String),
    #[error("runtime abort during {phase}: {detail}")]
    Runtime { phase: &'static str, detail: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default)]
    pub machine: MachineSection,
    #[serde(default)]
    pub enclaves: Vec<EnclaveRef>,
    #[serde(default)]
    pub app: Option<AppSection>,
    #[serde(default)]
    pub driver: DriverSection,
    #[serde(default)]
    pub hypervisor: HypervisorSection,
    #[serde(default)]
    pub attacks: Vec<AttackSection>,
    #[serde(default)]
    pub attestation: Option<AttestationSection>,
    #[serde(default)]
    pub expected: ExpectedSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineSection {
    #[serde(default = "d_total")]
    pub total_pages: u64,
    #[serde(default = "d_vmpl0")]
    pub vmpl0_pages: u64,
    #[serde(default = "d_monitor")]
    pub monitor_pages: u64,
    #[serde(default = "d_budget")]
    pub step_budget: u64,
    #[serde(default = "d_resumes")]
    pub max_resumes: u64,
}

fn d_total() -> u64 {
    512
}
fn d_vmpl0() -> u64 {
    128
}
fn d_monitor() -> u64 {
    32
}
fn d_budget() -> u64 {
    crate::monitor::DEFAULT_STEP_BUDGET
}
fn d_resumes() -> u64 {
    64
}

impl Default for MachineSection {
    fn default() -> Self {
        MachineSection {
            total_pages: d_total(),
            vmpl0_pages: d_vmpl0(),
            monitor_pages: d_monitor(),
            step_budget: d_budget(),
            max_resumes: d_resumes(),
        }
    }
}

impl MachineSection {
    pub fn to_config(&self) -> MachineConfig {
        MachineConfig {
            total_pages: self.total_pages,
            vmpl0_pages: self.vmpl0_pages,
            monitor_pages: self.monitor_pages,
            step_budget: self.step_budget,
            max_resumes: self.max_resumes,
            ..MachineConfig::default()
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnclaveRef {
    /// Path to the manifest, relative to the scenario file.
    pub manifest: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSection {
    pub program: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSection {
    #[serde(default)]
    pub policy: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypervisorSection {
    #[serde(default)]
    pub policy: Option<String>,
    #[serde(default)]
    pub wrong_vmpl: Option<u8>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub kind: String,
    #[serde(default)]
    pub target_gpa: Option<u64>,
    #[serde(default)]
    pub enclave: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttestationSection {
    pub enclave: String,
    /// Hex, at most 64 bytes; zero padded.
    #[serde(default)]
    pub report_data: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedSection {
    /// Per-enclave mrenclave assertions (lowercase hex).
    #[serde(default)]
    pub mrenclave: BTreeMap<String, String>,
    /// Exact VMPL switch count over the app-run phase.
    #[serde(default)]
    pub app_vmpl_switches: Option<u64>,
    /// Verdict assertions: attack kind -> "blocked", "blocked(<kind>)",
    /// or "no-effect".
    #[serde(default)]
    pub attack_verdicts: BTreeMap<String, String>,
    /// "halted" or "fault".
    #[serde(default)]
    pub app_outcome: Option<String>,
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
}

/// Everything a scenario run produces.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub mrenclaves: BTreeMap<String, [u8; 32]>,
    pub verdicts: Vec<(String, AttackVerdict)>,
    pub app_outcome: Option<AppRunOutcome>,
    pub app_vmpl_switches: u64,
    pub total_vmpl_switches: u64,
    pub ledger_text: String,
    pub bundle_json: Option<Vec<u8>>,
    pub anchors_json: Option<Vec<u8>>,
    pub assertion_failures: Vec<String>,
    pub report_text: String,
}

impl RunReport {
    /// A run fails if any assertion failed or any attack succeeded.
    pub fn failed(&self) -> bool {
        !self.assertion_failures.is_empty()
            || self.verdicts.iter().any(|(_, v)| matches!(v, AttackVerdict::Succeeded(_)))
    }
}

fn parse_driver_policy(s: &str) -> Result<DriverPolicy, ScenarioError> {
    match s {
        "honest" => Ok(DriverPolicy::Honest),
        "skip-aep" => Ok(DriverPolicy::SkipAep),
        "tamper-leaf-params" => Ok(DriverPolicy::TamperLeafParams),
        other => Err(ScenarioError::Parse(format!("unknown driver policy '{other}'"))),
    }
}

fn parse_hypervisor_policy(section: &HypervisorSection) -> Result<HypervisorPolicy, ScenarioError> {
    match (section.policy.as_deref(), section.wrong_vmpl) {
        (None, None) | (Some("honest"), None) => Ok(HypervisorPolicy::Honest),
        (Some("refuse-switch"), None) => Ok(HypervisorPolicy::RefuseSwitch),
        (Some("wrong-vmpl"), Some(v)) | (None, Some(v)) => Ok(HypervisorPolicy::WrongVmpl(v)),
        (Some(other), _) => {
            Err(ScenarioError::Parse(format!("unknown hypervisor policy '{other}'")))
        }
    }
}

fn resolve_attack(
    section: &AttackSection,
    enclaves: &BTreeMap<String, LoadedEnclave>,
    machine: &Machine,
) -> Result<AttackScript, ScenarioError> {
    let enclave_of = |name: &Option<String>| -> Result<&LoadedEnclave, ScenarioError> {
        match name {
            Some(n) => enclaves.get(n).ok_or_else(|| ScenarioError::UnknownEnclave(n.clone())),
            None => enclaves
                .values()
                .next()
                .ok_or_else(|| ScenarioError::UnknownEnclave("<first>".into())),
        }
    };
    // Default probe target: a page in the middle of the monitor sub-range.
    let default_vmpl0_target =
        (machine.layout.monitor.start_page + machine.layout.monitor.pages / 2) * PAGE_SIZE;
    let script = match section.kind.as_str() {
        "read-vmpl0" => AttackScript::ReadVmpl0 {
            target_gpa: section.target_gpa.unwrap_or(default_vmpl0_target),
        },
        "write-vmpl0" => AttackScript::WriteVmpl0 {
            target_gpa: section.target_gpa.unwrap_or(default_vmpl0_target),
        },
        "remap-enclave-page" => AttackScript::RemapEnclavePage { enclave: enclave_of(&section.enclave)?.id },
        "skip-aep" => {
            let e = enclave_of(&section.enclave)?;
            AttackScript::SkipAep { enclave: e.id, tcs_gva: e.tcs_gva }
        }
        "tamper-leaf-params" => {
            // Tampering is observable during a build; use a throwaway
            // enclave created on the spot.
            AttackScript::TamperLeafParams { enclave: EnclaveId(0) }
        }
        "request-vmpl0-report" => AttackScript::RequestVmpl0Report,
        "derive-vmpl0-key" => AttackScript::DeriveVmpl0Key,
        other => return Err(ScenarioError::Parse(format!("unknown attack kind '{other}'"))),
    };
    Ok(script)
}

fn verdict_matches(expected: &str, verdict: &AttackVerdict) -> bool {
    match expected {
        "blocked" => matches!(verdict, AttackVerdict::Blocked(_)),
        "no-effect" => matches!(verdict, AttackVerdict::NoEffect),
        exact => verdict.label() == exact,
    }
}

/// Execute a scenario. Enclave builds happen under an honest driver and
/// hypervisor; the configured policies apply to the App phase and the
/// attacks that follow.
pub fn run_scenario(
    scenario: &Scenario,
    base_dir: &Path,
    crypto: CryptoMode,
) -> Result<RunReport, ScenarioError> {
    let mut machine = Machine::new(scenario.machine.to_config(), crypto)
        .map_err(|e| ScenarioError::Runtime { phase: "boot", detail: e.to_string() })?;

    // Build phase.
    let mut enclaves: BTreeMap<String, LoadedEnclave> = BTreeMap::new();
    let mut mrenclaves = BTreeMap::new();
    for r in &scenario.enclaves {
        let path = base_dir.join(&r.manifest);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        let manifest = parse_manifest(&text)
            .map_err(|e| ScenarioError::Manifest(r.manifest.clone(), e.to_string()))?
            .resolve(path.parent())
            .map_err(|e| ScenarioError::Manifest(r.manifest.clone(), e.to_string()))?;
        let loaded = machine.load_enclave(&manifest).map_err(|e| ScenarioError::Runtime {
            phase: "enclave build",
            detail: format!("{}: {e}", manifest.name),
        })?;
        mrenclaves.insert(loaded.name.clone(), loaded.mrenclave);
        enclaves.insert(loaded.name.clone(), loaded);
    }

    // Scenario policies take effect after the build.
    if let Some(policy) = &scenario.driver.policy {
        machine.guest.driver_policy = parse_driver_policy(policy)?;
    }
    machine.hypervisor = parse_hypervisor_policy(&scenario.hypervisor)?;

    // App phase.
    let switches_before_app = machine.ledger.vmpl_switches();
    let app_outcome = match &scenario.app {
        Some(app) => {
            let program = crate::evm::parse_program(&app.program)
                .map_err(|e| ScenarioError::Parse(format!("app program: {e}")))?;
            machine.set_app_program(program);
            match machine.run_app() {
                Ok(outcome) => Some(outcome),
                Err(crate::machine::MachineError::Stalled) => None,
                Err(e) => {
                    return Err(ScenarioError::Runtime {
                        phase: "app run",
                        detail: e.to_string(),
                    })
                }
            }
        }
        None => None,
    };
    let app_vmpl_switches = machine.ledger.vmpl_switches() - switches_before_app;

    // Attack phase.
    let mut verdicts = Vec::new();
    for section in &scenario.attacks {
        let verdict = if section.kind == "tamper-leaf-params" {
            // Fresh uninitialized enclave to tamper with.
            run_tamper_attack(&mut machine, &enclaves)
        } else {
            let script = resolve_attack(section, &enclaves, &machine)?;
            machine.run_attack(&script)
        };
        verdicts.push((section.kind.clone(), verdict));
    }

    // Attestation phase.
    let mut bundle_json = None;
    let mut anchors_json = None;
    if let Some(att) = &scenario.attestation {
        let loaded = enclaves
            .get(&att.enclave)
            .ok_or_else(|| ScenarioError::UnknownEnclave(att.enclave.clone()))?;
        let mut report_data = [0u8; 64];
        if !att.report_data.is_empty() {
            let raw = hex::decode(&att.report_data)
                .map_err(|e| ScenarioError::Parse(format!("report_data: {e}")))?;
            if raw.len() > 64 {
                return Err(ScenarioError::Parse("report_data longer than 64 bytes".into()));
            }
            report_data[..raw.len()].copy_from_slice(&raw);
        }
        let bundle = machine
            .attest_ecall(loaded.id, loaded.tcs_gva, report_data)
            .map_err(|e| ScenarioError::Runtime { phase: "attestation", detail: e.to_string() })?;
        anchors_json = Some(machine.trust_anchors(loaded.mrenclave).to_canonical_json());
        bundle_json = Some(bundle.to_canonical_json());
    }

    // Expectations.
    let mut failures = Vec::new();
    for (name, expected_hex) in &scenario.expected.mrenclave {
        match mrenclaves.get(name) {
            Some(got) => {
                let got_hex = hex::encode(got);
                if &got_hex != expected_hex {
                    failures.push(format!(
                        "mrenclave mismatch for {name}: expected {expected_hex}, got {got_hex}"
                    ));
                }
            }
            None => failures.push(format!("expected mrenclave for unknown enclave {name}")),
        }
    }
    if let Some(expected) = scenario.expected.app_vmpl_switches {
        if app_vmpl_switches != expected {
            failures.push(format!(
                "app phase recorded {app_vmpl_switches} VMPL switches, expected {expected}"
            ));
        }
    }
    for (kind, expected) in &scenario.expected.attack_verdicts {
        match verdicts.iter().find(|(k, _)| k == kind) {
            Some((_, verdict)) => {
                if !verdict_matches(expected, verdict) {
                    failures.push(format!(
                        "attack {kind}: expected {expected}, got {}",
                        verdict.label()
                    ));
                }
            }
            None => failures.push(format!("expected verdict for unlisted attack {kind}")),
        }
    }
    if let Some(expected) = &scenario.expected.app_outcome {
        let got = match &app_outcome {
            Some(AppRunOutcome::Halted) => "halted",
            Some(AppRunOutcome::Fault(_)) => "fault",
            None => "stalled",
        };
        if got != expected {
            failures.push(format!("app outcome: expected {expected}, got {got}"));
        }
    }

    // Deterministic human-readable summary.
    let mut report_text = String::new();
    let _ = writeln!(report_text, "seed = {}", scenario.seed);
    for (name, mr) in &mrenclaves {
        let _ = writeln!(report_text, "mrenclave {name} = {}", hex::encode(mr));
    }
    if let Some(outcome) = &app_outcome {
        let _ = writeln!(report_text, "app = {outcome:?}");
        let _ = writeln!(report_text, "app vmpl switches = {app_vmpl_switches}");
    }
    for (kind, verdict) in &verdicts {
        let _ = writeln!(report_text, "attack {kind} = {}", verdict.label());
    }
    for failure in &failures {
        let _ = writeln!(report_text, "FAILED: {failure}");
    }
    let _ = writeln!(
        report_text,
        "status = {}",
        if failures.is_empty()
            && !verdicts.iter().any(|(_, v)| matches!(v, AttackVerdict::Succeeded(_)))
        {
            "ok"
        } else {
            "failed"
        }
    );

    Ok(RunReport {
        mrenclaves,
        verdicts,
        app_outcome,
        app_vmpl_switches,
        total_vmpl_switches: machine.ledger.vmpl_switches(),
        ledger_text: machine.ledger.export_text(),
        bundle_json,
        anchors_json,
        assertion_failures: failures,
        report_text,
    })
}

/// Tampering needs a build in flight: create a throwaway enclave and let
/// the malicious driver skew one of its adds.
fn run_tamper_attack(
    machine: &mut Machine,
    _enclaves: &BTreeMap<String, LoadedEnclave>,
) -> AttackVerdict {
    // Place the scratch enclave (and its buffer window) away from anything
    // already mapped, keyed by how many enclaves exist so repeats work.
    let ordinal = machine.monitor.enclaves().count() as u64 + 1;
    let base = 0x100_0000 + ordinal * 0x10_0000;
    let size = 4 * PAGE_SIZE;
    let param_gva = 0x7e00_0000 + ordinal * 0x10_0000;
    let Ok(param_gpa) = machine.alloc_guest_page() else {
        return AttackVerdict::Succeeded("guest oom".into());
    };
    let created = machine.ioctl(crate::guest::DriverRequest::ecreate(
        base, size, 1, 0, param_gva, param_gpa, 1,
    ));
    let id = match created {
        Ok(crate::machine::LeafOutput::Created(id)) => id,
        other => return AttackVerdict::Succeeded(format!("scratch ecreate failed: {other:?}")),
    };
    machine.run_attack(&AttackScript::TamperLeafParams { enclave: id })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_parses() {
        let sc = parse_scenario("seed = 7\n").unwrap();
        assert_eq!(sc.seed, 7);
        assert_eq!(sc.machine.total_pages, 512);
        assert!(sc.enclaves.is_empty());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse_scenario("seed = 7\nnope = 1\n").is_err());
        assert!(parse_scenario("seed = 7\n[machine]\nbogus = 2\n").is_err());
    }

    #[test]
    fn policy_parsing() {
        let sc = parse_scenario(
            "seed = 1\n[driver]\npolicy = \"skip-aep\"\n[hypervisor]\npolicy = \"refuse-switch\"\n",
        )
        .unwrap();
        assert_eq!(parse_driver_policy(sc.driver.policy.as_deref().unwrap()).unwrap(), DriverPolicy::SkipAep);
        assert_eq!(parse_hypervisor_policy(&sc.hypervisor).unwrap(), HypervisorPolicy::RefuseSwitch);
    }

    #[test]
    fn attacks_without_enclaves_run() {
        let sc = parse_scenario(
            "seed = 3\n[[attacks]]\nkind = \"read-vmpl0\"\n[[attacks]]\nkind = \"derive-vmpl0-key\"\n",
        )
        .unwrap();
        let report =
            run_scenario(&sc, Path::new("."), CryptoMode::Deterministic(sc.seed)).unwrap();
        assert_eq!(report.verdicts.len(), 2);
        assert!(!report.failed(), "{:?}", report.verdicts);
    }
}
