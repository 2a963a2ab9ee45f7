// SPDX-License-Identifier: Apache-2.0

//! Acceptance suite. One test per criterion, each printing a PASS line
//! with its headline numbers (run with `--nocapture` to see them).
//!
//! Cycle-level costs are hardware-bound and out of scope here; transitions
//! are accounted as deterministic events instead, and the security claims
//! are checked as properties over randomized machines and adversarial
//! inputs.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use common::{hello_machine, ref_mrenclave, small_config, RefBuild};
use vmplsim_core::attest::{
    self, channel_open, channel_seal, verify_bundle, NestedBundle, PayloadType, RejectReason,
    TrustAnchors, Verdict,
};
use vmplsim_core::evm::{self, Instr, Program};
use vmplsim_core::guest::{AttackScript, AttackVerdict, DriverRequest};
use vmplsim_core::machine::{CryptoMode, LeafOutput, Machine};
use vmplsim_core::monitor::{encode_tcs_page, PagePerms, PageType};
use vmplsim_core::scenario::{parse_scenario, run_scenario};
use vmplsim_core::types::{Access, CpuMode, PAGE_SIZE};
use vmplsim_core::vcpu::Exception;

fn scenarios_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run_shipped(name: &str) -> vmplsim_core::scenario::RunReport {
    let dir = scenarios_dir();
    let text = std::fs::read_to_string(dir.join(name)).unwrap();
    let scenario = parse_scenario(&text).unwrap();
    run_scenario(&scenario, &dir, CryptoMode::Deterministic(scenario.seed)).unwrap()
}

fn assert_runtime(name: &str, start: Instant, limit: Duration) {
    let elapsed = start.elapsed();
    assert!(elapsed < limit, "{name} took {elapsed:?}, limit {limit:?}");
}

/// Criterion 1: an honest ECALL records exactly 2 VmplSwitch events, an
/// OCALL roundtrip exactly 2 more, an AEX+ERESUME cycle exactly 2 more.
#[test]
fn criterion_1_switch_accounting() {
    let start = Instant::now();
    let ecall = run_shipped("ecall_roundtrip.toml");
    assert!(!ecall.failed(), "{}", ecall.report_text);
    assert_eq!(ecall.app_vmpl_switches, 2);

    let ocall = run_shipped("ocall_roundtrip.toml");
    assert!(!ocall.failed(), "{}", ocall.report_text);
    assert_eq!(ocall.app_vmpl_switches, 4);

    let aex = run_shipped("aex_resume.toml");
    assert!(!aex.failed(), "{}", aex.report_text);
    assert_eq!(aex.app_vmpl_switches, 4);
    assert!(aex.ledger_text.contains("aex = 1"));

    assert_runtime("criterion 1", start, Duration::from_secs(1));
    println!(
        "PASS criterion 1: switch accounting (ecall=2, ocall=+2, aex+eresume=+2) in {:?}",
        start.elapsed()
    );
}

/// Random build script: 2..=5 pages (first a TCS), random distinct
/// offsets, random perms, random measured subset with random content.
struct RandomScript {
    base_gva: u64,
    size_bytes: u64,
    ssa_frame_size: u64,
    pages: Vec<(u64, PageType, PagePerms, Vec<u8>, bool)>,
}

fn random_script(rng: &mut StdRng) -> RandomScript {
    let size_pages = 8u64;
    let size_bytes = size_pages * PAGE_SIZE;
    let base_gva = (1 + rng.gen_range(1..20) as u64) * size_bytes;
    let page_count = rng.gen_range(2..=5usize);
    let mut offsets: Vec<u64> = (0..size_pages).collect();
    // TCS first at offset 0 with its SSA right behind it.
    offsets.retain(|o| *o != 0 && *o != 1);
    let mut pages = Vec::new();
    let tcs = encode_tcs_page(0, base_gva + PAGE_SIZE, 1).to_vec();
    pages.push((base_gva, PageType::Tcs, PagePerms::RW, tcs, rng.gen_bool(0.5)));
    pages.push((
        base_gva + PAGE_SIZE,
        PageType::Reg,
        PagePerms::RW,
        vec![0u8; PAGE_SIZE as usize],
        false,
    ));
    for _ in 2..page_count {
        let idx = rng.gen_range(0..offsets.len());
        let offset = offsets.remove(idx);
        let mut content = vec![0u8; PAGE_SIZE as usize];
        rng.fill(&mut content[..]);
        let perms = PagePerms {
            read: true,
            write: rng.gen_bool(0.7),
            execute: rng.gen_bool(0.3),
        };
        pages.push((base_gva + offset * PAGE_SIZE, PageType::Reg, perms, content, rng.gen_bool(0.7)));
    }
    RandomScript { base_gva, size_bytes, ssa_frame_size: 1, pages }
}

fn build_on_machine(machine: &mut Machine, script: &RandomScript, param_gva: u64) -> [u8; 32] {
    let param_gpa = machine.alloc_guest_page().unwrap();
    let out = machine
        .ioctl(DriverRequest::ecreate(
            script.base_gva,
            script.size_bytes,
            script.ssa_frame_size,
            0,
            param_gva,
            param_gpa,
            1,
        ))
        .unwrap();
    let LeafOutput::Created(id) = out else { panic!("ecreate output") };
    for (gva, page_type, perms, content, _) in &script.pages {
        let src = machine.alloc_guest_page().unwrap();
        machine.mem.write_gpa(src, content, 1).unwrap();
        machine.ioctl(DriverRequest::eadd(id, src, *gva, *page_type, *perms)).unwrap();
    }
    for (gva, _, _, _, measure) in &script.pages {
        if !measure {
            continue;
        }
        for chunk in 0..(PAGE_SIZE / 256) {
            machine.ioctl(DriverRequest::eextend(id, gva + chunk * 256)).unwrap();
        }
    }
    let LeafOutput::Measured(mrenclave) = machine.ioctl(DriverRequest::einit(id)).unwrap() else {
        panic!("einit output")
    };
    mrenclave
}

fn ref_build_of_script(script: &RandomScript) -> RefBuild {
    let type_code = |t: PageType| match t {
        PageType::Secs => 0u64,
        PageType::Tcs => 1,
        PageType::Reg => 2,
    };
    let adds = script
        .pages
        .iter()
        .map(|(gva, t, p, _, _)| {
            (
                gva - script.base_gva,
                type_code(*t),
                (p.read as u64) | (p.write as u64) << 1 | (p.execute as u64) << 2,
            )
        })
        .collect();
    let mut extends = Vec::new();
    for (gva, _, _, content, measure) in &script.pages {
        if !measure {
            continue;
        }
        for chunk in 0..(PAGE_SIZE / 256) {
            let start = (chunk * 256) as usize;
            let mut bytes = [0u8; 256];
            bytes.copy_from_slice(&content[start..start + 256]);
            extends.push((gva - script.base_gva + chunk * 256, bytes));
        }
    }
    RefBuild {
        ssa_frame_size: script.ssa_frame_size,
        size_bytes: script.size_bytes,
        adds,
        extends,
    }
}

/// Criterion 2: 20 seeded random build scripts match the independent
/// reference digest exactly; single-bit mutations of measured content
/// change the digest.
#[test]
fn criterion_2_measurement_fidelity() {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x6d65617375726531);
    for trial in 0..20 {
        let script = random_script(&mut rng);
        let mut machine =
            Machine::new(small_config(), CryptoMode::Deterministic(trial)).unwrap();
        let live = build_on_machine(&mut machine, &script, 0x7000_0000 + trial * 0x10000);
        let reference = ref_mrenclave(&ref_build_of_script(&script));
        assert_eq!(live, reference, "trial {trial}");

        // Mutate one bit of some measured page; the digest must change.
        let measured: Vec<usize> = script
            .pages
            .iter()
            .enumerate()
            .filter(|(_, p)| p.4)
            .map(|(i, _)| i)
            .collect();
        if let Some(&victim) = measured.first() {
            let mut mutated = RandomScript {
                base_gva: script.base_gva,
                size_bytes: script.size_bytes,
                ssa_frame_size: script.ssa_frame_size,
                pages: script.pages.clone(),
            };
            let byte = rng.gen_range(0..PAGE_SIZE as usize);
            let bit = rng.gen_range(0..8);
            mutated.pages[victim].3[byte] ^= 1 << bit;
            let mutated_ref = ref_mrenclave(&ref_build_of_script(&mutated));
            assert_ne!(live, mutated_ref, "bit flip undetected in trial {trial}");
            let mut machine2 =
                Machine::new(small_config(), CryptoMode::Deterministic(1000 + trial)).unwrap();
            let mutated_live = build_on_machine(&mut machine2, &mutated, 0x7000_0000);
            assert_eq!(mutated_live, mutated_ref);
        }
    }
    assert_runtime("criterion 2", start, Duration::from_secs(5));
    println!(
        "PASS criterion 2: 20 random builds match the reference digest; mutations detected ({:?})",
        start.elapsed()
    );
}

/// Adversarial enclave program: straight-line arithmetic with exactly one
/// access outside the enclave's mapped pages.
fn adversarial_program(rng: &mut StdRng, machine: &Machine, enclave_base: u64) -> Program {
    let illegal_gva = match rng.gen_range(0..5) {
        // Guest OS memory (identity addresses).
        0 => (machine.layout.vmpl1.start_page + rng.gen_range(0..machine.layout.vmpl1.pages))
            * PAGE_SIZE,
        // Monitor private range.
        1 => rng.gen_range(0..machine.layout.monitor.pages) * PAGE_SIZE,
        // EPC addresses (other enclaves' pages included).
        2 => (machine.layout.epc.start_page + rng.gen_range(0..machine.layout.epc.pages))
            * PAGE_SIZE,
        // The trampoline: mapped, but kernel-only.
        3 => vmplsim_core::monitor::TRAMPOLINE_GVA,
        // An unmapped corner of the enclave's own range.
        _ => enclave_base + 5 * PAGE_SIZE,
    } + rng.gen_range(0..8) * 8;
    let mut instrs = Vec::new();
    for _ in 0..rng.gen_range(0..6) {
        instrs.push(Instr::LoadImm(rng.gen_range(0..16), rng.gen()));
    }
    if rng.gen_bool(0.5) {
        instrs.push(Instr::Load(rng.gen_range(0..16), illegal_gva));
    } else {
        instrs.push(Instr::Store(illegal_gva, rng.gen_range(0..16)));
    }
    for _ in 0..rng.gen_range(0..4) {
        instrs.push(Instr::Add(rng.gen_range(0..16), rng.gen_range(0..16)));
    }
    instrs.push(Instr::Syscall(evm::SyscallLeaf::Eexit));
    Program::new(instrs, 0).unwrap()
}

/// Criterion 3: 1,000 randomized VMPL1 accesses to the VMPL0 region and
/// 1,000 adversarial enclave programs all fault; no breach verdicts.
#[test]
fn criterion_3_isolation_suite() {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x69736f6c617465);

    // Part 1: VMPL1 against the VMPL0 region.
    let (mut machine, _loaded) = hello_machine(small_config(), 77);
    for trial in 0..1000 {
        let gpa = rng.gen_range(0..machine.layout.vmpl0.pages) * PAGE_SIZE
            + rng.gen_range(0..PAGE_SIZE / 8) * 8;
        match trial % 4 {
            0 => {
                let verdict = machine.run_attack(&AttackScript::ReadVmpl0 { target_gpa: gpa });
                assert!(
                    matches!(verdict, AttackVerdict::Blocked(_)),
                    "trial {trial}: {}",
                    verdict.label()
                );
            }
            1 => {
                let verdict = machine.run_attack(&AttackScript::WriteVmpl0 { target_gpa: gpa });
                assert!(
                    matches!(verdict, AttackVerdict::Blocked(_)),
                    "trial {trial}: {}",
                    verdict.label()
                );
            }
            2 => {
                let access = [Access::Read, Access::Write, Access::Execute][trial % 3];
                let spa = machine.mem.spa_for_gpa(gpa).unwrap();
                assert!(machine.mem.rmp_check(spa, 1, access).is_err(), "trial {trial}");
            }
            _ => {
                // The guest cannot grant itself permissions either.
                let spa = machine.mem.spa_for_gpa(gpa).unwrap();
                assert!(
                    machine
                        .mem
                        .rmpadjust(1, CpuMode::Kernel, spa, 1, vmplsim_core::mem::VmplPerms::FULL)
                        .is_err(),
                    "trial {trial}"
                );
            }
        }
    }

    // Part 2: adversarial enclave programs. Each runs in a fresh enclave
    // through the full driver path; the fault is delivered as an AEX, the
    // driver abandons the thread, and the build is torn down.
    let mut cfg = small_config();
    cfg.max_resumes = 0;
    // Enough guest memory to stage a thousand throwaway builds; pages are
    // lazily materialized so this stays cheap.
    cfg.total_pages = 8192;
    let mut machine = Machine::new(cfg, CryptoMode::Deterministic(78)).unwrap();
    let base = 0x40_0000u64;
    for trial in 0..1000u64 {
        // The parameter window is fixed for an enclave's lifetime, so each
        // throwaway enclave gets its own.
        let param_gva = 0x7000_0000 + trial * 0x10000;
        let param_gpa = machine.alloc_guest_page().unwrap();
        let LeafOutput::Created(id) = machine
            .ioctl(DriverRequest::ecreate(base, 8 * PAGE_SIZE, 1, 0, param_gva, param_gpa, 1))
            .unwrap()
        else {
            panic!("ecreate")
        };
        let tcs_src = machine.alloc_guest_page().unwrap();
        machine.mem.write_gpa(tcs_src, &encode_tcs_page(0, base + PAGE_SIZE, 1), 1).unwrap();
        machine.ioctl(DriverRequest::eadd(id, tcs_src, base, PageType::Tcs, PagePerms::RW)).unwrap();
        let ssa_src = machine.alloc_guest_page().unwrap();
        machine
            .ioctl(DriverRequest::eadd(id, ssa_src, base + PAGE_SIZE, PageType::Reg, PagePerms::RW))
            .unwrap();
        machine.ioctl(DriverRequest::einit(id)).unwrap();
        machine.attach_program(id, adversarial_program(&mut rng, &machine, base));

        // Hash-comparing all guest-visible state is expensive; sample it.
        let check_digest = trial % 100 == 0;
        let digest_before = check_digest.then(|| machine.guest_visible_digest(Some(id)));
        let out = machine.ioctl(DriverRequest::eenter(id, base)).unwrap();
        match out {
            LeafOutput::EcallAbandoned {
                exception: Some(Exception::PageFault(_) | Exception::RmpFault(_)),
            } => {}
            other => panic!("trial {trial}: illegal access not faulted: {other:?}"),
        }
        if let Some(before) = digest_before {
            assert_eq!(
                before,
                machine.guest_visible_digest(Some(id)),
                "trial {trial}: guest-visible state changed"
            );
        }
        // Tear down: the abandoned thread must leave the enclave before
        // its pages can be reclaimed.
        machine.monitor.eexit(&mut machine.vcpu, id, base).unwrap();
        machine.ioctl(DriverRequest::eremove(id)).unwrap();
    }
    assert_runtime("criterion 3", start, Duration::from_secs(30));
    println!(
        "PASS criterion 3: 2000 isolation probes, zero breaches ({:?})",
        start.elapsed()
    );
}

/// Criterion 4: all seven attack kinds return Blocked or NoEffect on each
/// of ten random machine instances.
#[test]
fn criterion_4_attack_catalog() {
    let start = Instant::now();
    for seed in 0..10u64 {
        let mut cfg = small_config();
        cfg.step_budget = 200;
        cfg.max_resumes = 4;
        let (mut machine, loaded) = hello_machine(cfg, 1000 + seed);
        let mut rng = StdRng::seed_from_u64(seed);
        let vmpl0_gpa =
            rng.gen_range(0..machine.layout.vmpl0.pages) * PAGE_SIZE + rng.gen_range(0..512) * 8;
        // A fresh uninitialized enclave for the tampering driver.
        let scratch_param = machine.alloc_guest_page().unwrap();
        let LeafOutput::Created(scratch) = machine
            .ioctl(DriverRequest::ecreate(
                0x90_0000,
                4 * PAGE_SIZE,
                1,
                0,
                0x7d00_0000,
                scratch_param,
                1,
            ))
            .unwrap()
        else {
            panic!("scratch ecreate")
        };
        let scripts = vec![
            AttackScript::ReadVmpl0 { target_gpa: vmpl0_gpa },
            AttackScript::WriteVmpl0 { target_gpa: vmpl0_gpa },
            AttackScript::RemapEnclavePage { enclave: loaded.id },
            AttackScript::SkipAep { enclave: loaded.id, tcs_gva: loaded.tcs_gva },
            AttackScript::TamperLeafParams { enclave: scratch },
            AttackScript::RequestVmpl0Report,
            AttackScript::DeriveVmpl0Key,
        ];
        assert_eq!(scripts.len(), 7);
        for script in scripts {
            let verdict = machine.run_attack(&script);
            assert!(
                matches!(verdict, AttackVerdict::Blocked(_) | AttackVerdict::NoEffect),
                "seed {seed}, {}: {}",
                script.kind_name(),
                verdict.label()
            );
        }
    }
    println!(
        "PASS criterion 4: 7 attack kinds x 10 machines, all blocked or no-effect ({:?})",
        start.elapsed()
    );
}

fn tamper_reason(
    machine: &mut Machine,
    bundle: &NestedBundle,
    anchors: &TrustAnchors,
    transform: usize,
) -> (&'static str, RejectReason) {
    let mut tampered = bundle.clone();
    match transform {
        0 => {
            tampered.snp_report.launch_digest[3] ^= 0x10;
            ("flip-launch-digest", expect_reject(&tampered, anchors))
        }
        1 => {
            tampered.snp_report.report_data[40] ^= 0x01;
            ("flip-report-data", expect_reject(&tampered, anchors))
        }
        2 => {
            // Re-sign with the wrong VCEK: a different machine's SP issues
            // a VMPL0 report binding the same AIK.
            let mut other = Machine::new(small_config(), CryptoMode::Deterministic(0xbeef)).unwrap();
            let mut data = [0u8; 64];
            data[..32].copy_from_slice(&sha2_digest(&bundle.aik_public));
            tampered.snp_report = other.amd_sp.snp_report_req(0, CpuMode::Kernel, 0, data).unwrap();
            ("resign-wrong-vcek", expect_reject(&tampered, anchors))
        }
        3 => {
            // Swap in a fresh AIK without re-binding it to the platform.
            let mut seed = [0u8; 32];
            machine.rng_fill(&mut seed);
            let impostor = ed25519_dalek::SigningKey::from_bytes(&seed);
            tampered.aik_public = impostor.verifying_key().to_bytes();
            tampered.enclave_sig = ed25519_dalek::Signer::sign(
                &impostor,
                &tampered.enclave_report.signed_bytes(),
            )
            .to_bytes();
            ("swap-aik", expect_reject(&tampered, anchors))
        }
        4 => {
            tampered.enclave_report.mrenclave[0] ^= 0x80;
            ("flip-mrenclave", expect_reject(&tampered, anchors))
        }
        5 => {
            tampered.enclave_sig[10] ^= 0x04;
            ("flip-enclave-sig", expect_reject(&tampered, anchors))
        }
        _ => {
            // A guest-issued report: validly signed, binds the same AIK,
            // but speaks for VMPL1.
            let mut data = [0u8; 64];
            data[..32].copy_from_slice(&sha2_digest(&bundle.aik_public));
            tampered.snp_report =
                machine.amd_sp.snp_report_req(1, CpuMode::Kernel, 1, data).unwrap();
            ("set-vmpl1", expect_reject(&tampered, anchors))
        }
    }
}

fn sha2_digest(bytes: &[u8]) -> [u8; 32] {
    use sha2::Digest;
    sha2::Sha256::digest(bytes).into()
}

fn expect_reject(bundle: &NestedBundle, anchors: &TrustAnchors) -> RejectReason {
    match verify_bundle(bundle, anchors) {
        Verdict::Reject(reason) => reason,
        Verdict::Accept => panic!("tampered bundle accepted"),
    }
}

/// Criterion 5: honest bundles accept; each of the seven tamper
/// transformations rejects with the correct first-failed-check reason, on
/// ten seeded machines.
#[test]
fn criterion_5_attestation_soundness() {
    let start = Instant::now();
    let expected: [(usize, &str); 7] = [
        (0, "snp-signature"),
        (1, "snp-signature"),
        (2, "snp-signature"),
        (3, "aik-binding"),
        (4, "enclave-signature"),
        (5, "enclave-signature"),
        (6, "vmpl"),
    ];
    for seed in 0..10u64 {
        let (mut machine, loaded) = hello_machine(small_config(), 2000 + seed);
        let bundle = machine.attest_ecall(loaded.id, loaded.tcs_gva, [7u8; 64]).unwrap();
        let anchors = machine.trust_anchors(loaded.mrenclave);
        assert_eq!(verify_bundle(&bundle, &anchors), Verdict::Accept, "seed {seed}");
        for (transform, want) in expected {
            let (name, reason) = tamper_reason(&mut machine, &bundle, &anchors, transform);
            assert_eq!(
                reason.to_string(),
                want,
                "seed {seed}, transform {name}: expected {want}, got {reason}"
            );
        }
    }
    println!(
        "PASS criterion 5: honest accept + 7 tampers x 10 machines with exact reasons ({:?})",
        start.elapsed()
    );
}

/// Criterion 6: 1,000 random bit flips and 100 replays on VMPCK messages
/// are all detected; transcripts never leak plaintext.
#[test]
fn criterion_6_channel_security() {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x6368616e6e656c);
    let key: [u8; 32] = rng.gen();
    for trial in 0..1000 {
        let mut plaintext = vec![0u8; rng.gen_range(16..128)];
        rng.fill(&mut plaintext[..]);
        let seq = rng.gen_range(1..1_000_000);
        let mut msg = channel_seal(&key, 0, seq, PayloadType::ReportReq, &plaintext);
        // Transcript check: the wire bytes never contain the plaintext.
        assert!(
            !contains_subslice(&msg.ciphertext, &plaintext[..16.min(plaintext.len())]),
            "trial {trial}: plaintext leaked into the transcript"
        );
        let bit = rng.gen_range(0..msg.ciphertext.len() * 8);
        msg.ciphertext[bit / 8] ^= 1 << (bit % 8);
        assert_eq!(
            channel_open(&key, seq, &msg),
            Err(attest::AttestError::Auth),
            "trial {trial}: flipped bit not detected"
        );
    }
    // Replays against the live AMD-SP counter.
    let mut machine = Machine::new(small_config(), CryptoMode::Deterministic(99)).unwrap();
    for trial in 0..100 {
        let vmpck = machine.amd_sp.vmpck(1);
        let seq = machine.amd_sp.expected_seq(1);
        let msg = channel_seal(&vmpck, 1, seq, PayloadType::KeyReq, &[1u8]);
        machine.amd_sp.handle_guest_message(&msg).unwrap();
        let replayed = machine.amd_sp.handle_guest_message(&msg);
        assert!(
            matches!(replayed, Err(attest::AttestError::Replay { .. })),
            "trial {trial}: replay accepted"
        );
    }
    assert_runtime("criterion 6", start, Duration::from_secs(30));
    println!(
        "PASS criterion 6: 1000 bit flips + 100 replays all detected, no plaintext in transcripts ({:?})",
        start.elapsed()
    );
}

fn contains_subslice(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// Criterion 7: sealing roundtrips for the same (machine, mrenclave) and
/// fails for mismatched combinations; per-VMPL guest keys always differ.
#[test]
fn criterion_7_sealing() {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x7365616c);
    let mut mismatches = 0;
    for seed in 0..10u64 {
        let mut machine = Machine::new(small_config(), CryptoMode::Deterministic(3000 + seed)).unwrap();
        let monitor_key = machine.monitor.guest_key().unwrap();
        // Monitor's key is the VMPL0 guest key; the VMPL1 key must differ.
        let vmpl0_key = machine.amd_sp.msg_key_req(0, CpuMode::Kernel, 0).unwrap();
        let vmpl1_key = machine.amd_sp.msg_key_req(1, CpuMode::Kernel, 1).unwrap();
        assert_eq!(monitor_key, vmpl0_key);
        assert_ne!(vmpl0_key, vmpl1_key, "seed {seed}: guest keys collide");

        let mrenclave: [u8; 32] = rng.gen();
        let key_id: [u8; 16] = rng.gen();
        let seal_key = attest::derive_sealing_key(&monitor_key, &mrenclave, &key_id);
        let mut nonce = [0u8; 12];
        machine.rng_fill(&mut nonce);
        let secret = b"enclave secret payload";
        let blob = attest::seal(&seal_key, key_id, nonce, secret);
        assert_eq!(attest::unseal(&seal_key, &blob).unwrap(), secret);

        // Mismatched mrenclave / key id / machine root all fail.
        for _ in 0..2 {
            let mut wrong_mr = mrenclave;
            wrong_mr[rng.gen_range(0..32)] ^= 1 << rng.gen_range(0..8);
            let k = attest::derive_sealing_key(&monitor_key, &wrong_mr, &key_id);
            assert_eq!(attest::unseal(&k, &blob), Err(attest::AttestError::Auth));
            mismatches += 1;

            let mut wrong_id = key_id;
            wrong_id[rng.gen_range(0..16)] ^= 1 << rng.gen_range(0..8);
            let k = attest::derive_sealing_key(&monitor_key, &mrenclave, &wrong_id);
            assert_eq!(attest::unseal(&k, &blob), Err(attest::AttestError::Auth));
            mismatches += 1;

            let mut other =
                Machine::new(small_config(), CryptoMode::Deterministic(rng.gen())).unwrap();
            let other_key = other.amd_sp.msg_key_req(0, CpuMode::Kernel, 0).unwrap();
            let k = attest::derive_sealing_key(&other_key, &mrenclave, &key_id);
            assert_eq!(attest::unseal(&k, &blob), Err(attest::AttestError::Auth));
            mismatches += 1;
        }
    }
    assert!(mismatches >= 50, "only {mismatches} mismatch cases");
    println!(
        "PASS criterion 7: sealing roundtrip + {mismatches} mismatches rejected + key separation ({:?})",
        start.elapsed()
    );
}

/// Criterion 8: 100 random preemption points; pre-AEX and post-ERESUME
/// register state are bit-identical.
#[test]
fn criterion_8_aex_state_fidelity() {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(0x616578);
    for trial in 0..100u64 {
        let (mut machine, loaded) = hello_machine(small_config(), 4000 + trial);
        // A long arithmetic program over the enclave's own data page.
        let mut instrs = Vec::new();
        let data_gva = 0x202000u64;
        for i in 0..64 {
            match rng.gen_range(0..4) {
                0 => instrs.push(Instr::LoadImm(rng.gen_range(0..16), rng.gen())),
                1 => instrs.push(Instr::Add(rng.gen_range(0..16), rng.gen_range(0..16))),
                2 => instrs.push(Instr::Xor(rng.gen_range(0..16), rng.gen_range(0..16))),
                _ => instrs.push(Instr::Load(
                    rng.gen_range(0..16),
                    data_gva + (i % 16) * 8,
                )),
            }
        }
        instrs.push(Instr::Halt);
        let program = Program::new(instrs, 0).unwrap();

        machine.monitor.eenter(&mut machine.vcpu, loaded.id, loaded.tcs_gva, 0).unwrap();
        let preempt_at = rng.gen_range(1..64u64);
        let pt = machine.monitor.enclave(loaded.id).unwrap().page_table;
        for _ in 0..preempt_at {
            let vmsa = machine.vcpu.vmsa_mut(0).unwrap();
            let mut regs = vmsa.gprs;
            let mut rip = vmsa.rip;
            let mut bus = evm::MemBus {
                mem: &mut machine.mem,
                pt,
                mode: CpuMode::User,
                vmpl: 0,
            };
            let out = evm::step(&program, &mut regs, &mut rip, &mut bus);
            let vmsa = machine.vcpu.vmsa_mut(0).unwrap();
            vmsa.gprs = regs;
            vmsa.rip = rip;
            assert!(matches!(out, evm::StepOutcome::Continue | evm::StepOutcome::Halted));
        }
        let before = machine.vcpu.vmsa(0).unwrap().clone();
        machine
            .monitor
            .aex(&mut machine.mem, &mut machine.vcpu, loaded.id, loaded.tcs_gva, Exception::Timer)
            .unwrap();
        // The synthetic state hides everything.
        assert_eq!(machine.vcpu.vmsa(0).unwrap().gprs, [0u64; 16]);
        machine
            .monitor
            .eresume(&machine.mem, &mut machine.vcpu, loaded.id, loaded.tcs_gva)
            .unwrap();
        let after = machine.vcpu.vmsa(0).unwrap();
        assert_eq!(before.gprs, after.gprs, "trial {trial}");
        assert_eq!(before.rip, after.rip, "trial {trial}");
        assert_eq!(before.rsp, after.rsp, "trial {trial}");
    }
    println!(
        "PASS criterion 8: 100 random preemption points, register state bit-identical ({:?})",
        start.elapsed()
    );
}

/// Criterion 9: a seeded run is byte-identical when repeated: ledger,
/// bundle, anchors, and report text.
#[test]
fn criterion_9_determinism() {
    let start = Instant::now();
    let dir = scenarios_dir();
    let text = std::fs::read_to_string(dir.join("attest_pipeline.toml")).unwrap();
    let scenario = parse_scenario(&text).unwrap();
    let a = run_scenario(&scenario, &dir, CryptoMode::Deterministic(scenario.seed)).unwrap();
    let b = run_scenario(&scenario, &dir, CryptoMode::Deterministic(scenario.seed)).unwrap();
    assert_eq!(a.ledger_text.as_bytes(), b.ledger_text.as_bytes());
    assert_eq!(a.bundle_json, b.bundle_json);
    assert!(a.bundle_json.is_some());
    assert_eq!(a.anchors_json, b.anchors_json);
    assert_eq!(a.report_text.as_bytes(), b.report_text.as_bytes());
    // And the bundle actually verifies against the emitted anchors.
    let bundle = NestedBundle::from_json(a.bundle_json.as_ref().unwrap()).unwrap();
    let anchors = TrustAnchors::from_json(a.anchors_json.as_ref().unwrap()).unwrap();
    assert_eq!(verify_bundle(&bundle, &anchors), Verdict::Accept);
    println!(
        "PASS criterion 9: seeded reruns byte-identical (ledger, bundle, anchors, report) ({:?})",
        start.elapsed()
    );
}

/// The scenario-level assertion machinery itself: a wrong expected
/// mrenclave must fail the run.
#[test]
fn wrong_expectation_fails_run() {
    let dir = scenarios_dir();
    let text = std::fs::read_to_string(dir.join("ecall_roundtrip.toml")).unwrap();
    let mut scenario = parse_scenario(&text).unwrap();
    scenario
        .expected
        .mrenclave
        .insert("hello".into(), "00".repeat(32));
    let report = run_scenario(&scenario, &dir, CryptoMode::Deterministic(1)).unwrap();
    assert!(report.failed());
}

/// EnclaveId(0) placeholder sanity for the tamper attack resolution.
#[test]
fn shipped_attack_catalog_scenario_passes() {
    let report = run_shipped("attack_catalog.toml");
    assert!(!report.failed(), "{}", report.report_text);
    assert_eq!(report.verdicts.len(), 7);
    for (kind, verdict) in &report.verdicts {
        assert!(
            matches!(verdict, AttackVerdict::Blocked(_) | AttackVerdict::NoEffect),
            "{kind}: {}",
            verdict.label()
        );
    }
}
