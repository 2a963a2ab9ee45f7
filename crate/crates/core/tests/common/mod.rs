// SPDX-License-Identifier: Apache-2.0

//! Shared fixtures for the integration suites: the sample enclave, small
//! machine configurations, and an independent reference implementation of
//! the measurement-log digest.

#![allow(dead_code)]

use vmplsim_core::machine::{CryptoMode, Machine, MachineConfig};
use vmplsim_core::manifest::{parse_manifest, LoadedEnclave, ResolvedManifest};
use vmplsim_core::types::PAGE_SIZE;

pub const HELLO_MANIFEST: &str = include_str!("../../../../manifests/hello.toml");

pub fn small_config() -> MachineConfig {
    MachineConfig {
        total_pages: 512,
        vmpl0_pages: 128,
        monitor_pages: 32,
        ..MachineConfig::default()
    }
}

pub fn hello_resolved() -> ResolvedManifest {
    parse_manifest(HELLO_MANIFEST).unwrap().resolve(None).unwrap()
}

/// Machine with the sample enclave built and initialized.
pub fn hello_machine(cfg: MachineConfig, seed: u64) -> (Machine, LoadedEnclave) {
    let mut machine = Machine::new(cfg, CryptoMode::Deterministic(seed)).unwrap();
    let loaded = machine.load_enclave(&hello_resolved()).unwrap();
    (machine, loaded)
}

/// Read a u64 out of an enclave's parameter buffer.
pub fn param_u64(machine: &Machine, loaded: &LoadedEnclave, offset: u64) -> u64 {
    let bytes = machine.mem.read_gpa(loaded.param_gpa + offset, 8, 1).unwrap();
    u64::from_le_bytes(bytes.try_into().unwrap())
}

/// Write a u64 into an enclave's parameter buffer (as the App would).
pub fn set_param_u64(machine: &mut Machine, loaded: &LoadedEnclave, offset: u64, value: u64) {
    machine.mem.write_gpa(loaded.param_gpa + offset, &value.to_le_bytes(), 1).unwrap();
}

// ---- independent measurement oracle ----
//
// Reimplements the measurement-log convention from the format reference
// alone: 64-byte tagged records, EADD measuring metadata only, EEXTEND
// measuring 256 bytes as four data records, SHA-256 over the
// concatenation. Shares no code with the monitor.

pub struct RefBuild {
    pub ssa_frame_size: u64,
    pub size_bytes: u64,
    /// (offset, page type code, perms bits) per EADD, in order.
    pub adds: Vec<(u64, u64, u64)>,
    /// (offset, 256 bytes) per EEXTEND, in order.
    pub extends: Vec<(u64, [u8; 256])>,
}

fn ref_record(data: &mut Vec<u8>, tag: &[u8; 8], a: u64, b: u64) {
    let mut rec = [0u8; 64];
    rec[..8].copy_from_slice(tag);
    rec[8..16].copy_from_slice(&a.to_le_bytes());
    rec[16..24].copy_from_slice(&b.to_le_bytes());
    data.extend_from_slice(&rec);
}

pub fn ref_mrenclave(build: &RefBuild) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut data: Vec<u8> = Vec::new();
    ref_record(&mut data, b"ECREATE\0", build.ssa_frame_size, build.size_bytes);
    for (offset, type_code, perm_bits) in &build.adds {
        ref_record(&mut data, b"EADD\0\0\0\0", *offset, perm_bits | (type_code << 8));
    }
    for (offset, chunk) in &build.extends {
        ref_record(&mut data, b"EEXTEND\0", *offset, 0);
        data.extend_from_slice(chunk);
    }
    Sha256::digest(&data).into()
}

/// The reference build corresponding to a resolved manifest.
pub fn ref_build_of_manifest(manifest: &ResolvedManifest) -> RefBuild {
    let type_code = |t: vmplsim_core::monitor::PageType| match t {
        vmplsim_core::monitor::PageType::Secs => 0u64,
        vmplsim_core::monitor::PageType::Tcs => 1,
        vmplsim_core::monitor::PageType::Reg => 2,
    };
    let perm_bits = |p: vmplsim_core::monitor::PagePerms| {
        (p.read as u64) | (p.write as u64) << 1 | (p.execute as u64) << 2
    };
    let adds = manifest
        .pages
        .iter()
        .map(|p| (p.gva - manifest.base_gva, type_code(p.page_type), perm_bits(p.perms)))
        .collect();
    let mut extends = Vec::new();
    for page in &manifest.pages {
        if !page.measure {
            continue;
        }
        for chunk in 0..(PAGE_SIZE / 256) {
            let start = (chunk * 256) as usize;
            let mut bytes = [0u8; 256];
            bytes.copy_from_slice(&page.content[start..start + 256]);
            extends.push((page.gva - manifest.base_gva + chunk * 256, bytes));
        }
    }
    RefBuild {
        ssa_frame_size: manifest.ssa_frame_size,
        size_bytes: manifest.size_bytes,
        adds,
        extends,
    }
}
