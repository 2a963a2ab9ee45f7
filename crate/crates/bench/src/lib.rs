// SPDX-License-Identifier: Apache-2.0

//! Fixtures shared by the benchmark targets.

use vmplsim_core::machine::{CryptoMode, Machine, MachineConfig};
use vmplsim_core::manifest::{parse_manifest, LoadedEnclave, ResolvedManifest};

pub const HELLO_MANIFEST: &str = include_str!("../../../manifests/hello.toml");

pub fn bench_config() -> MachineConfig {
    MachineConfig {
        total_pages: 512,
        vmpl0_pages: 128,
        monitor_pages: 32,
        ..MachineConfig::default()
    }
}

pub fn hello_manifest() -> ResolvedManifest {
    parse_manifest(HELLO_MANIFEST).unwrap().resolve(None).unwrap()
}

/// A booted machine with the sample enclave initialized.
pub fn ready_machine(seed: u64) -> (Machine, LoadedEnclave) {
    let mut machine = Machine::new(bench_config(), CryptoMode::Deterministic(seed)).unwrap();
    let loaded = machine.load_enclave(&hello_manifest()).unwrap();
    (machine, loaded)
}
