// SPDX-License-Identifier: Apache-2.0

//! Deterministic, desk-scale simulator of SGX-style enclaves hosted inside a
//! confidential VM.
//!
//! The machine models an SEV-SNP guest partitioned by VMPL: a security
//! monitor and the enclaves it manages run at VMPL0, while the untrusted
//! guest OS, driver, and application run at VMPL1. Guest-physical memory is
//! tracked by a reverse map table (RMP) with per-VMPL permissions, enclave
//! code is a small deterministic bytecode, and the attestation chain (SNP
//! report signed by the VCEK, enclave report signed by the monitor's AIK)
//! is modeled with real signatures so tampering is detectable.
//!
//! Everything is single-threaded and reproducible: with deterministic
//! crypto enabled, a seeded run produces byte-identical ledgers and
//! attestation bundles.

pub mod attest;
pub mod evm;
pub mod guest;
pub mod machine;
pub mod manifest;
pub mod mem;
pub mod monitor;
pub mod scenario;
pub mod types;
pub mod vcpu;

pub use machine::{CryptoMode, Machine, MachineConfig};
pub use types::{Access, ContextTag, CpuMode, EnclaveId, PAGE_SIZE};
