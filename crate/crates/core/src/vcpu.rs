// SPDX-License-Identifier: Apache-2.0

//! Per-VMPL vCPU save areas, the MSR protocol for requesting VMPL
//! switches, the (possibly adversarial) hypervisor that performs them, and
//! deterministic event accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::mem::{PageFault, PtId, RmpFault};
use crate::types::{CpuMode, Gva, Vmpl, VMPL_COUNT};

/// Register/save state of one (vCPU, VMPL) pair. The hypervisor model never
/// receives a mutable reference to a VMSA; integrity holds by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vmsa {
    pub vmpl: Vmpl,
    pub gprs: [u64; 16],
    /// Instruction pointer. While bytecode executes this is an instruction
    /// index into the active program.
    pub rip: u64,
    pub rsp: u64,
    pub mode: CpuMode,
    pub cr3: PtId,
    /// Syscall entry address; points into the trampoline page at VMPL0.
    pub lstar: Gva,
    pub runnable: bool,
}

impl Vmsa {
    pub fn new(vmpl: Vmpl, cr3: PtId, lstar: Gva) -> Self {
        Vmsa {
            vmpl,
            gprs: [0; 16],
            rip: 0,
            rsp: 0,
            mode: CpuMode::Kernel,
            cr3,
            lstar,
            runnable: false,
        }
    }
}

/// Exceptions the machine can deliver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exception {
    PageFault(PageFault),
    RmpFault(RmpFault),
    Timer,
    InvalidOpcode,
    GeneralProtection,
}

impl Exception {
    /// Stable numeric code used when an exit reason is serialized into an
    /// SSA frame.
    pub fn code(&self) -> u64 {
        match self {
            Exception::PageFault(_) => 1,
            Exception::RmpFault(_) => 2,
            Exception::Timer => 3,
            Exception::InvalidOpcode => 4,
            Exception::GeneralProtection => 5,
        }
    }

    pub fn from_code(code: u64) -> Option<Exception> {
        match code {
            1 => Some(Exception::PageFault(PageFault {
                gva: 0,
                access: crate::types::Access::Read,
            })),
            2 => Some(Exception::RmpFault(RmpFault {
                spa: 0,
                vmpl: 0,
                access: crate::types::Access::Read,
            })),
            3 => Some(Exception::Timer),
            4 => Some(Exception::InvalidOpcode),
            5 => Some(Exception::GeneralProtection),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Exception::PageFault(_) => "page-fault",
            Exception::RmpFault(_) => "rmp-fault",
            Exception::Timer => "timer",
            Exception::InvalidOpcode => "invalid-opcode",
            Exception::GeneralProtection => "general-protection",
        }
    }
}

/// Accounted event kinds. These replace cycle counts: one event per
/// architectural transition, deterministic across runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    VmplSwitch(Vmpl, Vmpl),
    Vmgexit,
    Aex,
    SyscallEntry,
    SysretExit,
    IoctlEntry,
}

impl core::fmt::Display for EventKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EventKind::VmplSwitch(from, to) => write!(f, "vmpl-switch {from} -> {to}"),
            EventKind::Vmgexit => f.write_str("vmgexit"),
            EventKind::Aex => f.write_str("aex"),
            EventKind::SyscallEntry => f.write_str("syscall-entry"),
            EventKind::SysretExit => f.write_str("sysret-exit"),
            EventKind::IoctlEntry => f.write_str("ioctl-entry"),
        }
    }
}

/// Ordered event trace plus per-kind counters. Counts always equal the
/// multiset of the trace.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwitchLedger {
    counts: BTreeMap<EventKind, u64>,
    trace: Vec<EventKind>,
}

impl SwitchLedger {
    pub fn record(&mut self, event: EventKind) {
        *self.counts.entry(event).or_insert(0) += 1;
        self.trace.push(event);
    }

    pub fn count(&self, event: EventKind) -> u64 {
        self.counts.get(&event).copied().unwrap_or(0)
    }

    /// Total VMPL switches regardless of direction.
    pub fn vmpl_switches(&self) -> u64 {
        self.counts
            .iter()
            .filter(|(k, _)| matches!(k, EventKind::VmplSwitch(_, _)))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn trace(&self) -> &[EventKind] {
        &self.trace
    }

    pub fn counts(&self) -> &BTreeMap<EventKind, u64> {
        &self.counts
    }

    /// Structured text export: the numbered trace followed by sorted
    /// counters. Byte-stable for a given trace.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# trace\n");
        for (i, ev) in self.trace.iter().enumerate() {
            let _ = writeln!(out, "{:06} {ev}", i + 1);
        }
        out.push_str("# counts\n");
        for (kind, n) in &self.counts {
            let _ = writeln!(out, "{kind} = {n}");
        }
        out
    }
}

/// How the (untrusted) hypervisor reacts to a VMPL switch request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HypervisorPolicy {
    #[default]
    Honest,
    /// Ignores the request; the guest stalls (denial of service).
    RefuseSwitch,
    /// Runs a different VMPL than requested, with that VMPL's own VMSA.
    WrongVmpl(Vmpl),
}

/// GHCB MSR protocol word requesting a VMPL switch.
///
/// Bit layout (pinned in `docs/formats.md`): bits 0..12 carry the request
/// kind, 0x018 for run-VMPL; bits 32..40 carry the target VMPL.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GhcbMsrRequest {
    pub raw: u64,
}

const MSR_KIND_MASK: u64 = 0xfff;
const MSR_KIND_RUN_VMPL: u64 = 0x018;
const MSR_VMPL_SHIFT: u32 = 32;
const MSR_VMPL_MASK: u64 = 0xff;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VcpuError {
    #[error("vmpl{0} has no initialized VMSA")]
    Protocol(Vmpl),
    #[error("vmgexit requested from user mode")]
    UserModeExit,
    #[error("unknown GHCB MSR request {0:#018x}")]
    Decode(u64),
}

pub fn encode_msr_request(target_vmpl: Vmpl) -> GhcbMsrRequest {
    assert!((target_vmpl as usize) < VMPL_COUNT);
    GhcbMsrRequest { raw: MSR_KIND_RUN_VMPL | ((target_vmpl as u64) << MSR_VMPL_SHIFT) }
}

pub fn decode_msr_request(req: GhcbMsrRequest) -> Result<Vmpl, VcpuError> {
    if req.raw & MSR_KIND_MASK != MSR_KIND_RUN_VMPL {
        return Err(VcpuError::Decode(req.raw));
    }
    let vmpl = (req.raw >> MSR_VMPL_SHIFT) & MSR_VMPL_MASK;
    let known = MSR_KIND_RUN_VMPL | (vmpl << MSR_VMPL_SHIFT);
    if req.raw != known || vmpl as usize >= VMPL_COUNT {
        return Err(VcpuError::Decode(req.raw));
    }
    Ok(vmpl as Vmpl)
}

/// Result of a switch request as observed by the requesting VMPL.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchOutcome {
    /// Execution proceeds at this VMPL (the requested one under an honest
    /// hypervisor, possibly another under `WrongVmpl`).
    Switched(Vmpl),
    /// The hypervisor never performed the switch.
    Stalled,
}

/// One virtual CPU: up to four VMSAs, at most one runnable at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vcpu {
    vmsas: [Option<Vmsa>; VMPL_COUNT],
    current: Vmpl,
}

impl Vcpu {
    pub fn new() -> Self {
        Vcpu { vmsas: [None, None, None, None], current: 0 }
    }

    pub fn init_vmsa(&mut self, vmsa: Vmsa) {
        let vmpl = vmsa.vmpl;
        assert!((vmpl as usize) < VMPL_COUNT);
        self.vmsas[vmpl as usize] = Some(vmsa);
    }

    pub fn has_vmsa(&self, vmpl: Vmpl) -> bool {
        self.vmsas[vmpl as usize].is_some()
    }

    pub fn current_vmpl(&self) -> Vmpl {
        self.current
    }

    pub fn vmsa(&self, vmpl: Vmpl) -> Option<&Vmsa> {
        self.vmsas[vmpl as usize].as_ref()
    }

    pub fn vmsa_mut(&mut self, vmpl: Vmpl) -> Option<&mut Vmsa> {
        self.vmsas[vmpl as usize].as_mut()
    }

    pub fn current_vmsa(&self) -> &Vmsa {
        self.vmsas[self.current as usize].as_ref().expect("current VMSA exists")
    }

    pub fn current_vmsa_mut(&mut self) -> &mut Vmsa {
        self.vmsas[self.current as usize].as_mut().expect("current VMSA exists")
    }

    /// Mark `vmpl` as the (single) runnable context.
    fn run_vmpl(&mut self, vmpl: Vmpl) {
        for v in self.vmsas.iter_mut().flatten() {
            v.runnable = false;
        }
        self.vmsas[vmpl as usize].as_mut().expect("target VMSA exists").runnable = true;
        self.current = vmpl;
    }

    /// VMGEXIT with a run-VMPL request. The hypervisor policy decides what
    /// actually happens; a `VmplSwitch` event is recorded iff a switch took
    /// place. The request path is privileged.
    pub fn vmgexit_run_vmpl(
        &mut self,
        policy: HypervisorPolicy,
        ledger: &mut SwitchLedger,
        target_vmpl: Vmpl,
    ) -> Result<SwitchOutcome, VcpuError> {
        if self.current_vmsa().mode != CpuMode::Kernel {
            return Err(VcpuError::UserModeExit);
        }
        let requested = decode_msr_request(encode_msr_request(target_vmpl))?;
        if !self.has_vmsa(requested) {
            return Err(VcpuError::Protocol(requested));
        }
        ledger.record(EventKind::Vmgexit);
        let from = self.current;
        match policy {
            HypervisorPolicy::Honest => {
                self.run_vmpl(requested);
                ledger.record(EventKind::VmplSwitch(from, requested));
                Ok(SwitchOutcome::Switched(requested))
            }
            HypervisorPolicy::RefuseSwitch => Ok(SwitchOutcome::Stalled),
            HypervisorPolicy::WrongVmpl(other) => {
                if other == from || (other as usize) >= VMPL_COUNT || !self.has_vmsa(other) {
                    // Running the current VMSA again is indistinguishable
                    // from not switching.
                    return Ok(SwitchOutcome::Stalled);
                }
                self.run_vmpl(other);
                ledger.record(EventKind::VmplSwitch(from, other));
                Ok(SwitchOutcome::Switched(other))
            }
        }
    }
}

impl Default for Vcpu {
    fn default() -> Self {
        Vcpu::new()
    }
}


#[cfg(test)]
mod invariant_tests {
    use super::*;

    #[test]
    fn exactly_one_runnable_vmsa_after_any_switch_sequence() {
        let mut v = Vcpu::new();
        v.init_vmsa(Vmsa::new(0, PtId(0), 0));
        v.init_vmsa(Vmsa::new(1, PtId(1), 0));
        v.init_vmsa(Vmsa::new(2, PtId(2), 0));
        v.run_vmpl(1);
        let mut ledger = SwitchLedger::default();
        let runnable = |v: &Vcpu| (0..4).filter(|k| v.vmsa(*k).is_some_and(|m| m.runnable)).count();
        for target in [0u8, 2, 1, 0, 0, 2, 1] {
            let _ = v.vmgexit_run_vmpl(HypervisorPolicy::Honest, &mut ledger, target);
            assert_eq!(runnable(&v), 1);
            assert!(v.current_vmsa().runnable);
        }
        let _ = v.vmgexit_run_vmpl(HypervisorPolicy::WrongVmpl(2), &mut ledger, 0);
        assert_eq!(runnable(&v), 1);
    }
}
