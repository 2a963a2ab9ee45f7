// SPDX-License-Identifier: Apache-2.0

//! Shared domain types: addresses, access kinds, execution contexts.

use serde::{Deserialize, Serialize};

/// Page size in bytes. The simulator models 4 KiB pages only.
pub const PAGE_SIZE: u64 = 4096;

/// Number of VM privilege levels. VMPL0 is the most privileged.
pub const VMPL_COUNT: usize = 4;

/// Guest-virtual byte address.
pub type Gva = u64;
/// Guest-physical byte address.
pub type Gpa = u64;
/// System-physical byte address.
pub type Spa = u64;
/// VM privilege level, 0..=3.
pub type Vmpl = u8;

/// Page index of a byte address.
#[inline]
pub fn page_of(addr: u64) -> u64 {
    addr / PAGE_SIZE
}

/// Offset of a byte address within its page.
#[inline]
pub fn page_offset(addr: u64) -> u64 {
    addr % PAGE_SIZE
}

/// Identifier assigned to an enclave at creation, unique per machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EnclaveId(pub u32);

impl core::fmt::Display for EnclaveId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "enclave{}", self.0)
    }
}

/// Memory access kind checked by page tables and the RMP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Access {
    Read,
    Write,
    Execute,
}

impl Access {
    pub const ALL: [Access; 3] = [Access::Read, Access::Write, Access::Execute];
}

impl core::fmt::Display for Access {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            Access::Read => "read",
            Access::Write => "write",
            Access::Execute => "execute",
        };
        f.write_str(s)
    }
}

/// Processor mode within a VMPL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CpuMode {
    User,
    Kernel,
}

/// The software component a page table (and an executing context) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ContextTag {
    /// Security monitor, kernel mode at VMPL0.
    MonitorKernel,
    /// An enclave, user mode at VMPL0.
    EnclaveUser(EnclaveId),
    /// Guest OS (including the driver), kernel mode at VMPL1.
    GuestKernel,
    /// Untrusted application process, user mode at VMPL1.
    AppUser(u32),
}

impl ContextTag {
    /// VMPL at which this context executes.
    pub fn vmpl(&self) -> Vmpl {
        match self {
            ContextTag::MonitorKernel | ContextTag::EnclaveUser(_) => 0,
            ContextTag::GuestKernel | ContextTag::AppUser(_) => 1,
        }
    }

    /// Processor mode of this context.
    pub fn mode(&self) -> CpuMode {
        match self {
            ContextTag::MonitorKernel | ContextTag::GuestKernel => CpuMode::Kernel,
            ContextTag::EnclaveUser(_) | ContextTag::AppUser(_) => CpuMode::User,
        }
    }
}
