// SPDX-License-Identifier: Apache-2.0

//! The untrusted VMPL1 world: guest OS dispatcher, the driver that routes
//! leaf requests across VMPL switches, the App process, and the scripted
//! guest-side attacks.
//!
//! The guest OS is a dispatcher (fault handler, driver, App scheduler),
//! not a real kernel. The driver's only job is shuttling SGX-style leaf
//! requests to the monitor and returning control to the App afterwards —
//! which also makes it the natural place to mount tampering attacks.

use crate::evm::{IoctlLeaf, Program};
use crate::machine::{LeafOutput, Machine, MachineError, MonitorReturn};
use crate::mem::{MemLayout, Memory, PtEntry, PtId, TranslateFault};
use crate::monitor::{PagePerms, PageType};
use crate::types::{Access, ContextTag, CpuMode, EnclaveId, Gpa, Gva, PAGE_SIZE};
use crate::vcpu::{EventKind, Exception, Vcpu};

/// App-side guest-virtual layout.
pub const APP_SCRATCH_GVA: Gva = 0x1000_0000;
pub const APP_SCRATCH_PAGES: u64 = 4;
pub const APP_STACK_GVA: Gva = 0x2000_0000;
/// AEP trampoline address the driver installs after an AEX.
pub const AEP_GVA: Gva = 0x3000_0000;
/// Scratch window the attack scripts map their probes at.
const ATTACK_WINDOW_GVA: Gva = 0x6660_0000;

/// How the driver behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DriverPolicy {
    #[default]
    Honest,
    /// After an AEX, divert control instead of filling RIP with the AEP;
    /// the enclave is never resumed.
    SkipAep,
    /// Mutate the leaf id/arguments before switching to the monitor.
    TamperLeafParams,
}

/// Ring-0-class request the App hands to the driver. Enclave-internal
/// leaves (EEXIT/EREPORT/EGETKEY) are unrepresentable here by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DriverRequest {
    pub leaf: IoctlLeaf,
    pub params: LeafParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LeafParams {
    Ecreate {
        base_gva: Gva,
        size_bytes: u64,
        ssa_frame_size: u64,
        attributes: u64,
        param_gva: Gva,
        param_gpa: Gpa,
        param_pages: u64,
    },
    Eadd {
        enclave: EnclaveId,
        src_gpa: Gpa,
        dest_gva: Gva,
        page_type: PageType,
        perms: PagePerms,
    },
    Eextend {
        enclave: EnclaveId,
        gva: Gva,
    },
    Einit {
        enclave: EnclaveId,
    },
    Eenter {
        enclave: EnclaveId,
        tcs_gva: Gva,
    },
    Eresume {
        enclave: EnclaveId,
        tcs_gva: Gva,
    },
    Eremove {
        enclave: EnclaveId,
    },
}

impl DriverRequest {
    #[allow(clippy::too_many_arguments)]
    pub fn ecreate(
        base_gva: Gva,
        size_bytes: u64,
        ssa_frame_size: u64,
        attributes: u64,
        param_gva: Gva,
        param_gpa: Gpa,
        param_pages: u64,
    ) -> Self {
        DriverRequest {
            leaf: IoctlLeaf::Ecreate,
            params: LeafParams::Ecreate {
                base_gva,
                size_bytes,
                ssa_frame_size,
                attributes,
                param_gva,
                param_gpa,
                param_pages,
            },
        }
    }

    pub fn eadd(
        enclave: EnclaveId,
        src_gpa: Gpa,
        dest_gva: Gva,
        page_type: PageType,
        perms: PagePerms,
    ) -> Self {
        DriverRequest {
            leaf: IoctlLeaf::Eadd,
            params: LeafParams::Eadd { enclave, src_gpa, dest_gva, page_type, perms },
        }
    }

    pub fn eextend(enclave: EnclaveId, gva: Gva) -> Self {
        DriverRequest { leaf: IoctlLeaf::Eextend, params: LeafParams::Eextend { enclave, gva } }
    }

    pub fn einit(enclave: EnclaveId) -> Self {
        DriverRequest { leaf: IoctlLeaf::Einit, params: LeafParams::Einit { enclave } }
    }

    pub fn eenter(enclave: EnclaveId, tcs_gva: Gva) -> Self {
        DriverRequest { leaf: IoctlLeaf::Eenter, params: LeafParams::Eenter { enclave, tcs_gva } }
    }

    pub fn eresume(enclave: EnclaveId, tcs_gva: Gva) -> Self {
        DriverRequest {
            leaf: IoctlLeaf::Eresume,
            params: LeafParams::Eresume { enclave, tcs_gva },
        }
    }

    pub fn eremove(enclave: EnclaveId) -> Self {
        DriverRequest { leaf: IoctlLeaf::Eremove, params: LeafParams::Eremove { enclave } }
    }

    /// Requests expressible from App bytecode: entry leaves and the simple
    /// id-only leaves, with arguments in r0/r1.
    pub fn from_bytecode(leaf: IoctlLeaf, args: &[u64; 6]) -> Option<DriverRequest> {
        let id = EnclaveId(args[0] as u32);
        match leaf {
            IoctlLeaf::Eenter => Some(DriverRequest::eenter(id, args[1])),
            IoctlLeaf::Eresume => Some(DriverRequest::eresume(id, args[1])),
            IoctlLeaf::Einit => Some(DriverRequest::einit(id)),
            IoctlLeaf::Eremove => Some(DriverRequest::eremove(id)),
            _ => None,
        }
    }
}

/// What a malicious driver turns a request into: always a well-formed,
/// different leaf invocation.
fn tamper_request(req: &DriverRequest) -> DriverRequest {
    match &req.params {
        LeafParams::Ecreate { base_gva, size_bytes, ssa_frame_size, attributes, param_gva, param_gpa, param_pages } => {
            DriverRequest::ecreate(
                *base_gva,
                *size_bytes,
                ssa_frame_size + 1,
                *attributes,
                *param_gva,
                *param_gpa,
                *param_pages,
            )
        }
        LeafParams::Eadd { enclave, src_gpa, dest_gva, page_type, perms } => {
            DriverRequest::eadd(*enclave, *src_gpa, dest_gva + PAGE_SIZE, *page_type, *perms)
        }
        LeafParams::Eextend { enclave, gva } => {
            DriverRequest::eextend(*enclave, gva + crate::monitor::EEXTEND_CHUNK)
        }
        LeafParams::Einit { enclave } => DriverRequest::eremove(*enclave),
        LeafParams::Eenter { enclave, tcs_gva } => DriverRequest::eresume(*enclave, *tcs_gva),
        LeafParams::Eresume { enclave, tcs_gva } => DriverRequest::eenter(*enclave, *tcs_gva),
        LeafParams::Eremove { enclave } => DriverRequest::einit(*enclave),
    }
}

/// Guest OS state: page tables, driver configuration, the App program, and
/// the fault handler's observation log.
#[derive(Debug, Clone)]
pub struct GuestOs {
    pub kernel_pt: PtId,
    pub app_pt: PtId,
    pub driver_policy: DriverPolicy,
    pub aep_gva: Gva,
    pub app_program: Option<Program>,
    pub faults_observed: Vec<Exception>,
    /// Where the driver last pointed the App's RIP on return from VMPL0
    /// (the AEP when honest, elsewhere under SkipAep).
    pub last_return_rip: Gva,
    alloc_next: u64,
}

impl GuestOs {
    pub const APP_PROCESS_ID: u32 = 1;

    /// Build the guest world over the VMPL1 region: a kernel table identity
    /// mapping all of guest memory, and an App table with scratch and stack
    /// pages.
    pub fn new(mem: &mut Memory, layout: &MemLayout) -> Result<GuestOs, MachineError> {
        let kernel_pt = mem.create_table(ContextTag::GuestKernel);
        for page in layout.vmpl1.iter_pages() {
            mem.table_mut(kernel_pt)?.map_page(
                page * PAGE_SIZE,
                PtEntry {
                    gpa: page * PAGE_SIZE,
                    user: false,
                    writable: true,
                    executable: true,
                    immutable: false,
                },
            )?;
        }
        let app_pt = mem.create_table(ContextTag::AppUser(Self::APP_PROCESS_ID));
        let mut guest = GuestOs {
            kernel_pt,
            app_pt,
            driver_policy: DriverPolicy::Honest,
            aep_gva: AEP_GVA,
            app_program: None,
            faults_observed: Vec::new(),
            last_return_rip: 0,
            alloc_next: layout.vmpl1.start_page,
        };
        for k in 0..APP_SCRATCH_PAGES {
            let gpa = guest.alloc_page(layout).ok_or(MachineError::GuestOom)?;
            mem.table_mut(app_pt)?.map_page(
                APP_SCRATCH_GVA + k * PAGE_SIZE,
                PtEntry { gpa, user: true, writable: true, executable: false, immutable: false },
            )?;
        }
        let stack_gpa = guest.alloc_page(layout).ok_or(MachineError::GuestOom)?;
        mem.table_mut(app_pt)?.map_page(
            APP_STACK_GVA,
            PtEntry { gpa: stack_gpa, user: true, writable: true, executable: false, immutable: false },
        )?;
        Ok(guest)
    }

    /// Bump allocator over the VMPL1 region.
    pub fn alloc_page(&mut self, layout: &MemLayout) -> Option<Gpa> {
        if self.alloc_next >= layout.vmpl1.end_page() {
            return None;
        }
        let page = self.alloc_next;
        self.alloc_next += 1;
        Some(page * PAGE_SIZE)
    }

    /// Guest OS scheduler: give the CPU to the App.
    pub fn schedule_app(&self, vcpu: &mut Vcpu) {
        let vmsa = vcpu.vmsa_mut(1).expect("vmpl1 VMSA");
        vmsa.mode = CpuMode::User;
        vmsa.cr3 = self.app_pt;
        vmsa.rsp = APP_STACK_GVA + PAGE_SIZE;
    }

    /// Guest OS fault handler: record and return.
    pub fn observe_fault(&mut self, exception: Exception) {
        self.faults_observed.push(exception);
    }
}

/// Control transfer the driver performs when execution returns from VMPL0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnKind {
    /// Normal EEXIT (final or OCALL): restore the App page table and
    /// sysret back into the App.
    EexitReturn,
    /// AEX arrived: fill RIP with the AEP so the guest OS handler returns
    /// there (unless the driver skips the AEP).
    AexDelivery,
}

// ---- attacks ----

/// Scripted adversarial behaviors from the guest side, one per attack
/// vector in the threat model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackScript {
    /// Guest kernel maps and reads a VMPL0 guest-physical page.
    ReadVmpl0 { target_gpa: Gpa },
    /// Guest kernel maps and writes a VMPL0 guest-physical page.
    WriteVmpl0 { target_gpa: Gpa },
    /// Guest OS points an App mapping at an enclave's EPC page and reads.
    RemapEnclavePage { enclave: EnclaveId },
    /// Driver never fills RIP with the AEP after an AEX.
    SkipAep { enclave: EnclaveId, tcs_gva: Gva },
    /// Driver mutates the next leaf request before switching.
    TamperLeafParams { enclave: EnclaveId },
    /// Guest kernel requests an SNP report speaking for VMPL0.
    RequestVmpl0Report,
    /// Guest kernel requests the VMPL0 guest key.
    DeriveVmpl0Key,
}

impl AttackScript {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AttackScript::ReadVmpl0 { .. } => "read-vmpl0",
            AttackScript::WriteVmpl0 { .. } => "write-vmpl0",
            AttackScript::RemapEnclavePage { .. } => "remap-enclave-page",
            AttackScript::SkipAep { .. } => "skip-aep",
            AttackScript::TamperLeafParams { .. } => "tamper-leaf-params",
            AttackScript::RequestVmpl0Report => "request-vmpl0-report",
            AttackScript::DeriveVmpl0Key => "derive-vmpl0-key",
        }
    }
}

/// What stopped an attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    RmpFault,
    PageFault,
    PrivilegeFault,
    VmplDenied,
    GeneralProtection,
    BadEntry,
}

impl core::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            BlockKind::RmpFault => "rmp-fault",
            BlockKind::PageFault => "page-fault",
            BlockKind::PrivilegeFault => "privilege-fault",
            BlockKind::VmplDenied => "vmpl-denied",
            BlockKind::GeneralProtection => "general-protection",
            BlockKind::BadEntry => "bad-entry",
        };
        f.write_str(s)
    }
}

/// Classified outcome of an attack run. `Succeeded` marks an actual
/// confidentiality or integrity breach and must never occur.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttackVerdict {
    Blocked(BlockKind),
    NoEffect,
    Succeeded(String),
}

impl AttackVerdict {
    pub fn label(&self) -> String {
        match self {
            AttackVerdict::Blocked(kind) => format!("blocked({kind})"),
            AttackVerdict::NoEffect => "no-effect".to_string(),
            AttackVerdict::Succeeded(why) => format!("SUCCEEDED: {why}"),
        }
    }
}

impl Machine {
    /// App-side IOCTL: the driver copies the leaf and parameters into the
    /// request channel, switches to VMPL0, and later returns the monitor's
    /// result to the App verbatim. Monitor errors propagate unchanged.
    pub fn ioctl(&mut self, req: DriverRequest) -> Result<LeafOutput, MachineError> {
        self.ledger.record(EventKind::IoctlEntry);
        // The App trapped into the guest kernel (driver).
        self.vcpu.vmsa_mut(1).expect("vmpl1").mode = CpuMode::Kernel;
        let mut request = match self.guest.driver_policy {
            DriverPolicy::TamperLeafParams => tamper_request(&req),
            _ => req,
        };
        let mut resumes = 0u64;
        loop {
            self.vmgexit_to(0)?;
            let mret = self.monitor_handle_request(&request);
            self.vmgexit_to(1)?;
            match mret {
                MonitorReturn::Leaf(result) => {
                    self.handle_return_from_vmpl0(ReturnKind::EexitReturn);
                    return result.map_err(MachineError::Monitor);
                }
                MonitorReturn::Eexit { ocall, .. } => {
                    self.handle_return_from_vmpl0(ReturnKind::EexitReturn);
                    return Ok(LeafOutput::EcallFinished { ocall_pending: ocall });
                }
                MonitorReturn::Aex { enclave, tcs, exception } => {
                    self.handle_return_from_vmpl0(ReturnKind::AexDelivery);
                    if self.guest.driver_policy == DriverPolicy::SkipAep {
                        // Control diverted; the enclave never resumes. The
                        // App simply continues.
                        self.vcpu.vmsa_mut(1).expect("vmpl1").mode = CpuMode::User;
                        self.ledger.record(EventKind::SysretExit);
                        return Ok(LeafOutput::EcallAbandoned { exception: Some(exception) });
                    }
                    // Guest OS fault handler runs, then the AEP issues
                    // ioctl(ERESUME).
                    self.guest.observe_fault(exception);
                    resumes += 1;
                    if resumes > self.cfg.max_resumes {
                        self.vcpu.vmsa_mut(1).expect("vmpl1").mode = CpuMode::User;
                        self.ledger.record(EventKind::SysretExit);
                        return Ok(LeafOutput::EcallAbandoned { exception: Some(exception) });
                    }
                    self.ledger.record(EventKind::IoctlEntry);
                    request = DriverRequest::eresume(enclave, tcs);
                }
            }
        }
    }

    /// Driver-side control transfer after execution switched back 0 -> 1.
    pub fn handle_return_from_vmpl0(&mut self, kind: ReturnKind) {
        match kind {
            ReturnKind::EexitReturn => {
                let app_pt = self.guest.app_pt;
                let vmsa = self.vcpu.vmsa_mut(1).expect("vmpl1");
                vmsa.cr3 = app_pt;
                vmsa.mode = CpuMode::User;
                self.ledger.record(EventKind::SysretExit);
            }
            ReturnKind::AexDelivery => {
                let rip = match self.guest.driver_policy {
                    // Honest driver: RIP := AEP, guest OS handler will iret
                    // there and the AEP resumes the enclave.
                    DriverPolicy::Honest | DriverPolicy::TamperLeafParams => self.guest.aep_gva,
                    // Diverted: anywhere but the AEP.
                    DriverPolicy::SkipAep => 0,
                };
                self.guest.last_return_rip = rip;
            }
        }
    }

    /// Execute one attack script and classify the outcome.
    pub fn run_attack(&mut self, script: &AttackScript) -> AttackVerdict {
        match script {
            AttackScript::ReadVmpl0 { target_gpa } => self.attack_access_vmpl0(*target_gpa, Access::Read),
            AttackScript::WriteVmpl0 { target_gpa } => {
                self.attack_access_vmpl0(*target_gpa, Access::Write)
            }
            AttackScript::RemapEnclavePage { enclave } => self.attack_remap_enclave(*enclave),
            AttackScript::SkipAep { enclave, tcs_gva } => self.attack_skip_aep(*enclave, *tcs_gva),
            AttackScript::TamperLeafParams { enclave } => self.attack_tamper_leaf(*enclave),
            AttackScript::RequestVmpl0Report => self.attack_vmpl0_report(),
            AttackScript::DeriveVmpl0Key => self.attack_vmpl0_key(),
        }
    }

    fn attack_access_vmpl0(&mut self, target_gpa: Gpa, access: Access) -> AttackVerdict {
        if !self.layout.vmpl0.contains_addr(target_gpa) {
            return AttackVerdict::Succeeded(format!(
                "attack misconfigured: {target_gpa:#x} is not in the VMPL0 region"
            ));
        }
        let kernel_pt = self.guest.kernel_pt;
        // The guest kernel fully controls its own page table; the mapping
        // itself succeeds.
        let mapped = self.mem.table_mut(kernel_pt).and_then(|t| {
            t.map_page(
                ATTACK_WINDOW_GVA,
                PtEntry {
                    gpa: target_gpa & !(PAGE_SIZE - 1),
                    user: false,
                    writable: true,
                    executable: true,
                    immutable: false,
                },
            )
        });
        if mapped.is_err() {
            return AttackVerdict::Succeeded("guest could not edit its own table".into());
        }
        let spa = self.mem.spa_for_gpa(target_gpa).expect("assigned");
        let mut before = vec![0u8; 8];
        self.mem.read_phys(spa, &mut before);
        let gva = ATTACK_WINDOW_GVA + (target_gpa % PAGE_SIZE);
        let result = match access {
            Access::Write => self
                .mem
                .write_virt(kernel_pt, gva, &[0xeeu8; 8], CpuMode::Kernel, 1)
                .map(|()| Vec::new()),
            _ => self.mem.read_virt(kernel_pt, gva, 8, CpuMode::Kernel, 1),
        };
        let _ = self.mem.table_mut(kernel_pt).and_then(|t| t.unmap_page(ATTACK_WINDOW_GVA));
        match result {
            Ok(bytes) => {
                if access == Access::Read {
                    AttackVerdict::Succeeded(format!(
                        "vmpl1 read {} from vmpl0 memory",
                        hex::encode(bytes)
                    ))
                } else {
                    AttackVerdict::Succeeded("vmpl1 wrote vmpl0 memory".into())
                }
            }
            Err(TranslateFault::Rmp(f)) => {
                let mut after = vec![0u8; 8];
                self.mem.read_phys(spa, &mut after);
                if after != before {
                    return AttackVerdict::Succeeded("vmpl0 memory changed despite fault".into());
                }
                debug_assert_eq!(f.vmpl, 1);
                AttackVerdict::Blocked(BlockKind::RmpFault)
            }
            Err(TranslateFault::Page(_)) => AttackVerdict::Blocked(BlockKind::PageFault),
        }
    }

    fn attack_remap_enclave(&mut self, enclave: EnclaveId) -> AttackVerdict {
        let Some(epc_gpa) = self
            .monitor
            .epcm_entries()
            .find(|e| e.owner == enclave && e.page_type != crate::monitor::PageType::Secs)
            .map(|e| e.gpa)
        else {
            return AttackVerdict::Succeeded("attack misconfigured: enclave has no EPC pages".into());
        };
        let app_pt = self.guest.app_pt;
        // The guest OS manages the App's table and can point it anywhere.
        let mapped = self.mem.table_mut(app_pt).and_then(|t| {
            t.map_page(
                ATTACK_WINDOW_GVA,
                PtEntry { gpa: epc_gpa, user: true, writable: true, executable: false, immutable: false },
            )
        });
        if mapped.is_err() {
            return AttackVerdict::Succeeded("guest could not edit the app table".into());
        }
        let result = self.mem.read_virt(app_pt, ATTACK_WINDOW_GVA, 16, CpuMode::User, 1);
        let _ = self.mem.table_mut(app_pt).and_then(|t| t.unmap_page(ATTACK_WINDOW_GVA));
        match result {
            Ok(bytes) => AttackVerdict::Succeeded(format!(
                "app read enclave page contents {}",
                hex::encode(bytes)
            )),
            Err(TranslateFault::Rmp(_)) => AttackVerdict::Blocked(BlockKind::RmpFault),
            Err(TranslateFault::Page(_)) => AttackVerdict::Blocked(BlockKind::PageFault),
        }
    }

    fn attack_skip_aep(&mut self, enclave: EnclaveId, tcs_gva: Gva) -> AttackVerdict {
        let saved_policy = self.guest.driver_policy;
        self.guest.driver_policy = DriverPolicy::SkipAep;
        // Guarantee a prompt AEX regardless of what the enclave runs.
        let saved_budget = self.cfg.step_budget;
        self.cfg.step_budget = 8;
        let ssa_index_before = self
            .monitor
            .enclave(enclave)
            .ok()
            .and_then(|e| e.tcs.get(&tcs_gva))
            .map(|t| t.current_ssa_index);
        let result = self.ioctl(DriverRequest::eenter(enclave, tcs_gva));
        self.guest.driver_policy = saved_policy;
        self.cfg.step_budget = saved_budget;
        match result {
            Ok(LeafOutput::EcallAbandoned { .. }) => {
                // The enclave never resumed: its thread stays inside and
                // one SSA frame is pending. No isolation property depends
                // on the driver's cooperation.
                let enc = match self.monitor.enclave(enclave) {
                    Ok(e) => e,
                    Err(_) => return AttackVerdict::Succeeded("enclave state vanished".into()),
                };
                let tcs = match enc.tcs.get(&tcs_gva) {
                    Some(t) => t,
                    None => return AttackVerdict::Succeeded("tcs vanished".into()),
                };
                if !tcs.busy || Some(tcs.current_ssa_index) <= ssa_index_before {
                    return AttackVerdict::Succeeded("aex bookkeeping inconsistent".into());
                }
                AttackVerdict::NoEffect
            }
            // The enclave finished before any AEX: nothing to divert.
            Ok(LeafOutput::EcallFinished { .. }) => AttackVerdict::NoEffect,
            Ok(_) => AttackVerdict::Succeeded("unexpected leaf output".into()),
            Err(e) => AttackVerdict::Succeeded(format!("ecall aborted abnormally: {e}")),
        }
    }

    fn attack_tamper_leaf(&mut self, enclave: EnclaveId) -> AttackVerdict {
        // The driver swaps the add offset below; the monitor simply runs
        // the different instruction. Observable consequence: the enclave
        // measures differently than the honest script intended.
        let Ok(secs) = self.monitor.enclave(enclave) else {
            return AttackVerdict::Succeeded("attack misconfigured: no enclave".into());
        };
        if secs.state != crate::monitor::EnclaveState::Uninitialized {
            return AttackVerdict::Succeeded("attack misconfigured: enclave already built".into());
        }
        let log_before = secs.measurement_log.len();
        let intended_dest = secs.base_gva + secs.size_bytes - PAGE_SIZE;
        let Some(src_gpa) = self.guest.alloc_page(&self.layout) else {
            return AttackVerdict::Succeeded("guest oom".into());
        };
        let _ = self.mem.write_gpa(src_gpa, &[0x77u8; PAGE_SIZE as usize], 1);

        let saved_policy = self.guest.driver_policy;
        self.guest.driver_policy = DriverPolicy::TamperLeafParams;
        let result = self.ioctl(DriverRequest::eadd(
            enclave,
            src_gpa,
            // The tampering driver shifts this one page up.
            intended_dest - PAGE_SIZE,
            PageType::Reg,
            PagePerms::RW,
        ));
        self.guest.driver_policy = saved_policy;

        let Ok(secs) = self.monitor.enclave(enclave) else {
            return AttackVerdict::Succeeded("enclave state vanished".into());
        };
        match result {
            Ok(LeafOutput::Done) => {
                // A different EADD ran: the measurement log grew with the
                // tampered offset, exactly as if the App had asked for it.
                let grew = secs.measurement_log.len() == log_before + 1;
                let tampered_offset = intended_dest - secs.base_gva;
                let recorded = secs
                    .measurement_log
                    .records()
                    .last()
                    .map(|r| u64::from_le_bytes(r[8..16].try_into().unwrap()));
                if grew && recorded == Some(tampered_offset) {
                    AttackVerdict::NoEffect
                } else {
                    AttackVerdict::Succeeded("monitor executed something other than a leaf".into())
                }
            }
            // The tampered leaf may legitimately fault; that is still just
            // a different instruction.
            Err(MachineError::Monitor(_)) => AttackVerdict::NoEffect,
            _ => AttackVerdict::Succeeded("tampering had non-leaf effects".into()),
        }
    }

    fn attack_vmpl0_report(&mut self) -> AttackVerdict {
        match self.amd_sp.snp_report_req(1, CpuMode::Kernel, 0, [0u8; 64]) {
            Err(crate::attest::AttestError::VmplDenied { .. }) => {
                AttackVerdict::Blocked(BlockKind::VmplDenied)
            }
            Ok(report) => AttackVerdict::Succeeded(format!(
                "guest obtained a vmpl{} report for vmpl0",
                report.vmpl
            )),
            Err(e) => AttackVerdict::Succeeded(format!("unexpected channel behavior: {e}")),
        }
    }

    fn attack_vmpl0_key(&mut self) -> AttackVerdict {
        let monitor_key = self.monitor.guest_key();
        match self.amd_sp.msg_key_req(1, CpuMode::Kernel, 0) {
            Err(crate::attest::AttestError::VmplDenied { .. }) => {
                // The guest can still derive its own key; it must differ
                // from the monitor's.
                match self.amd_sp.msg_key_req(1, CpuMode::Kernel, 1) {
                    Ok(vmpl1_key) => {
                        if monitor_key == Some(vmpl1_key) {
                            AttackVerdict::Succeeded("vmpl1 key equals the vmpl0 key".into())
                        } else {
                            AttackVerdict::Blocked(BlockKind::VmplDenied)
                        }
                    }
                    Err(e) => AttackVerdict::Succeeded(format!("own-key request broke: {e}")),
                }
            }
            Ok(key) => {
                if monitor_key == Some(key) {
                    AttackVerdict::Succeeded("guest derived the vmpl0 guest key".into())
                } else {
                    // Got a key but not the monitor's; still a protocol
                    // violation worth flagging.
                    AttackVerdict::Succeeded("vmpl0 key request unexpectedly served".into())
                }
            }
            Err(e) => AttackVerdict::Succeeded(format!("unexpected channel behavior: {e}")),
        }
    }
}
