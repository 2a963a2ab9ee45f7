// SPDX-License-Identifier: Apache-2.0

//! One simulated machine: guest memory behind an RMP, a vCPU with per-VMPL
//! save areas, the VMPL0 security monitor plus AMD-SP, and the untrusted
//! guest OS at VMPL1. Single-threaded and self-contained; a machine value
//! can be moved freely between execution contexts.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha384};
use thiserror::Error;

use crate::attest::{AmdSp, AttestError, NestedBundle};
use crate::evm::{self, MemBus, Program, StepOutcome, SyscallLeaf};
use crate::guest::{DriverRequest, GuestOs, LeafParams};
use crate::mem::{MemError, MemLayout, Memory, PtEntry};
use crate::monitor::{KeyPolicy, KeyRequest, LeafError, Monitor, TRAMPOLINE_GVA};
use crate::types::{ContextTag, CpuMode, EnclaveId, Gpa, Gva, PAGE_SIZE};
use crate::vcpu::{
    EventKind, Exception, HypervisorPolicy, SwitchLedger, SwitchOutcome, Vcpu, VcpuError, Vmsa,
};

/// Parameter buffer layout offsets (see `docs/formats.md`).
pub mod param {
    /// u64: nonzero marks the EEXIT as an OCALL request.
    pub const OCALL_FLAG: u64 = 0;
    /// u64: ECALL function selector.
    pub const FUNCTION_ID: u64 = 8;
    /// 16 bytes: key id consumed by EGETKEY.
    pub const KEY_ID: u64 = 16;
    /// 64 bytes: report data consumed by EREPORT.
    pub const REPORT_DATA: u64 = 64;
    /// Start of the free-form in/out area (EREPORT body, ECALL payload).
    pub const OUT: u64 = 128;
}

/// Key generation source. Deterministic mode draws everything from a
/// seeded DRBG so ledgers and bundles are byte-stable across runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CryptoMode {
    Deterministic(u64),
    SystemEntropy,
}

enum MachineRng {
    Drbg(Box<ChaCha20Rng>),
    System,
}

impl RngCore for MachineRng {
    fn next_u32(&mut self) -> u32 {
        match self {
            MachineRng::Drbg(rng) => rng.next_u32(),
            MachineRng::System => rand::rngs::OsRng.next_u32(),
        }
    }
    fn next_u64(&mut self) -> u64 {
        match self {
            MachineRng::Drbg(rng) => rng.next_u64(),
            MachineRng::System => rand::rngs::OsRng.next_u64(),
        }
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        match self {
            MachineRng::Drbg(rng) => rng.fill_bytes(dest),
            MachineRng::System => rand::rngs::OsRng.fill_bytes(dest),
        }
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineConfig {
    pub total_pages: u64,
    pub vmpl0_pages: u64,
    pub monitor_pages: u64,
    /// Bytecode steps an enclave may run per entry before timer preemption.
    pub step_budget: u64,
    /// AEX/ERESUME cycles the driver tolerates per ECALL before giving up.
    pub max_resumes: u64,
    /// Bytecode steps the App may run in one `run_app` call.
    pub app_step_limit: u64,
    /// Initial monitor image, measured into the launch digest.
    pub monitor_image: Vec<u8>,
}

impl Default for MachineConfig {
    /// Desk-scale defaults: 16 MiB of guest memory with a 1024-page (4 MiB)
    /// EPC pool.
    fn default() -> Self {
        MachineConfig {
            total_pages: 4096,
            vmpl0_pages: 1280,
            monitor_pages: 256,
            step_budget: crate::monitor::DEFAULT_STEP_BUDGET,
            max_resumes: 64,
            app_step_limit: 1_000_000,
            monitor_image: b"vmplsim security monitor image v1".to_vec(),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MachineError {
    #[error("monitor leaf fault: {0}")]
    Monitor(#[from] LeafError),
    #[error(transparent)]
    Vcpu(#[from] VcpuError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(transparent)]
    Attest(#[from] AttestError),
    #[error("double fault: {} while handling a fault", .0.kind_name())]
    DoubleFault(Exception),
    #[error("hypervisor refused the VMPL switch; request stalled")]
    Stalled,
    #[error("hypervisor ran vmpl{0} instead of the requested level")]
    WrongVmplRan(u8),
    #[error("no program attached for {0}")]
    NoProgram(EnclaveId),
    #[error("no bundle was produced by the ECALL")]
    NoBundle,
    #[error("app exceeded its step limit")]
    AppStepLimit,
    #[error("guest memory exhausted")]
    GuestOom,
}

/// Which handler an exception was routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandlerRoute {
    Monitor,
    Guest,
}

/// Launch digest a machine with this configuration will measure at boot:
/// SHA-384 over the monitor image followed by the initial RMP permission
/// map.
pub fn launch_digest_for(cfg: &MachineConfig) -> Result<[u8; 48], MachineError> {
    let mut mem = Memory::new(cfg.total_pages);
    mem.carve_layout(cfg.vmpl0_pages, cfg.monitor_pages)?;
    mem.write_phys(0, &cfg.monitor_image);
    let mut hasher = Sha384::new();
    hasher.update(&cfg.monitor_image);
    mem.hash_perm_map(&mut hasher);
    Ok(hasher.finalize().into())
}

/// Result of one ECALL-style driver request, as the App sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LeafOutput {
    Created(EnclaveId),
    Measured([u8; 32]),
    Done,
    /// The enclave exited; `ocall_pending` reflects the parameter buffer's
    /// OCALL flag.
    EcallFinished { ocall_pending: bool },
    /// The driver abandoned the thread (AEP skipped or resume limit hit).
    /// The enclave never resumes; its TCS stays busy.
    EcallAbandoned { exception: Option<Exception> },
}

/// Outcome the monitor request loop hands back to the driver.
pub(crate) enum MonitorReturn {
    Leaf(Result<LeafOutput, LeafError>),
    Eexit { ocall: bool },
    Aex { enclave: EnclaveId, tcs: Gva, exception: Exception },
}

/// How an App run ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppRunOutcome {
    Halted,
    Fault(Exception),
}

pub struct Machine {
    pub cfg: MachineConfig,
    pub mem: Memory,
    pub layout: MemLayout,
    pub vcpu: Vcpu,
    pub ledger: SwitchLedger,
    pub hypervisor: HypervisorPolicy,
    pub monitor: Monitor,
    pub amd_sp: AmdSp,
    pub guest: GuestOs,
    pub last_bundle: Option<NestedBundle>,
    programs: BTreeMap<EnclaveId, Program>,
    rng: MachineRng,
}

impl Machine {
    /// Boot a machine: carve the layout, measure the launch state, bring up
    /// the AMD-SP and the monitor (AIK + binding report + guest key), build
    /// the guest OS structures, and hand the vCPU to VMPL1. The boot
    /// switch itself is not ledgered; accounting starts fresh.
    pub fn new(cfg: MachineConfig, crypto: CryptoMode) -> Result<Machine, MachineError> {
        let mut rng = match crypto {
            CryptoMode::Deterministic(seed) => {
                MachineRng::Drbg(Box::new(ChaCha20Rng::seed_from_u64(seed)))
            }
            CryptoMode::SystemEntropy => MachineRng::System,
        };
        let mut mem = Memory::new(cfg.total_pages);
        let layout = mem.carve_layout(cfg.vmpl0_pages, cfg.monitor_pages)?;

        // Install the monitor image at the bottom of its carve-out.
        assert!(
            (cfg.monitor_image.len() as u64) < (cfg.monitor_pages - 1) * PAGE_SIZE,
            "monitor image exceeds the monitor sub-range"
        );
        mem.write_phys(0, &cfg.monitor_image);

        // Launch measurement covers the image and the whole initial RMP
        // permission map.
        let launch_digest = launch_digest_for(&cfg)?;

        let mut amd_sp = AmdSp::generate(&mut rng, launch_digest);
        let mut monitor = Monitor::new(&mut mem, &layout);
        monitor.boot_attestation(&mut amd_sp, &mut rng)?;

        let guest = GuestOs::new(&mut mem, &layout)?;

        let mut vcpu = Vcpu::new();
        vcpu.init_vmsa(Vmsa::new(0, monitor.page_table, TRAMPOLINE_GVA));
        vcpu.init_vmsa(Vmsa::new(1, guest.kernel_pt, 0));

        // Boot handover: the platform starts the monitor at VMPL0, which
        // then yields to the guest OS. Done under an honest hypervisor,
        // before any scenario policy applies; not ledgered.
        let mut boot_ledger = SwitchLedger::default();
        vcpu.vmsa_mut(0).expect("vmpl0").runnable = true;
        vcpu.vmgexit_run_vmpl(HypervisorPolicy::Honest, &mut boot_ledger, 1)?;
        guest.schedule_app(&mut vcpu);

        Ok(Machine {
            cfg,
            mem,
            layout,
            vcpu,
            ledger: SwitchLedger::default(),
            hypervisor: HypervisorPolicy::Honest,
            monitor,
            amd_sp,
            guest,
            last_bundle: None,
            programs: BTreeMap::new(),
            rng,
        })
    }

    pub fn rng_fill(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest);
    }

    /// Execution context of the currently runnable VMSA.
    pub fn current_context(&self) -> ContextTag {
        let vmsa = self.vcpu.current_vmsa();
        match (vmsa.vmpl, vmsa.mode) {
            (0, CpuMode::Kernel) => ContextTag::MonitorKernel,
            (0, CpuMode::User) => {
                let id = self
                    .monitor
                    .enclave_by_table(vmsa.cr3)
                    .expect("vmpl0 user context runs an enclave table");
                ContextTag::EnclaveUser(id)
            }
            (_, CpuMode::Kernel) => ContextTag::GuestKernel,
            (_, CpuMode::User) => ContextTag::AppUser(GuestOs::APP_PROCESS_ID),
        }
    }

    /// Deliver an exception: faults raised at VMPL0 (enclave or monitor)
    /// trap to the monitor's handler without any VMPL switch; faults at
    /// VMPL1 go to the guest OS handler. A fault while the monitor handler
    /// is already running aborts the scenario.
    pub fn deliver_exception(&mut self, exception: Exception) -> Result<HandlerRoute, MachineError> {
        match self.current_context() {
            ContextTag::MonitorKernel | ContextTag::EnclaveUser(_) => {
                if self.monitor.in_fault_handler {
                    return Err(MachineError::DoubleFault(exception));
                }
                Ok(HandlerRoute::Monitor)
            }
            ContextTag::GuestKernel | ContextTag::AppUser(_) => {
                self.guest.observe_fault(exception);
                Ok(HandlerRoute::Guest)
            }
        }
    }

    /// VMGEXIT wrapper applying the machine's hypervisor policy.
    pub(crate) fn vmgexit_to(&mut self, target: u8) -> Result<(), MachineError> {
        match self.vcpu.vmgexit_run_vmpl(self.hypervisor, &mut self.ledger, target)? {
            SwitchOutcome::Switched(v) if v == target => Ok(()),
            SwitchOutcome::Switched(other) => Err(MachineError::WrongVmplRan(other)),
            SwitchOutcome::Stalled => Err(MachineError::Stalled),
        }
    }

    pub fn attach_program(&mut self, id: EnclaveId, program: Program) {
        self.programs.insert(id, program);
    }

    pub fn program(&self, id: EnclaveId) -> Option<&Program> {
        self.programs.get(&id)
    }

    /// Allocate one fresh page of guest (VMPL1) memory.
    pub fn alloc_guest_page(&mut self) -> Result<Gpa, MachineError> {
        self.guest.alloc_page(&self.layout).ok_or(MachineError::GuestOom)
    }

    // ---- VMPL0 request loop ----

    /// Execute one driver request at VMPL0. Entry leaves start bytecode
    /// execution inside the enclave and only return when it exits, faults,
    /// or exhausts its budget.
    pub(crate) fn monitor_handle_request(&mut self, req: &DriverRequest) -> MonitorReturn {
        let ret = self.monitor_dispatch(req);
        // Whatever happened, the monitor kernel has control before it
        // requests the switch back to VMPL1.
        if let MonitorReturn::Leaf(Err(_)) = &ret {
            let monitor_pt = self.monitor.page_table;
            let vmsa = self.vcpu.vmsa_mut(0).expect("vmpl0 VMSA");
            if vmsa.mode == CpuMode::User {
                vmsa.mode = CpuMode::Kernel;
                vmsa.cr3 = monitor_pt;
            }
        }
        ret
    }

    fn monitor_dispatch(&mut self, req: &DriverRequest) -> MonitorReturn {
        match &req.params {
            LeafParams::Ecreate {
                base_gva,
                size_bytes,
                ssa_frame_size,
                attributes,
                param_gva,
                param_gpa,
                param_pages,
            } => {
                let result = self
                    .monitor
                    .ecreate(&mut self.mem, *base_gva, *size_bytes, *ssa_frame_size, *attributes)
                    .and_then(|id| {
                        self.monitor
                            .map_param_buffer(
                                &mut self.mem,
                                id,
                                self.guest.app_pt,
                                *param_gva,
                                *param_gpa,
                                *param_pages,
                            )
                            .map(|()| LeafOutput::Created(id))
                    });
                MonitorReturn::Leaf(result)
            }
            LeafParams::Eadd { enclave, src_gpa, dest_gva, page_type, perms } => {
                let result = self
                    .monitor
                    .eadd(&mut self.mem, *enclave, *src_gpa, *dest_gva, *page_type, *perms)
                    .map(|()| LeafOutput::Done);
                MonitorReturn::Leaf(result)
            }
            LeafParams::Eextend { enclave, gva } => {
                let result = self
                    .monitor
                    .eextend(&self.mem, *enclave, *gva)
                    .map(|()| LeafOutput::Done);
                MonitorReturn::Leaf(result)
            }
            LeafParams::Einit { enclave } => {
                let result = self.monitor.einit(*enclave).map(LeafOutput::Measured);
                MonitorReturn::Leaf(result)
            }
            LeafParams::Eremove { enclave } => {
                let result =
                    self.monitor.eremove(&mut self.mem, *enclave).map(|()| LeafOutput::Done);
                MonitorReturn::Leaf(result)
            }
            LeafParams::Eenter { enclave, tcs_gva } => {
                let aep = self.guest.aep_gva;
                if let Err(e) = self.monitor.eenter(&mut self.vcpu, *enclave, *tcs_gva, aep) {
                    return MonitorReturn::Leaf(Err(e));
                }
                // sysret into the enclave entry point.
                self.ledger.record(EventKind::SysretExit);
                self.run_enclave(*enclave, *tcs_gva)
            }
            LeafParams::Eresume { enclave, tcs_gva } => {
                if let Err(e) = self.monitor.eresume(&self.mem, &mut self.vcpu, *enclave, *tcs_gva)
                {
                    return MonitorReturn::Leaf(Err(e));
                }
                self.ledger.record(EventKind::SysretExit);
                self.run_enclave(*enclave, *tcs_gva)
            }
        }
    }

    /// Run enclave bytecode until EEXIT, a fault (AEX), or budget
    /// exhaustion (timer AEX). EREPORT/EGETKEY syscalls are served inline
    /// and execution continues.
    fn run_enclave(&mut self, id: EnclaveId, tcs_gva: Gva) -> MonitorReturn {
        let program = match self.programs.get(&id) {
            Some(p) => p.clone(),
            None => return MonitorReturn::Leaf(Err(LeafError::StateError("no program attached"))),
        };
        let pt = match self.monitor.enclave(id) {
            Ok(e) => e.page_table,
            Err(e) => return MonitorReturn::Leaf(Err(e)),
        };
        let mut budget = self.cfg.step_budget;
        loop {
            if budget == 0 {
                // Timer preemption.
                return self.enclave_fault(id, tcs_gva, Exception::Timer);
            }
            budget -= 1;
            let outcome = {
                let vmsa = self.vcpu.vmsa_mut(0).expect("vmpl0 VMSA");
                let mut regs = vmsa.gprs;
                let mut rip = vmsa.rip;
                let mut bus = MemBus { mem: &mut self.mem, pt, mode: CpuMode::User, vmpl: 0 };
                let outcome = evm::step(&program, &mut regs, &mut rip, &mut bus);
                let vmsa = self.vcpu.vmsa_mut(0).expect("vmpl0 VMSA");
                vmsa.gprs = regs;
                vmsa.rip = rip;
                outcome
            };
            match outcome {
                StepOutcome::Continue => {}
                // User-mode halt is privileged; it surfaces as a fault.
                StepOutcome::Halted => {
                    return self.enclave_fault(id, tcs_gva, Exception::GeneralProtection)
                }
                StepOutcome::Trap(e) => return self.enclave_fault(id, tcs_gva, e),
                StepOutcome::SyscallRequest(leaf, args) => {
                    self.ledger.record(EventKind::SyscallEntry);
                    let entry = self.vcpu.vmsa(0).expect("vmpl0").lstar;
                    match self.monitor.dispatch_gate(ContextTag::EnclaveUser(id), entry, leaf) {
                        Err(LeafError::RefusedLeaf) => {
                            return self.enclave_fault(
                                id,
                                tcs_gva,
                                Exception::GeneralProtection,
                            );
                        }
                        Err(_) => {
                            return self.enclave_fault(id, tcs_gva, Exception::GeneralProtection)
                        }
                        Ok(_) => {}
                    }
                    match leaf {
                        SyscallLeaf::Eexit => {
                            if let Err(e) = self.monitor.eexit(&mut self.vcpu, id, tcs_gva) {
                                return MonitorReturn::Leaf(Err(e));
                            }
                            let ocall = self.param_ocall_flag(id);
                            return MonitorReturn::Eexit { ocall };
                        }
                        SyscallLeaf::Ereport => {
                            if let Err(e) = self.serve_ereport(id) {
                                return MonitorReturn::Leaf(Err(e));
                            }
                            self.ledger.record(EventKind::SysretExit);
                        }
                        SyscallLeaf::Egetkey => {
                            if let Err(e) = self.serve_egetkey(id, args[0]) {
                                return MonitorReturn::Leaf(Err(e));
                            }
                            self.ledger.record(EventKind::SysretExit);
                        }
                        SyscallLeaf::Ioctl(_) => unreachable!("gated above"),
                    }
                }
            }
        }
    }

    /// Fault during enclave execution: trap to the monitor handler (no
    /// VMPL switch), emulate AEX.
    fn enclave_fault(&mut self, id: EnclaveId, tcs_gva: Gva, exception: Exception) -> MonitorReturn {
        match self.deliver_exception(exception) {
            Ok(HandlerRoute::Monitor) => {}
            Ok(HandlerRoute::Guest) => unreachable!("enclave faults trap to the monitor"),
            Err(e) => return MonitorReturn::Leaf(Err(LeafError::StateError(match e {
                MachineError::DoubleFault(_) => "double fault in monitor handler",
                _ => "fault delivery failed",
            }))),
        }
        self.monitor.in_fault_handler = true;
        self.ledger.record(EventKind::Aex);
        let res = self.monitor.aex(&mut self.mem, &mut self.vcpu, id, tcs_gva, exception);
        self.monitor.in_fault_handler = false;
        match res {
            Ok(()) => MonitorReturn::Aex { enclave: id, tcs: tcs_gva, exception },
            Err(e) => MonitorReturn::Leaf(Err(e)),
        }
    }

    fn param_buffer_gpa(&self, id: EnclaveId) -> Option<Gpa> {
        self.monitor.enclave(id).ok().and_then(|e| e.param_buffer).map(|p| p.gpa)
    }

    fn param_ocall_flag(&self, id: EnclaveId) -> bool {
        let Some(gpa) = self.param_buffer_gpa(id) else { return false };
        match self.mem.read_gpa(gpa + param::OCALL_FLAG, 8, 0) {
            Ok(bytes) => u64::from_le_bytes(bytes.try_into().expect("8 bytes")) != 0,
            Err(_) => false,
        }
    }

    /// EREPORT syscall service: report data comes from the parameter
    /// buffer, the unsigned body goes back there, and the signed bundle is
    /// assembled with the boot-time AIK binding report.
    fn serve_ereport(&mut self, id: EnclaveId) -> Result<(), LeafError> {
        let gpa = self.param_buffer_gpa(id).ok_or(LeafError::NoParamBuffer)?;
        let data = self
            .mem
            .read_gpa(gpa + param::REPORT_DATA, 64, 0)
            .map_err(|_| LeafError::NoParamBuffer)?;
        let report_data: [u8; 64] = data.try_into().expect("64 bytes");
        let body = self.monitor.ereport(id, report_data)?;
        let bundle = self.monitor.build_bundle(body.clone())?;
        let mut out = Vec::with_capacity(32 + 8 + 64);
        out.extend_from_slice(&body.mrenclave);
        out.extend_from_slice(&body.attributes.to_le_bytes());
        out.extend_from_slice(&body.report_data);
        self.mem
            .write_gpa(gpa + param::OUT, &out, 0)
            .map_err(|_| LeafError::NoParamBuffer)?;
        self.last_bundle = Some(bundle);
        Ok(())
    }

    /// EGETKEY syscall service: key id from the parameter buffer, key name
    /// from r0, derived key delivered in r0..r3 (enclave-private).
    fn serve_egetkey(&mut self, id: EnclaveId, key_name_arg: u64) -> Result<(), LeafError> {
        let gpa = self.param_buffer_gpa(id).ok_or(LeafError::NoParamBuffer)?;
        let raw = self
            .mem
            .read_gpa(gpa + param::KEY_ID, 16, 0)
            .map_err(|_| LeafError::NoParamBuffer)?;
        let key_id: [u8; 16] = raw.try_into().expect("16 bytes");
        let key_name = if key_name_arg == 2 {
            crate::attest::KeyName::ReportKey
        } else {
            crate::attest::KeyName::SealKey
        };
        let key =
            self.monitor.egetkey(id, KeyRequest { key_name, policy: KeyPolicy::MrEnclave, key_id })?;
        let vmsa = self.vcpu.vmsa_mut(0).expect("vmpl0");
        for (i, chunk) in key.chunks(8).enumerate() {
            vmsa.gprs[i] = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Ok(())
    }

    // ---- App execution ----

    pub fn set_app_program(&mut self, program: Program) {
        self.guest.app_program = Some(program);
    }

    /// Run the App's bytecode at VMPL1 user mode. IOCTL syscalls are served
    /// by the driver (which switches VMPLs as needed); other syscalls and
    /// faults terminate the App via the guest OS handler.
    pub fn run_app(&mut self) -> Result<AppRunOutcome, MachineError> {
        let program = self
            .guest
            .app_program
            .clone()
            .ok_or(MachineError::NoProgram(EnclaveId(0)))?;
        self.guest.schedule_app(&mut self.vcpu);
        self.vcpu.vmsa_mut(1).expect("vmpl1 VMSA").rip = program.entry as u64;
        let mut steps = 0u64;
        loop {
            if steps >= self.cfg.app_step_limit {
                return Err(MachineError::AppStepLimit);
            }
            steps += 1;
            let outcome = {
                let vmsa = self.vcpu.vmsa_mut(1).expect("vmpl1 VMSA");
                let mut regs = vmsa.gprs;
                let mut rip = vmsa.rip;
                let mut bus = MemBus {
                    mem: &mut self.mem,
                    pt: self.guest.app_pt,
                    mode: CpuMode::User,
                    vmpl: 1,
                };
                let outcome = evm::step(&program, &mut regs, &mut rip, &mut bus);
                let vmsa = self.vcpu.vmsa_mut(1).expect("vmpl1 VMSA");
                vmsa.gprs = regs;
                vmsa.rip = rip;
                outcome
            };
            match outcome {
                StepOutcome::Continue => {}
                StepOutcome::Halted => return Ok(AppRunOutcome::Halted),
                StepOutcome::Trap(e) => {
                    self.deliver_exception(e)?;
                    return Ok(AppRunOutcome::Fault(e));
                }
                StepOutcome::SyscallRequest(SyscallLeaf::Ioctl(leaf), args) => {
                    let result = match DriverRequest::from_bytecode(leaf, &args) {
                        Some(req) => self.ioctl(req),
                        None => Err(MachineError::Monitor(LeafError::StateError(
                            "leaf not expressible from bytecode",
                        ))),
                    };
                    // Driver returns status in r0, value in r1.
                    let (status, value) = match &result {
                        Ok(LeafOutput::Created(id)) => (0, id.0 as u64),
                        Ok(LeafOutput::EcallFinished { ocall_pending }) => {
                            (0, *ocall_pending as u64)
                        }
                        Ok(LeafOutput::EcallAbandoned { .. }) => (2, 0),
                        Ok(_) => (0, 0),
                        Err(_) => (1, 0),
                    };
                    let vmsa = self.vcpu.vmsa_mut(1).expect("vmpl1 VMSA");
                    vmsa.gprs[0] = status;
                    vmsa.gprs[1] = value;
                    match result {
                        Err(MachineError::Monitor(_)) | Ok(_) => {}
                        // Infrastructure failures abort the run.
                        Err(e) => return Err(e),
                    }
                }
                StepOutcome::SyscallRequest(_, _) => {
                    // Enclave-internal leaves from the App: the guest OS
                    // kills the process.
                    let exc = Exception::GeneralProtection;
                    self.deliver_exception(exc)?;
                    return Ok(AppRunOutcome::Fault(exc));
                }
            }
        }
    }

    // ---- attestation convenience ----

    /// Perform the attestation ECALL: write report data into the parameter
    /// buffer, enter the enclave with the attest function selector, and
    /// collect the bundle produced by its EREPORT syscall.
    pub const ATTEST_FUNCTION_ID: u64 = 0xA77;

    pub fn attest_ecall(
        &mut self,
        id: EnclaveId,
        tcs_gva: Gva,
        report_data: [u8; 64],
    ) -> Result<NestedBundle, MachineError> {
        let gpa = self.param_buffer_gpa(id).ok_or(LeafError::NoParamBuffer)?;
        self.mem
            .write_gpa(gpa + param::FUNCTION_ID, &Self::ATTEST_FUNCTION_ID.to_le_bytes(), 1)
            .map_err(|_| MachineError::Monitor(LeafError::NoParamBuffer))?;
        self.mem
            .write_gpa(gpa + param::REPORT_DATA, &report_data, 1)
            .map_err(|_| MachineError::Monitor(LeafError::NoParamBuffer))?;
        self.last_bundle = None;
        let out = self.ioctl(DriverRequest::eenter(id, tcs_gva))?;
        match out {
            LeafOutput::EcallFinished { .. } => {
                self.last_bundle.clone().ok_or(MachineError::NoBundle)
            }
            _ => Err(MachineError::NoBundle),
        }
    }

    /// Verifier-side trust anchors for this machine.
    pub fn trust_anchors(&self, mrenclave: [u8; 32]) -> crate::attest::TrustAnchors {
        crate::attest::TrustAnchors {
            vcek_public: self.amd_sp.vcek_public(),
            launch_digest: self.amd_sp.launch_digest(),
            mrenclave,
        }
    }

    /// Digest over everything the guest can observe: VMPL1 page contents
    /// (parameter buffers excluded), guest page tables, and the VMPL1 VMSA.
    /// Used to check that enclave execution has no side channel into guest
    /// state other than the parameter buffer.
    pub fn guest_visible_digest(&self, exclude_param_of: Option<EnclaveId>) -> [u8; 32] {
        use sha2::Sha256;
        let mut hasher = Sha256::new();
        let excluded: Vec<u64> = exclude_param_of
            .and_then(|id| self.monitor.enclave(id).ok())
            .and_then(|e| e.param_buffer)
            .map(|p| {
                (0..p.pages)
                    .map(|k| crate::types::page_of(p.gpa) + k)
                    .collect()
            })
            .unwrap_or_default();
        // Untouched and all-zero pages read identically, so the digest
        // covers only backed pages with nonzero content; the identity
        // mapping makes the backed page index the gpa page.
        for (page, contents) in self.mem.backed_pages() {
            if !self.layout.vmpl1.contains_page(page) || excluded.contains(&page) {
                continue;
            }
            if contents.iter().all(|b| *b == 0) {
                continue;
            }
            hasher.update(page.to_le_bytes());
            hasher.update(contents);
        }
        for pt_id in [self.guest.kernel_pt, self.guest.app_pt] {
            if let Ok(table) = self.mem.table(pt_id) {
                for (gva_page, entry) in table.mappings() {
                    hasher.update(gva_page.to_le_bytes());
                    hasher.update(entry.gpa.to_le_bytes());
                    hasher.update([
                        entry.user as u8,
                        entry.writable as u8,
                        entry.executable as u8,
                    ]);
                }
            }
        }
        if let Some(vmsa) = self.vcpu.vmsa(1) {
            for g in vmsa.gprs {
                hasher.update(g.to_le_bytes());
            }
            hasher.update(vmsa.rip.to_le_bytes());
            hasher.update(vmsa.rsp.to_le_bytes());
        }
        hasher.finalize().into()
    }

    /// Map a fresh guest page into the App's address space.
    pub fn map_app_page(&mut self, gva: Gva, writable: bool) -> Result<Gpa, MachineError> {
        let gpa = self.alloc_guest_page()?;
        self.mem.table_mut(self.guest.app_pt)?.map_page(
            gva,
            PtEntry { gpa, user: true, writable, executable: false, immutable: false },
        )?;
        Ok(gpa)
    }
}

impl core::fmt::Debug for Machine {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Machine")
            .field("total_pages", &self.cfg.total_pages)
            .field("current_vmpl", &self.vcpu.current_vmpl())
            .finish()
    }
}
