// SPDX-License-Identifier: Apache-2.0

//! The VMPL0 security monitor: SGX-style leaf functions over an EPC pool
//! carved out of monitor-private memory, the control structures behind
//! them, the measurement log that becomes MRENCLAVE, fault/AEX handling,
//! and the syscall dispatcher the enclave enters through the trampoline.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attest::{self, Aik, AmdSp, EnclaveReportBody, KeyName, SnpReport};
use crate::mem::{MemError, MemLayout, Memory, PtEntry, PtId};
use crate::types::{page_of, ContextTag, CpuMode, EnclaveId, Gpa, Gva, PAGE_SIZE};
use crate::vcpu::{Exception, Vcpu};

/// Fixed guest-virtual address of the trampoline page, mapped
/// kernel-executable into the monitor's and every enclave's page table.
/// LSTAR points here; it is the only legal syscall entry.
pub const TRAMPOLINE_GVA: Gva = 0xffff_ff00_0000;

/// Instruction budget granted per enclave entry before a Timer exception
/// preempts it. Configurable per scenario.
pub const DEFAULT_STEP_BUDGET: u64 = 10_000;

pub const MEASUREMENT_RECORD_LEN: usize = 64;
pub const EEXTEND_CHUNK: u64 = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LeafError {
    #[error("EPC exhausted")]
    EpcExhausted,
    #[error("alignment error: {0}")]
    AlignmentError(String),
    #[error("enclave in wrong lifecycle state: {0}")]
    StateError(&'static str),
    #[error("address out of enclave range: {0:#x}")]
    RangeError(Gva),
    #[error("gva {0:#x} not backed by an added page")]
    UnmappedError(Gva),
    #[error("no TCS page added")]
    NoTcs,
    #[error("parameter buffer not mapped")]
    NoParamBuffer,
    #[error("TCS is busy")]
    TcsBusy,
    #[error("no free SSA frame")]
    SsaOverflow,
    #[error("no pending SSA frame to resume from")]
    NoPendingSsa,
    #[error("a logical thread is still inside the enclave")]
    ThreadsActive,
    #[error("dispatch refused: caller is not an enclave")]
    BadEntry,
    #[error("entry address is not the trampoline")]
    GeneralProtection,
    #[error("leaf not routable for enclave callers")]
    RefusedLeaf,
    #[error("unknown enclave")]
    NoSuchEnclave,
    #[error("unknown TCS at {0:#x}")]
    NoSuchTcs(Gva),
    #[error(transparent)]
    Mem(#[from] MemError),
}

// ---- measurement log ----

pub const TAG_ECREATE: [u8; 8] = *b"ECREATE\0";
pub const TAG_EADD: [u8; 8] = *b"EADD\0\0\0\0";
pub const TAG_EEXTEND: [u8; 8] = *b"EEXTEND\0";

/// Ordered 64-byte tagged records whose SHA-256 is the enclave
/// measurement. Append-only; frozen at EINIT.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MeasurementLog {
    records: Vec<[u8; MEASUREMENT_RECORD_LEN]>,
    frozen: bool,
}

fn tagged_record(tag: [u8; 8], a: u64, b: u64) -> [u8; MEASUREMENT_RECORD_LEN] {
    let mut rec = [0u8; MEASUREMENT_RECORD_LEN];
    rec[..8].copy_from_slice(&tag);
    rec[8..16].copy_from_slice(&a.to_le_bytes());
    rec[16..24].copy_from_slice(&b.to_le_bytes());
    rec
}

impl MeasurementLog {
    fn push(&mut self, rec: [u8; MEASUREMENT_RECORD_LEN]) {
        assert!(!self.frozen, "measurement log is frozen after EINIT");
        self.records.push(rec);
    }

    pub fn record_ecreate(&mut self, ssa_frame_size: u64, size_bytes: u64) {
        self.push(tagged_record(TAG_ECREATE, ssa_frame_size, size_bytes));
    }

    pub fn record_eadd(&mut self, enclave_offset: u64, secflags: u64) {
        self.push(tagged_record(TAG_EADD, enclave_offset, secflags));
    }

    /// One EEXTEND header record plus the 256 bytes as four data records.
    pub fn record_eextend(&mut self, enclave_offset: u64, chunk: &[u8]) {
        assert_eq!(chunk.len() as u64, EEXTEND_CHUNK);
        self.push(tagged_record(TAG_EEXTEND, enclave_offset, 0));
        for part in chunk.chunks(MEASUREMENT_RECORD_LEN) {
            let mut rec = [0u8; MEASUREMENT_RECORD_LEN];
            rec.copy_from_slice(part);
            self.push(rec);
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[[u8; MEASUREMENT_RECORD_LEN]] {
        &self.records
    }

    /// Running SHA-256 over the concatenated records.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for rec in &self.records {
            hasher.update(rec);
        }
        hasher.finalize().into()
    }
}

// ---- control structures ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageType {
    Secs,
    Tcs,
    Reg,
}

impl PageType {
    /// Code folded into the EADD measurement record.
    pub fn code(&self) -> u64 {
        match self {
            PageType::Secs => 0,
            PageType::Tcs => 1,
            PageType::Reg => 2,
        }
    }
}

/// R/W/X permissions of an EPC page as recorded in the EPCM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PagePerms {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl PagePerms {
    pub const RW: PagePerms = PagePerms { read: true, write: true, execute: false };

    pub fn bits(&self) -> u64 {
        (self.read as u64) | (self.write as u64) << 1 | (self.execute as u64) << 2
    }
}

/// Measurement flags of an added page: permission bits plus the page type.
pub fn secinfo_flags(page_type: PageType, perms: PagePerms) -> u64 {
    perms.bits() | (page_type.code() << 8)
}

/// EPCM row: ownership and attributes of one EPC page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpcmEntry {
    pub gpa: Gpa,
    pub owner: EnclaveId,
    pub page_type: PageType,
    pub perms: PagePerms,
    /// Location of the page inside the enclave; `None` for the SECS page,
    /// which has no enclave mapping.
    pub enclave_offset: Option<Gva>,
    pub valid: bool,
}

/// Thread control structure. The page content supplies the static fields;
/// the monitor tracks the runtime ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tcs {
    pub gva: Gva,
    /// Entry point, an instruction index into the enclave's program.
    pub entry_point: u64,
    /// Base of the SSA stack inside the enclave.
    pub ssa_base: Gva,
    /// Number of SSA frames.
    pub nssa: u64,
    pub current_ssa_index: u64,
    /// Asynchronous exit pointer, filled at entry.
    pub aep: Gva,
    pub busy: bool,
}

/// Architectural state stashed in an SSA frame on AEX.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsaFrame {
    pub gprs: [u64; 16],
    pub rip: u64,
    pub rsp: u64,
    pub exit_code: u64,
}

pub const SSA_FRAME_BYTES: u64 = 16 * 8 + 8 + 8 + 8;

impl SsaFrame {
    pub fn to_bytes(&self) -> [u8; SSA_FRAME_BYTES as usize] {
        let mut out = [0u8; SSA_FRAME_BYTES as usize];
        for (i, g) in self.gprs.iter().enumerate() {
            out[i * 8..i * 8 + 8].copy_from_slice(&g.to_le_bytes());
        }
        out[128..136].copy_from_slice(&self.rip.to_le_bytes());
        out[136..144].copy_from_slice(&self.rsp.to_le_bytes());
        out[144..152].copy_from_slice(&self.exit_code.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> SsaFrame {
        let mut gprs = [0u64; 16];
        for (i, g) in gprs.iter_mut().enumerate() {
            *g = u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        }
        SsaFrame {
            gprs,
            rip: u64::from_le_bytes(bytes[128..136].try_into().unwrap()),
            rsp: u64::from_le_bytes(bytes[136..144].try_into().unwrap()),
            exit_code: u64::from_le_bytes(bytes[144..152].try_into().unwrap()),
        }
    }
}

/// TCS page layout: entry point index, SSA base gva, frame count.
pub fn encode_tcs_page(entry_point: u64, ssa_base: Gva, nssa: u64) -> [u8; PAGE_SIZE as usize] {
    let mut page = [0u8; PAGE_SIZE as usize];
    page[0..8].copy_from_slice(&entry_point.to_le_bytes());
    page[8..16].copy_from_slice(&ssa_base.to_le_bytes());
    page[16..24].copy_from_slice(&nssa.to_le_bytes());
    page
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnclaveState {
    Uninitialized,
    Initialized,
    Removed,
}

/// Shared parameter buffer window of an enclave, fixed at creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBuffer {
    pub gva: Gva,
    pub gpa: Gpa,
    pub pages: u64,
}

/// Enclave control structure, held in monitor-private memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Secs {
    pub enclave_id: EnclaveId,
    pub base_gva: Gva,
    pub size_bytes: u64,
    pub ssa_frame_size: u64,
    pub attributes: u64,
    pub state: EnclaveState,
    pub mrenclave: Option<[u8; 32]>,
    pub measurement_log: MeasurementLog,
    pub page_table: PtId,
    pub secs_page: Gpa,
    pub tcs: BTreeMap<Gva, Tcs>,
    pub param_buffer: Option<ParamBuffer>,
}

impl Secs {
    pub fn contains_gva(&self, gva: Gva) -> bool {
        gva >= self.base_gva && gva < self.base_gva + self.size_bytes
    }
}

/// Key derivation request served by EGETKEY.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyRequest {
    pub key_name: KeyName,
    pub policy: KeyPolicy,
    pub key_id: [u8; 16],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyPolicy {
    MrEnclave,
}

/// The security monitor.
#[derive(Debug, Clone)]
pub struct Monitor {
    enclaves: BTreeMap<EnclaveId, Secs>,
    epcm: BTreeMap<u64, EpcmEntry>,
    free_epc: BTreeSet<u64>,
    epc_total: u64,
    next_enclave: u32,
    pub page_table: PtId,
    pub trampoline_gpa: Gpa,
    aik: Option<Aik>,
    binding_report: Option<SnpReport>,
    guest_key: Option<[u8; 32]>,
    /// Set while the fault handler runs; a fault inside it double-faults.
    pub in_fault_handler: bool,
}

impl Monitor {
    /// Set up the monitor over a carved layout: builds its page table, maps
    /// the trampoline (last page of the monitor sub-range), and registers
    /// the EPC sub-range as the free pool.
    pub fn new(mem: &mut Memory, layout: &MemLayout) -> Monitor {
        let page_table = mem.create_table(ContextTag::MonitorKernel);
        let trampoline_page = layout.monitor.end_page() - 1;
        let trampoline_gpa = trampoline_page * PAGE_SIZE;
        mem.table_mut(page_table)
            .expect("fresh table")
            .map_page(
                TRAMPOLINE_GVA,
                PtEntry {
                    gpa: trampoline_gpa,
                    user: false,
                    writable: false,
                    executable: true,
                    immutable: false,
                },
            )
            .expect("trampoline mapping");
        Monitor {
            enclaves: BTreeMap::new(),
            epcm: BTreeMap::new(),
            free_epc: layout.epc.iter_pages().collect(),
            epc_total: layout.epc.pages,
            next_enclave: 1,
            page_table,
            trampoline_gpa,
            aik: None,
            binding_report: None,
            guest_key: None,
            in_fault_handler: false,
        }
    }

    /// Boot-time attestation setup: generate the AIK, obtain the AIK
    /// binding report over the VMPL0 channel, and fetch the VMPL0 guest key
    /// for sealing.
    pub fn boot_attestation(
        &mut self,
        sp: &mut AmdSp,
        rng: &mut impl rand::RngCore,
    ) -> Result<(), attest::AttestError> {
        let aik = Aik::generate(rng);
        let binding = sp.snp_report_req(
            0,
            CpuMode::Kernel,
            0,
            attest::aik_binding_report_data(&aik),
        )?;
        let guest_key = sp.msg_key_req(0, CpuMode::Kernel, 0)?;
        self.aik = Some(aik);
        self.binding_report = Some(binding);
        self.guest_key = Some(guest_key);
        Ok(())
    }

    pub fn aik(&self) -> Option<&Aik> {
        self.aik.as_ref()
    }

    pub fn binding_report(&self) -> Option<&SnpReport> {
        self.binding_report.as_ref()
    }

    pub fn guest_key(&self) -> Option<[u8; 32]> {
        self.guest_key
    }

    #[cfg(test)]
    fn set_guest_key_for_tests(&mut self, key: [u8; 32]) {
        self.guest_key = Some(key);
    }

    pub fn free_epc_pages(&self) -> u64 {
        self.free_epc.len() as u64
    }

    pub fn epc_total_pages(&self) -> u64 {
        self.epc_total
    }

    pub fn enclave(&self, id: EnclaveId) -> Result<&Secs, LeafError> {
        self.enclaves.get(&id).ok_or(LeafError::NoSuchEnclave)
    }

    fn enclave_mut(&mut self, id: EnclaveId) -> Result<&mut Secs, LeafError> {
        self.enclaves.get_mut(&id).ok_or(LeafError::NoSuchEnclave)
    }

    pub fn enclaves(&self) -> impl Iterator<Item = (&EnclaveId, &Secs)> {
        self.enclaves.iter()
    }

    pub fn epcm_entries(&self) -> impl Iterator<Item = &EpcmEntry> {
        self.epcm.values()
    }

    /// EPCM row for a guest-physical address, if it is a valid EPC page.
    pub fn epcm_entry(&self, gpa: Gpa) -> Option<&EpcmEntry> {
        self.epcm.get(&page_of(gpa))
    }

    /// Enclave owning a page table, if any.
    pub fn enclave_by_table(&self, pt: PtId) -> Option<EnclaveId> {
        self.enclaves.values().find(|e| e.page_table == pt).map(|e| e.enclave_id)
    }

    fn alloc_epc(&mut self) -> Result<Gpa, LeafError> {
        let page = self.free_epc.pop_first().ok_or(LeafError::EpcExhausted)?;
        Ok(page * PAGE_SIZE)
    }

    // ---- lifecycle leaves ----

    /// ECREATE: allocate the SECS, build the enclave page table containing
    /// only the trampoline, and seed the measurement log.
    pub fn ecreate(
        &mut self,
        mem: &mut Memory,
        base_gva: Gva,
        size_bytes: u64,
        ssa_frame_size: u64,
        attributes: u64,
    ) -> Result<EnclaveId, LeafError> {
        if size_bytes < PAGE_SIZE || !size_bytes.is_power_of_two() {
            return Err(LeafError::AlignmentError(format!(
                "enclave size {size_bytes:#x} is not a power of two of at least one page"
            )));
        }
        if base_gva % size_bytes != 0 {
            return Err(LeafError::AlignmentError(format!(
                "base {base_gva:#x} not aligned to size {size_bytes:#x}"
            )));
        }
        if ssa_frame_size == 0 {
            return Err(LeafError::AlignmentError("ssa_frame_size must be nonzero".into()));
        }
        let secs_page = self.alloc_epc()?;
        let id = EnclaveId(self.next_enclave);
        self.next_enclave += 1;

        let page_table = mem.create_table(ContextTag::EnclaveUser(id));
        mem.table_mut(page_table)?.map_page(
            TRAMPOLINE_GVA,
            PtEntry {
                gpa: self.trampoline_gpa,
                user: false,
                writable: false,
                executable: true,
                immutable: false,
            },
        )?;

        self.epcm.insert(
            page_of(secs_page),
            EpcmEntry {
                gpa: secs_page,
                owner: id,
                page_type: PageType::Secs,
                perms: PagePerms::RW,
                enclave_offset: None,
                valid: true,
            },
        );

        let mut log = MeasurementLog::default();
        log.record_ecreate(ssa_frame_size, size_bytes);
        self.enclaves.insert(
            id,
            Secs {
                enclave_id: id,
                base_gva,
                size_bytes,
                ssa_frame_size,
                attributes,
                state: EnclaveState::Uninitialized,
                mrenclave: None,
                measurement_log: log,
                page_table,
                secs_page,
                tcs: BTreeMap::new(),
                param_buffer: None,
            },
        );
        Ok(id)
    }

    /// Fix the shared parameter buffer mapping for an enclave. Once per
    /// enclave, before EINIT.
    pub fn map_param_buffer(
        &mut self,
        mem: &mut Memory,
        id: EnclaveId,
        app_pt: PtId,
        gva: Gva,
        gpa: Gpa,
        pages: u64,
    ) -> Result<(), LeafError> {
        let enclave = self.enclave(id)?;
        if enclave.state != EnclaveState::Uninitialized {
            return Err(LeafError::StateError("parameter buffer must be mapped before EINIT"));
        }
        if enclave.param_buffer.is_some() {
            return Err(LeafError::Mem(MemError::AlreadyMapped));
        }
        let enclave_pt = enclave.page_table;
        mem.map_shared_parameter_buffer(enclave_pt, app_pt, gva, gpa, pages)?;
        self.enclave_mut(id)?.param_buffer = Some(ParamBuffer { gva, gpa, pages });
        Ok(())
    }

    /// EADD: copy a source page from guest memory into a fresh EPC page,
    /// record it in the EPCM, map it into the enclave, and measure the add
    /// (metadata only; contents are measured by EEXTEND).
    pub fn eadd(
        &mut self,
        mem: &mut Memory,
        id: EnclaveId,
        src_gpa: Gpa,
        dest_gva: Gva,
        page_type: PageType,
        perms: PagePerms,
    ) -> Result<(), LeafError> {
        let enclave = self.enclave(id)?;
        if enclave.state != EnclaveState::Uninitialized {
            return Err(LeafError::StateError("EADD requires an uninitialized enclave"));
        }
        if page_type == PageType::Secs {
            return Err(LeafError::StateError("SECS pages are created by ECREATE"));
        }
        if dest_gva % PAGE_SIZE != 0 {
            return Err(LeafError::AlignmentError(format!("dest {dest_gva:#x} not page aligned")));
        }
        if !enclave.contains_gva(dest_gva) {
            return Err(LeafError::RangeError(dest_gva));
        }
        let pt = enclave.page_table;
        if mem.table(pt)?.lookup(page_of(dest_gva)).is_some() {
            return Err(LeafError::RangeError(dest_gva));
        }
        let base_gva = enclave.base_gva;

        // The source page lives in VMPL1 memory; the monitor reads it
        // through its privileged view.
        let contents = mem
            .read_gpa(src_gpa, PAGE_SIZE, 0)
            .map_err(|_| LeafError::RangeError(src_gpa))?;

        let epc_gpa = self.alloc_epc()?;
        let spa = mem.spa_for_gpa(epc_gpa).expect("EPC page assigned");
        mem.write_phys(spa, &contents);

        if page_type == PageType::Tcs {
            let entry_point = u64::from_le_bytes(contents[0..8].try_into().unwrap());
            let ssa_base = u64::from_le_bytes(contents[8..16].try_into().unwrap());
            let nssa_raw = u64::from_le_bytes(contents[16..24].try_into().unwrap());
            let nssa = if nssa_raw == 0 { 1 } else { nssa_raw };
            if ssa_base % PAGE_SIZE != 0 || !self.enclave(id)?.contains_gva(ssa_base) {
                // Roll the allocation back; the TCS is unusable.
                self.free_epc.insert(page_of(epc_gpa));
                return Err(LeafError::RangeError(ssa_base));
            }
            self.enclave_mut(id)?.tcs.insert(
                dest_gva,
                Tcs {
                    gva: dest_gva,
                    entry_point,
                    ssa_base,
                    nssa,
                    current_ssa_index: 0,
                    aep: 0,
                    busy: false,
                },
            );
        }

        self.epcm.insert(
            page_of(epc_gpa),
            EpcmEntry {
                gpa: epc_gpa,
                owner: id,
                page_type,
                perms,
                enclave_offset: Some(dest_gva),
                valid: true,
            },
        );
        mem.table_mut(pt)?.map_page(
            dest_gva,
            PtEntry {
                gpa: epc_gpa,
                user: true,
                writable: perms.write,
                executable: perms.execute,
                immutable: false,
            },
        )?;
        self.enclave_mut(id)?
            .measurement_log
            .record_eadd(dest_gva - base_gva, secinfo_flags(page_type, perms));
        Ok(())
    }

    /// EEXTEND: measure one 256-byte chunk of an added page.
    pub fn eextend(&mut self, mem: &Memory, id: EnclaveId, gva: Gva) -> Result<(), LeafError> {
        let enclave = self.enclave(id)?;
        if enclave.state != EnclaveState::Uninitialized {
            return Err(LeafError::StateError("EEXTEND requires an uninitialized enclave"));
        }
        if gva % EEXTEND_CHUNK != 0 {
            return Err(LeafError::AlignmentError(format!("{gva:#x} not 256-byte aligned")));
        }
        let entry = mem
            .table(enclave.page_table)?
            .lookup(page_of(gva))
            .copied()
            .ok_or(LeafError::UnmappedError(gva))?;
        let owned = self
            .epcm
            .get(&page_of(entry.gpa))
            .map(|e| e.owner == id)
            .unwrap_or(false);
        if !owned {
            return Err(LeafError::UnmappedError(gva));
        }
        let spa = mem.spa_for_gpa(entry.gpa).expect("EPC page assigned");
        let mut chunk = [0u8; EEXTEND_CHUNK as usize];
        mem.read_phys(spa + (gva % PAGE_SIZE), &mut chunk);
        let offset = gva - enclave.base_gva;
        self.enclave_mut(id)?.measurement_log.record_eextend(offset, &chunk);
        Ok(())
    }

    /// EINIT: finalize the measurement and mark the enclave runnable.
    pub fn einit(&mut self, id: EnclaveId) -> Result<[u8; 32], LeafError> {
        let enclave = self.enclave(id)?;
        if enclave.state != EnclaveState::Uninitialized {
            return Err(LeafError::StateError("EINIT requires an uninitialized enclave"));
        }
        if enclave.tcs.is_empty() {
            return Err(LeafError::NoTcs);
        }
        if enclave.param_buffer.is_none() {
            return Err(LeafError::NoParamBuffer);
        }
        let enclave = self.enclave_mut(id)?;
        enclave.measurement_log.freeze();
        let mrenclave = enclave.measurement_log.digest();
        enclave.mrenclave = Some(mrenclave);
        enclave.state = EnclaveState::Initialized;
        Ok(mrenclave)
    }

    /// EENTER emulation: flip the VMPL0 VMSA into the enclave's user
    /// context at the TCS entry point. The caller (driver request loop)
    /// starts bytecode execution afterwards.
    pub fn eenter(
        &mut self,
        vcpu: &mut Vcpu,
        id: EnclaveId,
        tcs_gva: Gva,
        aep_gva: Gva,
    ) -> Result<(), LeafError> {
        let enclave = self.enclave(id)?;
        if enclave.state != EnclaveState::Initialized {
            return Err(LeafError::StateError("EENTER requires an initialized enclave"));
        }
        let pt = enclave.page_table;
        let tcs = self
            .enclave_mut(id)?
            .tcs
            .get_mut(&tcs_gva)
            .ok_or(LeafError::NoSuchTcs(tcs_gva))?;
        if tcs.busy {
            return Err(LeafError::TcsBusy);
        }
        tcs.busy = true;
        tcs.aep = aep_gva;
        let entry_point = tcs.entry_point;
        let vmsa = vcpu.vmsa_mut(0).expect("vmpl0 VMSA");
        vmsa.cr3 = pt;
        vmsa.mode = CpuMode::User;
        vmsa.rip = entry_point;
        vmsa.rsp = 0;
        Ok(())
    }

    /// EEXIT emulation: the busy flag clears before the monitor requests
    /// the switch back to VMPL1.
    pub fn eexit(&mut self, vcpu: &mut Vcpu, id: EnclaveId, tcs_gva: Gva) -> Result<(), LeafError> {
        let monitor_pt = self.page_table;
        let tcs = self
            .enclave_mut(id)?
            .tcs
            .get_mut(&tcs_gva)
            .ok_or(LeafError::NoSuchTcs(tcs_gva))?;
        if !tcs.busy {
            return Err(LeafError::StateError("EEXIT with no thread inside"));
        }
        tcs.busy = false;
        let vmsa = vcpu.vmsa_mut(0).expect("vmpl0 VMSA");
        vmsa.mode = CpuMode::Kernel;
        vmsa.cr3 = monitor_pt;
        Ok(())
    }

    /// AEX emulation: save the enclave context into the next SSA frame,
    /// install synthetic state in the VMPL0 VMSA, and hand control to the
    /// monitor kernel (which then switches to the driver).
    pub fn aex(
        &mut self,
        mem: &mut Memory,
        vcpu: &mut Vcpu,
        id: EnclaveId,
        tcs_gva: Gva,
        exception: Exception,
    ) -> Result<(), LeafError> {
        let enclave = self.enclave(id)?;
        let pt = enclave.page_table;
        let ssa_frame_pages = enclave.ssa_frame_size;
        let tcs =
            self.enclave(id)?.tcs.get(&tcs_gva).ok_or(LeafError::NoSuchTcs(tcs_gva))?.clone();
        if tcs.current_ssa_index >= tcs.nssa {
            return Err(LeafError::SsaOverflow);
        }

        let vmsa = vcpu.vmsa_mut(0).expect("vmpl0 VMSA");
        let frame = SsaFrame {
            gprs: vmsa.gprs,
            rip: vmsa.rip,
            rsp: vmsa.rsp,
            exit_code: exception.code(),
        };
        let frame_gva = tcs.ssa_base + tcs.current_ssa_index * ssa_frame_pages * PAGE_SIZE;
        self.write_enclave_bytes(mem, pt, frame_gva, &frame.to_bytes())?;

        // Synthetic state: the enclave context is hidden from everything
        // that runs next.
        vmsa.gprs = [0; 16];
        vmsa.rip = 0;
        vmsa.rsp = 0;
        vmsa.mode = CpuMode::Kernel;
        vmsa.cr3 = self.page_table;

        self.enclave_mut(id)?
            .tcs
            .get_mut(&tcs_gva)
            .expect("tcs exists")
            .current_ssa_index += 1;
        Ok(())
    }

    /// ERESUME emulation: restore the context saved by the latest AEX.
    pub fn eresume(
        &mut self,
        mem: &Memory,
        vcpu: &mut Vcpu,
        id: EnclaveId,
        tcs_gva: Gva,
    ) -> Result<(), LeafError> {
        let enclave = self.enclave(id)?;
        if enclave.state != EnclaveState::Initialized {
            return Err(LeafError::StateError("ERESUME requires an initialized enclave"));
        }
        let pt = enclave.page_table;
        let ssa_frame_pages = enclave.ssa_frame_size;
        let tcs =
            self.enclave(id)?.tcs.get(&tcs_gva).ok_or(LeafError::NoSuchTcs(tcs_gva))?.clone();
        if tcs.current_ssa_index == 0 {
            return Err(LeafError::NoPendingSsa);
        }
        let index = tcs.current_ssa_index - 1;
        let frame_gva = tcs.ssa_base + index * ssa_frame_pages * PAGE_SIZE;
        let bytes = self.read_enclave_bytes(mem, pt, frame_gva, SSA_FRAME_BYTES)?;
        let frame = SsaFrame::from_bytes(&bytes);

        let vmsa = vcpu.vmsa_mut(0).expect("vmpl0 VMSA");
        vmsa.gprs = frame.gprs;
        vmsa.rip = frame.rip;
        vmsa.rsp = frame.rsp;
        vmsa.mode = CpuMode::User;
        vmsa.cr3 = pt;

        self.enclave_mut(id)?
            .tcs
            .get_mut(&tcs_gva)
            .expect("tcs exists")
            .current_ssa_index = index;
        Ok(())
    }

    /// EREMOVE: scrub and reclaim every EPC page of an idle enclave.
    pub fn eremove(&mut self, mem: &mut Memory, id: EnclaveId) -> Result<(), LeafError> {
        let enclave = self.enclave(id)?;
        if enclave.tcs.values().any(|t| t.busy) {
            return Err(LeafError::ThreadsActive);
        }
        if enclave.state == EnclaveState::Removed {
            return Err(LeafError::StateError("enclave already removed"));
        }
        let pt = enclave.page_table;
        let owned: Vec<u64> = self
            .epcm
            .iter()
            .filter(|(_, e)| e.owner == id)
            .map(|(page, _)| *page)
            .collect();
        for page in owned {
            self.epcm.remove(&page);
            let spa = mem.spa_for_gpa(page * PAGE_SIZE).expect("EPC page assigned");
            mem.write_phys(spa, &[0u8; PAGE_SIZE as usize]);
            self.free_epc.insert(page);
        }
        mem.drop_table(pt);
        let enclave = self.enclave_mut(id)?;
        enclave.state = EnclaveState::Removed;
        enclave.tcs.clear();
        Ok(())
    }

    // ---- enclave-internal leaves ----

    /// EREPORT: unsigned report body. Signing happens with the AIK when a
    /// bundle is assembled.
    pub fn ereport(
        &self,
        id: EnclaveId,
        report_data: [u8; 64],
    ) -> Result<EnclaveReportBody, LeafError> {
        let enclave = self.enclave(id)?;
        if enclave.state != EnclaveState::Initialized {
            return Err(LeafError::StateError("EREPORT requires an initialized enclave"));
        }
        Ok(EnclaveReportBody {
            mrenclave: enclave.mrenclave.expect("initialized"),
            attributes: enclave.attributes,
            report_data,
        })
    }

    /// EGETKEY: derive a key bound to the enclave measurement from the
    /// monitor's VMPL0 guest key.
    pub fn egetkey(&self, id: EnclaveId, req: KeyRequest) -> Result<[u8; 32], LeafError> {
        let enclave = self.enclave(id)?;
        if enclave.state != EnclaveState::Initialized {
            return Err(LeafError::StateError("EGETKEY requires an initialized enclave"));
        }
        let guest_key =
            self.guest_key.ok_or(LeafError::StateError("monitor attestation not booted"))?;
        let mrenclave = enclave.mrenclave.expect("initialized");
        let KeyPolicy::MrEnclave = req.policy;
        Ok(attest::derive_key(&guest_key, req.key_name, &mrenclave, &req.key_id))
    }

    /// Bundle an enclave report with the cached AIK binding report.
    pub fn build_bundle(
        &self,
        body: EnclaveReportBody,
    ) -> Result<crate::attest::NestedBundle, LeafError> {
        let aik = self.aik.as_ref().ok_or(LeafError::StateError("AIK not generated"))?;
        let binding =
            self.binding_report.as_ref().ok_or(LeafError::StateError("no AIK binding report"))?;
        Ok(attest::build_bundle(aik, binding, body))
    }

    /// Gate in front of the syscall-dispatched leaves. Only enclave
    /// contexts may enter, only through the trampoline address in LSTAR,
    /// and only with enclave-internal leaves.
    pub fn dispatch_gate(
        &self,
        caller: ContextTag,
        entry_gva: Gva,
        leaf: crate::evm::SyscallLeaf,
    ) -> Result<EnclaveId, LeafError> {
        let ContextTag::EnclaveUser(id) = caller else {
            return Err(LeafError::BadEntry);
        };
        if entry_gva != TRAMPOLINE_GVA {
            return Err(LeafError::GeneralProtection);
        }
        if matches!(leaf, crate::evm::SyscallLeaf::Ioctl(_)) {
            // VMPL-switch requests (and everything else privileged) are not
            // routable from enclave context.
            return Err(LeafError::RefusedLeaf);
        }
        Ok(id)
    }

    // ---- privileged byte access into enclave space ----

    fn resolve_enclave_page(
        &self,
        mem: &Memory,
        pt: PtId,
        gva: Gva,
    ) -> Result<crate::types::Spa, LeafError> {
        let entry = mem
            .table(pt)
            .map_err(LeafError::Mem)?
            .lookup(page_of(gva))
            .copied()
            .ok_or(LeafError::UnmappedError(gva))?;
        let spa = mem.spa_for_gpa(entry.gpa).ok_or(LeafError::UnmappedError(gva))?;
        Ok(spa + (gva % PAGE_SIZE))
    }

    /// Monitor-private window into enclave memory (SMAP disabled): resolves
    /// through the enclave's page table but bypasses user-mode checks.
    pub fn write_enclave_bytes(
        &self,
        mem: &mut Memory,
        pt: PtId,
        gva: Gva,
        data: &[u8],
    ) -> Result<(), LeafError> {
        let mut off = 0u64;
        while off < data.len() as u64 {
            let addr = gva + off;
            let spa = self.resolve_enclave_page(mem, pt, addr)?;
            let chunk = (PAGE_SIZE - addr % PAGE_SIZE).min(data.len() as u64 - off);
            mem.write_phys(spa, &data[off as usize..(off + chunk) as usize]);
            off += chunk;
        }
        Ok(())
    }

    pub fn read_enclave_bytes(
        &self,
        mem: &Memory,
        pt: PtId,
        gva: Gva,
        len: u64,
    ) -> Result<Vec<u8>, LeafError> {
        let mut out = vec![0u8; len as usize];
        let mut off = 0u64;
        while off < len {
            let addr = gva + off;
            let spa = self.resolve_enclave_page(mem, pt, addr)?;
            let chunk = (PAGE_SIZE - addr % PAGE_SIZE).min(len - off);
            mem.read_phys(spa, &mut out[off as usize..(off + chunk) as usize]);
            off += chunk;
        }
        Ok(out)
    }
}
