// SPDX-License-Identifier: Apache-2.0

//! Guest-physical memory, the reverse map table (RMP) with per-VMPL
//! permissions, and per-context page tables with permission-checked
//! address translation.
//!
//! Faults are values at this layer: [`rmp_check`](Memory::rmp_check) and
//! [`translate`](Memory::translate) return [`RmpFault`] / [`PageFault`]
//! for the vcpu layer to convert into delivered exceptions.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::types::{
    page_of, page_offset, Access, ContextTag, CpuMode, Gpa, Gva, Spa, Vmpl, PAGE_SIZE, VMPL_COUNT,
};

/// Per-VMPL read/write/execute permission set, one RMP cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VmplPerms {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl VmplPerms {
    pub const NONE: VmplPerms = VmplPerms { read: false, write: false, execute: false };
    pub const FULL: VmplPerms = VmplPerms { read: true, write: true, execute: true };
    pub const RW: VmplPerms = VmplPerms { read: true, write: true, execute: false };

    pub fn allows(&self, access: Access) -> bool {
        match access {
            Access::Read => self.read,
            Access::Write => self.write,
            Access::Execute => self.execute,
        }
    }

    /// Bitmask encoding used by the launch measurement (r=1, w=2, x=4).
    pub fn bits(&self) -> u8 {
        (self.read as u8) | (self.write as u8) << 1 | (self.execute as u8) << 2
    }
}

/// One row of the reverse map table: ownership, validation state, and the
/// per-VMPL permission vector of a single physical page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RmpEntry {
    pub spa: Spa,
    pub assigned_gpa: Option<Gpa>,
    pub validated: bool,
    pub vmpl_perms: [VmplPerms; VMPL_COUNT],
}

impl RmpEntry {
    fn unassigned(spa: Spa) -> Self {
        RmpEntry {
            spa,
            assigned_gpa: None,
            validated: false,
            vmpl_perms: [VmplPerms::NONE; VMPL_COUNT],
        }
    }
}

/// RMP permission check denial. A value, not an exception.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RmpFault {
    pub spa: Spa,
    pub vmpl: Vmpl,
    pub access: Access,
}

/// Page-table level translation denial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageFault {
    pub gva: Gva,
    pub access: Access,
}

/// Outcome of a failed two-stage translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslateFault {
    Page(PageFault),
    Rmp(RmpFault),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemError {
    #[error("size constraint violated: {0}")]
    SizeError(String),
    #[error("rmpadjust privilege fault: caller vmpl{caller} target vmpl{target}")]
    PrivilegeFault { caller: Vmpl, target: Vmpl },
    #[error("parameter buffer already mapped")]
    AlreadyMapped,
    #[error("gpa range not in the VMPL1-visible region")]
    LayoutError,
    #[error("address {0:#x} out of range")]
    OutOfRange(u64),
    #[error("spa {0:#x} not assigned to the guest")]
    Unassigned(Spa),
    #[error("gpa {0:#x} already mapped by another rmp entry")]
    GpaConflict(Gpa),
    #[error("page table {0:?} not found")]
    NoSuchTable(PtId),
    #[error("mapping at gva {0:#x} is immutable")]
    ImmutableMapping(Gva),
}

/// Contiguous range of pages, addressed in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageRange {
    pub start_page: u64,
    pub pages: u64,
}

impl PageRange {
    pub fn new(start_page: u64, pages: u64) -> Self {
        PageRange { start_page, pages }
    }

    pub fn start_addr(&self) -> u64 {
        self.start_page * PAGE_SIZE
    }

    pub fn end_page(&self) -> u64 {
        self.start_page + self.pages
    }

    pub fn contains_page(&self, page: u64) -> bool {
        page >= self.start_page && page < self.end_page()
    }

    pub fn contains_addr(&self, addr: u64) -> bool {
        self.contains_page(page_of(addr))
    }

    pub fn iter_pages(&self) -> impl Iterator<Item = u64> {
        self.start_page..self.end_page()
    }
}

/// Partition of the guest-physical space: a contiguous VMPL0-only carve-out
/// (monitor sub-range followed by the EPC sub-range) and the remaining
/// VMPL1-visible region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemLayout {
    pub total_gpa_pages: u64,
    pub monitor: PageRange,
    pub epc: PageRange,
    pub vmpl0: PageRange,
    pub vmpl1: PageRange,
}

/// Identifier of a page table within one machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PtId(pub u32);

/// One page-table entry: target physical page plus x86-style permission bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PtEntry {
    pub gpa: Gpa,
    pub user: bool,
    pub writable: bool,
    pub executable: bool,
    /// Set for the shared parameter buffer: the mapping is fixed for the
    /// enclave's lifetime and refuses later edits.
    pub immutable: bool,
}

/// A single-level page table owned by one execution context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageTable {
    pub id: PtId,
    pub owner: ContextTag,
    mappings: BTreeMap<u64, PtEntry>,
}

impl PageTable {
    pub fn lookup(&self, gva_page: u64) -> Option<&PtEntry> {
        self.mappings.get(&gva_page)
    }

    pub fn mappings(&self) -> &BTreeMap<u64, PtEntry> {
        &self.mappings
    }

    /// Install or replace a mapping. Immutable entries cannot be changed.
    pub fn map_page(&mut self, gva: Gva, entry: PtEntry) -> Result<(), MemError> {
        let key = page_of(gva);
        if let Some(existing) = self.mappings.get(&key) {
            if existing.immutable {
                return Err(MemError::ImmutableMapping(gva));
            }
        }
        self.mappings.insert(key, entry);
        Ok(())
    }

    pub fn unmap_page(&mut self, gva: Gva) -> Result<(), MemError> {
        let key = page_of(gva);
        if let Some(existing) = self.mappings.get(&key) {
            if existing.immutable {
                return Err(MemError::ImmutableMapping(gva));
            }
        }
        self.mappings.remove(&key);
        Ok(())
    }
}

/// Guest-physical memory of one machine: page contents, the RMP, and all
/// page tables. Pages read as zero until first written.
#[derive(Debug, Clone)]
pub struct Memory {
    total_pages: u64,
    pages: BTreeMap<u64, Box<[u8; PAGE_SIZE as usize]>>,
    rmp: Vec<RmpEntry>,
    gpa_index: BTreeMap<u64, u64>,
    tables: BTreeMap<PtId, PageTable>,
    next_table: u32,
    layout: Option<MemLayout>,
}

impl Memory {
    /// A machine with `total_pages` of guest memory. Every page starts
    /// identity-assigned (spa == gpa) and validated; PVALIDATE is folded
    /// into assignment since the model never exercises validation races.
    pub fn new(total_pages: u64) -> Self {
        let mut rmp = Vec::with_capacity(total_pages as usize);
        let mut gpa_index = BTreeMap::new();
        for page in 0..total_pages {
            let mut entry = RmpEntry::unassigned(page * PAGE_SIZE);
            entry.assigned_gpa = Some(page * PAGE_SIZE);
            entry.validated = true;
            rmp.push(entry);
            gpa_index.insert(page, page);
        }
        Memory {
            total_pages,
            pages: BTreeMap::new(),
            rmp,
            gpa_index,
            tables: BTreeMap::new(),
            next_table: 0,
            layout: None,
        }
    }

    pub fn total_pages(&self) -> u64 {
        self.total_pages
    }

    pub fn layout(&self) -> Option<&MemLayout> {
        self.layout.as_ref()
    }

    pub fn rmp_entries(&self) -> &[RmpEntry] {
        &self.rmp
    }

    fn rmp_entry_mut(&mut self, spa: Spa) -> Result<&mut RmpEntry, MemError> {
        let idx = page_of(spa);
        if idx >= self.total_pages {
            return Err(MemError::OutOfRange(spa));
        }
        Ok(&mut self.rmp[idx as usize])
    }

    pub fn rmp_entry(&self, spa: Spa) -> Result<&RmpEntry, MemError> {
        let idx = page_of(spa);
        if idx >= self.total_pages {
            return Err(MemError::OutOfRange(spa));
        }
        Ok(&self.rmp[idx as usize])
    }

    /// Physical page backing a guest-physical page, per the RMP mapping.
    pub fn spa_for_gpa(&self, gpa: Gpa) -> Option<Spa> {
        self.gpa_index.get(&page_of(gpa)).map(|p| p * PAGE_SIZE + page_offset(gpa))
    }

    /// Reassign a physical page to a new gpa. Enforces the global
    /// one-to-one sPA/gPA mapping.
    pub fn rmp_assign(&mut self, spa: Spa, gpa: Gpa) -> Result<(), MemError> {
        if page_of(gpa) >= self.total_pages {
            return Err(MemError::OutOfRange(gpa));
        }
        if let Some(owner) = self.gpa_index.get(&page_of(gpa)) {
            if *owner != page_of(spa) {
                return Err(MemError::GpaConflict(gpa));
            }
        }
        let entry = self.rmp_entry_mut(spa)?;
        let old = entry.assigned_gpa.map(page_of);
        entry.assigned_gpa = Some(gpa);
        entry.validated = true;
        if let Some(old_page) = old {
            self.gpa_index.remove(&old_page);
        }
        self.gpa_index.insert(page_of(gpa), page_of(spa));
        Ok(())
    }

    /// Remove a page from the guest: drops the gpa mapping, validation, and
    /// all permissions.
    pub fn rmp_unassign(&mut self, spa: Spa) -> Result<(), MemError> {
        let entry = self.rmp_entry_mut(spa)?;
        let old = entry.assigned_gpa.map(page_of);
        entry.assigned_gpa = None;
        entry.validated = false;
        entry.vmpl_perms = [VmplPerms::NONE; VMPL_COUNT];
        if let Some(old_page) = old {
            self.gpa_index.remove(&old_page);
        }
        Ok(())
    }

    /// Permission check against the RMP. Allowed iff the entry is assigned,
    /// validated, and the VMPL's permission vector grants the access.
    pub fn rmp_check(&self, spa: Spa, vmpl: Vmpl, access: Access) -> Result<(), RmpFault> {
        assert!((vmpl as usize) < VMPL_COUNT);
        let fault = RmpFault { spa, vmpl, access };
        let entry = match self.rmp_entry(spa) {
            Ok(e) => e,
            Err(_) => return Err(fault),
        };
        if entry.assigned_gpa.is_none() || !entry.validated {
            return Err(fault);
        }
        if !entry.vmpl_perms[vmpl as usize].allows(access) {
            return Err(fault);
        }
        Ok(())
    }

    /// RMPADJUST: a higher-privilege VMPL (numerically lower) adjusts the
    /// permissions of a strictly lower-privilege one. Privileged; refused
    /// from user mode and for targets at or above the caller's level. The
    /// granted permissions cannot exceed the caller's own on that page.
    pub fn rmpadjust(
        &mut self,
        caller_vmpl: Vmpl,
        caller_mode: CpuMode,
        spa: Spa,
        target_vmpl: Vmpl,
        perms: VmplPerms,
    ) -> Result<(), MemError> {
        assert!((caller_vmpl as usize) < VMPL_COUNT && (target_vmpl as usize) < VMPL_COUNT);
        if caller_mode == CpuMode::User || target_vmpl <= caller_vmpl {
            return Err(MemError::PrivilegeFault { caller: caller_vmpl, target: target_vmpl });
        }
        let entry = self.rmp_entry_mut(spa)?;
        if entry.assigned_gpa.is_none() {
            return Err(MemError::Unassigned(spa));
        }
        let own = entry.vmpl_perms[caller_vmpl as usize];
        let exceeds = (perms.read && !own.read)
            || (perms.write && !own.write)
            || (perms.execute && !own.execute);
        if exceeds {
            return Err(MemError::PrivilegeFault { caller: caller_vmpl, target: target_vmpl });
        }
        entry.vmpl_perms[target_vmpl as usize] = perms;
        Ok(())
    }

    /// Set a permission vector with platform (AMD-SP) authority. Used while
    /// carving the boot layout, not reachable from guest contexts.
    fn set_perms_platform(&mut self, page: u64, perms: [VmplPerms; VMPL_COUNT]) {
        self.rmp[page as usize].vmpl_perms = perms;
    }

    /// Divide the guest-physical space: a contiguous VMPL0-only region at
    /// the bottom (monitor pages followed by EPC pages) and the remainder
    /// for VMPL1. VMPL0 retains full access everywhere.
    pub fn carve_layout(
        &mut self,
        vmpl0_pages: u64,
        monitor_pages: u64,
    ) -> Result<MemLayout, MemError> {
        if !(monitor_pages < vmpl0_pages && vmpl0_pages < self.total_pages) {
            return Err(MemError::SizeError(format!(
                "need monitor ({monitor_pages}) < vmpl0 ({vmpl0_pages}) < total ({})",
                self.total_pages
            )));
        }
        let layout = MemLayout {
            total_gpa_pages: self.total_pages,
            monitor: PageRange::new(0, monitor_pages),
            epc: PageRange::new(monitor_pages, vmpl0_pages - monitor_pages),
            vmpl0: PageRange::new(0, vmpl0_pages),
            vmpl1: PageRange::new(vmpl0_pages, self.total_pages - vmpl0_pages),
        };
        for page in layout.vmpl0.iter_pages() {
            self.set_perms_platform(
                page,
                [VmplPerms::FULL, VmplPerms::NONE, VmplPerms::NONE, VmplPerms::NONE],
            );
        }
        for page in layout.vmpl1.iter_pages() {
            self.set_perms_platform(
                page,
                [VmplPerms::FULL, VmplPerms::FULL, VmplPerms::NONE, VmplPerms::NONE],
            );
        }
        self.layout = Some(layout);
        Ok(layout)
    }

    // ---- page tables ----

    pub fn create_table(&mut self, owner: ContextTag) -> PtId {
        let id = PtId(self.next_table);
        self.next_table += 1;
        self.tables.insert(id, PageTable { id, owner, mappings: BTreeMap::new() });
        id
    }

    pub fn table(&self, id: PtId) -> Result<&PageTable, MemError> {
        self.tables.get(&id).ok_or(MemError::NoSuchTable(id))
    }

    pub fn table_mut(&mut self, id: PtId) -> Result<&mut PageTable, MemError> {
        self.tables.get_mut(&id).ok_or(MemError::NoSuchTable(id))
    }

    /// Discard a page table entirely (enclave teardown).
    pub fn drop_table(&mut self, id: PtId) {
        self.tables.remove(&id);
    }

    /// Two-stage translation: page-table permission check first, then the
    /// RMP check at the mapped physical page. Returns the physical byte
    /// address on success.
    pub fn translate(
        &self,
        pt: PtId,
        gva: Gva,
        access: Access,
        mode: CpuMode,
        vmpl: Vmpl,
    ) -> Result<Spa, TranslateFault> {
        let page_fault = PageFault { gva, access };
        let table = match self.tables.get(&pt) {
            Some(t) => t,
            None => return Err(TranslateFault::Page(page_fault)),
        };
        let entry = match table.lookup(page_of(gva)) {
            Some(e) => e,
            None => return Err(TranslateFault::Page(page_fault)),
        };
        if mode == CpuMode::User && !entry.user {
            return Err(TranslateFault::Page(page_fault));
        }
        match access {
            Access::Write if !entry.writable => return Err(TranslateFault::Page(page_fault)),
            Access::Execute if !entry.executable => return Err(TranslateFault::Page(page_fault)),
            _ => {}
        }
        let gpa = entry.gpa + page_offset(gva);
        if page_of(gpa) >= self.total_pages {
            // Mapping points outside guest memory; surfaces like a reserved
            // bit fault at the page-table level.
            return Err(TranslateFault::Page(page_fault));
        }
        let spa = match self.spa_for_gpa(gpa) {
            Some(s) => s,
            None => {
                return Err(TranslateFault::Rmp(RmpFault { spa: gpa, vmpl, access }));
            }
        };
        self.rmp_check(spa, vmpl, access).map_err(TranslateFault::Rmp)?;
        Ok(spa)
    }

    /// Map the shared parameter buffer into the enclave's and the App's
    /// page tables with the identical gVA-to-gPA mapping, flagged immutable
    /// so the mapping stays fixed for the enclave's lifetime.
    pub fn map_shared_parameter_buffer(
        &mut self,
        enclave_pt: PtId,
        app_pt: PtId,
        gva: Gva,
        gpa: Gpa,
        pages: u64,
    ) -> Result<(), MemError> {
        let layout = self.layout.ok_or(MemError::LayoutError)?;
        for k in 0..pages {
            let p = page_of(gpa) + k;
            if !layout.vmpl1.contains_page(p) {
                return Err(MemError::LayoutError);
            }
        }
        // A second mapping attempt trips over the immutable entries.
        if (0..pages).any(|k| {
            self.tables
                .get(&enclave_pt)
                .and_then(|t| t.lookup(page_of(gva) + k).filter(|e| e.immutable))
                .is_some()
        }) {
            return Err(MemError::AlreadyMapped);
        }
        for k in 0..pages {
            let entry = PtEntry {
                gpa: gpa + k * PAGE_SIZE,
                user: true,
                writable: true,
                executable: false,
                immutable: true,
            };
            let va = gva + k * PAGE_SIZE;
            self.table_mut(enclave_pt)?.map_page(va, entry)?;
            self.table_mut(app_pt)?.map_page(va, entry)?;
        }
        Ok(())
    }

    // ---- physical and checked accessors ----

    /// Read physical bytes. May cross page boundaries; unwritten pages read
    /// as zero.
    pub fn read_phys(&self, spa: Spa, buf: &mut [u8]) {
        let mut off = 0usize;
        while off < buf.len() {
            let addr = spa + off as u64;
            assert!(page_of(addr) < self.total_pages, "phys read out of range");
            let in_page = page_offset(addr) as usize;
            let chunk = (PAGE_SIZE as usize - in_page).min(buf.len() - off);
            match self.pages.get(&page_of(addr)) {
                Some(page) => {
                    buf[off..off + chunk].copy_from_slice(&page[in_page..in_page + chunk])
                }
                None => buf[off..off + chunk].fill(0),
            }
            off += chunk;
        }
    }

    pub fn write_phys(&mut self, spa: Spa, data: &[u8]) {
        let mut off = 0usize;
        while off < data.len() {
            let addr = spa + off as u64;
            assert!(page_of(addr) < self.total_pages, "phys write out of range");
            let in_page = page_offset(addr) as usize;
            let chunk = (PAGE_SIZE as usize - in_page).min(data.len() - off);
            let page = self
                .pages
                .entry(page_of(addr))
                .or_insert_with(|| Box::new([0u8; PAGE_SIZE as usize]));
            page[in_page..in_page + chunk].copy_from_slice(&data[off..off + chunk]);
            off += chunk;
        }
    }

    /// Physical pages that have ever been written, in address order.
    pub fn backed_pages(&self) -> impl Iterator<Item = (u64, &[u8; PAGE_SIZE as usize])> {
        self.pages.iter().map(|(page, contents)| (*page, contents.as_ref()))
    }

    /// Read guest-physical bytes with an RMP check per touched page.
    pub fn read_gpa(&self, gpa: Gpa, len: u64, vmpl: Vmpl) -> Result<Vec<u8>, RmpFault> {
        let mut out = vec![0u8; len as usize];
        let mut off = 0u64;
        while off < len {
            let addr = gpa + off;
            let spa = self.spa_for_gpa(addr).ok_or(RmpFault {
                spa: addr,
                vmpl,
                access: Access::Read,
            })?;
            self.rmp_check(spa, vmpl, Access::Read)?;
            let chunk = (PAGE_SIZE - page_offset(addr)).min(len - off);
            self.read_phys(spa, &mut out[off as usize..(off + chunk) as usize]);
            off += chunk;
        }
        Ok(out)
    }

    pub fn write_gpa(&mut self, gpa: Gpa, data: &[u8], vmpl: Vmpl) -> Result<(), RmpFault> {
        let len = data.len() as u64;
        let mut off = 0u64;
        while off < len {
            let addr = gpa + off;
            let spa = self.spa_for_gpa(addr).ok_or(RmpFault {
                spa: addr,
                vmpl,
                access: Access::Write,
            })?;
            self.rmp_check(spa, vmpl, Access::Write)?;
            let chunk = (PAGE_SIZE - page_offset(addr)).min(len - off);
            self.write_phys(spa, &data[off as usize..(off + chunk) as usize]);
            off += chunk;
        }
        Ok(())
    }

    /// Read through a page table, one translation per touched byte range.
    pub fn read_virt(
        &self,
        pt: PtId,
        gva: Gva,
        len: u64,
        mode: CpuMode,
        vmpl: Vmpl,
    ) -> Result<Vec<u8>, TranslateFault> {
        let mut out = vec![0u8; len as usize];
        let mut off = 0u64;
        while off < len {
            let addr = gva + off;
            let spa = self.translate(pt, addr, Access::Read, mode, vmpl)?;
            let chunk = (PAGE_SIZE - page_offset(addr)).min(len - off);
            self.read_phys(spa, &mut out[off as usize..(off + chunk) as usize]);
            off += chunk;
        }
        Ok(out)
    }

    pub fn write_virt(
        &mut self,
        pt: PtId,
        gva: Gva,
        data: &[u8],
        mode: CpuMode,
        vmpl: Vmpl,
    ) -> Result<(), TranslateFault> {
        let len = data.len() as u64;
        let mut off = 0u64;
        while off < len {
            let addr = gva + off;
            let spa = self.translate(pt, addr, Access::Write, mode, vmpl)?;
            let chunk = (PAGE_SIZE - page_offset(addr)).min(len - off);
            self.write_phys(spa, &data[off as usize..(off + chunk) as usize]);
            off += chunk;
        }
        Ok(())
    }

    /// Feed the initial RMP permission map into a digest: four bytes per
    /// page, one permission bitmask per VMPL.
    pub fn hash_perm_map(&self, hasher: &mut impl sha2::Digest) {
        for entry in &self.rmp {
            let mut quad = [0u8; VMPL_COUNT];
            for (i, p) in entry.vmpl_perms.iter().enumerate() {
                quad[i] = p.bits();
            }
            hasher.update(quad);
        }
    }
}
