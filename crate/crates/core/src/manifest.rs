// SPDX-License-Identifier: Apache-2.0

//! Enclave image manifests: the ordered build recipe (pages, contents,
//! measurement flags, program) that drives ECREATE/EADD/EEXTEND/EINIT
//! deterministically, plus the offline measurement replay used by
//! `measure` without running any guest code.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::evm::{self, Program};
use crate::guest::DriverRequest;
use crate::machine::{LeafOutput, Machine, MachineError};
use crate::monitor::{secinfo_flags, MeasurementLog, PagePerms, PageType, EEXTEND_CHUNK};
use crate::types::{EnclaveId, Gpa, Gva, PAGE_SIZE};

/// Default parameter buffer window, shared by App and enclave.
pub const DEFAULT_PARAM_GVA: Gva = 0x7f00_0000;
pub const DEFAULT_PARAM_PAGES: u64 = 4;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("page {index} ({gva:#x}): {reason}")]
    Page { index: usize, gva: u64, reason: String },
    #[error("program: {0}")]
    Program(#[from] evm::AsmError),
    #[error("{0}")]
    Invalid(String),
}

fn default_ssa_frames() -> u64 {
    1
}

fn default_param_gva() -> u64 {
    DEFAULT_PARAM_GVA
}

fn default_param_pages() -> u64 {
    DEFAULT_PARAM_PAGES
}

fn default_perms() -> String {
    "rw".to_string()
}

/// On-disk manifest form (TOML).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnclaveManifest {
    pub name: String,
    pub base_gva: u64,
    pub size_bytes: u64,
    #[serde(default = "default_ssa_frames")]
    pub ssa_frame_size: u64,
    #[serde(default)]
    pub attributes: u64,
    #[serde(default)]
    pub entry_point: u64,
    #[serde(default = "default_param_gva")]
    pub param_gva: u64,
    #[serde(default = "default_param_pages")]
    pub param_pages: u64,
    pub pages: Vec<ManifestPage>,
    pub program: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPage {
    pub gva: u64,
    #[serde(rename = "type")]
    pub page_type: String,
    #[serde(default = "default_perms")]
    pub perms: String,
    /// `hex:<bytes>`, `file:<path>`, `tcs:<entry>,<ssa_base>,<nssa>`, or
    /// empty for a zero page. Shorter content is zero-padded to a page.
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub measure: bool,
}

/// A manifest with contents decoded and the program assembled.
#[derive(Debug, Clone)]
pub struct ResolvedManifest {
    pub name: String,
    pub base_gva: Gva,
    pub size_bytes: u64,
    pub ssa_frame_size: u64,
    pub attributes: u64,
    pub param_gva: Gva,
    pub param_pages: u64,
    pub pages: Vec<ResolvedPage>,
    pub program: Program,
}

#[derive(Debug, Clone)]
pub struct ResolvedPage {
    pub gva: Gva,
    pub page_type: PageType,
    pub perms: PagePerms,
    pub content: Vec<u8>,
    pub measure: bool,
}

pub fn parse_manifest(text: &str) -> Result<EnclaveManifest, ManifestError> {
    toml::from_str(text).map_err(|e| ManifestError::Parse(e.to_string()))
}

fn parse_page_type(s: &str) -> Option<PageType> {
    match s {
        "tcs" => Some(PageType::Tcs),
        "reg" => Some(PageType::Reg),
        _ => None,
    }
}

fn parse_perms(s: &str) -> Option<PagePerms> {
    let mut perms = PagePerms { read: false, write: false, execute: false };
    for c in s.chars() {
        match c {
            'r' => perms.read = true,
            'w' => perms.write = true,
            'x' => perms.execute = true,
            _ => return None,
        }
    }
    Some(perms)
}

fn parse_u64_field(s: &str) -> Option<u64> {
    let t = s.trim();
    if let Some(hex) = t.strip_prefix("0x") {
        u64::from_str_radix(hex, 16).ok()
    } else {
        t.parse().ok()
    }
}

fn decode_content(
    index: usize,
    page: &ManifestPage,
    dir: Option<&Path>,
) -> Result<Vec<u8>, ManifestError> {
    let fail = |reason: String| ManifestError::Page { index, gva: page.gva, reason };
    let mut bytes = if page.content.is_empty() {
        Vec::new()
    } else if let Some(hex_str) = page.content.strip_prefix("hex:") {
        hex::decode(hex_str.trim()).map_err(|e| fail(format!("bad hex content: {e}")))?
    } else if let Some(path) = page.content.strip_prefix("file:") {
        let full = match dir {
            Some(d) => d.join(path),
            None => Path::new(path).to_path_buf(),
        };
        std::fs::read(&full).map_err(|e| fail(format!("content file {}: {e}", full.display())))?
    } else if let Some(spec) = page.content.strip_prefix("tcs:") {
        let parts: Vec<&str> = spec.split(',').collect();
        if parts.len() != 3 {
            return Err(fail("tcs content needs <entry>,<ssa_base>,<nssa>".into()));
        }
        let entry = parse_u64_field(parts[0]).ok_or_else(|| fail("bad tcs entry".into()))?;
        let ssa = parse_u64_field(parts[1]).ok_or_else(|| fail("bad tcs ssa_base".into()))?;
        let nssa = parse_u64_field(parts[2]).ok_or_else(|| fail("bad tcs nssa".into()))?;
        crate::monitor::encode_tcs_page(entry, ssa, nssa).to_vec()
    } else {
        return Err(fail("content must be empty or start with hex:/file:/tcs:".into()));
    };
    if bytes.len() as u64 > PAGE_SIZE {
        return Err(fail(format!("content is {} bytes, more than a page", bytes.len())));
    }
    bytes.resize(PAGE_SIZE as usize, 0);
    Ok(bytes)
}

impl EnclaveManifest {
    /// Decode contents (relative paths against `dir`) and assemble the
    /// program.
    pub fn resolve(&self, dir: Option<&Path>) -> Result<ResolvedManifest, ManifestError> {
        if self.pages.is_empty() {
            return Err(ManifestError::Invalid("manifest lists no pages".into()));
        }
        let mut pages = Vec::with_capacity(self.pages.len());
        for (index, page) in self.pages.iter().enumerate() {
            let page_type = parse_page_type(&page.page_type).ok_or(ManifestError::Page {
                index,
                gva: page.gva,
                reason: format!("unknown page type '{}'", page.page_type),
            })?;
            let perms = parse_perms(&page.perms).ok_or(ManifestError::Page {
                index,
                gva: page.gva,
                reason: format!("bad perms '{}'", page.perms),
            })?;
            let content = decode_content(index, page, dir)?;
            pages.push(ResolvedPage { gva: page.gva, page_type, perms, content, measure: page.measure });
        }
        let mut program = evm::parse_program(&self.program)?;
        program.entry = self.entry_point as usize;
        Ok(ResolvedManifest {
            name: self.name.clone(),
            base_gva: self.base_gva,
            size_bytes: self.size_bytes,
            ssa_frame_size: self.ssa_frame_size,
            attributes: self.attributes,
            param_gva: self.param_gva,
            param_pages: self.param_pages,
            pages,
            program,
        })
    }
}

/// Offline replay of the measurement: reconstructs the log the ordered
/// build script would produce, without touching a machine. Must agree with
/// the mrenclave a live run computes at EINIT.
pub fn offline_measurement(manifest: &ResolvedManifest) -> [u8; 32] {
    let mut log = MeasurementLog::default();
    log.record_ecreate(manifest.ssa_frame_size, manifest.size_bytes);
    for page in &manifest.pages {
        log.record_eadd(page.gva - manifest.base_gva, secinfo_flags(page.page_type, page.perms));
    }
    for page in &manifest.pages {
        if !page.measure {
            continue;
        }
        for chunk in 0..(PAGE_SIZE / EEXTEND_CHUNK) {
            let start = (chunk * EEXTEND_CHUNK) as usize;
            log.record_eextend(
                page.gva - manifest.base_gva + chunk * EEXTEND_CHUNK,
                &page.content[start..start + EEXTEND_CHUNK as usize],
            );
        }
    }
    log.digest()
}

/// Handle to an enclave built from a manifest.
#[derive(Debug, Clone)]
pub struct LoadedEnclave {
    pub name: String,
    pub id: EnclaveId,
    pub mrenclave: [u8; 32],
    /// First TCS page, the default entry TCS.
    pub tcs_gva: Gva,
    pub param_gva: Gva,
    pub param_gpa: Gpa,
}

impl Machine {
    /// Build and initialize an enclave through the honest driver path:
    /// ECREATE, the listed EADDs in order, full EEXTENDs of measured pages
    /// in listed order, then EINIT. Attaches the program for execution.
    pub fn load_enclave(
        &mut self,
        manifest: &ResolvedManifest,
    ) -> Result<LoadedEnclave, MachineError> {
        let mut param_gpa = 0;
        for k in 0..manifest.param_pages {
            let gpa = self.alloc_guest_page()?;
            if k == 0 {
                param_gpa = gpa;
            }
        }
        let created = self.ioctl(DriverRequest::ecreate(
            manifest.base_gva,
            manifest.size_bytes,
            manifest.ssa_frame_size,
            manifest.attributes,
            manifest.param_gva,
            param_gpa,
            manifest.param_pages,
        ))?;
        let LeafOutput::Created(id) = created else {
            return Err(MachineError::Monitor(crate::monitor::LeafError::StateError(
                "unexpected ECREATE output",
            )));
        };
        let mut tcs_gva = None;
        for page in &manifest.pages {
            let src = self.alloc_guest_page()?;
            self.mem.write_gpa(src, &page.content, 1).map_err(|_| MachineError::GuestOom)?;
            self.ioctl(DriverRequest::eadd(id, src, page.gva, page.page_type, page.perms))?;
            if page.page_type == PageType::Tcs && tcs_gva.is_none() {
                tcs_gva = Some(page.gva);
            }
        }
        for page in &manifest.pages {
            if !page.measure {
                continue;
            }
            for chunk in 0..(PAGE_SIZE / EEXTEND_CHUNK) {
                self.ioctl(DriverRequest::eextend(id, page.gva + chunk * EEXTEND_CHUNK))?;
            }
        }
        let measured = self.ioctl(DriverRequest::einit(id))?;
        let LeafOutput::Measured(mrenclave) = measured else {
            return Err(MachineError::Monitor(crate::monitor::LeafError::StateError(
                "unexpected EINIT output",
            )));
        };
        self.attach_program(id, manifest.program.clone());
        Ok(LoadedEnclave {
            name: manifest.name.clone(),
            id,
            mrenclave,
            tcs_gva: tcs_gva.unwrap_or(manifest.base_gva),
            param_gva: manifest.param_gva,
            param_gpa,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &str = r#"
name = "hello"
base_gva = 0x200000
size_bytes = 0x8000
ssa_frame_size = 1
entry_point = 0

program = """
loadimm r0, 0
store 0x7f000000, r0
syscall eexit
"""

[[pages]]
gva = 0x200000
type = "tcs"
perms = "rw"
content = "tcs:0,0x201000,1"
measure = true

[[pages]]
gva = 0x201000
type = "reg"
perms = "rw"
measure = false

[[pages]]
gva = 0x202000
type = "reg"
perms = "rw"
content = "hex:deadbeef"
measure = true
"#;

    #[test]
    fn parse_and_resolve() {
        let manifest = parse_manifest(MANIFEST).unwrap();
        let resolved = manifest.resolve(None).unwrap();
        assert_eq!(resolved.pages.len(), 3);
        assert_eq!(resolved.pages[0].page_type, PageType::Tcs);
        assert_eq!(&resolved.pages[2].content[..4], &[0xde, 0xad, 0xbe, 0xef]);
        assert_eq!(resolved.pages[2].content.len() as u64, PAGE_SIZE);
        assert_eq!(resolved.program.instructions.len(), 3);
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = format!("{MANIFEST}\nbogus_field = 1\n");
        assert!(parse_manifest(&bad).is_err());
    }

    #[test]
    fn offline_equals_live_measurement() {
        let manifest = parse_manifest(MANIFEST).unwrap().resolve(None).unwrap();
        let offline = offline_measurement(&manifest);
        let mut machine = Machine::new(
            crate::machine::MachineConfig {
                total_pages: 256,
                vmpl0_pages: 64,
                monitor_pages: 16,
                ..Default::default()
            },
            crate::machine::CryptoMode::Deterministic(1),
        )
        .unwrap();
        let loaded = machine.load_enclave(&manifest).unwrap();
        assert_eq!(offline, loaded.mrenclave);
    }

    #[test]
    fn measure_false_only_skips_extends() {
        let manifest = parse_manifest(MANIFEST).unwrap();
        let mut unmeasured = manifest.clone();
        for page in &mut unmeasured.pages {
            page.measure = false;
        }
        let a = offline_measurement(&manifest.resolve(None).unwrap());
        let b = offline_measurement(&unmeasured.resolve(None).unwrap());
        assert_ne!(a, b);
        // With no measured pages the digest depends only on ECREATE+EADD
        // records: changing page contents no longer matters.
        let mut different_content = unmeasured.clone();
        different_content.pages[2].content = "hex:0102".into();
        let c = offline_measurement(&different_content.resolve(None).unwrap());
        assert_eq!(b, c);
    }

    #[test]
    fn reordering_pages_changes_measurement() {
        let manifest = parse_manifest(MANIFEST).unwrap();
        let mut swapped = manifest.clone();
        swapped.pages.swap(1, 2);
        let a = offline_measurement(&manifest.resolve(None).unwrap());
        let b = offline_measurement(&swapped.resolve(None).unwrap());
        assert_ne!(a, b);
    }
}
