// SPDX-License-Identifier: Apache-2.0

//! The modeled AMD security processor and the two-layer attestation chain:
//! VCEK-signed SNP reports, the monitor's attestation identity key (AIK),
//! bundle assembly and verification, guest key derivation, and sealing.
//!
//! Signatures are real: the VCEK is an ECDSA P-384 key (RFC 6979
//! deterministic signing, so seeded machines produce byte-stable bundles)
//! and the AIK is Ed25519. Guest messages to the AMD-SP travel over
//! per-VMPL AES-256-GCM channels with strictly increasing sequence numbers.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use ed25519_dalek::Signer as _;
use ed25519_dalek::Verifier as _;
use hmac::{Hmac, Mac};
use p384::ecdsa::signature::hazmat::PrehashSigner as _;
use p384::ecdsa::signature::hazmat::PrehashVerifier as _;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha384};
use thiserror::Error;

use crate::types::{CpuMode, Vmpl, VMPL_COUNT};

type HmacSha256 = Hmac<Sha256>;

pub const LAUNCH_DIGEST_LEN: usize = 48;
pub const REPORT_DATA_LEN: usize = 64;
pub const KEY_ID_LEN: usize = 16;
pub const GCM_TAG_LEN: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttestError {
    #[error("message failed authentication")]
    Auth,
    #[error("sequence number {got} rejected (expected {expected})")]
    Replay { expected: u64, got: u64 },
    #[error("vmpl{caller} may not request artifacts for vmpl{requested}")]
    VmplDenied { caller: Vmpl, requested: Vmpl },
    #[error("request channel requires kernel mode")]
    KernelOnly,
    #[error("AIK binding report not generated yet")]
    NoBindingReport,
    #[error("malformed message: {0}")]
    Malformed(String),
}

// ---- VMPCK guest message channel ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadType {
    ReportReq,
    ReportResp,
    KeyReq,
    KeyResp,
}

impl PayloadType {
    fn code(self) -> u8 {
        match self {
            PayloadType::ReportReq => 1,
            PayloadType::ReportResp => 2,
            PayloadType::KeyReq => 3,
            PayloadType::KeyResp => 4,
        }
    }
}

/// An encrypted, authenticated message on a VMPCK channel. The sequence
/// number and payload type are bound via the GCM associated data; the
/// nonce is derived from (channel, seq) and never reused because sequence
/// numbers only move forward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuestMessage {
    pub vmpck_index: u8,
    pub seq: u64,
    pub payload_type: PayloadType,
    /// Ciphertext followed by the 16-byte GCM tag.
    pub ciphertext: Vec<u8>,
}

fn channel_nonce(vmpck_index: u8, seq: u64) -> [u8; 12] {
    let mut nonce = [0u8; 12];
    nonce[..4].copy_from_slice(&(vmpck_index as u32).to_be_bytes());
    nonce[4..].copy_from_slice(&seq.to_be_bytes());
    nonce
}

fn channel_aad(seq: u64, payload_type: PayloadType) -> [u8; 9] {
    let mut aad = [0u8; 9];
    aad[..8].copy_from_slice(&seq.to_be_bytes());
    aad[8] = payload_type.code();
    aad
}

/// Encrypt and authenticate a payload for one VMPCK channel.
pub fn channel_seal(
    vmpck: &[u8; 32],
    vmpck_index: u8,
    seq: u64,
    payload_type: PayloadType,
    payload: &[u8],
) -> GuestMessage {
    let cipher = Aes256Gcm::new_from_slice(vmpck).expect("32-byte key");
    let nonce = channel_nonce(vmpck_index, seq);
    let aad = channel_aad(seq, payload_type);
    let ciphertext = cipher
        .encrypt(&Nonce::from(nonce), Payload { msg: payload, aad: &aad })
        .expect("in-memory encryption");
    GuestMessage { vmpck_index, seq, payload_type, ciphertext }
}

/// Authenticate and decrypt a channel message. Stale or skipped sequence
/// numbers are rejected before any decryption happens.
pub fn channel_open(
    vmpck: &[u8; 32],
    expected_seq: u64,
    msg: &GuestMessage,
) -> Result<Vec<u8>, AttestError> {
    if msg.seq != expected_seq {
        return Err(AttestError::Replay { expected: expected_seq, got: msg.seq });
    }
    let cipher = Aes256Gcm::new_from_slice(vmpck).expect("32-byte key");
    let nonce = channel_nonce(msg.vmpck_index, msg.seq);
    let aad = channel_aad(msg.seq, msg.payload_type);
    cipher
        .decrypt(&Nonce::from(nonce), Payload { msg: &msg.ciphertext, aad: &aad })
        .map_err(|_| AttestError::Auth)
}

// ---- reports and keys ----

/// SNP attestation report: platform launch measurement, the VMPL the report
/// speaks for, caller-chosen user data, and the VCEK signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnpReport {
    pub launch_digest: [u8; LAUNCH_DIGEST_LEN],
    pub vmpl: Vmpl,
    pub report_data: [u8; REPORT_DATA_LEN],
    /// ECDSA P-384 signature, fixed 96-byte r||s encoding.
    pub signature: Vec<u8>,
}

impl SnpReport {
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + LAUNCH_DIGEST_LEN + 1 + REPORT_DATA_LEN);
        out.extend_from_slice(b"snp-report-v1\0");
        out.extend_from_slice(&self.launch_digest);
        out.push(self.vmpl);
        out.extend_from_slice(&self.report_data);
        out
    }

    /// Wire form for channel transport: signed bytes followed by signature.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = self.signed_bytes();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self, AttestError> {
        let prefix = b"snp-report-v1\0";
        let body_len = prefix.len() + LAUNCH_DIGEST_LEN + 1 + REPORT_DATA_LEN;
        if bytes.len() != body_len + 96 || &bytes[..prefix.len()] != prefix {
            return Err(AttestError::Malformed("snp report wire form".into()));
        }
        let mut launch_digest = [0u8; LAUNCH_DIGEST_LEN];
        let mut report_data = [0u8; REPORT_DATA_LEN];
        let mut off = prefix.len();
        launch_digest.copy_from_slice(&bytes[off..off + LAUNCH_DIGEST_LEN]);
        off += LAUNCH_DIGEST_LEN;
        let vmpl = bytes[off];
        off += 1;
        report_data.copy_from_slice(&bytes[off..off + REPORT_DATA_LEN]);
        off += REPORT_DATA_LEN;
        Ok(SnpReport { launch_digest, vmpl, report_data, signature: bytes[off..].to_vec() })
    }
}

/// Unsigned enclave report body produced by EREPORT.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveReportBody {
    pub mrenclave: [u8; 32],
    pub attributes: u64,
    pub report_data: [u8; REPORT_DATA_LEN],
}

impl EnclaveReportBody {
    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 32 + 8 + REPORT_DATA_LEN);
        out.extend_from_slice(b"enclave-report-v1\0");
        out.extend_from_slice(&self.mrenclave);
        out.extend_from_slice(&self.attributes.to_le_bytes());
        out.extend_from_slice(&self.report_data);
        out
    }
}

/// Attestation identity key generated by the monitor at boot. The private
/// half never leaves the monitor and is never serialized into artifacts.
#[derive(Clone)]
pub struct Aik {
    signing: ed25519_dalek::SigningKey,
}

impl core::fmt::Debug for Aik {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        // Keep the private half out of debug output.
        write!(f, "Aik({})", hex::encode(self.public_digest()))
    }
}

impl Aik {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Aik { signing: ed25519_dalek::SigningKey::from_bytes(&seed) }
    }

    pub fn public_bytes(&self) -> [u8; 32] {
        self.signing.verifying_key().to_bytes()
    }

    /// SHA-256 of the public key; bound into the SNP report's user data.
    pub fn public_digest(&self) -> [u8; 32] {
        Sha256::digest(self.public_bytes()).into()
    }

    pub fn sign_report(&self, body: &EnclaveReportBody) -> [u8; 64] {
        self.signing.sign(&body.signed_bytes()).to_bytes()
    }

    /// Raw private seed, exposed for leak-scan tests only.
    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }
}

/// Composite attestation artifact: the VCEK-signed SNP report binding the
/// AIK, plus the AIK-signed enclave report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NestedBundle {
    pub snp_report: SnpReport,
    pub aik_public: [u8; 32],
    pub enclave_report: EnclaveReportBody,
    pub enclave_sig: [u8; 64],
}

/// What a remote verifier trusts a priori.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustAnchors {
    /// VCEK public key, SEC1 uncompressed point encoding.
    pub vcek_public: Vec<u8>,
    pub launch_digest: [u8; LAUNCH_DIGEST_LEN],
    pub mrenclave: [u8; 32],
}

/// First failed verification check, in check order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    SnpSignature,
    Vmpl,
    LaunchDigest,
    AikBinding,
    EnclaveSignature,
    Mrenclave,
}

impl core::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            RejectReason::SnpSignature => "snp-signature",
            RejectReason::Vmpl => "vmpl",
            RejectReason::LaunchDigest => "launch-digest",
            RejectReason::AikBinding => "aik-binding",
            RejectReason::EnclaveSignature => "enclave-signature",
            RejectReason::Mrenclave => "mrenclave",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

fn sha384_of(bytes: &[u8]) -> [u8; 48] {
    let digest = Sha384::digest(bytes);
    digest.into()
}

fn vcek_verify(vcek_public: &[u8], message: &[u8], signature: &[u8]) -> bool {
    let Ok(key) = p384::ecdsa::VerifyingKey::from_sec1_bytes(vcek_public) else {
        return false;
    };
    let Ok(sig) = p384::ecdsa::Signature::from_slice(signature) else {
        return false;
    };
    key.verify_prehash(&sha384_of(message), &sig).is_ok()
}

/// Stateless bundle verification. Checks run in a fixed order and the
/// first failure is reported:
/// 1. SNP report signature under the trusted VCEK key,
/// 2. the report speaks for VMPL0,
/// 3. launch digest matches,
/// 4. the AIK public key hashes to the report's user data,
/// 5. enclave report signature under that AIK,
/// 6. enclave measurement matches.
pub fn verify_bundle(bundle: &NestedBundle, trust: &TrustAnchors) -> Verdict {
    if !vcek_verify(&trust.vcek_public, &bundle.snp_report.signed_bytes(), &bundle.snp_report.signature)
    {
        return Verdict::Reject(RejectReason::SnpSignature);
    }
    if bundle.snp_report.vmpl != 0 {
        return Verdict::Reject(RejectReason::Vmpl);
    }
    if bundle.snp_report.launch_digest != trust.launch_digest {
        return Verdict::Reject(RejectReason::LaunchDigest);
    }
    let aik_digest: [u8; 32] = Sha256::digest(bundle.aik_public).into();
    if aik_digest[..] != bundle.snp_report.report_data[..32] {
        return Verdict::Reject(RejectReason::AikBinding);
    }
    let Ok(aik_key) = ed25519_dalek::VerifyingKey::from_bytes(&bundle.aik_public) else {
        return Verdict::Reject(RejectReason::EnclaveSignature);
    };
    let sig = ed25519_dalek::Signature::from_bytes(&bundle.enclave_sig);
    if aik_key.verify(&bundle.enclave_report.signed_bytes(), &sig).is_err() {
        return Verdict::Reject(RejectReason::EnclaveSignature);
    }
    if bundle.enclave_report.mrenclave != trust.mrenclave {
        return Verdict::Reject(RejectReason::Mrenclave);
    }
    Verdict::Accept
}

/// Assemble the composite report. The given SNP report must already bind
/// the AIK (user data = SHA-256 of the public key, zero padded).
pub fn build_bundle(
    aik: &Aik,
    binding_report: &SnpReport,
    enclave_report: EnclaveReportBody,
) -> NestedBundle {
    let enclave_sig = aik.sign_report(&enclave_report);
    NestedBundle {
        snp_report: binding_report.clone(),
        aik_public: aik.public_bytes(),
        enclave_report,
        enclave_sig,
    }
}

/// Report-data layout for the AIK binding report: AIK public digest in the
/// first 32 bytes, zero in the rest.
pub fn aik_binding_report_data(aik: &Aik) -> [u8; REPORT_DATA_LEN] {
    let mut data = [0u8; REPORT_DATA_LEN];
    data[..32].copy_from_slice(&aik.public_digest());
    data
}

// ---- AMD security processor ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ChannelSeq {
    /// Next request sequence number the SP will accept on this channel.
    next_request: u64,
}

/// Modeled AMD-SP: machine root secret, the VCEK signing key, the four
/// per-VMPL channel keys with their sequence counters, and the launch
/// measurement taken at boot.
pub struct AmdSp {
    root_secret: [u8; 32],
    vcek: p384::ecdsa::SigningKey,
    vmpck: [[u8; 32]; VMPL_COUNT],
    seq: [ChannelSeq; VMPL_COUNT],
    launch_digest: [u8; LAUNCH_DIGEST_LEN],
}

impl core::fmt::Debug for AmdSp {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "AmdSp(launch_digest={})", hex::encode(self.launch_digest))
    }
}

impl Clone for AmdSp {
    fn clone(&self) -> Self {
        AmdSp {
            root_secret: self.root_secret,
            vcek: self.vcek.clone(),
            vmpck: self.vmpck,
            seq: self.seq,
            launch_digest: self.launch_digest,
        }
    }
}

impl AmdSp {
    pub fn generate(rng: &mut impl RngCore, launch_digest: [u8; LAUNCH_DIGEST_LEN]) -> Self {
        let mut root_secret = [0u8; 32];
        rng.fill_bytes(&mut root_secret);
        let vcek = loop {
            let mut candidate = [0u8; 48];
            rng.fill_bytes(&mut candidate);
            if let Ok(key) = p384::ecdsa::SigningKey::from_slice(&candidate) {
                break key;
            }
        };
        let mut vmpck = [[0u8; 32]; VMPL_COUNT];
        loop {
            for key in vmpck.iter_mut() {
                rng.fill_bytes(key);
            }
            let distinct = (0..VMPL_COUNT)
                .all(|i| (i + 1..VMPL_COUNT).all(|j| vmpck[i] != vmpck[j]));
            if distinct {
                break;
            }
        }
        AmdSp {
            root_secret,
            vcek,
            vmpck,
            seq: [ChannelSeq { next_request: 1 }; VMPL_COUNT],
            launch_digest,
        }
    }

    pub fn launch_digest(&self) -> [u8; LAUNCH_DIGEST_LEN] {
        self.launch_digest
    }

    /// VCEK public key in SEC1 uncompressed encoding: the per-machine trust
    /// anchor handed to verifiers.
    pub fn vcek_public(&self) -> Vec<u8> {
        p384::ecdsa::VerifyingKey::from(&self.vcek)
            .to_encoded_point(false)
            .as_bytes()
            .to_vec()
    }

    /// Channel key as held by the software running at `vmpl`.
    pub fn vmpck(&self, vmpl: Vmpl) -> [u8; 32] {
        self.vmpck[vmpl as usize]
    }

    /// Next request sequence number the SP expects on a channel. The guest
    /// side mirrors this counter.
    pub fn expected_seq(&self, vmpl: Vmpl) -> u64 {
        self.seq[vmpl as usize].next_request
    }

    fn sign_report(&self, launch_digest: [u8; 48], vmpl: Vmpl, report_data: [u8; 64]) -> SnpReport {
        let mut report = SnpReport { launch_digest, vmpl, report_data, signature: Vec::new() };
        let sig: p384::ecdsa::Signature =
            self.vcek.sign_prehash(&sha384_of(&report.signed_bytes())).expect("p384 sign");
        report.signature = sig.to_bytes().to_vec();
        report
    }

    /// Process one sealed guest request and produce the sealed response.
    /// Requests and responses share the channel counter: a request consumes
    /// seq n and its response is sealed at n+1, so the counter is strictly
    /// increasing across the conversation.
    pub fn handle_guest_message(&mut self, msg: &GuestMessage) -> Result<GuestMessage, AttestError> {
        let channel = msg.vmpck_index;
        if channel as usize >= VMPL_COUNT {
            return Err(AttestError::Malformed(format!("vmpck index {channel}")));
        }
        let key = self.vmpck[channel as usize];
        let expected = self.seq[channel as usize].next_request;
        let payload = channel_open(&key, expected, msg)?;
        // The channel identifies the caller's VMPL.
        let caller_vmpl = channel;
        let (resp_type, resp_payload) = match msg.payload_type {
            PayloadType::ReportReq => {
                if payload.len() != 1 + REPORT_DATA_LEN {
                    return Err(AttestError::Malformed("report request body".into()));
                }
                let requested = payload[0];
                let mut report_data = [0u8; REPORT_DATA_LEN];
                report_data.copy_from_slice(&payload[1..]);
                let body = if requested as usize >= VMPL_COUNT || requested < caller_vmpl {
                    vec![1u8]
                } else {
                    let report = self.sign_report(self.launch_digest, requested, report_data);
                    let mut ok = vec![0u8];
                    ok.extend_from_slice(&report.to_wire());
                    ok
                };
                (PayloadType::ReportResp, body)
            }
            PayloadType::KeyReq => {
                if payload.len() != 1 {
                    return Err(AttestError::Malformed("key request body".into()));
                }
                let requested = payload[0];
                let body = if requested as usize >= VMPL_COUNT || requested < caller_vmpl {
                    vec![1u8]
                } else {
                    let mut ok = vec![0u8];
                    ok.extend_from_slice(&self.derive_guest_key(requested));
                    ok
                };
                (PayloadType::KeyResp, body)
            }
            PayloadType::ReportResp | PayloadType::KeyResp => {
                return Err(AttestError::Malformed("response sent to the SP".into()));
            }
        };
        self.seq[channel as usize].next_request = expected + 2;
        Ok(channel_seal(&key, channel, expected + 1, resp_type, &resp_payload))
    }

    /// Guest key for a VMPL, derived from the machine root with the VMPL
    /// mixed in. Deterministic per machine.
    fn derive_guest_key(&self, vmpl: Vmpl) -> [u8; 32] {
        let mut mac = <HmacSha256 as Mac>::new_from_slice(&self.root_secret).expect("hmac key");
        mac.update(b"guest-key");
        mac.update(&[vmpl]);
        mac.finalize().into_bytes().into()
    }

    /// Full SNP_REPORT_REQ exchange over the caller's channel. The request
    /// path needs host-shared memory, so only kernel-mode software can use
    /// it; a report is produced only for VMPLs at or below the caller's
    /// privilege (numerically greater or equal).
    pub fn snp_report_req(
        &mut self,
        caller_vmpl: Vmpl,
        caller_mode: CpuMode,
        requested_vmpl: Vmpl,
        report_data: [u8; REPORT_DATA_LEN],
    ) -> Result<SnpReport, AttestError> {
        if caller_mode != CpuMode::Kernel {
            return Err(AttestError::KernelOnly);
        }
        let key = self.vmpck(caller_vmpl);
        let seq = self.expected_seq(caller_vmpl);
        let mut body = vec![requested_vmpl];
        body.extend_from_slice(&report_data);
        let request = channel_seal(&key, caller_vmpl, seq, PayloadType::ReportReq, &body);
        let response = self.handle_guest_message(&request)?;
        let plain = channel_open(&key, seq + 1, &response)?;
        match plain.split_first() {
            Some((0, wire)) => SnpReport::from_wire(wire),
            Some((1, _)) => {
                Err(AttestError::VmplDenied { caller: caller_vmpl, requested: requested_vmpl })
            }
            _ => Err(AttestError::Malformed("report response".into())),
        }
    }

    /// Full MSG_KEY_REQ exchange over the caller's channel.
    pub fn msg_key_req(
        &mut self,
        caller_vmpl: Vmpl,
        caller_mode: CpuMode,
        requested_vmpl: Vmpl,
    ) -> Result<[u8; 32], AttestError> {
        if caller_mode != CpuMode::Kernel {
            return Err(AttestError::KernelOnly);
        }
        let key = self.vmpck(caller_vmpl);
        let seq = self.expected_seq(caller_vmpl);
        let request = channel_seal(&key, caller_vmpl, seq, PayloadType::KeyReq, &[requested_vmpl]);
        let response = self.handle_guest_message(&request)?;
        let plain = channel_open(&key, seq + 1, &response)?;
        match plain.split_first() {
            Some((0, body)) if body.len() == 32 => {
                Ok(body.try_into().expect("32-byte key"))
            }
            Some((1, _)) => {
                Err(AttestError::VmplDenied { caller: caller_vmpl, requested: requested_vmpl })
            }
            _ => Err(AttestError::Malformed("key response".into())),
        }
    }
}

// ---- key derivation and sealing ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyName {
    SealKey,
    ReportKey,
}

impl KeyName {
    fn code(self) -> u8 {
        match self {
            KeyName::SealKey => 1,
            KeyName::ReportKey => 2,
        }
    }
}

/// Derive an enclave key from the monitor's guest key, bound to the
/// enclave measurement and a caller-chosen key id.
pub fn derive_key(
    guest_key: &[u8; 32],
    key_name: KeyName,
    mrenclave: &[u8; 32],
    key_id: &[u8; KEY_ID_LEN],
) -> [u8; 32] {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(guest_key).expect("hmac key");
    mac.update(&[key_name.code()]);
    mac.update(mrenclave);
    mac.update(key_id);
    mac.finalize().into_bytes().into()
}

/// Sealing key bound to (machine root, enclave measurement, key id).
pub fn derive_sealing_key(
    guest_key: &[u8; 32],
    mrenclave: &[u8; 32],
    key_id: &[u8; KEY_ID_LEN],
) -> [u8; 32] {
    derive_key(guest_key, KeyName::SealKey, mrenclave, key_id)
}

/// Ciphertext sealed under a derived key. Decrypts only under the exact
/// same key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub key_id: [u8; KEY_ID_LEN],
    pub nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
}

pub fn seal(key: &[u8; 32], key_id: [u8; KEY_ID_LEN], nonce: [u8; 12], plaintext: &[u8]) -> SealedBlob {
    let cipher = Aes256Gcm::new_from_slice(key).expect("32-byte key");
    let ciphertext = cipher
        .encrypt(&Nonce::from(nonce), Payload { msg: plaintext, aad: &key_id })
        .expect("in-memory encryption");
    SealedBlob { key_id, nonce, ciphertext }
}

pub fn unseal(key: &[u8; 32], blob: &SealedBlob) -> Result<Vec<u8>, AttestError> {
    let cipher = Aes256Gcm::new_from_slice(key).expect("32-byte key");
    cipher
        .decrypt(&Nonce::from(blob.nonce), Payload { msg: &blob.ciphertext, aad: &blob.key_id })
        .map_err(|_| AttestError::Auth)
}

// ---- canonical JSON forms ----

/// Bundle file form: canonical JSON with base64 binary fields and fixed key
/// order. Byte-exact across runs for identical bundles.
#[derive(Debug, Serialize, Deserialize)]
pub struct BundleFile {
    pub snp_report: SnpReportFile,
    pub aik_public: String,
    pub enclave_report: EnclaveReportFile,
    pub enclave_sig: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SnpReportFile {
    pub launch_digest: String,
    pub vmpl: u8,
    pub report_data: String,
    pub signature: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EnclaveReportFile {
    pub mrenclave: String,
    pub attributes: u64,
    pub report_data: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrustAnchorsFile {
    pub vcek_public: String,
    pub launch_digest: String,
    pub mrenclave: String,
}

fn b64(bytes: &[u8]) -> String {
    use base64::Engine as _;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn unb64(field: &str, s: &str) -> Result<Vec<u8>, AttestError> {
    use base64::Engine as _;
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| AttestError::Malformed(format!("{field}: {e}")))
}

fn unb64_array<const N: usize>(field: &str, s: &str) -> Result<[u8; N], AttestError> {
    let v = unb64(field, s)?;
    v.try_into().map_err(|_| AttestError::Malformed(format!("{field}: wrong length")))
}

impl NestedBundle {
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let file = BundleFile {
            snp_report: SnpReportFile {
                launch_digest: b64(&self.snp_report.launch_digest),
                vmpl: self.snp_report.vmpl,
                report_data: b64(&self.snp_report.report_data),
                signature: b64(&self.snp_report.signature),
            },
            aik_public: b64(&self.aik_public),
            enclave_report: EnclaveReportFile {
                mrenclave: b64(&self.enclave_report.mrenclave),
                attributes: self.enclave_report.attributes,
                report_data: b64(&self.enclave_report.report_data),
            },
            enclave_sig: b64(&self.enclave_sig),
        };
        let mut out = serde_json::to_vec_pretty(&file).expect("bundle serialization");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, AttestError> {
        let file: BundleFile = serde_json::from_slice(bytes)
            .map_err(|e| AttestError::Malformed(format!("bundle json: {e}")))?;
        Ok(NestedBundle {
            snp_report: SnpReport {
                launch_digest: unb64_array("launch_digest", &file.snp_report.launch_digest)?,
                vmpl: file.snp_report.vmpl,
                report_data: unb64_array("report_data", &file.snp_report.report_data)?,
                signature: unb64("signature", &file.snp_report.signature)?,
            },
            aik_public: unb64_array("aik_public", &file.aik_public)?,
            enclave_report: EnclaveReportBody {
                mrenclave: unb64_array("mrenclave", &file.enclave_report.mrenclave)?,
                attributes: file.enclave_report.attributes,
                report_data: unb64_array("report_data", &file.enclave_report.report_data)?,
            },
            enclave_sig: unb64_array("enclave_sig", &file.enclave_sig)?,
        })
    }
}

impl TrustAnchors {
    pub fn to_canonical_json(&self) -> Vec<u8> {
        let file = TrustAnchorsFile {
            vcek_public: b64(&self.vcek_public),
            launch_digest: b64(&self.launch_digest),
            mrenclave: b64(&self.mrenclave),
        };
        let mut out = serde_json::to_vec_pretty(&file).expect("anchors serialization");
        out.push(b'\n');
        out
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, AttestError> {
        let file: TrustAnchorsFile = serde_json::from_slice(bytes)
            .map_err(|e| AttestError::Malformed(format!("anchors json: {e}")))?;
        Ok(TrustAnchors {
            vcek_public: unb64("vcek_public", &file.vcek_public)?,
            launch_digest: unb64_array("launch_digest", &file.launch_digest)?,
            mrenclave: unb64_array("mrenclave", &file.mrenclave)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn test_sp(seed: u64) -> AmdSp {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        AmdSp::generate(&mut rng, [7u8; 48])
    }

    fn test_aik(seed: u64) -> Aik {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Aik::generate(&mut rng)
    }

    fn honest_bundle(sp: &mut AmdSp, aik: &Aik, mrenclave: [u8; 32]) -> NestedBundle {
        let binding = sp
            .snp_report_req(0, CpuMode::Kernel, 0, aik_binding_report_data(aik))
            .unwrap();
        let body = EnclaveReportBody { mrenclave, attributes: 0, report_data: [0u8; 64] };
        build_bundle(aik, &binding, body)
    }

    fn anchors(sp: &AmdSp, mrenclave: [u8; 32]) -> TrustAnchors {
        TrustAnchors {
            vcek_public: sp.vcek_public(),
            launch_digest: sp.launch_digest(),
            mrenclave,
        }
    }

    #[test]
    fn channel_roundtrip() {
        let key = [3u8; 32];
        let msg = channel_seal(&key, 0, 1, PayloadType::KeyReq, b"payload");
        assert_eq!(channel_open(&key, 1, &msg).unwrap(), b"payload");
    }

    #[test]
    fn channel_bit_flip_fails_auth() {
        let key = [3u8; 32];
        let mut msg = channel_seal(&key, 0, 1, PayloadType::KeyReq, b"payload");
        msg.ciphertext[2] ^= 0x40;
        assert_eq!(channel_open(&key, 1, &msg), Err(AttestError::Auth));
    }

    #[test]
    fn channel_replay_rejected() {
        let mut sp = test_sp(1);
        let key = sp.vmpck(0);
        let seq = sp.expected_seq(0);
        let msg = channel_seal(&key, 0, seq, PayloadType::KeyReq, &[0u8]);
        sp.handle_guest_message(&msg).unwrap();
        // Same message again: the counter moved on.
        let err = sp.handle_guest_message(&msg).unwrap_err();
        assert!(matches!(err, AttestError::Replay { .. }));
        // Skipped sequence number also rejected.
        let skipped = channel_seal(&key, 0, seq + 10, PayloadType::KeyReq, &[0u8]);
        assert!(matches!(sp.handle_guest_message(&skipped), Err(AttestError::Replay { .. })));
    }

    #[test]
    fn report_req_monitor_for_vmpl0() {
        let mut sp = test_sp(2);
        let aik = test_aik(3);
        let report = sp
            .snp_report_req(0, CpuMode::Kernel, 0, aik_binding_report_data(&aik))
            .unwrap();
        assert_eq!(report.vmpl, 0);
        assert_eq!(report.launch_digest, sp.launch_digest());
        assert!(vcek_verify(&sp.vcek_public(), &report.signed_bytes(), &report.signature));
        assert_eq!(report.report_data[..32], aik.public_digest());
    }

    #[test]
    fn report_req_guest_cannot_get_vmpl0() {
        let mut sp = test_sp(2);
        assert_eq!(
            sp.snp_report_req(1, CpuMode::Kernel, 0, [0u8; 64]),
            Err(AttestError::VmplDenied { caller: 1, requested: 0 })
        );
        // Equality case allowed.
        let report = sp.snp_report_req(1, CpuMode::Kernel, 1, [0u8; 64]).unwrap();
        assert_eq!(report.vmpl, 1);
    }

    #[test]
    fn report_req_needs_kernel_mode() {
        let mut sp = test_sp(2);
        assert_eq!(
            sp.snp_report_req(0, CpuMode::User, 0, [0u8; 64]),
            Err(AttestError::KernelOnly)
        );
    }

    #[test]
    fn key_req_determinism_and_separation() {
        let mut sp = test_sp(4);
        let k0a = sp.msg_key_req(0, CpuMode::Kernel, 0).unwrap();
        let k0b = sp.msg_key_req(0, CpuMode::Kernel, 0).unwrap();
        assert_eq!(k0a, k0b);
        let k1 = sp.msg_key_req(1, CpuMode::Kernel, 1).unwrap();
        assert_ne!(k0a, k1);
        assert_eq!(
            sp.msg_key_req(1, CpuMode::Kernel, 0),
            Err(AttestError::VmplDenied { caller: 1, requested: 0 })
        );
    }

    #[test]
    fn bundle_honest_accepts() {
        let mut sp = test_sp(5);
        let aik = test_aik(6);
        let mrenclave = [0xabu8; 32];
        let bundle = honest_bundle(&mut sp, &aik, mrenclave);
        assert_eq!(verify_bundle(&bundle, &anchors(&sp, mrenclave)), Verdict::Accept);
    }

    #[test]
    fn bundle_fresh_aik_without_rebinding_rejected() {
        let mut sp = test_sp(5);
        let aik = test_aik(6);
        let mrenclave = [0xabu8; 32];
        let mut bundle = honest_bundle(&mut sp, &aik, mrenclave);
        let impostor = test_aik(7);
        bundle.aik_public = impostor.public_bytes();
        bundle.enclave_sig = impostor.sign_report(&bundle.enclave_report);
        assert_eq!(
            verify_bundle(&bundle, &anchors(&sp, mrenclave)),
            Verdict::Reject(RejectReason::AikBinding)
        );
    }

    #[test]
    fn bundle_guest_issued_vmpl1_report_rejected() {
        let mut sp = test_sp(5);
        let aik = test_aik(6);
        let mrenclave = [0xabu8; 32];
        // The guest can legitimately bind any AIK into a VMPL1 report; the
        // verifier's vmpl check is what stops the impersonation.
        let binding = sp
            .snp_report_req(1, CpuMode::Kernel, 1, aik_binding_report_data(&aik))
            .unwrap();
        let body = EnclaveReportBody { mrenclave, attributes: 0, report_data: [0u8; 64] };
        let bundle = build_bundle(&aik, &binding, body);
        assert_eq!(
            verify_bundle(&bundle, &anchors(&sp, mrenclave)),
            Verdict::Reject(RejectReason::Vmpl)
        );
    }

    #[test]
    fn bundle_wrong_anchor_digests() {
        let mut sp = test_sp(8);
        let aik = test_aik(9);
        let mrenclave = [0x11u8; 32];
        let bundle = honest_bundle(&mut sp, &aik, mrenclave);
        let mut bad_launch = anchors(&sp, mrenclave);
        bad_launch.launch_digest[0] ^= 1;
        assert_eq!(
            verify_bundle(&bundle, &bad_launch),
            Verdict::Reject(RejectReason::LaunchDigest)
        );
        let bad_mr = anchors(&sp, [0x22u8; 32]);
        assert_eq!(verify_bundle(&bundle, &bad_mr), Verdict::Reject(RejectReason::Mrenclave));
    }

    #[test]
    fn bundle_json_roundtrip_is_byte_stable() {
        let mut sp = test_sp(10);
        let aik = test_aik(11);
        let bundle = honest_bundle(&mut sp, &aik, [0x42u8; 32]);
        let json = bundle.to_canonical_json();
        let parsed = NestedBundle::from_json(&json).unwrap();
        assert_eq!(parsed, bundle);
        assert_eq!(parsed.to_canonical_json(), json);
    }

    #[test]
    fn sealing_roundtrip_and_mismatch() {
        let guest_key = [5u8; 32];
        let key_id = [9u8; 16];
        let m1 = [1u8; 32];
        let m2 = [2u8; 32];
        let k1 = derive_sealing_key(&guest_key, &m1, &key_id);
        let blob = seal(&k1, key_id, [0u8; 12], b"secret");
        assert_eq!(unseal(&k1, &blob).unwrap(), b"secret");
        let k2 = derive_sealing_key(&guest_key, &m2, &key_id);
        assert_eq!(unseal(&k2, &blob), Err(AttestError::Auth));
        // Different machine root.
        let k3 = derive_sealing_key(&[6u8; 32], &m1, &key_id);
        assert_eq!(unseal(&k3, &blob), Err(AttestError::Auth));
    }

    #[test]
    fn vcek_signing_is_deterministic() {
        let sp1 = test_sp(12);
        let r1 = sp1.sign_report([1u8; 48], 0, [2u8; 64]);
        let r2 = sp1.sign_report([1u8; 48], 0, [2u8; 64]);
        assert_eq!(r1.signature, r2.signature);
    }
}
