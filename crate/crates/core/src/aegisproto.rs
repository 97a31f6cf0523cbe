//! Enclave lifecycle protocol: preparation with a measured runtime image,
//! plan binding, authenticated channel establishment, adapter onboarding,
//! signed policy updates, and revocation with attested erasure.
//!
//! The attestation hardware is simulated by a per-testbed Ed25519 keypair
//! whose public half is distributed out of band. Every protocol check is
//! real; only the hardware root is simulated.
//!
//! State machine: `Prepared → PlanBound → Onboarded → Revoked`, with
//! Onboarded self-loops for policy updates. Any other transition request is a
//! wrong-state error and leaves the instance unchanged.

use std::collections::{BTreeMap, BTreeSet};

use rand_core::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{deserialize_adapter_set, AdapterError, ProviderAdapterSet, SiteId};
use crate::audit::{sign_record, AuditEvent, AuditRecord};
use crate::crypto::{
    aead_open, derive_key, sha256, CryptoError, EphemeralSecret, SigningKey, VerifyingKey,
    AEAD_NONCE_LEN, DIGEST_LEN, SESSION_KEY_LEN, SIGNATURE_LEN,
};

/// Marker embedded in the final quote after successful erasure.
pub const REVOKED_MARKER: &[u8; 16] = b"PKUS-REVOKED\x00\x00\x00\x00";

const HANDSHAKE_DOMAIN: &[u8] = b"PKUS-HS1";
const SESSION_INFO: &[u8] = b"PKUS-SESSION-V1";
const TRAFFIC_INFO: &[u8] = b"PKUS-TRAFFIC-V1";
const PLAN_DOMAIN: &[u8] = b"PKUS-PLAN-V1";
const POLICY_UPDATE_DOMAIN: &[u8] = b"PKUS-POLICY-UPDATE-V1";
const REVOKE_DOMAIN: &[u8] = b"PKUS-REVOKE-V1";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("operation {op} not permitted in state {state:?}")]
    WrongState {
        op: &'static str,
        state: EnclaveState,
    },
    #[error("enclave is revoked")]
    Revoked,
    #[error("signature rejected for signer {0}")]
    BadSignature(String),
    #[error("signer {0} is not registered")]
    UnknownSigner(String),
    #[error("sender {0} is not the enclave owner")]
    NotOwner(String),
    #[error("replayed handshake nonce")]
    ReplayedNonce,
    #[error("no session key established")]
    NoChannel,
    #[error("associated data does not match measurement and plan hash")]
    BindingMismatch,
    #[error("AEAD tag verification failed")]
    TagMismatch,
    #[error("onboarding payload rejected: {0}")]
    Decode(#[from] AdapterError),
    #[error("payload identity does not match the bound plan: {0}")]
    OwnershipMismatch(String),
    #[error("client {0} not present in policy table")]
    UnknownClient(String),
    #[error("invalid plan: {0}")]
    BadPlan(&'static str),
    #[error("malformed protocol message: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

// --- attestation hardware ------------------------------------------------------

/// Signed statement of (measurement, user data) under the hardware key.
#[derive(Debug, Clone, PartialEq)]
pub struct Quote {
    pub measurement: [u8; DIGEST_LEN],
    pub user_data: Vec<u8>,
    pub nonce: [u8; 16],
    pub signature: [u8; SIGNATURE_LEN],
}

fn quote_transcript(measurement: &[u8; DIGEST_LEN], user_data: &[u8], nonce: &[u8; 16]) -> Vec<u8> {
    let mut t = Vec::with_capacity(DIGEST_LEN + user_data.len() + 16);
    t.extend_from_slice(measurement);
    t.extend_from_slice(user_data);
    t.extend_from_slice(nonce);
    t
}

/// Simulated attestation hardware: one signing key per testbed. Quotes and
/// audit records are signed with it; owner keys cannot produce either.
#[derive(Debug, Clone)]
pub struct AttestationHardware {
    key: SigningKey,
}

impl AttestationHardware {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        Self {
            key: SigningKey::generate(rng),
        }
    }

    /// Public half, published out of band.
    pub fn verifying_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    fn quote(&self, measurement: [u8; DIGEST_LEN], user_data: Vec<u8>, nonce: [u8; 16]) -> Quote {
        let signature = self
            .key
            .sign(&quote_transcript(&measurement, &user_data, &nonce));
        Quote {
            measurement,
            user_data,
            nonce,
            signature,
        }
    }

    fn sign_audit(
        &self,
        seq: u64,
        enclave_id: &str,
        event: AuditEvent,
        plan_hash: &[u8; 32],
    ) -> AuditRecord {
        sign_record(&self.key, seq, enclave_id, event, plan_hash)
    }
}

/// Accept iff the signature is valid under the hardware key AND the
/// measurement and user data match expectations. Rejection is a value.
pub fn verify_quote(
    quote: &Quote,
    expected_measurement: &[u8; DIGEST_LEN],
    expected_user_data: &[u8],
    hw_pubkey: &VerifyingKey,
) -> bool {
    if &quote.measurement != expected_measurement || quote.user_data != expected_user_data {
        return false;
    }
    hw_pubkey
        .verify(
            &quote_transcript(&quote.measurement, &quote.user_data, &quote.nonce),
            &quote.signature,
        )
        .is_ok()
}

// --- runtime image ---------------------------------------------------------------

/// The fixed enclave runtime image; its digest is the attestation root.
#[derive(Debug, Clone)]
pub struct RuntimeImage {
    image_bytes: Vec<u8>,
}

impl RuntimeImage {
    pub fn new(image_bytes: Vec<u8>) -> Self {
        Self { image_bytes }
    }

    pub fn measurement(&self) -> [u8; DIGEST_LEN] {
        sha256(&self.image_bytes)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.image_bytes
    }
}

// --- signatures and registry -------------------------------------------------------

/// A payload signed by a registered long-term key.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedRecord {
    pub payload: Vec<u8>,
    pub signer_id: String,
    pub signature: [u8; SIGNATURE_LEN],
}

impl SignedRecord {
    pub fn sign(key: &SigningKey, signer_id: impl Into<String>, payload: Vec<u8>) -> Self {
        let signature = key.sign(&payload);
        Self {
            payload,
            signer_id: signer_id.into(),
            signature,
        }
    }
}

/// Out-of-band distributed map from identity to verifying key.
#[derive(Debug, Clone, Default)]
pub struct KeyRegistry {
    keys: BTreeMap<String, VerifyingKey>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: impl Into<String>, key: VerifyingKey) {
        self.keys.insert(id.into(), key);
    }

    pub fn key_of(&self, id: &str) -> Option<&VerifyingKey> {
        self.keys.get(id)
    }

    /// Verify a signed record under the registered key of its claimed signer.
    pub fn verify(&self, record: &SignedRecord) -> Result<(), ProtocolError> {
        let key = self
            .keys
            .get(&record.signer_id)
            .ok_or_else(|| ProtocolError::UnknownSigner(record.signer_id.clone()))?;
        key.verify(&record.payload, &record.signature)
            .map_err(|_| ProtocolError::BadSignature(record.signer_id.clone()))
    }
}

// --- policy plan ----------------------------------------------------------------

/// One client lease: optional logical expiry and optional request budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyEntry {
    pub client_id: String,
    pub expiry: Option<u64>,
    pub max_requests: Option<u64>,
}

impl PolicyEntry {
    fn validate(&self) -> Result<(), ProtocolError> {
        if self.expiry == Some(0) {
            return Err(ProtocolError::BadPlan("expiry must be positive"));
        }
        if self.max_requests == Some(0) {
            return Err(ProtocolError::BadPlan("max_requests must be positive"));
        }
        Ok(())
    }
}

/// Ownership and policy configuration. Entries are kept sorted by client id,
/// so the canonical serialization and hence the plan hash are
/// order-independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPlan {
    base_model_id: String,
    owner_id: String,
    entries: Vec<PolicyEntry>,
}

impl PolicyPlan {
    pub fn new(
        base_model_id: impl Into<String>,
        owner_id: impl Into<String>,
        mut entries: Vec<PolicyEntry>,
    ) -> Result<Self, ProtocolError> {
        entries.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        for pair in entries.windows(2) {
            if pair[0].client_id == pair[1].client_id {
                return Err(ProtocolError::BadPlan("duplicate client id"));
            }
        }
        for e in &entries {
            e.validate()?;
        }
        Ok(Self {
            base_model_id: base_model_id.into(),
            owner_id: owner_id.into(),
            entries,
        })
    }

    pub fn base_model_id(&self) -> &str {
        &self.base_model_id
    }

    pub fn owner_id(&self) -> &str {
        &self.owner_id
    }

    pub fn entries(&self) -> &[PolicyEntry] {
        &self.entries
    }

    pub fn entry(&self, client_id: &str) -> Option<&PolicyEntry> {
        self.entries.iter().find(|e| e.client_id == client_id)
    }

    /// Canonical serialization: entries sorted by client id, all integers
    /// little-endian, optional fields flagged.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PLAN_DOMAIN);
        push_str(&mut out, &self.base_model_id);
        push_str(&mut out, &self.owner_id);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            push_str(&mut out, &e.client_id);
            push_opt_u64(&mut out, e.expiry);
            push_opt_u64(&mut out, e.max_requests);
        }
        out
    }

    pub fn plan_hash(&self) -> [u8; DIGEST_LEN] {
        sha256(&self.canonical_bytes())
    }

    fn upsert(&mut self, entry: PolicyEntry) -> Result<(), ProtocolError> {
        entry.validate()?;
        self.entries.retain(|e| e.client_id != entry.client_id);
        self.entries.push(entry);
        self.entries.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        Ok(())
    }

    fn remove(&mut self, client_id: &str) -> Result<(), ProtocolError> {
        let before = self.entries.len();
        self.entries.retain(|e| e.client_id != client_id);
        if self.entries.len() == before {
            return Err(ProtocolError::UnknownClient(client_id.to_string()));
        }
        Ok(())
    }
}

fn push_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn push_opt_u64(out: &mut Vec<u8>, v: Option<u64>) {
    match v {
        Some(v) => {
            out.push(1);
            out.extend_from_slice(&v.to_le_bytes());
        }
        None => out.push(0),
    }
}

/// Payload of a signed plan binding: the plan hash.
pub fn plan_binding_payload(plan: &PolicyPlan) -> Vec<u8> {
    plan.plan_hash().to_vec()
}

// --- policy updates ---------------------------------------------------------------

/// A single policy table mutation, bound to a specific enclave and the plan
/// hash it was issued against.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyUpdate {
    Add(PolicyEntry),
    Remove { client_id: String },
}

impl PolicyUpdate {
    /// Canonical signing payload.
    pub fn payload(&self, enclave_id: &str, prior_plan_hash: &[u8; 32]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(POLICY_UPDATE_DOMAIN);
        push_str(&mut out, enclave_id);
        out.extend_from_slice(prior_plan_hash);
        match self {
            PolicyUpdate::Add(e) => {
                out.push(1);
                push_str(&mut out, &e.client_id);
                push_opt_u64(&mut out, e.expiry);
                push_opt_u64(&mut out, e.max_requests);
            }
            PolicyUpdate::Remove { client_id } => {
                out.push(2);
                push_str(&mut out, client_id);
            }
        }
        out
    }

    fn parse(payload: &[u8]) -> Result<(String, [u8; 32], PolicyUpdate), ProtocolError> {
        let mut r = ByteReader::new(payload);
        r.expect(POLICY_UPDATE_DOMAIN)?;
        let enclave_id = r.string()?;
        let prior = r.array::<32>()?;
        let update = match r.u8()? {
            1 => PolicyUpdate::Add(PolicyEntry {
                client_id: r.string()?,
                expiry: r.opt_u64()?,
                max_requests: r.opt_u64()?,
            }),
            2 => PolicyUpdate::Remove {
                client_id: r.string()?,
            },
            _ => return Err(ProtocolError::Malformed("unknown policy update tag")),
        };
        r.finish()?;
        Ok((enclave_id, prior, update))
    }
}

/// Canonical signing payload of a revocation request.
pub fn revoke_payload(enclave_id: &str, plan_hash: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(REVOKE_DOMAIN);
    push_str(&mut out, enclave_id);
    out.extend_from_slice(plan_hash);
    out
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.pos + n > self.buf.len() {
            return Err(ProtocolError::Malformed("truncated message"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn expect(&mut self, prefix: &[u8]) -> Result<(), ProtocolError> {
        if self.take(prefix.len())? != prefix {
            return Err(ProtocolError::Malformed("bad domain prefix"));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn opt_u64(&mut self) -> Result<Option<u64>, ProtocolError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.u64()?)),
            _ => Err(ProtocolError::Malformed("bad option tag")),
        }
    }

    fn string(&mut self) -> Result<String, ProtocolError> {
        let len = u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| ProtocolError::Malformed("invalid UTF-8"))
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ProtocolError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn finish(&self) -> Result<(), ProtocolError> {
        if self.pos != self.buf.len() {
            return Err(ProtocolError::Malformed("trailing bytes"));
        }
        Ok(())
    }
}

// --- handshake -------------------------------------------------------------------

/// First handshake message: the owner's ephemeral key, signed with its
/// long-term key.
#[derive(Debug, Clone)]
pub struct HandshakeInit {
    pub owner_id: String,
    pub eph_pub: [u8; 32],
    pub nonce: [u8; 16],
    pub signature: [u8; SIGNATURE_LEN],
}

fn handshake_transcript(owner_id: &str, eph_pub: &[u8; 32], nonce: &[u8; 16]) -> Vec<u8> {
    let mut t = Vec::new();
    t.extend_from_slice(HANDSHAKE_DOMAIN);
    push_str(&mut t, owner_id);
    t.extend_from_slice(eph_pub);
    t.extend_from_slice(nonce);
    t
}

/// Enclave's reply: its ephemeral key, attested by a quote whose user data
/// binds the plan hash and the ephemeral key.
#[derive(Debug, Clone)]
pub struct HandshakeResponse {
    pub eph_pub: [u8; 32],
    pub quote: Quote,
}

/// Keys the owner side holds after a completed handshake.
#[derive(Debug, Clone)]
pub struct OwnerChannel {
    pub session_key: [u8; SESSION_KEY_LEN],
    pub traffic_key: [u8; SESSION_KEY_LEN],
    pub session_id: u64,
}

/// Session key derivation: extract-then-expand over the ECDH secret with the
/// binding inputs in the info string. Mismatched views of measurement or plan
/// hash yield different keys.
pub fn derive_session_key(
    shared_secret: &[u8; 32],
    measurement: &[u8; DIGEST_LEN],
    plan_hash: &[u8; DIGEST_LEN],
) -> [u8; SESSION_KEY_LEN] {
    let mut info = Vec::with_capacity(SESSION_INFO.len() + 64);
    info.extend_from_slice(SESSION_INFO);
    info.extend_from_slice(measurement);
    info.extend_from_slice(plan_hash);
    derive_key(shared_secret, &info)
}

/// MAC key for activation/delta traffic, domain-separated from onboarding.
pub fn derive_traffic_key(session_key: &[u8; SESSION_KEY_LEN]) -> [u8; SESSION_KEY_LEN] {
    derive_key(session_key, TRAFFIC_INFO)
}

/// Stable session identifier both sides can compute.
pub fn session_id_from_key(session_key: &[u8; SESSION_KEY_LEN]) -> u64 {
    let mut buf = Vec::with_capacity(16 + SESSION_KEY_LEN);
    buf.extend_from_slice(b"PKUS-SID-V1");
    buf.extend_from_slice(session_key);
    u64::from_le_bytes(sha256(&buf)[..8].try_into().unwrap())
}

/// Owner side, message 1.
pub fn owner_start_handshake(
    owner_key: &SigningKey,
    owner_id: &str,
    rng: &mut impl RngCore,
) -> (HandshakeInit, EphemeralSecret) {
    let secret = EphemeralSecret::generate(rng);
    let eph_pub = secret.public();
    let mut nonce = [0u8; 16];
    rng.fill_bytes(&mut nonce);
    let signature = owner_key.sign(&handshake_transcript(owner_id, &eph_pub, &nonce));
    (
        HandshakeInit {
            owner_id: owner_id.to_string(),
            eph_pub,
            nonce,
            signature,
        },
        secret,
    )
}

/// The full honest-path key exchange: owner message, enclave response, owner
/// verification. Both sides end up holding the same session key; the
/// enclave's copy stays inside it.
pub fn establish_channel(
    owner_key: &SigningKey,
    owner_id: &str,
    enclave: &mut EnclaveInstance,
    expected_measurement: &[u8; DIGEST_LEN],
    plan_hash: &[u8; DIGEST_LEN],
    hw_pubkey: &VerifyingKey,
    rng: &mut impl RngCore,
) -> Result<OwnerChannel, ProtocolError> {
    let (init, secret) = owner_start_handshake(owner_key, owner_id, rng);
    let response = enclave.accept_handshake(&init, rng)?;
    owner_finish_handshake(
        &secret,
        &response,
        expected_measurement,
        plan_hash,
        hw_pubkey,
    )
}

/// Owner side, message 2: verify the enclave's quote against the published
/// measurement and the negotiated plan hash, then derive the channel keys.
pub fn owner_finish_handshake(
    secret: &EphemeralSecret,
    response: &HandshakeResponse,
    expected_measurement: &[u8; DIGEST_LEN],
    plan_hash: &[u8; DIGEST_LEN],
    hw_pubkey: &VerifyingKey,
) -> Result<OwnerChannel, ProtocolError> {
    let mut expected_user_data = Vec::with_capacity(DIGEST_LEN + 32);
    expected_user_data.extend_from_slice(plan_hash);
    expected_user_data.extend_from_slice(&response.eph_pub);
    if !verify_quote(
        &response.quote,
        expected_measurement,
        &expected_user_data,
        hw_pubkey,
    ) {
        return Err(ProtocolError::BadSignature("enclave quote".into()));
    }
    let shared = secret.agree(&response.eph_pub);
    let session_key = derive_session_key(&shared, expected_measurement, plan_hash);
    Ok(OwnerChannel {
        session_key,
        traffic_key: derive_traffic_key(&session_key),
        session_id: session_id_from_key(&session_key),
    })
}

// --- enclave instance --------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnclaveState {
    Prepared,
    PlanBound,
    Onboarded,
    Revoked,
}

/// Whether a request is admitted by the policy table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Authorization {
    Allowed,
    Denied(DenyReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DenyReason {
    UnknownClient,
    LeaseExpired,
    RequestBudgetExhausted,
}

/// A single enclave: protocol state machine plus resident secrets.
///
/// No method on this type ever returns adapter matrix data; the only outputs
/// derived from adapters are per-site deltas served through the runtime
/// interface.
#[derive(Debug, Clone)]
pub struct EnclaveInstance {
    id: String,
    state: EnclaveState,
    measurement: [u8; DIGEST_LEN],
    hw: AttestationHardware,
    registry: KeyRegistry,
    plan: Option<PolicyPlan>,
    session_key: Option<[u8; SESSION_KEY_LEN]>,
    traffic_key: Option<[u8; SESSION_KEY_LEN]>,
    adapters: Option<ProviderAdapterSet>,
    request_counters: BTreeMap<String, u64>,
    audit_seq: u64,
    audit_records: Vec<AuditRecord>,
    seen_handshake_nonces: BTreeSet<[u8; 16]>,
    final_quote: Option<Quote>,
}

/// Launch a fresh enclave from the runtime image and attest it. The quote's
/// user data is empty: no plan is bound yet and no state is carried over.
pub fn prepare_enclave(
    enclave_id: impl Into<String>,
    image: &RuntimeImage,
    hw: &AttestationHardware,
    registry: KeyRegistry,
    nonce: [u8; 16],
) -> (EnclaveInstance, Quote) {
    let measurement = image.measurement();
    let quote = hw.quote(measurement, Vec::new(), nonce);
    let mut enclave = EnclaveInstance {
        id: enclave_id.into(),
        state: EnclaveState::Prepared,
        measurement,
        hw: hw.clone(),
        registry,
        plan: None,
        session_key: None,
        traffic_key: None,
        adapters: None,
        request_counters: BTreeMap::new(),
        audit_seq: 0,
        audit_records: Vec::new(),
        seen_handshake_nonces: BTreeSet::new(),
        final_quote: None,
    };
    enclave.append_audit(AuditEvent::Prepared);
    (enclave, quote)
}

impl EnclaveInstance {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> EnclaveState {
        self.state
    }

    pub fn measurement(&self) -> &[u8; DIGEST_LEN] {
        &self.measurement
    }

    pub fn plan_hash(&self) -> Option<[u8; DIGEST_LEN]> {
        self.plan.as_ref().map(|p| p.plan_hash())
    }

    /// Provider identity this enclave is bound to, once a plan exists.
    pub fn owner_id(&self) -> Option<&str> {
        self.plan.as_ref().map(|p| p.owner_id())
    }

    pub fn audit_records(&self) -> &[AuditRecord] {
        &self.audit_records
    }

    pub fn session_id(&self) -> Option<u64> {
        self.session_key.as_ref().map(session_id_from_key)
    }

    fn current_plan_hash(&self) -> [u8; DIGEST_LEN] {
        self.plan
            .as_ref()
            .map(|p| p.plan_hash())
            .unwrap_or([0u8; DIGEST_LEN])
    }

    fn append_audit(&mut self, event: AuditEvent) {
        self.audit_seq += 1;
        let hash = self.current_plan_hash();
        let record = self.hw.sign_audit(self.audit_seq, &self.id, event, &hash);
        self.audit_records.push(record);
    }

    /// Bind an owner-signed policy plan. The fresh quote embeds the plan hash
    /// in its user data so third parties can verify the binding.
    pub fn bind_plan(
        &mut self,
        plan: PolicyPlan,
        owner_sig: &SignedRecord,
        nonce: [u8; 16],
    ) -> Result<Quote, ProtocolError> {
        if self.state != EnclaveState::Prepared {
            return Err(ProtocolError::WrongState {
                op: "bind_plan",
                state: self.state,
            });
        }
        if owner_sig.signer_id != plan.owner_id() {
            return Err(ProtocolError::NotOwner(owner_sig.signer_id.clone()));
        }
        if owner_sig.payload != plan_binding_payload(&plan) {
            return Err(ProtocolError::Malformed("plan binding payload mismatch"));
        }
        self.registry.verify(owner_sig)?;
        let plan_hash = plan.plan_hash();
        self.plan = Some(plan);
        self.state = EnclaveState::PlanBound;
        let quote = self.hw.quote(self.measurement, plan_hash.to_vec(), nonce);
        self.append_audit(AuditEvent::PlanBound);
        Ok(quote)
    }

    /// Enclave side of the authenticated ECDH handshake. Verifies the owner's
    /// signature, rejects replayed nonces, derives the session key bound to
    /// this enclave's measurement and plan hash, and returns its ephemeral
    /// key attested by a quote.
    pub fn accept_handshake(
        &mut self,
        init: &HandshakeInit,
        rng: &mut impl RngCore,
    ) -> Result<HandshakeResponse, ProtocolError> {
        if self.state != EnclaveState::PlanBound {
            return Err(ProtocolError::WrongState {
                op: "establish_channel",
                state: self.state,
            });
        }
        let plan = self.plan.as_ref().expect("PlanBound implies plan");
        if init.owner_id != plan.owner_id() {
            return Err(ProtocolError::NotOwner(init.owner_id.clone()));
        }
        let transcript = handshake_transcript(&init.owner_id, &init.eph_pub, &init.nonce);
        let key = self
            .registry
            .key_of(&init.owner_id)
            .ok_or_else(|| ProtocolError::UnknownSigner(init.owner_id.clone()))?;
        key.verify(&transcript, &init.signature)
            .map_err(|_| ProtocolError::BadSignature(init.owner_id.clone()))?;
        if !self.seen_handshake_nonces.insert(init.nonce) {
            return Err(ProtocolError::ReplayedNonce);
        }

        let secret = EphemeralSecret::generate(rng);
        let eph_pub = secret.public();
        let shared = secret.agree(&init.eph_pub);
        let plan_hash = plan.plan_hash();
        let session_key = derive_session_key(&shared, &self.measurement, &plan_hash);
        self.session_key = Some(session_key);
        self.traffic_key = Some(derive_traffic_key(&session_key));

        let mut user_data = Vec::with_capacity(DIGEST_LEN + 32);
        user_data.extend_from_slice(&plan_hash);
        user_data.extend_from_slice(&eph_pub);
        let quote = self.hw.quote(self.measurement, user_data, init.nonce);
        self.append_audit(AuditEvent::ChannelEstablished);
        Ok(HandshakeResponse { eph_pub, quote })
    }

    /// Install adapters from an AEAD-sealed payload. The enclave reconstructs
    /// the expected associated data (its measurement followed by the plan
    /// hash) and rejects on any mismatch, tag failure, decode failure, or a
    /// sender other than the owner. On rejection the state is unchanged.
    pub fn onboard_adapters(
        &mut self,
        sender_id: &str,
        nonce: &[u8; AEAD_NONCE_LEN],
        ciphertext_and_tag: &[u8],
        associated_data: &[u8],
    ) -> Result<(), ProtocolError> {
        if self.state == EnclaveState::Revoked {
            return Err(ProtocolError::Revoked);
        }
        if self.state != EnclaveState::PlanBound {
            return Err(ProtocolError::WrongState {
                op: "onboard_adapters",
                state: self.state,
            });
        }
        let plan = self.plan.as_ref().expect("PlanBound implies plan");
        let owner_id = plan.owner_id().to_string();
        let base_model_id = plan.base_model_id().to_string();
        let plan_hash = plan.plan_hash();
        if sender_id != owner_id {
            self.append_audit(AuditEvent::OnboardRejected);
            return Err(ProtocolError::NotOwner(sender_id.to_string()));
        }
        let key = self.session_key.ok_or(ProtocolError::NoChannel)?;

        let expected_ad = onboarding_associated_data(&self.measurement, &plan_hash);
        if associated_data != expected_ad {
            self.append_audit(AuditEvent::OnboardRejected);
            return Err(ProtocolError::BindingMismatch);
        }
        let plaintext = match aead_open(&key, nonce, ciphertext_and_tag, &expected_ad) {
            Ok(p) => p,
            Err(_) => {
                self.append_audit(AuditEvent::OnboardRejected);
                return Err(ProtocolError::TagMismatch);
            }
        };
        let set = match deserialize_adapter_set(&plaintext) {
            Ok(s) => s,
            Err(e) => {
                self.append_audit(AuditEvent::OnboardRejected);
                return Err(ProtocolError::Decode(e));
            }
        };
        if set.provider_id() != owner_id {
            self.append_audit(AuditEvent::OnboardRejected);
            return Err(ProtocolError::OwnershipMismatch(format!(
                "payload provider {} vs plan owner {}",
                set.provider_id(),
                owner_id
            )));
        }
        if set.base_model_id() != base_model_id {
            self.append_audit(AuditEvent::OnboardRejected);
            return Err(ProtocolError::OwnershipMismatch(format!(
                "payload base model {} vs plan {}",
                set.base_model_id(),
                base_model_id
            )));
        }
        self.adapters = Some(set);
        self.state = EnclaveState::Onboarded;
        self.append_audit(AuditEvent::Onboarded);
        Ok(())
    }

    /// Apply an owner-signed policy update and emit a fresh quote carrying
    /// the new plan hash. Revocation updates take effect immediately.
    pub fn apply_policy_update(
        &mut self,
        update: &SignedRecord,
        nonce: [u8; 16],
    ) -> Result<Quote, ProtocolError> {
        if self.state == EnclaveState::Revoked {
            return Err(ProtocolError::Revoked);
        }
        if self.state != EnclaveState::Onboarded {
            return Err(ProtocolError::WrongState {
                op: "apply_policy_update",
                state: self.state,
            });
        }
        let plan = self.plan.as_mut().expect("Onboarded implies plan");
        if update.signer_id != plan.owner_id() {
            return Err(ProtocolError::NotOwner(update.signer_id.clone()));
        }
        self.registry.verify(update)?;
        let (enclave_id, prior_hash, op) = PolicyUpdate::parse(&update.payload)?;
        if enclave_id != self.id {
            return Err(ProtocolError::Malformed(
                "update addressed to another enclave",
            ));
        }
        if prior_hash != plan.plan_hash() {
            return Err(ProtocolError::Malformed(
                "update issued against a stale plan",
            ));
        }
        match op {
            PolicyUpdate::Add(entry) => {
                // a fresh lease restarts the client's request budget
                self.request_counters.remove(&entry.client_id);
                plan.upsert(entry)?;
            }
            PolicyUpdate::Remove { client_id } => {
                plan.remove(&client_id)?;
            }
        }
        let new_hash = plan.plan_hash();
        let quote = self.hw.quote(self.measurement, new_hash.to_vec(), nonce);
        self.append_audit(AuditEvent::PolicyUpdated);
        Ok(quote)
    }

    /// Lease check: the client must be present, unexpired (`now < expiry`,
    /// strict), and within its request budget. Allowed requests are counted.
    pub fn authorize_request(&mut self, client_id: &str, now: u64) -> Authorization {
        let Some(plan) = self.plan.as_ref() else {
            return Authorization::Denied(DenyReason::UnknownClient);
        };
        if self.state != EnclaveState::Onboarded {
            return Authorization::Denied(DenyReason::UnknownClient);
        }
        let Some(entry) = plan.entry(client_id) else {
            return Authorization::Denied(DenyReason::UnknownClient);
        };
        if let Some(expiry) = entry.expiry {
            if now >= expiry {
                return Authorization::Denied(DenyReason::LeaseExpired);
            }
        }
        let counter = self
            .request_counters
            .entry(client_id.to_string())
            .or_insert(0);
        if let Some(max) = entry.max_requests {
            if *counter >= max {
                return Authorization::Denied(DenyReason::RequestBudgetExhausted);
            }
        }
        *counter += 1;
        Authorization::Allowed
    }

    /// Revoke the enclave: verify the owner-signed request, zero all adapter,
    /// key, and policy buffers, and emit the final quote whose user data is
    /// the revocation marker followed by the plan hash. Idempotent: a revoked
    /// enclave returns its cached final quote.
    pub fn revoke(
        &mut self,
        request: &SignedRecord,
        nonce: [u8; 16],
    ) -> Result<Quote, ProtocolError> {
        if self.state == EnclaveState::Revoked {
            return Ok(self
                .final_quote
                .clone()
                .expect("revoked enclave has final quote"));
        }
        if self.state != EnclaveState::Onboarded {
            return Err(ProtocolError::WrongState {
                op: "revoke",
                state: self.state,
            });
        }
        let plan = self.plan.as_ref().expect("Onboarded implies plan");
        let plan_hash = plan.plan_hash();
        if request.signer_id != plan.owner_id() {
            return Err(ProtocolError::NotOwner(request.signer_id.clone()));
        }
        if request.payload != revoke_payload(&self.id, &plan_hash) {
            return Err(ProtocolError::Malformed("revocation payload mismatch"));
        }
        self.registry.verify(request)?;

        // erase before transitioning; buffers stay allocated but zeroed
        if let Some(adapters) = self.adapters.as_mut() {
            adapters.zeroize();
        }
        if let Some(k) = self.session_key.as_mut() {
            *k = [0u8; SESSION_KEY_LEN];
        }
        if let Some(k) = self.traffic_key.as_mut() {
            *k = [0u8; SESSION_KEY_LEN];
        }
        if let Some(plan) = self.plan.as_mut() {
            plan.entries.clear();
        }
        self.request_counters.clear();

        self.state = EnclaveState::Revoked;
        let mut user_data = Vec::with_capacity(REVOKED_MARKER.len() + DIGEST_LEN);
        user_data.extend_from_slice(REVOKED_MARKER);
        user_data.extend_from_slice(&plan_hash);
        let quote = self.hw.quote(self.measurement, user_data, nonce);
        self.final_quote = Some(quote.clone());
        self.append_audit(AuditEvent::Revoked);
        Ok(quote)
    }

    /// Sites where this enclave will contribute deltas. Site identifiers are
    /// metadata the host needs for routing; no adapter values are exposed.
    pub fn declared_active_sites(&self) -> Result<Vec<SiteId>, ProtocolError> {
        if self.state == EnclaveState::Revoked {
            return Err(ProtocolError::Revoked);
        }
        match self.adapters.as_ref() {
            Some(set) if self.state == EnclaveState::Onboarded => Ok(set.active_sites()),
            _ => Err(ProtocolError::WrongState {
                op: "declared_active_sites",
                state: self.state,
            }),
        }
    }

    pub(crate) fn traffic_key_bytes(&self) -> Option<&[u8; SESSION_KEY_LEN]> {
        self.traffic_key.as_ref()
    }

    pub(crate) fn adapters_ref(&self) -> Option<&ProviderAdapterSet> {
        self.adapters.as_ref()
    }

    pub(crate) fn record_event(&mut self, event: AuditEvent) {
        self.append_audit(event);
    }

    /// Erasure inspection, compiled only for test builds.
    #[cfg(any(test, feature = "test-inspect"))]
    pub fn inspect_for_test(&self) -> ErasureReport {
        let adapters_zeroed = self
            .adapters
            .as_ref()
            .map(|s| s.is_all_zero())
            .unwrap_or(true);
        let key_zeroed = self
            .session_key
            .map(|k| k == [0u8; SESSION_KEY_LEN])
            .unwrap_or(true)
            && self
                .traffic_key
                .map(|k| k == [0u8; SESSION_KEY_LEN])
                .unwrap_or(true);
        let policy_zeroed = self
            .plan
            .as_ref()
            .map(|p| p.entries.is_empty())
            .unwrap_or(true)
            && self.request_counters.is_empty();
        ErasureReport {
            adapters_zeroed,
            key_zeroed,
            policy_zeroed,
            erased: adapters_zeroed && key_zeroed && policy_zeroed,
        }
    }
}

/// Snapshot of which secret-bearing buffers are all-zero.
#[cfg(any(test, feature = "test-inspect"))]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErasureReport {
    pub adapters_zeroed: bool,
    pub key_zeroed: bool,
    pub policy_zeroed: bool,
    pub erased: bool,
}

/// Associated data binding an onboarding payload to one enclave and plan:
/// `measurement ‖ plan_hash`.
pub fn onboarding_associated_data(
    measurement: &[u8; DIGEST_LEN],
    plan_hash: &[u8; DIGEST_LEN],
) -> Vec<u8> {
    let mut ad = Vec::with_capacity(2 * DIGEST_LEN);
    ad.extend_from_slice(measurement);
    ad.extend_from_slice(plan_hash);
    ad
}

/// Owner-side helper: seal an adapter payload for onboarding.
pub fn seal_onboarding_payload(
    channel: &OwnerChannel,
    payload: &[u8],
    measurement: &[u8; DIGEST_LEN],
    plan_hash: &[u8; DIGEST_LEN],
    rng: &mut impl RngCore,
) -> ([u8; AEAD_NONCE_LEN], Vec<u8>, Vec<u8>) {
    let mut nonce = [0u8; AEAD_NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let ad = onboarding_associated_data(measurement, plan_hash);
    let ciphertext = crate::crypto::aead_seal(&channel.session_key, &nonce, payload, &ad);
    (nonce, ciphertext, ad)
}
