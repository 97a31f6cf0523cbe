//! Append-only audit log of enclave lifecycle events.
//!
//! Every record is signed by the simulated attestation hardware. Records are
//! line-delimited JSON; per enclave the sequence numbers must count up from 1
//! without gaps, so both mutation and deletion are detectable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{SigningKey, VerifyingKey, SIGNATURE_LEN};

const AUDIT_DOMAIN: &[u8] = b"PKUS-AUDIT-V1";

/// Lifecycle and runtime events that produce audit records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditEvent {
    Prepared,
    PlanBound,
    ChannelEstablished,
    Onboarded,
    OnboardRejected,
    PolicyUpdated,
    AuthorizeDenied,
    MacFailure,
    Revoked,
}

impl AuditEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            AuditEvent::Prepared => "prepared",
            AuditEvent::PlanBound => "plan_bound",
            AuditEvent::ChannelEstablished => "channel_established",
            AuditEvent::Onboarded => "onboarded",
            AuditEvent::OnboardRejected => "onboard_rejected",
            AuditEvent::PolicyUpdated => "policy_updated",
            AuditEvent::AuthorizeDenied => "authorize_denied",
            AuditEvent::MacFailure => "mac_failure",
            AuditEvent::Revoked => "revoked",
        }
    }
}

/// One signed audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub enclave_id: String,
    pub event: AuditEvent,
    /// Hex SHA-256 of the plan in force when the event fired; zero before a
    /// plan is bound.
    pub plan_hash: String,
    /// Hex Ed25519 signature over the canonical record bytes.
    pub signature: String,
}

fn canonical_bytes(seq: u64, enclave_id: &str, event: AuditEvent, plan_hash: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + enclave_id.len());
    out.extend_from_slice(AUDIT_DOMAIN);
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&(enclave_id.len() as u32).to_le_bytes());
    out.extend_from_slice(enclave_id.as_bytes());
    let event_str = event.as_str();
    out.extend_from_slice(&(event_str.len() as u32).to_le_bytes());
    out.extend_from_slice(event_str.as_bytes());
    out.extend_from_slice(plan_hash);
    out
}

/// Build and sign a record.
pub fn sign_record(
    key: &SigningKey,
    seq: u64,
    enclave_id: &str,
    event: AuditEvent,
    plan_hash: &[u8; 32],
) -> AuditRecord {
    let sig = key.sign(&canonical_bytes(seq, enclave_id, event, plan_hash));
    AuditRecord {
        seq,
        enclave_id: enclave_id.to_string(),
        event,
        plan_hash: hex::encode(plan_hash),
        signature: hex::encode(sig),
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AuditVerifyError {
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: bad signature on record seq {seq} of enclave {enclave_id}")]
    BadSignature {
        line: usize,
        seq: u64,
        enclave_id: String,
    },
    #[error("line {line}: enclave {enclave_id} has seq {got}, expected {expected}")]
    SequenceGap {
        line: usize,
        enclave_id: String,
        expected: u64,
        got: u64,
    },
}

/// Verify one record's signature.
pub fn verify_record(record: &AuditRecord, key: &VerifyingKey) -> bool {
    let Ok(plan_hash_vec) = hex::decode(&record.plan_hash) else {
        return false;
    };
    let Ok(plan_hash) = <[u8; 32]>::try_from(plan_hash_vec.as_slice()) else {
        return false;
    };
    let Ok(sig) = hex::decode(&record.signature) else {
        return false;
    };
    if sig.len() != SIGNATURE_LEN {
        return false;
    }
    let bytes = canonical_bytes(record.seq, &record.enclave_id, record.event, &plan_hash);
    key.verify(&bytes, &sig).is_ok()
}

/// Serialize records as line-delimited JSON.
pub fn to_jsonl(records: &[AuditRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("audit record serializes"));
        out.push('\n');
    }
    out
}

/// Parse a line-delimited JSON log.
pub fn from_jsonl(text: &str) -> Result<Vec<AuditRecord>, AuditVerifyError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| AuditVerifyError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Re-verify a full log: every signature, and per-enclave sequence numbers
/// counting up from 1 with no gaps. Returns the first offending record.
pub fn verify_chain(records: &[AuditRecord], key: &VerifyingKey) -> Result<(), AuditVerifyError> {
    let mut next_seq: std::collections::BTreeMap<&str, u64> = std::collections::BTreeMap::new();
    for (i, record) in records.iter().enumerate() {
        let line = i + 1;
        if !verify_record(record, key) {
            return Err(AuditVerifyError::BadSignature {
                line,
                seq: record.seq,
                enclave_id: record.enclave_id.clone(),
            });
        }
        let expected = next_seq.entry(record.enclave_id.as_str()).or_insert(1);
        if record.seq != *expected {
            return Err(AuditVerifyError::SequenceGap {
                line,
                enclave_id: record.enclave_id.clone(),
                expected: *expected,
                got: record.seq,
            });
        }
        *expected += 1;
    }
    Ok(())
}
