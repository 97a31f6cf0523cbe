//! Inference-time interface of an Onboarded enclave: MAC-verified activation
//! batches in, MAC'd delta batches out, one policy charge per batch.
//!
//! Batch frames (all integers little-endian):
//!
//! ```text
//! u32 length | frame type u8 | session id u64 | payload
//! activation payload: request_id u64 | client_id (u32 len + UTF-8)
//!   | site count u16 | per site (layer u32, projection u8)
//!   | per site vector (u32 dim + dim×f64) | mac(32)
//! delta payload:      request_id u64 | site count u16 | sites | vectors | mac(32)
//! denial payload:     request_id u64 | reason u8
//! ```

use thiserror::Error;

use crate::adapter::{Projection, SiteId};
use crate::aegisproto::{Authorization, DenyReason, EnclaveInstance, EnclaveState, ProtocolError};
use crate::audit::AuditEvent;
use crate::crypto::{mac, mac_verify, MAC_LEN, SESSION_KEY_LEN};
use crate::linalg::Vector;

pub const FRAME_ONBOARDING: u8 = 1;
pub const FRAME_ACTIVATION_BATCH: u8 = 2;
pub const FRAME_DELTA_BATCH: u8 = 3;
pub const FRAME_DENIAL: u8 = 4;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("batch must contain at least one site")]
    EmptyBatch,
    #[error("sites and activations differ in length: {0} vs {1}")]
    ParallelismViolation(usize, usize),
    #[error("batch sites must be ascending within a single layer segment")]
    NonContiguousSegment,
    #[error("MAC verification failed")]
    MacRejected,
    #[error("malformed frame: {0}")]
    MalformedFrame(&'static str),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Activations for a run of sites in one layer, MAC'd under the traffic key.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub request_id: u64,
    pub client_id: String,
    pub sites: Vec<SiteId>,
    pub activations: Vec<Vector>,
    pub mac: [u8; MAC_LEN],
}

/// Deltas parallel to the requested sites, MAC'd under the traffic key.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaBatch {
    pub request_id: u64,
    pub sites: Vec<SiteId>,
    pub deltas: Vec<Vector>,
    pub mac: [u8; MAC_LEN],
}

/// Outcome of handling one batch: deltas, or a policy denial.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchOutcome {
    Deltas(DeltaBatch),
    Denied { request_id: u64, reason: DenyReason },
}

fn check_segment(sites: &[SiteId]) -> Result<(), RuntimeError> {
    if sites.is_empty() {
        return Err(RuntimeError::EmptyBatch);
    }
    let layer = sites[0].layer;
    for pair in sites.windows(2) {
        if pair[1].layer != layer || pair[1] <= pair[0] {
            return Err(RuntimeError::NonContiguousSegment);
        }
    }
    Ok(())
}

impl ActivationBatch {
    /// Build a batch and compute its MAC.
    pub fn new(
        request_id: u64,
        client_id: impl Into<String>,
        sites: Vec<SiteId>,
        activations: Vec<Vector>,
        traffic_key: &[u8; SESSION_KEY_LEN],
    ) -> Result<Self, RuntimeError> {
        if sites.len() != activations.len() {
            return Err(RuntimeError::ParallelismViolation(
                sites.len(),
                activations.len(),
            ));
        }
        check_segment(&sites)?;
        let mut batch = Self {
            request_id,
            client_id: client_id.into(),
            sites,
            activations,
            mac: [0u8; MAC_LEN],
        };
        batch.mac = mac(traffic_key, &batch.canonical_bytes());
        Ok(batch)
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&(self.client_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.client_id.as_bytes());
        push_sites(&mut out, &self.sites);
        push_vectors(&mut out, &self.activations);
        out
    }

    pub fn verify_mac(&self, traffic_key: &[u8; SESSION_KEY_LEN]) -> bool {
        mac_verify(traffic_key, &self.canonical_bytes(), &self.mac)
    }

    /// Encoded frame, including the MAC.
    pub fn encode(&self, session_id: u64) -> Vec<u8> {
        let mut payload = self.canonical_bytes();
        payload.extend_from_slice(&self.mac);
        encode_frame(FRAME_ACTIVATION_BATCH, session_id, &payload)
    }

    pub fn decode(frame: &[u8]) -> Result<(u64, Self), RuntimeError> {
        let (frame_type, session_id, payload) = decode_frame(frame)?;
        if frame_type != FRAME_ACTIVATION_BATCH {
            return Err(RuntimeError::MalformedFrame("unexpected frame type"));
        }
        let mut r = FrameReader::new(payload);
        let request_id = r.u64()?;
        let client_id = r.string()?;
        let sites = r.sites()?;
        let activations = r.vectors(sites.len())?;
        let mac = r.mac()?;
        r.finish()?;
        Ok((
            session_id,
            Self {
                request_id,
                client_id,
                sites,
                activations,
                mac,
            },
        ))
    }
}

impl DeltaBatch {
    fn new_signed(
        request_id: u64,
        sites: Vec<SiteId>,
        deltas: Vec<Vector>,
        traffic_key: &[u8; SESSION_KEY_LEN],
    ) -> Self {
        let mut batch = Self {
            request_id,
            sites,
            deltas,
            mac: [0u8; MAC_LEN],
        };
        batch.mac = mac(traffic_key, &batch.canonical_bytes());
        batch
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.request_id.to_le_bytes());
        push_sites(&mut out, &self.sites);
        push_vectors(&mut out, &self.deltas);
        out
    }

    pub fn verify_mac(&self, traffic_key: &[u8; SESSION_KEY_LEN]) -> bool {
        mac_verify(traffic_key, &self.canonical_bytes(), &self.mac)
    }

    pub fn encode(&self, session_id: u64) -> Vec<u8> {
        let mut payload = self.canonical_bytes();
        payload.extend_from_slice(&self.mac);
        encode_frame(FRAME_DELTA_BATCH, session_id, &payload)
    }

    pub fn decode(frame: &[u8]) -> Result<(u64, Self), RuntimeError> {
        let (frame_type, session_id, payload) = decode_frame(frame)?;
        if frame_type != FRAME_DELTA_BATCH {
            return Err(RuntimeError::MalformedFrame("unexpected frame type"));
        }
        let mut r = FrameReader::new(payload);
        let request_id = r.u64()?;
        let sites = r.sites()?;
        let deltas = r.vectors(sites.len())?;
        let mac = r.mac()?;
        r.finish()?;
        Ok((
            session_id,
            Self {
                request_id,
                sites,
                deltas,
                mac,
            },
        ))
    }
}

/// Encode an onboarding frame: `sender (u32 len + UTF-8) | nonce(12) |
/// ciphertext with the 16-byte tag appended`.
pub fn encode_onboarding(
    session_id: u64,
    sender_id: &str,
    nonce: &[u8; crate::crypto::AEAD_NONCE_LEN],
    ciphertext_and_tag: &[u8],
) -> Vec<u8> {
    let mut payload = Vec::with_capacity(4 + sender_id.len() + 12 + ciphertext_and_tag.len());
    payload.extend_from_slice(&(sender_id.len() as u32).to_le_bytes());
    payload.extend_from_slice(sender_id.as_bytes());
    payload.extend_from_slice(nonce);
    payload.extend_from_slice(ciphertext_and_tag);
    encode_frame(FRAME_ONBOARDING, session_id, &payload)
}

#[allow(clippy::type_complexity)]
pub fn decode_onboarding(
    frame: &[u8],
) -> Result<(u64, String, [u8; crate::crypto::AEAD_NONCE_LEN], Vec<u8>), RuntimeError> {
    let (frame_type, session_id, payload) = decode_frame(frame)?;
    if frame_type != FRAME_ONBOARDING {
        return Err(RuntimeError::MalformedFrame("unexpected frame type"));
    }
    let mut r = FrameReader::new(payload);
    let sender_id = r.string()?;
    let nonce: [u8; crate::crypto::AEAD_NONCE_LEN] =
        r.take(crate::crypto::AEAD_NONCE_LEN)?.try_into().unwrap();
    let rest = r.buf[r.pos..].to_vec();
    if rest.len() < crate::crypto::AEAD_TAG_LEN {
        return Err(RuntimeError::MalformedFrame("onboarding payload too short"));
    }
    Ok((session_id, sender_id, nonce, rest))
}

/// Encode a denial response frame.
pub fn encode_denial(session_id: u64, request_id: u64, reason: &DenyReason) -> Vec<u8> {
    let mut payload = Vec::with_capacity(9);
    payload.extend_from_slice(&request_id.to_le_bytes());
    payload.push(match reason {
        DenyReason::UnknownClient => 0,
        DenyReason::LeaseExpired => 1,
        DenyReason::RequestBudgetExhausted => 2,
    });
    encode_frame(FRAME_DENIAL, session_id, &payload)
}

pub fn decode_denial(frame: &[u8]) -> Result<(u64, u64, DenyReason), RuntimeError> {
    let (frame_type, session_id, payload) = decode_frame(frame)?;
    if frame_type != FRAME_DENIAL {
        return Err(RuntimeError::MalformedFrame("unexpected frame type"));
    }
    let mut r = FrameReader::new(payload);
    let request_id = r.u64()?;
    let reason = match r.u8()? {
        0 => DenyReason::UnknownClient,
        1 => DenyReason::LeaseExpired,
        2 => DenyReason::RequestBudgetExhausted,
        _ => return Err(RuntimeError::MalformedFrame("unknown deny reason")),
    };
    r.finish()?;
    Ok((session_id, request_id, reason))
}

/// Peek at a response frame's type byte.
pub fn frame_type(frame: &[u8]) -> Result<u8, RuntimeError> {
    Ok(decode_frame(frame)?.0)
}

fn encode_frame(frame_type: u8, session_id: u64, payload: &[u8]) -> Vec<u8> {
    let body_len = 1 + 8 + payload.len();
    let mut out = Vec::with_capacity(4 + body_len);
    out.extend_from_slice(&(body_len as u32).to_le_bytes());
    out.push(frame_type);
    out.extend_from_slice(&session_id.to_le_bytes());
    out.extend_from_slice(payload);
    out
}

fn decode_frame(frame: &[u8]) -> Result<(u8, u64, &[u8]), RuntimeError> {
    if frame.len() < 13 {
        return Err(RuntimeError::MalformedFrame("frame too short"));
    }
    let len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
    if frame.len() != 4 + len {
        return Err(RuntimeError::MalformedFrame("length prefix mismatch"));
    }
    let frame_type = frame[4];
    let session_id = u64::from_le_bytes(frame[5..13].try_into().unwrap());
    Ok((frame_type, session_id, &frame[13..]))
}

fn push_sites(out: &mut Vec<u8>, sites: &[SiteId]) {
    out.extend_from_slice(&(sites.len() as u16).to_le_bytes());
    for s in sites {
        out.extend_from_slice(&s.layer.to_le_bytes());
        out.push(s.projection.ordinal());
    }
}

fn push_vectors(out: &mut Vec<u8>, vectors: &[Vector]) {
    for v in vectors {
        out.extend_from_slice(&(v.dim() as u32).to_le_bytes());
        for &x in v.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct FrameReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> FrameReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], RuntimeError> {
        if self.pos + n > self.buf.len() {
            return Err(RuntimeError::MalformedFrame("truncated payload"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, RuntimeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, RuntimeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, RuntimeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, RuntimeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, RuntimeError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| RuntimeError::MalformedFrame("invalid UTF-8"))
    }

    fn sites(&mut self) -> Result<Vec<SiteId>, RuntimeError> {
        let count = self.u16()? as usize;
        let mut sites = Vec::with_capacity(count);
        for _ in 0..count {
            let layer = self.u32()?;
            let tag = self.u8()?;
            let projection = Projection::from_ordinal(tag)
                .ok_or(RuntimeError::MalformedFrame("bad projection tag"))?;
            sites.push(SiteId::new(layer, projection));
        }
        Ok(sites)
    }

    fn vectors(&mut self, count: usize) -> Result<Vec<Vector>, RuntimeError> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let dim = self.u32()? as usize;
            // a claimed dimension must fit in the remaining payload
            if self.pos + dim.saturating_mul(8) > self.buf.len() {
                return Err(RuntimeError::MalformedFrame("truncated payload"));
            }
            let mut data = Vec::with_capacity(dim);
            for _ in 0..dim {
                data.push(f64::from_le_bytes(self.take(8)?.try_into().unwrap()));
            }
            out.push(Vector::new(data).map_err(|_| RuntimeError::MalformedFrame("empty vector"))?);
        }
        Ok(out)
    }

    fn mac(&mut self) -> Result<[u8; MAC_LEN], RuntimeError> {
        Ok(self.take(MAC_LEN)?.try_into().unwrap())
    }

    fn finish(&self) -> Result<(), RuntimeError> {
        if self.pos != self.buf.len() {
            return Err(RuntimeError::MalformedFrame("trailing bytes"));
        }
        Ok(())
    }
}

impl EnclaveInstance {
    /// Serve one activation batch.
    ///
    /// The MAC is checked first; a failed MAC is dropped with an audit record
    /// and no response. Policy is charged once per batch. Requested sites
    /// without an active adapter yield explicit zero deltas so the delta list
    /// stays parallel to the request.
    pub fn handle_activation_batch(
        &mut self,
        batch: &ActivationBatch,
        now: u64,
    ) -> Result<BatchOutcome, RuntimeError> {
        if self.state() == EnclaveState::Revoked {
            return Err(RuntimeError::Protocol(ProtocolError::Revoked));
        }
        if self.state() != EnclaveState::Onboarded {
            return Err(RuntimeError::Protocol(ProtocolError::WrongState {
                op: "handle_activation_batch",
                state: self.state(),
            }));
        }
        check_segment(&batch.sites)?;
        if batch.sites.len() != batch.activations.len() {
            return Err(RuntimeError::ParallelismViolation(
                batch.sites.len(),
                batch.activations.len(),
            ));
        }
        let traffic_key = *self
            .traffic_key_bytes()
            .ok_or(RuntimeError::Protocol(ProtocolError::NoChannel))?;
        if !batch.verify_mac(&traffic_key) {
            self.record_event(AuditEvent::MacFailure);
            return Err(RuntimeError::MacRejected);
        }

        match self.authorize_request(&batch.client_id, now) {
            Authorization::Allowed => {}
            Authorization::Denied(reason) => {
                self.record_event(AuditEvent::AuthorizeDenied);
                return Ok(BatchOutcome::Denied {
                    request_id: batch.request_id,
                    reason,
                });
            }
        }

        let adapters = self.adapters_ref().expect("Onboarded implies adapters");
        let mut deltas = Vec::with_capacity(batch.sites.len());
        for (site, activation) in batch.sites.iter().zip(&batch.activations) {
            let delta = match adapters.get(site) {
                Some(entry) if entry.active => entry
                    .adapter
                    .delta(activation)
                    .map_err(|_| RuntimeError::MalformedFrame("activation dimension"))?,
                _ => Vector::zeros(activation.dim()),
            };
            deltas.push(delta);
        }
        Ok(BatchOutcome::Deltas(DeltaBatch::new_signed(
            batch.request_id,
            batch.sites.clone(),
            deltas,
            &traffic_key,
        )))
    }
}
