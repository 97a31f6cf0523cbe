//! Cryptographic primitives used by the lifecycle protocol: SHA-256 digests,
//! Ed25519 signatures, X25519 key agreement, HKDF-SHA256 key derivation,
//! AES-256-GCM sealing, and HMAC-SHA256 traffic MACs.
//!
//! Keys are generated from caller-supplied RNGs so whole scenarios stay
//! deterministic under a single seed.

use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, KeyInit, Nonce};
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand_core::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const SESSION_KEY_LEN: usize = 32;
pub const AEAD_NONCE_LEN: usize = 12;
pub const AEAD_TAG_LEN: usize = 16;
pub const MAC_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("signature verification failed")]
    BadSignature,
    #[error("AEAD authentication failed")]
    AeadFailure,
    #[error("malformed key or signature material: {0}")]
    Malformed(&'static str),
}

/// SHA-256 digest.
pub fn sha256(data: &[u8]) -> [u8; DIGEST_LEN] {
    let mut h = Sha256::new();
    h.update(data);
    h.finalize().into()
}

// --- signatures ---------------------------------------------------------------

/// Long-term Ed25519 signing key (owners, and the simulated attestation
/// hardware).
#[derive(Clone)]
pub struct SigningKey {
    inner: ed25519_dalek::SigningKey,
}

/// Public verification half of a [`SigningKey`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyingKey {
    inner: ed25519_dalek::VerifyingKey,
}

impl SigningKey {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self {
            inner: ed25519_dalek::SigningKey::from_bytes(&seed),
        }
    }

    pub fn verifying_key(&self) -> VerifyingKey {
        VerifyingKey {
            inner: self.inner.verifying_key(),
        }
    }

    pub fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        self.inner.sign(msg).to_bytes()
    }
}

impl std::fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SigningKey(..)")
    }
}

impl VerifyingKey {
    pub fn verify(&self, msg: &[u8], signature: &[u8]) -> Result<(), CryptoError> {
        let sig_bytes: [u8; SIGNATURE_LEN] = signature
            .try_into()
            .map_err(|_| CryptoError::Malformed("signature length"))?;
        let sig = ed25519_dalek::Signature::from_bytes(&sig_bytes);
        self.inner
            .verify(msg, &sig)
            .map_err(|_| CryptoError::BadSignature)
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.inner.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Result<Self, CryptoError> {
        ed25519_dalek::VerifyingKey::from_bytes(bytes)
            .map(|inner| Self { inner })
            .map_err(|_| CryptoError::Malformed("verifying key"))
    }
}

// --- key agreement and derivation ----------------------------------------------

/// Ephemeral X25519 secret for one handshake.
pub struct EphemeralSecret {
    inner: x25519_dalek::StaticSecret,
}

impl EphemeralSecret {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self {
            inner: x25519_dalek::StaticSecret::from(seed),
        }
    }

    pub fn public(&self) -> [u8; 32] {
        x25519_dalek::PublicKey::from(&self.inner).to_bytes()
    }

    pub fn agree(&self, peer_public: &[u8; 32]) -> [u8; 32] {
        let peer = x25519_dalek::PublicKey::from(*peer_public);
        self.inner.diffie_hellman(&peer).to_bytes()
    }
}

impl std::fmt::Debug for EphemeralSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("EphemeralSecret(..)")
    }
}

/// Extract-then-expand derivation: HKDF-SHA256(ikm, info) -> 32 bytes.
pub fn derive_key(ikm: &[u8], info: &[u8]) -> [u8; SESSION_KEY_LEN] {
    let hk = Hkdf::<Sha256>::new(None, ikm);
    let mut out = [0u8; SESSION_KEY_LEN];
    hk.expand(info, &mut out)
        .expect("32 bytes is a valid HKDF length");
    out
}

// --- AEAD -----------------------------------------------------------------------

/// AES-256-GCM seal. Output is ciphertext with the 16-byte tag appended.
pub fn aead_seal(
    key: &[u8; SESSION_KEY_LEN],
    nonce: &[u8; AEAD_NONCE_LEN],
    plaintext: &[u8],
    associated_data: &[u8],
) -> Vec<u8> {
    let cipher = Aes256Gcm::new(key.into());
    cipher
        .encrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: plaintext,
                aad: associated_data,
            },
        )
        .expect("AES-GCM encryption is infallible for in-memory buffers")
}

/// AES-256-GCM open. Fails closed on any tag mismatch.
pub fn aead_open(
    key: &[u8; SESSION_KEY_LEN],
    nonce: &[u8; AEAD_NONCE_LEN],
    ciphertext_and_tag: &[u8],
    associated_data: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = Aes256Gcm::new(key.into());
    cipher
        .decrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: ciphertext_and_tag,
                aad: associated_data,
            },
        )
        .map_err(|_| CryptoError::AeadFailure)
}

// --- MACs -----------------------------------------------------------------------

type HmacSha256 = Hmac<Sha256>;

/// HMAC-SHA256 over a message.
pub fn mac(key: &[u8; SESSION_KEY_LEN], msg: &[u8]) -> [u8; MAC_LEN] {
    let mut m = <HmacSha256 as Mac>::new_from_slice(key).expect("any key length is valid for HMAC");
    m.update(msg);
    m.finalize().into_bytes().into()
}

/// Constant-time HMAC verification.
pub fn mac_verify(key: &[u8; SESSION_KEY_LEN], msg: &[u8], tag: &[u8]) -> bool {
    let mut m = <HmacSha256 as Mac>::new_from_slice(key).expect("any key length is valid for HMAC");
    m.update(msg);
    m.verify_slice(tag).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sign_verify_roundtrip_and_tamper() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sk = SigningKey::generate(&mut rng);
        let vk = sk.verifying_key();
        let sig = sk.sign(b"hello");
        assert!(vk.verify(b"hello", &sig).is_ok());
        assert!(vk.verify(b"hellO", &sig).is_err());
        let mut bad = sig;
        bad[0] ^= 1;
        assert!(vk.verify(b"hello", &bad).is_err());
    }

    #[test]
    fn ecdh_both_sides_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = EphemeralSecret::generate(&mut rng);
        let b = EphemeralSecret::generate(&mut rng);
        assert_eq!(a.agree(&b.public()), b.agree(&a.public()));
    }

    #[test]
    fn derive_key_separates_info() {
        let k1 = derive_key(b"secret", b"label-a");
        let k2 = derive_key(b"secret", b"label-b");
        assert_ne!(k1, k2);
        assert_eq!(k1, derive_key(b"secret", b"label-a"));
    }

    #[test]
    fn aead_roundtrip_and_tamper_rejection() {
        let key = [7u8; 32];
        let nonce = [9u8; 12];
        let sealed = aead_seal(&key, &nonce, b"payload", b"binding");
        assert_eq!(
            aead_open(&key, &nonce, &sealed, b"binding").unwrap(),
            b"payload"
        );
        assert!(aead_open(&key, &nonce, &sealed, b"other").is_err());
        let mut bad = sealed.clone();
        bad[0] ^= 1;
        assert!(aead_open(&key, &nonce, &bad, b"binding").is_err());
    }

    #[test]
    fn mac_verifies_and_rejects_flips() {
        let key = [3u8; 32];
        let tag = mac(&key, b"frame");
        assert!(mac_verify(&key, b"frame", &tag));
        let mut bad = tag;
        bad[31] ^= 0x80;
        assert!(!mac_verify(&key, b"frame", &bad));
    }
}
