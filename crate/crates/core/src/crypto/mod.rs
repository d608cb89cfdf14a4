//! Cryptographic primitives for the alignment and coreset protocols.

pub mod codec;
pub mod envelope;
pub mod oprf;
pub mod rsa_blind;

use thiserror::Error;

pub use envelope::{envelope_open, envelope_seal, SealedEnvelope, SealingKeyPair, SealingPublicKey};
pub use oprf::{dh_oprf, GroupElement, OprfKey};
pub use rsa_blind::{blind, sign_blinded, sign_direct, unblind, RsaKeyPair, RsaPublicKey};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("blinding factor is not coprime to the modulus")]
    NotCoprime,
    #[error("value out of range for the modulus")]
    OutOfRange,
    #[error("OPRF key must be non-zero")]
    ZeroKey,
    #[error("invalid group element encoding")]
    InvalidElement,
    #[error("key generation failed: {0}")]
    KeyGeneration(String),
    #[error("envelope sealed for a different key")]
    KeyMismatch,
    #[error("envelope failed authentication")]
    Authentication,
    #[error("sealing failed")]
    Seal,
}
