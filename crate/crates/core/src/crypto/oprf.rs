//! Diffie-Hellman OPRF over Ristretto255: `F_k(x) = H2(H1(x)^k)`.
//!
//! The interactive form lets a receiver learn `F_k(x)` without revealing `x`:
//! it sends `H1(x)^b`, the key holder raises to `k`, and the receiver strips `b`.

use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256, Sha512};

use super::CryptoError;
use crate::data::SampleId;

pub const ELEMENT_BYTES: usize = 32;

const H1_TAG: &[u8] = b"treecss/oprf/h1";
const H2_TAG: &[u8] = b"treecss/oprf/h2";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GroupElement([u8; ELEMENT_BYTES]);

impl GroupElement {
    pub fn from_point(p: &RistrettoPoint) -> Self {
        GroupElement(p.compress().to_bytes())
    }

    /// Parses a canonical encoding; rejects bytes that are not a group element.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; ELEMENT_BYTES] = bytes.try_into().map_err(|_| CryptoError::InvalidElement)?;
        let e = GroupElement(arr);
        e.to_point()?;
        Ok(e)
    }

    pub fn to_point(&self) -> Result<RistrettoPoint, CryptoError> {
        CompressedRistretto(self.0)
            .decompress()
            .ok_or(CryptoError::InvalidElement)
    }

    pub fn as_bytes(&self) -> &[u8; ELEMENT_BYTES] {
        &self.0
    }
}

impl AsRef<[u8]> for GroupElement {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

/// Non-zero OPRF scalar.
#[derive(Clone)]
pub struct OprfKey(Scalar);

impl OprfKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        loop {
            let s = Scalar::random(rng);
            if s != Scalar::ZERO {
                return OprfKey(s);
            }
        }
    }

    pub fn from_scalar(s: Scalar) -> Result<Self, CryptoError> {
        if s == Scalar::ZERO {
            return Err(CryptoError::ZeroKey);
        }
        Ok(OprfKey(s))
    }

    pub fn from_u64(k: u64) -> Result<Self, CryptoError> {
        Self::from_scalar(Scalar::from(k))
    }

    pub fn scalar(&self) -> &Scalar {
        &self.0
    }

    /// Raises a receiver's blinded element to the key.
    pub fn evaluate(&self, blinded: &GroupElement) -> Result<GroupElement, CryptoError> {
        Ok(GroupElement::from_point(&(blinded.to_point()? * self.0)))
    }

    /// Raises an already-hashed point to the key.
    pub fn apply(&self, point: &RistrettoPoint) -> RistrettoPoint {
        point * self.0
    }
}

pub fn hash_to_group(id: SampleId) -> RistrettoPoint {
    let mut input = Vec::with_capacity(H1_TAG.len() + 8);
    input.extend_from_slice(H1_TAG);
    input.extend_from_slice(&id.to_le_bytes());
    RistrettoPoint::hash_from_bytes::<Sha512>(&input)
}

pub fn finalize(point: &RistrettoPoint) -> [u8; 32] {
    Sha256::new()
        .chain_update(H2_TAG)
        .chain_update(point.compress().as_bytes())
        .finalize()
        .into()
}

pub fn dh_oprf(key: &OprfKey, id: SampleId) -> [u8; 32] {
    finalize(&key.apply(&hash_to_group(id)))
}

/// Receiver-side blinding state for one element.
pub struct Blinded {
    pub element: GroupElement,
    blind: Scalar,
}

pub fn blind<R: RngCore + CryptoRng>(id: SampleId, rng: &mut R) -> Blinded {
    let b = OprfKey::generate(rng).0;
    Blinded {
        element: GroupElement::from_point(&(hash_to_group(id) * b)),
        blind: b,
    }
}

impl Blinded {
    /// Strips the blind from the key holder's answer and finalizes.
    pub fn finalize(&self, evaluated: &GroupElement) -> Result<[u8; 32], CryptoError> {
        Ok(finalize(&(evaluated.to_point()? * self.blind.invert())))
    }
}
