//! Sealed envelopes: anonymous authenticated public-key encryption, used where
//! results travel through the aggregation server, which never holds the key.

use crypto_box::{PublicKey, SecretKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use super::codec::{put_prefixed, CodecError, Reader};
use super::CryptoError;

pub const KEY_ID_BYTES: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealingPublicKey(PublicKey);

impl SealingPublicKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        SealingPublicKey(PublicKey::from(bytes))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        *self.0.as_bytes()
    }

    pub fn key_id(&self) -> [u8; KEY_ID_BYTES] {
        let digest = Sha256::digest(self.0.as_bytes());
        digest[..KEY_ID_BYTES].try_into().expect("digest is 32 bytes")
    }
}

#[derive(Clone)]
pub struct SealingKeyPair {
    secret: SecretKey,
    public: SealingPublicKey,
}

impl std::fmt::Debug for SealingKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SealingKeyPair")
            .field("key_id", &self.public.key_id())
            .finish_non_exhaustive()
    }
}

impl SealingKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_secret_bytes(SecretKey::generate(rng).to_bytes())
    }

    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let secret = SecretKey::from(bytes);
        let public = SealingPublicKey(secret.public_key());
        SealingKeyPair { secret, public }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }

    pub fn public(&self) -> &SealingPublicKey {
        &self.public
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedEnvelope {
    pub ciphertext: Vec<u8>,
    pub recipient_key_id: [u8; KEY_ID_BYTES],
}

impl SealedEnvelope {
    /// `[key id][u32 length][ciphertext]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(KEY_ID_BYTES + 4 + self.ciphertext.len());
        out.extend_from_slice(&self.recipient_key_id);
        put_prefixed(&mut out, &self.ciphertext);
        out
    }

    pub fn read(reader: &mut Reader<'_>) -> Result<Self, CodecError> {
        let recipient_key_id = reader.array()?;
        let ciphertext = reader.prefixed()?.to_vec();
        Ok(SealedEnvelope {
            ciphertext,
            recipient_key_id,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let env = Self::read(&mut r)?;
        r.finish()?;
        Ok(env)
    }

    pub fn encoded_len(&self) -> usize {
        KEY_ID_BYTES + 4 + self.ciphertext.len()
    }
}

/// Ciphertext overhead of a sealed box: ephemeral key plus tag.
pub const SEAL_OVERHEAD: usize = crypto_box::SEALBYTES;

pub fn envelope_seal<R: RngCore + CryptoRng>(
    plaintext: &[u8],
    pk: &SealingPublicKey,
    rng: &mut R,
) -> Result<SealedEnvelope, CryptoError> {
    let ciphertext = pk.0.seal(rng, plaintext).map_err(|_| CryptoError::Seal)?;
    Ok(SealedEnvelope {
        ciphertext,
        recipient_key_id: pk.key_id(),
    })
}

pub fn envelope_open(env: &SealedEnvelope, keys: &SealingKeyPair) -> Result<Vec<u8>, CryptoError> {
    if env.recipient_key_id != keys.public.key_id() {
        return Err(CryptoError::KeyMismatch);
    }
    keys.secret
        .unseal(&env.ciphertext)
        .map_err(|_| CryptoError::Authentication)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn seal_open_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let keys = SealingKeyPair::generate(&mut rng);
        let plaintext: Vec<u8> = (0..1024).map(|_| rng.gen()).collect();
        let env = envelope_seal(&plaintext, keys.public(), &mut rng).unwrap();
        assert_eq!(env.ciphertext.len(), plaintext.len() + SEAL_OVERHEAD);
        let env = SealedEnvelope::from_bytes(&env.to_bytes()).unwrap();
        assert_eq!(envelope_open(&env, &keys).unwrap(), plaintext);
    }

    #[test]
    fn empty_plaintext() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let keys = SealingKeyPair::generate(&mut rng);
        let env = envelope_seal(&[], keys.public(), &mut rng).unwrap();
        assert!(envelope_open(&env, &keys).unwrap().is_empty());
    }

    #[test]
    fn wrong_key_fails_explicitly() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let alice = SealingKeyPair::generate(&mut rng);
        let eve = SealingKeyPair::generate(&mut rng);
        let env = envelope_seal(b"ids", alice.public(), &mut rng).unwrap();
        assert_eq!(envelope_open(&env, &eve), Err(CryptoError::KeyMismatch));
        // even with a forged key id the AEAD check refuses
        let forged = SealedEnvelope {
            recipient_key_id: eve.public().key_id(),
            ..env.clone()
        };
        assert_eq!(envelope_open(&forged, &eve), Err(CryptoError::Authentication));
        let mut tampered = env;
        tampered.ciphertext[40] ^= 1;
        assert_eq!(envelope_open(&tampered, &alice), Err(CryptoError::Authentication));
    }

    #[test]
    fn secret_bytes_restore_the_pair() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let keys = SealingKeyPair::generate(&mut rng);
        let again = SealingKeyPair::from_secret_bytes(keys.secret_bytes());
        assert_eq!(again.public(), keys.public());
    }
}
