//! RSA blind signatures over hashed sample ids.
//!
//! `H(x)` is SHA-256 of the id reduced mod n; signatures are compared through a
//! second hash `H'(sig)` so the receiver only ever matches 32-byte digests.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::One;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use super::codec::to_fixed_be;
use super::CryptoError;
use crate::data::SampleId;

const H1_TAG: &[u8] = b"treecss/rsa-psi/h1";
const H2_TAG: &[u8] = b"treecss/rsa-psi/h2";

pub const DEFAULT_MODULUS_BITS: usize = 2048;
pub const DEFAULT_EXPONENT: u32 = 65_537;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RsaPublicKey {
    n: BigUint,
    e: BigUint,
}

impl RsaPublicKey {
    pub fn new(n: BigUint, e: BigUint) -> Result<Self, CryptoError> {
        if n <= BigUint::one() || e <= BigUint::one() {
            return Err(CryptoError::OutOfRange);
        }
        Ok(RsaPublicKey { n, e })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn e(&self) -> &BigUint {
        &self.e
    }

    /// Width in bytes of every fixed-width residue on the wire.
    pub fn element_bytes(&self) -> usize {
        (self.n.bits() as usize).div_ceil(8)
    }
}

/// Private key with CRT components.
#[derive(Clone)]
pub struct RsaKeyPair {
    public: RsaPublicKey,
    d: BigUint,
    p: BigUint,
    q: BigUint,
    dp: BigUint,
    dq: BigUint,
    qinv: BigUint,
}

impl std::fmt::Debug for RsaKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RsaKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

fn from_dig(v: &rsa::BigUint) -> BigUint {
    BigUint::from_bytes_be(&v.to_bytes_be())
}

impl RsaKeyPair {
    /// Generates a two-prime key whose modulus has exactly `bits` bits.
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, bits: usize) -> Result<Self, CryptoError> {
        use rsa::traits::{PrivateKeyParts, PublicKeyParts};

        let key = rsa::RsaPrivateKey::new_with_exp(rng, bits, &rsa::BigUint::from(DEFAULT_EXPONENT))
            .map_err(|e| CryptoError::KeyGeneration(e.to_string()))?;
        let primes = key.primes();
        if primes.len() != 2 {
            return Err(CryptoError::KeyGeneration(String::from("expected two primes")));
        }
        Self::from_primes(from_dig(&primes[0]), from_dig(&primes[1]), from_dig(key.e()))
    }

    /// Builds a key from primes `p != q` and public exponent `e`, with
    /// `d = e^-1 mod lcm(p-1, q-1)`.
    pub fn from_primes(p: BigUint, q: BigUint, e: BigUint) -> Result<Self, CryptoError> {
        let one = BigUint::one();
        if p == q || p <= one || q <= one {
            return Err(CryptoError::KeyGeneration(String::from("bad primes")));
        }
        let lambda = (&p - &one).lcm(&(&q - &one));
        let d = e.modinv(&lambda).ok_or(CryptoError::NotCoprime)?;
        let dp = &d % (&p - &one);
        let dq = &d % (&q - &one);
        let qinv = q.modinv(&p).ok_or(CryptoError::NotCoprime)?;
        Ok(RsaKeyPair {
            public: RsaPublicKey::new(&p * &q, e)?,
            d,
            p,
            q,
            dp,
            dq,
            qinv,
        })
    }

    pub fn public(&self) -> &RsaPublicKey {
        &self.public
    }

    pub fn d(&self) -> &BigUint {
        &self.d
    }

    pub fn primes(&self) -> (&BigUint, &BigUint) {
        (&self.p, &self.q)
    }

    /// `x^d mod n` via the Chinese remainder theorem.
    fn private_op(&self, x: &BigUint) -> BigUint {
        let m1 = x.modpow(&self.dp, &self.p);
        let m2 = x.modpow(&self.dq, &self.q);
        let m2p = &m2 % &self.p;
        let diff = if m1 >= m2p { m1 - m2p } else { &self.p + m1 - m2p };
        let h = (&self.qinv * diff) % &self.p;
        m2 + h * &self.q
    }
}

/// `H(x)`: SHA-256 of the id as a big-endian integer, reduced mod n.
pub fn hash_to_modulus(id: SampleId, pk: &RsaPublicKey) -> BigUint {
    let digest = Sha256::new()
        .chain_update(H1_TAG)
        .chain_update(id.to_le_bytes())
        .finalize();
    BigUint::from_bytes_be(&digest) % &pk.n
}

/// Draws a blinding factor in `(1, n)` coprime to `n`, redrawing as needed.
pub fn random_blinding_factor<R: RngCore + CryptoRng>(rng: &mut R, pk: &RsaPublicKey) -> BigUint {
    let two = BigUint::from(2u32);
    loop {
        let r = rng.gen_biguint_range(&two, &pk.n);
        if r.gcd(&pk.n).is_one() {
            return r;
        }
    }
}

fn check_factor(r: &BigUint, pk: &RsaPublicKey) -> Result<(), CryptoError> {
    if *r <= BigUint::one() || *r >= pk.n {
        return Err(CryptoError::OutOfRange);
    }
    if !r.gcd(&pk.n).is_one() {
        return Err(CryptoError::NotCoprime);
    }
    Ok(())
}

/// `x * r^e mod n`.
pub fn blind(x: &BigUint, r: &BigUint, pk: &RsaPublicKey) -> Result<BigUint, CryptoError> {
    if *x >= pk.n {
        return Err(CryptoError::OutOfRange);
    }
    check_factor(r, pk)?;
    Ok((x * r.modpow(&pk.e, &pk.n)) % &pk.n)
}

pub fn sign_blinded(blinded: &BigUint, sk: &RsaKeyPair) -> Result<BigUint, CryptoError> {
    if *blinded >= sk.public.n {
        return Err(CryptoError::OutOfRange);
    }
    Ok(sk.private_op(blinded))
}

/// `s * r^-1 mod n`.
pub fn unblind(blind_sig: &BigUint, r: &BigUint, pk: &RsaPublicKey) -> Result<BigUint, CryptoError> {
    if *blind_sig >= pk.n {
        return Err(CryptoError::OutOfRange);
    }
    check_factor(r, pk)?;
    let inv = r.modinv(&pk.n).ok_or(CryptoError::NotCoprime)?;
    Ok((blind_sig * inv) % &pk.n)
}

pub fn sign_direct(x: &BigUint, sk: &RsaKeyPair) -> Result<BigUint, CryptoError> {
    if *x >= sk.public.n {
        return Err(CryptoError::OutOfRange);
    }
    Ok(sk.private_op(x))
}

/// `H'(sig)`: SHA-256 over the modulus-width encoding of the signature.
pub fn signature_digest(sig: &BigUint, pk: &RsaPublicKey) -> [u8; 32] {
    Sha256::new()
        .chain_update(H2_TAG)
        .chain_update(to_fixed_be(sig, pk.element_bytes()))
        .finalize()
        .into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn key(bits: usize, seed: u64) -> RsaKeyPair {
        RsaKeyPair::generate(&mut ChaCha20Rng::seed_from_u64(seed), bits).unwrap()
    }

    #[test]
    fn modulus_has_requested_width() {
        let k = key(512, 1);
        assert_eq!(k.public().n().bits(), 512);
        assert_eq!(k.public().element_bytes(), 64);
        assert_eq!(key(256, 2).public().element_bytes(), 32);
    }

    #[test]
    fn ed_is_one_mod_carmichael() {
        let k = key(512, 3);
        let (p, q) = k.primes();
        let one = BigUint::one();
        let lambda = (p - &one).lcm(&(q - &one));
        assert!(((k.public().e() * k.d()) % lambda).is_one());
    }

    #[test]
    fn one_signs_to_one() {
        let k = key(512, 4);
        let one = BigUint::one();
        assert_eq!(sign_direct(&one, &k).unwrap(), one);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let r = random_blinding_factor(&mut rng, k.public());
        let b = blind(&one, &r, k.public()).unwrap();
        let s = unblind(&sign_blinded(&b, &k).unwrap(), &r, k.public()).unwrap();
        assert_eq!(s, one);
    }

    #[test]
    fn rejects_bad_factor_and_range() {
        let k = key(256, 6);
        let pk = k.public();
        let (p, _) = k.primes();
        let x = BigUint::from(5u32);
        assert_eq!(blind(&x, p, pk), Err(CryptoError::NotCoprime));
        assert_eq!(blind(&x, &BigUint::one(), pk), Err(CryptoError::OutOfRange));
        assert_eq!(blind(pk.n(), &BigUint::from(3u32), pk), Err(CryptoError::OutOfRange));
        assert_eq!(sign_direct(pk.n(), &k), Err(CryptoError::OutOfRange));
    }

    #[test]
    fn blinded_values_do_not_repeat_for_fixed_input() {
        // For fixed x, x*r^e over random r behaves like a uniform residue:
        // bucket the top byte and run a chi-squared sanity check.
        let k = key(256, 7);
        let pk = k.public();
        let x = hash_to_modulus(SampleId(42), pk);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let trials = 4000;
        let buckets = 16usize;
        let mut counts = vec![0usize; buckets];
        let mut seen = std::collections::HashSet::new();
        for _ in 0..trials {
            let r = random_blinding_factor(&mut rng, pk);
            let b = blind(&x, &r, pk).unwrap();
            assert!(seen.insert(b.clone()));
            counts[((b * buckets) / pk.n()).try_into().unwrap_or(buckets - 1)] += 1;
        }
        let expected = trials as f64 / buckets as f64;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        // 15 degrees of freedom, p = 0.001 critical value 37.7
        assert!(chi2 < 37.7, "chi2 = {chi2}, counts = {counts:?}");
    }
}
