//! Two-party PSI sessions over the bus.
//!
//! RSA blind signatures:
//!
//! ```text
//! sender   -> receiver  PkAnnounce           n, e
//! receiver -> sender    BlindedSet           H(x)·r^e  for x in R
//! sender   -> receiver  SignedSetAndDigests  signatures, then H'(H(y)^d) for y in S (sorted)
//! receiver -> sender    Done
//! ```
//!
//! OPRF: the sender holds `k` keys and the receiver files each of its
//! elements under a privately random key index, so every message is `k` groups.
//!
//! ```text
//! receiver -> sender    BlindedSet       k groups of H1(x)^b
//! sender   -> receiver  EvaluatedSet     same groups raised to k_j
//! sender   -> receiver  SenderMappedSet  k groups of F_{k_j}(y) for y in S (sorted)
//! receiver -> sender    Done
//! ```
//!
//! Only the receiver learns the intersection.

use std::collections::{BTreeSet, HashSet};

use num_bigint::BigUint;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::codec::{put_biguint, put_elements, to_fixed_be, CodecError, Reader};
use crate::crypto::oprf::{self, GroupElement, ELEMENT_BYTES};
use crate::crypto::rsa_blind::{self, RsaKeyPair, RsaPublicKey};
use crate::crypto::{CryptoError, OprfKey};
use crate::data::SampleId;
use crate::transport::{CommStats, Endpoint, MessageKind, PartyId, SessionId, TransportError};

pub const DIGEST_BYTES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TpsiProtocol {
    RsaBlind,
    Oprf,
}

impl TpsiProtocol {
    pub const ALL: [TpsiProtocol; 2] = [TpsiProtocol::RsaBlind, TpsiProtocol::Oprf];

    /// Whether the larger set should take the receiver role.
    pub fn larger_receives(self) -> bool {
        matches!(self, TpsiProtocol::Oprf)
    }
}

impl std::fmt::Display for TpsiProtocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TpsiProtocol::RsaBlind => "rsa",
            TpsiProtocol::Oprf => "oprf",
        })
    }
}

impl std::str::FromStr for TpsiProtocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rsa" | "rsa_blind" | "rsablind" => Ok(TpsiProtocol::RsaBlind),
            "oprf" => Ok(TpsiProtocol::Oprf),
            other => Err(format!("unknown TPSI protocol `{other}` (rsa|oprf)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TpsiConfig {
    pub rsa_bits: usize,
    pub oprf_keys: usize,
}

impl Default for TpsiConfig {
    fn default() -> Self {
        TpsiConfig {
            rsa_bits: rsa_blind::DEFAULT_MODULUS_BITS,
            oprf_keys: 3,
        }
    }
}

impl TpsiConfig {
    pub fn with_rsa_bits(rsa_bits: usize) -> Self {
        TpsiConfig {
            rsa_bits,
            ..Self::default()
        }
    }

    fn rsa_element_bytes(&self) -> usize {
        self.rsa_bits.div_ceil(8)
    }
}

#[derive(Debug, Error)]
pub enum TpsiError {
    #[error("session {session} aborted: {source}")]
    Transport { session: SessionId, source: TransportError },
    #[error("session {session} aborted: malformed message: {source}")]
    Codec { session: SessionId, source: CodecError },
    #[error("session {session} aborted: {source}")]
    Crypto { session: SessionId, source: CryptoError },
    #[error("session {session} aborted: {reason}")]
    Protocol { session: SessionId, reason: String },
    #[error("sender and receiver must be different parties")]
    SameParty,
}

impl TpsiError {
    pub fn session(&self) -> Option<SessionId> {
        match self {
            TpsiError::Transport { session, .. }
            | TpsiError::Codec { session, .. }
            | TpsiError::Crypto { session, .. }
            | TpsiError::Protocol { session, .. } => Some(*session),
            TpsiError::SameParty => None,
        }
    }

    /// True when this side only stopped because the peer aborted first.
    fn is_peer_abort(&self) -> bool {
        matches!(
            self,
            TpsiError::Transport {
                source: TransportError::ClosedSession(_),
                ..
            }
        )
    }
}

#[derive(Clone, Debug)]
pub struct TpsiSessionResult {
    pub session: SessionId,
    pub intersection: Vec<SampleId>,
    pub stats: CommStats,
}

/// Predicted element transfers with the default `k = 3` OPRF keys.
pub fn tpsi_cost(protocol: TpsiProtocol, sender_len: u64, receiver_len: u64) -> u64 {
    tpsi_cost_with(protocol, &TpsiConfig::default(), sender_len, receiver_len)
}

pub fn tpsi_cost_with(protocol: TpsiProtocol, cfg: &TpsiConfig, sender_len: u64, receiver_len: u64) -> u64 {
    match protocol {
        TpsiProtocol::RsaBlind => 2 * receiver_len + sender_len,
        TpsiProtocol::Oprf => 2 * receiver_len + cfg.oprf_keys as u64 * sender_len,
    }
}

/// Bytes outside the elements: length prefixes plus, for RSA, the public key.
pub fn framing_bytes(protocol: TpsiProtocol, cfg: &TpsiConfig) -> u64 {
    match protocol {
        TpsiProtocol::RsaBlind => {
            let e_len = BigUint::from(rsa_blind::DEFAULT_EXPONENT).to_bytes_be().len();
            (4 + cfg.rsa_element_bytes() + 4 + e_len + 4 + 4 + 4) as u64
        }
        TpsiProtocol::Oprf => 3 * 4 * cfg.oprf_keys as u64,
    }
}

/// Exact payload bytes of one session.
pub fn tpsi_bytes(protocol: TpsiProtocol, cfg: &TpsiConfig, sender_len: u64, receiver_len: u64) -> u64 {
    let elements = match protocol {
        TpsiProtocol::RsaBlind => {
            let w = cfg.rsa_element_bytes() as u64;
            2 * receiver_len * w + sender_len * DIGEST_BYTES as u64
        }
        TpsiProtocol::Oprf => DIGEST_BYTES as u64 * tpsi_cost_with(protocol, cfg, sender_len, receiver_len),
    };
    elements + framing_bytes(protocol, cfg)
}

fn canonical(ids: &[SampleId]) -> Vec<SampleId> {
    let set: BTreeSet<SampleId> = ids.iter().copied().collect();
    set.into_iter().collect()
}

struct Ctx<'a> {
    ep: &'a Endpoint,
    session: SessionId,
    peer: PartyId,
}

impl Ctx<'_> {
    fn send(&self, kind: MessageKind, payload: Vec<u8>) -> Result<(), TpsiError> {
        self.ep
            .send(self.peer, self.session, kind, payload)
            .map(|_| ())
            .map_err(|source| self.transport(source))
    }

    fn expect(&self, kind: MessageKind) -> Result<Vec<u8>, TpsiError> {
        let env = self
            .ep
            .expect(self.session, kind)
            .map_err(|source| self.transport(source))?;
        if env.from != self.peer {
            return Err(self.protocol(format!("message from {} instead of {}", env.from, self.peer)));
        }
        Ok(env.payload)
    }

    fn transport(&self, source: TransportError) -> TpsiError {
        TpsiError::Transport {
            session: self.session,
            source,
        }
    }

    fn codec(&self, source: CodecError) -> TpsiError {
        TpsiError::Codec {
            session: self.session,
            source,
        }
    }

    fn crypto(&self, source: CryptoError) -> TpsiError {
        TpsiError::Crypto {
            session: self.session,
            source,
        }
    }

    fn protocol(&self, reason: String) -> TpsiError {
        TpsiError::Protocol {
            session: self.session,
            reason,
        }
    }
}

/// Runs the sender side of a session. The sender learns nothing it returns.
pub fn tpsi_sender<R: RngCore>(
    protocol: TpsiProtocol,
    cfg: &TpsiConfig,
    ep: &Endpoint,
    session: SessionId,
    receiver: PartyId,
    ids: &[SampleId],
    rng: &mut R,
) -> Result<(), TpsiError> {
    let ctx = Ctx {
        ep,
        session,
        peer: receiver,
    };
    let ids = canonical(ids);
    let mut rng = ChaCha20Rng::seed_from_u64(rng.next_u64());
    match protocol {
        TpsiProtocol::RsaBlind => rsa_sender(&ctx, cfg, &ids, &mut rng),
        TpsiProtocol::Oprf => oprf_sender(&ctx, cfg, &ids, &mut rng),
    }
}

/// Runs the receiver side and returns the sorted intersection.
pub fn tpsi_receiver<R: RngCore>(
    protocol: TpsiProtocol,
    cfg: &TpsiConfig,
    ep: &Endpoint,
    session: SessionId,
    sender: PartyId,
    ids: &[SampleId],
    rng: &mut R,
) -> Result<Vec<SampleId>, TpsiError> {
    let ctx = Ctx {
        ep,
        session,
        peer: sender,
    };
    let ids = canonical(ids);
    let mut rng = ChaCha20Rng::seed_from_u64(rng.next_u64());
    match protocol {
        TpsiProtocol::RsaBlind => rsa_receiver(&ctx, cfg, &ids, &mut rng),
        TpsiProtocol::Oprf => oprf_receiver(&ctx, cfg, &ids, &mut rng),
    }
}

fn rsa_sender(ctx: &Ctx<'_>, cfg: &TpsiConfig, ids: &[SampleId], rng: &mut ChaCha20Rng) -> Result<(), TpsiError> {
    let key = RsaKeyPair::generate(rng, cfg.rsa_bits).map_err(|e| ctx.crypto(e))?;
    let pk = key.public();
    let width = pk.element_bytes();

    let mut msg = Vec::new();
    put_biguint(&mut msg, pk.n());
    put_biguint(&mut msg, pk.e());
    ctx.send(MessageKind::PkAnnounce, msg)?;

    let payload = ctx.expect(MessageKind::BlindedSet)?;
    let mut r = Reader::new(&payload);
    let blinded = r.elements(width).map_err(|e| ctx.codec(e))?;
    r.finish().map_err(|e| ctx.codec(e))?;

    let mut signed = Vec::with_capacity(blinded.len());
    for b in blinded {
        let s = rsa_blind::sign_blinded(&BigUint::from_bytes_be(b), &key).map_err(|e| ctx.crypto(e))?;
        signed.push(to_fixed_be(&s, width));
    }
    let mut digests: Vec<[u8; 32]> = Vec::with_capacity(ids.len());
    for id in ids {
        let sig = rsa_blind::sign_direct(&rsa_blind::hash_to_modulus(*id, pk), &key).map_err(|e| ctx.crypto(e))?;
        digests.push(rsa_blind::signature_digest(&sig, pk));
    }
    digests.sort_unstable();

    let mut msg = Vec::with_capacity(8 + signed.len() * width + digests.len() * DIGEST_BYTES);
    put_elements(&mut msg, &signed, width);
    put_elements(&mut msg, &digests, DIGEST_BYTES);
    ctx.send(MessageKind::SignedSetAndDigests, msg)?;

    let done = ctx.expect(MessageKind::Done)?;
    if !done.is_empty() {
        return Err(ctx.protocol(String::from("non-empty DONE")));
    }
    Ok(())
}

fn rsa_receiver(
    ctx: &Ctx<'_>,
    _cfg: &TpsiConfig,
    ids: &[SampleId],
    rng: &mut ChaCha20Rng,
) -> Result<Vec<SampleId>, TpsiError> {
    let payload = ctx.expect(MessageKind::PkAnnounce)?;
    let mut r = Reader::new(&payload);
    let n = r.biguint().map_err(|e| ctx.codec(e))?;
    let e = r.biguint().map_err(|e| ctx.codec(e))?;
    r.finish().map_err(|e| ctx.codec(e))?;
    let pk = RsaPublicKey::new(n, e).map_err(|e| ctx.crypto(e))?;
    let width = pk.element_bytes();

    let mut factors = Vec::with_capacity(ids.len());
    let mut blinded = Vec::with_capacity(ids.len());
    for id in ids {
        let r = rsa_blind::random_blinding_factor(rng, &pk);
        let b = rsa_blind::blind(&rsa_blind::hash_to_modulus(*id, &pk), &r, &pk).map_err(|e| ctx.crypto(e))?;
        blinded.push(to_fixed_be(&b, width));
        factors.push(r);
    }
    let mut msg = Vec::with_capacity(4 + blinded.len() * width);
    put_elements(&mut msg, &blinded, width);
    ctx.send(MessageKind::BlindedSet, msg)?;

    let payload = ctx.expect(MessageKind::SignedSetAndDigests)?;
    let mut r = Reader::new(&payload);
    let signed = r.elements(width).map_err(|e| ctx.codec(e))?;
    let sender_digests = r.elements(DIGEST_BYTES).map_err(|e| ctx.codec(e))?;
    r.finish().map_err(|e| ctx.codec(e))?;
    if signed.len() != ids.len() {
        return Err(ctx.protocol(format!("{} signatures for {} blinded values", signed.len(), ids.len())));
    }
    let sender_digests: HashSet<&[u8]> = sender_digests.into_iter().collect();

    let mut out = Vec::new();
    for ((id, s), factor) in ids.iter().zip(signed).zip(&factors) {
        let sig = rsa_blind::unblind(&BigUint::from_bytes_be(s), factor, &pk).map_err(|e| ctx.crypto(e))?;
        if sender_digests.contains(&rsa_blind::signature_digest(&sig, &pk)[..]) {
            out.push(*id);
        }
    }
    ctx.send(MessageKind::Done, Vec::new())?;
    Ok(out)
}

fn put_groups<E: AsRef<[u8]>>(buf: &mut Vec<u8>, groups: &[Vec<E>], width: usize) {
    for g in groups {
        put_elements(buf, g, width);
    }
}

fn read_groups<'a>(r: &mut Reader<'a>, k: usize, width: usize) -> Result<Vec<Vec<&'a [u8]>>, CodecError> {
    (0..k).map(|_| r.elements(width)).collect()
}

fn oprf_sender(ctx: &Ctx<'_>, cfg: &TpsiConfig, ids: &[SampleId], rng: &mut ChaCha20Rng) -> Result<(), TpsiError> {
    let k = cfg.oprf_keys;
    if k == 0 {
        return Err(ctx.protocol(String::from("no OPRF keys configured")));
    }
    let mut key_rng = rand_chacha::ChaCha20Rng::from_seed(rng.gen());
    let keys: Vec<OprfKey> = (0..k).map(|_| OprfKey::generate(&mut key_rng)).collect();

    let payload = ctx.expect(MessageKind::BlindedSet)?;
    let mut r = Reader::new(&payload);
    let groups = read_groups(&mut r, k, ELEMENT_BYTES).map_err(|e| ctx.codec(e))?;
    r.finish().map_err(|e| ctx.codec(e))?;

    let mut evaluated = Vec::with_capacity(k);
    for (key, group) in keys.iter().zip(&groups) {
        let mut out = Vec::with_capacity(group.len());
        for b in group {
            let elem = GroupElement::from_bytes(b).map_err(|e| ctx.crypto(e))?;
            out.push(key.evaluate(&elem).map_err(|e| ctx.crypto(e))?);
        }
        evaluated.push(out);
    }
    let mut msg = Vec::new();
    put_groups(&mut msg, &evaluated, ELEMENT_BYTES);
    ctx.send(MessageKind::EvaluatedSet, msg)?;

    let hashed: Vec<_> = ids.iter().map(|id| oprf::hash_to_group(*id)).collect();
    let mapped: Vec<Vec<[u8; 32]>> = keys
        .iter()
        .map(|key| {
            let mut g: Vec<[u8; 32]> = hashed.iter().map(|h| oprf::finalize(&key.apply(h))).collect();
            g.sort_unstable();
            g
        })
        .collect();
    let mut msg = Vec::with_capacity(4 * k + k * ids.len() * DIGEST_BYTES);
    put_groups(&mut msg, &mapped, DIGEST_BYTES);
    ctx.send(MessageKind::SenderMappedSet, msg)?;

    let done = ctx.expect(MessageKind::Done)?;
    if !done.is_empty() {
        return Err(ctx.protocol(String::from("non-empty DONE")));
    }
    Ok(())
}

fn oprf_receiver(
    ctx: &Ctx<'_>,
    cfg: &TpsiConfig,
    ids: &[SampleId],
    rng: &mut ChaCha20Rng,
) -> Result<Vec<SampleId>, TpsiError> {
    let k = cfg.oprf_keys;
    if k == 0 {
        return Err(ctx.protocol(String::from("no OPRF keys configured")));
    }
    // (id, blinding state) per key group
    let mut filed: Vec<Vec<(SampleId, oprf::Blinded)>> = (0..k).map(|_| Vec::new()).collect();
    for id in ids {
        let j = rng.gen_range(0..k);
        filed[j].push((*id, oprf::blind(*id, rng)));
    }
    let blinded: Vec<Vec<GroupElement>> = filed
        .iter()
        .map(|g| g.iter().map(|(_, b)| b.element).collect())
        .collect();
    let mut msg = Vec::with_capacity(4 * k + ids.len() * ELEMENT_BYTES);
    put_groups(&mut msg, &blinded, ELEMENT_BYTES);
    ctx.send(MessageKind::BlindedSet, msg)?;

    let payload = ctx.expect(MessageKind::EvaluatedSet)?;
    let mut r = Reader::new(&payload);
    let evaluated = read_groups(&mut r, k, ELEMENT_BYTES).map_err(|e| ctx.codec(e))?;
    r.finish().map_err(|e| ctx.codec(e))?;

    let payload = ctx.expect(MessageKind::SenderMappedSet)?;
    let mut r = Reader::new(&payload);
    let mapped = read_groups(&mut r, k, DIGEST_BYTES).map_err(|e| ctx.codec(e))?;
    r.finish().map_err(|e| ctx.codec(e))?;

    let mut out = Vec::new();
    for ((mine, theirs), table) in filed.iter().zip(&evaluated).zip(&mapped) {
        if mine.len() != theirs.len() {
            return Err(ctx.protocol(format!(
                "{} evaluations for {} blinded values",
                theirs.len(),
                mine.len()
            )));
        }
        let table: HashSet<&[u8]> = table.iter().copied().collect();
        for ((id, state), ev) in mine.iter().zip(theirs) {
            let ev = GroupElement::from_bytes(ev).map_err(|e| ctx.crypto(e))?;
            let digest = state.finalize(&ev).map_err(|e| ctx.crypto(e))?;
            if table.contains(&digest[..]) {
                out.push(*id);
            }
        }
    }
    out.sort_unstable();
    ctx.send(MessageKind::Done, Vec::new())?;
    Ok(out)
}

/// Runs one complete session between two endpoints on the same bus, each side
/// on its own thread. On abort the session is closed and nothing is returned.
pub fn run_tpsi(
    protocol: TpsiProtocol,
    cfg: &TpsiConfig,
    sender: (&Endpoint, &[SampleId]),
    receiver: (&Endpoint, &[SampleId]),
    seed: u64,
) -> Result<TpsiSessionResult, TpsiError> {
    if sender.0.party() == receiver.0.party() {
        return Err(TpsiError::SameParty);
    }
    let session = receiver.0.bus().open_session();
    run_tpsi_session(protocol, cfg, session, sender, receiver, seed)
}

/// Like [`run_tpsi`] on a session the caller already opened (and announced).
pub fn run_tpsi_session(
    protocol: TpsiProtocol,
    cfg: &TpsiConfig,
    session: SessionId,
    sender: (&Endpoint, &[SampleId]),
    receiver: (&Endpoint, &[SampleId]),
    seed: u64,
) -> Result<TpsiSessionResult, TpsiError> {
    let (s_ep, s_ids) = sender;
    let (r_ep, r_ids) = receiver;
    if s_ep.party() == r_ep.party() {
        return Err(TpsiError::SameParty);
    }
    let bus = r_ep.bus();
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let mut s_rng = ChaCha20Rng::seed_from_u64(master.next_u64());
    let mut r_rng = ChaCha20Rng::seed_from_u64(master.next_u64());

    let (s_res, r_res) = std::thread::scope(|scope| {
        let s = scope.spawn(|| {
            let res = tpsi_sender(protocol, cfg, s_ep, session, r_ep.party(), s_ids, &mut s_rng);
            if res.is_err() {
                bus.close_session(session);
            }
            res
        });
        let r = tpsi_receiver(protocol, cfg, r_ep, session, s_ep.party(), r_ids, &mut r_rng);
        if r.is_err() {
            bus.close_session(session);
        }
        (s.join().expect("sender thread panicked"), r)
    });
    bus.close_session(session);

    match (s_res, r_res) {
        (Ok(()), Ok(intersection)) => Ok(TpsiSessionResult {
            session,
            intersection,
            stats: bus.session_stats(session),
        }),
        (Err(a), Err(b)) => Err(if a.is_peer_abort() { b } else { a }),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}
