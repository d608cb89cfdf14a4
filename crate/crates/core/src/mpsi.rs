//! Multi-party PSI: request intake, pair scheduling, Tree/Path/Star execution
//! and sealed result distribution through the aggregation server.
//!
//! One driver ([`drive`]) walks the topology and asks a [`RoundExecutor`] to
//! run each round. [`run_mpsi`] executes over the bus; [`plan_mpsi`] replays the
//! same schedule with plain set operations and the byte model.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::codec::{put_u32, put_u64, CodecError, Reader};
use crate::crypto::envelope::{SealedEnvelope, SEAL_OVERHEAD};
use crate::crypto::{envelope_open, envelope_seal, CryptoError, SealingKeyPair};
use crate::data::SampleId;
use crate::tpsi::{self, TpsiConfig, TpsiError, TpsiProtocol};
use crate::transport::{CommStats, Endpoint, Federation, MessageKind, PartyId, SessionId, TransportError};

pub const REQUEST_BYTES: u64 = 9;
pub const STATUS_BYTES: u64 = 13;
pub const KEY_BYTES: u64 = 32;

const SKIP_SESSION: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum MpsiError {
    #[error("need at least {need} clients, got {got}")]
    TooFewClients { need: usize, got: usize },
    #[error("empty request list")]
    EmptyRequests,
    #[error("{0} appears more than once in a round")]
    DuplicateParty(PartyId),
    #[error("{0} is not a client")]
    NotAClient(PartyId),
    #[error(transparent)]
    Tpsi(#[from] TpsiError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("malformed control message: {0}")]
    Codec(#[from] CodecError),
    #[error("protocol violation: {0}")]
    Protocol(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Tree,
    Path,
    Star,
}

impl Topology {
    pub const ALL: [Topology; 3] = [Topology::Tree, Topology::Path, Topology::Star];
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Topology::Tree => "tree",
            Topology::Path => "path",
            Topology::Star => "star",
        })
    }
}

impl std::str::FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tree" => Ok(Topology::Tree),
            "path" => Ok(Topology::Path),
            "star" => Ok(Topology::Star),
            other => Err(format!("unknown topology `{other}` (tree|path|star)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    RequestOrder,
    VolumeAware,
}

impl SchedulePolicy {
    pub const ALL: [SchedulePolicy; 2] = [SchedulePolicy::RequestOrder, SchedulePolicy::VolumeAware];
}

impl std::fmt::Display for SchedulePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SchedulePolicy::RequestOrder => "request_order",
            SchedulePolicy::VolumeAware => "volume_aware",
        })
    }
}

impl std::str::FromStr for SchedulePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "request_order" | "order" | "naive" => Ok(SchedulePolicy::RequestOrder),
            "volume_aware" | "volume" | "aware" => Ok(SchedulePolicy::VolumeAware),
            other => Err(format!("unknown policy `{other}` (request_order|volume_aware)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClientRequest {
    pub client: PartyId,
    pub res_len: u64,
    pub has_prev_result: bool,
}

impl ClientRequest {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(REQUEST_BYTES as usize);
        put_u64(&mut buf, self.res_len);
        buf.push(self.has_prev_result as u8);
        buf
    }

    pub fn decode(client: PartyId, bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let res_len = r.u64()?;
        let flag = r.bytes(1)?[0];
        r.finish()?;
        if flag > 1 {
            return Err(CodecError::Invalid("request flag"));
        }
        Ok(ClientRequest {
            client,
            res_len,
            has_prev_result: flag == 1,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pairing {
    pub sender: PartyId,
    pub receiver: PartyId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoundPlan {
    pub pairs: Vec<Pairing>,
    pub passthrough: Option<PartyId>,
}

impl RoundPlan {
    /// Checks that no party is scheduled twice.
    pub fn validate(&self) -> Result<(), MpsiError> {
        let mut seen = std::collections::HashSet::new();
        let parties = self
            .pairs
            .iter()
            .flat_map(|p| [p.sender, p.receiver])
            .chain(self.passthrough);
        for p in parties {
            if !seen.insert(p) {
                return Err(MpsiError::DuplicateParty(p));
            }
        }
        Ok(())
    }

    pub fn participants(&self) -> usize {
        2 * self.pairs.len() + self.passthrough.is_some() as usize
    }
}

/// Orders two requests as (sender, receiver) under the protocol's role rule;
/// equal sizes make the lower party the receiver.
fn assign_roles(a: &ClientRequest, b: &ClientRequest, protocol: TpsiProtocol) -> Pairing {
    let a_receives = match a.res_len.cmp(&b.res_len) {
        std::cmp::Ordering::Less => !protocol.larger_receives(),
        std::cmp::Ordering::Greater => protocol.larger_receives(),
        std::cmp::Ordering::Equal => a.client < b.client,
    };
    if a_receives {
        Pairing {
            sender: b.client,
            receiver: a.client,
        }
    } else {
        Pairing {
            sender: a.client,
            receiver: b.client,
        }
    }
}

/// Plans one round from the requests in arrival order.
pub fn schedule_round(
    requests: &[ClientRequest],
    policy: SchedulePolicy,
    protocol: TpsiProtocol,
) -> Result<RoundPlan, MpsiError> {
    if requests.is_empty() {
        return Err(MpsiError::EmptyRequests);
    }
    let plan = match policy {
        SchedulePolicy::RequestOrder => {
            let mut chunks = requests.chunks_exact(2);
            let pairs = chunks
                .by_ref()
                .map(|c| Pairing {
                    sender: c[0].client,
                    receiver: c[1].client,
                })
                .collect();
            RoundPlan {
                pairs,
                passthrough: chunks.remainder().first().map(|r| r.client),
            }
        }
        SchedulePolicy::VolumeAware => {
            let mut sorted = requests.to_vec();
            sorted.sort_by_key(|r| (r.res_len, r.client));
            let n = sorted.len();
            let offset = n.div_ceil(2);
            RoundPlan {
                pairs: (0..n / 2)
                    .map(|k| assign_roles(&sorted[k], &sorted[k + offset], protocol))
                    .collect(),
                passthrough: (n % 2 == 1).then(|| sorted[offset - 1].client),
            }
        }
    };
    plan.validate()?;
    Ok(plan)
}

/// Star center: the last requester, or the client the role rule prefers as receiver.
pub fn star_center(requests: &[ClientRequest], policy: SchedulePolicy, protocol: TpsiProtocol) -> PartyId {
    match policy {
        SchedulePolicy::RequestOrder => requests.last().expect("non-empty").client,
        SchedulePolicy::VolumeAware => {
            let pick = if protocol.larger_receives() {
                requests
                    .iter()
                    .max_by(|a, b| a.res_len.cmp(&b.res_len).then(b.client.cmp(&a.client)))
            } else {
                requests.iter().min_by_key(|r| (r.res_len, r.client))
            };
            pick.expect("non-empty").client
        }
    }
}

pub fn tree_rounds(m: usize) -> usize {
    if m <= 1 {
        0
    } else {
        (usize::BITS - (m - 1).leading_zeros()) as usize
    }
}

/// Zero-based position of a client in the federation.
fn client_index(p: PartyId) -> Result<usize, MpsiError> {
    p.client_index()
        .and_then(|m| m.checked_sub(1))
        .ok_or(MpsiError::NotAClient(p))
}

/// Executes scheduled rounds; the driver owns round state.
pub trait RoundExecutor {
    /// The requesting clients declare their sizes to the aggregation server.
    fn request(&mut self, requests: &[ClientRequest]) -> Result<(), MpsiError>;

    /// Runs every pair of the plan; returns each receiver's new set, in plan order.
    fn run_round(
        &mut self,
        round: usize,
        plan: &RoundPlan,
        sets: &BTreeMap<PartyId, Vec<SampleId>>,
    ) -> Result<Vec<Vec<SampleId>>, MpsiError>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DriveOutcome {
    pub holder: PartyId,
    pub result: Vec<SampleId>,
    pub rounds: usize,
    pub tpsi_runs: usize,
}

fn canonical(ids: &[SampleId]) -> Vec<SampleId> {
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn requests_for(
    parties: &[PartyId],
    sets: &BTreeMap<PartyId, Vec<SampleId>>,
    has_prev: &BTreeMap<PartyId, bool>,
) -> Vec<ClientRequest> {
    parties
        .iter()
        .map(|p| ClientRequest {
            client: *p,
            res_len: sets[p].len() as u64,
            has_prev_result: has_prev.get(p).copied().unwrap_or(false),
        })
        .collect()
}

/// Walks the topology over `sets` (client `i + 1` holds `sets[i]`).
pub fn drive<E: RoundExecutor>(
    topology: Topology,
    policy: SchedulePolicy,
    protocol: TpsiProtocol,
    sets: &[Vec<SampleId>],
    exec: &mut E,
) -> Result<DriveOutcome, MpsiError> {
    if sets.len() < 2 {
        return Err(MpsiError::TooFewClients {
            need: 2,
            got: sets.len(),
        });
    }
    let mut current: BTreeMap<PartyId, Vec<SampleId>> = sets
        .iter()
        .enumerate()
        .map(|(i, s)| (PartyId::Client(i as u32 + 1), canonical(s)))
        .collect();
    let all: Vec<PartyId> = current.keys().copied().collect();
    let mut has_prev = BTreeMap::new();
    let mut rounds = 0;
    let mut tpsi_runs = 0;

    let holder = match topology {
        Topology::Tree => {
            let mut active = all.clone();
            while active.len() > 1 {
                let reqs = requests_for(&active, &current, &has_prev);
                exec.request(&reqs)?;
                let plan = schedule_round(&reqs, policy, protocol)?;
                let outs = exec.run_round(rounds, &plan, &current)?;
                rounds += 1;
                tpsi_runs += plan.pairs.len();
                let mut next = BTreeMap::new();
                for (pair, out) in plan.pairs.iter().zip(outs) {
                    next.insert(pair.receiver, out);
                    has_prev.insert(pair.receiver, true);
                }
                if let Some(p) = plan.passthrough {
                    next.insert(p, current.remove(&p).expect("active"));
                }
                current = next;
                active = current.keys().copied().collect();
            }
            active[0]
        }
        Topology::Path => {
            let mut holder = all[0];
            for next in &all[1..] {
                let reqs = requests_for(&[holder, *next], &current, &has_prev);
                exec.request(&reqs)?;
                let plan = schedule_round(&reqs, policy, protocol)?;
                let out = exec.run_round(rounds, &plan, &current)?.remove(0);
                rounds += 1;
                tpsi_runs += 1;
                holder = plan.pairs[0].receiver;
                current.insert(holder, out);
                has_prev.insert(holder, true);
            }
            holder
        }
        Topology::Star => {
            let reqs = requests_for(&all, &current, &has_prev);
            exec.request(&reqs)?;
            let center = star_center(&reqs, policy, protocol);
            for other in all.iter().filter(|p| **p != center) {
                if rounds > 0 {
                    let reqs = requests_for(&[*other, center], &current, &has_prev);
                    exec.request(&reqs)?;
                }
                let plan = RoundPlan {
                    pairs: vec![Pairing {
                        sender: *other,
                        receiver: center,
                    }],
                    passthrough: None,
                };
                let out = exec.run_round(rounds, &plan, &current)?.remove(0);
                rounds += 1;
                tpsi_runs += 1;
                current.insert(center, out);
                has_prev.insert(center, true);
            }
            center
        }
    };
    Ok(DriveOutcome {
        holder,
        result: current.remove(&holder).expect("holder has a set"),
        rounds,
        tpsi_runs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpsiOptions {
    pub topology: Topology,
    pub policy: SchedulePolicy,
    pub protocol: TpsiProtocol,
    pub tpsi: TpsiConfig,
    pub seed: u64,
}

impl MpsiOptions {
    pub fn new(topology: Topology, policy: SchedulePolicy, protocol: TpsiProtocol) -> Self {
        MpsiOptions {
            topology,
            policy,
            protocol,
            tpsi: TpsiConfig::default(),
            seed: 0,
        }
    }

    pub fn rsa_bits(mut self, bits: usize) -> Self {
        self.tpsi.rsa_bits = bits;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TpsiRunRecord {
    pub round: usize,
    pub sender: PartyId,
    pub receiver: PartyId,
    pub sender_len: u64,
    pub receiver_len: u64,
    pub intersection_len: u64,
    pub bytes: u64,
    pub skipped: bool,
}

fn tpsi_seed(master: u64, index: u64) -> u64 {
    // splitmix64 step: distinct, well-mixed per-session seeds
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Sender,
    Receiver,
    Passthrough,
}

struct Status {
    role: Role,
    peer: PartyId,
    session: u64,
}

impl Status {
    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(STATUS_BYTES as usize);
        buf.push(match self.role {
            Role::Sender => 0,
            Role::Receiver => 1,
            Role::Passthrough => 2,
        });
        let peer = match self.peer {
            PartyId::Client(i) => i,
            _ => 0,
        };
        put_u32(&mut buf, peer);
        put_u64(&mut buf, self.session);
        buf
    }

    fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let role = match r.bytes(1)?[0] {
            0 => Role::Sender,
            1 => Role::Receiver,
            2 => Role::Passthrough,
            _ => return Err(CodecError::Invalid("status role")),
        };
        let peer = PartyId::Client(r.u32()?);
        let session = r.u64()?;
        r.finish()?;
        Ok(Status { role, peer, session })
    }
}

/// Runs rounds over the bus: control messages through the aggregation server,
/// TPSI sessions directly between paired clients, concurrently within a round.
struct BusExecutor<'a> {
    fed: &'a Federation,
    control: SessionId,
    opts: MpsiOptions,
    next_tpsi: u64,
    records: Vec<TpsiRunRecord>,
}

impl<'a> BusExecutor<'a> {
    fn client(&self, p: PartyId) -> Result<&'a Endpoint, MpsiError> {
        let fed: &'a Federation = self.fed;
        fed.clients.get(client_index(p)?).ok_or(MpsiError::NotAClient(p))
    }

    fn send_status(&self, to: PartyId, status: Status) -> Result<(), MpsiError> {
        self.fed
            .aggregation
            .send(to, self.control, MessageKind::Status, status.encode())?;
        Ok(())
    }

    fn read_status(&self, p: PartyId) -> Result<Status, MpsiError> {
        let env = self.client(p)?.expect(self.control, MessageKind::Status)?;
        if env.from != PartyId::AggregationServer {
            return Err(MpsiError::Protocol(format!("status from {}", env.from)));
        }
        Ok(Status::decode(&env.payload)?)
    }
}

impl RoundExecutor for BusExecutor<'_> {
    fn request(&mut self, requests: &[ClientRequest]) -> Result<(), MpsiError> {
        for req in requests {
            self.client(req.client)?.send(
                PartyId::AggregationServer,
                self.control,
                MessageKind::Request,
                req.encode(),
            )?;
        }
        for req in requests {
            let env = self.fed.aggregation.expect(self.control, MessageKind::Request)?;
            let got = ClientRequest::decode(env.from, &env.payload)?;
            if got != *req {
                return Err(MpsiError::Protocol(format!("request from {} out of order", env.from)));
            }
        }
        Ok(())
    }

    fn run_round(
        &mut self,
        round: usize,
        plan: &RoundPlan,
        sets: &BTreeMap<PartyId, Vec<SampleId>>,
    ) -> Result<Vec<Vec<SampleId>>, MpsiError> {
        plan.validate()?;
        let bus = &self.fed.bus;
        // aggregation server assigns roles and sessions
        for pair in &plan.pairs {
            let skip = sets[&pair.sender].is_empty() || sets[&pair.receiver].is_empty();
            let session = if skip { SKIP_SESSION } else { bus.open_session().0 };
            self.send_status(
                pair.sender,
                Status {
                    role: Role::Sender,
                    peer: pair.receiver,
                    session,
                },
            )?;
            self.send_status(
                pair.receiver,
                Status {
                    role: Role::Receiver,
                    peer: pair.sender,
                    session,
                },
            )?;
        }
        if let Some(p) = plan.passthrough {
            self.send_status(
                p,
                Status {
                    role: Role::Passthrough,
                    peer: p,
                    session: SKIP_SESSION,
                },
            )?;
            let st = self.read_status(p)?;
            if st.role != Role::Passthrough {
                return Err(MpsiError::Protocol(format!("{p} expected passthrough")));
            }
        }

        // each client reads its own assignment
        struct Job<'e> {
            sender: &'e Endpoint,
            receiver: &'e Endpoint,
            session: Option<SessionId>,
            seed: u64,
        }
        let mut jobs = Vec::with_capacity(plan.pairs.len());
        for pair in &plan.pairs {
            let s = self.read_status(pair.sender)?;
            let r = self.read_status(pair.receiver)?;
            if s.role != Role::Sender || r.role != Role::Receiver || s.session != r.session {
                return Err(MpsiError::Protocol(format!("inconsistent status for {pair:?}")));
            }
            if s.peer != pair.receiver || r.peer != pair.sender {
                return Err(MpsiError::Protocol(format!("wrong peers for {pair:?}")));
            }
            let seed = tpsi_seed(self.opts.seed, self.next_tpsi);
            self.next_tpsi += 1;
            jobs.push(Job {
                sender: self.client(pair.sender)?,
                receiver: self.client(pair.receiver)?,
                session: (s.session != SKIP_SESSION).then_some(SessionId(s.session)),
                seed,
            });
        }

        let opts = self.opts;
        let results: Vec<Result<(Vec<SampleId>, u64), TpsiError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|job| {
                    let s_ids = &sets[&job.sender.party()];
                    let r_ids = &sets[&job.receiver.party()];
                    scope.spawn(move || match job.session {
                        None => Ok((Vec::new(), 0)),
                        Some(session) => tpsi::run_tpsi_session(
                            opts.protocol,
                            &opts.tpsi,
                            session,
                            (job.sender, s_ids),
                            (job.receiver, r_ids),
                            job.seed,
                        )
                        .map(|res| (res.intersection, res.stats.total_bytes())),
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("TPSI thread panicked"))
                .collect()
        });
        bus.mark_round();

        let mut outs = Vec::with_capacity(results.len());
        for ((pair, job), res) in plan.pairs.iter().zip(&jobs).zip(results) {
            let (ids, bytes) = res?;
            self.records.push(TpsiRunRecord {
                round,
                sender: pair.sender,
                receiver: pair.receiver,
                sender_len: sets[&pair.sender].len() as u64,
                receiver_len: sets[&pair.receiver].len() as u64,
                intersection_len: ids.len() as u64,
                bytes,
                skipped: job.session.is_none(),
            });
            outs.push(ids);
        }
        Ok(outs)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub ids: Vec<SampleId>,
}

impl AlignmentResult {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(4 + 8 * self.ids.len());
        put_u32(&mut buf, self.ids.len() as u32);
        for id in &self.ids {
            put_u64(&mut buf, id.0);
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let n = r.u32()? as usize;
        let ids = (0..n).map(|_| r.u64().map(SampleId)).collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CodecError::Invalid("result not strictly ascending"));
        }
        Ok(AlignmentResult { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The key server hands one sealing key pair to each recipient over direct edges.
pub fn distribute_keys<R: RngCore + rand::CryptoRng>(
    key_server: &Endpoint,
    recipients: &[&Endpoint],
    rng: &mut R,
) -> Result<SealingKeyPair, MpsiError> {
    let keys = SealingKeyPair::generate(rng);
    let session = key_server.bus().open_session();
    for r in recipients {
        key_server.send(
            r.party(),
            session,
            MessageKind::KeyDistribution,
            keys.secret_bytes().to_vec(),
        )?;
    }
    for r in recipients {
        let env = r.expect(session, MessageKind::KeyDistribution)?;
        let bytes: [u8; 32] = env
            .payload
            .as_slice()
            .try_into()
            .map_err(|_| MpsiError::Protocol(String::from("key length")))?;
        if SealingKeyPair::from_secret_bytes(bytes).public() != keys.public() {
            return Err(MpsiError::Protocol(String::from("key copies differ")));
        }
    }
    key_server.bus().close_session(session);
    Ok(keys)
}

/// Seals the holder's result and relays it through the aggregation server to
/// every client; returns each client's opened copy in client order.
pub fn distribute_result<R: RngCore + rand::CryptoRng>(
    fed: &Federation,
    holder: PartyId,
    result: &AlignmentResult,
    keys: &SealingKeyPair,
    rng: &mut R,
) -> Result<Vec<AlignmentResult>, MpsiError> {
    let session = fed.bus.open_session();
    let holder_ep = fed
        .clients
        .get(client_index(holder)?)
        .ok_or(MpsiError::NotAClient(holder))?;
    let sealed = envelope_seal(&result.encode(), keys.public(), rng)?;
    holder_ep.send(
        PartyId::AggregationServer,
        session,
        MessageKind::SealedResult,
        sealed.to_bytes(),
    )?;

    // the aggregation server only relays opaque bytes
    let env = fed.aggregation.expect(session, MessageKind::SealedResult)?;
    for c in &fed.clients {
        fed.aggregation
            .send(c.party(), session, MessageKind::SealedResult, env.payload.clone())?;
    }
    let mut out = Vec::with_capacity(fed.clients.len());
    for c in &fed.clients {
        let env = c.expect(session, MessageKind::SealedResult)?;
        let sealed = SealedEnvelope::from_bytes(&env.payload)?;
        out.push(AlignmentResult::decode(&envelope_open(&sealed, keys)?)?);
    }
    fed.bus.close_session(session);
    Ok(out)
}

pub fn result_distribution_bytes(clients: usize, result_len: usize) -> u64 {
    let sealed = 8 + 4 + SEAL_OVERHEAD + 4 + 8 * result_len;
    ((clients + 1) * sealed) as u64
}

#[derive(Clone, Debug)]
pub struct MpsiOutcome {
    pub result: AlignmentResult,
    /// The copy each client opened, in client order.
    pub delivered: Vec<AlignmentResult>,
    pub holder: PartyId,
    pub rounds: usize,
    pub tpsi_runs: Vec<TpsiRunRecord>,
    pub stats: CommStats,
    pub keys: SealingKeyPair,
}

impl MpsiOutcome {
    pub fn tpsi_bytes(&self) -> u64 {
        self.tpsi_runs.iter().map(|r| r.bytes).sum()
    }
}

/// Full alignment: key distribution (clients and label owner), scheduled TPSI
/// rounds, then sealed result distribution.
pub fn run_mpsi(fed: &Federation, sets: &[Vec<SampleId>], opts: &MpsiOptions) -> Result<MpsiOutcome, MpsiError> {
    if sets.len() != fed.clients.len() {
        return Err(MpsiError::Protocol(format!(
            "{} id sets for {} clients",
            sets.len(),
            fed.clients.len()
        )));
    }
    if sets.len() < 2 {
        return Err(MpsiError::TooFewClients {
            need: 2,
            got: sets.len(),
        });
    }
    let start = fed.bus.snapshot_stats();
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed ^ 0x6b65_7973);

    let mut recipients: Vec<&Endpoint> = fed.clients.iter().collect();
    recipients.push(&fed.label_owner);
    let keys = distribute_keys(&fed.key_server, &recipients, &mut rng)?;

    let control = fed.bus.open_session();
    let mut exec = BusExecutor {
        fed,
        control,
        opts: *opts,
        next_tpsi: 0,
        records: Vec::new(),
    };
    let outcome = drive(opts.topology, opts.policy, opts.protocol, sets, &mut exec);
    fed.bus.close_session(control);
    let outcome = outcome?;

    let result = AlignmentResult { ids: outcome.result };
    let delivered = distribute_result(fed, outcome.holder, &result, &keys, &mut rng)?;
    if delivered.iter().any(|d| *d != result) {
        return Err(MpsiError::Protocol(String::from("clients opened different results")));
    }
    Ok(MpsiOutcome {
        result,
        delivered,
        holder: outcome.holder,
        rounds: outcome.rounds,
        tpsi_runs: exec.records,
        stats: fed.bus.snapshot_stats().since(&start),
        keys,
    })
}

/// Byte totals predicted without running any cryptography.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpsiPlanReport {
    pub rounds: usize,
    pub tpsi_runs: Vec<TpsiRunRecord>,
    pub tpsi_bytes: u64,
    pub control_bytes: u64,
    pub key_bytes: u64,
    pub distribution_bytes: u64,
    pub total_bytes: u64,
    pub result_len: usize,
}

struct DryExecutor {
    opts: MpsiOptions,
    control_bytes: u64,
    records: Vec<TpsiRunRecord>,
}

impl RoundExecutor for DryExecutor {
    fn request(&mut self, requests: &[ClientRequest]) -> Result<(), MpsiError> {
        self.control_bytes += REQUEST_BYTES * requests.len() as u64;
        Ok(())
    }

    fn run_round(
        &mut self,
        round: usize,
        plan: &RoundPlan,
        sets: &BTreeMap<PartyId, Vec<SampleId>>,
    ) -> Result<Vec<Vec<SampleId>>, MpsiError> {
        plan.validate()?;
        self.control_bytes += STATUS_BYTES * plan.participants() as u64;
        let mut outs = Vec::new();
        for pair in &plan.pairs {
            let s = &sets[&pair.sender];
            let r = &sets[&pair.receiver];
            let skipped = s.is_empty() || r.is_empty();
            let ids = intersect_sorted(s, r);
            let bytes = if skipped {
                0
            } else {
                tpsi::tpsi_bytes(self.opts.protocol, &self.opts.tpsi, s.len() as u64, r.len() as u64)
            };
            self.records.push(TpsiRunRecord {
                round,
                sender: pair.sender,
                receiver: pair.receiver,
                sender_len: s.len() as u64,
                receiver_len: r.len() as u64,
                intersection_len: ids.len() as u64,
                bytes,
                skipped,
            });
            outs.push(ids);
        }
        Ok(outs)
    }
}

pub fn intersect_sorted(a: &[SampleId], b: &[SampleId]) -> Vec<SampleId> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Dry run of [`run_mpsi`]: same schedule, plain intersections, modelled bytes.
pub fn plan_mpsi(sets: &[Vec<SampleId>], opts: &MpsiOptions) -> Result<MpsiPlanReport, MpsiError> {
    let mut exec = DryExecutor {
        opts: *opts,
        control_bytes: 0,
        records: Vec::new(),
    };
    let out = drive(opts.topology, opts.policy, opts.protocol, sets, &mut exec)?;
    let tpsi_bytes: u64 = exec.records.iter().map(|r| r.bytes).sum();
    let key_bytes = KEY_BYTES * (sets.len() as u64 + 1);
    let distribution_bytes = result_distribution_bytes(sets.len(), out.result.len());
    Ok(MpsiPlanReport {
        rounds: out.rounds,
        tpsi_runs: exec.records,
        tpsi_bytes,
        control_bytes: exec.control_bytes,
        key_bytes,
        distribution_bytes,
        total_bytes: tpsi_bytes + exec.control_bytes + key_bytes + distribution_bytes,
        result_len: out.result.len(),
    })
}

/// One run as exported to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpsiRunRecord {
    pub topology: Topology,
    pub policy: SchedulePolicy,
    pub protocol: TpsiProtocol,
    pub clients: usize,
    pub set_sizes: Vec<usize>,
    pub seed: u64,
    pub rsa_bits: usize,
    pub rounds: usize,
    pub tpsi_runs: usize,
    pub tpsi_bytes: u64,
    pub total_bytes: u64,
    pub messages: u64,
    pub intersection_size: usize,
    pub wall_ms: f64,
}

impl MpsiRunRecord {
    pub fn from_outcome(sets: &[Vec<SampleId>], opts: &MpsiOptions, out: &MpsiOutcome) -> Self {
        MpsiRunRecord {
            topology: opts.topology,
            policy: opts.policy,
            protocol: opts.protocol,
            clients: sets.len(),
            set_sizes: sets.iter().map(Vec::len).collect(),
            seed: opts.seed,
            rsa_bits: opts.tpsi.rsa_bits,
            rounds: out.rounds,
            tpsi_runs: out.tpsi_runs.len(),
            tpsi_bytes: out.tpsi_bytes(),
            total_bytes: out.stats.total_bytes(),
            messages: out.stats.message_count,
            intersection_size: out.result.len(),
            wall_ms: out.stats.wall_ns as f64 / 1e6,
        }
    }
}
