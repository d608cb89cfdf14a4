//! In-process message bus between participants, with exact payload accounting.
//!
//! Each participant owns one [`Endpoint`]; only the endpoint can read the
//! envelopes addressed to its party. Queues are FIFO per (recipient, session),
//! which implies FIFO per (sender, recipient, session).

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Stopwatch;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("unknown party {0}")]
    UnknownParty(PartyId),
    #[error("party {0} already registered")]
    AlreadyRegistered(PartyId),
    #[error("session {0} is closed")]
    ClosedSession(SessionId),
    #[error("session {0} was never opened")]
    UnknownSession(SessionId),
    #[error("endpoint for {endpoint} cannot send as {claimed}")]
    Impersonation { endpoint: PartyId, claimed: PartyId },
    #[error("timed out waiting on session {session} at {party}")]
    Timeout { party: PartyId, session: SessionId },
    #[error("session {session}: expected {expected:?}, got {got:?} from {from}")]
    UnexpectedKind {
        session: SessionId,
        expected: MessageKind,
        got: MessageKind,
        from: PartyId,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartyId {
    /// 1-based client index.
    Client(u32),
    AggregationServer,
    KeyServer,
    LabelOwner,
}

impl PartyId {
    /// The 1-based client number, if this is a client.
    pub fn client_index(self) -> Option<usize> {
        match self {
            PartyId::Client(m) => Some(m as usize),
            _ => None,
        }
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartyId::Client(m) => write!(f, "client:{m}"),
            PartyId::AggregationServer => f.write_str("aggregation_server"),
            PartyId::KeyServer => f.write_str("key_server"),
            PartyId::LabelOwner => f.write_str("label_owner"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Every message kind any protocol in the crate may send.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    // alignment control plane
    Request,
    Status,
    KeyDistribution,
    SealedResult,
    // RSA blind-signature TPSI
    PkAnnounce,
    BlindedSet,
    SignedSetAndDigests,
    // OPRF TPSI
    EvaluatedSet,
    SenderMappedSet,
    Done,
    // coreset construction
    ClusterMessages,
    ClusterBundles,
    SealedSelection,
    // split training
    Activations,
    TopOutputs,
    OutputGradients,
    BottomGradients,
    KnnPartials,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub from: PartyId,
    pub to: PartyId,
    pub session: SessionId,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Receipt {
    /// Global delivery sequence number.
    pub seq: u64,
    pub bytes: u64,
}

/// Payload bytes per directed edge plus message and round counters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommStats {
    pub bytes_by_edge: BTreeMap<(PartyId, PartyId), u64>,
    pub message_count: u64,
    pub rounds: u64,
    pub wall_ns: u64,
}

impl CommStats {
    pub fn total_bytes(&self) -> u64 {
        self.bytes_by_edge.values().sum()
    }

    pub fn bytes(&self, from: PartyId, to: PartyId) -> u64 {
        self.bytes_by_edge.get(&(from, to)).copied().unwrap_or(0)
    }

    /// Bytes sent by `party` over all edges.
    pub fn bytes_from(&self, party: PartyId) -> u64 {
        self.bytes_by_edge
            .iter()
            .filter(|((f, _), _)| *f == party)
            .map(|(_, b)| b)
            .sum()
    }

    fn record(&mut self, from: PartyId, to: PartyId, bytes: u64) {
        *self.bytes_by_edge.entry((from, to)).or_insert(0) += bytes;
        self.message_count += 1;
    }

    /// Counter-wise difference `self - earlier`, for phase accounting on one bus.
    pub fn since(&self, earlier: &CommStats) -> CommStats {
        let bytes_by_edge = self
            .bytes_by_edge
            .iter()
            .filter_map(|(edge, b)| {
                let d = b - earlier.bytes_by_edge.get(edge).copied().unwrap_or(0);
                (d > 0).then_some((*edge, d))
            })
            .collect();
        CommStats {
            bytes_by_edge,
            message_count: self.message_count - earlier.message_count,
            rounds: self.rounds - earlier.rounds,
            wall_ns: self.wall_ns.saturating_sub(earlier.wall_ns),
        }
    }

    pub fn merge(&mut self, other: &CommStats) {
        for (edge, b) in &other.bytes_by_edge {
            *self.bytes_by_edge.entry(*edge).or_insert(0) += b;
        }
        self.message_count += other.message_count;
        self.rounds += other.rounds;
        self.wall_ns += other.wall_ns;
    }
}

#[derive(Serialize, Deserialize)]
struct EdgeJson {
    from: String,
    to: String,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct StatsJson {
    edges: Vec<EdgeJson>,
    messages: u64,
    rounds: u64,
    wall_ns: u64,
}

fn parse_party(s: &str) -> Option<PartyId> {
    match s {
        "aggregation_server" => Some(PartyId::AggregationServer),
        "key_server" => Some(PartyId::KeyServer),
        "label_owner" => Some(PartyId::LabelOwner),
        _ => s.strip_prefix("client:")?.parse().ok().map(PartyId::Client),
    }
}

impl Serialize for CommStats {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        StatsJson {
            edges: self
                .bytes_by_edge
                .iter()
                .map(|((f, t), b)| EdgeJson {
                    from: f.to_string(),
                    to: t.to_string(),
                    bytes: *b,
                })
                .collect(),
            messages: self.message_count,
            rounds: self.rounds,
            wall_ns: self.wall_ns,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CommStats {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = StatsJson::deserialize(d)?;
        let mut bytes_by_edge = BTreeMap::new();
        for e in raw.edges {
            let from = parse_party(&e.from).ok_or_else(|| serde::de::Error::custom(format!("bad party {}", e.from)))?;
            let to = parse_party(&e.to).ok_or_else(|| serde::de::Error::custom(format!("bad party {}", e.to)))?;
            bytes_by_edge.insert((from, to), e.bytes);
        }
        Ok(CommStats {
            bytes_by_edge,
            message_count: raw.messages,
            rounds: raw.rounds,
            wall_ns: raw.wall_ns,
        })
    }
}

#[derive(Default)]
struct State {
    registered: HashSet<PartyId>,
    open: HashSet<SessionId>,
    closed: HashSet<SessionId>,
    next_session: u64,
    next_seq: u64,
    queues: HashMap<(PartyId, SessionId), VecDeque<Envelope>>,
    stats: CommStats,
    per_session: HashMap<SessionId, CommStats>,
    tap: Option<Vec<Envelope>>,
}

struct Inner {
    state: Mutex<State>,
    arrived: Condvar,
    clock: Stopwatch,
    recv_timeout: Duration,
}

/// Shared message bus. Cloning yields another handle to the same bus.
#[derive(Clone)]
pub struct Bus {
    inner: Arc<Inner>,
}

impl Default for Bus {
    fn default() -> Self {
        Self::new()
    }
}

impl Bus {
    pub fn new() -> Self {
        Self::with_timeout(Duration::from_secs(120))
    }

    /// A bus whose blocking receives give up after `recv_timeout`.
    pub fn with_timeout(recv_timeout: Duration) -> Self {
        Bus {
            inner: Arc::new(Inner {
                state: Mutex::new(State::default()),
                arrived: Condvar::new(),
                clock: Stopwatch::start(),
                recv_timeout,
            }),
        }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Registers `party` and returns its unique endpoint.
    pub fn register(&self, party: PartyId) -> Result<Endpoint, TransportError> {
        let mut st = self.lock();
        if !st.registered.insert(party) {
            return Err(TransportError::AlreadyRegistered(party));
        }
        Ok(Endpoint {
            party,
            bus: self.clone(),
        })
    }

    pub fn open_session(&self) -> SessionId {
        let mut st = self.lock();
        let id = SessionId(st.next_session);
        st.next_session += 1;
        st.open.insert(id);
        id
    }

    /// Closes the session and drops any undelivered envelopes on it.
    pub fn close_session(&self, session: SessionId) {
        let mut st = self.lock();
        if st.open.remove(&session) {
            st.closed.insert(session);
        }
        st.queues.retain(|(_, s), _| *s != session);
        drop(st);
        self.inner.arrived.notify_all();
    }

    pub fn mark_round(&self) {
        self.lock().stats.rounds += 1;
    }

    /// Starts recording a copy of every delivered envelope (audit tap for tests
    /// and reports; not reachable through any [`Endpoint`]).
    pub fn enable_tap(&self) {
        let mut st = self.lock();
        if st.tap.is_none() {
            st.tap = Some(Vec::new());
        }
    }

    pub fn tap_log(&self) -> Vec<Envelope> {
        self.lock().tap.clone().unwrap_or_default()
    }

    pub fn snapshot_stats(&self) -> CommStats {
        let mut s = self.lock().stats.clone();
        s.wall_ns = self.inner.clock.elapsed_ns();
        s
    }

    pub fn session_stats(&self, session: SessionId) -> CommStats {
        self.lock().per_session.get(&session).cloned().unwrap_or_default()
    }

    fn deliver(&self, env: Envelope) -> Result<Receipt, TransportError> {
        let mut st = self.lock();
        if !st.registered.contains(&env.to) {
            return Err(TransportError::UnknownParty(env.to));
        }
        if st.closed.contains(&env.session) {
            return Err(TransportError::ClosedSession(env.session));
        }
        if !st.open.contains(&env.session) {
            return Err(TransportError::UnknownSession(env.session));
        }
        let bytes = env.payload.len() as u64;
        st.stats.record(env.from, env.to, bytes);
        st.per_session
            .entry(env.session)
            .or_default()
            .record(env.from, env.to, bytes);
        let seq = st.next_seq;
        st.next_seq += 1;
        if let Some(tap) = st.tap.as_mut() {
            tap.push(env.clone());
        }
        st.queues.entry((env.to, env.session)).or_default().push_back(env);
        drop(st);
        self.inner.arrived.notify_all();
        Ok(Receipt { seq, bytes })
    }

    fn take(&self, party: PartyId, session: SessionId) -> Result<Envelope, TransportError> {
        let deadline = self.inner.recv_timeout;
        let mut st = self.lock();
        let mut waited = Duration::ZERO;
        loop {
            if let Some(env) = st.queues.get_mut(&(party, session)).and_then(VecDeque::pop_front) {
                return Ok(env);
            }
            if st.closed.contains(&session) {
                return Err(TransportError::ClosedSession(session));
            }
            if !st.open.contains(&session) {
                return Err(TransportError::UnknownSession(session));
            }
            if waited >= deadline {
                return Err(TransportError::Timeout { party, session });
            }
            let step = Duration::from_millis(50);
            let (guard, _) = self
                .inner
                .arrived
                .wait_timeout(st, step)
                .unwrap_or_else(|e| e.into_inner());
            st = guard;
            waited += step;
        }
    }
}

/// A participant's handle on the bus: sends as its party, reads only its own inbox.
pub struct Endpoint {
    party: PartyId,
    bus: Bus,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint").field("party", &self.party).finish()
    }
}

impl Endpoint {
    pub fn party(&self) -> PartyId {
        self.party
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn send(
        &self,
        to: PartyId,
        session: SessionId,
        kind: MessageKind,
        payload: Vec<u8>,
    ) -> Result<Receipt, TransportError> {
        self.bus.deliver(Envelope {
            from: self.party,
            to,
            session,
            kind,
            payload,
        })
    }

    /// Sends a prebuilt envelope; `env.from` must be this endpoint's party.
    pub fn exchange(&self, env: Envelope) -> Result<Receipt, TransportError> {
        if env.from != self.party {
            return Err(TransportError::Impersonation {
                endpoint: self.party,
                claimed: env.from,
            });
        }
        self.bus.deliver(env)
    }

    /// Blocks until an envelope addressed to this party arrives on `session`.
    pub fn recv(&self, session: SessionId) -> Result<Envelope, TransportError> {
        self.bus.take(self.party, session)
    }

    /// Receives and checks the message kind.
    pub fn expect(&self, session: SessionId, kind: MessageKind) -> Result<Envelope, TransportError> {
        let env = self.recv(session)?;
        if env.kind != kind {
            return Err(TransportError::UnexpectedKind {
                session,
                expected: kind,
                got: env.kind,
                from: env.from,
            });
        }
        Ok(env)
    }
}

/// The fixed cast of a simulation: `M` clients plus the three service parties,
/// all registered on one bus.
pub struct Federation {
    pub bus: Bus,
    pub clients: Vec<Endpoint>,
    pub aggregation: Endpoint,
    pub key_server: Endpoint,
    pub label_owner: Endpoint,
}

impl Federation {
    pub fn new(clients: usize) -> Self {
        Self::on_bus(Bus::new(), clients)
    }

    pub fn on_bus(bus: Bus, clients: usize) -> Self {
        let reg = |p| bus.register(p).expect("fresh bus");
        Federation {
            clients: (1..=clients as u32).map(|m| reg(PartyId::Client(m))).collect(),
            aggregation: reg(PartyId::AggregationServer),
            key_server: reg(PartyId::KeyServer),
            label_owner: reg(PartyId::LabelOwner),
            bus: bus.clone(),
        }
    }

    pub fn client_ids(&self) -> Vec<PartyId> {
        self.clients.iter().map(Endpoint::party).collect()
    }
}
