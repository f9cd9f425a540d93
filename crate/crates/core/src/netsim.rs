//! Deterministic discrete-event transport.
//!
//! Nodes exchange byte payloads over point-to-point links. Each link
//! direction owns a [`SplitMix64`] stream; every send on that direction
//! consumes exactly one draw, and the packet is dropped iff the draw is
//! `< loss_prob`. For `connect(a, b, cfg)` the streams are seeded as
//!
//! ```text
//! root = SplitMix64(cfg.seed)
//! a->b = SplitMix64(root.next_u64())
//! b->a = SplitMix64(root.next_u64())
//! ```
//!
//! Events are ordered by `(at, seq)` where `seq` is a global counter bumped
//! on every schedule, so same-instant sends are delivered in send order.
//! The simulated clock is the only clock.
//!
//! Client transactions retransmit a request on Timer A: first send at `t0`
//! with a 500 ms timer, the timer doubling on every retransmission, at most
//! 7 attempts. When the 7th attempt's 32 s timer fires with no final
//! response the transaction is timed out.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::SplitMix64;
use crate::sip::{parse_message, serialize_message, Method, SipMessage};

/// Simulated milliseconds.
pub type SimTime = u64;

pub const TIMER_A_INITIAL_MS: u64 = 500;
pub const MAX_ATTEMPTS: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LinkId(u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TxnId(usize);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("node name `{0}` already in use")]
    DuplicateNode(String),
    #[error("nodes are already linked")]
    DuplicateLink,
    #[error("no route from {from} to {to}")]
    NoRoute { from: String, to: String },
    #[error("invalid link configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("cannot schedule at {at}, clock is already at {now}")]
    InThePast { at: SimTime, now: SimTime },
    #[error("only non-ACK requests can be sent reliably")]
    NotReliable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    pub delay_ms: u64,
    pub loss_prob: f64,
    pub seed: u64,
}

impl LinkConfig {
    pub fn new(delay_ms: u64, loss_prob: f64, seed: u64) -> Result<Self, NetError> {
        let cfg = LinkConfig {
            delay_ms,
            loss_prob,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lossless(delay_ms: u64) -> Self {
        LinkConfig {
            delay_ms,
            loss_prob: 0.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), NetError> {
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(NetError::InvalidConfig("loss_prob must be within [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Delivered,
    Dropped,
}

impl fmt::Display for Disposition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Disposition::Delivered => "delivered",
            Disposition::Dropped => "dropped",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub at: SimTime,
    pub seq: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub payload: Vec<u8>,
    pub disposition: Disposition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxnState {
    Trying,
    Completed,
    TimedOut,
}

#[derive(Debug, Clone)]
pub struct ClientTransaction {
    pub request: SipMessage,
    pub from: NodeId,
    pub to: NodeId,
    pub timer_a_ms: u64,
    pub attempts: u32,
    pub state: TxnState,
    /// Send instant of every attempt.
    pub sent_at: Vec<SimTime>,
    /// Timer duration armed after each attempt.
    pub timers: Vec<u64>,
    pub final_status: Option<u16>,
    pub finished_at: Option<SimTime>,
    wire: Vec<u8>,
}

impl ClientTransaction {
    fn matches(&self, resp: &SipMessage) -> bool {
        resp.status().is_some_and(|s| s >= 200)
            && resp.call_id() == self.request.call_id()
            && resp.cseq() == self.request.cseq()
    }
}

/// A packet handed to its destination node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub at: SimTime,
    pub from: NodeId,
    pub to: NodeId,
    pub payload: Vec<u8>,
    /// Set when this packet was the final response of a transaction owned
    /// by `to`.
    pub completed: Option<TxnId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Occurrence {
    Delivered(Delivery),
    TimedOut { txn: TxnId, node: NodeId },
}

#[derive(Debug)]
struct Direction {
    delay_ms: u64,
    loss_prob: f64,
    rng: SplitMix64,
}

#[derive(Debug)]
enum Pending {
    Packet {
        from: NodeId,
        to: NodeId,
        payload: Vec<u8>,
        dropped: bool,
    },
    Timer(TxnId),
}

#[derive(Debug)]
struct Scheduled {
    at: SimTime,
    seq: u64,
    what: Pending,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Debug, Default)]
pub struct Network {
    now: SimTime,
    seq: u64,
    names: Vec<String>,
    by_name: HashMap<String, NodeId>,
    links: HashMap<(NodeId, NodeId), Direction>,
    link_count: u32,
    queue: BinaryHeap<Reverse<Scheduled>>,
    trace: Vec<SimEvent>,
    txns: Vec<ClientTransaction>,
    /// Transactions still in `Trying`.
    active: BTreeSet<usize>,
    sends: u64,
    untraced: bool,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn add_node(&mut self, name: &str) -> Result<NodeId, NetError> {
        if self.by_name.contains_key(name) {
            return Err(NetError::DuplicateNode(name.to_owned()));
        }
        let id = NodeId(self.names.len() as u32);
        self.names.push(name.to_owned());
        self.by_name.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: NodeId) -> &str {
        self.names.get(id.0 as usize).map(String::as_str).unwrap_or("?")
    }

    fn check_node(&self, id: NodeId) -> Result<(), NetError> {
        if (id.0 as usize) < self.names.len() {
            Ok(())
        } else {
            Err(NetError::UnknownNode(id))
        }
    }

    pub fn connect(&mut self, a: NodeId, b: NodeId, cfg: LinkConfig) -> Result<LinkId, NetError> {
        self.check_node(a)?;
        self.check_node(b)?;
        cfg.validate()?;
        if a == b {
            return Err(NetError::InvalidConfig("cannot link a node to itself"));
        }
        if self.links.contains_key(&(a, b)) {
            return Err(NetError::DuplicateLink);
        }
        let mut root = SplitMix64::new(cfg.seed);
        for key in [(a, b), (b, a)] {
            self.links.insert(
                key,
                Direction {
                    delay_ms: cfg.delay_ms,
                    loss_prob: cfg.loss_prob,
                    rng: root.fork(),
                },
            );
        }
        self.link_count += 1;
        Ok(LinkId(self.link_count - 1))
    }

    fn schedule(&mut self, at: SimTime, what: Pending) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            at,
            seq: self.seq,
            what,
        }));
    }

    pub fn send(&mut self, from: NodeId, to: NodeId, payload: Vec<u8>, at: SimTime) -> Result<(), NetError> {
        if at < self.now {
            return Err(NetError::InThePast { at, now: self.now });
        }
        if !self.links.contains_key(&(from, to)) {
            return Err(NetError::NoRoute {
                from: self.name(from).to_owned(),
                to: self.name(to).to_owned(),
            });
        }
        let dir = self.links.get_mut(&(from, to)).expect("checked above");
        let dropped = dir.rng.chance(dir.loss_prob);
        let arrive = at + dir.delay_ms;
        self.sends += 1;
        self.schedule(
            arrive,
            Pending::Packet {
                from,
                to,
                payload,
                dropped,
            },
        );
        Ok(())
    }

    /// Start a client transaction now. Progress happens as events are run.
    pub fn send_reliable(&mut self, from: NodeId, to: NodeId, request: SipMessage) -> Result<TxnId, NetError> {
        match request.method() {
            Some(Method::Ack) | None => return Err(NetError::NotReliable),
            Some(_) => {}
        }
        let wire = serialize_message(&request).map_err(|_| NetError::NotReliable)?;
        let id = TxnId(self.txns.len());
        let now = self.now;
        self.send(from, to, wire.clone(), now)?;
        self.txns.push(ClientTransaction {
            request,
            from,
            to,
            timer_a_ms: TIMER_A_INITIAL_MS,
            attempts: 1,
            state: TxnState::Trying,
            sent_at: vec![now],
            timers: vec![TIMER_A_INITIAL_MS],
            final_status: None,
            finished_at: None,
            wire,
        });
        self.active.insert(id.0);
        self.schedule(now + TIMER_A_INITIAL_MS, Pending::Timer(id));
        Ok(id)
    }

    pub fn transaction(&self, id: TxnId) -> &ClientTransaction {
        &self.txns[id.0]
    }

    fn is_stale(&self, what: &Pending) -> bool {
        matches!(what, Pending::Timer(id) if self.txns[id.0].state != TxnState::Trying)
    }

    /// Process the next meaningful event. Stale timers of finished
    /// transactions are discarded without moving the clock.
    pub fn step(&mut self) -> Option<Occurrence> {
        while let Some(Reverse(ev)) = self.queue.pop() {
            if self.is_stale(&ev.what) {
                continue;
            }
            self.now = ev.at;
            match ev.what {
                Pending::Packet {
                    from,
                    to,
                    payload,
                    dropped,
                } => {
                    if !self.untraced {
                        self.trace.push(SimEvent {
                            at: ev.at,
                            seq: ev.seq,
                            from,
                            to,
                            payload: payload.clone(),
                            disposition: if dropped {
                                Disposition::Dropped
                            } else {
                                Disposition::Delivered
                            },
                        });
                    }
                    if dropped {
                        continue;
                    }
                    let completed = self.complete_matching(to, &payload);
                    return Some(Occurrence::Delivered(Delivery {
                        at: ev.at,
                        from,
                        to,
                        payload,
                        completed,
                    }));
                }
                Pending::Timer(id) => {
                    let txn = &mut self.txns[id.0];
                    if txn.attempts < MAX_ATTEMPTS {
                        txn.attempts += 1;
                        txn.timer_a_ms *= 2;
                        txn.sent_at.push(ev.at);
                        txn.timers.push(txn.timer_a_ms);
                        let (from, to, wire, timer) = (txn.from, txn.to, txn.wire.clone(), txn.timer_a_ms);
                        // Link existed at transaction start and links are never removed.
                        let _ = self.send(from, to, wire, ev.at);
                        self.schedule(ev.at + timer, Pending::Timer(id));
                    } else {
                        txn.state = TxnState::TimedOut;
                        txn.finished_at = Some(ev.at);
                        let node = txn.from;
                        self.active.remove(&id.0);
                        return Some(Occurrence::TimedOut { txn: id, node });
                    }
                }
            }
        }
        None
    }

    fn complete_matching(&mut self, node: NodeId, payload: &[u8]) -> Option<TxnId> {
        if !self.active.iter().any(|i| self.txns[*i].from == node) {
            return None;
        }
        let msg = parse_message(payload).ok()?;
        let idx = *self
            .active
            .iter()
            .find(|i| self.txns[**i].from == node && self.txns[**i].matches(&msg))?;
        let txn = &mut self.txns[idx];
        txn.state = TxnState::Completed;
        txn.final_status = msg.status();
        txn.finished_at = Some(self.now);
        self.active.remove(&idx);
        Some(TxnId(idx))
    }

    /// Time of the next meaningful event, if any.
    pub fn next_event_at(&mut self) -> Option<SimTime> {
        while let Some(Reverse(ev)) = self.queue.peek() {
            if self.is_stale(&ev.what) {
                self.queue.pop();
                continue;
            }
            return Some(ev.at);
        }
        None
    }

    /// Drain every pending event with no node logic attached.
    pub fn run_until_idle(&mut self) -> &[SimEvent] {
        while self.step().is_some() {}
        &self.trace
    }

    /// Move the clock forward to `t`, which must not precede pending events
    /// that the caller still wants dispatched.
    pub fn advance_clock(&mut self, t: SimTime) {
        self.now = self.now.max(t);
    }

    /// Stop (or resume) recording packet events. Long-running servers turn
    /// this off so the trace does not grow without bound.
    pub fn set_tracing(&mut self, on: bool) {
        self.untraced = !on;
    }

    pub fn trace(&self) -> &[SimEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<SimEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn sends(&self) -> u64 {
        self.sends
    }

    /// One line per event: `at \t from \t to \t disposition \t payload_hash`,
    /// where the hash is the first 16 hex chars of SHA-256(payload).
    pub fn dump(&self, events: &[SimEvent]) -> String {
        let mut out = String::new();
        for ev in events {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                ev.at,
                self.name(ev.from),
                self.name(ev.to),
                ev.disposition,
                payload_hash(&ev.payload)
            ));
        }
        out
    }
}

pub fn payload_hash(payload: &[u8]) -> String {
    hex::encode(&Sha256::digest(payload)[..8])
}
