//! Message delivery: the wire codec shared by every transport, and a
//! deterministic in-process simulated network for testing.
//!
//! Wire format: a 4-byte big-endian length prefix, then one JSON object
//! `{"v":1,"from":…,"to":…,"seq":…,"kind":…,"payload":…}`. Facts travel as
//! rendered fact text and rules as rendered rule text, so a receiving peer
//! re-parses and re-validates everything with its own front end rather
//! than trusting a binary blob.
//!
//! The simulator keeps per-(sender, target) FIFO queues. Delivery order
//! across links depends on the configured policy, but within one link it
//! is always send order, and nothing is lost or duplicated. Given the same
//! seed, policy, and host-call script, a run is bit-for-bit reproducible.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ast::{Fact, Tuple};
use crate::parser::{parse_decl, parse_fact, render_decl, render_fact, Decl};
use crate::peer::{Message, MessageItem};
use crate::schema::RelationKey;

/// Hard ceiling on one frame; anything larger is malformed.
pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated frame: wanted {wanted} bytes, had {have}")]
    Truncated { wanted: usize, have: usize },
    #[error("unsupported wire version {0}")]
    BadVersion(u64),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    v: u64,
    from: String,
    to: String,
    seq: u64,
    kind: String,
    payload: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct WireItem {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    relation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    facts: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delegation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    origin: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rule: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    decls: Option<Vec<String>>,
}

fn blank_item(kind: &str) -> WireItem {
    WireItem {
        kind: kind.to_string(),
        relation: None,
        facts: None,
        delegation: None,
        origin: None,
        rule: None,
        decls: None,
    }
}

fn render_rows(relation: &RelationKey, facts: &std::collections::BTreeSet<Tuple>) -> Vec<String> {
    facts
        .iter()
        .map(|t| render_fact(&Fact::new(&relation.relation, &relation.peer, t.clone())))
        .collect()
}

fn parse_rows(
    kind: &str,
    relation: Option<&String>,
    facts: Option<&Vec<String>>,
) -> Result<(RelationKey, std::collections::BTreeSet<Tuple>), DecodeError> {
    let relation = relation
        .ok_or_else(|| DecodeError::Malformed(format!("{kind} item without relation")))?;
    let (rel, peer) = relation
        .split_once('@')
        .ok_or_else(|| DecodeError::Malformed(format!("bad relation key {relation}")))?;
    let key = RelationKey::new(rel, peer);
    let mut rows = std::collections::BTreeSet::new();
    for text in facts.into_iter().flatten() {
        let fact = parse_fact(text)
            .map_err(|e| DecodeError::Malformed(format!("bad fact `{text}`: {e}")))?;
        if fact.key() != key {
            return Err(DecodeError::Malformed(format!(
                "fact `{text}` does not belong to {key}"
            )));
        }
        rows.insert(fact.tuple);
    }
    Ok((key, rows))
}

/// Encodes one message as a length-prefixed JSON frame.
pub fn encode(msg: &Message) -> Vec<u8> {
    let items: Vec<WireItem> = msg
        .items
        .iter()
        .map(|item| match item {
            MessageItem::FactBatch { relation, facts } => {
                let mut w = blank_item("facts");
                w.relation = Some(relation.to_string());
                w.facts = Some(render_rows(relation, facts));
                w
            }
            MessageItem::Deletion { relation, facts } => {
                let mut w = blank_item("deletion");
                w.relation = Some(relation.to_string());
                w.facts = Some(render_rows(relation, facts));
                w
            }
            MessageItem::SnapshotUpdate { relation, facts } => {
                let mut w = blank_item("snapshot");
                w.relation = Some(relation.to_string());
                w.facts = Some(render_rows(relation, facts));
                w
            }
            MessageItem::DelegateInstall { delegation, origin, rule, decls } => {
                let mut w = blank_item("install");
                w.delegation = Some(delegation.clone());
                w.origin = Some(origin.as_str().to_string());
                w.rule = Some(rule.clone());
                w.decls = Some(
                    decls
                        .iter()
                        .map(|(key, decl)| {
                            render_decl(&Decl { kind: decl.kind, key: key.clone(), arity: decl.arity })
                        })
                        .collect(),
                );
                w
            }
            MessageItem::DelegateRemove { delegation } => {
                let mut w = blank_item("remove");
                w.delegation = Some(delegation.clone());
                w
            }
        })
        .collect();
    let envelope = Envelope {
        v: 1,
        from: msg.sender.clone(),
        to: msg.target.clone(),
        seq: msg.seq,
        kind: "batch".to_string(),
        payload: serde_json::to_value(items).expect("wire items serialize"),
    };
    let body = serde_json::to_vec(&envelope).expect("envelope serializes");
    assert!(body.len() <= MAX_FRAME, "frame over {MAX_FRAME} bytes");
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes one frame produced by `encode`. The input must contain exactly
/// one whole frame.
pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::Truncated { wanted: 4, have: bytes.len() });
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_FRAME {
        return Err(DecodeError::Malformed(format!("frame length {len} over limit")));
    }
    if bytes.len() < 4 + len {
        return Err(DecodeError::Truncated { wanted: 4 + len, have: bytes.len() });
    }
    decode_body(&bytes[4..4 + len])
}

/// Decodes a frame body (after the length prefix has been consumed).
pub fn decode_body(body: &[u8]) -> Result<Message, DecodeError> {
    let envelope: Envelope =
        serde_json::from_slice(body).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    if envelope.v != 1 {
        return Err(DecodeError::BadVersion(envelope.v));
    }
    if envelope.kind != "batch" {
        return Err(DecodeError::Malformed(format!("unknown message kind {}", envelope.kind)));
    }
    let wire_items: Vec<WireItem> = serde_json::from_value(envelope.payload)
        .map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let mut items = Vec::with_capacity(wire_items.len());
    for w in &wire_items {
        let item = match w.kind.as_str() {
            "facts" => {
                let (relation, facts) = parse_rows("facts", w.relation.as_ref(), w.facts.as_ref())?;
                MessageItem::FactBatch { relation, facts }
            }
            "deletion" => {
                let (relation, facts) =
                    parse_rows("deletion", w.relation.as_ref(), w.facts.as_ref())?;
                MessageItem::Deletion { relation, facts }
            }
            "snapshot" => {
                let (relation, facts) =
                    parse_rows("snapshot", w.relation.as_ref(), w.facts.as_ref())?;
                MessageItem::SnapshotUpdate { relation, facts }
            }
            "install" => {
                let delegation = w
                    .delegation
                    .clone()
                    .ok_or_else(|| DecodeError::Malformed("install without delegation".into()))?;
                let origin = w
                    .origin
                    .clone()
                    .ok_or_else(|| DecodeError::Malformed("install without origin".into()))?;
                let rule = w
                    .rule
                    .clone()
                    .ok_or_else(|| DecodeError::Malformed("install without rule".into()))?;
                let mut decls = Vec::new();
                for text in w.decls.iter().flatten() {
                    let d = parse_decl(text)
                        .map_err(|e| DecodeError::Malformed(format!("bad decl `{text}`: {e}")))?;
                    decls.push((
                        d.key.clone(),
                        crate::schema::RelationDecl { kind: d.kind, arity: d.arity },
                    ));
                }
                MessageItem::DelegateInstall {
                    delegation,
                    origin: crate::ast::RuleId::from_string(origin),
                    rule,
                    decls,
                }
            }
            "remove" => {
                let delegation = w
                    .delegation
                    .clone()
                    .ok_or_else(|| DecodeError::Malformed("remove without delegation".into()))?;
                MessageItem::DelegateRemove { delegation }
            }
            other => return Err(DecodeError::Malformed(format!("unknown item kind {other}"))),
        };
        items.push(item);
    }
    Ok(Message { sender: envelope.from, target: envelope.to, seq: envelope.seq, items })
}

/// How the simulator picks the next deliveries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryPolicy {
    /// Each step delivers every queued message, per-link in order,
    /// links in name order.
    FifoPerLink,
    /// Each step delivers every queued message, but the interleaving
    /// across links is a seeded shuffle (per-link order still holds).
    RandomOrder,
    /// Messages sit in flight for a seeded number of steps up to
    /// `max_delay_ticks` before they become deliverable.
    AdversarialDelay,
}

impl DeliveryPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fifo-per-link" => Some(DeliveryPolicy::FifoPerLink),
            "random-order" => Some(DeliveryPolicy::RandomOrder),
            "adversarial-delay" => Some(DeliveryPolicy::AdversarialDelay),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimNetConfig {
    pub seed: u64,
    pub policy: DeliveryPolicy,
    pub max_delay_ticks: u32,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        SimNetConfig { seed: 0, policy: DeliveryPolicy::FifoPerLink, max_delay_ticks: 4 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub bytes: u64,
    /// Data tuples carried by fact, deletion, and snapshot items.
    pub fact_tuples: u64,
    /// Rule texts carried by delegation installs.
    pub rules_shipped: u64,
}

/// One queued message and the tick at which it may be delivered.
#[derive(Debug, Clone)]
struct InFlight {
    ready_at: u64,
    msg: Message,
}

/// Deterministic in-process network. Messages are round-tripped through
/// the wire codec on send, so simulated runs exercise exactly the bytes a
/// socket transport would carry.
#[derive(Debug)]
pub struct SimNet {
    config: SimNetConfig,
    rng: ChaCha8Rng,
    /// (sender, target) → queued messages, FIFO per link.
    links: BTreeMap<(String, String), VecDeque<InFlight>>,
    tick: u64,
    stats: NetStats,
    /// Human-readable delivery trace for determinism checks.
    trace: Vec<String>,
}

impl SimNet {
    pub fn new(config: SimNetConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        SimNet { config, rng, links: BTreeMap::new(), tick: 0, stats: NetStats::default(), trace: Vec::new() }
    }

    pub fn stats(&self) -> &NetStats {
        &self.stats
    }

    pub fn trace(&self) -> &[String] {
        &self.trace
    }

    pub fn pending(&self) -> usize {
        self.links.values().map(|q| q.len()).sum()
    }

    /// Accepts a message for later delivery, checking the codec round-trip
    /// on the way in.
    pub fn send(&mut self, msg: Message) {
        let bytes = encode(&msg);
        self.stats.bytes += bytes.len() as u64;
        let decoded = decode(&bytes).expect("own encoding decodes");
        debug_assert_eq!(decoded, msg);
        let delay = match self.config.policy {
            DeliveryPolicy::AdversarialDelay if self.config.max_delay_ticks > 0 => {
                u64::from(self.rng.random_range(0..=self.config.max_delay_ticks))
            }
            _ => 0,
        };
        self.stats.sent += 1;
        for item in &msg.items {
            match item {
                MessageItem::FactBatch { facts, .. }
                | MessageItem::Deletion { facts, .. }
                | MessageItem::SnapshotUpdate { facts, .. } => {
                    self.stats.fact_tuples += facts.len() as u64;
                }
                MessageItem::DelegateInstall { .. } => self.stats.rules_shipped += 1,
                MessageItem::DelegateRemove { .. } => {}
            }
        }
        let link = (msg.sender.clone(), msg.target.clone());
        self.links.entry(link).or_default().push_back(InFlight { ready_at: self.tick + delay, msg: decoded });
    }

    /// Delivers every currently deliverable message, returning them in
    /// final delivery order. Per-link order is always preserved.
    pub fn deliver_step(&mut self) -> Vec<Message> {
        self.tick += 1;
        // Collect the deliverable prefix of each link queue: a delayed
        // message holds back everything behind it on the same link, which
        // keeps per-link FIFO even under adversarial delay.
        let mut batches: Vec<(String, Vec<Message>)> = Vec::new();
        for ((_, target), queue) in self.links.iter_mut() {
            let mut batch = Vec::new();
            while queue.front().is_some_and(|m| m.ready_at <= self.tick) {
                batch.push(queue.pop_front().expect("front checked").msg);
            }
            if !batch.is_empty() {
                batches.push((target.clone(), batch));
            }
        }
        self.links.retain(|_, q| !q.is_empty());
        if let DeliveryPolicy::RandomOrder = self.config.policy {
            batches.shuffle(&mut self.rng);
        }
        let mut out = Vec::new();
        for (_, batch) in batches {
            for msg in batch {
                self.trace.push(format!(
                    "tick {} deliver {}->{} seq {} items {}",
                    self.tick,
                    msg.sender,
                    msg.target,
                    msg.seq,
                    msg.items.len()
                ));
                self.stats.delivered += 1;
                out.push(msg);
            }
        }
        out
    }
}
