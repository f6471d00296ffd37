//! The per-peer stage loop.
//!
//! A peer owns stored tables, an evaluation engine, installed rules, and an
//! inbox. Everything it does happens inside discrete *stages* with three
//! steps:
//!
//! 1. **Collect** — drain the inbox: deletions and fact batches mutate the
//!    tables, snapshot updates replace per-sender contributions, rule
//!    installs/removals from other peers apply, and rules queued during the
//!    previous stage activate.
//! 2. **Compute** — inputs are frozen and the engine runs its fixpoint;
//!    afterwards the evaluable prefixes of waiting rules are queried for
//!    name bindings, and the resulting instantiations are queued for the
//!    next stage.
//! 3. **Emit** — channel buffers are diffed against what was last sent and
//!    flushed as messages (all output for one target coalesces into one
//!    message), derivations into local stored relations are applied, and
//!    observers are notified.
//!
//! A stage is transactional: if it fails, the peer is left bit-identical
//! to its pre-stage state. Local inserts and deletes go through the peer's
//! own inbox, so they become visible at the next stage exactly like remote
//! input. Stored tables persist across stages on their own; derived
//! relations never do.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::collections::VecDeque;
use std::time::Instant;

use thiserror::Error;

use crate::ast::{Fact, Rule, RuleId, Tuple};
use crate::engine::{Engine, EngineRule, FixpointRun, HeadSink, NegationCycleError};
use crate::parser::{self, parse_program, parse_rule, ParseError};
use crate::rewrite::{
    decls_for_rule, instantiate_deferred, rewrite_view_delegation, split_nonlocal, ChannelMode,
    InstantiationLedger, LocalRule, RewriteError,
};
use crate::safety::{
    bindable_name_vars, classify_rule, evaluable_prefix_len, validate_rule, RuleClass, SafetyError,
};
use crate::schema::{RelationDecl, RelationKey, RelationKind, Schema, SchemaError};

/// One wire unit: everything one peer sends another in one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub sender: String,
    pub target: String,
    /// Monotone per (sender, target); receivers drop non-increasing ones.
    pub seq: u64,
    pub items: Vec<MessageItem>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MessageItem {
    /// Facts to merge into the receiver's stored relation.
    FactBatch { relation: RelationKey, facts: BTreeSet<Tuple> },
    /// Facts to remove from the receiver's stored relation.
    Deletion { relation: RelationKey, facts: BTreeSet<Tuple> },
    /// Full replacement of this sender's contribution to the relation.
    SnapshotUpdate { relation: RelationKey, facts: BTreeSet<Tuple> },
    /// A rule shipped for installation, with the declarations it needs.
    /// The rule travels as source text and is re-parsed and re-validated
    /// by the receiver.
    DelegateInstall {
        delegation: String,
        origin: RuleId,
        rule: String,
        decls: Vec<(RelationKey, RelationDecl)>,
    },
    /// Retraction of a previously shipped rule.
    DelegateRemove { delegation: String },
}

/// Labels for the seven timed slices of a stage. The `a` slices are
/// generic evaluation work; the `b` slices are rule-shipping work.
pub const STEP_LABELS: [&str; 7] = ["1a", "1b", "2a", "2b", "2c", "3a", "3b"];

/// Per-step timings: `virt` counts deterministic abstract work units (used
/// by default so reports are reproducible); `wall_micros` is elapsed time.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepTimes {
    pub virt: [u64; 7],
    pub wall_micros: [u64; 7],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub stage: u64,
    pub steps: StepTimes,
    pub msgs_out: u64,
    pub rules_installed: u64,
    pub rules_removed: u64,
    /// Whether the stage changed any state or produced output.
    pub changed: bool,
    pub fixpoint: Option<FixpointRun>,
    /// Non-fatal problems (e.g. a shipped rule that failed validation).
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HostError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("relation {0} is derived; facts cannot be stored in it")]
    NotStored(RelationKey),
    #[error("unknown rule id {0}")]
    UnknownRule(RuleId),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StageError {
    #[error("stage input conflicts with the schema: {0}")]
    Schema(#[from] SchemaError),
    #[error("stage input targets derived relation {0}")]
    NotStored(RelationKey),
}

/// Summary of loading one program file into a peer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadSummary {
    pub decls: usize,
    pub facts: usize,
    pub rules: Vec<RuleId>,
}

/// Where an installed rule came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RuleOrigin {
    /// Installed by this peer's host.
    Local,
    /// Shipped by another peer.
    Delegated(String),
    /// Instantiated from a waiting rule once its name variables bound.
    Instance(RuleId),
}

/// One row of `active_rules`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleRecord {
    pub id: RuleId,
    pub text: String,
    pub origin: RuleOrigin,
    pub class: RuleClass,
}

/// A stored relation: rows inserted directly (local inserts and fact
/// batches) plus per-sender snapshot contributions. What rules read is the
/// union, mirrored into the engine.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Table {
    direct: BTreeSet<Tuple>,
    contribs: BTreeMap<String, BTreeSet<Tuple>>,
}

impl Table {
    fn visible(&self) -> BTreeSet<Tuple> {
        let mut out = self.direct.clone();
        for c in self.contribs.values() {
            out.extend(c.iter().cloned());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ChannelState {
    mode: ChannelMode,
    /// How many installed rules feed this channel.
    producers: usize,
    /// Insert mode: everything ever sent. Delta/Snapshot: last full contents.
    sent: BTreeSet<Tuple>,
}

/// Everything one installed rule brought along, so removal can unwind it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Products {
    text: String,
    class: Option<RuleClass>,
    origin: Option<RuleOrigin>,
    engine_rules: Vec<RuleId>,
    channels: Vec<RelationKey>,
    /// (target peer, install id, origin id) of rules shipped elsewhere.
    delegations: Vec<(String, RuleId)>,
    /// Child rules spawned by instantiation.
    instances: Vec<RuleId>,
    deferred: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct DeferredRule {
    id: RuleId,
    rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum PendingOp {
    Install { origin: RuleOrigin, id: RuleId, rule: Rule },
    Remove { id: RuleId },
}

/// A peer: single-writer state driven by `run_stage`. The inbox is the
/// only concurrency boundary; transports append messages, the stage loop
/// consumes them.
#[derive(Debug, Clone)]
pub struct Peer {
    name: String,
    schema: Schema,
    tables: BTreeMap<RelationKey, Table>,
    engine: Engine,
    engine_rules: BTreeMap<RuleId, EngineRule>,
    products: BTreeMap<RuleId, Products>,
    /// Host-installed rule text → id, for idempotent re-installation.
    local_texts: BTreeMap<String, RuleId>,
    delegated: BTreeMap<String, BTreeSet<RuleId>>,
    deferred: BTreeMap<RuleId, DeferredRule>,
    ledger: InstantiationLedger,
    pending: Vec<PendingOp>,
    inbox: VecDeque<Message>,
    seen_seq: BTreeMap<String, u64>,
    next_seq: BTreeMap<String, u64>,
    channels: BTreeMap<RelationKey, ChannelState>,
    /// Final messages owed for channels torn down this stage.
    teardown: Vec<(String, MessageItem)>,
    /// Rule installs/removals owed to other peers, queued by admits.
    delegation_out: Vec<(String, MessageItem)>,
    outbox: Vec<Message>,
    stage_counter: u64,
    rule_counter: u64,
}

impl Peer {
    pub fn new(name: &str) -> Self {
        let mut schema = Schema::new();
        schema.add_peer(name);
        Peer {
            name: name.to_string(),
            schema,
            tables: BTreeMap::new(),
            engine: Engine::new(),
            engine_rules: BTreeMap::new(),
            products: BTreeMap::new(),
            local_texts: BTreeMap::new(),
            delegated: BTreeMap::new(),
            deferred: BTreeMap::new(),
            ledger: InstantiationLedger::default(),
            pending: Vec::new(),
            inbox: VecDeque::new(),
            seen_seq: BTreeMap::new(),
            next_seq: BTreeMap::new(),
            channels: BTreeMap::new(),
            teardown: Vec::new(),
            delegation_out: Vec::new(),
            outbox: Vec::new(),
            stage_counter: 0,
            rule_counter: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stage_counter(&self) -> u64 {
        self.stage_counter
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    /// Declares a relation up front (program `ext`/`int` statements).
    pub fn declare(
        &mut self,
        key: &RelationKey,
        kind: RelationKind,
        arity: usize,
    ) -> Result<(), HostError> {
        self.schema.declare(key, kind, arity)?;
        Ok(())
    }

    /// Queues a fact insertion through the peer's own inbox; it lands in
    /// the table at the next stage.
    pub fn insert_fact(&mut self, fact: &Fact) -> Result<(), HostError> {
        let key = fact.key();
        self.admit_fact_relation(&key, fact.tuple.len())?;
        self.self_message(MessageItem::FactBatch {
            relation: key,
            facts: BTreeSet::from([fact.tuple.clone()]),
        });
        Ok(())
    }

    /// Queues a fact deletion; the table shrinks at the next stage and
    /// everything derived from the fact is recomputed away.
    pub fn delete_fact(&mut self, fact: &Fact) -> Result<(), HostError> {
        let key = fact.key();
        self.admit_fact_relation(&key, fact.tuple.len())?;
        self.self_message(MessageItem::Deletion {
            relation: key,
            facts: BTreeSet::from([fact.tuple.clone()]),
        });
        Ok(())
    }

    fn admit_fact_relation(&mut self, key: &RelationKey, arity: usize) -> Result<(), HostError> {
        match self.schema.get(key) {
            Some(decl) if decl.kind == RelationKind::Intensional => {
                Err(HostError::NotStored(key.clone()))
            }
            Some(decl) if decl.arity != arity => {
                self.schema.check_arity(key, arity)?;
                Ok(())
            }
            Some(_) => Ok(()),
            None => {
                self.schema.declare(key, RelationKind::Extensional, arity)?;
                Ok(())
            }
        }
    }

    fn self_message(&mut self, item: MessageItem) {
        let seq = self.alloc_seq(&self.name.clone());
        let msg = Message {
            sender: self.name.clone(),
            target: self.name.clone(),
            seq,
            items: vec![item],
        };
        self.inbox.push_back(msg);
    }

    fn alloc_seq(&mut self, target: &str) -> u64 {
        let seq = self.next_seq.entry(target.to_string()).or_insert(0);
        *seq += 1;
        *seq
    }

    /// Parses, validates, and queues a rule; it activates at the next
    /// stage. Re-installing identical text returns the existing id.
    pub fn install_rule(&mut self, text: &str) -> Result<RuleId, HostError> {
        let rule = parse_rule(text)?;
        validate_rule(&rule, &self.schema)?;
        let canonical = parser::render_rule(&rule);
        if let Some(id) = self.local_texts.get(&canonical) {
            return Ok(id.clone());
        }
        let id = RuleId::new(&self.name, self.rule_counter);
        self.rule_counter += 1;
        self.local_texts.insert(canonical, id.clone());
        self.pending.push(PendingOp::Install { origin: RuleOrigin::Local, id: id.clone(), rule });
        Ok(id)
    }

    /// Queues removal of a rule and everything it produced (shipped rules,
    /// instantiations, channels). Takes effect at the next stage.
    pub fn remove_rule(&mut self, id: &RuleId) -> Result<(), HostError> {
        let pending_install = self
            .pending
            .iter()
            .position(|op| matches!(op, PendingOp::Install { id: p, .. } if p == id));
        if let Some(at) = pending_install {
            self.pending.remove(at);
            self.local_texts.retain(|_, v| v != id);
            return Ok(());
        }
        if !self.products.contains_key(id) {
            return Err(HostError::UnknownRule(id.clone()));
        }
        self.pending.push(PendingOp::Remove { id: id.clone() });
        Ok(())
    }

    /// Loads a program: declarations apply immediately, facts and rules
    /// queue for the next stage.
    pub fn load_program(&mut self, text: &str) -> Result<LoadSummary, HostError> {
        let program = parse_program(text, Some(&self.name))?;
        let mut summary = LoadSummary::default();
        for item in &program.items {
            match item {
                parser::Item::Decl { decl, .. } => {
                    self.schema.declare(&decl.key, decl.kind, decl.arity)?;
                    summary.decls += 1;
                }
                parser::Item::Fact { fact, .. } => {
                    self.insert_fact(fact)?;
                    summary.facts += 1;
                }
                parser::Item::Rule { rule, .. } => {
                    let id = self.install_rule(&parser::render_rule(rule))?;
                    summary.rules.push(id);
                }
            }
        }
        Ok(summary)
    }

    /// Transport delivery: appends to the inbox after (sender, seq)
    /// duplicate filtering.
    pub fn enqueue(&mut self, msg: Message) {
        let seen = self.seen_seq.entry(msg.sender.clone()).or_insert(0);
        if msg.seq <= *seen {
            return;
        }
        *seen = msg.seq;
        self.inbox.push_back(msg);
    }

    /// Whether running a stage now would do anything.
    pub fn needs_stage(&self) -> bool {
        !self.inbox.is_empty()
            || !self.pending.is_empty()
            || self.engine.dirty()
            || !self.teardown.is_empty()
            || !self.delegation_out.is_empty()
    }

    /// Messages produced by finished stages; the transport drains these.
    pub fn take_outbox(&mut self) -> Vec<Message> {
        std::mem::take(&mut self.outbox)
    }

    /// Drops all queued inbound messages, returning how many. Long-running
    /// hosts call this after a failed stage so one bad input cannot wedge
    /// the peer forever.
    pub fn discard_inbox(&mut self) -> usize {
        let n = self.inbox.len();
        self.inbox.clear();
        n
    }

    /// Contents of a relation as currently visible, without staging.
    pub fn peek(&self, key: &RelationKey) -> BTreeSet<Tuple> {
        self.engine.contents(key).clone()
    }

    /// Queries a relation. Derived relations are only current after a
    /// stage, so pending input is staged through first.
    pub fn query(&mut self, key: &RelationKey) -> Result<BTreeSet<Tuple>, StageError> {
        while self.needs_stage() {
            self.run_stage()?;
        }
        Ok(self.peek(key))
    }

    /// Every installed rule with its origin and classification.
    pub fn active_rules(&self) -> Vec<RuleRecord> {
        self.products
            .iter()
            .map(|(id, p)| RuleRecord {
                id: id.clone(),
                text: p.text.clone(),
                origin: p.origin.clone().unwrap_or(RuleOrigin::Local),
                class: p.class.unwrap_or(RuleClass::Deduction),
            })
            .collect()
    }

    /// Ids of rules shipped to this peer by `delegator` that are active.
    pub fn delegations_from(&self, delegator: &str) -> Vec<RuleId> {
        self.delegated.get(delegator).map(|s| s.iter().cloned().collect()).unwrap_or_default()
    }

    /// Runs one stage. Transactional: on error the peer is unchanged.
    pub fn run_stage(&mut self) -> Result<StageReport, StageError> {
        let mut next = self.clone();
        let report = next.stage_inner()?;
        *self = next;
        Ok(report)
    }

    /// Runs stages until this peer alone has nothing left to do, up to
    /// `budget` stages. Returns the number of stages run.
    pub fn run_until_quiescent(&mut self, budget: usize) -> Result<usize, StageError> {
        let mut ran = 0;
        while self.needs_stage() && ran < budget {
            self.run_stage()?;
            ran += 1;
        }
        Ok(ran)
    }

    fn stage_inner(&mut self) -> Result<StageReport, StageError> {
        self.stage_counter += 1;
        let mut steps = StepTimes::default();
        let mut warnings = Vec::new();
        let mut installed = 0u64;
        let mut removed = 0u64;
        let mut changed = false;

        // ---- Step 1a: facts, deletions, snapshots --------------------
        let t = Instant::now();
        let mut virt = 0u64;
        let messages: Vec<Message> = self.inbox.drain(..).collect();
        let mut touched: BTreeSet<RelationKey> = BTreeSet::new();
        for msg in &messages {
            for item in &msg.items {
                match item {
                    MessageItem::FactBatch { relation, facts } => {
                        self.check_stage_relation(relation, facts)?;
                        let table = self.tables.entry(relation.clone()).or_default();
                        for f in facts {
                            table.direct.insert(f.clone());
                        }
                        touched.insert(relation.clone());
                        virt += facts.len() as u64;
                    }
                    MessageItem::Deletion { relation, facts } => {
                        self.check_stage_relation(relation, facts)?;
                        let table = self.tables.entry(relation.clone()).or_default();
                        for f in facts {
                            table.direct.remove(f);
                        }
                        touched.insert(relation.clone());
                        virt += facts.len() as u64;
                    }
                    MessageItem::SnapshotUpdate { relation, facts } => {
                        self.check_stage_relation(relation, facts)?;
                        let table = self.tables.entry(relation.clone()).or_default();
                        table.contribs.insert(msg.sender.clone(), facts.clone());
                        touched.insert(relation.clone());
                        virt += facts.len() as u64 + 1;
                    }
                    MessageItem::DelegateInstall { .. } | MessageItem::DelegateRemove { .. } => {}
                }
            }
        }
        for key in &touched {
            let visible = self.tables[key].visible();
            if self.engine.contents(key) != &visible {
                changed = true;
            }
            self.engine.replace_base(key, visible);
        }
        steps.virt[0] = virt + messages.len() as u64;
        steps.wall_micros[0] = t.elapsed().as_micros() as u64;

        // ---- Step 1b: rule installs, removals, activations -----------
        let t = Instant::now();
        let mut virt = 0u64;
        for msg in &messages {
            for item in &msg.items {
                match item {
                    MessageItem::DelegateInstall { delegation, rule, decls, .. } => {
                        virt += 4 + rule.len() as u64 / 8;
                        let id = RuleId::from_string(delegation.clone());
                        match self.admit_shipped(&msg.sender, &id, rule, decls) {
                            Ok(true) => {
                                installed += 1;
                                changed = true;
                            }
                            Ok(false) => {}
                            Err(w) => warnings.push(w),
                        }
                    }
                    MessageItem::DelegateRemove { delegation } => {
                        virt += 4;
                        let id = RuleId::from_string(delegation.clone());
                        if self.products.contains_key(&id) {
                            self.remove_products(&id);
                            self.delegated.values_mut().for_each(|s| {
                                s.remove(&id);
                            });
                            removed += 1;
                            changed = true;
                        }
                    }
                    _ => {}
                }
            }
        }
        for op in std::mem::take(&mut self.pending) {
            match op {
                PendingOp::Install { origin, id, rule } => {
                    virt += 8 + 2 * rule.body.len() as u64;
                    let parent = match &origin {
                        RuleOrigin::Instance(p) => Some(p.clone()),
                        _ => None,
                    };
                    match self.admit_rule(origin, id.clone(), rule, &mut virt) {
                        Ok(()) => {
                            if let Some(p) = parent {
                                self.record_instance(&p, &id);
                            }
                            installed += 1;
                            changed = true;
                        }
                        Err(w) => warnings.push(w),
                    }
                }
                PendingOp::Remove { id } => {
                    virt += 5;
                    self.remove_products(&id);
                    removed += 1;
                    changed = true;
                }
            }
        }
        steps.virt[1] = virt;
        steps.wall_micros[1] = t.elapsed().as_micros() as u64;

        // ---- Step 2a: frozen-input fixpoint ---------------------------
        let t = Instant::now();
        let run = self.engine.run_fixpoint();
        steps.virt[2] = 1 + run.firings + run.new_tuples;
        steps.wall_micros[2] = t.elapsed().as_micros() as u64;
        if run.new_tuples > 0 {
            changed = true;
        }

        // ---- Step 2b: name bindings for waiting rules -----------------
        let t = Instant::now();
        let mut virt = 0u64;
        let deferred: Vec<(RuleId, Rule)> =
            self.deferred.values().map(|d| (d.id.clone(), d.rule.clone())).collect();
        for (id, rule) in deferred {
            virt += 2;
            let prefix_len = evaluable_prefix_len(&rule, &self.name);
            let bindable = bindable_name_vars(&rule, prefix_len);
            let mut projected: BTreeSet<crate::ast::Bindings> = BTreeSet::new();
            if prefix_len > 0 && !bindable.is_empty() {
                for sol in self.engine.query_body(&rule.body[..prefix_len]) {
                    let mut p = crate::ast::Bindings::new();
                    for var in &bindable {
                        if let Some(v) = sol.get(var) {
                            p.insert(var.clone(), v.clone());
                        }
                    }
                    if p.len() == bindable.len() {
                        projected.insert(p);
                    }
                }
            }
            virt += projected.len() as u64;
            let instances = instantiate_deferred(&rule, &id, &projected);
            let current: BTreeSet<u64> = instances.iter().map(|i| i.hash).collect();
            let diff = self.ledger.update(&id, &current);
            virt += 8 * (diff.added.len() + diff.removed.len()) as u64;
            for hash in diff.added {
                let inst = instances.iter().find(|i| i.hash == hash).expect("hash from instances");
                self.pending.push(PendingOp::Install {
                    origin: RuleOrigin::Instance(id.clone()),
                    id: inst.id.clone(),
                    rule: inst.rule.clone(),
                });
                changed = true;
            }
            for gone in diff.removed {
                self.pending.push(PendingOp::Remove { id: gone });
                changed = true;
            }
        }
        steps.virt[3] = virt;
        steps.wall_micros[3] = t.elapsed().as_micros() as u64;

        // ---- Step 2c: channel diffs ------------------------------------
        let t = Instant::now();
        let mut virt = 0u64;
        // target peer → items, assembled across 2c and 3b, sent as one
        // message per target in 3a.
        let mut staged: BTreeMap<String, Vec<MessageItem>> = BTreeMap::new();
        let channel_keys: Vec<RelationKey> = self.channels.keys().cloned().collect();
        for key in channel_keys {
            let current = self.engine.buffer(&key).clone();
            let state = self.channels.get_mut(&key).expect("key from map");
            match state.mode {
                ChannelMode::Insert => {
                    let new: BTreeSet<Tuple> =
                        current.difference(&state.sent).cloned().collect();
                    if !new.is_empty() {
                        virt += new.len() as u64;
                        state.sent.extend(new.iter().cloned());
                        staged.entry(key.peer.clone()).or_default().push(
                            MessageItem::FactBatch { relation: key.clone(), facts: new },
                        );
                    }
                }
                ChannelMode::Delta => {
                    let adds: BTreeSet<Tuple> =
                        current.difference(&state.sent).cloned().collect();
                    let dels: BTreeSet<Tuple> =
                        state.sent.difference(&current).cloned().collect();
                    virt += (adds.len() + dels.len()) as u64;
                    if !adds.is_empty() {
                        staged.entry(key.peer.clone()).or_default().push(
                            MessageItem::FactBatch { relation: key.clone(), facts: adds },
                        );
                    }
                    if !dels.is_empty() {
                        staged.entry(key.peer.clone()).or_default().push(
                            MessageItem::Deletion { relation: key.clone(), facts: dels },
                        );
                    }
                    state.sent = current;
                }
                ChannelMode::Snapshot => {
                    if state.sent != current {
                        virt += current.len() as u64 + 1;
                        staged.entry(key.peer.clone()).or_default().push(
                            MessageItem::SnapshotUpdate {
                                relation: key.clone(),
                                facts: current.clone(),
                            },
                        );
                        state.sent = current;
                    }
                }
            }
        }
        for (target, item) in std::mem::take(&mut self.teardown) {
            virt += 1;
            staged.entry(target).or_default().push(item);
        }
        steps.virt[4] = virt;
        steps.wall_micros[4] = t.elapsed().as_micros() as u64;

        // ---- Step 3b (accrued before sending): rule shipping ----------
        let t3b = Instant::now();
        let mut virt3b = 0u64;
        for (target, item) in std::mem::take(&mut self.delegation_out) {
            if let MessageItem::DelegateInstall { rule, .. } = &item {
                virt3b += 12 + rule.len() as u64 / 4;
            } else {
                virt3b += 12;
            }
            staged.entry(target).or_default().push(item);
        }
        let wall3b = t3b.elapsed().as_micros() as u64;

        // ---- Step 3a: local store updates + message dispatch ----------
        let t = Instant::now();
        let mut virt = 0u64;
        let mut local_updates: Vec<(RelationKey, BTreeSet<Tuple>)> = Vec::new();
        for (key, buffer) in self.engine.buffers() {
            if key.peer != self.name {
                continue;
            }
            let new: BTreeSet<Tuple> =
                buffer.difference(self.engine.contents(key)).cloned().collect();
            if !new.is_empty() {
                local_updates.push((key.clone(), new));
            }
        }
        for (key, new) in local_updates {
            virt += new.len() as u64;
            let table = self.tables.entry(key.clone()).or_default();
            table.direct.extend(new.iter().cloned());
            self.engine.apply_base(&key, new, []);
            changed = true;
        }
        let mut msgs_out = 0u64;
        for (target, items) in staged {
            let seq = self.alloc_seq(&target);
            virt += 1 + items.len() as u64;
            self.outbox.push(Message { sender: self.name.clone(), target, seq, items });
            msgs_out += 1;
            changed = true;
        }
        steps.virt[5] = virt;
        steps.wall_micros[5] = t.elapsed().as_micros() as u64;
        steps.virt[6] = virt3b;
        steps.wall_micros[6] = wall3b;

        Ok(StageReport {
            stage: self.stage_counter,
            steps,
            msgs_out,
            rules_installed: installed,
            rules_removed: removed,
            changed,
            fixpoint: Some(run),
            warnings,
        })
    }

    /// Stage-input guard: facts may only land in stored relations with a
    /// consistent arity. Violations fail the whole stage.
    fn check_stage_relation(
        &mut self,
        key: &RelationKey,
        facts: &BTreeSet<Tuple>,
    ) -> Result<(), StageError> {
        let arity = match facts.iter().next() {
            Some(f) => f.len(),
            None => return Ok(()),
        };
        match self.schema.get(key) {
            Some(decl) if decl.kind == RelationKind::Intensional => {
                Err(StageError::NotStored(key.clone()))
            }
            Some(_) => {
                self.schema.check_arity(key, arity)?;
                Ok(())
            }
            None => {
                self.schema.declare(key, RelationKind::Extensional, arity)?;
                Ok(())
            }
        }
    }

    /// Installs a rule shipped by another peer. Returns Ok(false) if the
    /// identical rule is already active (idempotent re-delivery); errors
    /// are reported as warnings, not stage failures, so a bad shipment
    /// cannot wedge the receiving peer.
    fn admit_shipped(
        &mut self,
        sender: &str,
        id: &RuleId,
        text: &str,
        decls: &[(RelationKey, RelationDecl)],
    ) -> Result<bool, String> {
        if self.products.contains_key(id) {
            return Ok(false);
        }
        for (key, decl) in decls {
            self.schema
                .merge_remote(key, decl.kind, decl.arity)
                .map_err(|e| format!("shipped declarations from {sender} rejected: {e}"))?;
        }
        let rule = parse_rule(text)
            .map_err(|e| format!("shipped rule {id} from {sender} does not parse: {e}"))?;
        validate_rule(&rule, &self.schema)
            .map_err(|e| format!("shipped rule {id} from {sender} is unsafe: {e}"))?;
        let mut virt = 0u64;
        self.admit_rule(RuleOrigin::Delegated(sender.to_string()), id.clone(), rule, &mut virt)
            .map_err(|e| format!("shipped rule {id} from {sender} rejected: {e}"))?;
        self.delegated.entry(sender.to_string()).or_default().insert(id.clone());
        Ok(true)
    }

    /// Classifies and installs one rule, recording everything it produces
    /// under `id` so it can be unwound later. On error nothing sticks.
    fn admit_rule(
        &mut self,
        origin: RuleOrigin,
        id: RuleId,
        rule: Rule,
        virt: &mut u64,
    ) -> Result<(), String> {
        // Re-validate against the schema as it stands at activation; it
        // may have evolved since the rule was queued.
        validate_rule(&rule, &self.schema)
            .map_err(|e| format!("rule {id} fails validation: {e}"))?;
        let class = classify_rule(&rule, &self.name, &self.schema);
        let mut products = Products {
            text: parser::render_rule(&rule),
            class: Some(class),
            origin: Some(origin),
            ..Products::default()
        };
        let result = match class {
            RuleClass::Deduction => {
                let head = head_key(&rule);
                if self.schema.get(&head).is_none() {
                    let _ = self.schema.declare(&head, RelationKind::Intensional, rule.head.args.len());
                }
                self.add_engine_rule(&mut products, &id, &rule, HeadSink::Scratch)
            }
            RuleClass::Update => self.add_engine_rule(&mut products, &id, &rule, HeadSink::Buffer),
            RuleClass::Messaging => {
                let head = head_key(&rule);
                if self.schema.get(&head).is_none() {
                    let _ = self.schema.declare(&head, RelationKind::Extensional, rule.head.args.len());
                }
                self.register_channel(&mut products, &head, ChannelMode::Insert)?;
                self.add_engine_rule(&mut products, &id, &rule, HeadSink::Buffer)
            }
            RuleClass::ViewDelegation => {
                match rewrite_view_delegation(&rule, &id, &self.name, &self.schema) {
                    Ok(out) => self.install_rewrite(&mut products, out, virt),
                    Err(e) => Err(render_rewrite_error(e)),
                }
            }
            RuleClass::BodySplit => match split_nonlocal(&rule, &id, &self.name, &self.schema) {
                Ok(out) => self.install_rewrite(&mut products, out, virt),
                Err(e) => Err(render_rewrite_error(e)),
            },
            RuleClass::Deferred => {
                products.deferred = true;
                self.deferred.insert(id.clone(), DeferredRule { id: id.clone(), rule });
                Ok(())
            }
        };
        match result {
            Ok(()) => {
                self.products.insert(id, products);
                Ok(())
            }
            Err(e) => {
                // Unwind partial products (engine rules, channels).
                for rid in &products.engine_rules {
                    self.engine_rules.remove(rid);
                }
                let _ = self.engine.set_rules(self.engine_rules.values().cloned().collect());
                for key in &products.channels {
                    self.unregister_channel(key);
                }
                self.deferred.remove(&id);
                Err(e)
            }
        }
    }

    /// Installs the local pieces and queues the shipped pieces of a
    /// rewrite (body split or view delegation).
    fn install_rewrite(
        &mut self,
        products: &mut Products,
        out: crate::rewrite::RewriteOutput,
        virt: &mut u64,
    ) -> Result<(), String> {
        for (key, decl) in &out.new_relations {
            self.schema
                .merge_remote(key, decl.kind, decl.arity)
                .map_err(|e| format!("rewrite declarations conflict: {e}"))?;
        }
        for LocalRule { id, rule, channel } in &out.local_rules {
            match channel {
                Some(mode) => {
                    self.register_channel(products, &head_key(rule), *mode)?;
                    self.add_engine_rule(products, id, rule, HeadSink::Buffer)?;
                }
                None => {
                    let sink = match self.schema.get(&head_key(rule)).map(|d| d.kind) {
                        Some(RelationKind::Extensional) => HeadSink::Buffer,
                        _ => HeadSink::Scratch,
                    };
                    self.add_engine_rule(products, id, rule, sink)?;
                }
            }
        }
        for (target, delegations) in &out.delegations {
            for d in delegations {
                let install_id = d.id.install_id();
                let text = parser::render_rule(&d.rule);
                *virt += text.len() as u64 / 4;
                let mut decls = decls_for_rule(&d.rule, &self.schema);
                for (key, decl) in &out.new_relations {
                    if !decls.iter().any(|(k, _)| k == key) {
                        decls.push((key.clone(), *decl));
                    }
                }
                self.delegation_out.push((
                    target.clone(),
                    MessageItem::DelegateInstall {
                        delegation: install_id.as_str().to_string(),
                        origin: d.id.original_rule.clone(),
                        rule: text,
                        decls,
                    },
                ));
                products.delegations.push((target.clone(), install_id));
            }
        }
        Ok(())
    }

    fn add_engine_rule(
        &mut self,
        products: &mut Products,
        id: &RuleId,
        rule: &Rule,
        sink: HeadSink,
    ) -> Result<(), String> {
        let engine_rule = EngineRule {
            id: id.clone(),
            head: head_key(rule),
            head_args: rule.head.args.clone(),
            body: rule.body.clone(),
            sink,
        };
        self.engine_rules.insert(id.clone(), engine_rule);
        match self.engine.set_rules(self.engine_rules.values().cloned().collect()) {
            Ok(()) => {
                products.engine_rules.push(id.clone());
                Ok(())
            }
            Err(e @ NegationCycleError { .. }) => {
                self.engine_rules.remove(id);
                self.engine
                    .set_rules(self.engine_rules.values().cloned().collect())
                    .expect("previous rule set was valid");
                Err(e.to_string())
            }
        }
    }

    fn register_channel(
        &mut self,
        products: &mut Products,
        key: &RelationKey,
        mode: ChannelMode,
    ) -> Result<(), String> {
        match self.channels.get_mut(key) {
            Some(state) if state.mode != mode => {
                return Err(format!("channel {key} already open in a different mode"));
            }
            Some(state) => state.producers += 1,
            None => {
                self.channels
                    .insert(key.clone(), ChannelState { mode, producers: 1, sent: BTreeSet::new() });
            }
        }
        products.channels.push(key.clone());
        Ok(())
    }

    /// Drops one producer; the last one out retracts what the channel has
    /// put at the target.
    fn unregister_channel(&mut self, key: &RelationKey) {
        let Some(state) = self.channels.get_mut(key) else { return };
        state.producers -= 1;
        if state.producers > 0 {
            return;
        }
        let state = self.channels.remove(key).expect("present");
        match state.mode {
            ChannelMode::Insert => {}
            ChannelMode::Delta => {
                if !state.sent.is_empty() {
                    self.teardown.push((
                        key.peer.clone(),
                        MessageItem::Deletion { relation: key.clone(), facts: state.sent },
                    ));
                }
            }
            ChannelMode::Snapshot => {
                if !state.sent.is_empty() {
                    self.teardown.push((
                        key.peer.clone(),
                        MessageItem::SnapshotUpdate {
                            relation: key.clone(),
                            facts: BTreeSet::new(),
                        },
                    ));
                }
            }
        }
    }

    /// Unwinds everything `id` produced: child instantiations first, then
    /// engine rules, channels, and shipped rules (as removal messages).
    fn remove_products(&mut self, id: &RuleId) {
        let Some(products) = self.products.remove(id) else { return };
        for child in &products.instances {
            self.remove_products(child);
        }
        for inst in self.ledger.forget(id) {
            self.remove_products(&inst);
        }
        for rid in &products.engine_rules {
            self.engine_rules.remove(rid);
        }
        self.engine
            .set_rules(self.engine_rules.values().cloned().collect())
            .expect("removing rules cannot create cycles");
        for key in &products.channels {
            self.unregister_channel(key);
        }
        for (target, install_id) in &products.delegations {
            self.delegation_out.push((
                target.clone(),
                MessageItem::DelegateRemove { delegation: install_id.as_str().to_string() },
            ));
        }
        self.deferred.remove(id);
        self.local_texts.retain(|_, v| v != id);
    }
}

fn head_key(rule: &Rule) -> RelationKey {
    RelationKey::new(
        rule.head.relation.const_name().expect("ground head relation"),
        rule.head.peer.const_name().expect("ground head peer"),
    )
}

fn render_rewrite_error(e: RewriteError) -> String {
    e.to_string()
}

/// Links instantiation bookkeeping back to its parent: called by the
/// pending-install path so removals cascade.
impl Peer {
    fn record_instance(&mut self, parent: &RuleId, child: &RuleId) {
        if let Some(p) = self.products.get_mut(parent) {
            p.instances.push(child.clone());
        }
    }
}
