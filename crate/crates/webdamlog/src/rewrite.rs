//! Rewritings that turn non-local rules into locally runnable pieces.
//!
//! Three transformations, keyed by [`RuleClass`]:
//!
//! * **Body split** — a body that reaches a literal at another peer is cut
//!   at the first such literal. The evaluable prefix stays here, feeding a
//!   `mid_*` relation at the target over a delta channel; the rest of the
//!   rule ships to the target with `mid_*` prepended. Re-classification at
//!   the target splits again if needed, so chains across several peers
//!   terminate (each hop shortens the body that remains).
//! * **View delegation** — a local body deriving into a remote derived
//!   relation materializes its contribution in a per-source `aux_*`
//!   relation at the target, refreshed by snapshot, with a copy rule
//!   shipped to the target. Per-source auxiliaries keep one source's
//!   deletions from cancelling facts another source still derives.
//! * **Deferred instantiation** — rules with relation/peer variables wait
//!   until the evaluable prefix produces bindings, then yield one
//!   substituted rule per distinct binding. Instantiated rules activate at
//!   the *next* stage and re-enter classification, so they may in turn
//!   split or delegate. A split whose shipped rule still has a remote
//!   derived-relation head composes with view delegation at the final
//!   target.
//!
//! Mid and aux relation names are deterministic in (rule id, peers, split
//! position), so re-delegating is idempotent.

// Rewrite errors carry the offending rule text and sit on install paths
// only, so the large Err variant is not worth boxing.
#![allow(clippy::result_large_err)]

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::ast::{Atom, Bindings, Literal, Rule, RuleId, Term, Value};
use crate::parser::render_value;
use crate::safety::{self, RuleClass};
use crate::schema::{RelationDecl, RelationKey, RelationKind, Schema};

/// How facts derived for a remote relation travel.
///
/// * `Insert`: send each newly derived fact once; never retract.
/// * `Delta`: keep the receiver's copy equal to the sender's current
///   derivation by sending additions and removals.
/// * `Snapshot`: replace the receiver's per-sender contribution wholesale
///   whenever it changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ChannelMode {
    Insert,
    Delta,
    Snapshot,
}

/// Identity of one shipped rule: which rule it came from, who cut it,
/// where it went, and where the body was cut (1-based index of the first
/// shipped literal; 0 marks a view-delegation copy rule).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct DelegationId {
    pub original_rule: RuleId,
    pub delegator: String,
    pub target: String,
    pub split_position: usize,
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

impl DelegationId {
    /// Relation name carrying prefix bindings to the target.
    pub fn mid_relation(&self) -> String {
        format!(
            "mid_{}_{}_{}_{}",
            sanitize(self.original_rule.as_str()),
            sanitize(&self.delegator),
            sanitize(&self.target),
            self.split_position
        )
    }

    /// Rule id under which the shipped rule is installed at the target.
    /// Equal delegations give equal ids, so removal needs no bookkeeping
    /// beyond reconstructing the id.
    pub fn install_id(&self) -> RuleId {
        RuleId::from_string(format!(
            "{}::{}->{}::{}",
            self.original_rule.as_str(),
            self.delegator,
            self.target,
            self.split_position
        ))
    }
}

/// Name of the per-source materialization of a delegated view.
pub fn aux_relation_name(head_relation: &str, source_peer: &str) -> String {
    format!("aux_{}_{}", head_relation, sanitize(source_peer))
}

/// A rule to run at the rewriting peer, with the channel its remote head
/// writes through (None for rules whose head is local).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalRule {
    pub id: RuleId,
    pub rule: Rule,
    pub channel: Option<ChannelMode>,
}

/// A rule to install at another peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delegation {
    pub id: DelegationId,
    pub rule: Rule,
}

/// Everything one rewriting produces.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RewriteOutput {
    pub local_rules: Vec<LocalRule>,
    pub delegations: BTreeMap<String, Vec<Delegation>>,
    pub new_relations: Vec<(RelationKey, RelationDecl)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("rule {id} is not splittable at {at_peer}")]
    NotSplittable { id: RuleId, at_peer: String },
    #[error("cannot delegate past variable peer in {atom}; bind it first")]
    UngroundPeer { atom: String },
    #[error("rule {id} is not a view delegation at {at_peer}")]
    NotViewDelegation { id: RuleId, at_peer: String },
    #[error("rewriting {id} produced an invalid rule `{rule}`: {source}")]
    UnsafePiece {
        id: RuleId,
        rule: String,
        source: safety::SafetyError,
    },
}

fn check_piece(id: &RuleId, rule: &Rule, schema: &Schema) -> Result<(), RewriteError> {
    safety::validate_rule(rule, schema).map_err(|source| RewriteError::UnsafePiece {
        id: id.clone(),
        rule: crate::parser::render_rule(rule),
        source,
    })
}

/// Splits a rule whose body leaves `at_peer`, keeping the evaluable prefix
/// here and shipping the remainder to the first remote literal's peer.
///
/// The mid relation carries exactly the prefix variables that the
/// remainder or the head still needs, in first-occurrence order. An empty
/// prefix ships the whole rule with no mid relation.
pub fn split_nonlocal(
    rule: &Rule,
    id: &RuleId,
    at_peer: &str,
    schema: &Schema,
) -> Result<RewriteOutput, RewriteError> {
    if safety::classify_rule(rule, at_peer, schema) != RuleClass::BodySplit {
        return Err(RewriteError::NotSplittable { id: id.clone(), at_peer: at_peer.to_string() });
    }
    let prefix_len = safety::evaluable_prefix_len(rule, at_peer);
    let pivot = &rule.body[prefix_len].atom;
    let target = match pivot.peer.const_name() {
        Some(p) => p.to_string(),
        None => {
            return Err(RewriteError::UngroundPeer { atom: crate::parser::render_atom(pivot) })
        }
    };
    let delegation_id = DelegationId {
        original_rule: id.clone(),
        delegator: at_peer.to_string(),
        target: target.clone(),
        split_position: prefix_len + 1,
    };

    let mut out = RewriteOutput::default();
    if prefix_len == 0 {
        out.delegations
            .insert(target, vec![Delegation { id: delegation_id, rule: rule.clone() }]);
        return Ok(out);
    }

    // Variables the remainder or the head still needs, in first-occurrence
    // order over the prefix's positive literals.
    let mut needed: BTreeSet<&str> = rule.head.all_vars().collect();
    for lit in &rule.body[prefix_len..] {
        needed.extend(lit.atom.all_vars());
    }
    let mut x_mid: Vec<String> = Vec::new();
    for lit in rule.body.iter().take(prefix_len).filter(|l| l.positive) {
        for v in lit.atom.arg_vars() {
            if needed.contains(v) && !x_mid.iter().any(|m| m == v) {
                x_mid.push(v.to_string());
            }
        }
    }

    let mid_key = RelationKey::new(&delegation_id.mid_relation(), &target);
    let mid_args: Vec<Term> = x_mid.iter().map(|v| Term::Var(v.clone())).collect();
    let mid_head = Atom::ground_names(&mid_key.relation, &mid_key.peer, mid_args.clone());

    let keep = Rule::new(mid_head.clone(), rule.body[..prefix_len].to_vec());
    let keep_id = RuleId::from_string(format!("{}::keep", delegation_id.install_id().as_str()));
    check_piece(id, &keep, schema)?;

    let mut shipped_body = Vec::with_capacity(rule.body.len() - prefix_len + 1);
    shipped_body.push(Literal::pos(mid_head));
    shipped_body.extend_from_slice(&rule.body[prefix_len..]);
    let shipped = Rule::new(rule.head.clone(), shipped_body);
    check_piece(id, &shipped, schema)?;

    out.local_rules.push(LocalRule { id: keep_id, rule: keep, channel: Some(ChannelMode::Delta) });
    out.new_relations.push((
        mid_key,
        RelationDecl { kind: RelationKind::Extensional, arity: x_mid.len() },
    ));
    out.delegations
        .insert(target, vec![Delegation { id: delegation_id, rule: shipped }]);
    Ok(out)
}

/// Rewrites a local-body rule deriving into a remote derived relation:
/// materialize this peer's contribution at the target and ship a copy rule.
pub fn rewrite_view_delegation(
    rule: &Rule,
    id: &RuleId,
    at_peer: &str,
    schema: &Schema,
) -> Result<RewriteOutput, RewriteError> {
    if safety::classify_rule(rule, at_peer, schema) != RuleClass::ViewDelegation {
        return Err(RewriteError::NotViewDelegation {
            id: id.clone(),
            at_peer: at_peer.to_string(),
        });
    }
    let head_rel = rule.head.relation.const_name().expect("classified rule has ground head");
    let target = rule.head.peer.const_name().expect("classified rule has ground head");
    let aux_key = RelationKey::new(&aux_relation_name(head_rel, at_peer), target);

    let aux_head = Atom::ground_names(&aux_key.relation, &aux_key.peer, rule.head.args.clone());
    let producer = Rule::new(aux_head.clone(), rule.body.clone());
    check_piece(id, &producer, schema)?;
    let copy = Rule::new(rule.head.clone(), vec![Literal::pos(aux_head)]);

    let delegation_id = DelegationId {
        original_rule: id.clone(),
        delegator: at_peer.to_string(),
        target: target.to_string(),
        split_position: 0,
    };
    let mut out = RewriteOutput::default();
    out.local_rules.push(LocalRule {
        id: RuleId::from_string(format!("{}::aux", id.as_str())),
        rule: producer,
        channel: Some(ChannelMode::Snapshot),
    });
    out.new_relations.push((
        aux_key,
        RelationDecl { kind: RelationKind::Extensional, arity: rule.head.args.len() },
    ));
    out.delegations
        .insert(target.to_string(), vec![Delegation { id: delegation_id, rule: copy }]);
    Ok(out)
}

/// Declarations worth shipping alongside a delegated rule: every relation
/// the rule mentions by ground name that this peer's schema knows.
pub fn decls_for_rule(rule: &Rule, schema: &Schema) -> Vec<(RelationKey, RelationDecl)> {
    let mut out = BTreeMap::new();
    for atom in std::iter::once(&rule.head).chain(rule.body.iter().map(|l| &l.atom)) {
        if let (Some(r), Some(p)) = (atom.relation.const_name(), atom.peer.const_name()) {
            let key = RelationKey::new(r, p);
            if let Some(decl) = schema.get(&key) {
                out.insert(key, decl);
            }
        }
    }
    out.into_iter().collect()
}

// ---- deferred rules ----

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x1_0000_0000_01b3;

fn fnv1a(hash: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *hash ^= b as u64;
        *hash = hash.wrapping_mul(FNV_PRIME);
    }
}

/// Order-independent fingerprint of a binding (the map iterates sorted).
pub fn binding_hash(binding: &Bindings) -> u64 {
    let mut h = FNV_OFFSET;
    for (var, value) in binding {
        fnv1a(&mut h, var.as_bytes());
        fnv1a(&mut h, &[0]);
        fnv1a(&mut h, render_value(value).as_bytes());
        fnv1a(&mut h, &[0]);
    }
    h
}

fn is_plain_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn is_peer_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == ':')
        && !s.contains(":-")
}

/// A binding can only name relations/peers with values that are legal
/// names in those positions; anything else cannot fire.
fn binding_names_ok(rule: &Rule, binding: &Bindings) -> bool {
    let atoms = std::iter::once(&rule.head).chain(rule.body.iter().map(|l| &l.atom));
    for atom in atoms {
        if let Term::Var(v) = &atom.relation {
            match binding.get(v) {
                None => {}
                Some(Value::Str(s)) if is_plain_ident(s) => {}
                Some(_) => return false,
            }
        }
        if let Term::Var(v) = &atom.peer {
            match binding.get(v) {
                None => {}
                Some(Value::Str(s)) if is_peer_ident(s) => {}
                Some(_) => return false,
            }
        }
    }
    true
}

/// One rule produced by instantiating a deferred rule under a binding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstantiatedRule {
    pub hash: u64,
    pub id: RuleId,
    pub rule: Rule,
}

/// Substitutes each binding into the rule, skipping bindings whose values
/// cannot legally name a relation or peer. Equal bindings always produce
/// the same rule id, independent of when or where they were seen.
pub fn instantiate_deferred(
    rule: &Rule,
    id: &RuleId,
    bindings: &BTreeSet<Bindings>,
) -> Vec<InstantiatedRule> {
    let mut out = Vec::new();
    for binding in bindings {
        if !binding_names_ok(rule, binding) {
            continue;
        }
        let hash = binding_hash(binding);
        out.push(InstantiatedRule {
            hash,
            id: id.instance(hash),
            rule: rule.substitute(binding),
        });
    }
    out
}

/// Tracks which instantiations of each deferred rule are live, so a stage
/// can install the new ones and retract the ones whose binding vanished.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstantiationLedger {
    entries: BTreeMap<RuleId, BTreeMap<u64, RuleId>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstantiationDiff {
    pub added: Vec<u64>,
    pub removed: Vec<RuleId>,
}

impl InstantiationLedger {
    /// Replaces the live set for `origin` with `current`, reporting what
    /// appeared and which installed rule ids lost their binding.
    pub fn update(&mut self, origin: &RuleId, current: &BTreeSet<u64>) -> InstantiationDiff {
        let entry = self.entries.entry(origin.clone()).or_default();
        let added = current.iter().filter(|h| !entry.contains_key(h)).copied().collect();
        let removed = entry
            .iter()
            .filter(|(h, _)| !current.contains(h))
            .map(|(_, id)| id.clone())
            .collect();
        *entry = current.iter().map(|&h| (h, origin.instance(h))).collect();
        InstantiationDiff { added, removed }
    }

    /// Drops `origin` entirely (its rule was removed), returning every
    /// instantiated rule id to retract.
    pub fn forget(&mut self, origin: &RuleId) -> Vec<RuleId> {
        self.entries
            .remove(origin)
            .map(|m| m.into_values().collect())
            .unwrap_or_default()
    }

    pub fn instances(&self, origin: &RuleId) -> Vec<RuleId> {
        self.entries
            .get(origin)
            .map(|m| m.values().cloned().collect())
            .unwrap_or_default()
    }
}
