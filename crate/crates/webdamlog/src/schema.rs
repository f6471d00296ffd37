//! Per-peer schema views: which relations exist, where they live, whether
//! they are stored or derived, and their arities.
//!
//! Every peer keeps its own view. Views grow by explicit declarations
//! (`ext`/`int` statements), by declarations carried on delegation messages,
//! and by auto-declaration at first use. A relation is never both stored and
//! derived: the kind is fixed by whichever declaration arrives first, and
//! conflicting later declarations are errors (remote declarations lose
//! silently instead, since the local view is authoritative locally).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

/// A located relation: `relation@peer`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationKey {
    pub relation: String,
    pub peer: String,
}

impl RelationKey {
    pub fn new(relation: &str, peer: &str) -> Self {
        RelationKey { relation: relation.to_string(), peer: peer.to_string() }
    }
}

impl fmt::Display for RelationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.relation, self.peer)
    }
}

/// Extensional relations are stored tables; intensional relations are
/// derived scratch results, recomputed each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationKind {
    Extensional,
    Intensional,
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RelationKind::Extensional => f.write_str("ext"),
            RelationKind::Intensional => f.write_str("int"),
        }
    }
}

/// Kind and arity of one declared relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationDecl {
    pub kind: RelationKind,
    pub arity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("relation {key} is {have} but was redeclared {got}")]
    KindConflict { key: RelationKey, have: RelationKind, got: RelationKind },
    #[error("relation {key} has arity {have} but was used with arity {got}")]
    ArityConflict { key: RelationKey, have: usize, got: usize },
}

/// One peer's view of the system: known peer names plus relation
/// declarations. Extensional and intensional sets are disjoint by
/// construction (one entry per key).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Schema {
    peers: BTreeSet<String>,
    rels: BTreeMap<RelationKey, RelationDecl>,
}

impl Schema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_peer(&mut self, name: &str) {
        self.peers.insert(name.to_string());
    }

    pub fn peers(&self) -> impl Iterator<Item = &str> {
        self.peers.iter().map(|s| s.as_str())
    }

    pub fn get(&self, key: &RelationKey) -> Option<RelationDecl> {
        self.rels.get(key).copied()
    }

    /// Declares `key`, or checks consistency with an existing declaration.
    pub fn declare(
        &mut self,
        key: &RelationKey,
        kind: RelationKind,
        arity: usize,
    ) -> Result<(), SchemaError> {
        self.peers.insert(key.peer.clone());
        match self.rels.get(key) {
            None => {
                self.rels.insert(key.clone(), RelationDecl { kind, arity });
                Ok(())
            }
            Some(have) if have.kind != kind => {
                Err(SchemaError::KindConflict { key: key.clone(), have: have.kind, got: kind })
            }
            Some(have) if have.arity != arity => {
                Err(SchemaError::ArityConflict { key: key.clone(), have: have.arity, got: arity })
            }
            Some(_) => Ok(()),
        }
    }

    /// Merges a declaration learned from another peer: first writer wins,
    /// kind conflicts are ignored (the local view is authoritative), arity
    /// conflicts are still errors.
    pub fn merge_remote(
        &mut self,
        key: &RelationKey,
        kind: RelationKind,
        arity: usize,
    ) -> Result<(), SchemaError> {
        match self.rels.get(key) {
            None => self.declare(key, kind, arity),
            Some(have) if have.arity != arity => {
                Err(SchemaError::ArityConflict { key: key.clone(), have: have.arity, got: arity })
            }
            Some(_) => Ok(()),
        }
    }

    /// Checks an already-declared arity without declaring.
    pub fn check_arity(&self, key: &RelationKey, arity: usize) -> Result<(), SchemaError> {
        match self.rels.get(key) {
            Some(have) if have.arity != arity => {
                Err(SchemaError::ArityConflict { key: key.clone(), have: have.arity, got: arity })
            }
            _ => Ok(()),
        }
    }

    pub fn extensional(&self) -> impl Iterator<Item = (&RelationKey, usize)> {
        self.rels
            .iter()
            .filter(|(_, d)| d.kind == RelationKind::Extensional)
            .map(|(k, d)| (k, d.arity))
    }

    pub fn intensional(&self) -> impl Iterator<Item = (&RelationKey, usize)> {
        self.rels
            .iter()
            .filter(|(_, d)| d.kind == RelationKind::Intensional)
            .map(|(k, d)| (k, d.arity))
    }

    pub fn declarations(&self) -> impl Iterator<Item = (&RelationKey, RelationDecl)> {
        self.rels.iter().map(|(k, d)| (k, *d))
    }
}
