//! WebdamLog: a datalog dialect for autonomous peers that exchange facts and
//! rules over an asynchronous network.
//!
//! A system is a set of named peers. Each peer stores extensional facts in
//! persistent tables, derives intensional facts from rules, and advances in
//! discrete stages: collect inputs, run a semi-naive fixpoint over a frozen
//! snapshot, emit outputs (messages to other peers, updates to local tables,
//! delegated rules). Rules may mention other peers in body atoms or heads and
//! may use variables in relation- and peer-name positions; the rewriter turns
//! such rules into purely local rules plus deliveries and delegations.
//!
//! Module map:
//! - [`ast`], [`schema`], [`safety`]: terms, atoms, rules, facts, per-peer
//!   schema views, the safety check, and rule classification.
//! - [`parser`]: surface syntax (programs, rules, facts, declarations) and
//!   canonical rendering.
//! - [`rewrite`]: body splitting at the first non-local atom, view delegation
//!   through per-source auxiliary relations, and instantiation of rules with
//!   name variables.
//! - [`engine`]: dependency graph, stratification, delta caches, and the
//!   semi-naive fixpoint.
//! - [`peer`]: per-peer runtime state and the three-step stage loop.
//! - [`transport`]: length-prefixed wire codec and the deterministic
//!   in-process network simulator.
//! - [`sim`], [`daemon`]: multi-peer orchestration over the simulator and
//!   over TCP sockets.
//! - [`scenario`], [`metrics`], [`qsq`], [`cli`]: the operator surface.

pub mod ast;
pub mod cli;
pub mod daemon;
pub mod engine;
pub mod metrics;
pub mod parser;
pub mod peer;
pub mod qsq;
pub mod rewrite;
pub mod safety;
pub mod scenario;
pub mod schema;
pub mod sim;
pub mod transport;

pub use ast::{Atom, Bindings, Fact, Literal, Rule, RuleId, Term, Tuple, Value};
pub use schema::{RelationKey, RelationKind, Schema};
