//! Rule safety and classification.
//!
//! Safety is checked reading the body left to right: a variable becomes
//! bound when it appears in an argument position of a positive literal, and
//! every relation- or peer-name variable must already be bound when its
//! literal is reached. Head name variables and head argument variables must
//! be bound somewhere in the positive body, and a negative literal may only
//! use variables that some positive literal binds.
//!
//! Classification asks how a rule can run at a given peer. The body is
//! scanned for the first literal that is not locally evaluable (ground
//! relation name, ground peer name equal to the evaluating peer):
//!
//! - no such literal and a ground head: pure local deduction
//!   ([`RuleClass::Deduction`]) into a derived relation, a local store update
//!   ([`RuleClass::Update`]) into a stored relation, a remote insert
//!   ([`RuleClass::Messaging`]) into another peer's stored relation, or a
//!   remotely owned derived view ([`RuleClass::ViewDelegation`]);
//! - no such literal but variables in head name positions: the rule defers
//!   until body evaluation supplies name bindings ([`RuleClass::Deferred`]);
//! - first non-evaluable literal has a ground remote peer: the body splits
//!   there and the remainder is delegated ([`RuleClass::BodySplit`]), even if
//!   later literals still contain name variables (the delegation target
//!   resolves those);
//! - first non-evaluable literal has a variable relation or peer name: the
//!   rule defers until the evaluable prefix supplies bindings
//!   ([`RuleClass::Deferred`]).

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::ast::{Atom, Rule};
use crate::parser;
use crate::schema::{RelationKey, RelationKind, Schema};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SafetyError {
    #[error("rule body is empty")]
    EmptyBody,
    #[error("head variable ${var} is not bound by any positive body literal")]
    UnboundHeadVar { var: String },
    #[error("variable ${var} appears only under negation")]
    UnsafeNegation { var: String },
    #[error("peer variable ${var} in {atom} is not bound by an earlier positive literal")]
    UnboundPeerVar { var: String, atom: String },
    #[error("relation variable ${var} in {atom} is not bound by an earlier positive literal")]
    UnboundRelationVar { var: String, atom: String },
    #[error("atom {atom} has arity {got} but {key} is declared with arity {expected}")]
    ArityMismatch { atom: String, key: RelationKey, expected: usize, got: usize },
}

/// How a rule runs at one peer. See the module docs for the decision
/// procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RuleClass {
    /// Local body, local derived head: plain deduction each stage.
    Deduction,
    /// Local body, local stored head: derivations persist into the table.
    Update,
    /// Local body, remote stored head: derivations are sent as facts.
    Messaging,
    /// Local body, remote derived head: derivations feed a per-source
    /// auxiliary relation and a copy rule is delegated to the owner.
    ViewDelegation,
    /// Body reaches a ground remote peer: split there and delegate the rest.
    BodySplit,
    /// Name variables must be bound from the evaluable prefix before the
    /// rule can take one of the other shapes; it waits, and each binding
    /// installs one instantiated rule at the next stage.
    Deferred,
}

impl fmt::Display for RuleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RuleClass::Deduction => "deduction",
            RuleClass::Update => "update",
            RuleClass::Messaging => "messaging",
            RuleClass::ViewDelegation => "view-delegation",
            RuleClass::BodySplit => "body-split",
            RuleClass::Deferred => "deferred",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error("head relation {key} is not declared and auto-declaration is disabled")]
    UnknownRelation { key: RelationKey },
}

/// Whether classification may assume kinds for undeclared head relations
/// (derived for local heads, stored for remote heads).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AutoDeclare {
    Enabled,
    Disabled,
}

fn atom_text(atom: &Atom) -> String {
    parser::render_atom(atom)
}

/// Checks the safety condition. Pure; reports the first violation found in
/// scan order (name bindings, then negation, then head, then arities).
pub fn validate_rule(rule: &Rule, schema: &Schema) -> Result<(), SafetyError> {
    if rule.body.is_empty() {
        return Err(SafetyError::EmptyBody);
    }

    // Left-to-right scan: name variables must be bound strictly earlier.
    let mut bound: BTreeSet<&str> = BTreeSet::new();
    for lit in &rule.body {
        if let Some(v) = lit.atom.relation.var_name() {
            if !bound.contains(v) {
                return Err(SafetyError::UnboundRelationVar {
                    var: v.to_string(),
                    atom: atom_text(&lit.atom),
                });
            }
        }
        if let Some(v) = lit.atom.peer.var_name() {
            if !bound.contains(v) {
                return Err(SafetyError::UnboundPeerVar {
                    var: v.to_string(),
                    atom: atom_text(&lit.atom),
                });
            }
        }
        if lit.positive {
            bound.extend(lit.atom.arg_vars());
        }
    }

    // `bound` now holds every positively bound variable.
    for lit in rule.body.iter().filter(|l| !l.positive) {
        for v in lit.atom.arg_vars() {
            if !bound.contains(v) {
                return Err(SafetyError::UnsafeNegation { var: v.to_string() });
            }
        }
    }

    for v in rule.head.all_vars() {
        if !bound.contains(v) {
            return Err(SafetyError::UnboundHeadVar { var: v.to_string() });
        }
    }

    // Declared arities must match wherever both names are ground.
    for atom in std::iter::once(&rule.head).chain(rule.body.iter().map(|l| &l.atom)) {
        if let (Some(r), Some(p)) = (atom.relation.const_name(), atom.peer.const_name()) {
            let key = RelationKey::new(r, p);
            if let Some(decl) = schema.get(&key) {
                if decl.arity != atom.args.len() {
                    return Err(SafetyError::ArityMismatch {
                        atom: atom_text(atom),
                        key,
                        expected: decl.arity,
                        got: atom.args.len(),
                    });
                }
            }
        }
    }

    Ok(())
}

/// Length of the maximal body prefix that `at_peer` can evaluate directly:
/// literals whose relation name is ground and whose peer is `at_peer`.
pub fn evaluable_prefix_len(rule: &Rule, at_peer: &str) -> usize {
    rule.body
        .iter()
        .take_while(|lit| {
            !lit.atom.relation.is_var() && lit.atom.peer.const_name() == Some(at_peer)
        })
        .count()
}

/// Name variables of the rule that the evaluable prefix can bind: those
/// occurring as arguments of the prefix's positive literals.
pub fn bindable_name_vars(rule: &Rule, prefix_len: usize) -> BTreeSet<String> {
    let name_vars = rule.name_vars();
    let mut bindable = BTreeSet::new();
    for lit in rule.body.iter().take(prefix_len).filter(|l| l.positive) {
        for v in lit.atom.arg_vars() {
            if name_vars.contains(v) {
                bindable.insert(v.to_string());
            }
        }
    }
    bindable
}

/// Classifies a validated rule for execution at `at_peer`.
pub fn classify_rule(rule: &Rule, at_peer: &str, schema: &Schema) -> RuleClass {
    classify_rule_with(rule, at_peer, schema, AutoDeclare::Enabled)
        .expect("classification with auto-declaration cannot fail")
}

/// Classification that reports undeclared head relations instead of
/// assuming kinds for them.
pub fn classify_rule_with(
    rule: &Rule,
    at_peer: &str,
    schema: &Schema,
    auto: AutoDeclare,
) -> Result<RuleClass, ClassifyError> {
    let prefix = evaluable_prefix_len(rule, at_peer);
    if prefix < rule.body.len() {
        let pivot = &rule.body[prefix].atom;
        return Ok(match pivot.peer.const_name() {
            // Ground relation at a ground remote peer: split there,
            // whatever follows.
            Some(peer) if !pivot.relation.is_var() && peer != at_peer => RuleClass::BodySplit,
            // A variable relation or peer name needs bindings first.
            _ => RuleClass::Deferred,
        });
    }

    if !rule.head.has_ground_names() {
        return Ok(RuleClass::Deferred);
    }

    let head_rel = rule.head.relation.const_name().expect("ground head");
    let head_peer = rule.head.peer.const_name().expect("ground head");
    let key = RelationKey::new(head_rel, head_peer);
    let declared = schema.get(&key).map(|d| d.kind);
    let kind = match (declared, auto) {
        (Some(k), _) => k,
        (None, AutoDeclare::Disabled) => return Err(ClassifyError::UnknownRelation { key }),
        // Undeclared heads: a local head defines a derived relation; a
        // remote head defaults to plain fact delivery.
        (None, AutoDeclare::Enabled) if head_peer == at_peer => RelationKind::Intensional,
        (None, AutoDeclare::Enabled) => RelationKind::Extensional,
    };

    Ok(if head_peer == at_peer {
        match kind {
            RelationKind::Intensional => RuleClass::Deduction,
            RelationKind::Extensional => RuleClass::Update,
        }
    } else {
        match kind {
            RelationKind::Extensional => RuleClass::Messaging,
            RelationKind::Intensional => RuleClass::ViewDelegation,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{Literal, Term, Value};

    fn var(name: &str) -> Term {
        Term::Var(name.to_string())
    }

    fn parse(rule: &str) -> Rule {
        parser::parse_rule(rule).unwrap()
    }

    #[test]
    fn accepts_left_to_right_name_binding() {
        let s = Schema::new();
        let r = parse("$m@$p($n, \"hi\") :- today@mi($d), birthday@mi($n, $m, $p, $d)");
        validate_rule(&r, &s).unwrap();
    }

    #[test]
    fn rejects_variable_only_under_negation() {
        let s = Schema::new();
        let r = parse("r@p($X) :- not s@p($X)");
        assert_eq!(
            validate_rule(&r, &s).unwrap_err(),
            SafetyError::UnsafeNegation { var: "X".to_string() }
        );
    }

    #[test]
    fn rejects_unbound_head_argument() {
        let s = Schema::new();
        let r = parse("r@p($X, $Y) :- s@p($X)");
        assert_eq!(
            validate_rule(&r, &s).unwrap_err(),
            SafetyError::UnboundHeadVar { var: "Y".to_string() }
        );
    }

    #[test]
    fn rejects_peer_variable_bound_only_later() {
        let s = Schema::new();
        // $P is used as a peer name before any positive literal binds it.
        let r = parse("r@p($X) :- s@$P($X), t@p($P)");
        assert!(matches!(
            validate_rule(&r, &s).unwrap_err(),
            SafetyError::UnboundPeerVar { var, .. } if var == "P"
        ));
    }

    #[test]
    fn rejects_relation_variable_never_bound() {
        let s = Schema::new();
        let r = parse("r@p($X) :- $R@p($X)");
        assert!(matches!(
            validate_rule(&r, &s).unwrap_err(),
            SafetyError::UnboundRelationVar { var, .. } if var == "R"
        ));
    }

    #[test]
    fn negative_literal_name_vars_need_earlier_binding() {
        let s = Schema::new();
        let r = parse("r@p($X) :- a@p($X, $Q), not b@$Q($X)");
        validate_rule(&r, &s).unwrap();
        let bad = parse("r@p($X) :- not b@$Q($X), a@p($X, $Q)");
        assert!(matches!(
            validate_rule(&bad, &s).unwrap_err(),
            SafetyError::UnboundPeerVar { var, .. } if var == "Q"
        ));
    }

    #[test]
    fn checks_declared_arities_on_ground_atoms() {
        let mut s = Schema::new();
        s.declare(&RelationKey::new("r", "p"), RelationKind::Extensional, 2).unwrap();
        let r = parse("h@p($X) :- r@p($X)");
        assert!(matches!(
            validate_rule(&r, &s).unwrap_err(),
            SafetyError::ArityMismatch { expected: 2, got: 1, .. }
        ));
    }

    #[test]
    fn classifies_local_deduction_and_update() {
        let mut s = Schema::new();
        s.declare(&RelationKey::new("t", "p"), RelationKind::Extensional, 1).unwrap();
        let deduce = parse("v@p($X) :- r@p($X)");
        assert_eq!(classify_rule(&deduce, "p", &s), RuleClass::Deduction);
        let update = parse("t@p($X) :- r@p($X)");
        assert_eq!(classify_rule(&update, "p", &s), RuleClass::Update);
        // The persistence idiom is an update rule.
        let persist = parse("t@p($U) :- t@p($U)");
        assert_eq!(classify_rule(&persist, "p", &s), RuleClass::Update);
    }

    #[test]
    fn classifies_remote_heads_by_kind() {
        let mut s = Schema::new();
        s.declare(&RelationKey::new("inbox", "q"), RelationKind::Extensional, 1).unwrap();
        s.declare(&RelationKey::new("view", "q"), RelationKind::Intensional, 1).unwrap();
        let msg = parse("inbox@q($X) :- r@p($X)");
        assert_eq!(classify_rule(&msg, "p", &s), RuleClass::Messaging);
        let view = parse("view@q($X) :- r@p($X)");
        assert_eq!(classify_rule(&view, "p", &s), RuleClass::ViewDelegation);
        // Unknown remote head defaults to fact delivery.
        let unknown = parse("fresh@q($X) :- r@p($X)");
        assert_eq!(classify_rule(&unknown, "p", &s), RuleClass::Messaging);
        assert_eq!(
            classify_rule_with(&unknown, "p", &s, AutoDeclare::Disabled).unwrap_err(),
            ClassifyError::UnknownRelation { key: RelationKey::new("fresh", "q") }
        );
    }

    #[test]
    fn classifies_split_before_deferral_when_pivot_is_remote() {
        let s = Schema::new();
        // After the remote pivot there is still a peer variable; the split
        // target deals with it.
        let r = parse(
            "album@sue($p, \"dan\") :- allFriends@sue(\"dan\"), photoLocation@dan($peer), photos@$peer($p)",
        );
        assert_eq!(classify_rule(&r, "sue", &s), RuleClass::BodySplit);
    }

    #[test]
    fn classifies_deferred_on_variable_pivot() {
        let s = Schema::new();
        let r = parse("union@sue($X) :- peers@sue($Y, $Z), $Y@$Z($X)");
        assert_eq!(classify_rule(&r, "sue", &s), RuleClass::Deferred);
        assert_eq!(evaluable_prefix_len(&r, "sue"), 1);
        let binds = bindable_name_vars(&r, 1);
        assert_eq!(
            binds.into_iter().collect::<Vec<_>>(),
            vec!["Y".to_string(), "Z".to_string()]
        );
    }

    #[test]
    fn classifies_deferred_on_head_name_vars_with_local_body() {
        let s = Schema::new();
        let r = parse("$m@$p($n) :- birthday@mi($n, $m, $p)");
        assert_eq!(classify_rule(&r, "mi", &s), RuleClass::Deferred);
        assert_eq!(evaluable_prefix_len(&r, "mi"), 1);
    }

    #[test]
    fn local_relation_variable_defers_rather_than_splits() {
        let s = Schema::new();
        let r = Rule::new(
            Atom::ground_names("out", "p", vec![var("V")]),
            vec![
                Literal::pos(Atom::ground_names("names", "p", vec![var("N")])),
                Literal::pos(Atom::new(var("N"), Term::Const(Value::Str("p".into())), vec![var("V")])),
            ],
        );
        assert_eq!(classify_rule(&r, "p", &s), RuleClass::Deferred);
    }
}
