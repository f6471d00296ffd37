//! Core syntax: values, terms, atoms, literals, rules, and facts.
//!
//! Relation and peer names are first-class data: an atom's relation and peer
//! positions hold [`Term`]s, so a rule may write `$r@$p($x)` and bind `$r`
//! and `$p` from ordinary tuples. Ground name positions always hold string
//! values that are valid identifiers; the parser and the instantiation path
//! both enforce this.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// A constant: 64-bit integer or UTF-8 string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Int(i64),
    Str(String),
}

impl Value {
    /// String contents if this is a string value.
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s.as_str()),
            Value::Int(_) => None,
        }
    }
}

/// A stored tuple: ordered constants.
pub type Tuple = Vec<Value>;

/// A substitution from variable names (without the `$` sigil) to constants.
pub type Bindings = BTreeMap<String, Value>;

/// A term: constant or variable. Variables are written `$name` in surface
/// syntax; the stored name excludes the sigil.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Const(Value),
    Var(String),
}

impl Term {
    pub fn is_var(&self) -> bool {
        matches!(self, Term::Var(_))
    }

    /// Variable name if this is a variable.
    pub fn var_name(&self) -> Option<&str> {
        match self {
            Term::Var(v) => Some(v.as_str()),
            Term::Const(_) => None,
        }
    }

    /// Constant name if this is a ground name position (string constant).
    pub fn const_name(&self) -> Option<&str> {
        match self {
            Term::Const(Value::Str(s)) => Some(s.as_str()),
            _ => None,
        }
    }

    fn substitute(&self, bindings: &Bindings) -> Term {
        match self {
            Term::Var(v) => match bindings.get(v) {
                Some(val) => Term::Const(val.clone()),
                None => self.clone(),
            },
            Term::Const(_) => self.clone(),
        }
    }
}

/// `relation@peer(args...)`. Relation and peer positions are terms so that
/// name variables can appear there.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Atom {
    pub relation: Term,
    pub peer: Term,
    pub args: Vec<Term>,
}

impl Atom {
    pub fn new(relation: Term, peer: Term, args: Vec<Term>) -> Self {
        Atom { relation, peer, args }
    }

    /// Atom with ground string names and the given argument terms.
    pub fn ground_names(relation: &str, peer: &str, args: Vec<Term>) -> Self {
        Atom {
            relation: Term::Const(Value::Str(relation.to_string())),
            peer: Term::Const(Value::Str(peer.to_string())),
            args,
        }
    }

    /// True when both name positions are constants.
    pub fn has_ground_names(&self) -> bool {
        !self.relation.is_var() && !self.peer.is_var()
    }

    /// Variables appearing in argument positions, in order of occurrence.
    pub fn arg_vars(&self) -> impl Iterator<Item = &str> {
        self.args.iter().filter_map(|t| t.var_name())
    }

    /// Variables appearing anywhere (names and arguments), in order.
    pub fn all_vars(&self) -> impl Iterator<Item = &str> {
        [&self.relation, &self.peer]
            .into_iter()
            .chain(self.args.iter())
            .filter_map(|t| t.var_name())
    }

    pub fn substitute(&self, bindings: &Bindings) -> Atom {
        Atom {
            relation: self.relation.substitute(bindings),
            peer: self.peer.substitute(bindings),
            args: self.args.iter().map(|t| t.substitute(bindings)).collect(),
        }
    }
}

/// A body literal: an atom, possibly negated.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Literal {
    pub positive: bool,
    pub atom: Atom,
}

impl Literal {
    pub fn pos(atom: Atom) -> Self {
        Literal { positive: true, atom }
    }

    pub fn neg(atom: Atom) -> Self {
        Literal { positive: false, atom }
    }

    pub fn substitute(&self, bindings: &Bindings) -> Literal {
        Literal { positive: self.positive, atom: self.atom.substitute(bindings) }
    }
}

/// `head :- body`. Pure syntax; identity and origin live with the runtime
/// that installs the rule.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rule {
    pub head: Atom,
    pub body: Vec<Literal>,
}

impl Rule {
    pub fn new(head: Atom, body: Vec<Literal>) -> Self {
        Rule { head, body }
    }

    /// Replaces every occurrence of the bound variables in head and body,
    /// including relation- and peer-position occurrences. Unbound variables
    /// remain. Pure; `self` is unchanged.
    pub fn substitute(&self, bindings: &Bindings) -> Rule {
        Rule {
            head: self.head.substitute(bindings),
            body: self.body.iter().map(|l| l.substitute(bindings)).collect(),
        }
    }

    /// Variables of the rule that occur in a relation- or peer-name
    /// position (head or body), sorted.
    pub fn name_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut collect = |atom: &Atom| {
            if let Some(v) = atom.relation.var_name() {
                out.insert(v.to_string());
            }
            if let Some(v) = atom.peer.var_name() {
                out.insert(v.to_string());
            }
        };
        collect(&self.head);
        for lit in &self.body {
            collect(&lit.atom);
        }
        out
    }
}

/// Identity of an installed rule: `<origin-peer>:<counter>`, with a
/// `#inst<hash>` suffix for rules produced by binding instantiation. The
/// instance hash is derived from the binding values, so re-instantiating the
/// same binding always reproduces the same id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RuleId(String);

impl RuleId {
    pub fn new(origin_peer: &str, counter: u64) -> Self {
        RuleId(format!("{origin_peer}:{counter}"))
    }

    /// Id for the rule obtained by applying one concrete binding to a
    /// deferred rule.
    pub fn instance(&self, binding_hash: u64) -> Self {
        RuleId(format!("{}#inst{binding_hash:016x}", self.0))
    }

    pub fn from_string(s: String) -> Self {
        RuleId(s)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A ground, located tuple: `relation@peer(values...)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fact {
    pub relation: String,
    pub peer: String,
    pub tuple: Tuple,
}

impl Fact {
    pub fn new(relation: &str, peer: &str, tuple: Tuple) -> Self {
        Fact { relation: relation.to_string(), peer: peer.to_string(), tuple }
    }

    pub fn key(&self) -> crate::schema::RelationKey {
        crate::schema::RelationKey::new(&self.relation, &self.peer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(name: &str) -> Term {
        Term::Var(name.to_string())
    }

    #[test]
    fn substitution_replaces_name_and_arg_positions() {
        // union@sue($X) :- peers@sue($Y, $Z), $Y@$Z($X)
        let rule = Rule::new(
            Atom::ground_names("union", "sue", vec![var("X")]),
            vec![
                Literal::pos(Atom::ground_names("peers", "sue", vec![var("Y"), var("Z")])),
                Literal::pos(Atom::new(var("Y"), var("Z"), vec![var("X")])),
            ],
        );
        let mut b = Bindings::new();
        b.insert("Y".to_string(), Value::Str("r1".to_string()));
        b.insert("Z".to_string(), Value::Str("p1".to_string()));
        let out = rule.substitute(&b);
        assert_eq!(
            out.body[0].atom,
            Atom::ground_names(
                "peers",
                "sue",
                vec![
                    Term::Const(Value::Str("r1".to_string())),
                    Term::Const(Value::Str("p1".to_string())),
                ]
            )
        );
        assert_eq!(out.body[1].atom, Atom::ground_names("r1", "p1", vec![var("X")]));
        // $X stays free and the input rule is untouched.
        assert_eq!(out.head, rule.head);
        assert!(rule.body[1].atom.relation.is_var());
    }

    #[test]
    fn substitution_is_order_independent() {
        let rule = Rule::new(
            Atom::new(var("M"), var("P"), vec![var("X")]),
            vec![Literal::pos(Atom::ground_names("r", "p", vec![var("M"), var("P"), var("X")]))],
        );
        let mut ab = Bindings::new();
        ab.insert("M".to_string(), Value::Str("m1".to_string()));
        ab.insert("P".to_string(), Value::Str("p1".to_string()));
        // Same pairs inserted in the opposite order.
        let mut ba = Bindings::new();
        ba.insert("P".to_string(), Value::Str("p1".to_string()));
        ba.insert("M".to_string(), Value::Str("m1".to_string()));
        assert_eq!(rule.substitute(&ab), rule.substitute(&ba));
    }

    #[test]
    fn name_vars_cover_head_and_body() {
        let rule = Rule::new(
            Atom::new(var("M"), var("P"), vec![]),
            vec![Literal::pos(Atom::new(var("R"), Term::Const(Value::Str("p".into())), vec![]))],
        );
        let vars: Vec<String> = rule.name_vars().into_iter().collect();
        assert_eq!(vars, vec!["M".to_string(), "P".to_string(), "R".to_string()]);
    }
}
