//! Property tests over the public surface: rendering is a right inverse of
//! parsing for every syntactic category, and the wire codec is lossless.

use std::collections::BTreeSet;

use proptest::prelude::*;

use webdamlog::ast::{Atom, Fact, Literal, Rule, RuleId, Term, Tuple, Value};
use webdamlog::parser::{
    parse_decl, parse_fact, parse_rule, render_decl, render_fact, render_rule, Decl,
};
use webdamlog::peer::{Message, MessageItem};
use webdamlog::schema::{RelationDecl, RelationKey, RelationKind};
use webdamlog::transport::{decode, encode};

fn ident() -> impl Strategy<Value = String> {
    "[a-z_][a-zA-Z0-9_]{0,10}"
}

fn peer_name() -> impl Strategy<Value = String> {
    // Peer positions also admit host-like punctuation.
    "[a-z_][a-zA-Z0-9_]{0,6}(\\.[a-z0-9]{1,4}){0,2}(:[0-9]{1,5})?"
}

fn value() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<i64>().prop_map(Value::Int),
        // Any printable contents; quotes and backslashes must survive.
        "[ -~]{0,12}".prop_map(Value::Str),
    ]
}

fn term() -> impl Strategy<Value = Term> {
    prop_oneof![value().prop_map(Term::Const), ident().prop_map(Term::Var)]
}

fn name_term(vars: bool) -> impl Strategy<Value = Term> {
    if vars {
        prop_oneof![
            ident().prop_map(|s| Term::Const(Value::Str(s))),
            ident().prop_map(Term::Var),
        ]
        .boxed()
    } else {
        ident().prop_map(|s| Term::Const(Value::Str(s))).boxed()
    }
}

/// Rules as the renderer can produce them: possibly-variable name
/// positions and a nonempty body with at most one leading negation flip.
fn rule() -> impl Strategy<Value = Rule> {
    let open_atom = (name_term(true), name_term(true), proptest::collection::vec(term(), 0..4))
        .prop_map(|(r, p, args)| Atom::new(r, p, args));
    let literal = (open_atom, any::<bool>())
        .prop_map(|(atom, pos)| if pos { Literal::pos(atom) } else { Literal::neg(atom) });
    ((name_term(true), name_term(true), proptest::collection::vec(term(), 0..4)),
        proptest::collection::vec(literal, 1..4))
        .prop_map(|((r, p, args), body)| Rule::new(Atom::new(r, p, args), body))
}

fn tuple() -> impl Strategy<Value = Tuple> {
    proptest::collection::vec(value(), 0..4)
}

fn relation_key() -> impl Strategy<Value = RelationKey> {
    (ident(), peer_name()).prop_map(|(r, p)| RelationKey::new(&r, &p))
}

fn fact_set() -> impl Strategy<Value = BTreeSet<Tuple>> {
    proptest::collection::btree_set(tuple(), 0..4)
}

fn message_item() -> impl Strategy<Value = MessageItem> {
    prop_oneof![
        (relation_key(), fact_set())
            .prop_map(|(relation, facts)| MessageItem::FactBatch { relation, facts }),
        (relation_key(), fact_set())
            .prop_map(|(relation, facts)| MessageItem::Deletion { relation, facts }),
        (relation_key(), fact_set())
            .prop_map(|(relation, facts)| MessageItem::SnapshotUpdate { relation, facts }),
        (ident(), ident(), 0u64..100, rule(), proptest::collection::vec(
            (relation_key(), (0usize..4), any::<bool>()),
            0..3
        ))
            .prop_map(|(delegation, origin_peer, n, rule, decls)| {
                MessageItem::DelegateInstall {
                    delegation,
                    origin: RuleId::new(&origin_peer, n),
                    rule: render_rule(&rule),
                    decls: decls
                        .into_iter()
                        .map(|(key, arity, ext)| {
                            (
                                key,
                                RelationDecl {
                                    kind: if ext {
                                        RelationKind::Extensional
                                    } else {
                                        RelationKind::Intensional
                                    },
                                    arity,
                                },
                            )
                        })
                        .collect(),
                }
            }),
        ident().prop_map(|delegation| MessageItem::DelegateRemove { delegation }),
    ]
}

fn message() -> impl Strategy<Value = Message> {
    (peer_name(), peer_name(), any::<u64>(), proptest::collection::vec(message_item(), 0..4))
        .prop_map(|(sender, target, seq, items)| Message { sender, target, seq, items })
}

proptest! {
    #[test]
    fn fact_rendering_round_trips(rel in ident(), peer in peer_name(), t in tuple()) {
        let fact = Fact::new(&rel, &peer, t);
        let text = render_fact(&fact);
        prop_assert_eq!(parse_fact(&text).unwrap(), fact);
    }

    #[test]
    fn rule_rendering_round_trips(rule in rule()) {
        let text = render_rule(&rule);
        let back = parse_rule(&text)
            .unwrap_or_else(|e| panic!("rendered `{text}` does not parse: {e}"));
        prop_assert_eq!(back, rule);
    }

    #[test]
    fn decl_rendering_round_trips(key in relation_key(), arity in 0usize..6, ext in any::<bool>()) {
        let decl = Decl {
            kind: if ext { RelationKind::Extensional } else { RelationKind::Intensional },
            key,
            arity,
        };
        let text = render_decl(&decl);
        prop_assert_eq!(parse_decl(&text).unwrap(), decl);
    }

    #[test]
    fn codec_round_trips(msg in message()) {
        let bytes = encode(&msg);
        prop_assert_eq!(decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn codec_rejects_truncation(msg in message(), cut in any::<proptest::sample::Index>()) {
        let bytes = encode(&msg);
        let keep = cut.index(bytes.len());
        if keep < bytes.len() {
            prop_assert!(decode(&bytes[..keep]).is_err());
        }
    }
}
