//! Shared test infrastructure: a centralized reference evaluator, a random
//! distributed-system generator, and a random stratified-program generator
//! for the local engine. The references here are deliberately naive and
//! independent of the production evaluation paths, so agreement is evidence
//! rather than tautology.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use webdamlog::ast::{Bindings, Fact, Literal, Rule, Term, Tuple, Value};
use webdamlog::parser::{self, Decl};
use webdamlog::schema::{RelationDecl, RelationKey, RelationKind, Schema};

/// Repo-relative path to the bundled scenario directory.
pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

/// All facts in a program file, attributed to `owner` unless headers say
/// otherwise.
pub fn wdl_facts(file: &str, owner: &str) -> Vec<Fact> {
    let path = scenario_dir().join(file);
    let program = parser::parse_program_file(&path, Some(owner))
        .unwrap_or_else(|e| panic!("loading {}: {e}", path.display()));
    program
        .items
        .into_iter()
        .filter_map(|item| match item {
            parser::Item::Fact { fact, .. } => Some(fact),
            _ => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Centralized reference evaluation
// ---------------------------------------------------------------------------

/// A whole multi-peer system viewed as one global program: declarations,
/// initial stored facts, and every peer's rules.
#[derive(Debug, Clone, Default)]
pub struct GlobalProgram {
    pub decls: BTreeMap<RelationKey, RelationDecl>,
    pub facts: Vec<Fact>,
    pub rules: Vec<Rule>,
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

/// Resolves an atom's name position under a binding. `Ok(None)` means the
/// binding gives the position a value that cannot name anything, so the
/// candidate match dies (the runtime likewise skips such instantiations).
fn resolve_name(term: &Term, valid: fn(&str) -> bool) -> Option<Option<String>> {
    match term {
        Term::Const(Value::Str(s)) if valid(s) => Some(Some(s.clone())),
        Term::Const(_) => Some(None),
        Term::Var(_) => None,
    }
}

fn match_args(args: &[Term], row: &Tuple, base: &Bindings) -> Option<Bindings> {
    assert_eq!(args.len(), row.len(), "arity mismatch reached the reference evaluator");
    let mut out = base.clone();
    for (term, value) in args.iter().zip(row) {
        match term {
            Term::Const(c) => {
                if c != value {
                    return None;
                }
            }
            Term::Var(v) => match out.get(v) {
                Some(bound) if bound != value => return None,
                Some(_) => {}
                None => {
                    out.insert(v.clone(), value.clone());
                }
            },
        }
    }
    Some(out)
}

/// Left-to-right positive join over `state`. Name variables must be bound
/// by the time their atom is reached (the safety condition guarantees
/// this); a name bound to a non-name value simply fails to match.
fn eval_body(
    body: &[Literal],
    state: &BTreeMap<RelationKey, BTreeSet<Tuple>>,
) -> Vec<Bindings> {
    let mut partial = vec![Bindings::new()];
    for lit in body {
        assert!(lit.positive, "the centralized reference handles positive rules only");
        let mut next = Vec::new();
        for binding in &partial {
            let atom = lit.atom.substitute(binding);
            let Some(rel) = resolve_name(&atom.relation, is_plain_ident) else {
                panic!("unbound relation name in {}", parser::render_atom(&atom));
            };
            let Some(peer) = resolve_name(&atom.peer, is_peer_ident) else {
                panic!("unbound peer name in {}", parser::render_atom(&atom));
            };
            let (Some(rel), Some(peer)) = (rel, peer) else { continue };
            let key = RelationKey::new(&rel, &peer);
            let Some(rows) = state.get(&key) else { continue };
            for row in rows {
                if row.len() != atom.args.len() {
                    continue;
                }
                if let Some(b) = match_args(&atom.args, row, binding) {
                    next.push(b);
                }
            }
        }
        partial = next;
    }
    partial
}

/// Naive global fixpoint with instantaneous delivery: every rule sees every
/// relation directly and all derivations accumulate. For positive
/// insert-only systems this is exactly the quiescent distributed state.
pub fn global_fixpoint(program: &GlobalProgram) -> BTreeMap<RelationKey, BTreeSet<Tuple>> {
    let mut state: BTreeMap<RelationKey, BTreeSet<Tuple>> =
        program.decls.keys().map(|k| (k.clone(), BTreeSet::new())).collect();
    for fact in &program.facts {
        state.entry(fact.key()).or_default().insert(fact.tuple.clone());
    }
    loop {
        let mut derived: Vec<(RelationKey, Tuple)> = Vec::new();
        for rule in &program.rules {
            for binding in eval_body(&rule.body, &state) {
                let head = rule.head.substitute(&binding);
                let Some(rel) = resolve_name(&head.relation, is_plain_ident) else {
                    panic!("unbound head relation in {}", parser::render_rule(rule));
                };
                let Some(peer) = resolve_name(&head.peer, is_peer_ident) else {
                    panic!("unbound head peer in {}", parser::render_rule(rule));
                };
                let (Some(rel), Some(peer)) = (rel, peer) else { continue };
                let row: Tuple = head
                    .args
                    .iter()
                    .map(|t| match t {
                        Term::Const(v) => v.clone(),
                        Term::Var(v) => panic!("unbound head variable ${v}"),
                    })
                    .collect();
                derived.push((RelationKey::new(&rel, &peer), row));
            }
        }
        let mut changed = false;
        for (key, row) in derived {
            changed |= state.entry(key).or_default().insert(row);
        }
        if !changed {
            return state;
        }
    }
}

// ---------------------------------------------------------------------------
// Random distributed systems (rule classes A-F)
// ---------------------------------------------------------------------------

use rand::prelude::IndexedRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use webdamlog::ast::Atom;
use webdamlog::safety::{classify_rule, validate_rule, RuleClass};

/// One generated multi-peer system, both as per-peer surface programs (fed
/// to the runtime) and as a [`GlobalProgram`] (fed to the reference).
#[derive(Debug, Clone)]
pub struct GeneratedSystem {
    pub seed: u64,
    pub peers: Vec<String>,
    /// Program text per peer: the full declaration list, the peer's own
    /// facts, and the rules installed there.
    pub programs: BTreeMap<String, String>,
    pub global: GlobalProgram,
    /// Classes drawn while generating, for corpus-coverage assertions.
    pub classes: Vec<RuleClass>,
}

struct RelInfo {
    key: RelationKey,
    kind: RelationKind,
    arity: usize,
}

fn var(n: usize) -> Term {
    Term::Var(format!("x{n}"))
}

/// Argument terms for one atom: mostly variables (reusing earlier ones to
/// create joins), occasionally small integer constants.
/// Facts and rule constants share one small domain so random joins and
/// constant filters actually select rows.
const DOMAIN: std::ops::RangeInclusive<i64> = 1..=5;

fn mk_args(
    rng: &mut ChaCha8Rng,
    arity: usize,
    avail: &mut Vec<usize>,
    fresh: &mut usize,
) -> Vec<Term> {
    let mut args = Vec::with_capacity(arity);
    for _ in 0..arity {
        let roll: f64 = rng.random();
        if roll < 0.35 && !avail.is_empty() {
            args.push(var(*avail.choose(rng).unwrap()));
        } else if roll < 0.45 {
            args.push(Term::Const(Value::Int(rng.random_range(DOMAIN))));
        } else {
            let v = *fresh;
            *fresh += 1;
            avail.push(v);
            args.push(var(v));
        }
    }
    args
}

fn head_args(rng: &mut ChaCha8Rng, arity: usize, avail: &[usize]) -> Vec<Term> {
    (0..arity)
        .map(|_| {
            if rng.random::<f64>() < 0.15 {
                Term::Const(Value::Int(rng.random_range(DOMAIN)))
            } else {
                var(*avail.choose(rng).unwrap())
            }
        })
        .collect()
}

/// Generates one system: 2-4 peers, up to 8 rules drawn from the six rule
/// classes, up to 50 initial facts over a small integer domain. Every rule
/// is validated and classified against the global schema before it is
/// accepted, so generation bugs fail loudly here and not as mysterious
/// mismatches later.
pub fn generate_system(seed: u64) -> GeneratedSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let npeers = rng.random_range(2..=4);
    let peers: Vec<String> = (0..npeers).map(|i| format!("p{i}")).collect();

    let mut rels: Vec<RelInfo> = Vec::new();
    // Stored base relations: at least one per peer, at least one unary.
    let nbase = rng.random_range(npeers..=6);
    for i in 0..nbase {
        let owner = if i < npeers { &peers[i] } else { peers.choose(&mut rng).unwrap() };
        let arity = if i == 0 { 1 } else { rng.random_range(1..=2) };
        rels.push(RelInfo {
            key: RelationKey::new(&format!("b{i}"), owner),
            kind: RelationKind::Extensional,
            arity,
        });
    }
    // Head pools: a derived and a stored relation per peer with free
    // arities, plus one unary stored relation that every peer shares the
    // name of (so variable-peer heads always have a target).
    for p in &peers {
        rels.push(RelInfo {
            key: RelationKey::new("view", p),
            kind: RelationKind::Intensional,
            arity: rng.random_range(1..=2),
        });
        rels.push(RelInfo {
            key: RelationKey::new("tgt", p),
            kind: RelationKind::Extensional,
            arity: rng.random_range(1..=2),
        });
        rels.push(RelInfo {
            key: RelationKey::new("sink", p),
            kind: RelationKind::Extensional,
            arity: 1,
        });
    }

    // Everything inserted anywhere counts against the 50-fact budget,
    // catalog rows included.
    let mut budget = 50usize;
    let mut facts: Vec<Fact> = Vec::new();
    let nfacts = rng.random_range(15..=35);
    let bases: Vec<usize> = (0..nbase).collect();
    for _ in 0..nfacts {
        let info = &rels[*bases.choose(&mut rng).unwrap()];
        let tuple: Tuple =
            (0..info.arity).map(|_| Value::Int(rng.random_range(DOMAIN))).collect();
        facts.push(Fact::new(&info.key.relation, &info.key.peer, tuple));
        budget -= 1;
    }

    // The local atom pool at a peer: anything it owns, weighted toward the
    // fact-bearing base relations so generated bodies usually match rows.
    fn pick_rel_at(rng: &mut ChaCha8Rng, rels: &[RelInfo], p: &str) -> (RelationKey, usize) {
        let at: Vec<&RelInfo> = rels.iter().filter(|r| r.key.peer == p).collect();
        if rng.random::<f64>() < 0.6 {
            let bases: Vec<&&RelInfo> =
                at.iter().filter(|r| r.key.relation.starts_with('b')).collect();
            if let Some(pick) = bases.choose(rng) {
                return (pick.key.clone(), pick.arity);
            }
        }
        let pick = at.choose(rng).unwrap();
        (pick.key.clone(), pick.arity)
    }
    fn local_atom(
        rng: &mut ChaCha8Rng,
        rels: &[RelInfo],
        p: &str,
        avail: &mut Vec<usize>,
        fresh: &mut usize,
    ) -> Atom {
        let (key, arity) = pick_rel_at(rng, rels, p);
        Atom::ground_names(&key.relation, &key.peer, mk_args(rng, arity, avail, fresh))
    }
    fn unary_pool(rels: &[RelInfo]) -> Vec<RelationKey> {
        rels.iter().filter(|r| r.arity == 1).map(|r| r.key.clone()).collect()
    }

    let mut rules: Vec<(String, Rule)> = Vec::new();
    let mut classes: Vec<RuleClass> = Vec::new();
    let nrules = rng.random_range(1..=8);
    let mut catalogs = 0usize;
    // A draw whose body came out all-constant cannot bind a head variable;
    // such draws are retried a few times rather than thinning the corpus.
    'rules: for _ in 0..nrules {
      for _attempt in 0..4 {
        let at = peers.choose(&mut rng).unwrap().clone();
        let other = loop {
            let q = peers.choose(&mut rng).unwrap().clone();
            if q != at {
                break q;
            }
        };
        let class_roll = rng.random_range(0..6);
        let mut avail: Vec<usize> = Vec::new();
        let mut fresh = 0usize;

        let (head_key, body, expect) = match class_roll {
            // A: local body, derived local head.
            0 => {
                let mut body =
                    vec![Literal::pos(local_atom(&mut rng, &rels, &at, &mut avail, &mut fresh))];
                if rng.random::<f64>() < 0.5 {
                    body.push(Literal::pos(local_atom(&mut rng, &rels, &at, &mut avail, &mut fresh)));
                }
                (RelationKey::new("view", &at), body, RuleClass::Deduction)
            }
            // B: local body, stored local head.
            1 => {
                let mut body =
                    vec![Literal::pos(local_atom(&mut rng, &rels, &at, &mut avail, &mut fresh))];
                if rng.random::<f64>() < 0.5 {
                    body.push(Literal::pos(local_atom(&mut rng, &rels, &at, &mut avail, &mut fresh)));
                }
                (RelationKey::new("tgt", &at), body, RuleClass::Update)
            }
            // C: local body, stored remote head.
            2 => {
                let body =
                    vec![Literal::pos(local_atom(&mut rng, &rels, &at, &mut avail, &mut fresh))];
                (RelationKey::new("tgt", &other), body, RuleClass::Messaging)
            }
            // D: local body, derived remote head.
            3 => {
                let body =
                    vec![Literal::pos(local_atom(&mut rng, &rels, &at, &mut avail, &mut fresh))];
                (RelationKey::new("view", &other), body, RuleClass::ViewDelegation)
            }
            // E: the body reaches another peer; sometimes with a local
            // prefix, sometimes from the first atom (whole-rule shipping).
            4 => {
                let mut body = Vec::new();
                if rng.random::<f64>() < 0.6 {
                    body.push(Literal::pos(local_atom(&mut rng, &rels, &at, &mut avail, &mut fresh)));
                }
                let (rkey, rarity) = pick_rel_at(&mut rng, &rels, &other);
                body.push(Literal::pos(Atom::ground_names(
                    &rkey.relation,
                    &rkey.peer,
                    mk_args(&mut rng, rarity, &mut avail, &mut fresh),
                )));
                let head_peer = peers.choose(&mut rng).unwrap().clone();
                let head_rel = if rng.random::<f64>() < 0.5 { "view" } else { "tgt" };
                (RelationKey::new(head_rel, &head_peer), body, RuleClass::BodySplit)
            }
            // F: name variables resolved from a catalog relation.
            _ => {
                let cat = format!("cat{catalogs}");
                catalogs += 1;
                rels.push(RelInfo {
                    key: RelationKey::new(&cat, &at),
                    kind: RelationKind::Extensional,
                    arity: 2,
                });
                let pool = unary_pool(&rels);
                for _ in 0..rng.random_range(1..=3).min(budget) {
                    let k = pool.choose(&mut rng).unwrap();
                    facts.push(Fact::new(
                        &cat,
                        &at,
                        vec![Value::Str(k.relation.clone()), Value::Str(k.peer.clone())],
                    ));
                    budget -= 1;
                }
                // Bindings that cannot name anything must be skipped, not
                // crash anything: integer and non-identifier values, plus a
                // peer nobody runs (its delegation is dropped in flight).
                if budget > 0 && rng.random::<f64>() < 0.2 {
                    facts.push(Fact::new(&cat, &at, vec![Value::Int(3), Value::Str("p0".into())]));
                    budget -= 1;
                }
                if budget > 0 && rng.random::<f64>() < 0.2 {
                    facts.push(Fact::new(
                        &cat,
                        &at,
                        vec![Value::Str("no such relation".into()), Value::Str("p0".into())],
                    ));
                    budget -= 1;
                }
                if budget > 0 && rng.random::<f64>() < 0.15 {
                    facts.push(Fact::new(
                        &cat,
                        &at,
                        vec![Value::Str("b0".into()), Value::Str("ghost".into())],
                    ));
                    budget -= 1;
                }
                let r = Term::Var("r".into());
                let q = Term::Var("q".into());
                let body = vec![
                    Literal::pos(Atom::ground_names(&cat, &at, vec![r.clone(), q.clone()])),
                    Literal::pos(Atom::new(r, q, vec![var(0)])),
                ];
                avail.push(0);
                let head_peer = if rng.random::<f64>() < 0.3 { &other } else { &at };
                (RelationKey::new("sink", head_peer), body, RuleClass::Deferred)
            }
        };

        let arity = rels
            .iter()
            .find(|r| r.key == head_key)
            .map(|r| r.arity)
            .expect("head relation is declared");
        if avail.is_empty() {
            continue;
        }
        let head = Atom::ground_names(
            &head_key.relation,
            &head_key.peer,
            head_args(&mut rng, arity, &avail),
        );
        let rule = Rule::new(head, body);
        rules.push((at.clone(), rule));
        classes.push(expect);
        continue 'rules;
      }
    }

    // Assemble the global declaration list and per-peer programs.
    let mut decls: BTreeMap<RelationKey, RelationDecl> = BTreeMap::new();
    let mut schema = Schema::new();
    for p in &peers {
        schema.add_peer(p);
    }
    for info in &rels {
        decls.insert(info.key.clone(), RelationDecl { kind: info.kind, arity: info.arity });
        schema.declare(&info.key, info.kind, info.arity).expect("generated decls are consistent");
    }

    // Every accepted rule must round-trip, validate, and land in the class
    // the construction aimed for.
    for ((at, rule), expect) in rules.iter().zip(&classes) {
        let text = parser::render_rule(rule);
        let reparsed = parser::parse_rule(&text).expect("generated rule parses");
        assert_eq!(&reparsed, rule, "render/parse changed rule {text}");
        validate_rule(rule, &schema).unwrap_or_else(|e| panic!("generated rule {text}: {e}"));
        let got = classify_rule(rule, at, &schema);
        assert_eq!(got, *expect, "rule {text} at {at} classified as {got:?}");
    }

    let decl_lines: String = decls
        .iter()
        .map(|(key, d)| {
            parser::render_decl(&Decl { kind: d.kind, key: key.clone(), arity: d.arity }) + "\n"
        })
        .collect();
    let mut programs: BTreeMap<String, String> = BTreeMap::new();
    for p in &peers {
        let mut text = decl_lines.clone();
        for fact in facts.iter().filter(|f| &f.peer == p) {
            text.push_str(&parser::render_fact(fact));
            text.push('\n');
        }
        for (_, rule) in rules.iter().filter(|(at, _)| at == p) {
            text.push_str(&parser::render_rule(rule));
            text.push('\n');
        }
        programs.insert(p.clone(), text);
    }

    GeneratedSystem {
        seed,
        peers,
        programs,
        global: GlobalProgram {
            decls,
            facts,
            rules: rules.into_iter().map(|(_, r)| r).collect(),
        },
        classes,
    }
}

// ---------------------------------------------------------------------------
// Random stratified programs for the local engine
// ---------------------------------------------------------------------------

use webdamlog::ast::RuleId;
use webdamlog::engine::{EngineRule, HeadSink};

/// One generated single-peer engine workload: stratified rules (negation
/// only against strictly lower strata), initial base contents, and a
/// mutation script.
/// One mutation batch: (relation, added, removed) per touched relation.
pub type Batch = Vec<(RelationKey, Vec<Tuple>, Vec<Tuple>)>;

#[derive(Debug, Clone)]
pub struct EngineProgram {
    pub rules: Vec<EngineRule>,
    pub bases: BTreeMap<RelationKey, BTreeSet<Tuple>>,
    /// Batches applied between fixpoints.
    pub batches: Vec<Batch>,
    /// The stratification the construction guarantees (derived heads only).
    pub levels: BTreeMap<RelationKey, usize>,
}

fn k(name: &str) -> RelationKey {
    RelationKey::new(name, "p")
}

fn small_tuple(rng: &mut ChaCha8Rng, arity: usize) -> Tuple {
    (0..arity).map(|_| Value::Int(rng.random_range(1..=6))).collect()
}

/// Builds a random stratified program. Derived relations are assigned
/// levels up front; positive body atoms may read levels <= their head's,
/// negative ones only strictly lower levels, so stratification holds by
/// construction without consulting the engine.
pub fn generate_engine_program(seed: u64) -> EngineProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nbase = rng.random_range(2..=4);
    let base_arity: Vec<usize> = (0..nbase).map(|_| rng.random_range(1..=2)).collect();
    let nderived = rng.random_range(2..=6);
    let levels: Vec<usize> = (0..nderived).map(|_| rng.random_range(0..=2)).collect();
    let derived_arity: Vec<usize> = (0..nderived).map(|_| rng.random_range(1..=2)).collect();

    // readable[i] = relations a level-i positive atom may mention.
    let readable = |level: usize, strict: bool| -> Vec<(RelationKey, usize)> {
        let mut pool: Vec<(RelationKey, usize)> =
            (0..nbase).map(|i| (k(&format!("b{i}")), base_arity[i])).collect();
        for j in 0..nderived {
            if levels[j] < level || (!strict && levels[j] == level) {
                pool.push((k(&format!("v{j}")), derived_arity[j]));
            }
        }
        pool
    };

    let mut rules = Vec::new();
    let nrules = rng.random_range(2..=8);
    for i in 0..nrules {
        let head_idx = rng.random_range(0..nderived);
        let level = levels[head_idx];
        let mut avail: Vec<usize> = Vec::new();
        let mut fresh = 0usize;
        let mut body = Vec::new();
        for _ in 0..rng.random_range(1..=3) {
            let (key, arity) = readable(level, false).choose(&mut rng).unwrap().clone();
            body.push(Literal::pos(Atom::ground_names(
                &key.relation,
                &key.peer,
                mk_args(&mut rng, arity, &mut avail, &mut fresh),
            )));
        }
        if avail.is_empty() {
            body[0] = Literal::pos(Atom::ground_names("b0", "p", vec![var(0); base_arity[0]]));
            avail.push(0);
        }
        // Optional negative literal over already-bound variables against a
        // strictly lower stratum.
        if rng.random::<f64>() < 0.4 {
            let lower = readable(level, true);
            if let Some((key, arity)) = lower.choose(&mut rng) {
                let args: Vec<Term> =
                    (0..*arity).map(|_| var(*avail.choose(&mut rng).unwrap())).collect();
                body.push(Literal::neg(Atom::ground_names(&key.relation, &key.peer, args)));
            }
        }
        let sink = if rng.random::<f64>() < 0.2 { HeadSink::Buffer } else { HeadSink::Scratch };
        let head_key = if sink == HeadSink::Buffer {
            k(&format!("out{head_idx}"))
        } else {
            k(&format!("v{head_idx}"))
        };
        let arity = derived_arity[head_idx];
        rules.push(EngineRule {
            id: RuleId::new("p", i as u64),
            head: head_key,
            head_args: head_args(&mut rng, arity, &avail),
            body,
            sink,
        });
    }

    let mut bases: BTreeMap<RelationKey, BTreeSet<Tuple>> = BTreeMap::new();
    for (i, &arity) in base_arity.iter().enumerate() {
        let rows = rng.random_range(0..=10);
        let set: BTreeSet<Tuple> = (0..rows).map(|_| small_tuple(&mut rng, arity)).collect();
        bases.insert(k(&format!("b{i}")), set);
    }

    let mut batches = Vec::new();
    let mut current = bases.clone();
    for _ in 0..rng.random_range(1..=4) {
        let mut batch = Vec::new();
        for _ in 0..rng.random_range(1..=3) {
            let i = rng.random_range(0..nbase);
            let key = k(&format!("b{i}"));
            let mut added = Vec::new();
            let mut removed = Vec::new();
            for _ in 0..rng.random_range(0..=3) {
                added.push(small_tuple(&mut rng, base_arity[i]));
            }
            // Removals are rarer so plenty of batches stay insert-only and
            // exercise the incremental path.
            if rng.random::<f64>() < 0.3 {
                if let Some(row) = current[&key].iter().next().cloned() {
                    removed.push(row);
                }
            }
            let entry = current.get_mut(&key).unwrap();
            for t in &removed {
                entry.remove(t);
            }
            for t in &added {
                entry.insert(t.clone());
            }
            batch.push((key, added, removed));
        }
        batches.push(batch);
    }

    let levels_map: BTreeMap<RelationKey, usize> =
        (0..nderived).map(|j| (k(&format!("v{j}")), levels[j])).collect();
    EngineProgram { rules, bases, batches, levels: levels_map }
}

/// Stratified naive reference for [`EngineProgram`]: iterate each stratum's
/// derived rules to fixpoint bottom-up, then take one pass over the
/// buffer-head rules against the final state. Negation is a ground lookup
/// against the (already final) lower strata.
pub fn naive_engine_eval(
    rules: &[EngineRule],
    bases: &BTreeMap<RelationKey, BTreeSet<Tuple>>,
    strata: &BTreeMap<RelationKey, usize>,
) -> (BTreeMap<RelationKey, BTreeSet<Tuple>>, BTreeMap<RelationKey, BTreeSet<Tuple>>) {
    let mut state = bases.clone();

    let eval_rule = |rule: &EngineRule, state: &BTreeMap<RelationKey, BTreeSet<Tuple>>| {
        let mut partial = vec![Bindings::new()];
        for lit in &rule.body {
            let atom = &lit.atom;
            let rel = atom.relation.const_name().expect("engine rules have ground names");
            let peer = atom.peer.const_name().expect("engine rules have ground names");
            let key = RelationKey::new(rel, peer);
            let mut next = Vec::new();
            if lit.positive {
                let empty = BTreeSet::new();
                let rows = state.get(&key).unwrap_or(&empty);
                for binding in &partial {
                    for row in rows {
                        if let Some(b) = match_args(&atom.args, row, binding) {
                            next.push(b);
                        }
                    }
                }
            } else {
                for binding in &partial {
                    let ground = atom.substitute(binding);
                    let row: Tuple = ground
                        .args
                        .iter()
                        .map(|t| match t {
                            Term::Const(v) => v.clone(),
                            Term::Var(v) => panic!("negation over unbound ${v}"),
                        })
                        .collect();
                    if !state.get(&key).map(|s| s.contains(&row)).unwrap_or(false) {
                        next.push(binding.clone());
                    }
                }
            }
            partial = next;
        }
        let mut out = BTreeSet::new();
        for binding in partial {
            let row: Tuple = rule
                .head_args
                .iter()
                .map(|t| match t {
                    Term::Const(v) => v.clone(),
                    Term::Var(v) => {
                        binding.get(v).unwrap_or_else(|| panic!("unbound head ${v}")).clone()
                    }
                })
                .collect();
            out.insert(row);
        }
        out
    };

    let max_level = strata.values().copied().max().unwrap_or(0);
    for level in 0..=max_level {
        loop {
            let mut changed = false;
            for rule in rules {
                if rule.sink != HeadSink::Scratch
                    || strata.get(&rule.head).copied().unwrap_or(0) != level
                {
                    continue;
                }
                for row in eval_rule(rule, &state) {
                    changed |= state.entry(rule.head.clone()).or_default().insert(row);
                }
            }
            if !changed {
                break;
            }
        }
    }

    let mut buffers: BTreeMap<RelationKey, BTreeSet<Tuple>> = BTreeMap::new();
    for rule in rules {
        if rule.sink == HeadSink::Buffer {
            buffers.entry(rule.head.clone()).or_default().extend(eval_rule(rule, &state));
        }
    }
    let derived = state
        .into_iter()
        .filter(|(key, _)| !bases.contains_key(key))
        .collect();
    (derived, buffers)
}
