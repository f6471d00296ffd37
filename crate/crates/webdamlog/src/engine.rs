//! Per-peer datalog evaluation.
//!
//! The engine evaluates the locally runnable rules of one peer: rules whose
//! body literals all name ground relations at this peer. Heads fall in two
//! groups:
//!
//! * **scratch heads** — local derived relations, recomputed rather than
//!   stored, readable by other rules within the same fixpoint;
//! * **buffered heads** — everything else: local stored relations being
//!   updated, and remote relations being fed through channels. Their
//!   derivations accumulate in per-relation buffers the runtime drains;
//!   rules never read a buffer, so buffered rules run after every scratch
//!   stratum has saturated.
//!
//! Between runs the engine keeps every relation's previous contents plus a
//! changed-set. A run first takes the forward closure of the changed set
//! through the dependency graph; relations outside the closure keep their
//! cached contents untouched. When the stage brought only insertions and
//! no rule or negation is affected, the run is *incremental*: cached
//! contents stay and the new rows alone seed semi-naive propagation.
//! Otherwise every invalidated derived relation is recomputed from scratch
//! over the remaining facts — deletions propagate by recomputation, not by
//! provenance tracking.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use petgraph::visit::EdgeRef;
use thiserror::Error;

use crate::ast::{Bindings, Literal, RuleId, Term, Tuple};
use crate::schema::RelationKey;

/// Where a rule's derivations go.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSink {
    /// Local derived relation: readable during the fixpoint.
    Scratch,
    /// Stored-relation update or outbound channel: write-only buffer.
    Buffer,
}

/// One locally evaluable rule, ready for the engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineRule {
    pub id: RuleId,
    pub head: RelationKey,
    pub head_args: Vec<Term>,
    pub body: Vec<Literal>,
    pub sink: HeadSink,
}

/// One rule's footprint in the dependency graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperEdge {
    pub rule: RuleId,
    pub head: RelationKey,
    /// Body relations with their polarity (true = positive occurrence).
    pub body: Vec<(RelationKey, bool)>,
    /// Whether the head is readable within the fixpoint (scratch sink).
    pub readable_head: bool,
}

/// Relations as nodes, one hyperedge per rule.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DependencyGraph {
    pub nodes: BTreeSet<RelationKey>,
    pub edges: Vec<HyperEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("negation inside a recursive cycle: {}", cycle.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" -> "))]
pub struct NegationCycleError {
    pub cycle: Vec<RelationKey>,
}

/// Builds the dependency graph for a rule set: one node per referenced
/// relation, one hyperedge per rule with per-occurrence polarity.
pub fn build_dependency_graph(rules: &[EngineRule]) -> DependencyGraph {
    let mut graph = DependencyGraph::default();
    for rule in rules {
        let mut body = Vec::with_capacity(rule.body.len());
        for lit in &rule.body {
            let key = literal_key(lit);
            graph.nodes.insert(key.clone());
            body.push((key, lit.positive));
        }
        graph.nodes.insert(rule.head.clone());
        graph.edges.push(HyperEdge {
            rule: rule.id.clone(),
            head: rule.head.clone(),
            body,
            readable_head: rule.sink == HeadSink::Scratch,
        });
    }
    graph
}

fn literal_key(lit: &Literal) -> RelationKey {
    let rel = lit.atom.relation.const_name().expect("engine rules have ground relation names");
    let peer = lit.atom.peer.const_name().expect("engine rules have ground peer names");
    RelationKey::new(rel, peer)
}

/// Assigns minimal strata: positive edges never decrease the stratum,
/// negative edges strictly increase it. Only edges into readable heads
/// constrain the ordering — buffered heads are never read back within a
/// fixpoint, so rules feeding them run after all strata and cannot create
/// recursion. Fails iff some cycle of readable rules contains a negative
/// edge.
pub fn stratify(graph: &DependencyGraph) -> Result<BTreeMap<RelationKey, usize>, NegationCycleError> {
    let mut pg: DiGraph<RelationKey, bool> = DiGraph::new();
    let mut index: BTreeMap<RelationKey, NodeIndex> = BTreeMap::new();
    for node in &graph.nodes {
        index.insert(node.clone(), pg.add_node(node.clone()));
    }
    for edge in graph.edges.iter().filter(|e| e.readable_head) {
        let head = index[&edge.head];
        for (body, positive) in &edge.body {
            pg.add_edge(index[body], head, *positive);
        }
    }

    // Tarjan yields components in reverse topological order, so walking the
    // list backwards visits every node after all of its predecessors.
    let sccs = tarjan_scc(&pg);
    let mut component = vec![0usize; pg.node_count()];
    for (c, members) in sccs.iter().enumerate() {
        for &n in members {
            component[n.index()] = c;
        }
    }
    for e in pg.edge_indices() {
        let (src, dst) = pg.edge_endpoints(e).expect("edge exists");
        if !pg[e] && component[src.index()] == component[dst.index()] {
            let cycle = sccs[component[src.index()]].iter().map(|&n| pg[n].clone()).collect();
            return Err(NegationCycleError { cycle });
        }
    }

    let mut stratum_of_component = vec![0usize; sccs.len()];
    for (c, members) in sccs.iter().enumerate().rev() {
        let mut s = 0;
        for &n in members {
            for e in pg.edges_directed(n, petgraph::Direction::Incoming) {
                let src_c = component[e.source().index()];
                if src_c == c {
                    continue;
                }
                let need = stratum_of_component[src_c] + usize::from(!*e.weight());
                s = s.max(need);
            }
        }
        stratum_of_component[c] = s;
    }

    let mut out = BTreeMap::new();
    for node in pg.node_indices() {
        out.insert(pg[node].clone(), stratum_of_component[component[node.index()]]);
    }
    Ok(out)
}

/// Forward closure of `changed` through the graph's hyperedges: every
/// relation whose contents may differ once the changed ones did.
pub fn invalidate(graph: &DependencyGraph, changed: &BTreeSet<RelationKey>) -> BTreeSet<RelationKey> {
    let mut consumers: BTreeMap<&RelationKey, Vec<&RelationKey>> = BTreeMap::new();
    for edge in &graph.edges {
        for (body, _) in &edge.body {
            consumers.entry(body).or_default().push(&edge.head);
        }
    }
    let mut out: BTreeSet<RelationKey> = changed.clone();
    let mut queue: VecDeque<RelationKey> = changed.iter().cloned().collect();
    while let Some(key) = queue.pop_front() {
        for &head in consumers.get(&key).into_iter().flatten() {
            if out.insert(head.clone()) {
                queue.push_back(head.clone());
            }
        }
    }
    out
}

/// How a fixpoint run dealt with the invalidated relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixpointMode {
    /// Nothing invalidated; caches served every relation.
    Idle,
    /// Insertions only: new rows propagated on top of cached contents.
    Incremental,
    /// Invalidated derived relations recomputed from scratch.
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixpointRun {
    pub mode: FixpointMode,
    pub invalidated: BTreeSet<RelationKey>,
    /// Successful body matches (one per derived binding).
    pub firings: u64,
    /// Tuples that were not present before this run.
    pub new_tuples: u64,
}

#[derive(Debug, Clone)]
struct CompiledRule {
    rule: EngineRule,
    /// Body indices in evaluation order: positives keep their relative
    /// order; each negative literal floats to the first point where all
    /// its variables are bound.
    order: Vec<usize>,
}

fn compile_order(body: &[Literal]) -> Vec<usize> {
    let mut order = Vec::with_capacity(body.len());
    let mut bound: BTreeSet<&str> = BTreeSet::new();
    let mut pending_neg: Vec<usize> = Vec::new();
    let flush =
        |bound: &BTreeSet<&str>, pending: &mut Vec<usize>, order: &mut Vec<usize>| {
            pending.retain(|&i| {
                let ready = body[i].atom.arg_vars().all(|v| bound.contains(v));
                if ready {
                    order.push(i);
                }
                !ready
            });
        };
    for (i, lit) in body.iter().enumerate() {
        if lit.positive {
            order.push(i);
            bound.extend(lit.atom.arg_vars());
            flush(&bound, &mut pending_neg, &mut order);
        } else {
            pending_neg.push(i);
            flush(&bound, &mut pending_neg, &mut order);
        }
    }
    assert!(pending_neg.is_empty(), "negative literal with unbound variables reached the engine");
    order
}

/// The evaluation core: persistent relation contents, derivation buffers,
/// and the change tracking that drives cache reuse.
#[derive(Debug, Clone, Default)]
pub struct Engine {
    rules: BTreeMap<RuleId, CompiledRule>,
    graph: DependencyGraph,
    strata: BTreeMap<RelationKey, usize>,
    /// Stored (extensional) relation contents, mirrored from the runtime.
    bases: BTreeMap<RelationKey, BTreeSet<Tuple>>,
    /// Derived (scratch) relation contents as of the last run.
    scratches: BTreeMap<RelationKey, BTreeSet<Tuple>>,
    /// Full derivation sets of buffered heads as of the last run.
    buffers: BTreeMap<RelationKey, BTreeSet<Tuple>>,
    changed: BTreeSet<RelationKey>,
    added: BTreeMap<RelationKey, BTreeSet<Tuple>>,
    saw_removal: bool,
    rules_changed: bool,
    rule_change_heads: BTreeSet<RelationKey>,
    empty: BTreeSet<Tuple>,
}

impl Engine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces the rule set. Rebuilds the dependency graph and strata only
    /// when the set actually differs; on a negation cycle nothing changes.
    pub fn set_rules(&mut self, rules: Vec<EngineRule>) -> Result<(), NegationCycleError> {
        let new_ids: BTreeMap<&RuleId, &EngineRule> = rules.iter().map(|r| (&r.id, r)).collect();
        let mut diff_heads = BTreeSet::new();
        for (id, rule) in &new_ids {
            match self.rules.get(id) {
                Some(prev) if &prev.rule == *rule => {}
                _ => {
                    diff_heads.insert(rule.head.clone());
                }
            }
        }
        for (id, compiled) in &self.rules {
            if !new_ids.contains_key(id) {
                diff_heads.insert(compiled.rule.head.clone());
            }
        }
        if diff_heads.is_empty() && new_ids.len() == self.rules.len() {
            return Ok(());
        }

        let graph = build_dependency_graph(&rules);
        let strata = stratify(&graph)?;
        self.graph = graph;
        self.strata = strata;
        self.rules = rules
            .into_iter()
            .map(|r| {
                let order = compile_order(&r.body);
                (r.id.clone(), CompiledRule { rule: r, order })
            })
            .collect();
        self.rules_changed = true;
        self.rule_change_heads.extend(diff_heads);
        // Derived relations that no longer have rules must drain.
        let live_scratch: BTreeSet<&RelationKey> = self
            .rules
            .values()
            .filter(|c| c.rule.sink == HeadSink::Scratch)
            .map(|c| &c.rule.head)
            .collect();
        let stale: Vec<RelationKey> =
            self.scratches.keys().filter(|k| !live_scratch.contains(k)).cloned().collect();
        for key in stale {
            if !self.scratches[&key].is_empty() {
                self.rule_change_heads.insert(key.clone());
            }
        }
        let live_buffer: BTreeSet<&RelationKey> = self
            .rules
            .values()
            .filter(|c| c.rule.sink == HeadSink::Buffer)
            .map(|c| &c.rule.head)
            .collect();
        self.buffers.retain(|k, _| live_buffer.contains(k));
        Ok(())
    }

    /// Applies a stored-relation change coming out of the runtime's stage
    /// input processing (or its own end-of-stage table updates).
    pub fn apply_base(
        &mut self,
        key: &RelationKey,
        added: impl IntoIterator<Item = Tuple>,
        removed: impl IntoIterator<Item = Tuple>,
    ) {
        let entry = self.bases.entry(key.clone()).or_default();
        let mut touched = false;
        for t in removed {
            if entry.remove(&t) {
                touched = true;
                self.saw_removal = true;
                self.added.entry(key.clone()).or_default().remove(&t);
            }
        }
        for t in added {
            if entry.insert(t.clone()) {
                touched = true;
                self.added.entry(key.clone()).or_default().insert(t);
            }
        }
        if touched {
            self.changed.insert(key.clone());
        }
    }

    /// Replaces a stored relation's contents outright (snapshot receipt).
    pub fn replace_base(&mut self, key: &RelationKey, contents: BTreeSet<Tuple>) {
        let current = self.bases.entry(key.clone()).or_default();
        let added: Vec<Tuple> = contents.difference(current).cloned().collect();
        let removed: Vec<Tuple> = current.difference(&contents).cloned().collect();
        self.apply_base(key, added, removed);
    }

    /// Current contents of a readable relation (stored or derived).
    pub fn contents(&self, key: &RelationKey) -> &BTreeSet<Tuple> {
        self.scratches.get(key).or_else(|| self.bases.get(key)).unwrap_or(&self.empty)
    }

    /// Full derivation set of a buffered head as of the last run.
    pub fn buffer(&self, key: &RelationKey) -> &BTreeSet<Tuple> {
        self.buffers.get(key).unwrap_or(&self.empty)
    }

    pub fn buffers(&self) -> &BTreeMap<RelationKey, BTreeSet<Tuple>> {
        &self.buffers
    }

    pub fn strata(&self) -> &BTreeMap<RelationKey, usize> {
        &self.strata
    }

    pub fn graph(&self) -> &DependencyGraph {
        &self.graph
    }

    /// Whether a run now would have anything to do.
    pub fn dirty(&self) -> bool {
        !self.changed.is_empty() || self.rules_changed || !self.rule_change_heads.is_empty()
    }

    /// Relations the pending changes would invalidate if a run started now.
    pub fn pending_invalidation(&self) -> BTreeSet<RelationKey> {
        let mut seeds = self.changed.clone();
        seeds.extend(self.rule_change_heads.iter().cloned());
        if seeds.is_empty() {
            return BTreeSet::new();
        }
        invalidate(&self.graph, &seeds)
    }

    fn read(&self, key: &RelationKey) -> &BTreeSet<Tuple> {
        self.scratches.get(key).or_else(|| self.bases.get(key)).unwrap_or(&self.empty)
    }

    /// Evaluates one rule, returning derived head tuples and counting
    /// firings. `delta` restricts one positive body position to a given
    /// tuple set (semi-naive pivot). `unsaturated` guards negation: a
    /// negated relation must not still be under recomputation.
    fn eval_rule(
        &self,
        compiled: &CompiledRule,
        delta: Option<(usize, &BTreeSet<Tuple>)>,
        unsaturated: &BTreeSet<RelationKey>,
        firings: &mut u64,
    ) -> BTreeSet<Tuple> {
        let rule = &compiled.rule;
        let mut bindings: Vec<Bindings> = vec![Bindings::new()];
        for &idx in &compiled.order {
            if bindings.is_empty() {
                break;
            }
            let lit = &rule.body[idx];
            let key = literal_key(lit);
            let source = match delta {
                Some((d, set)) if d == idx => set,
                _ => self.read(&key),
            };
            if lit.positive {
                let mut next = Vec::new();
                for b in &bindings {
                    for tuple in source.iter() {
                        if let Some(extended) = match_tuple(&lit.atom.args, tuple, b) {
                            next.push(extended);
                        }
                    }
                }
                bindings = next;
            } else {
                assert!(
                    !unsaturated.contains(&key),
                    "negated relation {key} read before its contents were final"
                );
                bindings.retain(|b| {
                    let probe: Tuple = lit
                        .atom
                        .args
                        .iter()
                        .map(|t| match t {
                            Term::Const(v) => v.clone(),
                            Term::Var(v) => b[v.as_str()].clone(),
                        })
                        .collect();
                    !source.contains(&probe)
                });
            }
        }
        *firings += bindings.len() as u64;
        bindings
            .iter()
            .map(|b| {
                rule.head_args
                    .iter()
                    .map(|t| match t {
                        Term::Const(v) => v.clone(),
                        Term::Var(v) => b
                            .get(v.as_str())
                            .unwrap_or_else(|| panic!("unbound head variable ${v}"))
                            .clone(),
                    })
                    .collect()
            })
            .collect()
    }

    /// Evaluates a body over current contents, returning every satisfying
    /// binding. Used for ad-hoc queries and deferred-rule binding
    /// collection after a run.
    pub fn query_body(&self, body: &[Literal]) -> BTreeSet<Bindings> {
        if body.is_empty() {
            return BTreeSet::new();
        }
        let order = compile_order(body);
        let mut bindings: Vec<Bindings> = vec![Bindings::new()];
        for &idx in &order {
            let lit = &body[idx];
            let key = literal_key(lit);
            let source = self.read(&key);
            if lit.positive {
                let mut next = Vec::new();
                for b in &bindings {
                    for tuple in source.iter() {
                        if let Some(extended) = match_tuple(&lit.atom.args, tuple, b) {
                            next.push(extended);
                        }
                    }
                }
                bindings = next;
            } else {
                bindings.retain(|b| {
                    let probe: Tuple = lit
                        .atom
                        .args
                        .iter()
                        .map(|t| match t {
                            Term::Const(v) => v.clone(),
                            Term::Var(v) => b[v.as_str()].clone(),
                        })
                        .collect();
                    !source.contains(&probe)
                });
            }
        }
        bindings.into_iter().collect()
    }

    /// Runs the staged fixpoint over whatever changed since the last run.
    pub fn run_fixpoint(&mut self) -> FixpointRun {
        let mut seeds = self.changed.clone();
        seeds.extend(self.rule_change_heads.iter().cloned());
        if seeds.is_empty() {
            return FixpointRun {
                mode: FixpointMode::Idle,
                invalidated: BTreeSet::new(),
                firings: 0,
                new_tuples: 0,
            };
        }
        let invalidated = invalidate(&self.graph, &seeds);

        let negation_hit = self.rules.values().any(|c| {
            c.rule
                .body
                .iter()
                .any(|l| !l.positive && invalidated.contains(&literal_key(l)))
        });
        let full = self.saw_removal || self.rules_changed || negation_hit;

        let mut firings = 0u64;
        let mut new_tuples = 0u64;
        if full {
            self.run_full(&invalidated, &mut firings, &mut new_tuples);
        } else {
            self.run_incremental(&mut firings, &mut new_tuples);
        }

        self.changed.clear();
        self.added.clear();
        self.saw_removal = false;
        self.rules_changed = false;
        self.rule_change_heads.clear();
        FixpointRun {
            mode: if full { FixpointMode::Full } else { FixpointMode::Incremental },
            invalidated,
            firings,
            new_tuples,
        }
    }

    fn scratch_rules_by_stratum(&self) -> BTreeMap<usize, Vec<RuleId>> {
        let mut out: BTreeMap<usize, Vec<RuleId>> = BTreeMap::new();
        for (id, compiled) in &self.rules {
            if compiled.rule.sink == HeadSink::Scratch {
                let s = self.strata.get(&compiled.rule.head).copied().unwrap_or(0);
                out.entry(s).or_default().push(id.clone());
            }
        }
        out
    }

    fn run_full(
        &mut self,
        invalidated: &BTreeSet<RelationKey>,
        firings: &mut u64,
        new_tuples: &mut u64,
    ) {
        // Bases are frozen for the whole run and untouched scratches keep
        // final cached contents; only scratch heads under recomputation are
        // unsafe to read through negation until their stratum completes.
        let mut unsaturated: BTreeSet<RelationKey> = self
            .rules
            .values()
            .filter(|c| c.rule.sink == HeadSink::Scratch && invalidated.contains(&c.rule.head))
            .map(|c| c.rule.head.clone())
            .collect();

        for key in invalidated {
            if let Some(s) = self.scratches.get_mut(key) {
                s.clear();
            }
        }

        for (_, rule_ids) in self.scratch_rules_by_stratum() {
            let recompute: Vec<RuleId> = rule_ids
                .iter()
                .filter(|id| invalidated.contains(&self.rules[*id].rule.head))
                .cloned()
                .collect();
            // Naive first round, then per-position delta rounds.
            let mut delta: BTreeMap<RelationKey, BTreeSet<Tuple>> = BTreeMap::new();
            for id in &recompute {
                let compiled = self.rules[id].clone();
                let derived = self.eval_rule(&compiled, None, &unsaturated, firings);
                let head = compiled.rule.head.clone();
                self.scratches.entry(head.clone()).or_default();
                for t in derived {
                    if self.scratches.get_mut(&head).expect("just created").insert(t.clone()) {
                        *new_tuples += 1;
                        delta.entry(head.clone()).or_default().insert(t);
                    }
                }
            }
            while !delta.is_empty() {
                let mut next: BTreeMap<RelationKey, BTreeSet<Tuple>> = BTreeMap::new();
                for id in &recompute {
                    let compiled = self.rules[id].clone();
                    for (idx, lit) in compiled.rule.body.iter().enumerate() {
                        if !lit.positive {
                            continue;
                        }
                        let key = literal_key(lit);
                        let Some(dset) = delta.get(&key) else { continue };
                        let derived =
                            self.eval_rule(&compiled, Some((idx, dset)), &unsaturated, firings);
                        let head = compiled.rule.head.clone();
                        for t in derived {
                            if self
                                .scratches
                                .entry(head.clone())
                                .or_default()
                                .insert(t.clone())
                            {
                                *new_tuples += 1;
                                next.entry(head.clone()).or_default().insert(t);
                            }
                        }
                    }
                }
                delta = next;
            }
            // This stratum's recomputed relations are now final.
            for id in &recompute {
                unsaturated.remove(&self.rules[id].rule.head);
            }
        }

        // Buffered heads: refresh every buffer one of whose rules reads an
        // invalidated relation (or whose rule set changed); others keep
        // their previous derivation set.
        let mut refresh: BTreeSet<RelationKey> = BTreeSet::new();
        for compiled in self.rules.values() {
            if compiled.rule.sink != HeadSink::Buffer {
                continue;
            }
            let touched = self.rule_change_heads.contains(&compiled.rule.head)
                || compiled.rule.body.iter().any(|l| invalidated.contains(&literal_key(l)));
            if touched {
                refresh.insert(compiled.rule.head.clone());
            }
        }
        for key in &refresh {
            let mut fresh: BTreeSet<Tuple> = BTreeSet::new();
            let producers: Vec<RuleId> = self
                .rules
                .iter()
                .filter(|(_, c)| c.rule.sink == HeadSink::Buffer && &c.rule.head == key)
                .map(|(id, _)| id.clone())
                .collect();
            for id in producers {
                let compiled = self.rules[&id].clone();
                fresh.extend(self.eval_rule(&compiled, None, &unsaturated, firings));
            }
            let prev = self.buffers.insert(key.clone(), fresh);
            let now = &self.buffers[key];
            *new_tuples += now.difference(&prev.unwrap_or_default()).count() as u64;
        }
    }

    fn run_incremental(&mut self, firings: &mut u64, new_tuples: &mut u64) {
        // Negated relations are provably outside the invalidated set in
        // this mode, so everything reads as final.
        let unsaturated = BTreeSet::new();
        let mut accum: BTreeMap<RelationKey, BTreeSet<Tuple>> = self.added.clone();
        accum.retain(|_, v| !v.is_empty());

        for (_, rule_ids) in self.scratch_rules_by_stratum() {
            let mut frontier = accum.clone();
            loop {
                let mut next: BTreeMap<RelationKey, BTreeSet<Tuple>> = BTreeMap::new();
                for id in &rule_ids {
                    let compiled = self.rules[id].clone();
                    for (idx, lit) in compiled.rule.body.iter().enumerate() {
                        if !lit.positive {
                            continue;
                        }
                        let key = literal_key(lit);
                        let Some(dset) = frontier.get(&key) else { continue };
                        let derived =
                            self.eval_rule(&compiled, Some((idx, dset)), &unsaturated, firings);
                        let head = compiled.rule.head.clone();
                        for t in derived {
                            if self
                                .scratches
                                .entry(head.clone())
                                .or_default()
                                .insert(t.clone())
                            {
                                *new_tuples += 1;
                                next.entry(head.clone()).or_default().insert(t);
                            }
                        }
                    }
                }
                if next.is_empty() {
                    break;
                }
                for (k, v) in &next {
                    accum.entry(k.clone()).or_default().extend(v.iter().cloned());
                }
                frontier = next;
            }
        }

        for (id, compiled) in self.rules.clone() {
            if compiled.rule.sink != HeadSink::Buffer {
                continue;
            }
            let _ = id;
            for (idx, lit) in compiled.rule.body.iter().enumerate() {
                if !lit.positive {
                    continue;
                }
                let key = literal_key(lit);
                let Some(dset) = accum.get(&key) else { continue };
                let derived = self.eval_rule(&compiled, Some((idx, dset)), &unsaturated, firings);
                let buf = self.buffers.entry(compiled.rule.head.clone()).or_default();
                for t in derived {
                    if buf.insert(t) {
                        *new_tuples += 1;
                    }
                }
            }
        }
    }
}

/// Extends `binding` by matching `args` against a tuple, or fails.
fn match_tuple(args: &[Term], tuple: &Tuple, binding: &Bindings) -> Option<Bindings> {
    if args.len() != tuple.len() {
        return None;
    }
    let mut out = binding.clone();
    for (term, value) in args.iter().zip(tuple) {
        match term {
            Term::Const(c) => {
                if c != value {
                    return None;
                }
            }
            Term::Var(v) => match out.get(v.as_str()) {
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
