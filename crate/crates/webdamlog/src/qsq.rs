//! Query-time shipping benchmark: answer a selective query over relations
//! owned by two other peers, either by materializing the full relations at
//! the querying peer and filtering locally, or by delegating the selection
//! so only matching rows travel.
//!
//! The fixture is `friendPhotos@alice` and `friendPhotos@bob`, `n` rows
//! each with disjoint photo ids, of which an exact `selectivity_pct`
//! fraction per peer is owned by `"charlie"`. The query asks for charlie's
//! photo ids at `sue`.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ast::{Fact, Value};
use crate::schema::RelationKey;
use crate::sim::{SimError, SimSystem};
use crate::transport::SimNetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QsqMode {
    Materialize,
    Delegate,
}

impl QsqMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "materialize" => Some(QsqMode::Materialize),
            "delegate" => Some(QsqMode::Delegate),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            QsqMode::Materialize => "materialize",
            QsqMode::Delegate => "delegate",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QsqConfig {
    /// Rows per source relation; `rows * selectivity` must divide by 100
    /// so match counts are exact.
    pub rows: usize,
    pub seed: u64,
}

impl Default for QsqConfig {
    fn default() -> Self {
        QsqConfig { rows: 1000, seed: 42 }
    }
}

#[derive(Debug, Clone)]
pub struct QsqResult {
    pub selectivity_pct: u32,
    pub mode: QsqMode,
    /// Data tuples that crossed the network during the query.
    pub tuples_transferred: u64,
    pub wall_micros: u64,
    /// Matching rows per the generator (= expected answer size).
    pub matches: u64,
    /// Rows actually in `answer@sue` at quiescence.
    pub answers: u64,
}

/// `rows` photos for one peer: ids from `first_id`, exactly
/// `rows * selectivity_pct / 100` of them owned by charlie, the rest by a
/// rotating cast. Which ids match is a seeded choice.
fn photos(rows: usize, selectivity_pct: u32, first_id: i64, seed: u64) -> Vec<(i64, String)> {
    let k = rows * selectivity_pct as usize / 100;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<usize> = (0..rows).collect();
    slots.shuffle(&mut rng);
    let charlie: BTreeSet<usize> = slots.into_iter().take(k).collect();
    let others = ["dana", "erik", "fatima", "omar"];
    (0..rows)
        .map(|i| {
            let owner = if charlie.contains(&i) {
                "charlie".to_string()
            } else {
                others[i % others.len()].to_string()
            };
            (first_id + i as i64, owner)
        })
        .collect()
}

pub fn run_qsq(
    config: &QsqConfig,
    selectivity_pct: u32,
    mode: QsqMode,
) -> Result<QsqResult, SimError> {
    assert!(selectivity_pct <= 100, "selectivity is a percentage");
    assert_eq!(
        config.rows * selectivity_pct as usize % 100,
        0,
        "rows x selectivity must give an exact match count"
    );
    let mut sys = SimSystem::new(SimNetConfig { seed: config.seed, ..Default::default() });
    for name in ["alice", "bob", "sue"] {
        sys.add_peer(name);
    }
    let mut matches = 0u64;
    for (peer, first_id, salt) in [("alice", 1, 1u64), ("bob", config.rows as i64 + 1, 2)] {
        for (id, owner) in photos(config.rows, selectivity_pct, first_id, config.seed ^ salt) {
            if owner == "charlie" {
                matches += 1;
            }
            let fact =
                Fact::new("friendPhotos", peer, vec![Value::Int(id), Value::Str(owner)]);
            sys.peer_mut(peer)?.insert_fact(&fact).expect("generated fact admits");
        }
    }
    // Base data settles locally; nothing should cross the network yet.
    sys.run_until_quiescent(64)?;
    let base_tuples = sys.net().stats().fact_tuples;

    let start = Instant::now();
    match mode {
        QsqMode::Materialize => {
            sys.peer_mut("alice")?
                .install_rule("all2@sue($id, $o) :- friendPhotos@alice($id, $o)")
                .expect("rule parses");
            sys.peer_mut("bob")?
                .install_rule("all2@sue($id, $o) :- friendPhotos@bob($id, $o)")
                .expect("rule parses");
            sys.peer_mut("sue")?
                .install_rule("answer@sue($id) :- all2@sue($id, \"charlie\")")
                .expect("rule parses");
        }
        QsqMode::Delegate => {
            sys.peer_mut("sue")?
                .install_rule("answer@sue($id) :- friendPhotos@alice($id, \"charlie\")")
                .expect("rule parses");
            sys.peer_mut("sue")?
                .install_rule("answer@sue($id) :- friendPhotos@bob($id, \"charlie\")")
                .expect("rule parses");
        }
    }
    sys.run_until_quiescent(256)?;
    let wall_micros = start.elapsed().as_micros() as u64;

    let answers = sys.peer("sue")?.peek(&RelationKey::new("answer", "sue")).len() as u64;
    Ok(QsqResult {
        selectivity_pct,
        mode,
        tuples_transferred: sys.net().stats().fact_tuples - base_tuples,
        wall_micros,
        matches,
        answers,
    })
}

pub fn render_qsq_csv(results: &[QsqResult]) -> String {
    let mut out = String::from("selectivity,mode,tuples_transferred,wall_micros\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.selectivity_pct,
            r.mode.label(),
            r.tuples_transferred,
            r.wall_micros
        );
    }
    out
}
