//! Scenario scripts: line-oriented `.wds` files that declare peers, feed
//! them programs and facts, drive execution, and assert on results.
//!
//! ```text
//! # comment (blank lines are fine too)
//! peer alice sim                 # or: peer alice 127.0.0.1:7001
//! load alice alice.wdl           # path relative to the scenario file
//! insert src@alice(1, "x")      # routed to the fact's home peer
//! delete src@alice(1, "x")
//! run 3                          # three global rounds
//! quiesce 1000                   # run until quiescent, budget 1000 rounds
//! expect out@bob count 2
//! expect out@bob facts out@bob(1); out@bob(2)
//! metrics run.csv                # dump metrics CSV (path relative to cwd)
//! ```
//!
//! The same script runs on the simulator (addresses ignored) or on socket
//! daemons (`sim` means "pick a free local port"). `expect` failures abort
//! the run with a nonzero-exit error.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ast::{Fact, Tuple};
use crate::parser::{parse_fact, render_fact, ParseError};
use crate::peer::{HostError, StageReport};
use crate::schema::RelationKey;
use crate::sim::{SimError, SimSystem};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeerAddress {
    Sim,
    Socket(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Directive {
    Peer { name: String, address: PeerAddress },
    Load { peer: String, path: PathBuf },
    Insert { fact: Fact },
    Delete { fact: Fact },
    Run { rounds: usize },
    Quiesce { budget: usize },
    ExpectCount { key: RelationKey, count: usize },
    ExpectFacts { key: RelationKey, facts: BTreeSet<Tuple> },
    Metrics { path: PathBuf },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub directives: Vec<Directive>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Host(#[from] HostError),
    #[error("{0}")]
    Sim(#[from] SimError),
    #[error("expectation failed: {0}")]
    Expect(String),
    #[error("{0}")]
    System(String),
}

fn fail(file: &str, line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse { file: file.to_string(), line, message: message.into() }
}

/// Cuts a trailing `#` comment, ignoring `#` inside quoted strings
/// (which support `\"` and `\\` escapes, like the fact syntax).
fn strip_comment(raw: &str) -> &str {
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in raw.char_indices() {
        if escaped {
            escaped = false;
            continue;
        }
        match c {
            '\\' if in_str => escaped = true,
            '"' => in_str = !in_str,
            '#' if !in_str => return &raw[..i],
            _ => {}
        }
    }
    raw
}

fn fact_on(file: &str, line: usize, text: &str) -> Result<Fact, ScenarioError> {
    parse_fact(text).map_err(|e: ParseError| fail(file, line, e.to_string()))
}

fn relation_key(file: &str, line: usize, text: &str) -> Result<RelationKey, ScenarioError> {
    match text.split_once('@') {
        Some((rel, peer)) if !rel.is_empty() && !peer.is_empty() => {
            Ok(RelationKey::new(rel, peer))
        }
        _ => Err(fail(file, line, format!("expected relation@peer, got `{text}`"))),
    }
}

/// Parses scenario text. `file` is used in diagnostics and to resolve
/// `load` paths (relative to its parent directory).
pub fn parse_scenario(text: &str, file: &Path) -> Result<Scenario, ScenarioError> {
    let fname = file.display().to_string();
    let base = file.parent().unwrap_or(Path::new("."));
    let mut directives = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = strip_comment(raw).trim();
        if stripped.is_empty() {
            continue;
        }
        let (word, rest) = match stripped.split_once(char::is_whitespace) {
            Some((w, r)) => (w, r.trim()),
            None => (stripped, ""),
        };
        let directive = match word {
            "peer" => {
                let mut parts = rest.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| fail(&fname, line, "peer needs a name"))?
                    .to_string();
                let address = match parts.next() {
                    None | Some("sim") => PeerAddress::Sim,
                    Some(addr) => PeerAddress::Socket(addr.to_string()),
                };
                if parts.next().is_some() {
                    return Err(fail(&fname, line, "peer takes: name [address|sim]"));
                }
                Directive::Peer { name, address }
            }
            "load" => {
                let (peer, path) = rest
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| fail(&fname, line, "load takes: peer path"))?;
                Directive::Load { peer: peer.to_string(), path: base.join(path.trim()) }
            }
            "insert" => Directive::Insert { fact: fact_on(&fname, line, rest)? },
            "delete" => Directive::Delete { fact: fact_on(&fname, line, rest)? },
            "run" => {
                let rounds = rest
                    .parse()
                    .map_err(|_| fail(&fname, line, format!("bad round count `{rest}`")))?;
                Directive::Run { rounds }
            }
            "quiesce" => {
                let budget = if rest.is_empty() {
                    1000
                } else {
                    rest.parse()
                        .map_err(|_| fail(&fname, line, format!("bad budget `{rest}`")))?
                };
                Directive::Quiesce { budget }
            }
            "expect" => {
                let (rel, rest) = rest
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| fail(&fname, line, "expect takes: relation@peer count N | facts f; ..."))?;
                let key = relation_key(&fname, line, rel)?;
                let rest = rest.trim();
                if let Some(n) = rest.strip_prefix("count") {
                    let count = n
                        .trim()
                        .parse()
                        .map_err(|_| fail(&fname, line, format!("bad count `{}`", n.trim())))?;
                    Directive::ExpectCount { key, count }
                } else if let Some(list) = rest.strip_prefix("facts") {
                    let mut facts = BTreeSet::new();
                    for part in list.split(';') {
                        let part = part.trim();
                        if part.is_empty() {
                            continue;
                        }
                        let fact = fact_on(&fname, line, part)?;
                        if fact.key() != key {
                            return Err(fail(
                                &fname,
                                line,
                                format!("fact `{part}` does not belong to {key}"),
                            ));
                        }
                        facts.insert(fact.tuple);
                    }
                    Directive::ExpectFacts { key, facts }
                } else {
                    return Err(fail(&fname, line, "expect needs `count N` or `facts ...`"));
                }
            }
            "metrics" => {
                if rest.is_empty() {
                    return Err(fail(&fname, line, "metrics takes a path"));
                }
                Directive::Metrics { path: PathBuf::from(rest) }
            }
            other => return Err(fail(&fname, line, format!("unknown directive `{other}`"))),
        };
        directives.push(directive);
    }
    Ok(Scenario { directives })
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
    parse_scenario(&text, path)
}

/// What a scenario needs from its execution substrate. Implemented by the
/// simulator here and by the socket-daemon orchestrator.
pub trait System {
    fn add_peer(&mut self, name: &str, address: &PeerAddress) -> Result<(), ScenarioError>;
    fn load(&mut self, peer: &str, text: &str) -> Result<(), ScenarioError>;
    fn insert(&mut self, fact: &Fact) -> Result<(), ScenarioError>;
    fn delete(&mut self, fact: &Fact) -> Result<(), ScenarioError>;
    fn run_rounds(&mut self, rounds: usize) -> Result<(), ScenarioError>;
    fn quiesce(&mut self, budget: usize) -> Result<(), ScenarioError>;
    fn read(&mut self, key: &RelationKey) -> Result<BTreeSet<Tuple>, ScenarioError>;
    fn reports(&mut self) -> Vec<(String, StageReport)>;
}

impl System for SimSystem {
    fn add_peer(&mut self, name: &str, _address: &PeerAddress) -> Result<(), ScenarioError> {
        SimSystem::add_peer(self, name);
        Ok(())
    }

    fn load(&mut self, peer: &str, text: &str) -> Result<(), ScenarioError> {
        self.peer_mut(peer)?.load_program(text)?;
        Ok(())
    }

    fn insert(&mut self, fact: &Fact) -> Result<(), ScenarioError> {
        self.peer_mut(&fact.peer)?.insert_fact(fact)?;
        Ok(())
    }

    fn delete(&mut self, fact: &Fact) -> Result<(), ScenarioError> {
        self.peer_mut(&fact.peer)?.delete_fact(fact)?;
        Ok(())
    }

    fn run_rounds(&mut self, rounds: usize) -> Result<(), ScenarioError> {
        for _ in 0..rounds {
            self.run_round()?;
        }
        Ok(())
    }

    fn quiesce(&mut self, budget: usize) -> Result<(), ScenarioError> {
        self.run_until_quiescent(budget)?;
        Ok(())
    }

    fn read(&mut self, key: &RelationKey) -> Result<BTreeSet<Tuple>, ScenarioError> {
        Ok(self.peer(&key.peer)?.peek(key))
    }

    fn reports(&mut self) -> Vec<(String, StageReport)> {
        SimSystem::reports(self).to_vec()
    }
}

/// Summary of a completed run.
#[derive(Debug, Default)]
pub struct RunOutcome {
    pub expectations: usize,
    pub metrics_written: Vec<PathBuf>,
}

fn diff_message(key: &RelationKey, got: &BTreeSet<Tuple>, want: &BTreeSet<Tuple>) -> String {
    let show = |set: &BTreeSet<Tuple>| {
        let rows: Vec<String> = set
            .iter()
            .take(6)
            .map(|t| render_fact(&Fact::new(&key.relation, &key.peer, t.clone())))
            .collect();
        let mut s = rows.join(", ");
        if set.len() > 6 {
            s.push_str(", …");
        }
        if s.is_empty() {
            s.push_str("(none)");
        }
        s
    };
    let missing: BTreeSet<Tuple> = want.difference(got).cloned().collect();
    let extra: BTreeSet<Tuple> = got.difference(want).cloned().collect();
    format!(
        "{key}: missing {} {{{}}}, unexpected {} {{{}}}",
        missing.len(),
        show(&missing),
        extra.len(),
        show(&extra)
    )
}

/// Runs every directive in order; stops at the first failure.
pub fn run_scenario(
    scenario: &Scenario,
    system: &mut dyn System,
) -> Result<RunOutcome, ScenarioError> {
    let mut outcome = RunOutcome::default();
    for directive in &scenario.directives {
        match directive {
            Directive::Peer { name, address } => system.add_peer(name, address)?,
            Directive::Load { peer, path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|source| ScenarioError::Io { path: path.clone(), source })?;
                system.load(peer, &text).map_err(|e| {
                    ScenarioError::System(format!("loading {} into {peer}: {e}", path.display()))
                })?;
            }
            Directive::Insert { fact } => system.insert(fact)?,
            Directive::Delete { fact } => system.delete(fact)?,
            Directive::Run { rounds } => system.run_rounds(*rounds)?,
            Directive::Quiesce { budget } => system.quiesce(*budget)?,
            Directive::ExpectCount { key, count } => {
                let got = system.read(key)?;
                if got.len() != *count {
                    return Err(ScenarioError::Expect(format!(
                        "{key}: expected {count} facts, found {}",
                        got.len()
                    )));
                }
                outcome.expectations += 1;
            }
            Directive::ExpectFacts { key, facts } => {
                let got = system.read(key)?;
                if got != *facts {
                    return Err(ScenarioError::Expect(diff_message(key, &got, facts)));
                }
                outcome.expectations += 1;
            }
            Directive::Metrics { path } => {
                let csv = crate::metrics::render_csv(&system.reports(), false);
                std::fs::write(path, csv)
                    .map_err(|source| ScenarioError::Io { path: path.clone(), source })?;
                outcome.metrics_written.push(path.clone());
            }
        }
    }
    Ok(outcome)
}
