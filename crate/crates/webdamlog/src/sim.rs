//! Whole-system simulation: several peers wired through a [`SimNet`].
//!
//! A round stages every peer that has work (in name order), posts their
//! outboxes to the network, then runs one delivery tick. The system is
//! quiescent when no peer has pending work and nothing is in flight.
//! Runs are deterministic: same seed, policy, and host-call script give
//! the same stage reports and delivery trace.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::ast::Tuple;
use crate::peer::{Peer, StageError, StageReport};
use crate::schema::RelationKey;
use crate::transport::{SimNet, SimNetConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown peer {0}")]
    UnknownPeer(String),
    #[error("stage failed at {peer}: {error}")]
    Stage { peer: String, error: StageError },
    #[error("system did not quiesce within {budget} rounds")]
    Budget { budget: usize },
}

pub struct SimSystem {
    peers: BTreeMap<String, Peer>,
    net: SimNet,
    /// Every stage report, in execution order, tagged with the peer name.
    reports: Vec<(String, StageReport)>,
    warnings: Vec<String>,
}

impl SimSystem {
    pub fn new(config: SimNetConfig) -> Self {
        SimSystem {
            peers: BTreeMap::new(),
            net: SimNet::new(config),
            reports: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Creates a peer; a second call with the same name is a no-op.
    pub fn add_peer(&mut self, name: &str) -> &mut Peer {
        self.peers.entry(name.to_string()).or_insert_with(|| Peer::new(name))
    }

    pub fn peer(&self, name: &str) -> Result<&Peer, SimError> {
        self.peers.get(name).ok_or_else(|| SimError::UnknownPeer(name.to_string()))
    }

    pub fn peer_mut(&mut self, name: &str) -> Result<&mut Peer, SimError> {
        self.peers.get_mut(name).ok_or_else(|| SimError::UnknownPeer(name.to_string()))
    }

    pub fn peer_names(&self) -> Vec<String> {
        self.peers.keys().cloned().collect()
    }

    pub fn net(&self) -> &SimNet {
        &self.net
    }

    pub fn reports(&self) -> &[(String, StageReport)] {
        &self.reports
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn quiescent(&self) -> bool {
        self.net.pending() == 0 && self.peers.values().all(|p| !p.needs_stage())
    }

    /// One global round. Returns whether any peer staged, any message was
    /// delivered, or messages are still in flight.
    pub fn run_round(&mut self) -> Result<bool, SimError> {
        let mut active = false;
        let names: Vec<String> = self.peers.keys().cloned().collect();
        for name in &names {
            let peer = self.peers.get_mut(name).expect("known peer");
            if !peer.needs_stage() {
                continue;
            }
            active = true;
            let report = peer
                .run_stage()
                .map_err(|error| SimError::Stage { peer: name.clone(), error })?;
            self.warnings.extend(report.warnings.iter().map(|w| format!("{name}: {w}")));
            for msg in peer.take_outbox() {
                self.net.send(msg);
            }
            self.reports.push((name.clone(), report));
        }
        if self.net.pending() > 0 {
            active = true;
        }
        for msg in self.net.deliver_step() {
            match self.peers.get_mut(&msg.target) {
                Some(p) => p.enqueue(msg),
                None => self
                    .warnings
                    .push(format!("dropped message to unknown peer {}", msg.target)),
            }
        }
        Ok(active)
    }

    /// Rounds until quiescence, failing if `budget` rounds don't get there.
    /// Returns the number of rounds run.
    pub fn run_until_quiescent(&mut self, budget: usize) -> Result<usize, SimError> {
        for round in 0..budget {
            if self.quiescent() {
                return Ok(round);
            }
            self.run_round()?;
        }
        if self.quiescent() {
            Ok(budget)
        } else {
            Err(SimError::Budget { budget })
        }
    }

    /// Quiesces, then reads a relation at its owner.
    pub fn query(
        &mut self,
        key: &RelationKey,
        budget: usize,
    ) -> Result<BTreeSet<Tuple>, SimError> {
        self.run_until_quiescent(budget)?;
        Ok(self.peer(&key.peer)?.peek(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::Value;
    use crate::transport::DeliveryPolicy;

    fn key(rel: &str, peer: &str) -> RelationKey {
        RelationKey::new(rel, peer)
    }

    fn row(vals: &[i64]) -> Tuple {
        vals.iter().map(|v| Value::Int(*v)).collect()
    }

    fn two_peer_system(config: SimNetConfig) -> SimSystem {
        let mut sys = SimSystem::new(config);
        sys.add_peer("a")
            .load_program("ext src@a/1\nsrc@a(1)\nsrc@a(2)\nout@b($x) :- src@a($x)\n")
            .unwrap();
        sys.add_peer("b").load_program("ext out@b/1\n").unwrap();
        sys
    }

    #[test]
    fn facts_flow_between_peers() {
        let mut sys = two_peer_system(SimNetConfig::default());
        let got = sys.query(&key("out", "b"), 64).unwrap();
        assert_eq!(got, BTreeSet::from([row(&[1]), row(&[2])]));
        assert!(sys.warnings().is_empty(), "{:?}", sys.warnings());
    }

    #[test]
    fn quiescence_means_no_further_activity() {
        let mut sys = two_peer_system(SimNetConfig::default());
        sys.run_until_quiescent(64).unwrap();
        let reports_before = sys.reports().len();
        assert!(!sys.run_round().unwrap());
        assert_eq!(sys.reports().len(), reports_before);
    }

    #[test]
    fn exhausted_budget_is_an_error() {
        let mut sys = two_peer_system(SimNetConfig::default());
        assert!(matches!(sys.run_until_quiescent(0), Err(SimError::Budget { budget: 0 })));
    }

    #[test]
    fn delivery_policies_agree_on_final_state() {
        let mut answers = Vec::new();
        for policy in [
            DeliveryPolicy::FifoPerLink,
            DeliveryPolicy::RandomOrder,
            DeliveryPolicy::AdversarialDelay,
        ] {
            let mut sys =
                two_peer_system(SimNetConfig { seed: 11, policy, max_delay_ticks: 3 });
            answers.push(sys.query(&key("out", "b"), 128).unwrap());
        }
        assert_eq!(answers[0], answers[1]);
        assert_eq!(answers[1], answers[2]);
    }

    #[test]
    fn same_seed_reproduces_reports_and_trace() {
        let run = |seed: u64| {
            let mut sys = two_peer_system(SimNetConfig {
                seed,
                policy: DeliveryPolicy::AdversarialDelay,
                max_delay_ticks: 3,
            });
            sys.run_until_quiescent(128).unwrap();
            let digest: Vec<_> = sys
                .reports()
                .iter()
                .map(|(name, r)| {
                    (name.clone(), r.stage, r.steps.virt, r.msgs_out, r.rules_installed)
                })
                .collect();
            (digest, sys.net().trace().to_vec())
        };
        assert_eq!(run(9), run(9));
    }
}
