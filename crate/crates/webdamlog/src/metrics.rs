//! Timing reports. Each stage is split into seven steps: 1a (inbound facts
//! to tables), 1b (inbound rule installs/removals), 2a (fixpoint), 2b
//! (name-variable instantiation), 2c (channel diffing), 3a (local updates
//! and sends), 3b (delegation shipping). The `a` steps are generic
//! evaluation work; `b` steps and 2c exist only because rules move between
//! peers, so their share measures delegation overhead.
//!
//! The CSV reports the deterministic virtual cost by default — identical
//! across runs with the same seed and script — or measured wall-clock
//! microseconds when asked.

use std::fmt::Write as _;

use crate::peer::{StageReport, STEP_LABELS};

/// Offsets into `STEP_LABELS` for work any datalog engine would do.
pub const GENERIC_STEPS: [usize; 3] = [0, 2, 5];
/// Offsets for work specific to rule shipping and remote maintenance.
pub const DELEGATION_STEPS: [usize; 4] = [1, 3, 4, 6];

/// Renders `peer,stage,step,micros,msgs_out,rules_installed` rows.
/// Per-stage counters appear on the step that does the work — sends on 3a,
/// installs on 1b — so column sums equal stage sums.
pub fn render_csv(reports: &[(String, StageReport)], wall: bool) -> String {
    let mut out = String::from("peer,stage,step,micros,msgs_out,rules_installed\n");
    for (peer, r) in reports {
        for (i, label) in STEP_LABELS.iter().enumerate() {
            let micros = if wall { r.steps.wall_micros[i] } else { r.steps.virt[i] };
            let msgs = if *label == "3a" { r.msgs_out } else { 0 };
            let installed = if *label == "1b" { r.rules_installed } else { 0 };
            let _ = writeln!(out, "{peer},{},{label},{micros},{msgs},{installed}", r.stage);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerBreakdown {
    pub peer: String,
    pub step_totals: [u64; 7],
}

impl PeerBreakdown {
    pub fn total(&self) -> u64 {
        self.step_totals.iter().sum()
    }

    pub fn generic_total(&self) -> u64 {
        GENERIC_STEPS.iter().map(|&i| self.step_totals[i]).sum()
    }

    pub fn delegation_total(&self) -> u64 {
        DELEGATION_STEPS.iter().map(|&i| self.step_totals[i]).sum()
    }

    pub fn percent(&self, step: usize) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            100.0 * self.step_totals[step] as f64 / total as f64
        }
    }
}

/// Per-peer step totals over a run, in peer-name order.
pub fn breakdown(reports: &[(String, StageReport)], wall: bool) -> Vec<PeerBreakdown> {
    let mut by_peer: std::collections::BTreeMap<String, [u64; 7]> =
        std::collections::BTreeMap::new();
    for (peer, r) in reports {
        let slot = by_peer.entry(peer.clone()).or_default();
        for (i, s) in slot.iter_mut().enumerate() {
            *s += if wall { r.steps.wall_micros[i] } else { r.steps.virt[i] };
        }
    }
    by_peer
        .into_iter()
        .map(|(peer, step_totals)| PeerBreakdown { peer, step_totals })
        .collect()
}

/// Human-readable share-of-time table, one row per peer.
pub fn render_percentages(rows: &[PeerBreakdown]) -> String {
    let mut out = String::from("peer       ");
    for label in STEP_LABELS {
        let _ = write!(out, "{label:>7}");
    }
    out.push_str("  delegation%\n");
    for row in rows {
        let _ = write!(out, "{:<11}", row.peer);
        for i in 0..7 {
            let _ = write!(out, "{:>6.1}%", row.percent(i));
        }
        let total = row.total();
        let share = if total == 0 {
            0.0
        } else {
            100.0 * row.delegation_total() as f64 / total as f64
        };
        let _ = writeln!(out, "{share:>12.1}%");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peer::StepTimes;

    fn report(stage: u64, virt: [u64; 7], msgs_out: u64, installed: u64) -> StageReport {
        StageReport {
            stage,
            steps: StepTimes { virt, wall_micros: [1; 7] },
            msgs_out,
            rules_installed: installed,
            rules_removed: 0,
            changed: true,
            fixpoint: None,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn csv_attributes_counters_to_their_steps() {
        let reports =
            vec![("alice".to_string(), report(1, [10, 20, 30, 40, 50, 60, 70], 3, 2))];
        let csv = render_csv(&reports, false);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "peer,stage,step,micros,msgs_out,rules_installed");
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[1], "alice,1,1a,10,0,0");
        assert_eq!(lines[2], "alice,1,1b,20,0,2");
        assert_eq!(lines[6], "alice,1,3a,60,3,0");
        assert_eq!(lines[7], "alice,1,3b,70,0,0");
        // Column sums equal the stage totals.
        let msgs: u64 = lines[1..].iter().map(|l| l.split(',').nth(4).unwrap().parse::<u64>().unwrap()).sum();
        assert_eq!(msgs, 3);
    }

    #[test]
    fn breakdown_sums_stages_and_splits_generic_from_delegation() {
        let reports = vec![
            ("a".to_string(), report(1, [1, 2, 3, 4, 5, 6, 7], 0, 0)),
            ("a".to_string(), report(2, [1, 2, 3, 4, 5, 6, 7], 0, 0)),
            ("b".to_string(), report(1, [7; 7], 0, 0)),
        ];
        let rows = breakdown(&reports, false);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].peer, "a");
        assert_eq!(rows[0].step_totals, [2, 4, 6, 8, 10, 12, 14]);
        assert_eq!(rows[0].generic_total(), 2 + 6 + 12);
        assert_eq!(rows[0].delegation_total(), 4 + 8 + 10 + 14);
        assert_eq!(rows[0].total(), rows[0].generic_total() + rows[0].delegation_total());
        let pct_sum: f64 = (0..7).map(|i| rows[0].percent(i)).sum();
        assert!((pct_sum - 100.0).abs() < 1e-9);
    }

    #[test]
    fn empty_reports_render_header_only() {
        assert_eq!(render_csv(&[], false), "peer,stage,step,micros,msgs_out,rules_installed\n");
        assert!(breakdown(&[], false).is_empty());
    }
}
