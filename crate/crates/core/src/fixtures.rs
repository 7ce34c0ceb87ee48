//! Bundled quorum tables, scenarios, and their golden expectations.
//!
//! Everything here is embedded at compile time so replays work without
//! any files on disk. The quorum registry carries the two n=13 tables
//! (the voting-figure system and the ring-trace system differ) plus the
//! smaller ring tables; the scenario registry carries the scripted
//! executions and checks each one against the published end states:
//! entry order, critical-section ticks, full per-node state tables,
//! wait-for cycles, and message totals.

use std::collections::BTreeMap;

use crate::protocol::{NodeSnapshot, Stat};
use crate::quorum::{ProcessId, QuorumError, QuorumSystem};
use crate::simnet::{self, Outcome, Scenario, SimError, SimReport, DEFAULT_STEP_LIMIT};

/// One embedded quorum table.
#[derive(Clone, Copy, Debug)]
pub struct QuorumFixture {
    pub id: &'static str,
    pub file_name: &'static str,
    pub json: &'static str,
}

/// All embedded quorum tables.
pub const QUORUM_FIXTURES: [QuorumFixture; 4] = [
    QuorumFixture {
        id: "quorums_s2_n13",
        file_name: "quorums_s2.json",
        json: include_str!("../../../fixtures/quorums_s2.json"),
    },
    QuorumFixture {
        id: "quorums_s3_n13",
        file_name: "quorums_s3.json",
        json: include_str!("../../../fixtures/quorums_s3.json"),
    },
    QuorumFixture {
        id: "quorums_s3_n7",
        file_name: "quorums_s3_n7.json",
        json: include_str!("../../../fixtures/quorums_s3_n7.json"),
    },
    QuorumFixture {
        id: "quorums_s3_n3",
        file_name: "quorums_s3_n3.json",
        json: include_str!("../../../fixtures/quorums_s3_n3.json"),
    },
];

/// Loads an embedded quorum table by registry id.
pub fn quorum_fixture(id: &str) -> Result<QuorumSystem, QuorumError> {
    let Some(fixture) = QUORUM_FIXTURES.iter().find(|f| f.id == id) else {
        return Err(QuorumError::UnknownFixture(id.to_string()));
    };
    QuorumSystem::from_json_str(fixture.json)
}

/// One embedded scripted scenario.
#[derive(Clone, Copy, Debug)]
pub struct ScenarioFixture {
    pub id: &'static str,
    pub json: &'static str,
}

/// All embedded scenarios, under their replay command names.
pub const SCENARIO_FIXTURES: [ScenarioFixture; 4] = [
    ScenarioFixture {
        id: "section3b",
        json: include_str!("../../../fixtures/scenarios/section3b.json"),
    },
    ScenarioFixture {
        id: "fig4-basic",
        json: include_str!("../../../fixtures/scenarios/fig4_basic.json"),
    },
    ScenarioFixture {
        id: "fig4-full",
        json: include_str!("../../../fixtures/scenarios/fig4_full.json"),
    },
    ScenarioFixture {
        id: "single-request",
        json: include_str!("../../../fixtures/scenarios/single_request.json"),
    },
];

/// The replayable scenario names, in registry order.
pub fn scenario_ids() -> [&'static str; 4] {
    [
        SCENARIO_FIXTURES[0].id,
        SCENARIO_FIXTURES[1].id,
        SCENARIO_FIXTURES[2].id,
        SCENARIO_FIXTURES[3].id,
    ]
}

/// Loads an embedded scenario and resolves its quorum table from the
/// embedded registry (by file name, since nothing is on disk).
pub fn scenario_fixture(id: &str) -> Result<(Scenario, QuorumSystem), SimError> {
    let Some(fixture) = SCENARIO_FIXTURES.iter().find(|f| f.id == id) else {
        return Err(SimError::InvalidScenario(format!(
            "unknown scenario {id:?}; known: {:?}",
            scenario_ids()
        )));
    };
    let scenario: Scenario = serde_json::from_str(fixture.json)?;
    let file_name = scenario
        .quorum_file
        .rsplit('/')
        .next()
        .unwrap_or(&scenario.quorum_file);
    let Some(quorums) = QUORUM_FIXTURES.iter().find(|f| f.file_name == file_name) else {
        return Err(SimError::InvalidScenario(format!(
            "scenario {id:?} names quorum file {:?}, which is not bundled",
            scenario.quorum_file
        )));
    };
    let qs = QuorumSystem::from_json_str(quorums.json)?;
    Ok((scenario, qs))
}

fn snap(stat: Stat, queue: &[u32], blocked: bool) -> NodeSnapshot {
    NodeSnapshot {
        stat,
        queue: queue.iter().map(|&q| ProcessId(q)).collect(),
        blocked,
    }
}

fn world(entries: &[(u32, NodeSnapshot)]) -> BTreeMap<ProcessId, NodeSnapshot> {
    entries
        .iter()
        .map(|(id, snapshot)| (ProcessId(*id), snapshot.clone()))
        .collect()
}

/// Published state table the moment the first requester enters the
/// critical section in the scripted three-way ring contention.
pub fn ring_trace_after_first_entry() -> BTreeMap<ProcessId, NodeSnapshot> {
    world(&[
        (1, snap(Stat::Passive, &[13], true)),
        (2, snap(Stat::Ready, &[2, 9, 13], true)),
        (3, snap(Stat::Passive, &[2], true)),
        (4, snap(Stat::Passive, &[], false)),
        (5, snap(Stat::Passive, &[], false)),
        (6, snap(Stat::Passive, &[], false)),
        (7, snap(Stat::Passive, &[2], true)),
        (8, snap(Stat::Passive, &[], false)),
        (9, snap(Stat::Wait, &[], false)),
        (10, snap(Stat::Passive, &[], false)),
        (11, snap(Stat::Passive, &[2], true)),
        (12, snap(Stat::Passive, &[], false)),
        (13, snap(Stat::Wait, &[], false)),
    ])
}

/// Published state table the moment the last requester enters the
/// critical section in the same execution.
pub fn ring_trace_after_final_entry() -> BTreeMap<ProcessId, NodeSnapshot> {
    world(&[
        (1, snap(Stat::Passive, &[13], true)),
        (2, snap(Stat::Passive, &[13], true)),
        (3, snap(Stat::Passive, &[], false)),
        (4, snap(Stat::Passive, &[], false)),
        (5, snap(Stat::Passive, &[], false)),
        (6, snap(Stat::Passive, &[], false)),
        (7, snap(Stat::Passive, &[], false)),
        (8, snap(Stat::Passive, &[], false)),
        (9, snap(Stat::Passive, &[], false)),
        (10, snap(Stat::Passive, &[], false)),
        (11, snap(Stat::Passive, &[], false)),
        (12, snap(Stat::Passive, &[13], true)),
        (13, snap(Stat::Ready, &[13], true)),
    ])
}

/// Entry schedule of the scripted ring contention: (node, tick).
pub const RING_TRACE_ENTRIES: [(u32, u64); 3] = [(2, 9), (9, 16), (13, 22)];

/// The wait-for cycle the basic-mode voting script runs into.
pub const VOTE_DEADLOCK_CYCLE: [(u32, u32); 3] = [(2, 8), (9, 11), (13, 4)];

/// One named expectation checked by a replay.
#[derive(Clone, Debug)]
pub struct ReplayCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl ReplayCheck {
    fn pass(name: &'static str, detail: impl Into<String>) -> ReplayCheck {
        ReplayCheck {
            name,
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(name: &'static str, detail: impl Into<String>) -> ReplayCheck {
        ReplayCheck {
            name,
            passed: false,
            detail: detail.into(),
        }
    }

    fn expect<T: PartialEq + std::fmt::Debug>(
        name: &'static str,
        actual: T,
        expected: T,
    ) -> ReplayCheck {
        if actual == expected {
            ReplayCheck::pass(name, format!("{actual:?}"))
        } else {
            ReplayCheck::fail(name, format!("expected {expected:?}, got {actual:?}"))
        }
    }
}

/// A finished replay of a bundled scenario.
#[derive(Debug)]
pub struct PaperReplay {
    pub id: &'static str,
    pub report: SimReport,
    pub checks: Vec<ReplayCheck>,
}

impl PaperReplay {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs one bundled scenario and verifies it against its golden
/// expectations.
pub fn replay_paper(id: &str) -> Result<PaperReplay, SimError> {
    let canonical = SCENARIO_FIXTURES
        .iter()
        .find(|f| f.id == id)
        .map(|f| f.id)
        .ok_or_else(|| {
            SimError::InvalidScenario(format!(
                "unknown scenario {id:?}; known: {:?}",
                scenario_ids()
            ))
        })?;
    let (scenario, qs) = scenario_fixture(canonical)?;
    let report = simnet::run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT)?;
    let checks = match canonical {
        "section3b" => check_ring_trace(&report),
        "fig4-basic" => check_vote_deadlock(&report),
        "fig4-full" => check_vote_recovery(&report),
        "single-request" => check_single_request(&report, &qs),
        _ => unreachable!("registry ids are exhaustive"),
    };
    Ok(PaperReplay {
        id: canonical,
        report,
        checks,
    })
}

fn check_ring_trace(report: &SimReport) -> Vec<ReplayCheck> {
    let mut checks = vec![ReplayCheck::expect(
        "run ends quiescent",
        report.outcome.clone(),
        Outcome::Quiescent,
    )];
    let entries: Vec<(u32, u64)> = report
        .entry_snapshots
        .iter()
        .map(|s| (s.node.0, s.tick))
        .collect();
    checks.push(ReplayCheck::expect(
        "entry order and ticks",
        entries,
        RING_TRACE_ENTRIES.to_vec(),
    ));
    for (name, index, expected) in [
        (
            "state table at the first entry",
            0usize,
            ring_trace_after_first_entry(),
        ),
        (
            "state table at the final entry",
            2,
            ring_trace_after_final_entry(),
        ),
    ] {
        match report.entry_snapshots.get(index) {
            Some(entry) if entry.world == expected => {
                checks.push(ReplayCheck::pass(
                    name,
                    format!("all {} nodes match", expected.len()),
                ));
            }
            Some(entry) => {
                let diffs: Vec<String> = expected
                    .iter()
                    .filter(|(id, want)| entry.world.get(id) != Some(want))
                    .map(|(id, want)| {
                        format!(
                            "node {id}: expected {want:?}, got {:?}",
                            entry.world.get(id)
                        )
                    })
                    .collect();
                checks.push(ReplayCheck::fail(name, diffs.join("; ")));
            }
            None => checks.push(ReplayCheck::fail(name, "entry missing")),
        }
    }
    checks
}

fn check_vote_deadlock(report: &SimReport) -> Vec<ReplayCheck> {
    let mut checks = Vec::new();
    match &report.outcome {
        Outcome::QuiescenceWithWaiters { wait_for } => {
            checks.push(ReplayCheck::pass(
                "run ends in quiescence with waiters",
                format!("{} wait-for edges", wait_for.len()),
            ));
            let edges: Vec<(u32, u32)> = wait_for.iter().map(|&(w, h)| (w.0, h.0)).collect();
            checks.push(ReplayCheck::expect(
                "wait-for cycle",
                edges,
                VOTE_DEADLOCK_CYCLE.to_vec(),
            ));
        }
        other => {
            checks.push(ReplayCheck::fail(
                "run ends in quiescence with waiters",
                format!("got {other:?}"),
            ));
        }
    }
    checks.push(ReplayCheck::expect(
        "no one entered the critical section",
        report.entry_snapshots.len(),
        0,
    ));
    checks
}

fn check_vote_recovery(report: &SimReport) -> Vec<ReplayCheck> {
    let entered: Vec<u32> = report.entry_snapshots.iter().map(|s| s.node.0).collect();
    vec![
        ReplayCheck::expect(
            "run ends quiescent",
            report.outcome.clone(),
            Outcome::Quiescent,
        ),
        ReplayCheck::expect(
            "all three enter, oldest stamp first",
            entered,
            vec![2, 9, 13],
        ),
    ]
}

fn check_single_request(report: &SimReport, qs: &QuorumSystem) -> Vec<ReplayCheck> {
    let expected_total = u64::from(2 * qs.k() - 1);
    let attributed = report
        .stats
        .per_request
        .first()
        .map(|row| row.messages_attributed);
    vec![
        ReplayCheck::expect(
            "run ends quiescent",
            report.outcome.clone(),
            Outcome::Quiescent,
        ),
        ReplayCheck::expect(
            "messages for one uncontended entry",
            attributed,
            Some(expected_total),
        ),
        ReplayCheck::expect(
            "request hops",
            report.stats.totals_by_kind.get("Req").copied(),
            Some(u64::from(qs.k())),
        ),
        ReplayCheck::expect(
            "release fan-out",
            report.stats.totals_by_kind.get("Rel").copied(),
            Some(u64::from(qs.k() - 1)),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_quorum_fixture_parses_and_validates() {
        for fixture in QUORUM_FIXTURES {
            let qs = quorum_fixture(fixture.id).unwrap();
            let report = qs.validate();
            assert!(report.all_pass(), "{}: {report}", fixture.id);
        }
        assert!(matches!(
            quorum_fixture("nonsense"),
            Err(QuorumError::UnknownFixture(_))
        ));
    }

    #[test]
    fn every_scenario_resolves_its_embedded_quorums() {
        for fixture in SCENARIO_FIXTURES {
            let (scenario, qs) = scenario_fixture(fixture.id).unwrap();
            assert!(qs.n() >= 3, "{}", fixture.id);
            for event in &scenario.events {
                assert!(qs.group(event.node).is_ok(), "{}", fixture.id);
            }
        }
        assert!(scenario_fixture("nope").is_err());
    }

    #[test]
    fn all_bundled_replays_pass_their_checks() {
        for id in scenario_ids() {
            let replay = replay_paper(id).unwrap();
            for check in &replay.checks {
                assert!(
                    check.passed,
                    "{id}: {} failed: {}",
                    check.name, check.detail
                );
            }
        }
    }

    #[test]
    fn unknown_replay_ids_are_rejected() {
        assert!(matches!(
            replay_paper("section9z"),
            Err(SimError::InvalidScenario(_))
        ));
    }
}
