//! Bounded state-space explorer.
//!
//! Starting from a world where every configured requester has already
//! asked for the critical section, the explorer walks all reachable
//! states depth-first. A transition is either the delivery of one
//! channel's head message (channels in `(src, dst)` order) or a voluntary
//! release by a node currently inside the critical section; modelling the
//! release as an explicit transition is a deliberate deviation from a
//! delivery-only transition relation, because without it no contention
//! ever clears and every schedule would stall at the first entry.
//!
//! States are deduplicated by a SHA-256 digest of their canonical JSON
//! encoding (node states plus nonempty channel contents, both in key
//! order). A state reached again at a strictly smaller depth is expanded
//! again so the depth bound never hides a shallow path behind a deep
//! first visit.
//!
//! Mutual exclusion is checked at every state; the first violation aborts
//! the search with its path. Terminal states (no message in flight,
//! nobody inside the critical section) with a waiting node are deadlocks:
//! the first one found is recorded with its path and wait-for cycle, and
//! the search continues so the state count still describes the full
//! explored region. Counterexample paths serialize as `{src, dst}` pairs;
//! a release step uses `src == dst`, which cannot collide with a delivery
//! because nodes never route protocol messages to themselves over the
//! network.
//!
//! The search is sequential: a single DFS with a shared visited table is
//! deterministic by construction, which the replay machinery and the
//! state-count comparisons in the test suite rely on.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use thiserror::Error;

use crate::protocol::{
    self, Algo, Envelope, Event, Message, NodeSnapshot, NodeState, Nodes, ProtocolError, Stat,
};
use crate::quorum::{ProcessId, QuorumError, QuorumSystem};
use crate::simnet::{ScriptStep, SimError, SimWorld, TraceRecord};

/// In-flight messages per channel, without timing.
pub type Channels = BTreeMap<(ProcessId, ProcessId), VecDeque<Message>>;

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Quorum(#[from] QuorumError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid explore config: {0}")]
    InvalidConfig(String),
    #[error("replay diverged at step {step}: {reason}")]
    ReplayDivergence { step: usize, reason: String },
}

/// What to explore and how far.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreConfig {
    pub algo: Algo,
    pub requesters: Vec<ProcessId>,
    /// Longest path followed from the initial state.
    pub max_depth: u32,
    /// Cap on distinct states; reaching it truncates the frontier.
    pub max_states: u64,
}

impl ExploreConfig {
    pub fn new(algo: Algo, requesters: Vec<ProcessId>) -> ExploreConfig {
        ExploreConfig {
            algo,
            requesters,
            max_depth: 64,
            max_states: 200_000,
        }
    }
}

/// Mutual-exclusion half of a verdict.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SafetyVerdict {
    Ok,
    Violated { counterexample: Vec<ScriptStep> },
}

/// Deadlock half of a verdict.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DeadlockVerdict {
    NoneFound,
    Found {
        counterexample: Vec<ScriptStep>,
        /// One wait-for edge per process on the cycle, sorted by waiter.
        wait_for_cycle: Vec<(ProcessId, ProcessId)>,
    },
}

/// Result of a bounded exploration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub safety: SafetyVerdict,
    pub deadlock: DeadlockVerdict,
    pub states_visited: u64,
    pub frontier_truncated: bool,
}

/// Verdict plus the raw visited set (for cross-checking other engines).
#[derive(Clone, Debug)]
pub struct ExploreReport {
    pub verdict: Verdict,
    pub visited: BTreeSet<[u8; 32]>,
}

/// Digest of a world state, insensitive to anything but node states and
/// undelivered messages.
pub fn state_hash(nodes: &Nodes, channels: &Channels) -> [u8; 32] {
    let nodes_canon: Vec<(u32, &NodeState)> =
        nodes.iter().map(|(id, state)| (id.0, state)).collect();
    let channels_canon: Vec<(u32, u32, &VecDeque<Message>)> = channels
        .iter()
        .filter(|(_, queue)| !queue.is_empty())
        .map(|(&(src, dst), queue)| (src.0, dst.0, queue))
        .collect();
    let bytes = bincode::serialize(&(nodes_canon, channels_canon)).expect("states serialize");
    Sha256::digest(&bytes).into()
}

#[derive(Clone, Copy, Debug)]
enum Transition {
    Deliver(ProcessId, ProcessId),
    Release(ProcessId),
}

impl Transition {
    fn step(self) -> ScriptStep {
        match self {
            Transition::Deliver(src, dst) => ScriptStep { src, dst },
            Transition::Release(node) => ScriptStep {
                src: node,
                dst: node,
            },
        }
    }
}

fn transitions(nodes: &Nodes, channels: &Channels) -> Vec<Transition> {
    let mut out: Vec<Transition> = channels
        .iter()
        .filter(|(_, queue)| !queue.is_empty())
        .map(|(&(src, dst), _)| Transition::Deliver(src, dst))
        .collect();
    out.extend(
        nodes
            .values()
            .filter(|s| s.stat() == Stat::Ready)
            .map(|s| Transition::Release(s.id())),
    );
    out
}

fn route(channels: &mut Channels, sends: Vec<Envelope>) {
    for Envelope { src, dst, msg } in sends {
        channels.entry((src, dst)).or_default().push_back(msg);
    }
}

fn apply(
    nodes: &mut Nodes,
    channels: &mut Channels,
    qs: &QuorumSystem,
    transition: Transition,
) -> Result<(), ExploreError> {
    let event = match transition {
        Transition::Deliver(src, dst) => {
            let msg = channels
                .get_mut(&(src, dst))
                .and_then(VecDeque::pop_front)
                .expect("transition enumeration only offers nonempty channels");
            Event::Deliver { src, dst, msg }
        }
        Transition::Release(node) => Event::Release { node },
    };
    let sends = protocol::apply_event(nodes, qs, &event)?;
    route(channels, sends);
    Ok(())
}

fn ready_nodes(nodes: &Nodes) -> usize {
    nodes.values().filter(|s| s.stat() == Stat::Ready).count()
}

/// Wait-for edges of a terminal state, reduced to one cycle.
///
/// Each waiter's blocker is looked up through the node that actually
/// blocks it: for the voting protocols the pending requester waits at an
/// arbiter whose vote is locked for some holder, so the composed edge
/// goes requester to holder while the reported edge names the arbiter;
/// ring waiters wait directly on their queue head.
fn wait_cycle(nodes: &Nodes) -> Vec<(ProcessId, ProcessId)> {
    // waiter -> sorted (reported partner, blocking process)
    let mut edges: BTreeMap<ProcessId, Vec<(ProcessId, ProcessId)>> = BTreeMap::new();
    for state in nodes.values() {
        match state {
            NodeState::Ring(s) => {
                if let Some(&head) = s.queue.front() {
                    for &waiter in s.queue.iter().skip(1) {
                        edges.entry(waiter).or_default().push((head, head));
                    }
                }
            }
            NodeState::Maekawa(s) => {
                if let Some(lock) = &s.locked_for {
                    for &(_, waiter) in &s.pending {
                        edges.entry(waiter).or_default().push((s.id, lock.origin));
                    }
                }
            }
        }
    }
    for list in edges.values_mut() {
        list.sort();
        list.dedup();
    }
    // Follow first edges until a process repeats; that loop is the cycle.
    for &start in edges.keys().collect::<Vec<_>>() {
        let mut order: BTreeMap<ProcessId, usize> = BTreeMap::new();
        let mut walk: Vec<ProcessId> = Vec::new();
        let mut current = start;
        loop {
            if let Some(&first_seen) = order.get(&current) {
                let members: BTreeSet<ProcessId> = walk[first_seen..].iter().copied().collect();
                let mut cycle: Vec<(ProcessId, ProcessId)> = members
                    .iter()
                    .map(|&waiter| {
                        let &(via, _) = edges[&waiter]
                            .iter()
                            .find(|&&(_, blocker)| members.contains(&blocker))
                            .expect("cycle members block each other");
                        (waiter, via)
                    })
                    .collect();
                cycle.sort();
                return cycle;
            }
            order.insert(current, walk.len());
            walk.push(current);
            let Some(list) = edges.get(&current) else {
                break;
            };
            current = list[0].1;
        }
    }
    Vec::new()
}

struct Search<'a> {
    qs: &'a QuorumSystem,
    cfg: &'a ExploreConfig,
    visited: HashMap<[u8; 32], u32>,
    path: Vec<ScriptStep>,
    safety: Option<Vec<ScriptStep>>,
    deadlock: Option<(Vec<ScriptStep>, Vec<(ProcessId, ProcessId)>)>,
    truncated: bool,
    capped: bool,
}

impl Search<'_> {
    fn dfs(&mut self, nodes: &Nodes, channels: &Channels, depth: u32) -> Result<(), ExploreError> {
        let moves = transitions(nodes, channels);
        if moves.is_empty() {
            let stuck = nodes.values().any(|s| s.stat() == Stat::Wait);
            if stuck && self.deadlock.is_none() {
                self.deadlock = Some((self.path.clone(), wait_cycle(nodes)));
            }
            return Ok(());
        }
        if depth >= self.cfg.max_depth {
            self.truncated = true;
            return Ok(());
        }
        for transition in moves {
            let mut next_nodes = nodes.clone();
            let mut next_channels = channels.clone();
            apply(&mut next_nodes, &mut next_channels, self.qs, transition)?;
            self.path.push(transition.step());
            if ready_nodes(&next_nodes) > 1 {
                self.safety = Some(self.path.clone());
                self.path.pop();
                return Ok(());
            }
            let digest = state_hash(&next_nodes, &next_channels);
            let expand = match self.visited.get(&digest) {
                Some(&seen_at) if depth + 1 >= seen_at => false,
                Some(_) => {
                    self.visited.insert(digest, depth + 1);
                    true
                }
                None => {
                    if (self.visited.len() as u64) < self.cfg.max_states {
                        self.visited.insert(digest, depth + 1);
                        true
                    } else {
                        self.truncated = true;
                        self.capped = true;
                        false
                    }
                }
            };
            if expand {
                self.dfs(&next_nodes, &next_channels, depth + 1)?;
            }
            self.path.pop();
            if self.safety.is_some() || self.capped {
                return Ok(());
            }
        }
        Ok(())
    }
}

/// Explores every schedule of the configured contention, within bounds.
pub fn explore(qs: &QuorumSystem, cfg: &ExploreConfig) -> Result<ExploreReport, ExploreError> {
    let report = qs.validate();
    if !report.all_pass() {
        return Err(ExploreError::InvalidConfig(format!(
            "quorum system fails validation:\n{report}"
        )));
    }
    if cfg.requesters.is_empty() {
        return Err(ExploreError::InvalidConfig(
            "no requesters configured".to_string(),
        ));
    }
    let mut requesters = cfg.requesters.clone();
    requesters.sort();
    requesters.dedup();
    if requesters.len() != cfg.requesters.len() {
        return Err(ExploreError::InvalidConfig(
            "duplicate requesters".to_string(),
        ));
    }
    for &node in &requesters {
        qs.group(node)?;
    }

    let mut nodes = protocol::init_nodes(qs, cfg.algo)?;
    let mut channels = Channels::new();
    for &node in &requesters {
        let sends = protocol::apply_event(&mut nodes, qs, &Event::Request { node })?;
        route(&mut channels, sends);
    }

    let mut search = Search {
        qs,
        cfg,
        visited: HashMap::new(),
        path: Vec::new(),
        safety: None,
        deadlock: None,
        truncated: false,
        capped: false,
    };
    search.visited.insert(state_hash(&nodes, &channels), 0);
    if ready_nodes(&nodes) > 1 {
        search.safety = Some(Vec::new());
    } else {
        search.dfs(&nodes, &channels, 0)?;
    }

    let verdict = Verdict {
        safety: match search.safety {
            Some(counterexample) => SafetyVerdict::Violated { counterexample },
            None => SafetyVerdict::Ok,
        },
        deadlock: match search.deadlock {
            Some((counterexample, wait_for_cycle)) => DeadlockVerdict::Found {
                counterexample,
                wait_for_cycle,
            },
            None => DeadlockVerdict::NoneFound,
        },
        states_visited: search.visited.len() as u64,
        frontier_truncated: search.truncated,
    };
    Ok(ExploreReport {
        verdict,
        visited: search.visited.into_keys().collect(),
    })
}

/// Final state of a replayed counterexample.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOutcome {
    pub trace: Vec<TraceRecord>,
    pub final_state: BTreeMap<ProcessId, NodeSnapshot>,
    pub wait_for: Vec<(ProcessId, ProcessId)>,
    /// True when no message is left in flight after the last step.
    pub quiescent: bool,
    /// True when the final step put two nodes inside the critical section.
    pub safety_violated: bool,
}

/// Feeds a counterexample path back through the simulator.
///
/// Steps with `src == dst` are releases, the rest deliver the head of the
/// named channel. Any step that cannot be taken as recorded (empty
/// channel, node not inside the critical section) is a divergence.
pub fn replay(
    qs: &QuorumSystem,
    algo: Algo,
    requesters: &[ProcessId],
    steps: &[ScriptStep],
) -> Result<ReplayOutcome, ExploreError> {
    let mut world = SimWorld::for_replay(qs, algo, requesters)?;
    let mut safety_violated = false;
    for (index, step) in steps.iter().enumerate() {
        let result = if step.src == step.dst {
            world.release_now(step.src)
        } else {
            world.deliver_next(step.src, step.dst)
        };
        match result {
            Ok(()) => {}
            Err(SimError::SafetyViolated { .. }) if index + 1 == steps.len() => {
                safety_violated = true;
            }
            Err(err) => {
                return Err(ExploreError::ReplayDivergence {
                    step: index,
                    reason: err.to_string(),
                });
            }
        }
    }
    Ok(ReplayOutcome {
        trace: world.trace().to_vec(),
        final_state: world.snapshot(),
        wait_for: protocol::wait_for_edges(world.nodes()),
        quiescent: world.quiescent(),
        safety_violated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quorum::build_quorums;
    use crate::simnet::{self, DelayModel, InjectAction, Injection, Outcome, Scenario};

    fn p(raw: u32) -> ProcessId {
        ProcessId(raw)
    }

    fn s2_n13() -> QuorumSystem {
        QuorumSystem::from_json_str(include_str!("../../../fixtures/quorums_s2.json")).unwrap()
    }

    fn contention_config(algo: Algo) -> ExploreConfig {
        let mut cfg = ExploreConfig::new(algo, vec![p(2), p(9), p(13)]);
        cfg.max_depth = 48;
        cfg.max_states = 400_000;
        cfg
    }

    #[test]
    fn exhaustive_small_ring_has_no_hazards() {
        let qs = build_quorums(3).unwrap();
        let mut cfg = ExploreConfig::new(Algo::Ring, vec![p(1), p(2)]);
        cfg.max_depth = 200;
        cfg.max_states = 100_000;
        let report = explore(&qs, &cfg).unwrap();
        assert_eq!(report.verdict.safety, SafetyVerdict::Ok);
        assert_eq!(report.verdict.deadlock, DeadlockVerdict::NoneFound);
        assert!(!report.verdict.frontier_truncated);
        assert!(report.verdict.states_visited > 10);
        let again = explore(&qs, &cfg).unwrap();
        assert_eq!(report.verdict, again.verdict);
    }

    #[test]
    fn single_requester_touches_its_whole_ring() {
        let qs = build_quorums(7).unwrap();
        let mut cfg = ExploreConfig::new(Algo::Ring, vec![p(2)]);
        cfg.max_depth = 100;
        let report = explore(&qs, &cfg).unwrap();
        assert_eq!(report.verdict.safety, SafetyVerdict::Ok);
        assert_eq!(report.verdict.deadlock, DeadlockVerdict::NoneFound);
        assert!(!report.verdict.frontier_truncated);
        assert!(report.verdict.states_visited >= u64::from(qs.k()) + 1);
    }

    #[test]
    fn adversarial_vote_order_deadlocks_without_inquire() {
        let qs = s2_n13();
        let report = explore(&qs, &contention_config(Algo::MaekawaBasic)).unwrap();
        assert_eq!(report.verdict.safety, SafetyVerdict::Ok);
        let DeadlockVerdict::Found {
            counterexample,
            wait_for_cycle,
        } = &report.verdict.deadlock
        else {
            panic!("expected a deadlock, got {:?}", report.verdict.deadlock);
        };
        assert!(!wait_for_cycle.is_empty());
        assert!(!counterexample.is_empty());
        // Every waiter on the cycle is one of the contenders.
        for &(waiter, _) in wait_for_cycle {
            assert!([p(2), p(9), p(13)].contains(&waiter));
        }
        let again = explore(&qs, &contention_config(Algo::MaekawaBasic)).unwrap();
        assert_eq!(report.verdict, again.verdict);
    }

    #[test]
    fn inquire_mode_survives_the_same_contention() {
        let qs = s2_n13();
        let report = explore(&qs, &contention_config(Algo::MaekawaFull)).unwrap();
        assert_eq!(report.verdict.safety, SafetyVerdict::Ok);
        assert_eq!(report.verdict.deadlock, DeadlockVerdict::NoneFound);
        // The bound is generous enough that nothing was cut off: this is
        // the complete reachable space of the three-way contention.
        assert!(!report.verdict.frontier_truncated);
    }

    #[test]
    fn replay_reproduces_the_recorded_deadlock() {
        let qs = s2_n13();
        let requesters = [p(2), p(9), p(13)];
        let report = explore(&qs, &contention_config(Algo::MaekawaBasic)).unwrap();
        let DeadlockVerdict::Found {
            counterexample,
            wait_for_cycle,
        } = report.verdict.deadlock
        else {
            panic!("expected a deadlock");
        };
        let outcome = replay(&qs, Algo::MaekawaBasic, &requesters, &counterexample).unwrap();
        assert!(outcome.quiescent, "deadlock state has nothing in flight");
        assert!(!outcome.safety_violated);
        for edge in &wait_for_cycle {
            assert!(
                outcome.wait_for.contains(edge),
                "cycle edge {edge:?} missing from replayed wait-for edges {:?}",
                outcome.wait_for
            );
        }
        for (waiter, _) in &wait_for_cycle {
            assert_eq!(outcome.final_state[waiter].stat, Stat::Wait);
        }
    }

    #[test]
    fn replay_rejects_a_tampered_counterexample() {
        let qs = build_quorums(3).unwrap();
        let requesters = [p(1)];
        // A release by a node that never entered the critical section.
        let err = replay(
            &qs,
            Algo::Ring,
            &requesters,
            &[ScriptStep {
                src: p(2),
                dst: p(2),
            }],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ExploreError::ReplayDivergence { step: 0, .. }
        ));
        // A delivery on an empty channel.
        let err = replay(
            &qs,
            Algo::Ring,
            &requesters,
            &[ScriptStep {
                src: p(3),
                dst: p(1),
            }],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            ExploreError::ReplayDivergence { step: 0, .. }
        ));
    }

    #[test]
    fn simulated_runs_stay_inside_the_explored_region() {
        let qs = build_quorums(3).unwrap();
        let mut cfg = ExploreConfig::new(Algo::Ring, vec![p(1), p(2)]);
        cfg.max_depth = 300;
        cfg.max_states = 200_000;
        let report = explore(&qs, &cfg).unwrap();
        assert!(!report.verdict.frontier_truncated);
        for seed in 0..100u64 {
            let scenario = Scenario {
                quorum_file: String::new(),
                algo: Algo::Ring,
                cs_duration: 1,
                delay_model: DelayModel::UniformRandom { lo: 1, hi: 4, seed },
                events: vec![
                    Injection {
                        at: 0,
                        node: p(1),
                        action: InjectAction::Request,
                    },
                    Injection {
                        at: 0,
                        node: p(2),
                        action: InjectAction::Request,
                    },
                ],
                delivery_script: None,
            };
            let mut world = SimWorld::new(&scenario, &qs).unwrap();
            loop {
                let progressed = world.step().unwrap();
                if world.injections_pending() == 0 {
                    let digest = state_hash(world.nodes(), &world.channel_contents());
                    assert!(
                        report.visited.contains(&digest),
                        "seed {seed}: simulator reached a state the explorer missed"
                    );
                }
                if !progressed {
                    break;
                }
            }
            assert_eq!(
                world.run(simnet::DEFAULT_STEP_LIMIT).unwrap(),
                Outcome::Quiescent
            );
        }
    }

    #[test]
    fn depth_bound_reports_truncation() {
        let qs = s2_n13();
        let mut cfg = ExploreConfig::new(Algo::MaekawaBasic, vec![p(2), p(9), p(13)]);
        cfg.max_depth = 2;
        let report = explore(&qs, &cfg).unwrap();
        assert!(report.verdict.frontier_truncated);
        assert_eq!(report.verdict.deadlock, DeadlockVerdict::NoneFound);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let qs = build_quorums(3).unwrap();
        let err = explore(&qs, &ExploreConfig::new(Algo::Ring, vec![])).unwrap_err();
        assert!(matches!(err, ExploreError::InvalidConfig(_)));
        let err = explore(&qs, &ExploreConfig::new(Algo::Ring, vec![p(1), p(1)])).unwrap_err();
        assert!(matches!(err, ExploreError::InvalidConfig(_)));
        let err = explore(&qs, &ExploreConfig::new(Algo::Ring, vec![p(9)])).unwrap_err();
        assert!(matches!(err, ExploreError::Quorum(_)));
    }

    #[test]
    fn verdicts_serialize_with_tagged_statuses() {
        let verdict = Verdict {
            safety: SafetyVerdict::Ok,
            deadlock: DeadlockVerdict::Found {
                counterexample: vec![ScriptStep {
                    src: p(2),
                    dst: p(5),
                }],
                wait_for_cycle: vec![(p(2), p(8))],
            },
            states_visited: 7,
            frontier_truncated: false,
        };
        let json = serde_json::to_string(&verdict).unwrap();
        assert!(json.contains(r#""safety":{"status":"ok"}"#), "{json}");
        assert!(json.contains(r#""status":"found""#), "{json}");
        assert!(
            json.contains(r#""counterexample":[{"src":2,"dst":5}]"#),
            "{json}"
        );
        let back: Verdict = serde_json::from_str(&json).unwrap();
        assert_eq!(back, verdict);
    }
}
