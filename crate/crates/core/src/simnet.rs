//! Deterministic discrete-event simulator.
//!
//! A [`SimWorld`] advances integer ticks over per-channel FIFO queues.
//! Scenario events inject critical-section requests; nodes that enter the
//! critical section release automatically after `cs_duration` ticks.
//! Delivery timing comes from a pluggable delay model, or from an explicit
//! delivery script that pins the exact interleaving (used to reproduce
//! published executions). Nodes never read the clock: time only orders
//! deliveries, so the protocol layer stays fully asynchronous.
//!
//! Determinism: every tie is broken the same way on every run: scenario
//! events before deliveries (injections by node, then due releases by
//! node), deliveries by (src, dst) lexicographic order. Two runs of the
//! same scenario and seed produce byte-identical traces.
//!
//! The trace is an append-only record sequence; each record carries all
//! seven fields (`tick, kind, src, dst, msg, node, detail`), with `null`
//! for the ones a kind does not use. A `cs_enter` record's detail holds a
//! normalized snapshot of every node, which is what golden comparisons
//! read.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use thiserror::Error;

use crate::protocol::{
    self, Algo, Envelope, Event, Message, NodeSnapshot, Nodes, ProtocolError, Stat,
};
use crate::quorum::{ProcessId, QuorumError, QuorumSystem};

/// Default ceiling on simulation steps before a run is cut off.
pub const DEFAULT_STEP_LIMIT: u64 = 1_000_000;

/// Multiplier C of the documented delay bound: under the unit delay model
/// every request enters the critical section within
/// `C * k * requesters * max(cs_duration, 1)` ticks of its injection.
pub const DELAY_BOUND_FACTOR: u64 = 4;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Quorum(#[from] QuorumError),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid delivery script at step {step}: channel {src}->{dst} is empty")]
    InvalidScript {
        step: usize,
        src: ProcessId,
        dst: ProcessId,
    },
    #[error(
        "mutual exclusion violated at tick {tick}: nodes {ready:?} are all in the critical section"
    )]
    SafetyViolated { tick: u64, ready: Vec<ProcessId> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Message latency model; all variants are deterministic given the
/// scenario (the random model draws from an explicitly seeded stream).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayModel {
    /// Every message takes one tick.
    Unit,
    /// Per-channel latencies keyed "src->dst", with a default for the rest.
    Fixed {
        delays: BTreeMap<String, u64>,
        default: u64,
    },
    /// Uniform latency in `lo..=hi`, drawn from a seeded stream.
    UniformRandom { lo: u64, hi: u64, seed: u64 },
}

impl DelayModel {
    fn validate(&self) -> Result<(), SimError> {
        match self {
            DelayModel::Unit => Ok(()),
            DelayModel::Fixed { delays, .. } => {
                for key in delays.keys() {
                    parse_channel_key(key).ok_or_else(|| {
                        SimError::InvalidScenario(format!(
                            "fixed delay key {key:?} is not of the form \"src->dst\""
                        ))
                    })?;
                }
                Ok(())
            }
            DelayModel::UniformRandom { lo, hi, .. } => {
                if lo > hi {
                    return Err(SimError::InvalidScenario(format!(
                        "uniform_random delay bounds are inverted: lo={lo} hi={hi}"
                    )));
                }
                Ok(())
            }
        }
    }
}

fn parse_channel_key(key: &str) -> Option<(ProcessId, ProcessId)> {
    let (src, dst) = key.split_once("->")?;
    Some((
        ProcessId(src.trim().parse().ok()?),
        ProcessId(dst.trim().parse().ok()?),
    ))
}

/// What a scenario event does to its node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectAction {
    Request,
}

/// One scenario event: `node` performs `action` at tick `at`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub at: u64,
    pub node: ProcessId,
    pub action: InjectAction,
}

/// One scripted delivery: pop the head of channel src->dst.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub src: ProcessId,
    pub dst: ProcessId,
}

/// A runnable scenario file: which system, which algorithm, who requests
/// when, and how messages are delayed or explicitly ordered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Path of the quorum file, relative to the scenario file.
    pub quorum_file: String,
    pub algo: Algo,
    /// Ticks a node stays in the critical section before releasing.
    pub cs_duration: u64,
    pub delay_model: DelayModel,
    pub events: Vec<Injection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivery_script: Option<Vec<ScriptStep>>,
}

impl Scenario {
    /// Reads a scenario and the quorum system it names (resolved relative
    /// to the scenario file's directory).
    pub fn load(path: &Path) -> Result<(Scenario, QuorumSystem), SimError> {
        let text = std::fs::read_to_string(path)?;
        let scenario: Scenario = serde_json::from_str(&text)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let qs = QuorumSystem::load(&dir.join(&scenario.quorum_file))?;
        Ok((scenario, qs))
    }

    /// Replaces the random delay seed, if the model has one.
    pub fn override_seed(&mut self, seed: u64) {
        if let DelayModel::UniformRandom { seed: s, .. } = &mut self.delay_model {
            *s = seed;
        }
    }
}

/// Trace record kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Send,
    Deliver,
    StateChange,
    CsEnter,
    CsExit,
}

/// One trace line. Every field is present on every record; fields a kind
/// does not use are null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    pub kind: TraceKind,
    pub src: Option<ProcessId>,
    pub dst: Option<ProcessId>,
    pub msg: Option<Message>,
    pub node: Option<ProcessId>,
    pub detail: Option<String>,
}

/// Full-world state captured the moment a node entered the critical
/// section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntrySnapshot {
    pub tick: u64,
    pub node: ProcessId,
    pub world: BTreeMap<ProcessId, NodeSnapshot>,
}

/// How a run ended.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    /// Nothing in flight, nothing pending, nobody waiting.
    Quiescent,
    /// Nothing can happen but some nodes still wait: a deadlock. Carries
    /// the wait-for edges (waiter, holder) observed at the final state.
    QuiescenceWithWaiters {
        wait_for: Vec<(ProcessId, ProcessId)>,
    },
    StepLimitExceeded,
}

/// Per-request measurements extracted from a trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestStats {
    pub origin: ProcessId,
    pub request_tick: u64,
    pub cs_enter_tick: Option<u64>,
    pub cs_exit_tick: Option<u64>,
    /// Network sends attributed to this request while it was outstanding:
    /// its own protocol traffic plus the arbiter replies addressed to it.
    pub messages_attributed: u64,
    /// Largest local queue observed at any node while the request was
    /// outstanding (a contention indicator, reported not asserted).
    pub max_wait_queue: usize,
}

/// Run-level measurements extracted from a trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub per_request: Vec<RequestStats>,
    pub totals_by_kind: BTreeMap<String, u64>,
    pub max_queue_len: usize,
}

impl RunStats {
    /// Renders the pinned CSV layout, one row per request.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "origin,request_tick,cs_enter_tick,cs_exit_tick,messages_attributed,max_wait_queue\n",
        );
        for row in &self.per_request {
            let enter = row.cs_enter_tick.map(|t| t.to_string()).unwrap_or_default();
            let exit = row.cs_exit_tick.map(|t| t.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.origin,
                row.request_tick,
                enter,
                exit,
                row.messages_attributed,
                row.max_wait_queue
            ));
        }
        out
    }
}

/// Everything a finished run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SimReport {
    pub outcome: Outcome,
    pub trace: Vec<TraceRecord>,
    pub stats: RunStats,
    pub entry_snapshots: Vec<EntrySnapshot>,
}

/// Renders a trace as JSONL, one record per line.
pub fn trace_to_jsonl(trace: &[TraceRecord]) -> String {
    let mut out = String::new();
    for record in trace {
        out.push_str(&serde_json::to_string(record).expect("trace records serialize"));
        out.push('\n');
    }
    out
}

enum DelayState {
    Unit,
    Fixed {
        delays: BTreeMap<(ProcessId, ProcessId), u64>,
        default: u64,
    },
    Uniform {
        lo: u64,
        hi: u64,
        rng: ChaCha8Rng,
    },
}

impl DelayState {
    fn new(model: &DelayModel) -> DelayState {
        match model {
            DelayModel::Unit => DelayState::Unit,
            DelayModel::Fixed { delays, default } => DelayState::Fixed {
                delays: delays
                    .iter()
                    .map(|(key, &ticks)| {
                        (
                            parse_channel_key(key).expect("validated at construction"),
                            ticks,
                        )
                    })
                    .collect(),
                default: *default,
            },
            DelayModel::UniformRandom { lo, hi, seed } => DelayState::Uniform {
                lo: *lo,
                hi: *hi,
                rng: ChaCha8Rng::seed_from_u64(*seed),
            },
        }
    }

    fn latency(&mut self, src: ProcessId, dst: ProcessId) -> u64 {
        match self {
            DelayState::Unit => 1,
            DelayState::Fixed { delays, default } => {
                delays.get(&(src, dst)).copied().unwrap_or(*default)
            }
            DelayState::Uniform { lo, hi, rng } => {
                let span = *hi - *lo + 1;
                *lo + rng.next_u64() % span
            }
        }
    }
}

/// The event a step decided to perform next.
enum Happening {
    Inject(u64, ProcessId),
    Release(u64, ProcessId),
    Deliver(u64, ProcessId, ProcessId),
}

/// A running simulation.
pub struct SimWorld {
    qs: QuorumSystem,
    time: u64,
    nodes: Nodes,
    channels: BTreeMap<(ProcessId, ProcessId), VecDeque<(u64, Message)>>,
    injections: VecDeque<Injection>,
    releases: BTreeSet<(u64, ProcessId)>,
    script: VecDeque<ScriptStep>,
    script_cursor: usize,
    scripted: bool,
    auto_release: bool,
    cs_duration: u64,
    delay: DelayState,
    trace: Vec<TraceRecord>,
    entry_snapshots: Vec<EntrySnapshot>,
}

impl SimWorld {
    /// Builds a world for a scenario against its (validated) system.
    pub fn new(scenario: &Scenario, qs: &QuorumSystem) -> Result<SimWorld, SimError> {
        let report = qs.validate();
        if !report.all_pass() {
            return Err(SimError::InvalidScenario(format!(
                "quorum system fails validation:\n{report}"
            )));
        }
        scenario.delay_model.validate()?;
        for injection in &scenario.events {
            if qs.group(injection.node).is_err() {
                return Err(SimError::InvalidScenario(format!(
                    "event names unknown node {}",
                    injection.node
                )));
            }
        }
        let mut injections: Vec<Injection> = scenario.events.clone();
        injections.sort_by_key(|e| (e.at, e.node));
        Ok(SimWorld {
            qs: qs.clone(),
            time: 0,
            nodes: protocol::init_nodes(qs, scenario.algo)?,
            channels: BTreeMap::new(),
            injections: injections.into(),
            releases: BTreeSet::new(),
            script: scenario.delivery_script.clone().unwrap_or_default().into(),
            script_cursor: 0,
            scripted: scenario.delivery_script.is_some(),
            auto_release: true,
            cs_duration: scenario.cs_duration,
            delay: DelayState::new(&scenario.delay_model),
            trace: Vec::new(),
            entry_snapshots: Vec::new(),
        })
    }

    /// Builds a world for replaying an explorer counterexample: all
    /// requesters inject at tick 0 and releases happen only when the replay
    /// asks for them.
    pub fn for_replay(
        qs: &QuorumSystem,
        algo: Algo,
        requesters: &[ProcessId],
    ) -> Result<SimWorld, SimError> {
        let scenario = Scenario {
            quorum_file: String::new(),
            algo,
            cs_duration: 1,
            delay_model: DelayModel::Unit,
            events: requesters
                .iter()
                .map(|&node| Injection {
                    at: 0,
                    node,
                    action: InjectAction::Request,
                })
                .collect(),
            delivery_script: None,
        };
        let mut world = SimWorld::new(&scenario, qs)?;
        world.auto_release = false;
        while world
            .injections
            .front()
            .is_some_and(|inj| inj.at <= world.time)
        {
            let inj = world.injections.pop_front().expect("checked nonempty");
            world.apply(Event::Request { node: inj.node })?;
        }
        Ok(world)
    }

    pub fn time(&self) -> u64 {
        self.time
    }

    pub fn nodes(&self) -> &Nodes {
        &self.nodes
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn entry_snapshots(&self) -> &[EntrySnapshot] {
        &self.entry_snapshots
    }

    /// Normalized view of every node right now.
    pub fn snapshot(&self) -> BTreeMap<ProcessId, NodeSnapshot> {
        self.nodes
            .iter()
            .map(|(&id, state)| (id, state.snapshot()))
            .collect()
    }

    /// In-flight messages per nonempty channel, without delivery times.
    pub fn channel_contents(&self) -> BTreeMap<(ProcessId, ProcessId), VecDeque<Message>> {
        self.channels
            .iter()
            .filter(|(_, queue)| !queue.is_empty())
            .map(|(&key, queue)| (key, queue.iter().map(|(_, msg)| msg.clone()).collect()))
            .collect()
    }

    /// Scenario events not yet performed.
    pub fn injections_pending(&self) -> usize {
        self.injections.len()
    }

    /// True when nothing is in flight and nothing is scheduled.
    pub fn quiescent(&self) -> bool {
        self.injections.is_empty()
            && self.releases.is_empty()
            && self.script.is_empty()
            && self.channels.values().all(VecDeque::is_empty)
    }

    /// Applies one protocol event, recording trace lines and routing the
    /// resulting sends onto channels.
    fn apply(&mut self, event: Event) -> Result<(), SimError> {
        let node_id = match &event {
            Event::Request { node } | Event::Release { node } => *node,
            Event::Deliver { dst, .. } => *dst,
        };
        let before = self
            .nodes
            .get(&node_id)
            .ok_or(ProtocolError::UnknownProcess(node_id))?
            .stat();
        if let Event::Release { .. } = event {
            self.push_record(TraceKind::CsExit, None, None, None, Some(node_id), None);
        }
        let sends = protocol::apply_event(&mut self.nodes, &self.qs, &event)?;
        let state = &self.nodes[&node_id];
        if let Event::Deliver { src, dst, msg } = &event {
            self.trace.push(TraceRecord {
                tick: self.time,
                kind: TraceKind::Deliver,
                src: Some(*src),
                dst: Some(*dst),
                msg: Some(msg.clone()),
                node: Some(*dst),
                detail: Some(format!("q={}", state.queue_len())),
            });
        }
        let after = self.nodes[&node_id].stat();
        if before != after {
            let detail = format!("{before}->{after}");
            self.push_record(
                TraceKind::StateChange,
                None,
                None,
                None,
                Some(node_id),
                Some(detail),
            );
        }
        if after == Stat::Ready && before != Stat::Ready {
            let world = self.snapshot();
            let detail = serde_json::to_string(&world).expect("snapshots serialize");
            self.push_record(
                TraceKind::CsEnter,
                None,
                None,
                None,
                Some(node_id),
                Some(detail),
            );
            self.entry_snapshots.push(EntrySnapshot {
                tick: self.time,
                node: node_id,
                world,
            });
            if self.auto_release {
                self.releases
                    .insert((self.time + self.cs_duration, node_id));
            }
        }
        for Envelope { src, dst, msg } in sends {
            self.trace.push(TraceRecord {
                tick: self.time,
                kind: TraceKind::Send,
                src: Some(src),
                dst: Some(dst),
                msg: Some(msg.clone()),
                node: None,
                detail: None,
            });
            let latency = self.delay.latency(src, dst);
            let channel = self.channels.entry((src, dst)).or_default();
            let earliest = channel.back().map_or(0, |&(at, _)| at);
            channel.push_back(((self.time + latency).max(earliest), msg));
        }
        self.check_safety()?;
        Ok(())
    }

    fn push_record(
        &mut self,
        kind: TraceKind,
        src: Option<ProcessId>,
        dst: Option<ProcessId>,
        msg: Option<Message>,
        node: Option<ProcessId>,
        detail: Option<String>,
    ) {
        self.trace.push(TraceRecord {
            tick: self.time,
            kind,
            src,
            dst,
            msg,
            node,
            detail,
        });
    }

    fn check_safety(&self) -> Result<(), SimError> {
        let ready: Vec<ProcessId> = self
            .nodes
            .values()
            .filter(|s| s.stat() == Stat::Ready)
            .map(|s| s.id())
            .collect();
        if ready.len() > 1 {
            return Err(SimError::SafetyViolated {
                tick: self.time,
                ready,
            });
        }
        Ok(())
    }

    /// The next thing to happen, honoring the documented tiebreaks.
    fn next_happening(&self) -> Option<Happening> {
        if self.scripted && !self.script.is_empty() {
            // Script mode: due scenario events first, then the script's
            // next delivery; every step consumes one tick.
            if let Some(inj) = self.injections.front() {
                if inj.at <= self.time {
                    return Some(Happening::Inject(inj.at, inj.node));
                }
            }
            if let Some(&(at, node)) = self.releases.iter().next() {
                if at <= self.time {
                    return Some(Happening::Release(at, node));
                }
            }
            let step = self.script.front().expect("checked nonempty");
            return Some(Happening::Deliver(self.time, step.src, step.dst));
        }
        // Timed mode: the earliest event wins; at equal times scenario
        // events beat deliveries, injections beat releases, and deliveries
        // order by channel.
        let mut best: Option<(u64, u8, (ProcessId, ProcessId))> = None;
        if let Some(inj) = self.injections.front() {
            best = Some((inj.at.max(self.time), 0, (inj.node, inj.node)));
        }
        if let Some(&(at, node)) = self.releases.iter().next() {
            let key = (at.max(self.time), 1, (node, node));
            if best.map_or(true, |b| key < b) {
                best = Some(key);
            }
        }
        for (&(src, dst), queue) in &self.channels {
            if let Some(&(deliver_at, _)) = queue.front() {
                let key = (deliver_at.max(self.time), 2, (src, dst));
                if best.map_or(true, |b| key < b) {
                    best = Some(key);
                }
            }
        }
        best.map(|(at, class, (a, b))| match class {
            0 => Happening::Inject(at, a),
            1 => Happening::Release(at, a),
            _ => Happening::Deliver(at, a, b),
        })
    }

    /// Performs the next event. Returns false (and does nothing) on a
    /// quiescent world.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some(happening) = self.next_happening() else {
            return Ok(false);
        };
        let in_script = self.scripted && !self.script.is_empty();
        match happening {
            Happening::Inject(at, node) => {
                self.time = at.max(self.time);
                self.injections.pop_front();
                self.apply(Event::Request { node })?;
            }
            Happening::Release(at, node) => {
                self.time = at.max(self.time);
                self.releases.remove(&(at, node));
                self.apply(Event::Release { node })?;
            }
            Happening::Deliver(at, src, dst) => {
                self.time = at.max(self.time);
                let step = self.script_cursor;
                let channel = self.channels.get_mut(&(src, dst));
                let Some((_, msg)) = channel.and_then(VecDeque::pop_front) else {
                    return Err(SimError::InvalidScript { step, src, dst });
                };
                if in_script {
                    self.script.pop_front();
                    self.script_cursor += 1;
                }
                self.apply(Event::Deliver { src, dst, msg })?;
            }
        }
        if in_script {
            self.time += 1;
        }
        Ok(true)
    }

    /// Replay plumbing: deliver the head of one channel right now.
    pub fn deliver_next(&mut self, src: ProcessId, dst: ProcessId) -> Result<(), SimError> {
        let Some((_, msg)) = self
            .channels
            .get_mut(&(src, dst))
            .and_then(VecDeque::pop_front)
        else {
            return Err(SimError::InvalidScript {
                step: self.script_cursor,
                src,
                dst,
            });
        };
        self.script_cursor += 1;
        self.time += 1;
        self.apply(Event::Deliver { src, dst, msg })
    }

    /// Replay plumbing: make a node leave the critical section right now.
    pub fn release_now(&mut self, node: ProcessId) -> Result<(), SimError> {
        self.script_cursor += 1;
        self.time += 1;
        self.apply(Event::Release { node })
    }

    /// Runs until quiescence or the step limit.
    pub fn run(&mut self, step_limit: u64) -> Result<Outcome, SimError> {
        for _ in 0..step_limit {
            if !self.step()? {
                return Ok(self.final_outcome());
            }
        }
        if self.quiescent() {
            Ok(self.final_outcome())
        } else {
            Ok(Outcome::StepLimitExceeded)
        }
    }

    fn final_outcome(&self) -> Outcome {
        let waiting = self.nodes.values().any(|s| s.stat() == Stat::Wait);
        if waiting {
            Outcome::QuiescenceWithWaiters {
                wait_for: protocol::wait_for_edges(&self.nodes),
            }
        } else {
            Outcome::Quiescent
        }
    }
}

/// Loads, runs and measures a scenario in one call.
pub fn run_scenario(
    scenario: &Scenario,
    qs: &QuorumSystem,
    step_limit: u64,
) -> Result<SimReport, SimError> {
    let mut world = SimWorld::new(scenario, qs)?;
    let outcome = world.run(step_limit)?;
    let stats = collect_stats(&world.trace);
    Ok(SimReport {
        outcome,
        stats,
        entry_snapshots: world.entry_snapshots,
        trace: world.trace,
    })
}

/// Extracts run statistics from a finished trace.
///
/// Attribution: a request owns the `Req`/`Rel` (or `REQUEST`, `RELEASE`,
/// `RELINQUISH`) sends carrying its origin, plus the arbiter replies
/// (`LOCKED`, `FAILED`, `INQUIRE`) addressed to it, counted from its
/// injection through its exit (or to the end of the trace if it never
/// exited).
pub fn collect_stats(trace: &[TraceRecord]) -> RunStats {
    let mut per_request: Vec<RequestStats> = Vec::new();
    let mut totals_by_kind: BTreeMap<String, u64> = BTreeMap::new();
    let mut max_queue_len = 0usize;
    for record in trace {
        match record.kind {
            TraceKind::StateChange => {
                let from_passive = record
                    .detail
                    .as_deref()
                    .is_some_and(|d| d.starts_with("Passive->"));
                if from_passive {
                    per_request.push(RequestStats {
                        origin: record.node.expect("state_change carries node"),
                        request_tick: record.tick,
                        cs_enter_tick: None,
                        cs_exit_tick: None,
                        messages_attributed: 0,
                        max_wait_queue: 0,
                    });
                }
            }
            TraceKind::CsEnter => {
                let node = record.node.expect("cs_enter carries node");
                if let Some(row) = open_row(&mut per_request, node) {
                    row.cs_enter_tick = Some(record.tick);
                }
            }
            TraceKind::CsExit => {
                let node = record.node.expect("cs_exit carries node");
                if let Some(row) = open_row(&mut per_request, node) {
                    row.cs_exit_tick = Some(record.tick);
                }
            }
            TraceKind::Send => {
                let msg = record.msg.as_ref().expect("send carries msg");
                *totals_by_kind.entry(msg.kind().to_string()).or_default() += 1;
                let beneficiary = match msg {
                    Message::Req { origin }
                    | Message::Rel { origin }
                    | Message::Request { origin, .. }
                    | Message::Release { origin }
                    | Message::Relinquish { origin } => *origin,
                    Message::Locked { .. } | Message::Failed { .. } | Message::Inquire { .. } => {
                        record.dst.expect("send carries dst")
                    }
                };
                // The exit broadcast is sent at the exit tick, after the
                // cs_exit record, and still belongs to the request.
                let open = per_request.iter_mut().rev().find(|row| {
                    row.origin == beneficiary
                        && (row.cs_exit_tick.is_none() || row.cs_exit_tick == Some(record.tick))
                });
                if let Some(row) = open {
                    row.messages_attributed += 1;
                }
            }
            TraceKind::Deliver => {
                let len = record
                    .detail
                    .as_deref()
                    .and_then(|d| d.strip_prefix("q="))
                    .and_then(|d| d.parse::<usize>().ok())
                    .unwrap_or(0);
                max_queue_len = max_queue_len.max(len);
                for row in per_request.iter_mut() {
                    if row.cs_exit_tick.is_none() {
                        row.max_wait_queue = row.max_wait_queue.max(len);
                    }
                }
            }
        }
    }
    RunStats {
        per_request,
        totals_by_kind,
        max_queue_len,
    }
}

fn open_row<'a>(rows: &'a mut [RequestStats], origin: ProcessId) -> Option<&'a mut RequestStats> {
    rows.iter_mut()
        .find(|row| row.origin == origin && row.cs_exit_tick.is_none())
}

/// True when, per channel, messages are delivered in exactly the order
/// they were sent.
pub fn check_fifo(trace: &[TraceRecord]) -> bool {
    let mut sent: BTreeMap<(ProcessId, ProcessId), VecDeque<&Message>> = BTreeMap::new();
    for record in trace {
        let (Some(src), Some(dst), Some(msg)) = (record.src, record.dst, &record.msg) else {
            continue;
        };
        match record.kind {
            TraceKind::Send => sent.entry((src, dst)).or_default().push_back(msg),
            TraceKind::Deliver => {
                let Some(queued) = sent.get_mut(&(src, dst)).and_then(VecDeque::pop_front) else {
                    return false;
                };
                if queued != msg {
                    return false;
                }
            }
            _ => continue,
        }
    }
    true
}

/// True when every send was eventually delivered (call at quiescence).
pub fn check_conservation(trace: &[TraceRecord]) -> bool {
    let mut balance: BTreeMap<(ProcessId, ProcessId), i64> = BTreeMap::new();
    for record in trace {
        let (Some(src), Some(dst)) = (record.src, record.dst) else {
            continue;
        };
        match record.kind {
            TraceKind::Send => *balance.entry((src, dst)).or_default() += 1,
            TraceKind::Deliver => *balance.entry((src, dst)).or_default() -= 1,
            _ => {}
        }
    }
    balance.values().all(|&v| v == 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::NodeState;
    use crate::ring::RingNodeState;

    fn p(raw: u32) -> ProcessId {
        ProcessId(raw)
    }

    fn s3_n13() -> QuorumSystem {
        QuorumSystem::from_json_str(include_str!("../../../fixtures/quorums_s3.json")).unwrap()
    }

    fn scenario_path(name: &str) -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("../../fixtures/scenarios")
            .join(name)
    }

    fn plain(
        qs_n: u32,
        algo: Algo,
        requesters: &[(u64, u32)],
        cs: u64,
    ) -> (Scenario, QuorumSystem) {
        let qs = crate::quorum::build_quorums(qs_n).unwrap();
        let scenario = Scenario {
            quorum_file: String::new(),
            algo,
            cs_duration: cs,
            delay_model: DelayModel::Unit,
            events: requesters
                .iter()
                .map(|&(at, node)| Injection {
                    at,
                    node: p(node),
                    action: InjectAction::Request,
                })
                .collect(),
            delivery_script: None,
        };
        (scenario, qs)
    }

    #[test]
    fn scenario_files_load_and_resolve_their_quorums() {
        let (scenario, qs) = Scenario::load(&scenario_path("section3b.json")).unwrap();
        assert_eq!(scenario.algo, Algo::Ring);
        assert_eq!(qs.n(), 13);
        assert!(scenario.delivery_script.is_some());
    }

    #[test]
    fn scripted_run_reproduces_the_published_execution() {
        let (scenario, qs) = Scenario::load(&scenario_path("section3b.json")).unwrap();
        let report = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
        assert_eq!(report.outcome, Outcome::Quiescent);
        let entries: Vec<(ProcessId, u64)> = report
            .entry_snapshots
            .iter()
            .map(|s| (s.node, s.tick))
            .collect();
        assert_eq!(entries, vec![(p(2), 9), (p(9), 16), (p(13), 22)]);

        // Full 13-node state tables at the first and final entries, against
        // the canonical fixtures.
        assert_eq!(
            report.entry_snapshots[0].world,
            crate::fixtures::ring_trace_after_first_entry()
        );
        assert_eq!(
            report.entry_snapshots[2].world,
            crate::fixtures::ring_trace_after_final_entry()
        );
    }

    #[test]
    fn single_request_costs_two_k_minus_one_messages() {
        for (n, requester, expected) in [(13u32, 2u32, 7u64), (7, 1, 5), (3, 1, 3)] {
            let (scenario, qs) = plain(n, Algo::Ring, &[(0, requester)], 1);
            let report = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
            assert_eq!(report.outcome, Outcome::Quiescent, "n={n}");
            assert_eq!(report.stats.per_request.len(), 1);
            let row = &report.stats.per_request[0];
            assert_eq!(row.messages_attributed, expected, "n={n}");
            let total: u64 = report.stats.totals_by_kind.values().sum();
            assert_eq!(total, expected, "n={n}");
        }
    }

    #[test]
    fn single_request_on_the_bundled_scenario_matches_the_bound() {
        let (scenario, qs) = Scenario::load(&scenario_path("single_request.json")).unwrap();
        let report = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
        assert_eq!(report.outcome, Outcome::Quiescent);
        assert_eq!(report.stats.per_request[0].messages_attributed, 7);
        assert_eq!(report.stats.totals_by_kind[&"Req".to_string()], 4);
        assert_eq!(report.stats.totals_by_kind[&"Rel".to_string()], 3);
    }

    #[test]
    fn basic_mode_script_ends_deadlocked_with_the_expected_cycle() {
        let (scenario, qs) = Scenario::load(&scenario_path("fig4_basic.json")).unwrap();
        let report = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
        let Outcome::QuiescenceWithWaiters { wait_for } = &report.outcome else {
            panic!("expected a deadlock outcome, got {:?}", report.outcome);
        };
        assert_eq!(wait_for, &vec![(p(2), p(8)), (p(9), p(11)), (p(13), p(4))]);
        assert!(report.entry_snapshots.is_empty());
    }

    #[test]
    fn full_mode_resolves_the_same_script() {
        let (scenario, qs) = Scenario::load(&scenario_path("fig4_full.json")).unwrap();
        let report = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
        assert_eq!(
            report.outcome,
            Outcome::Quiescent,
            "trace: {}",
            trace_to_jsonl(&report.trace)
        );
        let entered: Vec<ProcessId> = report.entry_snapshots.iter().map(|s| s.node).collect();
        assert_eq!(entered, vec![p(2), p(9), p(13)]);
        assert!(check_fifo(&report.trace));
        assert!(check_conservation(&report.trace));
    }

    #[test]
    fn identical_runs_produce_identical_traces() {
        for name in [
            "section3b.json",
            "fig4_basic.json",
            "fig4_full.json",
            "single_request.json",
        ] {
            let (scenario, qs) = Scenario::load(&scenario_path(name)).unwrap();
            let a = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
            let b = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
            assert_eq!(trace_to_jsonl(&a.trace), trace_to_jsonl(&b.trace), "{name}");
        }
        let (mut scenario, qs) = plain(13, Algo::Ring, &[(0, 2), (0, 9), (1, 13)], 2);
        scenario.delay_model = DelayModel::UniformRandom {
            lo: 1,
            hi: 5,
            seed: 42,
        };
        let a = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
        let b = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
        assert_eq!(trace_to_jsonl(&a.trace), trace_to_jsonl(&b.trace));
    }

    #[test]
    fn same_tick_deliveries_order_by_channel() {
        let qs = s3_n13();
        let scenario = Scenario {
            quorum_file: String::new(),
            algo: Algo::Ring,
            cs_duration: 1,
            delay_model: DelayModel::Unit,
            events: vec![
                Injection {
                    at: 0,
                    node: p(2),
                    action: InjectAction::Request,
                },
                Injection {
                    at: 0,
                    node: p(9),
                    action: InjectAction::Request,
                },
            ],
            delivery_script: None,
        };
        let report = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
        // Both sends happen at tick 0 (channels (2,3) and (9,2)); both land
        // at tick 1 and must be delivered in channel order.
        let delivers: Vec<(ProcessId, ProcessId, u64)> = report
            .trace
            .iter()
            .filter(|r| r.kind == TraceKind::Deliver && r.tick == 1)
            .map(|r| (r.src.unwrap(), r.dst.unwrap(), r.tick))
            .collect();
        assert_eq!(delivers, vec![(p(2), p(3), 1), (p(9), p(2), 1)]);
        assert_eq!(report.outcome, Outcome::Quiescent);
    }

    #[test]
    fn contended_ring_requests_all_complete_under_unit_delay() {
        let (scenario, qs) = plain(13, Algo::Ring, &[(0, 2), (0, 9), (2, 13)], 2);
        let report = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
        assert_eq!(report.outcome, Outcome::Quiescent);
        assert_eq!(report.entry_snapshots.len(), 3);
        let bound = DELAY_BOUND_FACTOR * u64::from(qs.k()) * 3 * scenario.cs_duration.max(1);
        for row in &report.stats.per_request {
            let entered = row.cs_enter_tick.expect("every request completes");
            assert!(
                entered - row.request_tick <= bound,
                "request {} waited {} ticks, bound {bound}",
                row.origin,
                entered - row.request_tick
            );
        }
        assert!(check_fifo(&report.trace));
        assert!(check_conservation(&report.trace));
    }

    #[test]
    fn seeded_random_delays_complete_and_keep_fifo_order() {
        let (scenario, qs) = plain(13, Algo::Ring, &[(0, 2), (1, 9), (2, 13)], 1);
        for seed in 0..25u64 {
            let mut scenario = scenario.clone();
            scenario.delay_model = DelayModel::UniformRandom { lo: 1, hi: 7, seed };
            let report = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
            assert_eq!(report.outcome, Outcome::Quiescent, "seed {seed}");
            assert_eq!(report.entry_snapshots.len(), 3, "seed {seed}");
            assert!(check_fifo(&report.trace), "seed {seed}");
            assert!(check_conservation(&report.trace), "seed {seed}");
        }
    }

    #[test]
    fn maekawa_modes_complete_an_uncontended_request() {
        for algo in [Algo::MaekawaBasic, Algo::MaekawaFull] {
            let (scenario, qs) = plain(13, algo, &[(0, 2)], 1);
            let report = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
            assert_eq!(report.outcome, Outcome::Quiescent, "{algo}");
            // Three rounds to the other k-1 = 3 group members.
            assert_eq!(report.stats.per_request[0].messages_attributed, 9, "{algo}");
            assert_eq!(report.stats.totals_by_kind["REQUEST"], 3);
            assert_eq!(report.stats.totals_by_kind["LOCKED"], 3);
            assert_eq!(report.stats.totals_by_kind["RELEASE"], 3);
        }
    }

    #[test]
    fn script_step_on_an_empty_channel_is_rejected() {
        let qs = s3_n13();
        let scenario = Scenario {
            quorum_file: String::new(),
            algo: Algo::Ring,
            cs_duration: 1,
            delay_model: DelayModel::Unit,
            events: vec![Injection {
                at: 0,
                node: p(2),
                action: InjectAction::Request,
            }],
            delivery_script: Some(vec![ScriptStep {
                src: p(5),
                dst: p(6),
            }]),
        };
        let err = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap_err();
        assert!(matches!(
            err,
            SimError::InvalidScript { step: 0, src, dst } if src == p(5) && dst == p(6)
        ));
    }

    #[test]
    fn stepping_a_quiescent_world_is_a_no_op() {
        let (scenario, qs) = plain(3, Algo::Ring, &[], 1);
        let mut world = SimWorld::new(&scenario, &qs).unwrap();
        assert!(!world.step().unwrap());
        assert!(world.trace().is_empty());
        assert_eq!(world.run(10).unwrap(), Outcome::Quiescent);
    }

    #[test]
    fn empty_trace_yields_zero_stats() {
        let stats = collect_stats(&[]);
        assert!(stats.per_request.is_empty());
        assert!(stats.totals_by_kind.is_empty());
        assert_eq!(stats.max_queue_len, 0);
        assert_eq!(
            stats.to_csv(),
            "origin,request_tick,cs_enter_tick,cs_exit_tick,messages_attributed,max_wait_queue\n"
        );
    }

    #[test]
    fn safety_monitor_rejects_two_ready_nodes() {
        let (scenario, qs) = plain(3, Algo::Ring, &[], 1);
        let mut world = SimWorld::new(&scenario, &qs).unwrap();
        for id in [1u32, 2] {
            let NodeState::Ring(state) = &world.nodes[&p(id)] else {
                unreachable!()
            };
            let mut forced: RingNodeState = state.clone();
            forced.stat = Stat::Ready;
            world.nodes.insert(p(id), NodeState::Ring(forced));
        }
        let err = world.check_safety().unwrap_err();
        assert!(matches!(
            err,
            SimError::SafetyViolated { ready, .. } if ready == vec![p(1), p(2)]
        ));
    }

    #[test]
    fn trace_records_always_carry_all_seven_fields() {
        let (scenario, qs) = plain(3, Algo::Ring, &[(0, 1)], 1);
        let report = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
        for line in trace_to_jsonl(&report.trace).lines() {
            let positions: Vec<usize> = ["tick", "kind", "src", "dst", "msg", "node", "detail"]
                .iter()
                .map(|key| {
                    line.find(&format!("\"{key}\":"))
                        .unwrap_or_else(|| panic!("missing key {key} in {line}"))
                })
                .collect();
            assert!(
                positions.windows(2).all(|w| w[0] < w[1]),
                "keys out of order in {line}"
            );
        }
        let parsed: Vec<TraceRecord> = trace_to_jsonl(&report.trace)
            .lines()
            .map(|line| serde_json::from_str(line).unwrap())
            .collect();
        assert_eq!(parsed, report.trace);
    }

    #[test]
    fn csv_layout_matches_the_pinned_header() {
        let (scenario, qs) = plain(7, Algo::Ring, &[(0, 1)], 1);
        let report = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
        let csv = report.stats.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "origin,request_tick,cs_enter_tick,cs_exit_tick,messages_attributed,max_wait_queue"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with("1,0,"), "row: {row}");
        assert!(lines.next().is_none());
    }

    #[test]
    fn fixed_delays_stretch_delivery_times() {
        let (mut scenario, qs) = plain(3, Algo::Ring, &[(0, 1)], 1);
        scenario.delay_model = DelayModel::Fixed {
            delays: BTreeMap::from([("1->2".to_string(), 10)]),
            default: 1,
        };
        let report = run_scenario(&scenario, &qs, DEFAULT_STEP_LIMIT).unwrap();
        let first_deliver = report
            .trace
            .iter()
            .find(|r| r.kind == TraceKind::Deliver)
            .unwrap();
        assert_eq!(first_deliver.tick, 10);
        assert_eq!(report.outcome, Outcome::Quiescent);
    }

    #[test]
    fn bad_scenarios_are_rejected_up_front() {
        let (mut scenario, qs) = plain(3, Algo::Ring, &[(0, 1)], 1);
        scenario.events[0].node = p(9);
        assert!(matches!(
            SimWorld::new(&scenario, &qs),
            Err(SimError::InvalidScenario(_))
        ));
        let (mut scenario, qs) = plain(3, Algo::Ring, &[], 1);
        scenario.delay_model = DelayModel::UniformRandom {
            lo: 5,
            hi: 2,
            seed: 0,
        };
        assert!(matches!(
            SimWorld::new(&scenario, &qs),
            Err(SimError::InvalidScenario(_))
        ));
        let (mut scenario, qs) = plain(3, Algo::Ring, &[], 1);
        scenario.delay_model = DelayModel::Fixed {
            delays: BTreeMap::from([("nonsense".to_string(), 1)]),
            default: 1,
        };
        assert!(matches!(
            SimWorld::new(&scenario, &qs),
            Err(SimError::InvalidScenario(_))
        ));
    }
}
