//! Shared protocol vocabulary and the single-event world transition.
//!
//! Node logic is pure: every handler maps a state plus one input to a
//! successor state plus ordered emissions, and never performs I/O. This
//! module owns the types common to both algorithms (states, messages,
//! events) and routes one external event through the affected node.
//! Emissions addressed to the emitting node itself are processed locally,
//! depth-first, without ever touching the network; only cross-node sends
//! are returned, in emission order.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::maekawa::{MaekawaNodeState, Mode};
use crate::quorum::{ProcessId, QuorumError, QuorumSystem};
use crate::ring::RingNodeState;

/// Coarse per-node status: not requesting, requesting, or in the critical
/// section.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stat {
    Passive,
    Wait,
    Ready,
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stat::Passive => "Passive",
            Stat::Wait => "Wait",
            Stat::Ready => "Ready",
        };
        f.write_str(name)
    }
}

/// Which protocol a world runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Ring,
    MaekawaBasic,
    MaekawaFull,
}

impl Algo {
    /// Maekawa mode for the two Maekawa variants, None for the ring.
    pub fn maekawa_mode(self) -> Option<Mode> {
        match self {
            Algo::Ring => None,
            Algo::MaekawaBasic => Some(Mode::Basic),
            Algo::MaekawaFull => Some(Mode::Full),
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Algo::Ring => "ring",
            Algo::MaekawaBasic => "maekawa-basic",
            Algo::MaekawaFull => "maekawa-full",
        };
        f.write_str(name)
    }
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ring" => Ok(Algo::Ring),
            "maekawa-basic" => Ok(Algo::MaekawaBasic),
            "maekawa-full" => Ok(Algo::MaekawaFull),
            other => Err(format!(
                "unknown algorithm {other:?}; expected ring, maekawa-basic or maekawa-full"
            )),
        }
    }
}

/// Lamport timestamp: logical clock value paired with the process id as a
/// tiebreaker, compared lexicographically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    pub clock: u64,
    pub id: ProcessId,
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.clock, self.id)
    }
}

/// Protocol message. `Req`/`Rel` belong to the ring algorithm, the
/// uppercase kinds to Maekawa's. `origin` names the process the message is
/// about: the requester or releaser for requester-sent kinds, the sending
/// arbiter for arbiter replies.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Message {
    Req {
        origin: ProcessId,
    },
    Rel {
        origin: ProcessId,
    },
    #[serde(rename = "REQUEST")]
    Request {
        origin: ProcessId,
        ts: Timestamp,
    },
    #[serde(rename = "LOCKED")]
    Locked {
        origin: ProcessId,
    },
    #[serde(rename = "FAILED")]
    Failed {
        origin: ProcessId,
    },
    #[serde(rename = "INQUIRE")]
    Inquire {
        origin: ProcessId,
    },
    #[serde(rename = "RELINQUISH")]
    Relinquish {
        origin: ProcessId,
    },
    #[serde(rename = "RELEASE")]
    Release {
        origin: ProcessId,
    },
}

impl Message {
    pub fn origin(&self) -> ProcessId {
        match *self {
            Message::Req { origin }
            | Message::Rel { origin }
            | Message::Request { origin, .. }
            | Message::Locked { origin }
            | Message::Failed { origin }
            | Message::Inquire { origin }
            | Message::Relinquish { origin }
            | Message::Release { origin } => origin,
        }
    }

    /// The wire name of this kind, as used in traces.
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Req { .. } => "Req",
            Message::Rel { .. } => "Rel",
            Message::Request { .. } => "REQUEST",
            Message::Locked { .. } => "LOCKED",
            Message::Failed { .. } => "FAILED",
            Message::Inquire { .. } => "INQUIRE",
            Message::Relinquish { .. } => "RELINQUISH",
            Message::Release { .. } => "RELEASE",
        }
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Message::Request { origin, ts } => write!(f, "REQUEST({origin}, ts={ts})"),
            other => write!(f, "{}({})", other.kind(), other.origin()),
        }
    }
}

/// One message in flight from `src` to `dst`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Envelope {
    pub src: ProcessId,
    pub dst: ProcessId,
    pub msg: Message,
}

/// An external event fed into the world: a scenario-driven request or
/// release at a node, or delivery of an in-flight message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    Request {
        node: ProcessId,
    },
    Release {
        node: ProcessId,
    },
    Deliver {
        src: ProcessId,
        dst: ProcessId,
        msg: Message,
    },
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("node {node} received unexpected {msg} from {src}")]
    UnexpectedMessage {
        node: ProcessId,
        src: ProcessId,
        msg: Message,
    },
    #[error("request injected at node {node} while {stat}")]
    InvalidRequest { node: ProcessId, stat: Stat },
    #[error("release at node {node} while {stat}")]
    InvalidRelease { node: ProcessId, stat: Stat },
    #[error("no node with id {0}")]
    UnknownProcess(ProcessId),
    #[error(transparent)]
    Quorum(#[from] QuorumError),
}

/// Per-node protocol state, tagged by algorithm family.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeState {
    Ring(RingNodeState),
    Maekawa(MaekawaNodeState),
}

/// Normalized per-node view used for golden comparisons and trace
/// snapshots: for ring nodes the local waiting queue and blocked flag, for
/// Maekawa nodes the pending arbiter queue and whether the node's vote is
/// currently locked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub stat: Stat,
    pub queue: Vec<ProcessId>,
    pub blocked: bool,
}

/// Input to a single node-level transition.
#[derive(Clone, Debug)]
pub(crate) enum Action {
    Request,
    Release,
    Deliver { src: ProcessId, msg: Message },
}

impl NodeState {
    pub fn id(&self) -> ProcessId {
        match self {
            NodeState::Ring(s) => s.id,
            NodeState::Maekawa(s) => s.id,
        }
    }

    pub fn stat(&self) -> Stat {
        match self {
            NodeState::Ring(s) => s.stat,
            NodeState::Maekawa(s) => s.stat,
        }
    }

    /// Length of the local queue: waiting queue for ring nodes, pending
    /// arbiter queue for Maekawa nodes.
    pub fn queue_len(&self) -> usize {
        match self {
            NodeState::Ring(s) => s.queue.len(),
            NodeState::Maekawa(s) => s.pending.len(),
        }
    }

    pub fn snapshot(&self) -> NodeSnapshot {
        match self {
            NodeState::Ring(s) => NodeSnapshot {
                stat: s.stat,
                queue: s.queue.iter().copied().collect(),
                blocked: s.blocked,
            },
            NodeState::Maekawa(s) => NodeSnapshot {
                stat: s.stat,
                queue: s.pending.iter().map(|&(_, origin)| origin).collect(),
                blocked: s.locked_for.is_some(),
            },
        }
    }

    /// Local wait-for edges (waiter, holder): ring nodes report each queued
    /// process waiting on the queue head; Maekawa nodes report each pending
    /// requester waiting on this arbiter while its vote is locked.
    pub fn wait_for_edges(&self) -> Vec<(ProcessId, ProcessId)> {
        match self {
            NodeState::Ring(s) => s.wait_for_edges(),
            NodeState::Maekawa(s) => s.wait_for_edges(),
        }
    }

    fn step(
        &self,
        qs: &QuorumSystem,
        action: Action,
    ) -> Result<(NodeState, Vec<(ProcessId, Message)>), ProtocolError> {
        match (self, action) {
            (NodeState::Ring(s), Action::Request) => {
                let (next, out) = s.on_request_cs(qs)?;
                Ok((NodeState::Ring(next), out))
            }
            (NodeState::Ring(s), Action::Release) => {
                let (next, out) = s.on_release_cs(qs)?;
                Ok((NodeState::Ring(next), out))
            }
            (NodeState::Ring(s), Action::Deliver { src, msg }) => {
                let (next, out) = match msg {
                    Message::Req { origin } => s.on_receive_req(qs, origin)?,
                    Message::Rel { origin } => s.on_receive_rel(qs, origin)?,
                    other => {
                        return Err(ProtocolError::UnexpectedMessage {
                            node: s.id,
                            src,
                            msg: other,
                        })
                    }
                };
                Ok((NodeState::Ring(next), out))
            }
            (NodeState::Maekawa(s), Action::Request) => {
                let (next, out) = s.on_request_cs(qs)?;
                Ok((NodeState::Maekawa(next), out))
            }
            (NodeState::Maekawa(s), Action::Release) => {
                let (next, out) = s.on_release_cs(qs)?;
                Ok((NodeState::Maekawa(next), out))
            }
            (NodeState::Maekawa(s), Action::Deliver { src, msg }) => {
                let (next, out) = s.on_message(qs, src, msg)?;
                Ok((NodeState::Maekawa(next), out))
            }
        }
    }
}

/// All nodes of a world, keyed by id.
pub type Nodes = BTreeMap<ProcessId, NodeState>;

/// Fresh nodes for every process of the system, all Passive.
pub fn init_nodes(qs: &QuorumSystem, algo: Algo) -> Result<Nodes, ProtocolError> {
    let mut nodes = BTreeMap::new();
    for id in qs.ids() {
        let state = match algo.maekawa_mode() {
            None => NodeState::Ring(RingNodeState::new(id, qs.ring_of(id)?)),
            Some(mode) => NodeState::Maekawa(MaekawaNodeState::new(id, mode)),
        };
        nodes.insert(id, state);
    }
    Ok(nodes)
}

/// Applies one event to the world, returning the network sends it caused.
///
/// Exactly one node's state changes per event (self-addressed emissions
/// recurse on the same node). Sends are ordered as emitted, with each
/// self-emission replaced inline by the sends of its local processing.
pub fn apply_event(
    nodes: &mut Nodes,
    qs: &QuorumSystem,
    event: &Event,
) -> Result<Vec<Envelope>, ProtocolError> {
    match event {
        Event::Request { node } => deliver_chain(nodes, qs, *node, Action::Request),
        Event::Release { node } => deliver_chain(nodes, qs, *node, Action::Release),
        Event::Deliver { src, dst, msg } => deliver_chain(
            nodes,
            qs,
            *dst,
            Action::Deliver {
                src: *src,
                msg: msg.clone(),
            },
        ),
    }
}

fn deliver_chain(
    nodes: &mut Nodes,
    qs: &QuorumSystem,
    node: ProcessId,
    action: Action,
) -> Result<Vec<Envelope>, ProtocolError> {
    let state = nodes
        .get(&node)
        .ok_or(ProtocolError::UnknownProcess(node))?;
    let (next, emissions) = state.step(qs, action)?;
    nodes.insert(node, next);
    let mut out = Vec::new();
    for (dst, msg) in emissions {
        if dst == node {
            out.extend(deliver_chain(
                nodes,
                qs,
                node,
                Action::Deliver { src: node, msg },
            )?);
        } else {
            out.push(Envelope {
                src: node,
                dst,
                msg,
            });
        }
    }
    Ok(out)
}

/// Wait-for edges of the whole world, deduplicated and sorted.
pub fn wait_for_edges(nodes: &Nodes) -> Vec<(ProcessId, ProcessId)> {
    let mut edges: Vec<(ProcessId, ProcessId)> = nodes
        .values()
        .flat_map(|state| state.wait_for_edges())
        .collect();
    edges.sort();
    edges.dedup();
    edges
}
