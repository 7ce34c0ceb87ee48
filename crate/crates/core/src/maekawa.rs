//! Maekawa-style quorum voting, in two modes.
//!
//! Every process is both a requester and the arbiter of its own single
//! vote. A requester multicasts REQUEST to its whole group (itself
//! included) and enters the critical section once every group member has
//! granted LOCKED; RELEASE returns the votes. `Basic` mode stops there and
//! can deadlock: arbiters queue conflicting requests silently. `Full` mode
//! layers Lamport-timestamp priority on top: an arbiter holding its vote
//! answers a younger request with FAILED and probes the current holder
//! with INQUIRE on behalf of an older one; a holder that has failed
//! somewhere yields its grant with RELINQUISH so the older request can
//! proceed.
//!
//! An INQUIRE that arrives before any FAILED is not discarded: the holder
//! remembers it and answers as soon as a FAILED proves it cannot currently
//! win. Absent that memory the probe and the failure can cross in flight
//! and leave the system stuck, which the interleaving explorer readily
//! finds.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, VecDeque};

use crate::protocol::{Message, ProtocolError, Stat, Timestamp};
use crate::quorum::{ProcessId, QuorumSystem};

/// Protocol variant: plain voting, or voting plus the timestamp-driven
/// deadlock resolution messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Basic,
    Full,
}

/// The request currently holding this node's vote.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lock {
    pub origin: ProcessId,
    pub ts: Timestamp,
}

/// Requester-side record of this node's own in-flight request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnRequest {
    pub ts: Timestamp,
    /// Arbiters whose vote this request currently holds.
    pub grants: BTreeSet<ProcessId>,
    /// Arbiters that answered FAILED.
    pub faileds: BTreeSet<ProcessId>,
    /// Arbiters whose INQUIRE arrived while no FAILED was at hand, awaiting
    /// an answer. They are answered with RELINQUISH the moment a FAILED
    /// proves the conflict, and dropped on entry (the later RELEASE answers
    /// them implicitly).
    pub deferred_inquiries: BTreeSet<ProcessId>,
}

impl OwnRequest {
    fn new(ts: Timestamp) -> Self {
        OwnRequest {
            ts,
            grants: BTreeSet::new(),
            faileds: BTreeSet::new(),
            deferred_inquiries: BTreeSet::new(),
        }
    }
}

/// Per-process Maekawa state covering both roles. Handlers are pure: they
/// borrow the state and return a successor plus ordered emissions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaekawaNodeState {
    pub id: ProcessId,
    pub mode: Mode,
    pub clock: u64,
    pub stat: Stat,
    /// Arbiter role: the request holding this node's vote, if any.
    pub locked_for: Option<Lock>,
    /// Arbiter role: requests waiting for the vote, in arrival order.
    pub pending: VecDeque<(Timestamp, ProcessId)>,
    /// Requester role: this node's own outstanding request.
    pub requesting: Option<OwnRequest>,
}

/// Successor state plus ordered emissions of one handler call.
pub type MaekawaStep = (MaekawaNodeState, Vec<(ProcessId, Message)>);

impl MaekawaNodeState {
    pub fn new(id: ProcessId, mode: Mode) -> Self {
        MaekawaNodeState {
            id,
            mode,
            clock: 0,
            stat: Stat::Passive,
            locked_for: None,
            pending: VecDeque::new(),
            requesting: None,
        }
    }

    /// Local request to enter the critical section: stamp it and multicast
    /// REQUEST to the whole group, this node included.
    pub fn on_request_cs(&self, qs: &QuorumSystem) -> Result<MaekawaStep, ProtocolError> {
        if self.stat != Stat::Passive || self.requesting.is_some() {
            return Err(ProtocolError::InvalidRequest {
                node: self.id,
                stat: self.stat,
            });
        }
        let mut next = self.clone();
        next.clock += 1;
        let ts = Timestamp {
            clock: next.clock,
            id: self.id,
        };
        next.requesting = Some(OwnRequest::new(ts));
        next.stat = Stat::Wait;
        let out = qs
            .group(self.id)?
            .iter()
            .map(|&member| {
                (
                    member,
                    Message::Request {
                        origin: self.id,
                        ts,
                    },
                )
            })
            .collect();
        Ok((next, out))
    }

    /// Leaves the critical section: multicast RELEASE to the whole group,
    /// this node included, returning every vote.
    pub fn on_release_cs(&self, qs: &QuorumSystem) -> Result<MaekawaStep, ProtocolError> {
        if self.stat != Stat::Ready {
            return Err(ProtocolError::InvalidRelease {
                node: self.id,
                stat: self.stat,
            });
        }
        let mut next = self.clone();
        next.stat = Stat::Passive;
        next.requesting = None;
        let out = qs
            .group(self.id)?
            .iter()
            .map(|&member| (member, Message::Release { origin: self.id }))
            .collect();
        Ok((next, out))
    }

    pub fn on_message(
        &self,
        qs: &QuorumSystem,
        src: ProcessId,
        msg: Message,
    ) -> Result<MaekawaStep, ProtocolError> {
        let mut next = self.clone();
        next.clock = match &msg {
            Message::Request { ts, .. } => next.clock.max(ts.clock) + 1,
            _ => next.clock + 1,
        };
        let mut out = Vec::new();
        match msg {
            Message::Request { origin, ts } => {
                if src != origin || !qs.group(origin)?.contains(&self.id) {
                    return Err(self.unexpected(src, msg));
                }
                match (&next.locked_for, next.mode) {
                    (None, _) => {
                        next.locked_for = Some(Lock { origin, ts });
                        out.push((origin, Message::Locked { origin: self.id }));
                    }
                    (Some(_), Mode::Basic) => {
                        next.pending.push_back((ts, origin));
                    }
                    (Some(held), Mode::Full) => {
                        if held.ts < ts {
                            out.push((origin, Message::Failed { origin: self.id }));
                        } else {
                            out.push((held.origin, Message::Inquire { origin: self.id }));
                        }
                        next.pending.push_back((ts, origin));
                    }
                }
            }
            Message::Locked { .. } => {
                let group = qs.group(self.id)?;
                let Some(req) = next.requesting.as_mut() else {
                    return Err(self.unexpected(src, msg));
                };
                if !group.contains(&src) {
                    return Err(self.unexpected(src, msg));
                }
                req.grants.insert(src);
                if req.grants == *group {
                    next.stat = Stat::Ready;
                }
            }
            Message::Failed { .. } => {
                if next.mode != Mode::Full || next.stat != Stat::Wait {
                    return Err(self.unexpected(src, msg));
                }
                let req = next.requesting.as_mut().expect("Wait implies requesting");
                req.faileds.insert(src);
                // Probes that were waiting for proof of a conflict get
                // their answer now.
                for arbiter in std::mem::take(&mut req.deferred_inquiries) {
                    if req.grants.remove(&arbiter) {
                        out.push((arbiter, Message::Relinquish { origin: self.id }));
                    }
                }
            }
            Message::Inquire { .. } => {
                if next.mode != Mode::Full {
                    return Err(self.unexpected(src, msg));
                }
                // Only a waiting holder can yield; in the critical section
                // the upcoming RELEASE answers, and when passive the probe
                // is stale. Both absorb silently. Channels are FIFO, so a
                // probe arriving while the sender's vote is held always
                // refers to that hold; one arriving after the vote was
                // already given back finds the sender absent from grants
                // and is likewise stale.
                if next.stat == Stat::Wait {
                    let req = next.requesting.as_mut().expect("Wait implies requesting");
                    if req.grants.contains(&src) {
                        if !req.faileds.is_empty() {
                            req.grants.remove(&src);
                            out.push((src, Message::Relinquish { origin: self.id }));
                        } else {
                            req.deferred_inquiries.insert(src);
                        }
                    }
                }
            }
            Message::Relinquish { .. } => {
                if next.mode != Mode::Full {
                    return Err(self.unexpected(src, msg));
                }
                match next.locked_for.take() {
                    Some(held) if held.origin == src => {
                        next.pending.push_back((held.ts, held.origin));
                        self.grant_next(&mut next, &mut out);
                    }
                    _ => return Err(self.unexpected(src, msg)),
                }
            }
            Message::Release { .. } => match next.locked_for.take() {
                Some(held) if held.origin == src => {
                    self.grant_next(&mut next, &mut out);
                }
                _ => return Err(self.unexpected(src, msg)),
            },
            Message::Req { .. } | Message::Rel { .. } => {
                return Err(self.unexpected(src, msg));
            }
        }
        Ok((next, out))
    }

    /// Hands the free vote to the next pending request: the oldest by
    /// timestamp in full mode, first-come-first-served in basic mode.
    fn grant_next(&self, next: &mut MaekawaNodeState, out: &mut Vec<(ProcessId, Message)>) {
        let pick = match next.mode {
            Mode::Basic => {
                if next.pending.is_empty() {
                    None
                } else {
                    Some(0)
                }
            }
            Mode::Full => next
                .pending
                .iter()
                .enumerate()
                .min_by_key(|&(_, &entry)| entry)
                .map(|(idx, _)| idx),
        };
        if let Some(idx) = pick {
            let (ts, origin) = next.pending.remove(idx).expect("index from enumerate");
            next.locked_for = Some(Lock { origin, ts });
            out.push((origin, Message::Locked { origin: self.id }));
        }
    }

    fn unexpected(&self, src: ProcessId, msg: Message) -> ProtocolError {
        ProtocolError::UnexpectedMessage {
            node: self.id,
            src,
            msg,
        }
    }

    /// Local wait-for edges: while this node's vote is locked, every
    /// pending requester waits on this arbiter.
    pub fn wait_for_edges(&self) -> Vec<(ProcessId, ProcessId)> {
        if self.locked_for.is_none() {
            return Vec::new();
        }
        self.pending
            .iter()
            .map(|&(_, origin)| (origin, self.id))
            .collect()
    }
}
