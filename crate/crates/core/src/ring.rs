//! Ring-circulation mutual exclusion over quorum groups.
//!
//! Each process views its group as an ascending circular list. A request
//! enters the ring at the group minimum and travels successor to successor;
//! every member that forwards it first appends the origin to its local
//! waiting queue, so the origin is queued by each member it passed. When
//! the origin receives its own request back the circulation is complete and
//! it may enter the critical section once it heads its own queue. Releases
//! broadcast to the whole group and push the next queued request onward.
//!
//! A node only forwards the request at the head of its queue; later
//! arrivals park behind it and resume when a release makes them head. A
//! node whose own request has not yet completed the circulation never
//! enters the critical section on becoming head alone: the `circulated`
//! flag records the completed traversal that makes entry safe.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::protocol::{Message, ProtocolError, Stat};
use crate::quorum::{ProcessId, QuorumSystem, RingView};

/// Per-process ring protocol state. Handlers are pure: they borrow the
/// state and return a successor plus the messages to emit, in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingNodeState {
    pub id: ProcessId,
    pub stat: Stat,
    /// This process's own group as a circular ordered list.
    pub group: RingView,
    /// Local waiting queue F: FIFO, head at the front.
    pub queue: VecDeque<ProcessId>,
    /// Whether this node currently blocks on or for a request.
    pub blocked: bool,
    /// True once this node's own request has completed a full traversal
    /// of its ring and returned.
    pub circulated: bool,
}

/// Successor state plus ordered emissions of one handler call.
pub type RingStep = (RingNodeState, Vec<(ProcessId, Message)>);

impl RingNodeState {
    pub fn new(id: ProcessId, group: RingView) -> Self {
        RingNodeState {
            id,
            stat: Stat::Passive,
            group,
            queue: VecDeque::new(),
            blocked: false,
            circulated: false,
        }
    }

    /// Local request to enter the critical section.
    ///
    /// The group minimum queues itself and, if that makes it head, starts
    /// the circulation toward its successor. Any other member hands its
    /// request to the group minimum, where it will queue and eventually
    /// circulate.
    pub fn on_request_cs(&self, _qs: &QuorumSystem) -> Result<RingStep, ProtocolError> {
        if self.stat != Stat::Passive {
            return Err(ProtocolError::InvalidRequest {
                node: self.id,
                stat: self.stat,
            });
        }
        let mut next = self.clone();
        next.stat = Stat::Wait;
        let mut out = Vec::new();
        let min = self.group.min();
        if self.id == min {
            next.queue.push_back(self.id);
            if next.queue.front() == Some(&self.id) {
                out.push((
                    self.group.successor(self.id)?,
                    Message::Req { origin: self.id },
                ));
                next.blocked = true;
            }
        } else {
            out.push((min, Message::Req { origin: self.id }));
        }
        Ok((next, out))
    }

    /// A request from `origin` arrives (possibly this node's own, returned
    /// after full circulation).
    pub fn on_receive_req(
        &self,
        qs: &QuorumSystem,
        origin: ProcessId,
    ) -> Result<RingStep, ProtocolError> {
        let mut next = self.clone();
        let mut out = Vec::new();
        if !next.queue.contains(&origin) {
            next.queue.push_back(origin);
        }
        if origin == self.id {
            next.circulated = true;
            if next.queue.front() == Some(&self.id) {
                next.stat = Stat::Ready;
                next.blocked = true;
            }
        } else if next.queue.front() == Some(&origin) {
            // Head request keeps moving: forward along the origin's ring.
            out.push((
                qs.ring_of(origin)?.successor(self.id)?,
                Message::Req { origin },
            ));
            next.blocked = true;
        }
        Ok((next, out))
    }

    /// Leaves the critical section: releases the whole group and pushes the
    /// next queued request onward.
    pub fn on_release_cs(&self, qs: &QuorumSystem) -> Result<RingStep, ProtocolError> {
        if self.stat != Stat::Ready {
            return Err(ProtocolError::InvalidRelease {
                node: self.id,
                stat: self.stat,
            });
        }
        let mut next = self.clone();
        let mut out = Vec::new();
        for &member in self.group.members() {
            if member != self.id {
                out.push((member, Message::Rel { origin: self.id }));
            }
        }
        debug_assert_eq!(next.queue.front(), Some(&self.id));
        next.queue.pop_front();
        next.stat = Stat::Passive;
        next.circulated = false;
        if let Some(&head) = next.queue.front() {
            out.push((
                qs.ring_of(head)?.successor(self.id)?,
                Message::Req { origin: head },
            ));
            next.blocked = true;
        } else {
            next.blocked = false;
        }
        Ok((next, out))
    }

    /// A release from `releaser` arrives: drop it from the queue and move
    /// the new head forward, into the critical section if the head is this
    /// node's own completed request, onto the ring otherwise.
    pub fn on_receive_rel(
        &self,
        qs: &QuorumSystem,
        releaser: ProcessId,
    ) -> Result<RingStep, ProtocolError> {
        let mut next = self.clone();
        let mut out = Vec::new();
        if let Some(pos) = next.queue.iter().position(|&q| q == releaser) {
            next.queue.remove(pos);
        }
        next.blocked = false;
        if let Some(&head) = next.queue.front() {
            next.blocked = true;
            if head == self.id {
                if next.circulated {
                    next.stat = Stat::Ready;
                } else {
                    // Own deferred request finally heads the queue: start
                    // its circulation now.
                    out.push((
                        self.group.successor(self.id)?,
                        Message::Req { origin: self.id },
                    ));
                }
            } else {
                out.push((
                    qs.ring_of(head)?.successor(self.id)?,
                    Message::Req { origin: head },
                ));
            }
        }
        Ok((next, out))
    }

    /// Local wait-for edges: every queued process except the head waits on
    /// the head.
    pub fn wait_for_edges(&self) -> Vec<(ProcessId, ProcessId)> {
        match self.queue.front() {
            Some(&head) => self
                .queue
                .iter()
                .skip(1)
                .map(|&waiter| (waiter, head))
                .collect(),
            None => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(raw: u32) -> ProcessId {
        ProcessId(raw)
    }

    fn system() -> QuorumSystem {
        QuorumSystem::from_json_str(include_str!("../../../fixtures/quorums_s3.json")).unwrap()
    }

    fn node(qs: &QuorumSystem, id: u32) -> RingNodeState {
        RingNodeState::new(p(id), qs.ring_of(p(id)).unwrap())
    }

    fn req(origin: u32) -> Message {
        Message::Req { origin: p(origin) }
    }

    fn rel(origin: u32) -> Message {
        Message::Rel { origin: p(origin) }
    }

    #[test]
    fn group_minimum_starts_its_own_circulation() {
        let qs = system();
        let before = node(&qs, 2);
        let (after, out) = before.on_request_cs(&qs).unwrap();
        assert_eq!(after.stat, Stat::Wait);
        assert_eq!(after.queue, [p(2)]);
        assert!(after.blocked);
        assert_eq!(out, vec![(p(3), req(2))]);
        // Handlers never mutate their input.
        assert_eq!(before, node(&qs, 2));
    }

    #[test]
    fn non_minimum_hands_its_request_to_the_group_minimum() {
        let qs = system();
        let (after, out) = node(&qs, 9).on_request_cs(&qs).unwrap();
        assert_eq!(after.stat, Stat::Wait);
        assert!(after.queue.is_empty());
        assert!(!after.blocked);
        assert_eq!(out, vec![(p(2), req(9))]);
        let (_, out) = node(&qs, 13).on_request_cs(&qs).unwrap();
        assert_eq!(out, vec![(p(1), req(13))]);
    }

    #[test]
    fn minimum_with_nonempty_queue_defers_its_own_request() {
        let qs = system();
        let mut busy = node(&qs, 2);
        busy.queue.push_back(p(9));
        let (after, out) = busy.on_request_cs(&qs).unwrap();
        assert_eq!(after.queue, [p(9), p(2)]);
        assert!(out.is_empty());
        assert!(!after.blocked);
    }

    #[test]
    fn head_request_is_queued_and_forwarded_along_the_origins_ring() {
        let qs = system();
        let (after, out) = node(&qs, 3).on_receive_req(&qs, p(2)).unwrap();
        assert_eq!(after.queue, [p(2)]);
        assert!(after.blocked);
        // Successor of 3 in origin 2's ring [2,3,7,11].
        assert_eq!(out, vec![(p(7), req(2))]);
        let (_, out) = node(&qs, 1).on_receive_req(&qs, p(13)).unwrap();
        // Successor of 1 in origin 13's ring [1,2,12,13].
        assert_eq!(out, vec![(p(2), req(13))]);
    }

    #[test]
    fn request_behind_the_head_parks_silently() {
        let qs = system();
        let mut holder = node(&qs, 2);
        holder.stat = Stat::Wait;
        holder.queue.push_back(p(2));
        holder.blocked = true;
        // Arrival of Req(9) while own request heads the queue: queued only.
        // The node must not enter the critical section here, only when its
        // own request has returned.
        let (after, out) = holder.on_receive_req(&qs, p(9)).unwrap();
        assert_eq!(after.queue, [p(2), p(9)]);
        assert_eq!(after.stat, Stat::Wait);
        assert!(out.is_empty());
        let (after, out) = after.on_receive_req(&qs, p(13)).unwrap();
        assert_eq!(after.queue, [p(2), p(9), p(13)]);
        assert!(out.is_empty());
        assert_eq!(after.stat, Stat::Wait);
    }

    #[test]
    fn own_returned_request_enters_the_critical_section() {
        let qs = system();
        let mut waiting = node(&qs, 2);
        waiting.stat = Stat::Wait;
        waiting.queue.extend([p(2), p(9), p(13)]);
        waiting.blocked = true;
        let (after, out) = waiting.on_receive_req(&qs, p(2)).unwrap();
        assert_eq!(after.stat, Stat::Ready);
        assert!(after.circulated);
        assert!(after.blocked);
        assert_eq!(after.queue, [p(2), p(9), p(13)]);
        assert!(out.is_empty());
    }

    #[test]
    fn own_returned_request_self_queues_when_absent() {
        let qs = system();
        let mut waiting = node(&qs, 9);
        waiting.stat = Stat::Wait;
        let (after, out) = waiting.on_receive_req(&qs, p(9)).unwrap();
        assert_eq!(after.queue, [p(9)]);
        assert_eq!(after.stat, Stat::Ready);
        assert!(after.circulated);
        assert!(out.is_empty());
    }

    #[test]
    fn release_broadcasts_and_forwards_the_next_head() {
        let qs = system();
        let mut holder = node(&qs, 2);
        holder.stat = Stat::Ready;
        holder.queue.extend([p(2), p(9), p(13)]);
        holder.blocked = true;
        holder.circulated = true;
        let (after, out) = holder.on_release_cs(&qs).unwrap();
        assert_eq!(after.stat, Stat::Passive);
        assert_eq!(after.queue, [p(9), p(13)]);
        assert!(!after.circulated);
        assert!(after.blocked);
        // Rel to the rest of the group in ascending order, then the new
        // head's request moves to the successor of 2 in 9's ring [2,4,8,9].
        assert_eq!(
            out,
            vec![
                (p(3), rel(2)),
                (p(7), rel(2)),
                (p(11), rel(2)),
                (p(4), req(9)),
            ]
        );
    }

    #[test]
    fn release_with_empty_queue_goes_quiet() {
        let qs = system();
        let mut holder = node(&qs, 13);
        holder.stat = Stat::Ready;
        holder.queue.push_back(p(13));
        holder.blocked = true;
        holder.circulated = true;
        let (after, out) = holder.on_release_cs(&qs).unwrap();
        assert_eq!(after.stat, Stat::Passive);
        assert!(after.queue.is_empty());
        assert!(!after.blocked);
        assert_eq!(
            out,
            vec![(p(1), rel(13)), (p(2), rel(13)), (p(12), rel(13))]
        );
    }

    #[test]
    fn release_arrival_unparks_the_next_request() {
        let qs = system();
        let mut keeper = node(&qs, 2);
        keeper.queue.extend([p(9), p(13)]);
        keeper.blocked = true;
        let (after, out) = keeper.on_receive_rel(&qs, p(9)).unwrap();
        assert_eq!(after.queue, [p(13)]);
        assert!(after.blocked);
        // Successor of 2 in 13's ring [1,2,12,13].
        assert_eq!(out, vec![(p(12), req(13))]);
    }

    #[test]
    fn release_arrival_empties_the_queue_quietly() {
        let qs = system();
        let mut keeper = node(&qs, 3);
        keeper.queue.push_back(p(2));
        keeper.blocked = true;
        let (after, out) = keeper.on_receive_rel(&qs, p(2)).unwrap();
        assert!(after.queue.is_empty());
        assert!(!after.blocked);
        assert_eq!(after.stat, Stat::Passive);
        assert!(out.is_empty());
    }

    #[test]
    fn release_arrival_admits_a_circulated_head() {
        let qs = system();
        let mut waiting = node(&qs, 2);
        waiting.stat = Stat::Wait;
        waiting.queue.extend([p(9), p(2)]);
        waiting.circulated = true;
        waiting.blocked = true;
        let (after, out) = waiting.on_receive_rel(&qs, p(9)).unwrap();
        assert_eq!(after.stat, Stat::Ready);
        assert_eq!(after.queue, [p(2)]);
        assert!(out.is_empty());
    }

    #[test]
    fn release_arrival_starts_a_deferred_circulation() {
        let qs = system();
        let mut waiting = node(&qs, 2);
        waiting.stat = Stat::Wait;
        waiting.queue.extend([p(9), p(2)]);
        waiting.blocked = true;
        // Own request was deferred (never sent): once it heads the queue
        // the circulation starts toward the own-ring successor.
        let (after, out) = waiting.on_receive_rel(&qs, p(9)).unwrap();
        assert_eq!(after.stat, Stat::Wait);
        assert!(!after.circulated);
        assert_eq!(after.queue, [p(2)]);
        assert!(after.blocked);
        assert_eq!(out, vec![(p(3), req(2))]);
    }

    #[test]
    fn release_for_an_absent_process_is_harmless() {
        let qs = system();
        let quiet = node(&qs, 5);
        let (after, out) = quiet.on_receive_rel(&qs, p(13)).unwrap();
        assert!(after.queue.is_empty());
        assert!(!after.blocked);
        assert!(out.is_empty());
    }

    #[test]
    fn request_while_not_passive_is_rejected() {
        let qs = system();
        let mut busy = node(&qs, 2);
        busy.stat = Stat::Wait;
        let err = busy.on_request_cs(&qs).unwrap_err();
        assert!(matches!(err, ProtocolError::InvalidRequest { .. }));
        busy.stat = Stat::Passive;
        let err = busy.on_release_cs(&qs).unwrap_err();
        assert!(matches!(err, ProtocolError::InvalidRelease { .. }));
    }

    #[test]
    fn wait_for_edges_point_at_the_queue_head() {
        let qs = system();
        let mut keeper = node(&qs, 2);
        assert!(keeper.wait_for_edges().is_empty());
        keeper.queue.extend([p(2), p(9), p(13)]);
        assert_eq!(keeper.wait_for_edges(), vec![(p(9), p(2)), (p(13), p(2))]);
    }
}
