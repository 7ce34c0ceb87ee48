//! Quorum-based distributed mutual exclusion.
//!
//! The crate has three layers:
//!
//! * **Protocol state machines** ([`ring`], [`maekawa`]): pure per-node
//!   handlers. A handler takes a node state plus one event and returns the
//!   successor state together with an ordered outbox of messages. Nothing in
//!   this layer performs I/O or reads a clock, which is what lets the same
//!   handlers back both the simulator and the explorer.
//! * **Quorum systems** ([`quorum`]): the static group configuration every
//!   node reads, its four structural validation conditions, and a
//!   deterministic generator for systems of size n = k(k-1)+1.
//! * **Engines** ([`simnet`], [`explorer`]): a deterministic discrete-event
//!   simulator with FIFO channels and scripted or randomized delivery order,
//!   and a bounded depth-first explorer that enumerates delivery
//!   interleavings, checks mutual exclusion at every reachable state, and
//!   reports deadlocks with replayable counterexamples.
//!
//! [`fixtures`] bundles the quorum tables and scripted scenarios used by the
//! golden replay tests and the `replay-paper` CLI command.

pub mod explorer;
pub mod fixtures;
pub mod maekawa;
pub mod protocol;
pub mod quorum;
pub mod ring;
pub mod simnet;

pub use explorer::{DeadlockVerdict, ExploreConfig, ExploreError, SafetyVerdict, Verdict};
pub use protocol::{Algo, Envelope, Event, Message, NodeState, ProtocolError, Stat};
pub use quorum::{ProcessId, QuorumError, QuorumSystem, RingView, ValidationReport};
pub use simnet::{Outcome, RunStats, Scenario, SimError, SimReport, SimWorld, TraceRecord};
