//! Verification engine for networks with mutable datapaths.
//!
//! Middlebox behavior is modeled in a small guarded-command language and
//! checked against reachability (isolation) invariants under scheduling,
//! classification, and failure nondeterminism. Static switching collapses
//! into per-failure-scenario transfer functions around a single pseudo-node.
//! Two engines share the semantics: an explicit-state bounded search and an
//! SMT-LIB2 emission for external solvers. Networks scale through slices
//! built from state-behavior classification, policy equivalence classes,
//! and invariant symmetry groups.

pub mod bmc;
pub mod invariant;
pub mod logic;
pub mod mbx;
pub mod net;
pub mod netfunc;
pub mod network;
pub mod slicer;
pub mod smt;
pub mod trace;

pub use invariant::{Invariant, Predicate, Verdict, VerdictKind};
pub use net::{Address, ContentId, FlowId, NodeId, NodeKind, Packet, Port, Universe};
pub use network::{Network, NetworkBuilder};
pub use trace::{validate_trace, Event, Trace, TraceStep};
