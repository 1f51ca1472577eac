//! Protocol core for a multi-leader state machine replication system.
//!
//! Independent instances of a sequenced broadcast primitive (one per segment
//! of an epoch) are multiplexed into a single totally ordered log. Requests
//! are partitioned into buckets that rotate across leaders every epoch.
//!
//! The crate is purely event driven: every component is a deterministic state
//! machine that consumes messages and timer expiries and produces effects. The
//! `iss-sim` crate drives these machines over a simulated network.

pub mod buckets;
pub mod client;
pub mod crypto;
pub mod domain;
pub mod fd;
pub mod iss;
pub mod pbft;
pub mod policies;
pub mod raft;
pub mod sb;

pub use domain::{
    Batch, ClientId, EpochNr, Log, NodeConfig, NodeId, Request, RequestId, Segment, SeqNr, Time,
};

/// One millisecond of simulated time.
pub const MS: Time = 1_000_000;
/// One second of simulated time.
pub const SEC: Time = 1_000_000_000;
