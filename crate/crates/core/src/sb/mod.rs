//! Sequenced broadcast: the per-segment ordering primitive.
//!
//! An instance has a designated sender, a finite set of sequence numbers and
//! an admissibility predicate. Every correct node eventually delivers exactly
//! one value per sequence number, which is either a batch cast by the sender
//! or nil once the sender got suspected.
//!
//! Implementations are event-driven state machines. They never touch the
//! network or clock directly; all effects go to [`SbContext::out`].

pub mod brb;
pub mod reference;

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::crypto::SignatureScheme;
use crate::domain::{Batch, EpochNr, NodeId, SeqNr, Time};
use crate::pbft::PbftMsg;
use crate::raft::RaftMsg;

pub use brb::BrbMsg;

/// Identifies one instance: the segment of leader index `index` in `epoch`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct InstanceId {
    pub epoch: EpochNr,
    pub index: u32,
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}/s{}", self.epoch, self.index)
    }
}

/// Messages exchanged between the replicas of one instance.
#[derive(Clone, Debug)]
pub enum SbMessage {
    Pbft(PbftMsg),
    Raft(RaftMsg),
    Brb(BrbMsg),
    /// Decision of the external consensus adjudicator for one slot.
    Decide { sn: SeqNr, value: Batch },
}

impl SbMessage {
    pub fn wire_size(&self) -> usize {
        match self {
            SbMessage::Pbft(m) => m.wire_size(),
            SbMessage::Raft(m) => m.wire_size(),
            SbMessage::Brb(m) => m.wire_size(),
            SbMessage::Decide { value, .. } => 8 + value.wire_size(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dest {
    AllOthers,
    Node(NodeId),
}

/// Timers an instance can arm. The generation lets the instance discard
/// expiries that were superseded in the meantime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SbTimer {
    Liveness { gen: u64 },
    Election { gen: u64 },
    Heartbeat,
}

/// Why a follower refused a proposal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectReason {
    /// Bad signature, unknown client or timestamp outside the watermarks.
    InvalidRequest,
    /// A request already proposed in this epoch or already committed.
    Duplicate,
    /// A request outside the segment's buckets.
    ForeignBucket,
    /// Nil from the initial leader, or a proposal from a non-leader.
    BadSender,
    /// Batch too large or with repeated request ids.
    Malformed,
    /// Cached digest does not match the content.
    DigestMismatch,
}

impl RejectReason {
    pub fn code(self) -> u8 {
        match self {
            RejectReason::InvalidRequest => 0,
            RejectReason::Duplicate => 1,
            RejectReason::ForeignBucket => 2,
            RejectReason::BadSender => 3,
            RejectReason::Malformed => 4,
            RejectReason::DigestMismatch => 5,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => RejectReason::InvalidRequest,
            1 => RejectReason::Duplicate,
            2 => RejectReason::ForeignBucket,
            3 => RejectReason::BadSender,
            4 => RejectReason::Malformed,
            5 => RejectReason::DigestMismatch,
            _ => return None,
        })
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::InvalidRequest => "invalid request",
            RejectReason::Duplicate => "duplicate request",
            RejectReason::ForeignBucket => "foreign bucket",
            RejectReason::BadSender => "bad sender",
            RejectReason::Malformed => "malformed batch",
            RejectReason::DigestMismatch => "digest mismatch",
        };
        f.write_str(s)
    }
}

/// Effects produced by an instance.
#[derive(Clone, Debug)]
pub enum SbOutput {
    Send { to: Dest, msg: SbMessage },
    Timer { after: Time, timer: SbTimer },
    Deliver { sn: SeqNr, value: Batch },
    /// The instance's own timers suspect `node`.
    Suspect(NodeId),
    Restore(NodeId),
    Rejected { sn: SeqNr, from: NodeId, reason: RejectReason },
    /// This node became leader of `term` (Raft) or primary of a view (PBFT).
    Elected { term: u64 },
    /// Proposal to the external consensus adjudicator.
    Propose { sn: SeqNr, value: Batch },
}

/// Admissibility predicate over proposed batches, supplied by the embedding
/// node. `record` is called once a proposal has been accepted.
pub trait ProposalValidator {
    fn validate(&mut self, batch: &Batch) -> Result<(), RejectReason>;
    fn record(&mut self, batch: &Batch);
}

/// Accepts everything. Used by standalone instance harnesses.
pub struct AcceptAll;

impl ProposalValidator for AcceptAll {
    fn validate(&mut self, _batch: &Batch) -> Result<(), RejectReason> {
        Ok(())
    }
    fn record(&mut self, _batch: &Batch) {}
}

pub struct SbContext<'a> {
    pub now: Time,
    pub scheme: &'a dyn SignatureScheme,
    pub validator: &'a mut dyn ProposalValidator,
    /// Nodes currently suspected by the node's failure detector.
    pub suspected: &'a BTreeSet<NodeId>,
    pub out: &'a mut Vec<SbOutput>,
}

impl SbContext<'_> {
    pub fn send(&mut self, to: Dest, msg: SbMessage) {
        self.out.push(SbOutput::Send { to, msg });
    }

    pub fn timer(&mut self, after: Time, timer: SbTimer) {
        self.out.push(SbOutput::Timer { after, timer });
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CastError {
    #[error("node {0} is not the sender of this instance")]
    NotSender(NodeId),
    #[error("sequence number {0} is outside the instance")]
    OutOfRange(SeqNr),
    #[error("sequence number {0} was already cast")]
    AlreadyCast(SeqNr),
    #[error("instance is not accepting proposals")]
    NotReady,
    #[error("instance not initialized")]
    NotInitialized,
}

/// Static parameters of one instance.
#[derive(Clone, Debug)]
pub struct SbParams {
    pub id: InstanceId,
    pub me: NodeId,
    pub sender: NodeId,
    pub seq_nrs: Vec<SeqNr>,
}

impl SbParams {
    pub fn position(&self, sn: SeqNr) -> Option<usize> {
        self.seq_nrs.binary_search(&sn).ok()
    }
}

pub trait SequencedBroadcast {
    fn params(&self) -> &SbParams;

    fn init(&mut self, cx: &mut SbContext);

    /// Casts `batch` at `sn`. Only the sender may call this, at most once
    /// per sequence number.
    fn cast(&mut self, sn: SeqNr, batch: Batch, cx: &mut SbContext) -> Result<(), CastError>;

    /// Whether the sender may cast another batch right now.
    fn ready_for_cast(&self) -> bool;

    fn on_message(&mut self, from: NodeId, msg: SbMessage, cx: &mut SbContext);

    fn on_timer(&mut self, timer: SbTimer, cx: &mut SbContext);

    fn on_suspect(&mut self, node: NodeId, cx: &mut SbContext);

    fn on_restore(&mut self, _node: NodeId, _cx: &mut SbContext) {}

    /// All sequence numbers delivered locally.
    fn is_complete(&self) -> bool;
}
