//! Scripted adversaries and crash triggers.
//!
//! Byzantine nodes run the regular node logic with one outgoing filter or
//! proposal override; they never use keys of other principals.

use crate::crypto::SignatureScheme;
use crate::domain::{Batch, EpochNr, NodeId};
use crate::pbft::{PbftMsg, PrePrepare};
use crate::sb::brb::{BrbKind, BrbMsg};
use crate::sb::{InstanceId, SbMessage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Behavior {
    #[default]
    Correct,
    /// Sends different view-0 proposals to two halves of the other nodes.
    Equivocate,
    /// Attests a wrong Merkle root in every checkpoint.
    WrongCheckpoint,
    /// Proposes only empty batches, every half epoch-change timeout.
    Straggle,
    /// Corrupts a batch in every state transfer response it serves.
    TamperTransfer,
}

impl Behavior {
    pub fn is_byzantine(self) -> bool {
        self != Behavior::Correct
    }
}

/// Crash points tied to protocol progress. Crashes at an absolute time are
/// the simulator's business.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrashTrigger {
    /// On entering the epoch, before any proposal.
    EpochStart(EpochNr),
    /// Right before proposing the last sequence number of the node's own
    /// segment in the epoch.
    EpochEnd(EpochNr),
}

/// The second value an equivocating sender hands out: the proposal minus its
/// last request, or nil if there is nothing to drop.
pub fn twin(batch: &Batch) -> Batch {
    let reqs = batch.requests();
    if reqs.is_empty() {
        Batch::Nil
    } else {
        Batch::new(reqs[..reqs.len() - 1].to_vec())
    }
}

/// Splits an outgoing sender proposal into `(value, recipients)` pairs, one
/// per half of `others`. Returns `None` for messages that are not an
/// initial proposal of `me`.
pub fn equivocate(
    inst: InstanceId,
    me: NodeId,
    msg: &SbMessage,
    others: &[NodeId],
    scheme: &dyn SignatureScheme,
) -> Option<Vec<(SbMessage, Vec<NodeId>)>> {
    let half = others.len().div_ceil(2);
    let (a, b) = others.split_at(half);
    let alt = match msg {
        SbMessage::Pbft(PbftMsg::PrePrepare(pp)) if pp.view == 0 => SbMessage::Pbft(
            PbftMsg::PrePrepare(PrePrepare::signed(inst, 0, pp.sn, twin(&pp.batch), me, scheme)),
        ),
        SbMessage::Brb(BrbMsg {
            sn,
            kind: BrbKind::Send(batch),
        }) => SbMessage::Brb(BrbMsg {
            sn: *sn,
            kind: BrbKind::Send(twin(batch)),
        }),
        _ => return None,
    };
    Some(vec![(msg.clone(), a.to_vec()), (alt, b.to_vec())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::MacScheme;
    use crate::domain::{Request, RequestId};
    use std::sync::Arc;

    #[test]
    fn twin_drops_last_request() {
        let s = MacScheme::default();
        let reqs: Vec<Request> = (0..3)
            .map(|t| Request::new_signed(RequestId::new(0, t), Arc::from(vec![1u8]), &s))
            .collect();
        let b = Batch::new(reqs.clone());
        assert_eq!(twin(&b), Batch::new(reqs[..2].to_vec()));
        assert!(twin(&Batch::empty()).is_nil());
    }

    #[test]
    fn split_halves() {
        let s = MacScheme::default();
        let inst = InstanceId { epoch: 0, index: 0 };
        let pp = PrePrepare::signed(inst, 0, 0, Batch::empty(), 0, &s);
        let msg = SbMessage::Pbft(PbftMsg::PrePrepare(pp));
        let parts = equivocate(inst, 0, &msg, &[1, 2, 3], &s).unwrap();
        assert_eq!(parts[0].1, vec![1, 2]);
        assert_eq!(parts[1].1, vec![3]);
        let vc = PrePrepare::signed(inst, 1, 0, Batch::Nil, 0, &s);
        assert!(equivocate(inst, 0, &SbMessage::Pbft(PbftMsg::PrePrepare(vc)), &[1], &s).is_none());
    }
}
