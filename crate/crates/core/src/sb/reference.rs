//! Sequenced broadcast built from reliable broadcast and consensus.
//!
//! Per sequence number the sender reliably broadcasts its batch; every node
//! proposes the delivered batch to a consensus instance, or nil for all slots
//! it has not proposed yet once the sender is suspected after
//! initialization. The consensus decision is what gets delivered.
//!
//! Consensus comes either from an external [`Adjudicator`] or from a
//! [`PbftEngine`] in consensus mode.

use std::collections::{BTreeMap, BTreeSet};

use crate::domain::{Batch, NodeId, SeqNr};
use crate::pbft::{PbftConfig, PbftEngine, PbftMode};
use crate::sb::brb::{BrbAction, BrbKind, BrbMsg, Bracha};
use crate::sb::{
    CastError, Dest, InstanceId, SbContext, SbMessage, SbOutput, SbParams, SbTimer,
    SequencedBroadcast,
};

/// Sender id used for messages coming from the consensus adjudicator.
pub const ADJUDICATOR: NodeId = usize::MAX;

pub enum Consensus {
    /// Decisions arrive as [`SbMessage::Decide`] from [`ADJUDICATOR`].
    External,
    Pbft(Box<PbftEngine>),
}

pub struct ReferenceSb {
    p: SbParams,
    initialized: bool,
    proposed: Vec<bool>,
    cast: Vec<bool>,
    brb: Vec<Bracha<Batch>>,
    decided: Vec<bool>,
    num_decided: usize,
    consensus: Consensus,
}

impl ReferenceSb {
    pub fn new(p: SbParams, n: usize, f: usize, pbft: Option<PbftConfig>) -> Self {
        let k = p.seq_nrs.len();
        let brb = (0..k).map(|_| Bracha::new(p.me, n, f, p.sender)).collect();
        let consensus = match pbft {
            None => Consensus::External,
            Some(mut cfg) => {
                cfg.mode = PbftMode::Consensus;
                Consensus::Pbft(Box::new(PbftEngine::new(p.clone(), cfg)))
            }
        };
        ReferenceSb {
            p,
            initialized: false,
            proposed: vec![false; k],
            cast: vec![false; k],
            brb,
            decided: vec![false; k],
            num_decided: 0,
            consensus,
        }
    }

    fn propose(&mut self, pos: usize, value: Batch, cx: &mut SbContext) {
        if self.proposed[pos] {
            return;
        }
        self.proposed[pos] = true;
        let sn = self.p.seq_nrs[pos];
        match &mut self.consensus {
            Consensus::External => cx.out.push(SbOutput::Propose { sn, value }),
            Consensus::Pbft(e) => e.propose(sn, value, cx),
        }
    }

    fn abort(&mut self, cx: &mut SbContext) {
        for pos in 0..self.proposed.len() {
            self.propose(pos, Batch::Nil, cx);
        }
    }

    fn brb_actions(&mut self, pos: usize, acts: Vec<BrbAction<Batch>>, cx: &mut SbContext) {
        let sn = self.p.seq_nrs[pos];
        for a in acts {
            match a {
                BrbAction::Echo(b) => cx.send(
                    Dest::AllOthers,
                    SbMessage::Brb(BrbMsg {
                        sn,
                        kind: BrbKind::Echo(b),
                    }),
                ),
                BrbAction::Ready(d) => cx.send(
                    Dest::AllOthers,
                    SbMessage::Brb(BrbMsg {
                        sn,
                        kind: BrbKind::Ready(d),
                    }),
                ),
                BrbAction::Deliver(b) => {
                    if self.proposed[pos] {
                        continue;
                    }
                    let value = if b.is_nil() {
                        Batch::Nil
                    } else {
                        match cx.validator.validate(&b) {
                            Ok(()) => {
                                cx.validator.record(&b);
                                b
                            }
                            Err(reason) => {
                                cx.out.push(SbOutput::Rejected {
                                    sn,
                                    from: self.p.sender,
                                    reason,
                                });
                                Batch::Nil
                            }
                        }
                    };
                    self.propose(pos, value, cx);
                }
            }
        }
    }

    fn note_deliveries(&mut self, from: usize, cx: &mut SbContext) {
        for o in &cx.out[from..] {
            if let SbOutput::Deliver { sn, .. } = o {
                if let Some(pos) = self.p.position(*sn) {
                    if !self.decided[pos] {
                        self.decided[pos] = true;
                        self.num_decided += 1;
                    }
                }
            }
        }
    }
}

impl SequencedBroadcast for ReferenceSb {
    fn params(&self) -> &SbParams {
        &self.p
    }

    fn init(&mut self, cx: &mut SbContext) {
        assert!(!self.initialized, "instance {} initialized twice", self.p.id);
        self.initialized = true;
        let mark = cx.out.len();
        if let Consensus::Pbft(e) = &mut self.consensus {
            e.init(cx);
        }
        if cx.suspected.contains(&self.p.sender) {
            self.abort(cx);
        }
        self.note_deliveries(mark, cx);
    }

    fn cast(&mut self, sn: SeqNr, batch: Batch, cx: &mut SbContext) -> Result<(), CastError> {
        if self.p.me != self.p.sender {
            return Err(CastError::NotSender(self.p.me));
        }
        let pos = self.p.position(sn).ok_or(CastError::OutOfRange(sn))?;
        if self.cast[pos] {
            return Err(CastError::AlreadyCast(sn));
        }
        self.cast[pos] = true;
        cx.send(
            Dest::AllOthers,
            SbMessage::Brb(BrbMsg {
                sn,
                kind: BrbKind::Send(batch.clone()),
            }),
        );
        let d = batch.digest();
        let acts = self.brb[pos].cast(batch, d);
        let mark = cx.out.len();
        self.brb_actions(pos, acts, cx);
        self.note_deliveries(mark, cx);
        Ok(())
    }

    fn ready_for_cast(&self) -> bool {
        self.initialized && self.p.me == self.p.sender
    }

    fn on_message(&mut self, from: NodeId, msg: SbMessage, cx: &mut SbContext) {
        let mark = cx.out.len();
        match msg {
            SbMessage::Brb(BrbMsg { sn, kind }) => {
                let Some(pos) = self.p.position(sn) else {
                    return;
                };
                if from == self.p.me {
                    return;
                }
                let acts = match kind {
                    BrbKind::Send(b) => {
                        let d = b.recompute_digest();
                        self.brb[pos].on_send(from, b, d)
                    }
                    BrbKind::Echo(b) => {
                        let d = b.recompute_digest();
                        self.brb[pos].on_echo(from, b, d)
                    }
                    BrbKind::Ready(d) => self.brb[pos].on_ready(from, d),
                };
                self.brb_actions(pos, acts, cx);
            }
            SbMessage::Pbft(m) => {
                if let Consensus::Pbft(e) = &mut self.consensus {
                    e.on_message(from, m, cx);
                }
            }
            SbMessage::Decide { sn, value } => {
                if from != ADJUDICATOR || !matches!(self.consensus, Consensus::External) {
                    return;
                }
                if let Some(pos) = self.p.position(sn) {
                    if !self.decided[pos] {
                        cx.out.push(SbOutput::Deliver { sn, value });
                    }
                }
            }
            SbMessage::Raft(_) => {}
        }
        self.note_deliveries(mark, cx);
    }

    fn on_timer(&mut self, timer: SbTimer, cx: &mut SbContext) {
        let mark = cx.out.len();
        if let Consensus::Pbft(e) = &mut self.consensus {
            e.on_timer(timer, cx);
        }
        self.note_deliveries(mark, cx);
    }

    fn on_suspect(&mut self, node: NodeId, cx: &mut SbContext) {
        if self.initialized && node == self.p.sender {
            let mark = cx.out.len();
            self.abort(cx);
            self.note_deliveries(mark, cx);
        }
    }

    fn is_complete(&self) -> bool {
        self.num_decided == self.decided.len()
    }
}

/// Ideal consensus: sees every proposal and decides the lowest-id correct
/// node's proposal once all correct nodes have proposed. When the correct
/// proposals agree this is their common value.
#[derive(Debug, Default)]
pub struct Adjudicator {
    correct: BTreeSet<NodeId>,
    proposals: BTreeMap<(InstanceId, SeqNr), BTreeMap<NodeId, Batch>>,
    decided: BTreeMap<(InstanceId, SeqNr), Batch>,
}

impl Adjudicator {
    pub fn new(correct: BTreeSet<NodeId>) -> Self {
        Adjudicator {
            correct,
            ..Default::default()
        }
    }

    /// Records a proposal; returns the decision when it becomes available.
    pub fn propose(
        &mut self,
        inst: InstanceId,
        sn: SeqNr,
        node: NodeId,
        value: Batch,
    ) -> Option<Batch> {
        if self.decided.contains_key(&(inst, sn)) {
            return None;
        }
        let props = self.proposals.entry((inst, sn)).or_default();
        props.entry(node).or_insert(value);
        if !self.correct.iter().all(|c| props.contains_key(c)) {
            return None;
        }
        let lowest = self.correct.iter().next()?;
        let decision = props[lowest].clone();
        self.proposals.remove(&(inst, sn));
        self.decided.insert((inst, sn), decision.clone());
        Some(decision)
    }

    pub fn decision(&self, inst: InstanceId, sn: SeqNr) -> Option<&Batch> {
        self.decided.get(&(inst, sn))
    }
}
