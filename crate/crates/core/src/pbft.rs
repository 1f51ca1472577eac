//! PBFT over the sequence numbers of one segment.
//!
//! The segment leader is the primary of view 0 and the only node that may
//! introduce values. After a view change the new primary re-proposes values
//! with a prepared certificate and nil everywhere else, so nothing the segment
//! leader never proposed can be committed. View changes and certificates are
//! signed.
//!
//! The same engine also runs in [`PbftMode::Consensus`], where every node
//! brings its own proposal per slot and the engine acts as a multi-slot
//! Byzantine consensus for the reference broadcast construction. There a
//! follower only accepts the view-0 value if it equals its own proposal, and a
//! new primary without a certificate may pick a value backed by `f+1` view
//! change reports.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{Digest, Hasher, Principal, Signature, SignatureScheme};
use crate::domain::{Batch, NodeId, SeqNr, Time};
use crate::sb::{
    CastError, Dest, InstanceId, RejectReason, SbContext, SbMessage, SbOutput, SbParams, SbTimer,
    SequencedBroadcast,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PbftMode {
    Direct,
    Consensus,
}

#[derive(Clone, Debug)]
pub struct PbftConfig {
    pub n: usize,
    pub f: usize,
    pub mode: PbftMode,
    /// Initial liveness timeout; doubles with every unsuccessful view change.
    pub timeout: Time,
    /// Maximum number of uncommitted pre-prepares of the view-0 primary.
    pub max_inflight: usize,
    pub quorum_override: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct PrePrepare {
    pub view: u64,
    pub sn: SeqNr,
    pub batch: Batch,
    pub sig: Signature,
}

impl PrePrepare {
    /// A pre-prepare signed by `signer`.
    pub fn signed(
        inst: InstanceId,
        view: u64,
        sn: SeqNr,
        batch: Batch,
        signer: NodeId,
        scheme: &dyn SignatureScheme,
    ) -> PrePrepare {
        let sig = scheme.sign(
            Principal::Node(signer),
            &preprepare_bytes(inst, view, sn, &batch.digest()),
        );
        PrePrepare {
            view,
            sn,
            batch,
            sig,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vote {
    pub view: u64,
    pub sn: SeqNr,
    pub digest: Digest,
    pub signer: NodeId,
    pub sig: Signature,
}

/// A pre-prepare together with matching prepares from distinct backups.
#[derive(Clone, Debug)]
pub struct PreparedCert {
    pub preprepare: PrePrepare,
    pub prepares: Vec<Vote>,
}

#[derive(Clone, Debug)]
pub struct ViewChange {
    pub view: u64,
    pub signer: NodeId,
    pub prepared: Vec<PreparedCert>,
    /// Consensus mode: the sender's own proposals for uncommitted slots.
    pub proposals: Vec<(SeqNr, Batch)>,
    pub sig: Signature,
}

#[derive(Clone, Debug)]
pub struct NewView {
    pub view: u64,
    pub view_changes: Vec<ViewChange>,
    pub preprepares: Vec<PrePrepare>,
}

#[derive(Clone, Debug)]
pub enum PbftMsg {
    PrePrepare(PrePrepare),
    Prepare(Vote),
    Commit(Vote),
    ViewChange(ViewChange),
    NewView(NewView),
    /// Asks for the pre-prepare of `view` at `sn` after seeing a commit
    /// quorum for a value this node does not have.
    Fetch { view: u64, sn: SeqNr },
    Value(PrePrepare),
}

impl PbftMsg {
    pub fn wire_size(&self) -> usize {
        const VOTE: usize = 8 + 8 + 32 + 4 + 32;
        fn cert(c: &PreparedCert) -> usize {
            48 + c.preprepare.batch.wire_size() + c.prepares.len() * VOTE
        }
        fn vc(v: &ViewChange) -> usize {
            48 + v.prepared.iter().map(cert).sum::<usize>()
                + v.proposals.iter().map(|(_, b)| 8 + b.wire_size()).sum::<usize>()
        }
        1 + match self {
            PbftMsg::PrePrepare(p) | PbftMsg::Value(p) => 48 + p.batch.wire_size(),
            PbftMsg::Fetch { .. } => 16,
            PbftMsg::Prepare(_) | PbftMsg::Commit(_) => VOTE,
            PbftMsg::ViewChange(v) => vc(v),
            PbftMsg::NewView(nv) => {
                8 + nv.view_changes.iter().map(vc).sum::<usize>()
                    + nv
                        .preprepares
                        .iter()
                        .map(|p| 48 + p.batch.wire_size())
                        .sum::<usize>()
            }
        }
    }
}

fn inst_hasher(domain: &[u8], id: InstanceId) -> Hasher {
    let mut h = Hasher::new(domain);
    h.u64(id.epoch).u64(id.index as u64);
    h
}

fn preprepare_bytes(id: InstanceId, view: u64, sn: SeqNr, d: &Digest) -> [u8; 32] {
    let mut h = inst_hasher(b"pbft-preprepare", id);
    h.u64(view).u64(sn).digest(d);
    h.finish().0
}

fn vote_bytes(commit: bool, id: InstanceId, view: u64, sn: SeqNr, d: &Digest) -> [u8; 32] {
    let domain: &[u8] = if commit { b"pbft-commit" } else { b"pbft-prepare" };
    let mut h = inst_hasher(domain, id);
    h.u64(view).u64(sn).digest(d);
    h.finish().0
}

fn view_change_bytes(id: InstanceId, vc: &ViewChange) -> [u8; 32] {
    let mut h = inst_hasher(b"pbft-viewchange", id);
    h.u64(vc.view).u64(vc.signer as u64);
    h.u64(vc.prepared.len() as u64);
    for c in &vc.prepared {
        h.u64(c.preprepare.view)
            .u64(c.preprepare.sn)
            .digest(&c.preprepare.batch.digest());
    }
    h.u64(vc.proposals.len() as u64);
    for (sn, b) in &vc.proposals {
        h.u64(*sn).digest(&b.digest());
    }
    h.finish().0
}

#[derive(Clone, Debug, Default)]
struct Slot {
    /// Pre-prepare accepted in the current view.
    pp: Option<PrePrepare>,
    /// Highest-view prepared certificate.
    cert: Option<PreparedCert>,
    commit_sent: Option<u64>,
    committed: Option<Batch>,
    /// Consensus mode: this node's own proposal.
    own: Option<Batch>,
    /// Consensus mode: view-0 pre-prepare waiting for the own proposal.
    buffered: Option<PrePrepare>,
    /// Validly signed pre-prepares this node did not vote for: stale ones,
    /// rejected ones and fetched ones. Any of them is decided once a commit
    /// quorum for it shows up.
    foreign: Vec<PrePrepare>,
    cast: bool,
}

pub struct PbftEngine {
    p: SbParams,
    cfg: PbftConfig,
    view: u64,
    /// False while waiting for the new-view message of `view`.
    active: bool,
    initialized: bool,
    slots: Vec<Slot>,
    prepares: BTreeMap<(u64, usize), BTreeMap<NodeId, Vote>>,
    commits: BTreeMap<(u64, usize), BTreeMap<NodeId, Vote>>,
    view_changes: BTreeMap<u64, BTreeMap<NodeId, ViewChange>>,
    vc_sent: BTreeSet<u64>,
    nv_sent: BTreeSet<u64>,
    /// Consensus mode: a view change we owe but cannot send before all own
    /// proposals are known.
    vc_pending: Option<u64>,
    fetched: BTreeSet<(u64, usize)>,
    timeout: Time,
    timer_gen: u64,
    timer_armed: bool,
    num_committed: usize,
}

impl PbftEngine {
    pub fn new(p: SbParams, cfg: PbftConfig) -> Self {
        let slots = vec![Slot::default(); p.seq_nrs.len()];
        let timeout = cfg.timeout;
        PbftEngine {
            p,
            cfg,
            view: 0,
            active: true,
            initialized: false,
            slots,
            prepares: BTreeMap::new(),
            commits: BTreeMap::new(),
            view_changes: BTreeMap::new(),
            vc_sent: BTreeSet::new(),
            nv_sent: BTreeSet::new(),
            vc_pending: None,
            fetched: BTreeSet::new(),
            timeout,
            timer_gen: 0,
            timer_armed: false,
            num_committed: 0,
        }
    }

    pub fn params(&self) -> &SbParams {
        &self.p
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn primary(&self, view: u64) -> NodeId {
        ((self.p.sender as u64 + view) % self.cfg.n as u64) as NodeId
    }

    fn me(&self) -> NodeId {
        self.p.me
    }

    fn commit_quorum(&self) -> usize {
        self.cfg.quorum_override.unwrap_or(2 * self.cfg.f + 1)
    }

    /// Prepares needed on top of the pre-prepare.
    fn prepare_quorum(&self) -> usize {
        self.commit_quorum().saturating_sub(1)
    }

    fn vc_quorum(&self) -> usize {
        2 * self.cfg.f + 1
    }

    pub fn is_complete(&self) -> bool {
        self.num_committed == self.slots.len()
    }

    pub fn committed(&self, sn: SeqNr) -> Option<&Batch> {
        let pos = self.p.position(sn)?;
        self.slots[pos].committed.as_ref()
    }

    fn inflight(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.cast && s.committed.is_none())
            .count()
    }

    pub fn ready_for_cast(&self) -> bool {
        self.initialized
            && self.view == 0
            && self.active
            && self.p.me == self.p.sender
            && self.inflight() < self.cfg.max_inflight
    }

    pub fn init(&mut self, cx: &mut SbContext) {
        self.initialized = true;
        self.maybe_arm(cx);
    }

    // ---- timers ----

    fn wants_timer(&self) -> bool {
        if !self.initialized || self.is_complete() {
            return false;
        }
        match self.cfg.mode {
            PbftMode::Direct => true,
            PbftMode::Consensus => {
                !self.active
                    || self
                        .slots
                        .iter()
                        .any(|s| s.committed.is_none() && s.own.is_some())
            }
        }
    }

    fn arm(&mut self, cx: &mut SbContext) {
        self.timer_gen += 1;
        self.timer_armed = true;
        cx.timer(self.timeout, SbTimer::Liveness { gen: self.timer_gen });
    }

    fn maybe_arm(&mut self, cx: &mut SbContext) {
        if !self.timer_armed && self.wants_timer() {
            self.arm(cx);
        }
    }

    fn disarm(&mut self) {
        self.timer_gen += 1;
        self.timer_armed = false;
    }

    pub fn on_timer(&mut self, t: SbTimer, cx: &mut SbContext) {
        let SbTimer::Liveness { gen } = t else {
            return;
        };
        if gen != self.timer_gen || !self.timer_armed {
            return;
        }
        self.timer_armed = false;
        if !self.wants_timer() {
            return;
        }
        if self.cfg.mode == PbftMode::Direct {
            cx.out.push(SbOutput::Suspect(self.primary(self.view)));
        }
        self.timeout = self.timeout.saturating_mul(2);
        let next = self.view + 1;
        self.start_view_change(next, cx);
        self.arm(cx);
    }

    // ---- normal case ----

    /// Direct mode: the segment leader proposes `batch` for `sn`.
    pub fn cast(&mut self, sn: SeqNr, batch: Batch, cx: &mut SbContext) -> Result<(), CastError> {
        if self.me() != self.p.sender {
            return Err(CastError::NotSender(self.me()));
        }
        if !self.initialized {
            return Err(CastError::NotInitialized);
        }
        let pos = self.p.position(sn).ok_or(CastError::OutOfRange(sn))?;
        if self.slots[pos].cast {
            return Err(CastError::AlreadyCast(sn));
        }
        if !self.ready_for_cast() {
            return Err(CastError::NotReady);
        }
        self.slots[pos].cast = true;
        self.send_preprepare(pos, batch, cx);
        Ok(())
    }

    fn send_preprepare(&mut self, pos: usize, batch: Batch, cx: &mut SbContext) {
        let sn = self.p.seq_nrs[pos];
        let pp = PrePrepare::signed(self.p.id, self.view, sn, batch, self.me(), cx.scheme);
        cx.send(Dest::AllOthers, SbMessage::Pbft(PbftMsg::PrePrepare(pp.clone())));
        self.slots[pos].pp = Some(pp);
        self.check_prepared(self.view, pos, cx);
    }

    /// Consensus mode: this node's proposal for `sn`.
    pub fn propose(&mut self, sn: SeqNr, value: Batch, cx: &mut SbContext) {
        let Some(pos) = self.p.position(sn) else {
            return;
        };
        if self.slots[pos].own.is_some() {
            return;
        }
        self.slots[pos].own = Some(value.clone());
        if self.view == 0
            && self.active
            && self.me() == self.primary(0)
            && !value.is_nil()
            && self.slots[pos].pp.is_none()
        {
            self.slots[pos].cast = true;
            self.send_preprepare(pos, value, cx);
        } else if let Some(pp) = self.slots[pos].buffered.take() {
            if self.view == 0 && self.active && pp.batch == value {
                self.accept_preprepare(pos, pp, cx);
            } else {
                self.remember(pos, pp, cx);
            }
        }
        self.maybe_arm(cx);
        self.flush_pending_vc(cx);
    }

    fn on_preprepare(&mut self, from: NodeId, pp: PrePrepare, cx: &mut SbContext) {
        let Some(pos) = self.p.position(pp.sn) else {
            return;
        };
        if from != self.primary(pp.view) || !self.signed_by_primary(&pp, cx.scheme) {
            return;
        }
        if pp.view < self.view || (pp.view == self.view && !self.active) {
            // arrived too late to vote; may still be decided by others
            if pp.view == 0 && pp.batch.recompute_digest() == pp.batch.digest() {
                self.remember(pos, pp, cx);
            }
            return;
        }
        if pp.view != self.view || pp.view != 0 {
            return;
        }
        let slot = &self.slots[pos];
        if slot.pp.is_some() || slot.buffered.is_some() || slot.foreign.iter().any(|p| p.view == 0) {
            return;
        }
        let d = pp.batch.digest();
        if pp.batch.recompute_digest() != d {
            return self.reject(pp.sn, from, RejectReason::DigestMismatch, cx);
        }
        if pp.batch.is_nil() {
            return self.reject(pp.sn, from, RejectReason::BadSender, cx);
        }
        match self.cfg.mode {
            PbftMode::Direct => {
                if let Err(reason) = cx.validator.validate(&pp.batch) {
                    let sn = pp.sn;
                    self.remember(pos, pp, cx);
                    return self.reject(sn, from, reason, cx);
                }
                cx.validator.record(&pp.batch);
                self.accept_preprepare(pos, pp, cx);
            }
            PbftMode::Consensus => match &self.slots[pos].own {
                None => self.slots[pos].buffered = Some(pp),
                Some(own) if *own == pp.batch => self.accept_preprepare(pos, pp, cx),
                Some(_) => self.remember(pos, pp, cx),
            },
        }
    }

    fn signed_by_primary(&self, pp: &PrePrepare, scheme: &dyn SignatureScheme) -> bool {
        scheme.verify(
            Principal::Node(self.primary(pp.view)),
            &preprepare_bytes(self.p.id, pp.view, pp.sn, &pp.batch.digest()),
            &pp.sig,
        )
    }

    fn remember(&mut self, pos: usize, pp: PrePrepare, cx: &mut SbContext) {
        let slot = &mut self.slots[pos];
        if slot.committed.is_some() {
            return;
        }
        let view = pp.view;
        let d = pp.batch.digest();
        if !slot.foreign.iter().any(|p| p.view == view && p.batch.digest() == d) {
            slot.foreign.push(pp);
        }
        self.check_certificate(view, pos, cx);
    }

    fn on_fetch(&mut self, from: NodeId, view: u64, sn: SeqNr, cx: &mut SbContext) {
        let Some(pos) = self.p.position(sn) else {
            return;
        };
        let slot = &self.slots[pos];
        let Some(d) = slot.committed.as_ref().map(Batch::digest) else {
            return;
        };
        let known = slot
            .pp
            .iter()
            .chain(slot.cert.as_ref().map(|c| &c.preprepare))
            .chain(&slot.foreign)
            .find(|p| p.view == view && p.batch.digest() == d);
        if let Some(pp) = known {
            cx.send(Dest::Node(from), SbMessage::Pbft(PbftMsg::Value(pp.clone())));
        }
    }

    fn on_value(&mut self, pp: PrePrepare, cx: &mut SbContext) {
        let Some(pos) = self.p.position(pp.sn) else {
            return;
        };
        if self.signed_by_primary(&pp, cx.scheme) && pp.batch.recompute_digest() == pp.batch.digest() {
            self.remember(pos, pp, cx);
        }
    }

    fn reject(&mut self, sn: SeqNr, from: NodeId, reason: RejectReason, cx: &mut SbContext) {
        cx.out.push(SbOutput::Rejected { sn, from, reason });
        if self.cfg.mode == PbftMode::Direct {
            cx.out.push(SbOutput::Suspect(from));
            self.start_view_change(self.view + 1, cx);
            self.disarm();
            self.maybe_arm(cx);
        }
    }

    fn accept_preprepare(&mut self, pos: usize, pp: PrePrepare, cx: &mut SbContext) {
        let view = pp.view;
        let digest = pp.batch.digest();
        self.slots[pos].pp = Some(pp);
        if self.me() != self.primary(view) {
            self.send_vote(false, view, pos, digest, cx);
        }
        self.check_prepared(view, pos, cx);
    }

    fn send_vote(&mut self, commit: bool, view: u64, pos: usize, digest: Digest, cx: &mut SbContext) {
        let sn = self.p.seq_nrs[pos];
        let sig = cx.scheme.sign(
            Principal::Node(self.me()),
            &vote_bytes(commit, self.p.id, view, sn, &digest),
        );
        let v = Vote {
            view,
            sn,
            digest,
            signer: self.me(),
            sig,
        };
        let msg = if commit {
            self.commits.entry((view, pos)).or_default().insert(v.signer, v);
            PbftMsg::Commit(v)
        } else {
            self.prepares.entry((view, pos)).or_default().insert(v.signer, v);
            PbftMsg::Prepare(v)
        };
        cx.send(Dest::AllOthers, SbMessage::Pbft(msg));
    }

    fn verify_vote(&self, commit: bool, v: &Vote, scheme: &dyn SignatureScheme) -> bool {
        v.signer < self.cfg.n
            && scheme.verify(
                Principal::Node(v.signer),
                &vote_bytes(commit, self.p.id, v.view, v.sn, &v.digest),
                &v.sig,
            )
    }

    fn on_vote(&mut self, commit: bool, from: NodeId, v: Vote, cx: &mut SbContext) {
        let Some(pos) = self.p.position(v.sn) else {
            return;
        };
        // old-view commits still count towards a commit certificate
        let stale = v.view < self.view;
        if v.signer != from || (stale && !commit) || !self.verify_vote(commit, &v, cx.scheme) {
            return;
        }
        let map = if commit {
            &mut self.commits
        } else {
            &mut self.prepares
        };
        map.entry((v.view, pos)).or_default().entry(from).or_insert(v);
        if commit {
            self.check_certificate(v.view, pos, cx);
        }
        if v.view == self.view && self.active {
            if commit {
                self.check_committed(v.view, pos, cx);
            } else {
                self.check_prepared(v.view, pos, cx);
            }
        }
    }

    fn matching_prepares(&self, view: u64, pos: usize, d: &Digest) -> Vec<Vote> {
        let primary = self.primary(view);
        self.prepares
            .get(&(view, pos))
            .map(|m| {
                m.values()
                    .filter(|v| v.digest == *d && v.signer != primary)
                    .copied()
                    .collect()
            })
            .unwrap_or_default()
    }

    fn check_prepared(&mut self, view: u64, pos: usize, cx: &mut SbContext) {
        let Some(pp) = self.slots[pos].pp.clone() else {
            return;
        };
        if pp.view != view || self.slots[pos].commit_sent == Some(view) {
            return;
        }
        let d = pp.batch.digest();
        let prepares = self.matching_prepares(view, pos, &d);
        if prepares.len() < self.prepare_quorum() {
            return;
        }
        let newer = self.slots[pos]
            .cert
            .as_ref()
            .is_none_or(|c| c.preprepare.view <= view);
        if newer {
            self.slots[pos].cert = Some(PreparedCert {
                preprepare: pp,
                prepares,
            });
        }
        self.slots[pos].commit_sent = Some(view);
        self.send_vote(true, view, pos, d, cx);
        self.check_committed(view, pos, cx);
    }

    fn check_committed(&mut self, view: u64, pos: usize, cx: &mut SbContext) {
        if self.slots[pos].committed.is_some() || self.slots[pos].commit_sent != Some(view) {
            return;
        }
        let pp = self.slots[pos].pp.as_ref().unwrap();
        if self.commit_votes(view, pos, &pp.batch.digest()) >= self.commit_quorum() {
            let batch = pp.batch.clone();
            self.decide(pos, batch, cx);
        }
    }

    fn commit_votes(&self, view: u64, pos: usize, d: &Digest) -> usize {
        self.commits
            .get(&(view, pos))
            .map_or(0, |m| m.values().filter(|v| v.digest == *d).count())
    }

    /// A commit quorum in `view` for a pre-prepare of that view decides the
    /// slot even if this node did not prepare it itself.
    fn check_certificate(&mut self, view: u64, pos: usize, cx: &mut SbContext) {
        let slot = &self.slots[pos];
        if slot.committed.is_some() {
            return;
        }
        let quorum = self.commit_quorum();
        let known = slot
            .pp
            .iter()
            .chain(&slot.buffered)
            .chain(&slot.foreign)
            .find(|pp| pp.view == view && self.commit_votes(view, pos, &pp.batch.digest()) >= quorum);
        if let Some(pp) = known {
            let batch = pp.batch.clone();
            self.decide(pos, batch, cx);
            return;
        }
        let mut tally: BTreeMap<Digest, usize> = BTreeMap::new();
        for v in self.commits.get(&(view, pos)).into_iter().flat_map(|m| m.values()) {
            *tally.entry(v.digest).or_default() += 1;
        }
        if tally.values().any(|&c| c >= quorum) && self.fetched.insert((view, pos)) {
            let sn = self.p.seq_nrs[pos];
            cx.send(Dest::AllOthers, SbMessage::Pbft(PbftMsg::Fetch { view, sn }));
        }
    }

    fn decide(&mut self, pos: usize, batch: Batch, cx: &mut SbContext) {
        self.slots[pos].committed = Some(batch.clone());
        self.num_committed += 1;
        cx.out.push(SbOutput::Deliver {
            sn: self.p.seq_nrs[pos],
            value: batch,
        });
        self.timeout = self.cfg.timeout;
        self.disarm();
        self.maybe_arm(cx);
    }

    // ---- view change ----

    fn uncommitted_without_proposal(&self) -> bool {
        self.slots
            .iter()
            .any(|s| s.committed.is_none() && s.own.is_none())
    }

    fn start_view_change(&mut self, view: u64, cx: &mut SbContext) {
        if view <= self.view {
            return;
        }
        self.view = view;
        self.active = false;
        if self.cfg.mode == PbftMode::Consensus && self.uncommitted_without_proposal() {
            self.vc_pending = Some(view);
            return;
        }
        self.send_view_change(view, cx);
    }

    fn flush_pending_vc(&mut self, cx: &mut SbContext) {
        if let Some(v) = self.vc_pending {
            if v == self.view && !self.uncommitted_without_proposal() {
                self.vc_pending = None;
                self.send_view_change(v, cx);
            }
        }
    }

    fn send_view_change(&mut self, view: u64, cx: &mut SbContext) {
        if !self.vc_sent.insert(view) {
            return;
        }
        let prepared: Vec<PreparedCert> = self.slots.iter().filter_map(|s| s.cert.clone()).collect();
        let proposals = match self.cfg.mode {
            PbftMode::Direct => Vec::new(),
            PbftMode::Consensus => self
                .slots
                .iter()
                .zip(&self.p.seq_nrs)
                .filter_map(|(s, &sn)| s.own.clone().map(|b| (sn, b)))
                .collect(),
        };
        let mut vc = ViewChange {
            view,
            signer: self.me(),
            prepared,
            proposals,
            sig: Signature::default(),
        };
        vc.sig = cx
            .scheme
            .sign(Principal::Node(self.me()), &view_change_bytes(self.p.id, &vc));
        cx.send(Dest::AllOthers, SbMessage::Pbft(PbftMsg::ViewChange(vc.clone())));
        self.store_view_change(vc, cx);
    }

    fn verify_cert(&self, c: &PreparedCert, scheme: &dyn SignatureScheme) -> bool {
        let pp = &c.preprepare;
        if self.p.position(pp.sn).is_none() {
            return false;
        }
        let d = pp.batch.digest();
        if pp.batch.recompute_digest() != d {
            return false;
        }
        let primary = self.primary(pp.view);
        if !scheme.verify(
            Principal::Node(primary),
            &preprepare_bytes(self.p.id, pp.view, pp.sn, &d),
            &pp.sig,
        ) {
            return false;
        }
        let signers: BTreeSet<NodeId> = c
            .prepares
            .iter()
            .filter(|v| {
                v.view == pp.view
                    && v.sn == pp.sn
                    && v.digest == d
                    && v.signer != primary
                    && self.verify_vote(false, v, scheme)
            })
            .map(|v| v.signer)
            .collect();
        signers.len() >= self.prepare_quorum()
    }

    fn verify_view_change(&self, from: NodeId, vc: &ViewChange, scheme: &dyn SignatureScheme) -> bool {
        vc.signer == from
            && from < self.cfg.n
            && scheme.verify(
                Principal::Node(from),
                &view_change_bytes(self.p.id, vc),
                &vc.sig,
            )
            && vc.prepared.iter().all(|c| self.verify_cert(c, scheme))
            && vc
                .proposals
                .iter()
                .all(|(sn, b)| self.p.position(*sn).is_some() && b.recompute_digest() == b.digest())
    }

    fn on_view_change(&mut self, from: NodeId, vc: ViewChange, cx: &mut SbContext) {
        if vc.view < self.view || (vc.view == self.view && self.active) {
            return;
        }
        if !self.verify_view_change(from, &vc, cx.scheme) {
            return;
        }
        self.store_view_change(vc, cx);
    }

    fn store_view_change(&mut self, vc: ViewChange, cx: &mut SbContext) {
        let view = vc.view;
        self.view_changes
            .entry(view)
            .or_default()
            .entry(vc.signer)
            .or_insert(vc);

        // f+1 nodes want a higher view: join the smallest such view.
        let mut latest: BTreeMap<NodeId, u64> = BTreeMap::new();
        for (&v, m) in self.view_changes.range(self.view + 1..) {
            for &s in m.keys() {
                latest.entry(s).or_insert(v);
            }
        }
        if latest.len() > self.cfg.f {
            let target = *latest.values().min().unwrap();
            self.start_view_change(target, cx);
            self.disarm();
            self.maybe_arm(cx);
        }

        let v = self.view;
        if !self.active
            && self.primary(v) == self.me()
            && !self.nv_sent.contains(&v)
            && self.view_changes.get(&v).map_or(0, BTreeMap::len) >= self.vc_quorum()
            && self.vc_sent.contains(&v)
        {
            self.send_new_view(v, cx);
        }
    }

    /// Values the new primary must re-propose, derived from a set of view
    /// change messages.
    fn choose(&self, vcs: &[ViewChange]) -> Vec<Batch> {
        let mut out = Vec::with_capacity(self.slots.len());
        for &sn in &self.p.seq_nrs {
            let best = vcs
                .iter()
                .flat_map(|vc| vc.prepared.iter())
                .filter(|c| c.preprepare.sn == sn)
                .max_by_key(|c| c.preprepare.view);
            if let Some(c) = best {
                out.push(c.preprepare.batch.clone());
                continue;
            }
            let mut v = Batch::Nil;
            if self.cfg.mode == PbftMode::Consensus {
                let mut support: BTreeMap<Digest, (usize, &Batch)> = BTreeMap::new();
                for vc in vcs {
                    if let Some((_, b)) = vc.proposals.iter().find(|(s, _)| *s == sn) {
                        support.entry(b.digest()).or_insert((0, b)).0 += 1;
                    }
                }
                if let Some((_, b)) = support
                    .values()
                    .filter(|(c, b)| *c > self.cfg.f && !b.is_nil())
                    .max_by_key(|(c, _)| *c)
                {
                    v = (*b).clone();
                }
            }
            out.push(v);
        }
        out
    }

    fn send_new_view(&mut self, view: u64, cx: &mut SbContext) {
        self.nv_sent.insert(view);
        let vcs: Vec<ViewChange> = self.view_changes[&view]
            .values()
            .take(self.vc_quorum())
            .cloned()
            .collect();
        let values = self.choose(&vcs);
        let preprepares: Vec<PrePrepare> = values
            .into_iter()
            .zip(&self.p.seq_nrs)
            .map(|(batch, &sn)| {
                let sig = cx.scheme.sign(
                    Principal::Node(self.me()),
                    &preprepare_bytes(self.p.id, view, sn, &batch.digest()),
                );
                PrePrepare {
                    view,
                    sn,
                    batch,
                    sig,
                }
            })
            .collect();
        let nv = NewView {
            view,
            view_changes: vcs,
            preprepares,
        };
        cx.send(Dest::AllOthers, SbMessage::Pbft(PbftMsg::NewView(nv.clone())));
        cx.out.push(SbOutput::Elected { term: view });
        self.install_new_view(nv, cx);
    }

    fn on_new_view(&mut self, from: NodeId, nv: NewView, cx: &mut SbContext) {
        if nv.view < self.view || (nv.view == self.view && self.active) || nv.view == 0 {
            return;
        }
        if from != self.primary(nv.view) {
            return;
        }
        let signers: BTreeSet<NodeId> = nv
            .view_changes
            .iter()
            .filter(|vc| vc.view == nv.view && self.verify_view_change(vc.signer, vc, cx.scheme))
            .map(|vc| vc.signer)
            .collect();
        if signers.len() < self.vc_quorum() || signers.len() != nv.view_changes.len() {
            return;
        }
        let expected = self.choose(&nv.view_changes);
        if nv.preprepares.len() != expected.len() {
            return;
        }
        for ((pp, want), &sn) in nv.preprepares.iter().zip(&expected).zip(&self.p.seq_nrs) {
            let d = pp.batch.digest();
            if pp.sn != sn
                || pp.view != nv.view
                || d != want.digest()
                || pp.batch.recompute_digest() != d
                || !cx.scheme.verify(
                    Principal::Node(from),
                    &preprepare_bytes(self.p.id, nv.view, sn, &d),
                    &pp.sig,
                )
            {
                return;
            }
        }
        self.install_new_view(nv, cx);
    }

    fn install_new_view(&mut self, nv: NewView, cx: &mut SbContext) {
        self.view = nv.view;
        self.active = true;
        self.vc_pending = None;
        let view = nv.view;
        self.view_changes.retain(|&v, _| v > view);
        self.prepares.retain(|&(v, _), _| v >= view);
        self.commits.retain(|&(v, _), _| v >= view);
        for (pos, pp) in nv.preprepares.into_iter().enumerate() {
            self.slots[pos].pp = None;
            self.slots[pos].buffered = None;
            self.accept_preprepare(pos, pp, cx);
        }
        for pos in 0..self.slots.len() {
            self.check_prepared(view, pos, cx);
            self.check_committed(view, pos, cx);
        }
        self.disarm();
        self.maybe_arm(cx);
    }

    pub fn on_message(&mut self, from: NodeId, msg: PbftMsg, cx: &mut SbContext) {
        if from >= self.cfg.n || from == self.me() {
            return;
        }
        match msg {
            PbftMsg::PrePrepare(pp) => self.on_preprepare(from, pp, cx),
            PbftMsg::Prepare(v) => self.on_vote(false, from, v, cx),
            PbftMsg::Commit(v) => self.on_vote(true, from, v, cx),
            PbftMsg::ViewChange(vc) => self.on_view_change(from, vc, cx),
            PbftMsg::NewView(nv) => self.on_new_view(from, nv, cx),
            PbftMsg::Fetch { view, sn } => self.on_fetch(from, view, sn, cx),
            PbftMsg::Value(pp) => self.on_value(pp, cx),
        }
    }
}

/// Direct PBFT orderer: one engine per segment.
pub struct PbftOrderer {
    engine: PbftEngine,
}

impl PbftOrderer {
    pub fn new(p: SbParams, cfg: PbftConfig) -> Self {
        debug_assert_eq!(cfg.mode, PbftMode::Direct);
        PbftOrderer {
            engine: PbftEngine::new(p, cfg),
        }
    }

    pub fn engine(&self) -> &PbftEngine {
        &self.engine
    }
}

impl SequencedBroadcast for PbftOrderer {
    fn params(&self) -> &SbParams {
        &self.engine.p
    }

    fn init(&mut self, cx: &mut SbContext) {
        self.engine.init(cx);
    }

    fn cast(&mut self, sn: SeqNr, batch: Batch, cx: &mut SbContext) -> Result<(), CastError> {
        self.engine.cast(sn, batch, cx)
    }

    fn ready_for_cast(&self) -> bool {
        self.engine.ready_for_cast()
    }

    fn on_message(&mut self, from: NodeId, msg: SbMessage, cx: &mut SbContext) {
        if let SbMessage::Pbft(m) = msg {
            self.engine.on_message(from, m, cx);
        }
    }

    fn on_timer(&mut self, timer: SbTimer, cx: &mut SbContext) {
        self.engine.on_timer(timer, cx);
    }

    fn on_suspect(&mut self, _node: NodeId, _cx: &mut SbContext) {}

    fn is_complete(&self) -> bool {
        self.engine.is_complete()
    }
}
