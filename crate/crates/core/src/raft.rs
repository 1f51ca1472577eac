//! Raft over the sequence numbers of one segment (crash faults only).
//!
//! The segment leader starts as leader of term 1 without an election. Log
//! entries either put a batch at a slot of the segment or seal a term. A
//! leader elected later appends nil for every slot missing from its log and a
//! seal entry, which also lets entries of earlier terms commit. Leaders keep
//! heartbeating until the instance is retired so that lagging followers can
//! still finish the segment.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Batch, NodeId, SeqNr, Time};
use crate::sb::{
    CastError, Dest, SbContext, SbMessage, SbOutput, SbParams, SbTimer, SequencedBroadcast,
};

#[derive(Clone, Debug)]
pub struct RaftConfig {
    pub n: usize,
    /// Mean one-way network delay; election timeouts start in `[2, 4)` times
    /// this value.
    pub mean_delay: Time,
    pub heartbeat: Time,
    pub max_inflight: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Content {
    /// Batch for the slot at this position of the segment.
    Put { pos: usize, batch: Batch },
    Seal,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub term: u64,
    pub content: Content,
}

#[derive(Clone, Debug)]
pub enum RaftMsg {
    Append {
        term: u64,
        prev_len: u64,
        prev_term: u64,
        entries: Vec<Entry>,
        commit_len: u64,
    },
    AppendReply {
        term: u64,
        success: bool,
        /// On success the matched log length, otherwise a hint where to retry.
        len: u64,
    },
    RequestVote {
        term: u64,
        last_len: u64,
        last_term: u64,
    },
    Vote {
        term: u64,
        granted: bool,
    },
}

impl RaftMsg {
    pub fn wire_size(&self) -> usize {
        1 + match self {
            RaftMsg::Append { entries, .. } => {
                32 + entries
                    .iter()
                    .map(|e| {
                        16 + match &e.content {
                            Content::Put { batch, .. } => batch.wire_size(),
                            Content::Seal => 0,
                        }
                    })
                    .sum::<usize>()
            }
            RaftMsg::AppendReply { .. } => 17,
            RaftMsg::RequestVote { .. } => 24,
            RaftMsg::Vote { .. } => 9,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

pub struct RaftOrderer {
    p: SbParams,
    cfg: RaftConfig,
    initialized: bool,
    term: u64,
    role: Role,
    voted_for: Option<NodeId>,
    votes: BTreeSet<NodeId>,
    log: Vec<Entry>,
    commit_len: u64,
    applied_len: u64,
    delivered: Vec<bool>,
    num_delivered: usize,
    present: Vec<bool>,
    next_len: Vec<u64>,
    match_len: Vec<u64>,
    election_lo: Time,
    election_hi: Time,
    election_gen: u64,
    heartbeat_armed: bool,
    suspected_sender: bool,
    rng: ChaCha8Rng,
}

impl RaftOrderer {
    pub fn new(p: SbParams, cfg: RaftConfig) -> Self {
        let k = p.seq_nrs.len();
        let n = cfg.n;
        let seed = cfg.seed
            ^ (p.id.epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))
            ^ ((p.id.index as u64) << 32)
            ^ (p.me as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
        let is_sender = p.me == p.sender;
        RaftOrderer {
            election_lo: 2 * cfg.mean_delay,
            election_hi: 4 * cfg.mean_delay,
            rng: ChaCha8Rng::seed_from_u64(seed),
            initialized: false,
            term: 1,
            role: if is_sender { Role::Leader } else { Role::Follower },
            voted_for: Some(p.sender),
            votes: BTreeSet::new(),
            log: Vec::new(),
            commit_len: 0,
            applied_len: 0,
            delivered: vec![false; k],
            num_delivered: 0,
            present: vec![false; k],
            next_len: vec![0; n],
            match_len: vec![0; n],
            election_gen: 0,
            heartbeat_armed: false,
            suspected_sender: false,
            p,
            cfg,
        }
    }

    pub fn term(&self) -> u64 {
        self.term
    }

    pub fn role(&self) -> Role {
        self.role
    }

    fn majority(&self) -> usize {
        self.cfg.n / 2 + 1
    }

    fn last_term(&self) -> u64 {
        self.log.last().map_or(0, |e| e.term)
    }

    fn arm_election(&mut self, cx: &mut SbContext) {
        self.election_gen += 1;
        let after = self.rng.gen_range(self.election_lo..self.election_hi);
        cx.timer(after, SbTimer::Election { gen: self.election_gen });
    }

    fn arm_heartbeat(&mut self, cx: &mut SbContext) {
        if !self.heartbeat_armed {
            self.heartbeat_armed = true;
            cx.timer(self.cfg.heartbeat, SbTimer::Heartbeat);
        }
    }

    fn send_append(&self, to: NodeId, cx: &mut SbContext) {
        let prev_len = self.next_len[to].min(self.log.len() as u64);
        let prev_term = if prev_len == 0 {
            0
        } else {
            self.log[prev_len as usize - 1].term
        };
        let entries = self.log[prev_len as usize..].to_vec();
        cx.send(
            Dest::Node(to),
            SbMessage::Raft(RaftMsg::Append {
                term: self.term,
                prev_len,
                prev_term,
                entries,
                commit_len: self.commit_len,
            }),
        );
    }

    fn broadcast_append(&self, cx: &mut SbContext) {
        for p in (0..self.cfg.n).filter(|&p| p != self.p.me) {
            self.send_append(p, cx);
        }
    }

    fn push(&mut self, content: Content) {
        if let Content::Put { pos, .. } = &content {
            self.present[*pos] = true;
        }
        self.log.push(Entry {
            term: self.term,
            content,
        });
        self.match_len[self.p.me] = self.log.len() as u64;
    }

    fn become_leader(&mut self, cx: &mut SbContext) {
        self.role = Role::Leader;
        cx.out.push(SbOutput::Elected { term: self.term });
        for p in 0..self.cfg.n {
            self.next_len[p] = self.log.len() as u64;
            self.match_len[p] = 0;
        }
        for pos in 0..self.present.len() {
            if !self.present[pos] {
                self.push(Content::Put {
                    pos,
                    batch: Batch::Nil,
                });
            }
        }
        self.push(Content::Seal);
        self.broadcast_append(cx);
        self.arm_heartbeat(cx);
        self.advance_commit(cx);
    }

    fn step_down(&mut self, term: u64) {
        if term > self.term {
            self.term = term;
            self.voted_for = None;
        }
        self.role = Role::Follower;
    }

    fn advance_commit(&mut self, cx: &mut SbContext) {
        let mut lens: Vec<u64> = self.match_len.clone();
        lens[self.p.me] = self.log.len() as u64;
        lens.sort_unstable_by(|a, b| b.cmp(a));
        let candidate = lens[self.majority() - 1];
        if candidate > self.commit_len && self.log[candidate as usize - 1].term == self.term {
            self.commit_len = candidate;
            self.apply(cx);
        }
    }

    fn apply(&mut self, cx: &mut SbContext) {
        while self.applied_len < self.commit_len {
            let e = &self.log[self.applied_len as usize];
            if let Content::Put { pos, batch } = &e.content {
                if !self.delivered[*pos] {
                    self.delivered[*pos] = true;
                    self.num_delivered += 1;
                    cx.out.push(SbOutput::Deliver {
                        sn: self.p.seq_nrs[*pos],
                        value: batch.clone(),
                    });
                }
            }
            self.applied_len += 1;
        }
    }

    fn on_append(
        &mut self,
        from: NodeId,
        term: u64,
        prev_len: u64,
        prev_term: u64,
        entries: Vec<Entry>,
        commit_len: u64,
        cx: &mut SbContext,
    ) {
        if term < self.term {
            cx.send(
                Dest::Node(from),
                SbMessage::Raft(RaftMsg::AppendReply {
                    term: self.term,
                    success: false,
                    len: 0,
                }),
            );
            return;
        }
        if term > self.term || self.role != Role::Follower {
            self.step_down(term);
        }
        self.voted_for.get_or_insert(from);
        self.arm_election(cx);
        let len = self.log.len() as u64;
        let reply = |success, len, cx: &mut SbContext| {
            cx.send(
                Dest::Node(from),
                SbMessage::Raft(RaftMsg::AppendReply { term, success, len }),
            );
        };
        if len < prev_len {
            return reply(false, len, cx);
        }
        if prev_len > 0 && self.log[prev_len as usize - 1].term != prev_term {
            // back off to the start of the conflicting term
            let bad = self.log[prev_len as usize - 1].term;
            let mut i = prev_len as usize - 1;
            while i > 0 && self.log[i - 1].term == bad {
                i -= 1;
            }
            return reply(false, i as u64, cx);
        }
        let mut idx = prev_len as usize;
        let count = entries.len();
        for e in entries {
            if idx < self.log.len() {
                if self.log[idx].term == e.term {
                    idx += 1;
                    continue;
                }
                debug_assert!(idx as u64 >= self.commit_len, "truncating committed entries");
                self.log.truncate(idx);
                self.recompute_present();
            }
            if let Content::Put { pos, .. } = &e.content {
                self.present[*pos] = true;
            }
            self.log.push(e);
            idx += 1;
        }
        let matched = prev_len + count as u64;
        let new_commit = commit_len.min(matched);
        if new_commit > self.commit_len {
            self.commit_len = new_commit;
            self.apply(cx);
        }
        reply(true, matched, cx);
    }

    fn recompute_present(&mut self) {
        self.present.iter_mut().for_each(|p| *p = false);
        for e in &self.log {
            if let Content::Put { pos, .. } = &e.content {
                self.present[*pos] = true;
            }
        }
    }

    fn on_message_inner(&mut self, from: NodeId, msg: RaftMsg, cx: &mut SbContext) {
        match msg {
            RaftMsg::Append {
                term,
                prev_len,
                prev_term,
                entries,
                commit_len,
            } => self.on_append(from, term, prev_len, prev_term, entries, commit_len, cx),
            RaftMsg::AppendReply { term, success, len } => {
                if term > self.term {
                    self.step_down(term);
                    self.arm_election(cx);
                    return;
                }
                if self.role != Role::Leader || term != self.term {
                    return;
                }
                if success {
                    self.match_len[from] = self.match_len[from].max(len);
                    self.next_len[from] = self.next_len[from].max(len);
                    self.advance_commit(cx);
                } else {
                    let back = self.next_len[from].saturating_sub(1).min(len);
                    self.next_len[from] = back;
                    self.send_append(from, cx);
                }
            }
            RaftMsg::RequestVote {
                term,
                last_len,
                last_term,
            } => {
                if term > self.term {
                    let was_leader = self.role == Role::Leader;
                    self.step_down(term);
                    if was_leader {
                        self.arm_election(cx);
                    }
                }
                let up_to_date = last_term > self.last_term()
                    || (last_term == self.last_term() && last_len >= self.log.len() as u64);
                // leader stickiness: only a follower that itself timed out
                // on the segment leader helps to replace it
                let granted = term == self.term
                    && up_to_date
                    && self.suspected_sender
                    && self.voted_for.is_none_or(|v| v == from);
                if granted {
                    self.voted_for = Some(from);
                    self.arm_election(cx);
                }
                cx.send(
                    Dest::Node(from),
                    SbMessage::Raft(RaftMsg::Vote {
                        term: self.term,
                        granted,
                    }),
                );
            }
            RaftMsg::Vote { term, granted } => {
                if term > self.term {
                    self.step_down(term);
                    self.arm_election(cx);
                    return;
                }
                if self.role == Role::Candidate && term == self.term && granted {
                    self.votes.insert(from);
                    if self.votes.len() >= self.majority() {
                        self.become_leader(cx);
                    }
                }
            }
        }
    }
}

impl SequencedBroadcast for RaftOrderer {
    fn params(&self) -> &SbParams {
        &self.p
    }

    fn init(&mut self, cx: &mut SbContext) {
        self.initialized = true;
        if self.role == Role::Leader {
            cx.out.push(SbOutput::Elected { term: 1 });
            self.arm_heartbeat(cx);
        } else {
            self.arm_election(cx);
        }
    }

    fn cast(&mut self, sn: SeqNr, batch: Batch, cx: &mut SbContext) -> Result<(), CastError> {
        if self.p.me != self.p.sender {
            return Err(CastError::NotSender(self.p.me));
        }
        if !self.initialized {
            return Err(CastError::NotInitialized);
        }
        let pos = self.p.position(sn).ok_or(CastError::OutOfRange(sn))?;
        if self.present[pos] {
            return Err(CastError::AlreadyCast(sn));
        }
        if !self.ready_for_cast() {
            return Err(CastError::NotReady);
        }
        self.push(Content::Put { pos, batch });
        self.broadcast_append(cx);
        self.advance_commit(cx);
        Ok(())
    }

    fn ready_for_cast(&self) -> bool {
        let uncommitted = self.log.len() as u64 - self.commit_len;
        self.initialized
            && self.role == Role::Leader
            && self.term == 1
            && (uncommitted as usize) < self.cfg.max_inflight
    }

    fn on_message(&mut self, from: NodeId, msg: SbMessage, cx: &mut SbContext) {
        if from >= self.cfg.n || from == self.p.me {
            return;
        }
        if let SbMessage::Raft(m) = msg {
            self.on_message_inner(from, m, cx);
        }
    }

    fn on_timer(&mut self, timer: SbTimer, cx: &mut SbContext) {
        match timer {
            SbTimer::Heartbeat => {
                self.heartbeat_armed = false;
                if self.role == Role::Leader {
                    self.broadcast_append(cx);
                    self.arm_heartbeat(cx);
                }
            }
            SbTimer::Election { gen } => {
                if gen != self.election_gen || self.role == Role::Leader {
                    return;
                }
                if !self.suspected_sender {
                    self.suspected_sender = true;
                    cx.out.push(SbOutput::Suspect(self.p.sender));
                }
                if self.role == Role::Candidate {
                    self.election_lo *= 2;
                    self.election_hi *= 2;
                }
                self.term += 1;
                self.role = Role::Candidate;
                self.voted_for = Some(self.p.me);
                self.votes = [self.p.me].into_iter().collect();
                cx.send(
                    Dest::AllOthers,
                    SbMessage::Raft(RaftMsg::RequestVote {
                        term: self.term,
                        last_len: self.log.len() as u64,
                        last_term: self.last_term(),
                    }),
                );
                self.arm_election(cx);
                if self.votes.len() >= self.majority() {
                    self.become_leader(cx);
                }
            }
            SbTimer::Liveness { .. } => {}
        }
    }

    fn on_suspect(&mut self, _node: NodeId, _cx: &mut SbContext) {}

    fn is_complete(&self) -> bool {
        self.num_delivered == self.delivered.len()
    }
}
