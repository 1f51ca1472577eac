//! Heartbeat failure detector with per-peer doubling timeouts.
//!
//! Every node periodically emits a heartbeat. Each peer has a timer; expiry
//! suspects the peer and doubles its timeout, a heartbeat from a suspected
//! peer restores it. Heartbeats go either point-to-point or through reliable
//! broadcast (one broadcast per beat).

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::Digest;
use crate::domain::{NodeId, Time};
use crate::sb::brb::{BrbAction, Bracha};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FdTimer {
    Beat,
    Peer { peer: NodeId, gen: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdBrbKind {
    Send,
    Echo,
    Ready,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FdMsg {
    Heartbeat { seq: u64 },
    Brb { origin: NodeId, seq: u64, kind: FdBrbKind },
}

impl FdMsg {
    pub fn wire_size(&self) -> usize {
        match self {
            FdMsg::Heartbeat { .. } => 9,
            FdMsg::Brb { .. } => 18,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FdOutput {
    Broadcast(FdMsg),
    Timer { after: Time, timer: FdTimer },
    Suspect(NodeId),
    Restore(NodeId),
}

#[derive(Clone, Debug)]
struct Peer {
    timeout: Time,
    gen: u64,
}

/// Old broadcasts per origin kept around for late echoes and readies.
const BRB_WINDOW: u64 = 8;

#[derive(Debug)]
pub struct FailureDetector {
    me: NodeId,
    n: usize,
    f: usize,
    period: Time,
    reliable: bool,
    seq: u64,
    peers: BTreeMap<NodeId, Peer>,
    suspected: BTreeSet<NodeId>,
    beats: BTreeMap<(NodeId, u64), Bracha<()>>,
    latest: BTreeMap<NodeId, u64>,
}

impl FailureDetector {
    /// `mean_delay` sets the heartbeat period (1x) and initial timeout (4x).
    pub fn new(me: NodeId, n: usize, f: usize, mean_delay: Time, reliable: bool) -> Self {
        let peers = (0..n)
            .filter(|&p| p != me)
            .map(|p| {
                (
                    p,
                    Peer {
                        timeout: 4 * mean_delay,
                        gen: 0,
                    },
                )
            })
            .collect();
        FailureDetector {
            me,
            n,
            f,
            period: mean_delay,
            reliable,
            seq: 0,
            peers,
            suspected: BTreeSet::new(),
            beats: BTreeMap::new(),
            latest: BTreeMap::new(),
        }
    }

    pub fn suspected(&self) -> &BTreeSet<NodeId> {
        &self.suspected
    }

    pub fn timeout_of(&self, p: NodeId) -> Option<Time> {
        self.peers.get(&p).map(|s| s.timeout)
    }

    pub fn start(&mut self, out: &mut Vec<FdOutput>) {
        for (&p, s) in &self.peers {
            out.push(FdOutput::Timer {
                after: s.timeout,
                timer: FdTimer::Peer { peer: p, gen: s.gen },
            });
        }
        self.beat(out);
    }

    fn beat(&mut self, out: &mut Vec<FdOutput>) {
        let seq = self.seq;
        self.seq += 1;
        if self.reliable {
            let mut b = Bracha::new(self.me, self.n, self.f, self.me);
            let acts = b.cast((), Self::beat_digest(self.me, seq));
            self.beats.insert((self.me, seq), b);
            out.push(FdOutput::Broadcast(FdMsg::Brb {
                origin: self.me,
                seq,
                kind: FdBrbKind::Send,
            }));
            self.brb_actions(self.me, seq, acts, out);
        } else {
            out.push(FdOutput::Broadcast(FdMsg::Heartbeat { seq }));
        }
        out.push(FdOutput::Timer {
            after: self.period,
            timer: FdTimer::Beat,
        });
    }

    fn beat_digest(origin: NodeId, seq: u64) -> Digest {
        let mut b = [0u8; 16];
        b[..8].copy_from_slice(&(origin as u64).to_le_bytes());
        b[8..].copy_from_slice(&seq.to_le_bytes());
        Digest::of(&b)
    }

    pub fn on_timer(&mut self, t: FdTimer, out: &mut Vec<FdOutput>) {
        match t {
            FdTimer::Beat => self.beat(out),
            FdTimer::Peer { peer, gen } => {
                let Some(s) = self.peers.get_mut(&peer) else {
                    return;
                };
                if s.gen != gen {
                    return;
                }
                s.timeout *= 2;
                s.gen += 1;
                out.push(FdOutput::Timer {
                    after: s.timeout,
                    timer: FdTimer::Peer { peer, gen: s.gen },
                });
                if self.suspected.insert(peer) {
                    out.push(FdOutput::Suspect(peer));
                }
            }
        }
    }

    /// A heartbeat from `p` arrived (directly or via reliable broadcast).
    pub fn on_heartbeat(&mut self, p: NodeId, out: &mut Vec<FdOutput>) {
        let Some(s) = self.peers.get_mut(&p) else {
            return;
        };
        s.gen += 1;
        out.push(FdOutput::Timer {
            after: s.timeout,
            timer: FdTimer::Peer { peer: p, gen: s.gen },
        });
        if self.suspected.remove(&p) {
            out.push(FdOutput::Restore(p));
        }
    }

    pub fn on_message(&mut self, from: NodeId, msg: FdMsg, out: &mut Vec<FdOutput>) {
        match msg {
            FdMsg::Heartbeat { .. } => {
                if !self.reliable {
                    self.on_heartbeat(from, out);
                }
            }
            FdMsg::Brb { origin, seq, kind } => {
                if !self.reliable || origin >= self.n {
                    return;
                }
                let latest = self.latest.get(&origin).copied().unwrap_or(0);
                if seq + BRB_WINDOW < latest {
                    return;
                }
                let (me, n, f) = (self.me, self.n, self.f);
                let b = self
                    .beats
                    .entry((origin, seq))
                    .or_insert_with(|| Bracha::new(me, n, f, origin));
                let d = Self::beat_digest(origin, seq);
                let acts = match kind {
                    FdBrbKind::Send => b.on_send(from, (), d),
                    FdBrbKind::Echo => b.on_echo(from, (), d),
                    FdBrbKind::Ready => b.on_ready(from, d),
                };
                self.brb_actions(origin, seq, acts, out);
            }
        }
    }

    fn brb_actions(
        &mut self,
        origin: NodeId,
        seq: u64,
        acts: Vec<BrbAction<()>>,
        out: &mut Vec<FdOutput>,
    ) {
        for a in acts {
            match a {
                BrbAction::Echo(()) => out.push(FdOutput::Broadcast(FdMsg::Brb {
                    origin,
                    seq,
                    kind: FdBrbKind::Echo,
                })),
                BrbAction::Ready(_) => out.push(FdOutput::Broadcast(FdMsg::Brb {
                    origin,
                    seq,
                    kind: FdBrbKind::Ready,
                })),
                BrbAction::Deliver(()) => {
                    let l = self.latest.entry(origin).or_insert(0);
                    *l = (*l).max(seq);
                    let floor = l.saturating_sub(BRB_WINDOW);
                    self.beats
                        .retain(|&(o, s), _| o != origin || s >= floor);
                    if origin != self.me {
                        self.on_heartbeat(origin, out);
                    }
                }
            }
        }
    }
}
