//! The ISS node: epoch lifecycle, segment instances, log, delivery,
//! checkpoints and state transfer.
//!
//! A [`Node`] is a deterministic state machine. The embedding runtime feeds
//! it messages and timer expiries and executes the returned [`Effect`]s.

pub mod byzantine;
pub mod checkpoint;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::buckets::{active_buckets, bucket_of, BucketId, BucketQueues};
use crate::client::{validate_request, Response, Watermarks};
use crate::crypto::{Digest, SignatureScheme};
use crate::domain::{
    Batch, ClientId, ConsensusKind, EpochHistory, EpochLayout, EpochNr, Log, NodeConfig, NodeId,
    OrdererKind, Request, RequestId, SeqNr, Time,
};
use crate::fd::{FailureDetector, FdMsg, FdOutput, FdTimer};
use crate::pbft::{PbftConfig, PbftMode, PbftOrderer};
use crate::policies::LeaderPolicy;
use crate::raft::{RaftConfig, RaftOrderer};
use crate::sb::reference::{ReferenceSb, ADJUDICATOR};
use crate::sb::{
    Dest, InstanceId, ProposalValidator, RejectReason, SbContext, SbMessage, SbOutput, SbParams,
    SbTimer, SequencedBroadcast,
};

pub use byzantine::{Behavior, CrashTrigger};
pub use checkpoint::{batch_root, merkle_root, CheckpointMsg, StableCheckpoint};

use checkpoint::CheckpointCollector;

/// Epochs served per state transfer response.
const MAX_TRANSFER_EPOCHS: usize = 8;

/// Where a message came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Endpoint {
    Node(NodeId),
    Client(ClientId),
    Adjudicator,
}

/// Where a message goes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Node(NodeId),
    Nodes(Vec<NodeId>),
    /// Every node except the sender.
    AllNodes,
    Client(ClientId),
    AllClients,
    Adjudicator,
}

/// One epoch of a state transfer: its certificate and every batch of the
/// epoch in sequence number order.
#[derive(Clone, Debug)]
pub struct TransferEpoch {
    pub checkpoint: StableCheckpoint,
    pub batches: Vec<Batch>,
}

#[derive(Clone, Debug)]
pub enum Msg {
    Sb { inst: InstanceId, msg: SbMessage },
    Fd(FdMsg),
    Checkpoint(CheckpointMsg),
    FetchState { from_epoch: EpochNr },
    StateResponse { epochs: Vec<TransferEpoch> },
    Request(Request),
    Response(Response),
    /// Leaderset of a new epoch, for clients.
    Announce { epoch: EpochNr, leaders: Vec<NodeId> },
    /// Proposal to the ideal consensus adjudicator.
    Propose {
        inst: InstanceId,
        sn: SeqNr,
        value: Batch,
    },
}

impl Msg {
    pub fn wire_size(&self) -> usize {
        match self {
            Msg::Sb { msg, .. } => 12 + msg.wire_size(),
            Msg::Fd(m) => m.wire_size(),
            Msg::Checkpoint(_) => 84,
            Msg::FetchState { .. } => 9,
            Msg::StateResponse { epochs } => {
                4 + epochs
                    .iter()
                    .map(|t| {
                        t.checkpoint.wire_size()
                            + t.batches.iter().map(Batch::wire_size).sum::<usize>()
                    })
                    .sum::<usize>()
            }
            Msg::Request(r) => r.wire_size(),
            Msg::Response(r) => r.wire_size(),
            Msg::Announce { leaders, .. } => 12 + 4 * leaders.len(),
            Msg::Propose { value, .. } => 20 + value.wire_size(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum NodeTimer {
    Sb { inst: InstanceId, timer: SbTimer },
    Fd(FdTimer),
    Propose,
    /// Epoch-change timeout; fires state transfer probing.
    Progress { gen: u64 },
    TransferRetry { gen: u64 },
}

/// Observable node activity, recorded by the runtime.
#[derive(Clone, Debug)]
pub enum Event {
    EpochStart {
        epoch: EpochNr,
        leaders: Vec<NodeId>,
        first_sn: SeqNr,
        len: u64,
    },
    SbInit {
        inst: InstanceId,
        sender: NodeId,
        seq_nrs: Vec<SeqNr>,
    },
    SbCast {
        inst: InstanceId,
        sn: SeqNr,
        batch: Batch,
    },
    SbDeliver {
        inst: InstanceId,
        sn: SeqNr,
        batch: Batch,
    },
    /// `inst` is `None` for the node-wide failure detector.
    Suspect {
        node: NodeId,
        inst: Option<InstanceId>,
    },
    Restore {
        node: NodeId,
        inst: Option<InstanceId>,
    },
    Rejected {
        inst: InstanceId,
        sn: SeqNr,
        from: NodeId,
        reason: RejectReason,
    },
    Elected {
        inst: InstanceId,
        term: u64,
    },
    Commit {
        sn: SeqNr,
        batch: Batch,
    },
    Deliver {
        sn: SeqNr,
        first_delivery_nr: u64,
        count: u64,
    },
    CheckpointStable {
        epoch: EpochNr,
        max_sn: SeqNr,
        root: Digest,
    },
    StateTransfer {
        peer: NodeId,
        epoch: EpochNr,
        accepted: bool,
    },
    /// A second, different value arrived for a committed sequence number.
    LogConflict { sn: SeqNr },
    Crashed,
}

#[derive(Clone, Debug)]
pub enum Effect {
    Send { to: Target, msg: Msg },
    Timer { after: Time, timer: NodeTimer },
    Event(Event),
}

#[derive(Clone)]
pub struct NodeParams {
    pub id: NodeId,
    pub cfg: NodeConfig,
    pub scheme: Arc<dyn SignatureScheme + Send + Sync>,
    pub behavior: Behavior,
    pub crash: Option<CrashTrigger>,
    /// Last epoch to run; `None` runs forever.
    pub final_epoch: Option<EpochNr>,
    pub seed: u64,
}

/// Admissibility of proposals in one segment. Requests must pass the
/// reception checks, must not have been accepted earlier in the epoch or
/// committed before, and must belong to the segment's buckets.
pub struct RequestValidator<'a> {
    pub cfg: &'a NodeConfig,
    pub scheme: &'a dyn SignatureScheme,
    pub watermarks: &'a Watermarks,
    pub queues: &'a BucketQueues,
    pub buckets: &'a BTreeSet<BucketId>,
    pub seen: &'a mut BTreeSet<RequestId>,
}

impl ProposalValidator for RequestValidator<'_> {
    fn validate(&mut self, batch: &Batch) -> Result<(), RejectReason> {
        let reqs = batch.requests();
        if reqs.len() > self.cfg.max_batch_size {
            return Err(RejectReason::Malformed);
        }
        let mut ids = BTreeSet::new();
        for r in reqs {
            if !ids.insert(r.id) {
                return Err(RejectReason::Malformed);
            }
            if validate_request(
                r,
                self.cfg.num_clients,
                self.cfg.client_signatures,
                self.scheme,
                self.watermarks,
            )
            .is_err()
            {
                return Err(RejectReason::InvalidRequest);
            }
            if self.seen.contains(&r.id) || self.queues.is_committed(&r.id) {
                return Err(RejectReason::Duplicate);
            }
            if !self.buckets.contains(&bucket_of(r.id, self.cfg.num_buckets)) {
                return Err(RejectReason::ForeignBucket);
            }
        }
        Ok(())
    }

    fn record(&mut self, batch: &Batch) {
        self.seen.extend(batch.requests().iter().map(|r| r.id));
    }
}

struct OwnSegment {
    index: u32,
    seq_nrs: Vec<SeqNr>,
    next: usize,
    last: Time,
}

struct EpochState {
    layout: EpochLayout,
    instances: BTreeMap<u32, Box<dyn SequencedBroadcast>>,
    buckets: Vec<BTreeSet<BucketId>>,
    seen: BTreeSet<RequestId>,
    own: Option<OwnSegment>,
    complete: bool,
}

#[derive(Clone, Copy, Debug)]
struct Transfer {
    peer: NodeId,
    gen: u64,
}

pub struct Node {
    id: NodeId,
    cfg: NodeConfig,
    scheme: Arc<dyn SignatureScheme + Send + Sync>,
    behavior: Behavior,
    crash_trigger: Option<CrashTrigger>,
    final_epoch: Option<EpochNr>,
    seed: u64,
    now: Time,
    out: Vec<Effect>,
    crashed: bool,
    stopped: bool,
    history: EpochHistory,
    policy: LeaderPolicy,
    log: Log,
    epoch: EpochNr,
    epochs: BTreeMap<EpochNr, EpochState>,
    queues: BucketQueues,
    watermarks: Watermarks,
    proposed: BTreeMap<SeqNr, Batch>,
    fd: Option<FailureDetector>,
    no_suspects: BTreeSet<NodeId>,
    buffered: BTreeMap<EpochNr, Vec<(NodeId, InstanceId, SbMessage)>>,
    collector: CheckpointCollector,
    stable: BTreeMap<EpochNr, StableCheckpoint>,
    transfer: Option<Transfer>,
    transfer_gen: u64,
    next_peer: NodeId,
    progress_gen: u64,
    propose_at: Option<Time>,
}

impl Node {
    pub fn new(p: NodeParams) -> Self {
        let cfg = p.cfg;
        // The heartbeat detector only feeds the reference construction;
        // the protocol orderers derive suspicion from their own timers.
        let fd = (cfg.orderer == OrdererKind::Reference).then(|| {
            FailureDetector::new(p.id, cfg.n, cfg.f, cfg.mean_delay, cfg.fd_reliable_heartbeats)
        });
        Node {
            id: p.id,
            policy: LeaderPolicy::new(cfg.policy.clone(), cfg.n, cfg.f, cfg.leader_candidates()),
            queues: BucketQueues::new(cfg.num_buckets),
            watermarks: Watermarks::new(cfg.watermark_width),
            scheme: p.scheme,
            behavior: p.behavior,
            crash_trigger: p.crash,
            final_epoch: p.final_epoch,
            seed: p.seed,
            now: 0,
            out: Vec::new(),
            crashed: false,
            stopped: false,
            history: EpochHistory::new(),
            log: Log::new(),
            epoch: 0,
            epochs: BTreeMap::new(),
            proposed: BTreeMap::new(),
            fd,
            no_suspects: BTreeSet::new(),
            buffered: BTreeMap::new(),
            collector: CheckpointCollector::default(),
            stable: BTreeMap::new(),
            transfer: None,
            transfer_gen: 0,
            next_peer: p.id,
            progress_gen: 0,
            propose_at: None,
            cfg,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn log(&self) -> &Log {
        &self.log
    }

    pub fn history(&self) -> &EpochHistory {
        &self.history
    }

    /// The epoch currently being ordered (the last one, once stopped).
    pub fn epoch(&self) -> EpochNr {
        self.epoch
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed
    }

    /// Finished the final epoch.
    pub fn is_done(&self) -> bool {
        self.stopped
    }

    pub fn stable_checkpoint(&self, e: EpochNr) -> Option<&StableCheckpoint> {
        self.stable.get(&e)
    }

    pub fn queued_requests(&self) -> usize {
        self.queues.total_queued()
    }

    /// Sets the last epoch to run. Ignored if the node is already past it.
    pub fn set_final_epoch(&mut self, e: EpochNr) {
        if e >= self.epoch {
            self.final_epoch = Some(e);
        }
    }

    pub fn init(&mut self, now: Time) -> Vec<Effect> {
        self.now = now;
        if let Some(fd) = &mut self.fd {
            let mut o = Vec::new();
            fd.start(&mut o);
            self.fd_outputs(o);
        }
        self.start_epoch();
        self.take()
    }

    /// Stops the node for good.
    pub fn crash(&mut self) -> Vec<Effect> {
        if !self.crashed {
            self.crashed = true;
            self.event(Event::Crashed);
        }
        self.take()
    }

    pub fn on_message(&mut self, now: Time, from: Endpoint, msg: Msg) -> Vec<Effect> {
        if self.crashed {
            return Vec::new();
        }
        self.now = now;
        match (from, msg) {
            (Endpoint::Node(p), m) if p < self.cfg.n && p != self.id => self.on_node_msg(p, m),
            (Endpoint::Client(_), Msg::Request(r)) => self.on_request(r),
            (Endpoint::Adjudicator, Msg::Sb { inst, msg }) => {
                if matches!(msg, SbMessage::Decide { .. }) {
                    self.on_sb(ADJUDICATOR, inst, msg);
                }
            }
            _ => {}
        }
        self.take()
    }

    pub fn on_timer(&mut self, now: Time, t: NodeTimer) -> Vec<Effect> {
        if self.crashed {
            return Vec::new();
        }
        self.now = now;
        match t {
            NodeTimer::Sb { inst, timer } => self.dispatch(inst, |sb, cx| sb.on_timer(timer, cx)),
            NodeTimer::Fd(t) => {
                if let Some(fd) = &mut self.fd {
                    let mut o = Vec::new();
                    fd.on_timer(t, &mut o);
                    self.fd_outputs(o);
                }
            }
            NodeTimer::Propose => {
                self.propose_at = None;
                self.try_propose();
            }
            NodeTimer::Progress { gen } => {
                if gen == self.progress_gen && !self.stopped {
                    self.start_transfer();
                    self.arm_progress();
                }
            }
            NodeTimer::TransferRetry { gen } => {
                if self.transfer.is_some_and(|t| t.gen == gen) {
                    self.transfer = None;
                    self.start_transfer();
                }
            }
        }
        self.take()
    }

    fn take(&mut self) -> Vec<Effect> {
        std::mem::take(&mut self.out)
    }

    fn event(&mut self, e: Event) {
        self.out.push(Effect::Event(e));
    }

    fn send(&mut self, to: Target, msg: Msg) {
        self.out.push(Effect::Send { to, msg });
    }

    fn timer(&mut self, after: Time, timer: NodeTimer) {
        self.out.push(Effect::Timer { after, timer });
    }

    fn on_node_msg(&mut self, from: NodeId, msg: Msg) {
        match msg {
            Msg::Sb { inst, msg } => self.on_sb(from, inst, msg),
            Msg::Fd(m) => {
                if let Some(fd) = &mut self.fd {
                    let mut o = Vec::new();
                    fd.on_message(from, m, &mut o);
                    self.fd_outputs(o);
                }
            }
            Msg::Checkpoint(m) => {
                if m.signer == from && !self.stable.contains_key(&m.epoch) && m.verify(&*self.scheme) {
                    self.add_checkpoint(m);
                }
            }
            Msg::FetchState { from_epoch } => self.on_fetch(from, from_epoch),
            Msg::StateResponse { epochs } => self.on_state(from, epochs),
            _ => {}
        }
    }

    fn on_request(&mut self, r: Request) {
        if validate_request(
            &r,
            self.cfg.num_clients,
            self.cfg.client_signatures,
            &*self.scheme,
            &self.watermarks,
        )
        .is_err()
        {
            return;
        }
        if self.queues.add(r) {
            self.try_propose();
        }
    }

    // ---- instances ----

    fn on_sb(&mut self, from: NodeId, inst: InstanceId, msg: SbMessage) {
        if inst.epoch > self.epoch {
            if inst.epoch >= self.epoch + 2 {
                self.start_transfer();
            }
            if inst.epoch <= self.epoch + 2 && !self.stopped {
                self.buffered
                    .entry(inst.epoch)
                    .or_default()
                    .push((from, inst, msg));
            }
            return;
        }
        self.dispatch(inst, |sb, cx| sb.on_message(from, msg, cx));
    }

    fn dispatch(
        &mut self,
        inst: InstanceId,
        f: impl FnOnce(&mut dyn SequencedBroadcast, &mut SbContext),
    ) {
        let Some(es) = self.epochs.get_mut(&inst.epoch) else {
            return;
        };
        let EpochState {
            instances,
            buckets,
            seen,
            ..
        } = es;
        let Some(sb) = instances.get_mut(&inst.index) else {
            return;
        };
        let mut validator = RequestValidator {
            cfg: &self.cfg,
            scheme: &*self.scheme,
            watermarks: &self.watermarks,
            queues: &self.queues,
            buckets: &buckets[inst.index as usize],
            seen,
        };
        let suspected = self.fd.as_ref().map_or(&self.no_suspects, |fd| fd.suspected());
        let mut out = Vec::new();
        let mut cx = SbContext {
            now: self.now,
            scheme: &*self.scheme,
            validator: &mut validator,
            suspected,
            out: &mut out,
        };
        f(sb.as_mut(), &mut cx);
        self.sb_outputs(inst, out);
    }

    fn sb_outputs(&mut self, inst: InstanceId, out: Vec<SbOutput>) {
        for o in out {
            match o {
                SbOutput::Send { to, msg } => self.send_sb(inst, to, msg),
                SbOutput::Timer { after, timer } => self.timer(after, NodeTimer::Sb { inst, timer }),
                SbOutput::Deliver { sn, value } => {
                    self.event(Event::SbDeliver {
                        inst,
                        sn,
                        batch: value.clone(),
                    });
                    self.commit(sn, value);
                }
                SbOutput::Suspect(node) => self.event(Event::Suspect {
                    node,
                    inst: Some(inst),
                }),
                SbOutput::Restore(node) => self.event(Event::Restore {
                    node,
                    inst: Some(inst),
                }),
                SbOutput::Rejected { sn, from, reason } => self.event(Event::Rejected {
                    inst,
                    sn,
                    from,
                    reason,
                }),
                SbOutput::Elected { term } => self.event(Event::Elected { inst, term }),
                SbOutput::Propose { sn, value } => {
                    self.send(Target::Adjudicator, Msg::Propose { inst, sn, value })
                }
            }
            if self.crashed {
                return;
            }
        }
        self.try_propose();
    }

    fn send_sb(&mut self, inst: InstanceId, to: Dest, msg: SbMessage) {
        if self.behavior == Behavior::Equivocate && to == Dest::AllOthers {
            let others: Vec<NodeId> = (0..self.cfg.n).filter(|&p| p != self.id).collect();
            if let Some(parts) = byzantine::equivocate(inst, self.id, &msg, &others, &*self.scheme) {
                for (m, nodes) in parts {
                    if !nodes.is_empty() {
                        self.send(Target::Nodes(nodes), Msg::Sb { inst, msg: m });
                    }
                }
                return;
            }
        }
        let to = match to {
            Dest::AllOthers => Target::AllNodes,
            Dest::Node(p) => Target::Node(p),
        };
        self.send(to, Msg::Sb { inst, msg });
    }

    fn fd_outputs(&mut self, o: Vec<FdOutput>) {
        for x in o {
            match x {
                FdOutput::Broadcast(m) => self.send(Target::AllNodes, Msg::Fd(m)),
                FdOutput::Timer { after, timer } => self.timer(after, NodeTimer::Fd(timer)),
                FdOutput::Suspect(node) => {
                    self.event(Event::Suspect { node, inst: None });
                    for inst in self.live_instances() {
                        self.dispatch(inst, |sb, cx| sb.on_suspect(node, cx));
                    }
                }
                FdOutput::Restore(node) => {
                    self.event(Event::Restore { node, inst: None });
                    for inst in self.live_instances() {
                        self.dispatch(inst, |sb, cx| sb.on_restore(node, cx));
                    }
                }
            }
        }
    }

    fn live_instances(&self) -> Vec<InstanceId> {
        self.epochs
            .iter()
            .flat_map(|(&epoch, es)| {
                es.instances
                    .keys()
                    .map(move |&index| InstanceId { epoch, index })
            })
            .collect()
    }

    fn pbft_config(&self, mode: PbftMode) -> PbftConfig {
        PbftConfig {
            n: self.cfg.n,
            f: self.cfg.f,
            mode,
            timeout: self.cfg.epoch_change_timeout,
            max_inflight: self.cfg.max_inflight,
            quorum_override: self.cfg.quorum_override,
        }
    }

    fn make_instance(&self, p: SbParams) -> Box<dyn SequencedBroadcast> {
        match self.cfg.orderer {
            OrdererKind::Pbft => Box::new(PbftOrderer::new(p, self.pbft_config(PbftMode::Direct))),
            OrdererKind::Raft => Box::new(RaftOrderer::new(
                p,
                RaftConfig {
                    n: self.cfg.n,
                    mean_delay: self.cfg.mean_delay,
                    heartbeat: self.cfg.mean_delay / 2,
                    max_inflight: self.cfg.max_inflight,
                    seed: self.seed,
                },
            )),
            OrdererKind::Reference => {
                let consensus = match self.cfg.consensus {
                    ConsensusKind::Ideal => None,
                    ConsensusKind::Pbft => Some(self.pbft_config(PbftMode::Consensus)),
                };
                Box::new(ReferenceSb::new(p, self.cfg.n, self.cfg.f, consensus))
            }
        }
    }

    // ---- epochs ----

    fn start_epoch(&mut self) {
        loop {
            let e = self.history.len() as EpochNr;
            if self.final_epoch.is_some_and(|last| e > last) {
                self.stopped = true;
                self.buffered.clear();
                return;
            }
            let leaders = self.policy.leaders();
            let layout = self.history.push(leaders.clone(), &self.cfg).clone();
            self.epoch = e;
            self.event(Event::EpochStart {
                epoch: e,
                leaders: leaders.clone(),
                first_sn: layout.first_sn,
                len: layout.len,
            });
            self.send(Target::AllClients, Msg::Announce { epoch: e, leaders });
            if self.crash_trigger == Some(CrashTrigger::EpochStart(e)) {
                self.crashed = true;
                self.event(Event::Crashed);
                return;
            }
            if layout.len == 0 {
                self.policy.epoch_finished(&layout, &self.log);
                continue;
            }
            self.arm_progress();
            self.init_epoch(layout);
            return;
        }
    }

    fn arm_progress(&mut self) {
        self.progress_gen += 1;
        let gen = self.progress_gen;
        self.timer(self.cfg.epoch_change_timeout, NodeTimer::Progress { gen });
    }

    fn init_epoch(&mut self, layout: EpochLayout) {
        let e = layout.epoch;
        let leaders = layout.leaders.clone();
        let mut es = EpochState {
            layout,
            instances: BTreeMap::new(),
            buckets: Vec::with_capacity(leaders.len()),
            seen: BTreeSet::new(),
            own: None,
            complete: false,
        };
        let mut ids = Vec::with_capacity(leaders.len());
        for (idx, &leader) in leaders.iter().enumerate() {
            let inst = InstanceId {
                epoch: e,
                index: idx as u32,
            };
            let seq_nrs = es.layout.segment_seq_nrs(idx);
            es.buckets.push(active_buckets(
                e,
                &leaders,
                leader,
                self.cfg.n,
                self.cfg.num_buckets,
            ));
            self.out.push(Effect::Event(Event::SbInit {
                inst,
                sender: leader,
                seq_nrs: seq_nrs.clone(),
            }));
            if leader == self.id {
                es.own = Some(OwnSegment {
                    index: idx as u32,
                    seq_nrs: seq_nrs.clone(),
                    next: 0,
                    last: self.now,
                });
            }
            let sb = self.make_instance(SbParams {
                id: inst,
                me: self.id,
                sender: leader,
                seq_nrs,
            });
            es.instances.insert(inst.index, sb);
            ids.push(inst);
        }
        self.epochs.insert(e, es);
        for inst in ids {
            self.dispatch(inst, |sb, cx| sb.init(cx));
            if self.crashed {
                return;
            }
        }
        let later = self.buffered.split_off(&(e + 1));
        let ready = std::mem::replace(&mut self.buffered, later);
        for (_, msgs) in ready {
            for (from, inst, msg) in msgs {
                self.on_sb(from, inst, msg);
                if self.crashed || self.epoch != e {
                    // the epoch completed while draining; later messages
                    // were re-buffered or dispatched on the way
                }
            }
        }
        self.try_propose();
    }

    fn batch_timing(&self, num_leaders: usize) -> (Time, Time) {
        let c = &self.cfg;
        if self.behavior == Behavior::Straggle {
            let t = c.epoch_change_timeout / 2;
            return (t, t);
        }
        if c.batch_rate > 0.0 {
            let s = (num_leaders as f64 / c.batch_rate * crate::SEC as f64) as Time;
            let s = s.clamp(c.min_batch_timeout, c.max_batch_timeout.max(c.min_batch_timeout));
            (s, s)
        } else {
            (
                c.min_batch_timeout,
                c.max_batch_timeout.max(c.min_batch_timeout),
            )
        }
    }

    fn schedule_propose(&mut self, at: Time) {
        if self.propose_at.is_some_and(|t| t <= at) {
            return;
        }
        self.propose_at = Some(at);
        self.timer(at.saturating_sub(self.now), NodeTimer::Propose);
    }

    fn try_propose(&mut self) {
        if self.crashed {
            return;
        }
        let e = self.epoch;
        let Some(es) = self.epochs.get(&e) else {
            return;
        };
        let Some(own) = &es.own else {
            return;
        };
        if own.next >= own.seq_nrs.len() {
            return;
        }
        let idx = own.index;
        if !es.instances[&idx].ready_for_cast() {
            return;
        }
        let (spacing, timeout) = self.batch_timing(es.layout.leaders.len());
        let elapsed = self.now.saturating_sub(own.last);
        if elapsed < spacing {
            let at = own.last + spacing;
            self.schedule_propose(at);
            return;
        }
        let buckets = &es.buckets[idx as usize];
        if self.behavior != Behavior::Straggle
            && self.queues.queued_in(buckets) < self.cfg.max_batch_size
            && elapsed < timeout
        {
            let at = own.last + timeout;
            self.schedule_propose(at);
            return;
        }
        let last_slot = own.next + 1 == own.seq_nrs.len();
        let sn = own.seq_nrs[own.next];
        if last_slot && self.crash_trigger == Some(CrashTrigger::EpochEnd(e)) {
            self.crashed = true;
            self.event(Event::Crashed);
            return;
        }
        let batch = if self.behavior == Behavior::Straggle {
            Batch::empty()
        } else {
            let buckets = es.buckets[idx as usize].clone();
            self.queues.cut_batch(&buckets, self.cfg.max_batch_size)
        };
        let es = self.epochs.get_mut(&e).unwrap();
        let own = es.own.as_mut().unwrap();
        own.next += 1;
        own.last = self.now;
        let inst = InstanceId { epoch: e, index: idx };
        self.proposed.insert(sn, batch.clone());
        self.event(Event::SbCast {
            inst,
            sn,
            batch: batch.clone(),
        });
        let mut res = Ok(());
        self.dispatch(inst, |sb, cx| res = sb.cast(sn, batch, cx));
        debug_assert!(res.is_ok(), "cast failed: {res:?}");
    }

    // ---- log ----

    fn commit(&mut self, sn: SeqNr, batch: Batch) {
        match self.log.commit(sn, batch.clone()) {
            Ok(true) => {}
            Ok(false) => return,
            Err(_) => {
                self.event(Event::LogConflict { sn });
                return;
            }
        }
        if !batch.is_nil() {
            self.queues.on_commit(&batch);
        }
        if let Some(p) = self.proposed.remove(&sn) {
            if p != batch {
                self.queues.resurrect(&p);
            }
        }
        self.event(Event::Commit { sn, batch });
        for d in self.log.deliver_ready() {
            self.event(Event::Deliver {
                sn: d.sn,
                first_delivery_nr: d.first_delivery_nr,
                count: d.batch.len() as u64,
            });
            let mut per_client: BTreeMap<ClientId, Vec<(RequestId, u64)>> = BTreeMap::new();
            for (k, r) in d.batch.requests().iter().enumerate() {
                per_client
                    .entry(r.id.client)
                    .or_default()
                    .push((r.id, d.first_delivery_nr + k as u64));
            }
            for (c, entries) in per_client {
                let resp = Response::new(self.id, entries, &*self.scheme);
                self.send(Target::Client(c), Msg::Response(resp));
            }
        }
        self.check_epoch_complete();
    }

    fn check_epoch_complete(&mut self) {
        while !self.crashed && !self.stopped {
            let e = self.epoch;
            let Some(es) = self.epochs.get(&e) else {
                return;
            };
            if es.complete || !es.layout.seq_nrs().all(|sn| self.log.contains(sn)) {
                return;
            }
            self.finish_epoch(e);
        }
    }

    fn finish_epoch(&mut self, e: EpochNr) {
        let es = self.epochs.get_mut(&e).unwrap();
        es.complete = true;
        let layout = es.layout.clone();
        self.policy.epoch_finished(&layout, &self.log);
        let queues = &self.queues;
        self.watermarks
            .advance(|id| queues.is_committed(&id), self.cfg.num_clients);
        let wm = &self.watermarks;
        self.queues
            .retain_committed(|id| id.timestamp >= wm.low(id.client));
        self.queues.retain_queued(|id| id.timestamp >= wm.low(id.client));

        let root = batch_root(layout.seq_nrs().map(|sn| self.log.get(sn).unwrap()));
        let claimed = if self.behavior == Behavior::WrongCheckpoint {
            Digest::of(&root.0)
        } else {
            root
        };
        let max_sn = layout.max_sn().expect("finished an empty epoch");
        let m = CheckpointMsg::new(e, max_sn, claimed, self.id, &*self.scheme);
        self.send(Target::AllNodes, Msg::Checkpoint(m.clone()));
        if let Some(cp) = self.stable.get(&e) {
            if cp.root != root {
                self.event(Event::LogConflict { sn: max_sn });
            }
        } else {
            self.add_checkpoint(m);
        }
        self.gc(e);
        self.start_epoch();
    }

    // ---- checkpoints ----

    fn add_checkpoint(&mut self, m: CheckpointMsg) {
        let Some(cp) = self.collector.add(&m, self.cfg.strong_quorum()) else {
            return;
        };
        let e = cp.epoch;
        self.event(Event::CheckpointStable {
            epoch: e,
            max_sn: cp.max_sn,
            root: cp.root,
        });
        self.stable.insert(e, cp);
        if self.epochs.get(&e).is_some_and(|s| s.complete) {
            self.gc(e);
        } else if e >= self.epoch && !self.stopped {
            self.start_transfer();
        }
    }

    /// Retires instances of complete epochs up to a stable one.
    fn gc(&mut self, upto: EpochNr) {
        if !self.stable.contains_key(&upto) {
            return;
        }
        let done: Vec<EpochNr> = self
            .epochs
            .range(..=upto)
            .filter(|(_, s)| s.complete)
            .map(|(&e, _)| e)
            .collect();
        for e in done {
            self.epochs.remove(&e);
        }
        self.collector.prune(upto);
    }

    // ---- state transfer ----

    fn start_transfer(&mut self) {
        if self.transfer.is_some() || self.stopped || self.cfg.n < 2 {
            return;
        }
        self.next_peer = (self.next_peer + 1) % self.cfg.n;
        if self.next_peer == self.id {
            self.next_peer = (self.next_peer + 1) % self.cfg.n;
        }
        self.transfer_gen += 1;
        let t = Transfer {
            peer: self.next_peer,
            gen: self.transfer_gen,
        };
        self.transfer = Some(t);
        self.send(
            Target::Node(t.peer),
            Msg::FetchState {
                from_epoch: self.epoch,
            },
        );
        let retry = (self.cfg.epoch_change_timeout / 2).max(10 * self.cfg.mean_delay);
        self.timer(retry, NodeTimer::TransferRetry { gen: t.gen });
    }

    fn epoch_in_log(&self, e: EpochNr) -> Option<&EpochLayout> {
        let layout = self.history.get(e)?;
        layout
            .seq_nrs()
            .all(|sn| self.log.contains(sn))
            .then_some(layout)
    }

    fn on_fetch(&mut self, from: NodeId, from_epoch: EpochNr) {
        let mut epochs = Vec::new();
        for (&e, cp) in self.stable.range(from_epoch..) {
            let Some(layout) = self.epoch_in_log(e) else {
                break;
            };
            let batches = layout
                .seq_nrs()
                .map(|sn| self.log.get(sn).unwrap().clone())
                .collect();
            epochs.push(TransferEpoch {
                checkpoint: cp.clone(),
                batches,
            });
            if epochs.len() >= MAX_TRANSFER_EPOCHS {
                break;
            }
        }
        if self.behavior == Behavior::TamperTransfer {
            tamper(&mut epochs);
        }
        self.send(Target::Node(from), Msg::StateResponse { epochs });
    }

    fn verify_transfer(&self, t: &TransferEpoch) -> bool {
        let cp = &t.checkpoint;
        let Some(layout) = self.history.get(cp.epoch) else {
            return false;
        };
        layout.max_sn() == Some(cp.max_sn)
            && t.batches.len() as u64 == layout.len
            && cp.valid_signers(self.cfg.n, &*self.scheme) >= self.cfg.strong_quorum()
            && t.batches.iter().all(|b| b.recompute_digest() == b.digest())
            && batch_root(&t.batches) == cp.root
    }

    fn on_state(&mut self, from: NodeId, epochs: Vec<TransferEpoch>) {
        if !self.transfer.is_some_and(|t| t.peer == from) {
            return;
        }
        self.transfer = None;
        for t in epochs {
            let e = t.checkpoint.epoch;
            if self.stopped || self.crashed || e > self.epoch {
                return;
            }
            if e < self.epoch || self.epochs.get(&e).is_some_and(|s| s.complete) {
                continue;
            }
            if !self.verify_transfer(&t) {
                self.event(Event::StateTransfer {
                    peer: from,
                    epoch: e,
                    accepted: false,
                });
                self.start_transfer();
                return;
            }
            self.event(Event::StateTransfer {
                peer: from,
                epoch: e,
                accepted: true,
            });
            let first = self.history.get(e).unwrap().first_sn;
            self.stable.insert(e, t.checkpoint);
            for (k, b) in t.batches.into_iter().enumerate() {
                self.commit(first + k as SeqNr, b);
                if self.crashed {
                    return;
                }
            }
        }
    }
}

/// Replaces the first non-empty batch with a shorter, self-consistent one.
fn tamper(epochs: &mut [TransferEpoch]) {
    for t in epochs {
        if let Some(b) = t.batches.iter_mut().find(|b| !b.is_empty()) {
            *b = byzantine::twin(b);
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::MacScheme;
    use crate::SEC;
    use std::sync::Arc as StdArc;

    fn req(c: u64, t: u64) -> Request {
        Request::new_signed(
            RequestId::new(c, t),
            StdArc::from(vec![7u8; 4]),
            &MacScheme::default(),
        )
    }

    fn validator_fixture() -> (NodeConfig, Watermarks, BucketQueues) {
        let mut cfg = NodeConfig::new(4, 1);
        cfg.num_buckets = 4;
        (cfg, Watermarks::new(128), BucketQueues::new(4))
    }

    #[test]
    fn validator_rules() {
        let (cfg, wm, mut queues) = validator_fixture();
        let s = MacScheme::default();
        let buckets: BTreeSet<BucketId> = [0].into_iter().collect();
        let mut seen = BTreeSet::new();
        // bucket of (0, t) is t mod 4
        let ok = Batch::new(vec![req(0, 0), req(0, 4)]);
        let foreign = Batch::new(vec![req(0, 1)]);
        let dup_in_batch = Batch::new(vec![req(0, 0), req(0, 0)]);
        queues.on_commit(&Batch::new(vec![req(0, 8)]));
        let committed = Batch::new(vec![req(0, 8)]);
        let unknown = Batch::new(vec![req(9, 0)]);
        let mut v = RequestValidator {
            cfg: &cfg,
            scheme: &s,
            watermarks: &wm,
            queues: &queues,
            buckets: &buckets,
            seen: &mut seen,
        };
        assert_eq!(v.validate(&ok), Ok(()));
        assert_eq!(v.validate(&foreign), Err(RejectReason::ForeignBucket));
        assert_eq!(v.validate(&dup_in_batch), Err(RejectReason::Malformed));
        assert_eq!(v.validate(&committed), Err(RejectReason::Duplicate));
        assert_eq!(v.validate(&unknown), Err(RejectReason::InvalidRequest));
        v.record(&ok);
        assert_eq!(v.validate(&ok), Err(RejectReason::Duplicate));
        assert_eq!(v.validate(&Batch::Nil), Ok(()));
    }

    fn node(id: NodeId, cfg: &NodeConfig) -> Node {
        Node::new(NodeParams {
            id,
            cfg: cfg.clone(),
            scheme: Arc::new(MacScheme::default()),
            behavior: Behavior::Correct,
            crash: None,
            final_epoch: None,
            seed: 1,
        })
    }

    #[test]
    fn init_creates_one_instance_per_leader() {
        let cfg = NodeConfig::new(4, 1);
        let mut n = node(0, &cfg);
        let fx = n.init(0);
        let inits: Vec<_> = fx
            .iter()
            .filter_map(|e| match e {
                Effect::Event(Event::SbInit { inst, seq_nrs, .. }) => Some((*inst, seq_nrs.clone())),
                _ => None,
            })
            .collect();
        assert_eq!(inits.len(), 4);
        assert_eq!(inits[1].1, vec![1, 5, 9, 13]);
        assert!(fx
            .iter()
            .any(|e| matches!(e, Effect::Send { to: Target::AllClients, msg: Msg::Announce { epoch: 0, .. } })));
    }

    #[test]
    fn leader_proposes_after_batch_spacing() {
        let cfg = NodeConfig::new(4, 1);
        let mut n = node(0, &cfg);
        let fx = n.init(0);
        let spacing = fx
            .iter()
            .find_map(|e| match e {
                Effect::Timer {
                    after,
                    timer: NodeTimer::Propose,
                } => Some(*after),
                _ => None,
            })
            .unwrap();
        // four leaders at 32 batches/s
        assert_eq!(spacing, SEC / 8);
        let fx = n.on_timer(spacing, NodeTimer::Propose);
        assert!(fx
            .iter()
            .any(|e| matches!(e, Effect::Event(Event::SbCast { sn: 0, .. }))));
    }

    #[test]
    fn epoch_start_crash_proposes_nothing() {
        let cfg = NodeConfig::new(4, 1);
        let mut n = Node::new(NodeParams {
            crash: Some(CrashTrigger::EpochStart(0)),
            ..NodeParams {
                id: 0,
                cfg,
                scheme: Arc::new(MacScheme::default()),
                behavior: Behavior::Correct,
                crash: None,
                final_epoch: None,
                seed: 0,
            }
        });
        let fx = n.init(0);
        assert!(n.is_crashed());
        assert!(!fx
            .iter()
            .any(|e| matches!(e, Effect::Event(Event::SbInit { .. }))));
    }

    #[test]
    fn tamper_keeps_digests_consistent_but_changes_root() {
        let s = MacScheme::default();
        let batches = vec![Batch::Nil, Batch::new(vec![req(0, 0), req(0, 1)])];
        let root = batch_root(&batches);
        let cp = StableCheckpoint {
            epoch: 0,
            max_sn: 1,
            root,
            cert: vec![(0, CheckpointMsg::new(0, 1, root, 0, &s).sig)],
        };
        let mut t = vec![TransferEpoch {
            checkpoint: cp,
            batches,
        }];
        tamper(&mut t);
        assert!(t[0].batches.iter().all(|b| b.recompute_digest() == b.digest()));
        assert_ne!(batch_root(&t[0].batches), root);
    }
}
