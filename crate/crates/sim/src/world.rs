//! The discrete-event run loop for a full deployment: nodes, clients, the
//! ideal adjudicator, the network and fault injection.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use iss_core::client::{Client, ClientOutput, ClientParams, ClientTarget};
use iss_core::crypto::{Digest, MacScheme};
use iss_core::domain::{ConsensusKind, OrdererKind};
use iss_core::iss::{Effect, Endpoint, Event, Msg, Node, NodeParams, NodeTimer, Target};
use iss_core::sb::reference::Adjudicator;
use iss_core::sb::{InstanceId, SbMessage};
use iss_core::{Batch, ClientId, NodeConfig, NodeId, Time, MS, SEC};

use crate::config::{ScenarioConfig, ScenarioError, Trigger};
use crate::net::Network;
use crate::trace::{FinalLog, Header, Inst, TraceEvent};

#[derive(Debug)]
enum Ev {
    ToNode { to: NodeId, from: Endpoint, msg: Msg },
    ToClient { to: ClientId, from: NodeId, msg: Msg },
    ToAdjudicator { from: NodeId, msg: Msg },
    Timer { node: NodeId, timer: NodeTimer },
    Tick { client: ClientId },
    Crash { node: NodeId },
}

struct Entry {
    t: Time,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Entry {
    fn eq(&self, o: &Self) -> bool {
        (self.t, self.seq) == (o.t, o.seq)
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Entry {
    // min-heap on (time, seq)
    fn cmp(&self, o: &Self) -> Ordering {
        (o.t, o.seq).cmp(&(self.t, self.seq))
    }
}

/// Result of one simulated run.
#[derive(Debug)]
pub struct Outcome {
    pub trace: Vec<TraceEvent>,
    pub end: Time,
    pub truncated: bool,
    pub load_cut: bool,
}

pub fn inst(i: InstanceId) -> Inst {
    Inst {
        epoch: i.epoch,
        index: i.index,
    }
}

struct World {
    cfg: ScenarioConfig,
    ncfg: NodeConfig,
    now: Time,
    seq: u64,
    queue: BinaryHeap<Entry>,
    rng: ChaCha8Rng,
    net: Network,
    scheme: Arc<MacScheme>,
    nodes: Vec<Node>,
    clients: Vec<Client>,
    submitted: Vec<u64>,
    adjudicator: Option<Adjudicator>,
    faulty: BTreeSet<NodeId>,
    trace: Vec<TraceEvent>,
    known_batches: BTreeSet<[u8; 32]>,
    payload: Arc<[u8]>,
    load_end: Time,
    tick: Time,
    final_set: bool,
    seed: u64,
}

/// Runs the scenario with the given seed. Same inputs, same trace.
pub fn run(cfg: &ScenarioConfig, seed: u64) -> Result<Outcome, ScenarioError> {
    cfg.validate()?;
    let mut w = World::new(cfg.clone(), seed);
    Ok(w.run())
}

impl World {
    fn new(cfg: ScenarioConfig, seed: u64) -> Self {
        let ncfg = cfg.node_config();
        let scheme = Arc::new(MacScheme::new(seed));
        let faulty: BTreeSet<NodeId> = cfg.faulty().into_iter().collect();
        let nodes = (0..cfg.n)
            .map(|id| {
                let crash = match cfg.crash_of(id) {
                    Some(Trigger::Epoch(t)) => Some(t),
                    _ => None,
                };
                Node::new(NodeParams {
                    id,
                    cfg: ncfg.clone(),
                    scheme: scheme.clone(),
                    behavior: cfg.behavior_of(id),
                    crash,
                    final_epoch: cfg.final_epoch_cap(),
                    seed: seed ^ ((id as u64 + 1) << 32),
                })
            })
            .collect();
        let clients = (0..cfg.clients.count)
            .map(|id| {
                Client::new(ClientParams {
                    id,
                    n: cfg.n,
                    f: cfg.f,
                    num_buckets: ncfg.num_buckets,
                    window: cfg.watermark_width,
                })
            })
            .collect();
        let adjudicator = (ncfg.orderer == OrdererKind::Reference
            && ncfg.consensus == ConsensusKind::Ideal)
            .then(|| Adjudicator::new((0..cfg.n).filter(|p| !faulty.contains(p)).collect()));
        let tick = if cfg.clients.rate > 0.0 {
            ((SEC as f64 / cfg.clients.rate) as Time).max(1)
        } else {
            Time::MAX
        };
        World {
            net: Network::new(&cfg.network, cfg.n),
            rng: ChaCha8Rng::seed_from_u64(seed),
            submitted: vec![0; cfg.clients.count as usize],
            payload: Arc::from(vec![0xab; cfg.clients.payload_size]),
            load_end: cfg.clients.duration * MS,
            ncfg,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            scheme,
            nodes,
            clients,
            adjudicator,
            faulty,
            trace: Vec::new(),
            known_batches: BTreeSet::new(),
            tick,
            final_set: false,
            seed,
            cfg,
        }
    }

    fn header(&self, seed: u64) -> Header {
        let orderer = match (self.ncfg.orderer, self.ncfg.consensus) {
            (OrdererKind::Pbft, _) => "pbft".to_string(),
            (OrdererKind::Raft, _) => "raft".to_string(),
            (OrdererKind::Reference, ConsensusKind::Ideal) => "reference/ideal".to_string(),
            (OrdererKind::Reference, ConsensusKind::Pbft) => "reference/pbft".to_string(),
        };
        Header {
            n: self.cfg.n as u32,
            f: self.cfg.f as u32,
            byzantine: self.ncfg.fault_model == iss_core::domain::FaultModel::Byzantine,
            orderer,
            policy: format!("{:?}", self.ncfg.policy.kind).to_lowercase(),
            candidates: self.ncfg.leader_candidates().len() as u32,
            num_buckets: self.ncfg.num_buckets,
            epoch_length: self.ncfg.epoch_length,
            faulty: self.faulty.iter().map(|&p| p as u32).collect(),
            clients: self.cfg.clients.count,
            gst: self.net.gst(),
            seed,
            liveness_deadline: self.net.gst() + self.cfg.run.settle * MS,
        }
    }

    fn push(&mut self, t: Time, ev: Ev) {
        self.seq += 1;
        self.queue.push(Entry {
            t,
            seq: self.seq,
            ev,
        });
    }

    fn run(&mut self) -> Outcome {
        self.trace.push(TraceEvent::Header(self.header(self.seed)));
        for fs in &self.cfg.faults.clone() {
            if let Ok(Some(Trigger::At(t))) = fs.parsed_trigger() {
                self.push(t, Ev::Crash { node: fs.node });
            }
        }
        for id in 0..self.nodes.len() {
            let fx = self.nodes[id].init(0);
            self.apply(id, fx);
        }
        let count = self.clients.len() as u64;
        if self.tick != Time::MAX {
            for c in 0..count {
                // spread clients evenly over one tick
                let offset = self.tick / count.max(1) * c;
                self.push(offset, Ev::Tick { client: c });
            }
        }
        let horizon = self.cfg.run.horizon * MS;
        let grace = 4 * self.net.delta();
        let mut end_at: Option<Time> = None;
        let mut truncated = false;
        while let Some(e) = self.queue.pop() {
            if end_at.is_some_and(|end| e.t > end) {
                break;
            }
            if e.t > horizon {
                truncated = end_at.is_none();
                self.now = horizon;
                break;
            }
            self.now = e.t;
            self.handle(e.ev);
            if !self.final_set && self.now >= self.load_end && self.clients_idle() {
                self.set_final();
            }
            if end_at.is_none() && self.correct_done() {
                end_at = Some(self.now + grace);
            }
        }
        if self.queue.is_empty() && end_at.is_none() {
            truncated = !self.correct_done();
        }
        let load_cut = !truncated && !self.clients_idle();
        let logs = self
            .nodes
            .iter()
            .filter(|n| !n.is_crashed())
            .map(|n| FinalLog {
                node: n.id() as u32,
                entries: n.log().len() as u64,
                digest: Digest::of(&n.log().canonical_bytes()).0,
            })
            .collect();
        self.trace.push(TraceEvent::End {
            t: self.now,
            truncated,
            load_cut,
            logs,
        });
        Outcome {
            trace: std::mem::take(&mut self.trace),
            end: self.now,
            truncated,
            load_cut,
        }
    }

    fn clients_idle(&self) -> bool {
        self.clients.iter().all(|c| c.pending() == 0)
    }

    fn correct_done(&self) -> bool {
        self.nodes
            .iter()
            .filter(|n| !self.faulty.contains(&n.id()))
            .all(|n| n.is_done())
    }

    /// Load is over: finish the epoch the furthest correct node is in, or
    /// the configured minimum.
    fn set_final(&mut self) {
        self.final_set = true;
        let furthest = self
            .nodes
            .iter()
            .filter(|n| !self.faulty.contains(&n.id()))
            .map(|n| n.epoch())
            .max()
            .unwrap_or(0);
        let mut last = furthest.max(self.cfg.run.min_epochs.saturating_sub(1));
        if let Some(cap) = self.cfg.final_epoch_cap() {
            last = last.min(cap);
        }
        for n in &mut self.nodes {
            n.set_final_epoch(last);
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::ToNode { to, from, msg } => {
                if self.nodes[to].is_crashed() || self.net.isolated(to, self.now) {
                    return;
                }
                let fx = self.nodes[to].on_message(self.now, from, msg);
                self.apply(to, fx);
            }
            Ev::Timer { node, timer } => {
                if self.nodes[node].is_crashed() {
                    return;
                }
                let fx = self.nodes[node].on_timer(self.now, timer);
                self.apply(node, fx);
            }
            Ev::Crash { node } => {
                let fx = self.nodes[node].crash();
                self.apply(node, fx);
            }
            Ev::ToAdjudicator { from, msg } => {
                let Msg::Propose { inst, sn, value } = msg else {
                    return;
                };
                let Some(adj) = &mut self.adjudicator else {
                    return;
                };
                let Some(decision) = adj.propose(inst, sn, from, value) else {
                    return;
                };
                for p in 0..self.nodes.len() {
                    if let Some(at) = self.net.send_other(Some(p), self.now, &mut self.rng) {
                        let msg = Msg::Sb {
                            inst,
                            msg: SbMessage::Decide {
                                sn,
                                value: decision.clone(),
                            },
                        };
                        self.push(
                            at,
                            Ev::ToNode {
                                to: p,
                                from: Endpoint::Adjudicator,
                                msg,
                            },
                        );
                    }
                }
            }
            Ev::Tick { client } => {
                if self.now >= self.load_end {
                    return;
                }
                let mut out = Vec::new();
                let payload = self.payload.clone();
                self.clients[client as usize].submit(payload, self.now, &*self.scheme, &mut out);
                self.client_outputs(client, out);
                let next = self.now + self.tick;
                self.push(next, Ev::Tick { client });
            }
            Ev::ToClient { to, from, msg } => {
                let mut out = Vec::new();
                let c = &mut self.clients[to as usize];
                match msg {
                    Msg::Response(r) => c.on_response(&r, &*self.scheme, &mut out),
                    Msg::Announce { epoch, leaders } => c.on_announce(from, epoch, leaders, &mut out),
                    _ => {}
                }
                self.client_outputs(to, out);
            }
        }
    }

    fn client_outputs(&mut self, client: ClientId, out: Vec<ClientOutput>) {
        for o in out {
            match o {
                ClientOutput::Send { to, request } => {
                    let ts = request.id.timestamp;
                    let seen = &mut self.submitted[client as usize];
                    if ts >= *seen {
                        *seen = ts + 1;
                        self.trace.push(TraceEvent::Submit {
                            t: self.now,
                            client,
                            ts,
                        });
                    }
                    let targets: Vec<NodeId> = match to {
                        ClientTarget::All => (0..self.nodes.len()).collect(),
                        ClientTarget::Nodes(v) => v,
                    };
                    for p in targets {
                        if let Some(at) = self.net.send_other(Some(p), self.now, &mut self.rng) {
                            self.push(
                                at,
                                Ev::ToNode {
                                    to: p,
                                    from: Endpoint::Client(client),
                                    msg: Msg::Request(request.clone()),
                                },
                            );
                        }
                    }
                }
                ClientOutput::Complete {
                    id,
                    delivery_nr,
                    submitted,
                } => self.trace.push(TraceEvent::Complete {
                    t: self.now,
                    client,
                    ts: id.timestamp,
                    nr: delivery_nr,
                    submitted,
                }),
            }
        }
    }

    fn apply(&mut self, node: NodeId, fx: Vec<Effect>) {
        for e in fx {
            match e {
                Effect::Send { to, msg } => self.send(node, to, msg),
                Effect::Timer { after, timer } => {
                    let at = self.now + after;
                    self.push(at, Ev::Timer { node, timer });
                }
                Effect::Event(ev) => self.record(node, ev),
            }
        }
    }

    fn send(&mut self, from: NodeId, to: Target, msg: Msg) {
        let nodes: Vec<NodeId> = match to {
            Target::Node(p) => vec![p],
            Target::Nodes(v) => v,
            Target::AllNodes => (0..self.nodes.len()).filter(|&p| p != from).collect(),
            Target::Client(c) => {
                self.to_client(from, c, msg);
                return;
            }
            Target::AllClients => {
                for c in 0..self.clients.len() as ClientId {
                    self.to_client(from, c, msg.clone());
                }
                return;
            }
            Target::Adjudicator => {
                if self.adjudicator.is_some() {
                    if let Some(at) = self.net.send_other(Some(from), self.now, &mut self.rng) {
                        self.push(at, Ev::ToAdjudicator { from, msg });
                    }
                }
                return;
            }
        };
        let size = msg.wire_size();
        for p in nodes {
            if p == from || p >= self.nodes.len() {
                continue;
            }
            if let Some(at) = self.net.send_node(from, p, size, self.now, &mut self.rng) {
                self.push(
                    at,
                    Ev::ToNode {
                        to: p,
                        from: Endpoint::Node(from),
                        msg: msg.clone(),
                    },
                );
            }
        }
    }

    fn to_client(&mut self, from: NodeId, c: ClientId, msg: Msg) {
        if c as usize >= self.clients.len() {
            return;
        }
        if let Some(at) = self.net.send_other(Some(from), self.now, &mut self.rng) {
            self.push(at, Ev::ToClient { to: c, from, msg });
        }
    }

    fn batch(&mut self, b: &Batch) -> [u8; 32] {
        let d = b.digest().0;
        if self.known_batches.insert(d) {
            let ids = (!b.is_nil()).then(|| {
                b.requests()
                    .iter()
                    .map(|r| (r.id.client, r.id.timestamp))
                    .collect()
            });
            self.trace.push(TraceEvent::Batch { digest: d, ids });
        }
        d
    }

    fn record(&mut self, node: NodeId, ev: Event) {
        let t = self.now;
        let node32 = node as u32;
        let te = match ev {
            Event::EpochStart {
                epoch,
                leaders,
                first_sn,
                len,
            } => TraceEvent::EpochStart {
                t,
                node: node32,
                epoch,
                leaders: leaders.iter().map(|&l| l as u32).collect(),
                first_sn,
                len,
            },
            Event::SbInit {
                inst: i,
                sender,
                seq_nrs,
            } => TraceEvent::SbInit {
                t,
                node: node32,
                inst: inst(i),
                sender: sender as u32,
                seq_nrs,
            },
            Event::SbCast { inst: i, sn, batch } => TraceEvent::SbCast {
                t,
                node: node32,
                inst: inst(i),
                sn,
                digest: self.batch(&batch),
            },
            Event::SbDeliver { inst: i, sn, batch } => TraceEvent::SbDeliver {
                t,
                node: node32,
                inst: inst(i),
                sn,
                digest: self.batch(&batch),
            },
            Event::Suspect { node: target, inst: i } => TraceEvent::Suspect {
                t,
                node: node32,
                target: target as u32,
                inst: i.map(inst),
            },
            Event::Restore { node: target, inst: i } => TraceEvent::Restore {
                t,
                node: node32,
                target: target as u32,
                inst: i.map(inst),
            },
            Event::Rejected {
                inst: i,
                sn,
                from,
                reason,
            } => TraceEvent::Rejected {
                t,
                node: node32,
                inst: inst(i),
                sn,
                from: from as u32,
                reason: reason.code(),
            },
            Event::Elected { inst: i, term } => TraceEvent::Elected {
                t,
                node: node32,
                inst: inst(i),
                term,
            },
            Event::Commit { sn, batch } => TraceEvent::Commit {
                t,
                node: node32,
                sn,
                digest: self.batch(&batch),
            },
            Event::Deliver {
                sn,
                first_delivery_nr,
                count,
            } => TraceEvent::Deliver {
                t,
                node: node32,
                sn,
                first_nr: first_delivery_nr,
                count,
            },
            Event::CheckpointStable { epoch, max_sn, root } => TraceEvent::Checkpoint {
                t,
                node: node32,
                epoch,
                max_sn,
                root: root.0,
            },
            Event::StateTransfer {
                peer,
                epoch,
                accepted,
            } => TraceEvent::Transfer {
                t,
                node: node32,
                peer: peer as u32,
                epoch,
                accepted,
            },
            Event::LogConflict { sn } => TraceEvent::LogConflict {
                t,
                node: node32,
                sn,
            },
            Event::Crashed => TraceEvent::Crashed { t, node: node32 },
        };
        self.trace.push(te);
    }
}
