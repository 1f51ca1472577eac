//! Core data types shared by every other module.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

use crate::buckets::BucketId;
use crate::crypto::{Digest, Hasher, Principal, Signature, SignatureScheme};

pub type NodeId = usize;
pub type ClientId = u64;
pub type SeqNr = u64;
pub type EpochNr = u64;
/// Simulated time in nanoseconds.
pub type Time = u64;

/// Identity of a request: per-client logical timestamp plus client index.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct RequestId {
    pub client: ClientId,
    pub timestamp: u64,
}

impl RequestId {
    pub fn new(client: ClientId, timestamp: u64) -> Self {
        RequestId { client, timestamp }
    }
}

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}/t{}", self.client, self.timestamp)
    }
}

/// A client request. Two requests are duplicates iff payload and id match.
#[derive(Clone, Debug)]
pub struct Request {
    pub payload: Arc<[u8]>,
    pub id: RequestId,
    pub signature: Signature,
}

impl PartialEq for Request {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.payload == other.payload
    }
}
impl Eq for Request {}

impl Request {
    /// Bytes covered by the client signature: the identity and the payload.
    pub fn signing_bytes(id: RequestId, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + payload.len());
        out.extend_from_slice(&id.client.to_le_bytes());
        out.extend_from_slice(&id.timestamp.to_le_bytes());
        out.extend_from_slice(payload);
        out
    }

    pub fn new_signed(id: RequestId, payload: Arc<[u8]>, scheme: &dyn SignatureScheme) -> Self {
        let signature = scheme.sign(
            Principal::Client(id.client),
            &Self::signing_bytes(id, &payload),
        );
        Request {
            payload,
            id,
            signature,
        }
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        scheme.verify(
            Principal::Client(self.id.client),
            &Self::signing_bytes(self.id, &self.payload),
            &self.signature,
        )
    }

    pub fn payload_digest(&self) -> Digest {
        Digest::of(&self.payload)
    }

    pub fn wire_size(&self) -> usize {
        16 + 4 + self.payload.len() + 32
    }
}

/// Immutable request list with a cached digest.
#[derive(Debug)]
pub struct BatchData {
    requests: Vec<Request>,
    digest: Digest,
}

/// The unit of agreement: either the nil value or a (possibly empty) list of
/// requests. An empty request list is a legal proposal; nil is produced only
/// by leader-change logic.
#[derive(Clone, Debug)]
pub enum Batch {
    Nil,
    Requests(Arc<BatchData>),
}

impl Batch {
    pub fn new(requests: Vec<Request>) -> Batch {
        let digest = Self::compute_digest(&requests);
        Batch::Requests(Arc::new(BatchData { requests, digest }))
    }

    pub fn empty() -> Batch {
        Batch::new(Vec::new())
    }

    pub fn nil_digest() -> Digest {
        Digest::of(b"batch:nil")
    }

    fn compute_digest(requests: &[Request]) -> Digest {
        let mut h = Hasher::new(b"batch");
        h.u64(requests.len() as u64);
        for r in requests {
            h.u64(r.id.client)
                .u64(r.id.timestamp)
                .bytes(&r.payload)
                .bytes(&r.signature.0);
        }
        h.finish()
    }

    /// Cached digest of the batch.
    pub fn digest(&self) -> Digest {
        match self {
            Batch::Nil => Self::nil_digest(),
            Batch::Requests(d) => d.digest,
        }
    }

    /// Digest recomputed from content, ignoring the cache. Used wherever the
    /// batch came from an untrusted source.
    pub fn recompute_digest(&self) -> Digest {
        match self {
            Batch::Nil => Self::nil_digest(),
            Batch::Requests(d) => Self::compute_digest(&d.requests),
        }
    }

    pub fn is_nil(&self) -> bool {
        matches!(self, Batch::Nil)
    }

    pub fn requests(&self) -> &[Request] {
        match self {
            Batch::Nil => &[],
            Batch::Requests(d) => &d.requests,
        }
    }

    /// Number of requests; zero for nil and empty batches.
    pub fn len(&self) -> usize {
        self.requests().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn wire_size(&self) -> usize {
        match self {
            Batch::Nil => 1,
            Batch::Requests(d) => 9 + d.requests.iter().map(Request::wire_size).sum::<usize>(),
        }
    }

    /// Builds a batch whose cached digest disagrees with its content. Only
    /// useful for exercising verification paths.
    #[doc(hidden)]
    pub fn forged(requests: Vec<Request>, claimed: Digest) -> Batch {
        Batch::Requests(Arc::new(BatchData {
            requests,
            digest: claimed,
        }))
    }
}

impl PartialEq for Batch {
    fn eq(&self, other: &Self) -> bool {
        self.digest() == other.digest()
    }
}
impl Eq for Batch {}

/// One leader's share of an epoch: the parameters of one sequenced broadcast
/// instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub epoch: EpochNr,
    pub leader: NodeId,
    /// Position of the leader in the sorted leaderset.
    pub index: usize,
    pub seq_nrs: Vec<SeqNr>,
    pub buckets: BTreeSet<BucketId>,
}

/// Returns the segment containing `sn`.
pub fn seg_of(sn: SeqNr, segments: &[Segment]) -> Option<&Segment> {
    segments.iter().find(|s| s.seq_nrs.binary_search(&sn).is_ok())
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("conflicting commit at sequence number {sn}")]
    Conflict { sn: SeqNr },
}

/// A contiguous run of the log released for delivery.
#[derive(Clone, Debug)]
pub struct DeliveredBatch {
    pub sn: SeqNr,
    /// Delivery number of the first request in the batch; the k-th request
    /// gets `first_delivery_nr + k`.
    pub first_delivery_nr: u64,
    pub batch: Batch,
}

/// The replicated log: sequence number to committed batch.
#[derive(Clone, Debug, Default)]
pub struct Log {
    entries: BTreeMap<SeqNr, Batch>,
    first_undelivered: SeqNr,
    total_delivered: u64,
}

impl Log {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, sn: SeqNr) -> Option<&Batch> {
        self.entries.get(&sn)
    }

    pub fn contains(&self, sn: SeqNr) -> bool {
        self.entries.contains_key(&sn)
    }

    /// Commits `batch` at `sn`. Returns `Ok(false)` if the identical value is
    /// already present; a different value is a conflict.
    pub fn commit(&mut self, sn: SeqNr, batch: Batch) -> Result<bool, LogError> {
        match self.entries.get(&sn) {
            Some(existing) if *existing == batch => Ok(false),
            Some(_) => Err(LogError::Conflict { sn }),
            None => {
                self.entries.insert(sn, batch);
                Ok(true)
            }
        }
    }

    /// Releases every batch whose predecessors are all committed.
    pub fn deliver_ready(&mut self) -> Vec<DeliveredBatch> {
        let mut out = Vec::new();
        while let Some(batch) = self.entries.get(&self.first_undelivered) {
            out.push(DeliveredBatch {
                sn: self.first_undelivered,
                first_delivery_nr: self.total_delivered,
                batch: batch.clone(),
            });
            self.total_delivered += batch.len() as u64;
            self.first_undelivered += 1;
        }
        out
    }

    pub fn first_undelivered(&self) -> SeqNr {
        self.first_undelivered
    }

    pub fn total_delivered(&self) -> u64 {
        self.total_delivered
    }

    pub fn entries(&self) -> impl Iterator<Item = (SeqNr, &Batch)> {
        self.entries.iter().map(|(sn, b)| (*sn, b))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Canonical encoding of the committed prefix as `(sn, digest)` pairs.
    /// Two logs are byte-identical iff these encodings are equal.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.entries.len() * 40);
        for (sn, b) in &self.entries {
            out.extend_from_slice(&sn.to_le_bytes());
            out.extend_from_slice(&b.digest().0);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultModel {
    Byzantine,
    CrashOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrdererKind {
    Pbft,
    Raft,
    /// Reliable broadcast plus consensus per sequence number.
    Reference,
}

/// Consensus component behind the reference orderer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsensusKind {
    /// Omniscient adjudicator living in the simulator.
    Ideal,
    Pbft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    Simple,
    Backoff,
    Blacklist,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub ban_period: i64,
    pub decrease: i64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::Blacklist,
            ban_period: 8,
            decrease: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("byzantine fault model needs n >= 3f+1 (n={n}, f={f})")]
    ByzantineQuorum { n: usize, f: usize },
    #[error("crash fault model needs n >= 2f+1 (n={n}, f={f})")]
    CrashQuorum { n: usize, f: usize },
    #[error("invalid parameter {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

/// Static parameters shared by every node of a deployment.
#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub n: usize,
    pub f: usize,
    pub fault_model: FaultModel,
    pub epoch_length: u64,
    pub min_segment_size: u64,
    pub num_buckets: u32,
    pub max_batch_size: usize,
    /// Global batch rate in batches per second; 0 disables the limiter.
    pub batch_rate: f64,
    pub min_batch_timeout: Time,
    pub max_batch_timeout: Time,
    pub epoch_change_timeout: Time,
    pub policy: PolicyConfig,
    /// Restricts leader candidates to nodes `0..k`.
    pub leaderset_size: Option<usize>,
    pub watermark_width: u64,
    pub client_signatures: bool,
    pub num_clients: u64,
    pub orderer: OrdererKind,
    pub consensus: ConsensusKind,
    /// Heartbeats of the standalone failure detector go through reliable
    /// broadcast instead of plain point-to-point messages.
    pub fd_reliable_heartbeats: bool,
    /// Mean one-way network delay; base unit for protocol timers.
    pub mean_delay: Time,
    /// Maximum number of uncommitted pre-prepares per PBFT instance.
    pub max_inflight: usize,
    /// Forces a commit quorum size. Breaks safety; negative tests only.
    pub quorum_override: Option<usize>,
}

impl NodeConfig {
    pub fn new(n: usize, f: usize) -> Self {
        NodeConfig {
            n,
            f,
            fault_model: FaultModel::Byzantine,
            epoch_length: 16,
            min_segment_size: 2,
            num_buckets: 16 * n as u32,
            max_batch_size: 64,
            batch_rate: 32.0,
            min_batch_timeout: 0,
            max_batch_timeout: 4 * crate::SEC,
            epoch_change_timeout: 2 * crate::SEC,
            policy: PolicyConfig::default(),
            leaderset_size: None,
            watermark_width: 128,
            client_signatures: true,
            num_clients: 4,
            orderer: OrdererKind::Pbft,
            consensus: ConsensusKind::Ideal,
            fd_reliable_heartbeats: false,
            mean_delay: 50 * crate::MS,
            max_inflight: 16,
            quorum_override: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (n, f) = (self.n, self.f);
        if n == 0 {
            return Err(ConfigError::Invalid {
                key: "n",
                reason: "must be positive".into(),
            });
        }
        match self.fault_model {
            FaultModel::Byzantine if n < 3 * f + 1 => {
                return Err(ConfigError::ByzantineQuorum { n, f })
            }
            FaultModel::CrashOnly if n < 2 * f + 1 => return Err(ConfigError::CrashQuorum { n, f }),
            _ => {}
        }
        if self.fault_model == FaultModel::Byzantine && self.orderer == OrdererKind::Raft {
            return Err(ConfigError::Invalid {
                key: "orderer",
                reason: "raft requires the crash-only fault model".into(),
            });
        }
        if self.epoch_length == 0 {
            return Err(ConfigError::Invalid {
                key: "epochLength",
                reason: "must be positive".into(),
            });
        }
        if self.num_buckets == 0 {
            return Err(ConfigError::Invalid {
                key: "bucketsPerLeader",
                reason: "must be positive".into(),
            });
        }
        if self.max_batch_size == 0 {
            return Err(ConfigError::Invalid {
                key: "maxBatchSize",
                reason: "must be positive".into(),
            });
        }
        if let Some(k) = self.leaderset_size {
            if k == 0 || k > n {
                return Err(ConfigError::Invalid {
                    key: "leadersetSize",
                    reason: format!("must be in 1..={n}"),
                });
            }
        }
        if self.watermark_width == 0 {
            return Err(ConfigError::Invalid {
                key: "watermarkWidth",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Quorum for checkpoints and PBFT commits.
    pub fn strong_quorum(&self) -> usize {
        if let Some(q) = self.quorum_override {
            return q;
        }
        match self.fault_model {
            FaultModel::Byzantine => 2 * self.f + 1,
            FaultModel::CrashOnly => self.f + 1,
        }
    }

    /// Smallest set guaranteed to contain a correct node.
    pub fn weak_quorum(&self) -> usize {
        self.f + 1
    }

    /// Epoch length for a leaderset of size `k`; zero for an empty leaderset.
    pub fn epoch_len(&self, k: usize) -> u64 {
        if k == 0 {
            0
        } else {
            self.epoch_length.max(k as u64 * self.min_segment_size)
        }
    }

    /// Nodes eligible for leadership, in ascending id order.
    pub fn leader_candidates(&self) -> Vec<NodeId> {
        (0..self.leaderset_size.unwrap_or(self.n)).collect()
    }
}

/// Layout of one epoch: where its sequence numbers start and who leads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochLayout {
    pub epoch: EpochNr,
    pub first_sn: SeqNr,
    pub len: u64,
    /// Sorted leaderset; empty for a skipped epoch.
    pub leaders: Vec<NodeId>,
}

impl EpochLayout {
    pub fn seq_nrs(&self) -> Range<SeqNr> {
        self.first_sn..self.first_sn + self.len
    }

    pub fn contains(&self, sn: SeqNr) -> bool {
        self.seq_nrs().contains(&sn)
    }

    pub fn max_sn(&self) -> Option<SeqNr> {
        (self.len > 0).then(|| self.first_sn + self.len - 1)
    }

    /// Index into `leaders` of the segment owning `sn` (round robin on the
    /// absolute sequence number).
    pub fn segment_index(&self, sn: SeqNr) -> usize {
        (sn % self.leaders.len() as u64) as usize
    }

    pub fn leader_of(&self, sn: SeqNr) -> Option<NodeId> {
        if !self.contains(sn) {
            return None;
        }
        Some(self.leaders[self.segment_index(sn)])
    }

    /// Sequence numbers of the segment at leader index `idx`.
    pub fn segment_seq_nrs(&self, idx: usize) -> Vec<SeqNr> {
        let k = self.leaders.len() as u64;
        self.seq_nrs().filter(|sn| sn % k == idx as u64).collect()
    }
}

/// Layouts of all epochs started so far, indexed by epoch number.
#[derive(Clone, Debug, Default)]
pub struct EpochHistory {
    layouts: Vec<EpochLayout>,
}

impl EpochHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the layout of the next epoch with the given leaders.
    pub fn push(&mut self, leaders: Vec<NodeId>, cfg: &NodeConfig) -> &EpochLayout {
        let epoch = self.layouts.len() as EpochNr;
        let first_sn = self.next_first_sn();
        let len = cfg.epoch_len(leaders.len());
        self.layouts.push(EpochLayout {
            epoch,
            first_sn,
            len,
            leaders,
        });
        self.layouts.last().unwrap()
    }

    pub fn next_first_sn(&self) -> SeqNr {
        self.layouts
            .last()
            .map(|l| l.first_sn + l.len)
            .unwrap_or(0)
    }

    pub fn get(&self, e: EpochNr) -> Option<&EpochLayout> {
        self.layouts.get(e as usize)
    }

    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layouts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EpochLayout> {
        self.layouts.iter()
    }

    /// Sequence numbers of epoch `e`; empty for skipped or unknown epochs.
    pub fn seq_nrs(&self, e: EpochNr) -> Range<SeqNr> {
        self.get(e).map(|l| l.seq_nrs()).unwrap_or(0..0)
    }

    pub fn epoch_of(&self, sn: SeqNr) -> Option<&EpochLayout> {
        let idx = self.layouts.partition_point(|l| l.first_sn + l.len <= sn);
        self.layouts.get(idx).filter(|l| l.contains(sn))
    }

    pub fn leader_of(&self, sn: SeqNr) -> Option<NodeId> {
        self.epoch_of(sn).and_then(|l| l.leader_of(sn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::MacScheme;

    fn req(c: u64, t: u64) -> Request {
        Request::new_signed(
            RequestId::new(c, t),
            Arc::from(vec![c as u8, t as u8]),
            &MacScheme::default(),
        )
    }

    fn history(cfg: &NodeConfig, leadersets: &[Vec<NodeId>]) -> EpochHistory {
        let mut h = EpochHistory::new();
        for l in leadersets {
            h.push(l.clone(), cfg);
        }
        h
    }

    #[test]
    fn request_id_equality_is_componentwise() {
        assert_eq!(RequestId::new(1, 2), RequestId::new(1, 2));
        assert_ne!(RequestId::new(1, 2), RequestId::new(2, 1));
    }

    #[test]
    fn duplicates_need_equal_payload_and_id() {
        let a = req(1, 1);
        let mut b = a.clone();
        assert_eq!(a, b);
        b.payload = Arc::from(vec![9u8]);
        assert_ne!(a, b);
    }

    #[test]
    fn nil_differs_from_empty() {
        assert_ne!(Batch::Nil, Batch::empty());
        assert!(Batch::Nil.is_empty());
        assert!(Batch::empty().is_empty());
    }

    #[test]
    fn signatures_cover_id_and_payload() {
        let s = MacScheme::default();
        let r = req(3, 4);
        assert!(r.verify(&s));
        let mut tampered = r.clone();
        tampered.id.timestamp = 5;
        assert!(!tampered.verify(&s));
    }

    #[test]
    fn seq_nrs_consecutive_epochs() {
        let mut cfg = NodeConfig::new(4, 1);
        cfg.epoch_length = 12;
        let h = history(&cfg, &[vec![0, 1, 2], vec![0, 1]]);
        assert_eq!(h.seq_nrs(0), 0..12);
        assert_eq!(h.seq_nrs(1), 12..24);
        assert_eq!(h.get(1).unwrap().max_sn(), Some(23));
    }

    #[test]
    fn skipped_epoch_consumes_no_seq_nrs() {
        let mut cfg = NodeConfig::new(4, 1);
        cfg.epoch_length = 12;
        let h = history(&cfg, &[vec![0, 1, 2], vec![], vec![3]]);
        assert_eq!(h.seq_nrs(1), 12..12);
        assert_eq!(h.seq_nrs(2), 12..24);
        assert_eq!(h.epoch_of(12).unwrap().epoch, 2);
        assert_eq!(h.epoch_of(11).unwrap().epoch, 0);
        assert!(h.epoch_of(24).is_none());
    }

    #[test]
    fn segment_round_robin() {
        let mut cfg = NodeConfig::new(4, 1);
        cfg.epoch_length = 12;
        let h = history(&cfg, &[vec![0, 1, 2], vec![0, 1]]);
        let e0 = h.get(0).unwrap();
        assert_eq!(e0.segment_seq_nrs(0), vec![0, 3, 6, 9]);
        assert_eq!(e0.segment_seq_nrs(1), vec![1, 4, 7, 10]);
        assert_eq!(e0.segment_seq_nrs(2), vec![2, 5, 8, 11]);
        assert_eq!(e0.segment_index(4), 1);
        let e1 = h.get(1).unwrap();
        assert_eq!(e1.segment_index(13), 1);
        assert_eq!(h.leader_of(13), Some(1));
    }

    #[test]
    fn min_segment_size_stretches_epoch() {
        let mut cfg = NodeConfig::new(8, 2);
        cfg.epoch_length = 8;
        cfg.min_segment_size = 2;
        assert_eq!(cfg.epoch_len(8), 16);
        assert_eq!(cfg.epoch_len(3), 8);
        assert_eq!(cfg.epoch_len(0), 0);
    }

    #[test]
    fn config_quorum_arithmetic() {
        assert!(NodeConfig::new(4, 1).validate().is_ok());
        assert_eq!(
            NodeConfig::new(3, 1).validate(),
            Err(ConfigError::ByzantineQuorum { n: 3, f: 1 })
        );
        let mut c = NodeConfig::new(3, 1);
        c.fault_model = FaultModel::CrashOnly;
        c.orderer = OrdererKind::Raft;
        assert!(c.validate().is_ok());
        assert_eq!(c.strong_quorum(), 2);
        c.n = 2;
        assert_eq!(c.validate(), Err(ConfigError::CrashQuorum { n: 2, f: 1 }));
    }

    #[test]
    fn log_commit_is_final() {
        let mut log = Log::new();
        let b = Batch::new(vec![req(0, 0)]);
        assert_eq!(log.commit(0, b.clone()), Ok(true));
        assert_eq!(log.commit(0, b), Ok(false));
        assert_eq!(log.commit(0, Batch::Nil), Err(LogError::Conflict { sn: 0 }));
    }

    #[test]
    fn delivery_waits_for_gaps() {
        let mut log = Log::new();
        log.commit(1, Batch::new(vec![req(0, 5)])).unwrap();
        assert!(log.deliver_ready().is_empty());
        log.commit(0, Batch::new(vec![req(0, 1), req(0, 2), req(0, 3)]))
            .unwrap();
        let d = log.deliver_ready();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].first_delivery_nr, 0);
        assert_eq!(d[1].first_delivery_nr, 3);
    }

    #[test]
    fn delivery_numbers_skip_nil() {
        let mut log = Log::new();
        log.commit(0, Batch::new(vec![req(0, 1), req(0, 2)])).unwrap();
        log.commit(1, Batch::Nil).unwrap();
        log.commit(2, Batch::new(vec![req(1, 1)])).unwrap();
        let d = log.deliver_ready();
        assert_eq!(d[2].first_delivery_nr, 2);
        assert_eq!(log.total_delivered(), 3);
        assert_eq!(log.first_undelivered(), 3);
    }

    #[test]
    fn forged_batch_detected_by_recompute() {
        let honest = Batch::new(vec![req(1, 1)]);
        let forged = Batch::forged(vec![req(1, 2)], honest.digest());
        assert_eq!(forged.digest(), honest.digest());
        assert_ne!(forged.recompute_digest(), honest.digest());
    }
}
