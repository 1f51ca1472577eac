//! Request-space partitioning: bucket hashing, epoch-wise bucket assignment
//! and the per-node FIFO bucket queues.

use std::collections::{BTreeMap, BTreeSet};

use crate::domain::{Batch, EpochNr, NodeId, Request, RequestId};

pub type BucketId = u32;

/// `(c · 2^64 + t) mod num_buckets`; the payload does not participate.
pub fn bucket_of(id: RequestId, num_buckets: u32) -> BucketId {
    let v = ((id.client as u128) << 64) | id.timestamp as u128;
    (v % num_buckets as u128) as BucketId
}

/// Buckets initially assigned to node `i` in epoch `e`: those with
/// `(b + e) ≡ i (mod n)`.
pub fn init_buckets(e: EpochNr, i: NodeId, n: usize, num_buckets: u32) -> BTreeSet<BucketId> {
    let n = n as u64;
    (0..num_buckets)
        .filter(|&b| (b as u64 + e) % n == i as u64 % n)
        .collect()
}

/// Buckets served by leader `i` in epoch `e`: its own initial buckets plus a
/// round-robin share of the buckets that belong to non-leaders.
///
/// `leaders` must be sorted and contain `i`.
pub fn active_buckets(
    e: EpochNr,
    leaders: &[NodeId],
    i: NodeId,
    n: usize,
    num_buckets: u32,
) -> BTreeSet<BucketId> {
    let k = leaders
        .iter()
        .position(|&l| l == i)
        .expect("active_buckets called for a non-leader") as u64;
    let nl = leaders.len() as u64;
    let n64 = n as u64;
    (0..num_buckets)
        .filter(|&b| {
            let owner = ((b as u64 + e) % n64) as NodeId;
            if owner == i {
                return true;
            }
            leaders.binary_search(&owner).is_err() && (b as u64 + e) % nl == k
        })
        .collect()
}

/// The leader serving bucket `b` in epoch `e`; consistent with
/// [`active_buckets`].
pub fn bucket_leader(b: BucketId, e: EpochNr, leaders: &[NodeId], n: usize) -> NodeId {
    let x = b as u64 + e;
    let owner = (x % n as u64) as NodeId;
    if leaders.binary_search(&owner).is_ok() {
        owner
    } else {
        leaders[(x % leaders.len() as u64) as usize]
    }
}

/// Reception-ordered bucket queues of one node.
///
/// Every request gets a stamp from a node-local monotone counter on first
/// reception. Queues are ordered by that stamp, which also fixes the position
/// a resurrected request returns to.
#[derive(Debug, Clone)]
pub struct BucketQueues {
    num_buckets: u32,
    next_stamp: u64,
    stamps: BTreeMap<RequestId, u64>,
    queues: Vec<BTreeMap<u64, Request>>,
    /// Requests taken out by `cut_batch` and not yet committed or put back.
    removed: BTreeSet<RequestId>,
    committed: BTreeSet<RequestId>,
}

impl BucketQueues {
    pub fn new(num_buckets: u32) -> Self {
        BucketQueues {
            num_buckets,
            next_stamp: 0,
            stamps: BTreeMap::new(),
            queues: vec![BTreeMap::new(); num_buckets as usize],
            removed: BTreeSet::new(),
            committed: BTreeSet::new(),
        }
    }

    pub fn num_buckets(&self) -> u32 {
        self.num_buckets
    }

    /// Adds a request on first reception. Returns false if the request id was
    /// already seen (queued, proposed or committed).
    pub fn add(&mut self, r: Request) -> bool {
        if self.stamps.contains_key(&r.id) || self.committed.contains(&r.id) {
            return false;
        }
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        self.stamps.insert(r.id, stamp);
        let b = bucket_of(r.id, self.num_buckets);
        self.queues[b as usize].insert(stamp, r);
        true
    }

    pub fn contains(&self, id: &RequestId) -> bool {
        self.stamps
            .get(id)
            .map(|s| self.queues[bucket_of(*id, self.num_buckets) as usize].contains_key(s))
            .unwrap_or(false)
    }

    pub fn queued_in(&self, buckets: &BTreeSet<BucketId>) -> usize {
        buckets.iter().map(|&b| self.queues[b as usize].len()).sum()
    }

    pub fn total_queued(&self) -> usize {
        self.queues.iter().map(BTreeMap::len).sum()
    }

    /// Takes up to `max` globally oldest requests out of the given buckets.
    pub fn cut_batch(&mut self, buckets: &BTreeSet<BucketId>, max: usize) -> Batch {
        let mut picked: Vec<(u64, BucketId)> = Vec::new();
        for &b in buckets {
            picked.extend(self.queues[b as usize].keys().take(max).map(|&s| (s, b)));
        }
        picked.sort_unstable();
        picked.truncate(max);
        let mut reqs = Vec::with_capacity(picked.len());
        for (stamp, b) in picked {
            let r = self.queues[b as usize].remove(&stamp).unwrap();
            self.removed.insert(r.id);
            reqs.push(r);
        }
        Batch::new(reqs)
    }

    /// Marks the batch's requests as committed and drops them from the queues.
    pub fn on_commit(&mut self, batch: &Batch) {
        for r in batch.requests() {
            if let Some(stamp) = self.stamps.remove(&r.id) {
                self.queues[bucket_of(r.id, self.num_buckets) as usize].remove(&stamp);
            }
            self.removed.remove(&r.id);
            self.committed.insert(r.id);
        }
    }

    /// Puts the requests of a failed proposal back at their original
    /// positions, skipping any that got committed in the meantime.
    pub fn resurrect(&mut self, batch: &Batch) {
        for r in batch.requests() {
            if self.committed.contains(&r.id) || !self.removed.remove(&r.id) {
                continue;
            }
            let Some(&stamp) = self.stamps.get(&r.id) else {
                continue;
            };
            self.queues[bucket_of(r.id, self.num_buckets) as usize].insert(stamp, r.clone());
        }
    }

    pub fn is_committed(&self, id: &RequestId) -> bool {
        self.committed.contains(id)
    }

    /// Drops bookkeeping for committed requests that can no longer reappear,
    /// as decided by `keep`.
    pub fn retain_committed(&mut self, mut keep: impl FnMut(&RequestId) -> bool) {
        self.committed.retain(|id| keep(id));
    }

    /// Removes queued requests rejected by `keep` (e.g. below the watermark).
    pub fn retain_queued(&mut self, mut keep: impl FnMut(&RequestId) -> bool) {
        for q in &mut self.queues {
            q.retain(|_, r| keep(&r.id));
        }
        let queues = &self.queues;
        let nb = self.num_buckets;
        let removed = &self.removed;
        self.stamps.retain(|id, s| {
            keep(id) || queues[bucket_of(*id, nb) as usize].contains_key(s) || removed.contains(id)
        });
    }
}
