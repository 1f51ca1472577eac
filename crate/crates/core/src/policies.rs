//! Leader selection policies, evaluated from the committed log only.
//!
//! Every correct node feeds the same finished epochs into the same
//! [`LeaderPolicy`], so all of them compute identical leadersets.

use crate::domain::{EpochHistory, EpochLayout, EpochNr, Log, NodeId, PolicyConfig, PolicyKind};

/// Highest sequence number led by `node` that committed nil, over all epochs
/// before `e`; `-1` if there is none.
pub fn last_failure(node: NodeId, e: EpochNr, log: &Log, history: &EpochHistory) -> i64 {
    let mut best = -1i64;
    for layout in history.iter().take(e as usize) {
        for sn in layout.seq_nrs() {
            if layout.leader_of(sn) == Some(node) && log.get(sn).is_some_and(|b| b.is_nil()) {
                best = best.max(sn as i64);
            }
        }
    }
    best
}

/// Up to `f` nodes with the highest non-negative last failure; ties exclude
/// the higher node id first.
pub fn blacklist(candidates: &[NodeId], last_failure: &[i64], f: usize) -> Vec<NodeId> {
    let mut failed: Vec<(i64, NodeId)> = candidates
        .iter()
        .filter(|&&n| last_failure[n] >= 0)
        .map(|&n| (last_failure[n], n))
        .collect();
    failed.sort_unstable_by(|a, b| b.cmp(a));
    let excluded: Vec<NodeId> = failed.into_iter().take(f).map(|(_, n)| n).collect();
    candidates
        .iter()
        .copied()
        .filter(|n| !excluded.contains(n))
        .collect()
}

#[derive(Clone, Debug)]
pub struct LeaderPolicy {
    cfg: PolicyConfig,
    f: usize,
    candidates: Vec<NodeId>,
    last_failure: Vec<i64>,
    penalty: Vec<i64>,
}

impl LeaderPolicy {
    pub fn new(cfg: PolicyConfig, n: usize, f: usize, candidates: Vec<NodeId>) -> Self {
        LeaderPolicy {
            cfg,
            f,
            candidates,
            last_failure: vec![-1; n],
            penalty: vec![0; n],
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.cfg.kind
    }

    pub fn last_failures(&self) -> &[i64] {
        &self.last_failure
    }

    pub fn penalties(&self) -> &[i64] {
        &self.penalty
    }

    /// Leaderset of the next epoch, sorted.
    pub fn leaders(&self) -> Vec<NodeId> {
        match self.cfg.kind {
            PolicyKind::Simple => self.candidates.clone(),
            PolicyKind::Blacklist => blacklist(&self.candidates, &self.last_failure, self.f),
            PolicyKind::Backoff => self
                .candidates
                .iter()
                .copied()
                .filter(|&n| self.penalty[n] <= 0)
                .collect(),
        }
    }

    /// Folds a fully committed epoch into the policy state.
    pub fn epoch_finished(&mut self, layout: &EpochLayout, log: &Log) {
        let mut failed_here = vec![false; self.penalty.len()];
        for sn in layout.seq_nrs() {
            if log.get(sn).is_some_and(|b| b.is_nil()) {
                let leader = layout.leader_of(sn).expect("sequence number without leader");
                self.last_failure[leader] = self.last_failure[leader].max(sn as i64);
                failed_here[leader] = true;
            }
        }
        // A node is suspected in epoch e if its last failure lies in Sn(e).
        for (n, p) in self.penalty.iter_mut().enumerate() {
            if failed_here[n] {
                *p = if *p > 0 { *p * 2 - 1 } else { self.cfg.ban_period };
            } else if *p > 0 {
                *p = (*p - self.cfg.decrease).max(0);
            }
        }
    }
}
