//! Epoch checkpoints: Merkle roots over batch digests and quorum certificates.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{Digest, Hasher, Principal, Signature, SignatureScheme};
use crate::domain::{Batch, EpochNr, NodeId, SeqNr};

/// Binary Merkle root over `leaves`; an odd node is paired with itself.
/// The root of a single leaf is the leaf, the root of nothing is zero.
pub fn merkle_root(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return Digest::ZERO;
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| {
                let right = pair.get(1).unwrap_or(&pair[0]);
                let mut h = Hasher::new(b"merkle");
                h.digest(&pair[0]).digest(right);
                h.finish()
            })
            .collect();
    }
    level[0]
}

pub fn batch_root<'a>(batches: impl IntoIterator<Item = &'a Batch>) -> Digest {
    let leaves: Vec<Digest> = batches.into_iter().map(Batch::digest).collect();
    merkle_root(&leaves)
}

fn checkpoint_bytes(epoch: EpochNr, max_sn: SeqNr, root: &Digest) -> [u8; 32] {
    let mut h = Hasher::new(b"checkpoint");
    h.u64(epoch).u64(max_sn).digest(root);
    h.finish().0
}

/// Signed attestation that the signer's log holds the batches with Merkle
/// root `root` for epoch `epoch`, ending at `max_sn`.
#[derive(Clone, Debug)]
pub struct CheckpointMsg {
    pub epoch: EpochNr,
    pub max_sn: SeqNr,
    pub root: Digest,
    pub signer: NodeId,
    pub sig: Signature,
}

impl CheckpointMsg {
    pub fn new(
        epoch: EpochNr,
        max_sn: SeqNr,
        root: Digest,
        signer: NodeId,
        scheme: &dyn SignatureScheme,
    ) -> Self {
        let sig = scheme.sign(
            Principal::Node(signer),
            &checkpoint_bytes(epoch, max_sn, &root),
        );
        CheckpointMsg {
            epoch,
            max_sn,
            root,
            signer,
            sig,
        }
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        scheme.verify(
            Principal::Node(self.signer),
            &checkpoint_bytes(self.epoch, self.max_sn, &self.root),
            &self.sig,
        )
    }
}

/// A quorum of matching checkpoint attestations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StableCheckpoint {
    pub epoch: EpochNr,
    pub max_sn: SeqNr,
    pub root: Digest,
    pub cert: Vec<(NodeId, Signature)>,
}

impl StableCheckpoint {
    /// Number of distinct known nodes with a valid signature in the
    /// certificate.
    pub fn valid_signers(&self, n: usize, scheme: &dyn SignatureScheme) -> usize {
        let msg = checkpoint_bytes(self.epoch, self.max_sn, &self.root);
        self.cert
            .iter()
            .filter(|(s, sig)| *s < n && scheme.verify(Principal::Node(*s), &msg, sig))
            .map(|(s, _)| *s)
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn wire_size(&self) -> usize {
        48 + self.cert.len() * 40
    }
}

/// Collects checkpoint messages per epoch until one value reaches quorum.
#[derive(Debug, Default)]
pub struct CheckpointCollector {
    votes: BTreeMap<EpochNr, BTreeMap<(SeqNr, Digest), BTreeMap<NodeId, Signature>>>,
}

impl CheckpointCollector {
    /// Adds a verified message; returns the stable checkpoint once `quorum`
    /// matching attestations exist.
    pub fn add(&mut self, m: &CheckpointMsg, quorum: usize) -> Option<StableCheckpoint> {
        let sigs = self
            .votes
            .entry(m.epoch)
            .or_default()
            .entry((m.max_sn, m.root))
            .or_default();
        sigs.insert(m.signer, m.sig);
        if sigs.len() < quorum {
            return None;
        }
        let cp = StableCheckpoint {
            epoch: m.epoch,
            max_sn: m.max_sn,
            root: m.root,
            cert: sigs.iter().map(|(s, sig)| (*s, *sig)).collect(),
        };
        self.votes.remove(&m.epoch);
        Some(cp)
    }

    /// Forgets everything at or below `epoch`.
    pub fn prune(&mut self, epoch: EpochNr) {
        self.votes = self.votes.split_off(&(epoch + 1));
    }
}
