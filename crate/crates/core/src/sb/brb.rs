//! Bracha-style Byzantine reliable broadcast.
//!
//! One [`Bracha`] tracks a single broadcast from a fixed sender. The sender's
//! value is echoed in full; readies carry only the digest. Thresholds:
//! `⌈(n+f+1)/2⌉` echoes or `f+1` readies to send ready, `2f+1` readies plus
//! the value to deliver.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::Digest;
use crate::domain::{Batch, NodeId, SeqNr};

#[derive(Clone, Debug)]
pub enum BrbKind {
    Send(Batch),
    Echo(Batch),
    Ready(Digest),
}

#[derive(Clone, Debug)]
pub struct BrbMsg {
    pub sn: SeqNr,
    pub kind: BrbKind,
}

impl BrbMsg {
    pub fn wire_size(&self) -> usize {
        9 + match &self.kind {
            BrbKind::Send(b) | BrbKind::Echo(b) => b.wire_size(),
            BrbKind::Ready(_) => 32,
        }
    }
}

/// What the caller has to do after feeding a message in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BrbAction<V> {
    /// Broadcast an echo of this value to all other nodes.
    Echo(V),
    /// Broadcast a ready for this digest to all other nodes.
    Ready(Digest),
    Deliver(V),
}

/// State of one reliable broadcast at one node.
#[derive(Clone, Debug)]
pub struct Bracha<V> {
    me: NodeId,
    n: usize,
    f: usize,
    sender: NodeId,
    values: BTreeMap<Digest, V>,
    echoes: BTreeMap<Digest, BTreeSet<NodeId>>,
    readies: BTreeMap<Digest, BTreeSet<NodeId>>,
    echoed_by: BTreeSet<NodeId>,
    readied_by: BTreeSet<NodeId>,
    sent_echo: bool,
    sent_ready: bool,
    delivered: bool,
}

impl<V: Clone> Bracha<V> {
    pub fn new(me: NodeId, n: usize, f: usize, sender: NodeId) -> Self {
        Bracha {
            me,
            n,
            f,
            sender,
            values: BTreeMap::new(),
            echoes: BTreeMap::new(),
            readies: BTreeMap::new(),
            echoed_by: BTreeSet::new(),
            readied_by: BTreeSet::new(),
            sent_echo: false,
            sent_ready: false,
            delivered: false,
        }
    }

    pub fn echo_threshold(&self) -> usize {
        (self.n + self.f + 2) / 2
    }

    pub fn delivered(&self) -> bool {
        self.delivered
    }

    /// Sender side: start the broadcast. Counts as receiving our own SEND.
    pub fn cast(&mut self, value: V, digest: Digest) -> Vec<BrbAction<V>> {
        debug_assert_eq!(self.me, self.sender);
        self.on_send(self.me, value, digest)
    }

    pub fn on_send(&mut self, from: NodeId, value: V, digest: Digest) -> Vec<BrbAction<V>> {
        let mut out = Vec::new();
        if from != self.sender || self.sent_echo {
            return out;
        }
        self.sent_echo = true;
        self.values.entry(digest).or_insert_with(|| value.clone());
        out.push(BrbAction::Echo(value));
        self.add_echo(self.me, digest, &mut out);
        out
    }

    pub fn on_echo(&mut self, from: NodeId, value: V, digest: Digest) -> Vec<BrbAction<V>> {
        let mut out = Vec::new();
        self.values.entry(digest).or_insert(value);
        self.add_echo(from, digest, &mut out);
        self.try_deliver(digest, &mut out);
        out
    }

    pub fn on_ready(&mut self, from: NodeId, digest: Digest) -> Vec<BrbAction<V>> {
        let mut out = Vec::new();
        self.add_ready(from, digest, &mut out);
        out
    }

    fn add_echo(&mut self, from: NodeId, digest: Digest, out: &mut Vec<BrbAction<V>>) {
        if !self.echoed_by.insert(from) {
            return;
        }
        let set = self.echoes.entry(digest).or_default();
        set.insert(from);
        if set.len() >= self.echo_threshold() && !self.sent_ready {
            self.send_ready(digest, out);
        }
    }

    fn add_ready(&mut self, from: NodeId, digest: Digest, out: &mut Vec<BrbAction<V>>) {
        if !self.readied_by.insert(from) {
            return;
        }
        let set = self.readies.entry(digest).or_default();
        set.insert(from);
        if set.len() > self.f && !self.sent_ready {
            self.send_ready(digest, out);
        }
        self.try_deliver(digest, out);
    }

    fn send_ready(&mut self, digest: Digest, out: &mut Vec<BrbAction<V>>) {
        self.sent_ready = true;
        out.push(BrbAction::Ready(digest));
        self.add_ready(self.me, digest, out);
    }

    fn try_deliver(&mut self, digest: Digest, out: &mut Vec<BrbAction<V>>) {
        if self.delivered {
            return;
        }
        let readies = self.readies.get(&digest).map_or(0, BTreeSet::len);
        if readies > 2 * self.f {
            if let Some(v) = self.values.get(&digest) {
                self.delivered = true;
                out.push(BrbAction::Deliver(v.clone()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    #[derive(Clone, Debug)]
    enum Wire {
        Send(u8),
        Echo(u8),
        Ready(Digest),
    }

    fn dig(v: u8) -> Digest {
        Digest::of(&[v])
    }

    /// Runs a broadcast among `n` nodes with a byzantine sender that sends
    /// `initial[i]` to node `i` (or nothing), delivering messages in the order
    /// chosen by `pick`. Returns the deliveries of the correct nodes.
    fn run(
        n: usize,
        f: usize,
        initial: &[Option<u8>],
        mut pick: impl FnMut(usize) -> usize,
    ) -> Vec<Option<u8>> {
        let sender = n - 1;
        let mut nodes: Vec<Bracha<u8>> = (0..n).map(|i| Bracha::new(i, n, f, sender)).collect();
        let mut queue: VecDeque<(usize, usize, Wire)> = VecDeque::new();
        for (i, v) in initial.iter().enumerate() {
            if let Some(v) = v {
                queue.push_back((sender, i, Wire::Send(*v)));
            }
        }
        let mut delivered = vec![None; n - 1];
        while !queue.is_empty() {
            let idx = pick(queue.len());
            let (from, to, w) = queue.remove(idx).unwrap();
            if to == sender {
                continue;
            }
            let acts = match w {
                Wire::Send(v) => nodes[to].on_send(from, v, dig(v)),
                Wire::Echo(v) => nodes[to].on_echo(from, v, dig(v)),
                Wire::Ready(d) => nodes[to].on_ready(from, d),
            };
            for a in acts {
                match a {
                    BrbAction::Echo(v) => {
                        for j in (0..n).filter(|&j| j != to) {
                            queue.push_back((to, j, Wire::Echo(v)));
                        }
                    }
                    BrbAction::Ready(d) => {
                        for j in (0..n).filter(|&j| j != to) {
                            queue.push_back((to, j, Wire::Ready(d)));
                        }
                    }
                    BrbAction::Deliver(v) => {
                        assert!(delivered[to].is_none(), "double delivery");
                        delivered[to] = Some(v);
                    }
                }
            }
        }
        delivered
    }

    #[test]
    fn correct_sender_delivers_everywhere() {
        let mut nodes: Vec<Bracha<u8>> = (0..4).map(|i| Bracha::new(i, 4, 1, 0)).collect();
        let mut pending: Vec<(usize, usize, Wire)> = Vec::new();
        let mut delivered = vec![None; 4];
        let acts = nodes[0].cast(7, dig(7));
        let mut handle = |node: usize, acts: Vec<BrbAction<u8>>, pending: &mut Vec<_>| {
            for a in acts {
                match a {
                    BrbAction::Echo(v) => {
                        (0..4).filter(|&j| j != node).for_each(|j| pending.push((node, j, Wire::Echo(v))))
                    }
                    BrbAction::Ready(d) => {
                        (0..4).filter(|&j| j != node).for_each(|j| pending.push((node, j, Wire::Ready(d))))
                    }
                    BrbAction::Deliver(v) => delivered[node] = Some(v),
                }
            }
        };
        handle(0, acts, &mut pending);
        for j in 1..4 {
            pending.push((0, j, Wire::Send(7)));
        }
        while let Some((from, to, w)) = pending.pop() {
            let acts = match w {
                Wire::Send(v) => nodes[to].on_send(from, v, dig(v)),
                Wire::Echo(v) => nodes[to].on_echo(from, v, dig(v)),
                Wire::Ready(d) => nodes[to].on_ready(from, d),
            };
            handle(to, acts, &mut pending);
        }
        assert_eq!(delivered, vec![Some(7); 4]);
    }

    #[test]
    fn silent_sender_delivers_nothing() {
        let d = run(4, 1, &[None, None, None, None], |_| 0);
        assert_eq!(d, vec![None; 3]);
    }

    #[test]
    fn echo_threshold_values() {
        assert_eq!(Bracha::<u8>::new(0, 4, 1, 0).echo_threshold(), 3);
        assert_eq!(Bracha::<u8>::new(0, 7, 2, 0).echo_threshold(), 5);
        assert_eq!(Bracha::<u8>::new(0, 5, 1, 0).echo_threshold(), 4);
    }

    /// Equivocating sender at n=4: over many message schedules, correct nodes
    /// either all deliver one value or none delivers.
    #[test]
    fn equivocation_never_splits_delivery() {
        use rand::{Rng, SeedableRng};
        let splits: [[Option<u8>; 4]; 4] = [
            [Some(1), Some(1), Some(2), None],
            [Some(1), Some(2), Some(2), None],
            [Some(1), Some(2), None, None],
            [Some(1), None, Some(1), None],
        ];
        for split in &splits {
            for seed in 0..500u64 {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let d = run(4, 1, split, |len| rng.gen_range(0..len));
                let vals: BTreeSet<u8> = d.iter().flatten().copied().collect();
                assert!(vals.len() <= 1, "conflicting deliveries {d:?}");
                let count = d.iter().flatten().count();
                assert!(count == 0 || count == 3, "partial delivery {d:?}");
            }
        }
    }
}
