//! Client protocol and the node-side request checks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use thiserror::Error;

use crate::buckets::{bucket_leader, bucket_of};
use crate::crypto::{Hasher, Principal, Signature, SignatureScheme};
use crate::domain::{ClientId, EpochNr, NodeId, Request, RequestId, Time};

/// Per-client window of acceptable timestamps, `[low, low + width)`.
#[derive(Clone, Debug)]
pub struct Watermarks {
    width: u64,
    low: BTreeMap<ClientId, u64>,
}

impl Watermarks {
    pub fn new(width: u64) -> Self {
        Watermarks {
            width,
            low: BTreeMap::new(),
        }
    }

    pub fn low(&self, c: ClientId) -> u64 {
        self.low.get(&c).copied().unwrap_or(0)
    }

    pub fn contains(&self, id: RequestId) -> bool {
        let low = self.low(id.client);
        id.timestamp >= low && id.timestamp < low + self.width
    }

    /// Moves every client's low watermark to its lowest timestamp not yet
    /// delivered.
    pub fn advance(&mut self, delivered: impl Fn(RequestId) -> bool, clients: u64) {
        for c in 0..clients {
            let mut low = self.low(c);
            while delivered(RequestId::new(c, low)) {
                low += 1;
            }
            self.low.insert(c, low);
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RequestError {
    #[error("invalid client signature")]
    BadSignature,
    #[error("unknown client {0}")]
    UnknownClient(ClientId),
    #[error("timestamp {t} outside watermark window of client {c}")]
    OutsideWatermarks { c: ClientId, t: u64 },
}

/// The three reception checks, in order: signature, registered client,
/// watermark window.
pub fn validate_request(
    r: &Request,
    num_clients: u64,
    check_signature: bool,
    scheme: &dyn SignatureScheme,
    wm: &Watermarks,
) -> Result<(), RequestError> {
    if check_signature && !r.verify(scheme) {
        return Err(RequestError::BadSignature);
    }
    if r.id.client >= num_clients {
        return Err(RequestError::UnknownClient(r.id.client));
    }
    if !wm.contains(r.id) {
        return Err(RequestError::OutsideWatermarks {
            c: r.id.client,
            t: r.id.timestamp,
        });
    }
    Ok(())
}

/// Node-signed acknowledgement of delivered requests.
#[derive(Clone, Debug)]
pub struct Response {
    pub node: NodeId,
    /// `(request id, delivery number)` pairs.
    pub entries: Vec<(RequestId, u64)>,
    pub sig: Signature,
}

impl Response {
    fn bytes(node: NodeId, entries: &[(RequestId, u64)]) -> [u8; 32] {
        let mut h = Hasher::new(b"response");
        h.u64(node as u64).u64(entries.len() as u64);
        for (id, snr) in entries {
            h.u64(id.client).u64(id.timestamp).u64(*snr);
        }
        h.finish().0
    }

    pub fn new(node: NodeId, entries: Vec<(RequestId, u64)>, scheme: &dyn SignatureScheme) -> Self {
        let sig = scheme.sign(Principal::Node(node), &Self::bytes(node, &entries));
        Response { node, entries, sig }
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme) -> bool {
        scheme.verify(
            Principal::Node(self.node),
            &Self::bytes(self.node, &self.entries),
            &self.sig,
        )
    }

    pub fn wire_size(&self) -> usize {
        8 + 32 + self.entries.len() * 24
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClientTarget {
    All,
    Nodes(Vec<NodeId>),
}

#[derive(Clone, Debug)]
pub enum ClientOutput {
    Send { to: ClientTarget, request: Request },
    /// `f+1` matching responses arrived.
    Complete {
        id: RequestId,
        delivery_nr: u64,
        submitted: Time,
    },
}

#[derive(Clone, Debug)]
pub struct ClientParams {
    pub id: ClientId,
    pub n: usize,
    pub f: usize,
    pub num_buckets: u32,
    pub window: u64,
}

#[derive(Debug)]
struct Pending {
    request: Request,
    submitted: Time,
    acks: BTreeMap<u64, BTreeSet<NodeId>>,
}

pub struct Client {
    p: ClientParams,
    next_t: u64,
    pending: BTreeMap<u64, Pending>,
    completed: BTreeSet<u64>,
    low: u64,
    backlog: VecDeque<(Arc<[u8]>, Time)>,
    view: Option<(EpochNr, Vec<NodeId>)>,
    announcements: BTreeMap<(EpochNr, Vec<NodeId>), BTreeSet<NodeId>>,
}

impl Client {
    pub fn new(p: ClientParams) -> Self {
        Client {
            p,
            next_t: 0,
            pending: BTreeMap::new(),
            completed: BTreeSet::new(),
            low: 0,
            backlog: VecDeque::new(),
            view: None,
            announcements: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> ClientId {
        self.p.id
    }

    pub fn pending(&self) -> usize {
        self.pending.len() + self.backlog.len()
    }

    pub fn submitted(&self) -> u64 {
        self.next_t
    }

    pub fn view(&self) -> Option<&(EpochNr, Vec<NodeId>)> {
        self.view.as_ref()
    }

    /// Leader of the request's bucket in the adopted epoch plus the projected
    /// leaders of the next two epochs, assuming the leaderset stays the same.
    pub fn targets(&self, id: RequestId) -> ClientTarget {
        let Some((e, leaders)) = &self.view else {
            return ClientTarget::All;
        };
        if leaders.is_empty() {
            return ClientTarget::All;
        }
        let b = bucket_of(id, self.p.num_buckets);
        let mut out: Vec<NodeId> = Vec::with_capacity(3);
        for k in 0..3 {
            let l = bucket_leader(b, e + k, leaders, self.p.n);
            if !out.contains(&l) {
                out.push(l);
            }
        }
        ClientTarget::Nodes(out)
    }

    pub fn submit(
        &mut self,
        payload: Arc<[u8]>,
        now: Time,
        scheme: &dyn SignatureScheme,
        out: &mut Vec<ClientOutput>,
    ) {
        self.backlog.push_back((payload, now));
        self.drain_backlog(scheme, out);
    }

    fn drain_backlog(&mut self, scheme: &dyn SignatureScheme, out: &mut Vec<ClientOutput>) {
        while self.next_t < self.low + self.p.window {
            let Some((payload, submitted)) = self.backlog.pop_front() else {
                break;
            };
            let id = RequestId::new(self.p.id, self.next_t);
            self.next_t += 1;
            let request = Request::new_signed(id, payload, scheme);
            out.push(ClientOutput::Send {
                to: self.targets(id),
                request: request.clone(),
            });
            self.pending.insert(
                id.timestamp,
                Pending {
                    request,
                    submitted,
                    acks: BTreeMap::new(),
                },
            );
        }
    }

    pub fn on_response(
        &mut self,
        r: &Response,
        scheme: &dyn SignatureScheme,
        out: &mut Vec<ClientOutput>,
    ) {
        if r.node >= self.p.n || !r.verify(scheme) {
            return;
        }
        let mut progressed = false;
        for &(id, snr) in &r.entries {
            if id.client != self.p.id {
                continue;
            }
            let Some(p) = self.pending.get_mut(&id.timestamp) else {
                continue;
            };
            let acks = p.acks.entry(snr).or_default();
            acks.insert(r.node);
            if acks.len() > self.p.f {
                let p = self.pending.remove(&id.timestamp).unwrap();
                out.push(ClientOutput::Complete {
                    id,
                    delivery_nr: snr,
                    submitted: p.submitted,
                });
                self.completed.insert(id.timestamp);
                progressed = true;
            }
        }
        if progressed {
            while self.completed.remove(&self.low) {
                self.low += 1;
            }
            self.drain_backlog(scheme, out);
        }
    }

    /// Leaderset announcement for `epoch`. Adopted once `f+1` nodes agree;
    /// adoption resubmits everything still pending.
    pub fn on_announce(
        &mut self,
        from: NodeId,
        epoch: EpochNr,
        leaders: Vec<NodeId>,
        out: &mut Vec<ClientOutput>,
    ) {
        if from >= self.p.n || self.view.as_ref().is_some_and(|(e, _)| *e >= epoch) {
            return;
        }
        let key = (epoch, leaders);
        let votes = self.announcements.entry(key.clone()).or_default();
        votes.insert(from);
        if votes.len() <= self.p.f {
            return;
        }
        self.announcements.retain(|(e, _), _| *e > epoch);
        self.view = Some(key);
        for p in self.pending.values() {
            out.push(ClientOutput::Send {
                to: self.targets(p.request.id),
                request: p.request.clone(),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::MacScheme;

    fn client() -> Client {
        Client::new(ClientParams {
            id: 1,
            n: 4,
            f: 1,
            num_buckets: 64,
            window: 4,
        })
    }

    fn payload() -> Arc<[u8]> {
        Arc::from(vec![0u8; 4])
    }

    #[test]
    fn targets_before_and_after_adoption() {
        let s = MacScheme::default();
        let mut c = client();
        let mut out = Vec::new();
        c.submit(payload(), 0, &s, &mut out);
        assert!(matches!(&out[0], ClientOutput::Send { to: ClientTarget::All, .. }));
        out.clear();
        c.on_announce(0, 3, vec![0, 1, 2, 3], &mut out);
        assert!(c.view().is_none());
        c.on_announce(2, 3, vec![0, 1, 2, 3], &mut out);
        assert_eq!(c.view().unwrap().0, 3);
        // resubmission of the pending request to three distinct nodes
        assert_eq!(out.len(), 1);
        match &out[0] {
            ClientOutput::Send {
                to: ClientTarget::Nodes(v),
                ..
            } => assert_eq!(v.len(), 3),
            o => panic!("unexpected {o:?}"),
        }
    }

    #[test]
    fn conflicting_minority_ignored() {
        let mut c = client();
        let mut out = Vec::new();
        c.on_announce(0, 1, vec![0, 1], &mut out);
        c.on_announce(1, 1, vec![0, 1, 2], &mut out);
        assert!(c.view().is_none());
    }

    #[test]
    fn completion_needs_f_plus_one_matching() {
        let s = MacScheme::default();
        let mut c = client();
        let mut out = Vec::new();
        c.submit(payload(), 0, &s, &mut out);
        let id = RequestId::new(1, 0);
        out.clear();
        c.on_response(&Response::new(0, vec![(id, 5)], &s), &s, &mut out);
        c.on_response(&Response::new(1, vec![(id, 6)], &s), &s, &mut out);
        assert!(out.is_empty());
        c.on_response(&Response::new(2, vec![(id, 5)], &s), &s, &mut out);
        assert!(matches!(out[0], ClientOutput::Complete { delivery_nr: 5, .. }));
        // forged response is ignored
        let mut forged = Response::new(3, vec![(id, 5)], &s);
        forged.node = 0;
        assert!(!forged.verify(&s));
    }

    #[test]
    fn window_exhaustion_queues_locally() {
        let s = MacScheme::default();
        let mut c = client();
        let mut out = Vec::new();
        for _ in 0..6 {
            c.submit(payload(), 0, &s, &mut out);
        }
        assert_eq!(out.len(), 4);
        assert_eq!(c.pending(), 6);
        out.clear();
        let id = RequestId::new(1, 0);
        for n in 0..2 {
            c.on_response(&Response::new(n, vec![(id, 0)], &s), &s, &mut out);
        }
        // completion plus one newly released request
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn node_side_validation() {
        let s = MacScheme::default();
        let mut wm = Watermarks::new(4);
        let r = Request::new_signed(RequestId::new(1, 0), payload(), &s);
        assert_eq!(validate_request(&r, 2, true, &s, &wm), Ok(()));
        assert_eq!(
            validate_request(&r, 1, true, &s, &wm),
            Err(RequestError::UnknownClient(1))
        );
        let mut bad = r.clone();
        bad.payload = Arc::from(vec![9u8]);
        assert_eq!(
            validate_request(&bad, 2, true, &s, &wm),
            Err(RequestError::BadSignature)
        );
        assert_eq!(validate_request(&bad, 2, false, &s, &wm), Ok(()));
        wm.advance(|id| id.timestamp < 2, 2);
        assert_eq!(
            validate_request(&r, 2, true, &s, &wm),
            Err(RequestError::OutsideWatermarks { c: 1, t: 0 })
        );
        let late = Request::new_signed(RequestId::new(1, 5), payload(), &s);
        assert!(validate_request(&late, 2, true, &s, &wm).is_ok());
        let too_late = Request::new_signed(RequestId::new(1, 6), payload(), &s);
        assert!(validate_request(&too_late, 2, true, &s, &wm).is_err());
    }
}
