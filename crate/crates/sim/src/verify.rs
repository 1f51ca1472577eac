//! Offline property checks over a recorded trace.
//!
//! Safety properties are always evaluated. Liveness properties need a run
//! that ended with every correct node finished; on truncated traces they are
//! reported as not evaluable unless the run went past the liveness deadline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use iss_core::buckets::{active_buckets, bucket_of};
use iss_core::RequestId;

use crate::trace::{Digest, FinalLog, Header, Inst, Rid, TraceEvent};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail(String),
    NotEvaluable(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub property: &'static str,
    pub status: Status,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.status {
            Status::Pass => write!(f, "{:<18} PASS", self.property),
            Status::Fail(m) => write!(f, "{:<18} FAIL  {m}", self.property),
            Status::NotEvaluable(m) => write!(f, "{:<18} N/A   {m}", self.property),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Report {
    pub verdicts: Vec<Verdict>,
}

impl Report {
    pub fn ok(&self) -> bool {
        !self
            .verdicts
            .iter()
            .any(|v| matches!(v.status, Status::Fail(_)))
    }

    pub fn get(&self, property: &str) -> Option<&Status> {
        self.verdicts
            .iter()
            .find(|v| v.property == property)
            .map(|v| &v.status)
    }

    pub fn failures(&self) -> Vec<&Verdict> {
        self.verdicts
            .iter()
            .filter(|v| matches!(v.status, Status::Fail(_)))
            .collect()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.verdicts {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

pub const PROPERTIES: [&str; 14] = [
    "SMR1-integrity",
    "SMR2-agreement",
    "SMR3-totality",
    "SMR4-liveness",
    "SB1-integrity",
    "SB2-agreement",
    "SB3-termination",
    "SB4-progress",
    "no-duplication",
    "delivery-order",
    "bucket-partition",
    "epoch-barrier",
    "blacklist-bound",
    "log-equality",
];

type Check = Result<(), String>;

fn hex(d: &Digest) -> String {
    d[..4].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug)]
struct Layout {
    leaders: Vec<u32>,
    first_sn: u64,
    len: u64,
}

struct Model<'a> {
    h: &'a Header,
    events: &'a [TraceEvent],
    batches: BTreeMap<Digest, Option<Vec<Rid>>>,
    faulty: BTreeSet<u32>,
    layouts: BTreeMap<u64, Layout>,
    end: Option<(u64, bool, bool, &'a [FinalLog])>,
}

impl<'a> Model<'a> {
    fn new(h: &'a Header, events: &'a [TraceEvent]) -> Self {
        let mut batches = BTreeMap::new();
        let mut layouts = BTreeMap::new();
        let mut end = None;
        let faulty: BTreeSet<u32> = h.faulty.iter().copied().collect();
        for e in events {
            match e {
                TraceEvent::Batch { digest, ids } => {
                    batches.entry(*digest).or_insert_with(|| ids.clone());
                }
                TraceEvent::EpochStart {
                    node,
                    epoch,
                    leaders,
                    first_sn,
                    len,
                    ..
                } if !faulty.contains(node) => {
                    layouts.entry(*epoch).or_insert_with(|| Layout {
                        leaders: leaders.clone(),
                        first_sn: *first_sn,
                        len: *len,
                    });
                }
                TraceEvent::End {
                    t,
                    truncated,
                    load_cut,
                    logs,
                } => end = Some((*t, *truncated, *load_cut, logs.as_slice())),
                _ => {}
            }
        }
        Model {
            h,
            events,
            batches,
            faulty,
            layouts,
            end,
        }
    }

    fn correct(&self, node: u32) -> bool {
        !self.faulty.contains(&node)
    }

    fn correct_nodes(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.h.n).filter(|p| self.correct(*p))
    }

    fn is_nil(&self, d: &Digest) -> bool {
        matches!(self.batches.get(d), Some(None))
    }

    fn ids(&self, d: &Digest) -> Result<&[Rid], String> {
        match self.batches.get(d) {
            Some(Some(v)) => Ok(v),
            Some(None) => Ok(&[]),
            None => Err(format!("batch {} has no content record", hex(d))),
        }
    }

    /// `Some(reason)` if liveness cannot be judged.
    fn liveness_blocker(&self, need_load: bool) -> Option<String> {
        match self.end {
            None => Some("trace has no end record".into()),
            Some((t, true, _, _)) if t < self.h.liveness_deadline => {
                Some(format!("run truncated at {:.3}s before the liveness deadline", t as f64 / 1e9))
            }
            Some((_, _, true, _)) if need_load => {
                Some("run stopped at the epoch cap with requests pending".into())
            }
            _ => None,
        }
    }

    fn commits(&self) -> BTreeMap<u32, BTreeMap<u64, Digest>> {
        let mut m: BTreeMap<u32, BTreeMap<u64, Digest>> = BTreeMap::new();
        for e in self.events {
            if let TraceEvent::Commit {
                node, sn, digest, ..
            } = e
            {
                m.entry(*node).or_default().entry(*sn).or_insert(*digest);
            }
        }
        m
    }

    fn senders(&self) -> BTreeMap<Inst, (u32, Vec<u64>)> {
        let mut m = BTreeMap::new();
        for e in self.events {
            if let TraceEvent::SbInit {
                inst,
                sender,
                seq_nrs,
                ..
            } = e
            {
                m.entry(*inst).or_insert_with(|| (*sender, seq_nrs.clone()));
            }
        }
        m
    }

    // ---- SMR ----

    fn smr1(&self) -> Check {
        let commits = self.commits();
        let mut submitted: BTreeSet<Rid> = BTreeSet::new();
        for e in self.events {
            match e {
                TraceEvent::Submit { client, ts, .. } => {
                    submitted.insert((*client, *ts));
                }
                TraceEvent::Deliver { node, sn, .. } if self.correct(*node) => {
                    let d = commits
                        .get(node)
                        .and_then(|m| m.get(sn))
                        .ok_or_else(|| format!("node {node} delivered uncommitted sn {sn}"))?;
                    for id in self.ids(d)? {
                        if id.0 < self.h.clients && !submitted.contains(id) {
                            return Err(format!(
                                "node {node} delivered request {id:?} at sn {sn} before client {} submitted it",
                                id.0
                            ));
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn smr2(&self) -> Check {
        let mut by_sn: BTreeMap<u64, (u32, Digest)> = BTreeMap::new();
        let mut nr: BTreeMap<u64, (u32, u64)> = BTreeMap::new();
        for e in self.events {
            match e {
                TraceEvent::Commit {
                    node, sn, digest, ..
                } if self.correct(*node) => match by_sn.get(sn) {
                    Some((other, d)) if d != digest => {
                        return Err(format!(
                            "sn {sn}: node {other} committed {}, node {node} committed {}",
                            hex(d),
                            hex(digest)
                        ))
                    }
                    Some(_) => {}
                    None => {
                        by_sn.insert(*sn, (*node, *digest));
                    }
                },
                TraceEvent::Deliver {
                    node, sn, first_nr, ..
                } if self.correct(*node) => match nr.get(sn) {
                    Some((other, n)) if n != first_nr => {
                        return Err(format!(
                            "sn {sn}: node {other} numbered from {n}, node {node} from {first_nr}"
                        ))
                    }
                    Some(_) => {}
                    None => {
                        nr.insert(*sn, (*node, *first_nr));
                    }
                },
                TraceEvent::LogConflict { node, sn, .. } if self.correct(*node) => {
                    return Err(format!("node {node} saw a conflicting value for sn {sn}"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn delivered_sns(&self) -> BTreeMap<u32, BTreeSet<u64>> {
        let mut m: BTreeMap<u32, BTreeSet<u64>> =
            self.correct_nodes().map(|p| (p, BTreeSet::new())).collect();
        for e in self.events {
            if let TraceEvent::Deliver { node, sn, .. } = e {
                if let Some(s) = m.get_mut(node) {
                    s.insert(*sn);
                }
            }
        }
        m
    }

    fn smr3(&self) -> Check {
        let d = self.delivered_sns();
        let all: BTreeSet<u64> = d.values().flatten().copied().collect();
        for (node, s) in &d {
            if let Some(sn) = all.difference(s).next() {
                return Err(format!("node {node} never delivered sn {sn}"));
            }
        }
        Ok(())
    }

    fn smr4(&self) -> Check {
        let commits = self.commits();
        let mut delivered: BTreeSet<Rid> = BTreeSet::new();
        let mut submitted: Vec<Rid> = Vec::new();
        for e in self.events {
            match e {
                TraceEvent::Submit { client, ts, .. } => submitted.push((*client, *ts)),
                TraceEvent::Deliver { node, sn, .. } if self.correct(*node) => {
                    if let Some(d) = commits.get(node).and_then(|m| m.get(sn)) {
                        delivered.extend(self.ids(d)?.iter().copied());
                    }
                }
                _ => {}
            }
        }
        let missing: Vec<&Rid> = submitted.iter().filter(|r| !delivered.contains(r)).collect();
        match missing.first() {
            None => Ok(()),
            Some(r) => Err(format!(
                "{} submitted requests never delivered, first {r:?}",
                missing.len()
            )),
        }
    }

    // ---- SB ----

    fn sb1(&self) -> Check {
        let senders = self.senders();
        let mut cast: BTreeSet<(Inst, u64, Digest)> = BTreeSet::new();
        for e in self.events {
            match e {
                TraceEvent::SbCast {
                    node,
                    inst,
                    sn,
                    digest,
                    ..
                } => {
                    if senders.get(inst).is_some_and(|(s, _)| s == node) {
                        cast.insert((*inst, *sn, *digest));
                    }
                }
                TraceEvent::SbDeliver {
                    node,
                    inst,
                    sn,
                    digest,
                    ..
                } if self.correct(*node) && !self.is_nil(digest) => {
                    let Some((sender, _)) = senders.get(inst) else {
                        return Err(format!("{inst}: delivery without init"));
                    };
                    if self.correct(*sender) && !cast.contains(&(*inst, *sn, *digest)) {
                        return Err(format!(
                            "{inst} sn {sn}: node {node} delivered {} which sender {sender} never cast",
                            hex(digest)
                        ));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn sb2(&self) -> Check {
        let mut seen: BTreeMap<(Inst, u64), (u32, Digest)> = BTreeMap::new();
        for e in self.events {
            if let TraceEvent::SbDeliver {
                node,
                inst,
                sn,
                digest,
                ..
            } = e
            {
                if !self.correct(*node) {
                    continue;
                }
                match seen.get(&(*inst, *sn)) {
                    Some((other, d)) if d != digest => {
                        return Err(format!(
                            "{inst} sn {sn}: node {other} delivered {}, node {node} delivered {}",
                            hex(d),
                            hex(digest)
                        ))
                    }
                    Some((other, _)) if other == node => {
                        return Err(format!("{inst} sn {sn}: node {node} delivered twice"))
                    }
                    _ => {
                        seen.insert((*inst, *sn), (*node, *digest));
                    }
                }
            }
        }
        Ok(())
    }

    /// Counts sequence numbers installed by state transfer as terminated.
    fn sb3(&self) -> Check {
        let senders = self.senders();
        let mut inited: BTreeSet<Inst> = BTreeSet::new();
        let mut got: BTreeSet<(u32, Inst, u64)> = BTreeSet::new();
        let mut committed: BTreeSet<(u32, u64)> = BTreeSet::new();
        for e in self.events {
            match e {
                TraceEvent::SbInit { node, inst, .. } if self.correct(*node) => {
                    inited.insert(*inst);
                }
                TraceEvent::SbDeliver { node, inst, sn, .. } => {
                    got.insert((*node, *inst, *sn));
                }
                TraceEvent::Commit { node, sn, .. } => {
                    committed.insert((*node, *sn));
                }
                _ => {}
            }
        }
        for i in &inited {
            let (_, sns) = &senders[i];
            for p in self.correct_nodes() {
                for sn in sns {
                    if !got.contains(&(p, *i, *sn)) && !committed.contains(&(p, *sn)) {
                        return Err(format!("{i} sn {sn}: node {p} never delivered"));
                    }
                }
            }
        }
        Ok(())
    }

    fn sb4(&self) -> Check {
        let senders = self.senders();
        // (node, inst) -> init time
        let mut init: BTreeMap<(u32, Inst), u64> = BTreeMap::new();
        for e in self.events {
            if let TraceEvent::SbInit { t, node, inst, .. } = e {
                init.entry((*node, *inst)).or_insert(*t);
            }
        }
        // node-wide detector state changes per (node, target)
        let mut global: BTreeMap<(u32, u32), Vec<(u64, bool)>> = BTreeMap::new();
        let mut scoped: Vec<(u64, u32, u32, Option<Inst>)> = Vec::new();
        for e in self.events {
            match e {
                TraceEvent::Suspect {
                    t,
                    node,
                    target,
                    inst,
                } => {
                    if inst.is_none() {
                        global.entry((*node, *target)).or_default().push((*t, true));
                    }
                    scoped.push((*t, *node, *target, *inst));
                }
                TraceEvent::Restore {
                    t,
                    node,
                    target,
                    inst: None,
                } => global.entry((*node, *target)).or_default().push((*t, false)),
                _ => {}
            }
        }
        let suspected_at = |node: u32, target: u32, t: u64| {
            global
                .get(&(node, target))
                .and_then(|v| v.iter().rev().find(|(ts, _)| *ts <= t))
                .is_some_and(|(_, s)| *s)
        };
        for e in self.events {
            let TraceEvent::SbDeliver {
                t: td,
                node,
                inst,
                sn,
                digest,
            } = e
            else {
                continue;
            };
            if !self.correct(*node) || !self.is_nil(digest) {
                continue;
            }
            let sigma = senders[inst].0;
            let ok = self.correct_nodes().any(|p| {
                let Some(&t0) = init.get(&(p, *inst)) else {
                    return false;
                };
                suspected_at(p, sigma, t0)
                    || scoped.iter().any(|&(ts, q, target, i)| {
                        q == p
                            && target == sigma
                            && ts >= t0
                            && ts <= *td
                            && (i.is_none() || i == Some(*inst))
                    })
            });
            if !ok {
                return Err(format!(
                    "{inst} sn {sn}: node {node} delivered nil but no correct node suspected {sigma} after init"
                ));
            }
        }
        Ok(())
    }

    // ---- log structure ----

    fn no_duplication(&self) -> Check {
        let commits = self.commits();
        let mut seen: BTreeMap<u32, BTreeMap<Rid, u64>> = BTreeMap::new();
        for e in self.events {
            if let TraceEvent::Deliver { node, sn, .. } = e {
                if !self.correct(*node) {
                    continue;
                }
                let Some(d) = commits.get(node).and_then(|m| m.get(sn)) else {
                    continue;
                };
                let s = seen.entry(*node).or_default();
                for id in self.ids(d)? {
                    if let Some(prev) = s.insert(*id, *sn) {
                        return Err(format!(
                            "node {node} delivered request {id:?} twice (sn {prev} and sn {sn})"
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Delivery in sequence number order with delivery numbers equal to the
    /// request count of the delivered prefix.
    fn delivery_order(&self) -> Check {
        let commits = self.commits();
        let mut next: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
        for e in self.events {
            if let TraceEvent::Deliver {
                node,
                sn,
                first_nr,
                count,
                ..
            } = e
            {
                if !self.correct(*node) {
                    continue;
                }
                let (want_sn, total) = next.entry(*node).or_insert((0, 0));
                if *sn != *want_sn {
                    return Err(format!("node {node} delivered sn {sn}, expected {want_sn}"));
                }
                if *first_nr != *total {
                    return Err(format!(
                        "node {node} sn {sn}: first delivery number {first_nr}, prefix holds {total}"
                    ));
                }
                let Some(d) = commits.get(node).and_then(|m| m.get(sn)) else {
                    return Err(format!("node {node} delivered uncommitted sn {sn}"));
                };
                let len = self.ids(d)?.len() as u64;
                if len != *count {
                    return Err(format!("node {node} sn {sn}: count {count}, batch holds {len}"));
                }
                *want_sn += 1;
                *total += len;
            }
        }
        Ok(())
    }

    fn bucket_partition(&self) -> Check {
        let n = self.h.n as usize;
        let nb = self.h.num_buckets;
        let mut active: BTreeMap<u64, Vec<BTreeSet<u32>>> = BTreeMap::new();
        for (&e, l) in &self.layouts {
            let leaders: Vec<usize> = l.leaders.iter().map(|&x| x as usize).collect();
            let sets: Vec<BTreeSet<u32>> = leaders
                .iter()
                .map(|&i| active_buckets(e, &leaders, i, n, nb))
                .collect();
            let mut union = BTreeSet::new();
            for s in &sets {
                for b in s {
                    if !union.insert(*b) {
                        return Err(format!("epoch {e}: bucket {b} assigned twice"));
                    }
                }
            }
            if !leaders.is_empty() && union.len() != nb as usize {
                return Err(format!("epoch {e}: {} of {nb} buckets assigned", union.len()));
            }
            active.insert(e, sets);
        }
        let mut checked: BTreeSet<u64> = BTreeSet::new();
        for (node, m) in self.commits() {
            if !self.correct(node) {
                continue;
            }
            for (sn, d) in m {
                if !checked.insert(sn) {
                    continue;
                }
                let Some((e, l)) = self
                    .layouts
                    .iter()
                    .find(|(_, l)| l.first_sn <= sn && sn < l.first_sn + l.len)
                else {
                    continue;
                };
                let idx = (sn % l.leaders.len() as u64) as usize;
                let allowed = &active[e][idx];
                for &(c, t) in self.ids(&d)? {
                    let b = bucket_of(RequestId::new(c, t), nb);
                    if !allowed.contains(&b) {
                        return Err(format!(
                            "sn {sn} (epoch {e}, leader {}): request ({c},{t}) from bucket {b} outside the segment",
                            l.leaders[idx]
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn epoch_barrier(&self) -> Check {
        let mut prefix: BTreeMap<u32, (u64, BTreeSet<u64>)> = BTreeMap::new();
        for e in self.events {
            match e {
                TraceEvent::Commit { node, sn, .. } => {
                    let (lo, set) = prefix.entry(*node).or_default();
                    set.insert(*sn);
                    while set.remove(lo) {
                        *lo += 1;
                    }
                }
                TraceEvent::SbCast { node, inst, sn, .. } if self.correct(*node) => {
                    let Some(l) = self.layouts.get(&inst.epoch) else {
                        continue;
                    };
                    let lo = prefix.get(node).map_or(0, |p| p.0);
                    if lo < l.first_sn {
                        return Err(format!(
                            "node {node} cast sn {sn} of epoch {} with sn {lo} of an earlier epoch uncommitted",
                            inst.epoch
                        ));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn blacklist_bound(&self) -> Result<(), Status> {
        if self.h.policy != "blacklist" {
            return Err(Status::NotEvaluable(format!("policy is {}", self.h.policy)));
        }
        let min = self.h.candidates.saturating_sub(self.h.f) as usize;
        for (e, l) in &self.layouts {
            if l.leaders.len() < min {
                return Err(Status::Fail(format!(
                    "epoch {e}: {} leaders, bound {min}",
                    l.leaders.len()
                )));
            }
        }
        Ok(())
    }

    fn log_equality(&self) -> Result<(), Status> {
        let Some((_, truncated, _, logs)) = self.end else {
            return Err(Status::NotEvaluable("trace has no end record".into()));
        };
        if truncated {
            return Err(Status::NotEvaluable("run truncated".into()));
        }
        let correct: Vec<&FinalLog> = logs.iter().filter(|l| self.correct(l.node)).collect();
        if let Some(first) = correct.first() {
            for l in &correct[1..] {
                if l.digest != first.digest || l.entries != first.entries {
                    return Err(Status::Fail(format!(
                        "node {} log ({} entries, {}) differs from node {} ({} entries, {})",
                        l.node,
                        l.entries,
                        hex(&l.digest),
                        first.node,
                        first.entries,
                        hex(&first.digest)
                    )));
                }
            }
        }
        Ok(())
    }
}

fn status(c: Check) -> Status {
    match c {
        Ok(()) => Status::Pass,
        Err(m) => Status::Fail(m),
    }
}

fn live(blocker: Option<String>, c: impl FnOnce() -> Check) -> Status {
    match blocker {
        Some(r) => Status::NotEvaluable(r),
        None => status(c()),
    }
}

/// Checks every property against `trace`.
pub fn verify(trace: &[TraceEvent]) -> Report {
    let Some(TraceEvent::Header(h)) = trace.first() else {
        return Report {
            verdicts: PROPERTIES
                .iter()
                .map(|&property| Verdict {
                    property,
                    status: Status::NotEvaluable("trace has no header".into()),
                })
                .collect(),
        };
    };
    let m = Model::new(h, trace);
    let lb = m.liveness_blocker(false);
    let lb_load = m.liveness_blocker(true);
    let flat = |r: Result<(), Status>| r.err().unwrap_or(Status::Pass);
    let statuses = [
        status(m.smr1()),
        status(m.smr2()),
        live(lb.clone(), || m.smr3()),
        live(lb_load, || m.smr4()),
        status(m.sb1()),
        status(m.sb2()),
        live(lb, || m.sb3()),
        status(m.sb4()),
        status(m.no_duplication()),
        status(m.delivery_order()),
        status(m.bucket_partition()),
        status(m.epoch_barrier()),
        flat(m.blacklist_bound()),
        flat(m.log_equality()),
    ];
    Report {
        verdicts: PROPERTIES
            .iter()
            .zip(statuses)
            .map(|(&property, status)| Verdict { property, status })
            .collect(),
    }
}
