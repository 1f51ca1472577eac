//! Trace records and their canonical encoding.
//!
//! A trace file is a magic line followed by length-prefixed records: a
//! little-endian `u32` byte count and the bincode encoding of one
//! [`TraceEvent`]. Equal traces are byte-equal.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"ISSTRC1\n";

pub type Digest = [u8; 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Inst {
    pub epoch: u64,
    pub index: u32,
}

impl std::fmt::Display for Inst {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "e{}/s{}", self.epoch, self.index)
    }
}

/// `(client, timestamp)`.
pub type Rid = (u64, u64);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub n: u32,
    pub f: u32,
    pub byzantine: bool,
    pub orderer: String,
    pub policy: String,
    /// Size of the leader candidate set.
    pub candidates: u32,
    pub num_buckets: u32,
    pub epoch_length: u64,
    pub faulty: Vec<u32>,
    pub clients: u64,
    pub gst: u64,
    pub seed: u64,
    /// Liveness of a truncated run is judged only if it ran past this time.
    pub liveness_deadline: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalLog {
    pub node: u32,
    pub entries: u64,
    pub digest: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    Header(Header),
    EpochStart {
        t: u64,
        node: u32,
        epoch: u64,
        leaders: Vec<u32>,
        first_sn: u64,
        len: u64,
    },
    SbInit {
        t: u64,
        node: u32,
        inst: Inst,
        sender: u32,
        seq_nrs: Vec<u64>,
    },
    SbCast {
        t: u64,
        node: u32,
        inst: Inst,
        sn: u64,
        digest: Digest,
    },
    SbDeliver {
        t: u64,
        node: u32,
        inst: Inst,
        sn: u64,
        digest: Digest,
    },
    /// `inst` is `None` for the node-wide failure detector.
    Suspect {
        t: u64,
        node: u32,
        target: u32,
        inst: Option<Inst>,
    },
    Restore {
        t: u64,
        node: u32,
        target: u32,
        inst: Option<Inst>,
    },
    Rejected {
        t: u64,
        node: u32,
        inst: Inst,
        sn: u64,
        from: u32,
        reason: u8,
    },
    Elected {
        t: u64,
        node: u32,
        inst: Inst,
        term: u64,
    },
    Commit {
        t: u64,
        node: u32,
        sn: u64,
        digest: Digest,
    },
    Deliver {
        t: u64,
        node: u32,
        sn: u64,
        first_nr: u64,
        count: u64,
    },
    Checkpoint {
        t: u64,
        node: u32,
        epoch: u64,
        max_sn: u64,
        root: Digest,
    },
    Transfer {
        t: u64,
        node: u32,
        peer: u32,
        epoch: u64,
        accepted: bool,
    },
    LogConflict {
        t: u64,
        node: u32,
        sn: u64,
    },
    Crashed {
        t: u64,
        node: u32,
    },
    /// Content of a batch, recorded once per digest before its first use.
    /// `None` is the nil value.
    Batch {
        digest: Digest,
        ids: Option<Vec<Rid>>,
    },
    Submit {
        t: u64,
        client: u64,
        ts: u64,
    },
    Complete {
        t: u64,
        client: u64,
        ts: u64,
        nr: u64,
        submitted: u64,
    },
    End {
        t: u64,
        /// Stopped at the horizon before all correct nodes finished.
        truncated: bool,
        /// Stopped at the epoch cap with client requests still pending.
        load_cut: bool,
        logs: Vec<FinalLog>,
    },
}

impl TraceEvent {
    pub fn time(&self) -> Option<u64> {
        use TraceEvent::*;
        match self {
            Header(_) | Batch { .. } => None,
            EpochStart { t, .. }
            | SbInit { t, .. }
            | SbCast { t, .. }
            | SbDeliver { t, .. }
            | Suspect { t, .. }
            | Restore { t, .. }
            | Rejected { t, .. }
            | Elected { t, .. }
            | Commit { t, .. }
            | Deliver { t, .. }
            | Checkpoint { t, .. }
            | Transfer { t, .. }
            | LogConflict { t, .. }
            | Crashed { t, .. }
            | Submit { t, .. }
            | Complete { t, .. }
            | End { t, .. } => Some(*t),
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a trace file")]
    BadMagic,
    #[error("record {index}: {reason}")]
    Corrupt { index: usize, reason: String },
}

pub fn encode_event(e: &TraceEvent, out: &mut Vec<u8>) {
    let body = bincode::serialize(e).expect("trace events serialize");
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
}

pub fn encode(events: &[TraceEvent]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for e in events {
        encode_event(e, &mut out);
    }
    out
}

/// Decodes a whole trace. A trailing partial record is reported as corrupt.
pub fn decode(bytes: &[u8]) -> Result<Vec<TraceEvent>, TraceError> {
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or(TraceError::BadMagic)?;
    let mut events = Vec::new();
    let mut pos = 0;
    while pos < rest.len() {
        let index = events.len();
        let corrupt = |reason: &str| TraceError::Corrupt {
            index,
            reason: reason.into(),
        };
        let len_bytes: [u8; 4] = rest
            .get(pos..pos + 4)
            .ok_or_else(|| corrupt("truncated length"))?
            .try_into()
            .unwrap();
        let len = u32::from_le_bytes(len_bytes) as usize;
        pos += 4;
        let body = rest
            .get(pos..pos + len)
            .ok_or_else(|| corrupt("truncated body"))?;
        let e = bincode::deserialize(body).map_err(|e| corrupt(&e.to_string()))?;
        events.push(e);
        pos += len;
    }
    Ok(events)
}

pub fn write_to(w: &mut impl Write, events: &[TraceEvent]) -> Result<(), TraceError> {
    w.write_all(&encode(events))?;
    Ok(())
}

pub fn read_from(r: &mut impl Read) -> Result<Vec<TraceEvent>, TraceError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}
