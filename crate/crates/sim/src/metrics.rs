//! Throughput and latency derived from a trace.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use iss_core::SEC;

use crate::trace::TraceEvent;

#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start_s: u64,
    pub delivered: u64,
    pub mean_latency_ms: f64,
    pub p95_latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub submitted: u64,
    pub completed: u64,
    pub duration_s: f64,
    /// Completed requests per second over the span from the first submit to
    /// the last completion.
    pub throughput: f64,
    pub mean_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub max_latency_ms: f64,
    pub epochs: u64,
    /// Per epoch, time from the first to the last start seen at any node
    /// of the following epoch, measured at the lowest correct node.
    pub epoch_durations_ms: Vec<f64>,
}

/// Nearest-rank percentile of a sorted slice; 0 for empty input.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn completions(trace: &[TraceEvent]) -> Vec<(u64, f64)> {
    trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Complete { t, submitted, .. } => {
                Some((*t, (t - submitted) as f64 / 1e6))
            }
            _ => None,
        })
        .collect()
}

/// One-second windows keyed by completion time.
pub fn windows(trace: &[TraceEvent]) -> Vec<Window> {
    let mut by: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for (t, lat) in completions(trace) {
        by.entry(t / SEC).or_default().push(lat);
    }
    let Some(&last) = by.keys().next_back() else {
        return Vec::new();
    };
    (0..=last)
        .map(|s| {
            let mut v = by.remove(&s).unwrap_or_default();
            v.sort_by(f64::total_cmp);
            Window {
                start_s: s,
                delivered: v.len() as u64,
                mean_latency_ms: mean(&v),
                p95_latency_ms: percentile(&v, 95.0),
            }
        })
        .collect()
}

pub fn csv(windows: &[Window]) -> String {
    let mut s = String::from("window_start_s,delivered_reqs,mean_latency_ms,p95_latency_ms\n");
    for w in windows {
        let _ = writeln!(
            s,
            "{},{},{:.3},{:.3}",
            w.start_s, w.delivered, w.mean_latency_ms, w.p95_latency_ms
        );
    }
    s
}

/// Start time of each epoch at `node`.
pub fn epoch_starts(trace: &[TraceEvent], node: u32) -> BTreeMap<u64, u64> {
    let mut m = BTreeMap::new();
    for e in trace {
        if let TraceEvent::EpochStart {
            t, node: p, epoch, ..
        } = e
        {
            if *p == node {
                m.entry(*epoch).or_insert(*t);
            }
        }
    }
    m
}

pub fn summarize(trace: &[TraceEvent]) -> Summary {
    let faulty: Vec<u32> = match trace.first() {
        Some(TraceEvent::Header(h)) => h.faulty.clone(),
        _ => Vec::new(),
    };
    let n = match trace.first() {
        Some(TraceEvent::Header(h)) => h.n,
        _ => 0,
    };
    let observer = (0..n).find(|p| !faulty.contains(p)).unwrap_or(0);
    let comps = completions(trace);
    let mut lats: Vec<f64> = comps.iter().map(|c| c.1).collect();
    lats.sort_by(f64::total_cmp);
    let first_submit = trace.iter().find_map(|e| match e {
        TraceEvent::Submit { t, .. } => Some(*t),
        _ => None,
    });
    let last_done = comps.iter().map(|c| c.0).max();
    let duration_s = match (first_submit, last_done) {
        (Some(a), Some(b)) if b > a => (b - a) as f64 / 1e9,
        _ => 0.0,
    };
    let starts = epoch_starts(trace, observer);
    let epoch_durations_ms = starts
        .iter()
        .zip(starts.iter().skip(1))
        .map(|((_, a), (_, b))| (b - a) as f64 / 1e6)
        .collect();
    Summary {
        submitted: trace
            .iter()
            .filter(|e| matches!(e, TraceEvent::Submit { .. }))
            .count() as u64,
        completed: comps.len() as u64,
        duration_s,
        throughput: if duration_s > 0.0 {
            comps.len() as f64 / duration_s
        } else {
            0.0
        },
        mean_latency_ms: mean(&lats),
        p95_latency_ms: percentile(&lats, 95.0),
        max_latency_ms: lats.last().copied().unwrap_or(0.0),
        epochs: starts.len() as u64,
        epoch_durations_ms,
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "submitted      {}", self.submitted)?;
        writeln!(f, "completed      {}", self.completed)?;
        writeln!(f, "duration       {:.3} s", self.duration_s)?;
        writeln!(f, "throughput     {:.1} req/s", self.throughput)?;
        writeln!(f, "latency mean   {:.1} ms", self.mean_latency_ms)?;
        writeln!(f, "latency p95    {:.1} ms", self.p95_latency_ms)?;
        writeln!(f, "latency max    {:.1} ms", self.max_latency_ms)?;
        writeln!(f, "epochs         {}", self.epochs)
    }
}
