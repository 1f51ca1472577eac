use iss_sim::metrics::{csv, summarize, windows, Window};
use iss_sim::TraceEvent;
use proptest::prelude::*;

const S: u64 = 1_000_000_000;
const MS: u64 = 1_000_000;

fn complete(t: u64, submitted: u64, ts: u64) -> TraceEvent {
    TraceEvent::Complete {
        t,
        client: 0,
        ts,
        nr: ts,
        submitted,
    }
}

#[test]
fn empty_trace() {
    let s = summarize(&[]);
    assert_eq!(s.completed, 0);
    assert_eq!(s.throughput, 0.0);
    assert_eq!(s.mean_latency_ms, 0.0);
    assert!(windows(&[]).is_empty());
    assert_eq!(csv(&[]).lines().count(), 1);
}

#[test]
fn latency_runs_to_the_acknowledging_response() {
    // delivered at 2 s, the (f+1)-th response arrives at 2.1 s
    let trace = [
        TraceEvent::Submit {
            t: S,
            client: 0,
            ts: 0,
        },
        complete(2 * S + 100 * MS, S, 0),
    ];
    let s = summarize(&trace);
    assert_eq!(s.completed, 1);
    assert!((s.mean_latency_ms - 1100.0).abs() < 1e-9);
    assert!((s.p95_latency_ms - 1100.0).abs() < 1e-9);
}

#[test]
fn hand_counted_windows() {
    // window 0: latencies 100, 300; window 1: none; window 2: 50, 60, 70
    let trace = [
        complete(200 * MS, 100 * MS, 0),
        complete(900 * MS, 600 * MS, 1),
        complete(2 * S, 2 * S - 50 * MS, 2),
        complete(2 * S + 500 * MS, 2 * S + 440 * MS, 3),
        complete(3 * S - 1, 3 * S - 1 - 70 * MS, 4),
    ];
    let w = windows(&trace);
    assert_eq!(
        w,
        vec![
            Window {
                start_s: 0,
                delivered: 2,
                mean_latency_ms: 200.0,
                p95_latency_ms: 300.0
            },
            Window {
                start_s: 1,
                delivered: 0,
                mean_latency_ms: 0.0,
                p95_latency_ms: 0.0
            },
            Window {
                start_s: 2,
                delivered: 3,
                mean_latency_ms: 60.0,
                p95_latency_ms: 70.0
            },
        ]
    );
    let text = csv(&w);
    assert_eq!(text.lines().nth(1), Some("0,2,200.000,300.000"));
    assert_eq!(text.lines().nth(2), Some("1,0,0.000,0.000"));
}

proptest! {
    #[test]
    fn windows_account_for_every_completion(
        reqs in prop::collection::vec((0u64..20 * S, 0u64..5 * S), 0..200)
    ) {
        let trace: Vec<TraceEvent> = reqs
            .iter()
            .enumerate()
            .map(|(i, &(sub, lat))| complete(sub + lat, sub, i as u64))
            .collect();
        let w = windows(&trace);
        prop_assert_eq!(w.iter().map(|w| w.delivered).sum::<u64>(), reqs.len() as u64);
        for (i, win) in w.iter().enumerate() {
            prop_assert_eq!(win.start_s, i as u64);
            let lats: Vec<f64> = reqs
                .iter()
                .filter(|r| (r.0 + r.1) / S == i as u64)
                .map(|r| r.1 as f64 / 1e6)
                .collect();
            prop_assert_eq!(win.delivered, lats.len() as u64);
            if !lats.is_empty() {
                prop_assert!(lats.contains(&win.p95_latency_ms));
            }
        }
        let n = reqs.len() as f64;
        let mean = reqs.iter().map(|r| r.1 as f64 / 1e6).sum::<f64>() / n.max(1.0);
        prop_assert!((summarize(&trace).mean_latency_ms - mean).abs() < 1e-6);
    }
}
