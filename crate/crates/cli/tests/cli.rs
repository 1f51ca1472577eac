use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use iss_sim::trace::{decode, encode};
use iss_sim::TraceEvent;

fn iss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iss"))
        .args(args)
        .output()
        .expect("spawn iss")
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The verdict block at the end of a summary or `verify` output.
fn verdicts(s: &str) -> Vec<String> {
    s.lines()
        .filter(|l| {
            l.split_whitespace()
                .nth(1)
                .is_some_and(|w| matches!(w, "PASS" | "FAIL" | "N/A"))
        })
        .map(str::to_string)
        .collect()
}

fn verdict<'a>(lines: &'a [String], prop: &str) -> &'a str {
    lines
        .iter()
        .find(|l| l.split_whitespace().next() == Some(prop))
        .unwrap_or_else(|| panic!("no verdict for {prop}"))
}

fn run_fault_free(dir: &Path) -> Output {
    let cfg = scenario("fault_free.toml");
    iss(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        dir.to_str().unwrap(),
    ])
}

#[test]
fn run_writes_artifacts_and_verify_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_fault_free(dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let in_run = verdicts(&stdout(&o));
    assert_eq!(in_run.len(), 14);
    assert!(in_run.iter().all(|l| l.contains("PASS")), "{in_run:?}");

    let summary = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert!(summary.contains("final epoch"));
    assert!(summary.contains("delivered      400"), "{summary}");
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("window_start_s,delivered_reqs,mean_latency_ms,p95_latency_ms")
    );
    let total: u64 = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 400);

    let trace = dir.path().join("trace.bin");
    let v = iss(&["verify", "--trace", trace.to_str().unwrap()]);
    assert!(v.status.success());
    assert_eq!(verdicts(&stdout(&v)), in_run);
}

#[test]
fn forced_sb2_violation_is_localized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("sb2_violation.toml");
    let o = iss(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    let lines = verdicts(&stdout(&o));
    let sb2 = verdict(&lines, "SB2-agreement");
    assert!(sb2.contains("FAIL"), "{sb2}");
    // instance and sequence number
    assert!(sb2.contains("e0/s0 sn 0:"), "{sb2}");
}

#[test]
fn missing_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("fault_free.toml")).unwrap();
    let broken: String = text
        .lines()
        .filter(|l| !l.starts_with("epochLength"))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = dir.path().join("broken.toml");
    fs::write(&cfg, broken).unwrap();
    let o = iss(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochLength"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

fn rewrite(src: &Path, dst: &Path, f: impl FnOnce(&mut Vec<TraceEvent>)) {
    let mut evs = decode(&fs::read(src).unwrap()).unwrap();
    f(&mut evs);
    fs::write(dst, encode(&evs)).unwrap();
}

#[test]
fn corrupted_and_truncated_traces() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_fault_free(dir.path()).status.success());
    let trace = dir.path().join("trace.bin");

    let dup = dir.path().join("dup.bin");
    rewrite(&trace, &dup, |evs| {
        let i = evs
            .iter()
            .position(|e| matches!(e, TraceEvent::Deliver { count, .. } if *count > 0))
            .unwrap();
        let copy = evs[i].clone();
        evs.insert(i + 1, copy);
    });
    let o = iss(&["verify", "--trace", dup.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let lines = verdicts(&stdout(&o));
    assert!(verdict(&lines, "no-duplication").contains("FAIL"), "{lines:?}");

    let cut = dir.path().join("cut.bin");
    rewrite(&trace, &cut, |evs| {
        let keep = evs.len() / 2;
        evs.truncate(keep);
    });
    let o = iss(&["verify", "--trace", cut.to_str().unwrap()]);
    let lines = verdicts(&stdout(&o));
    assert!(verdict(&lines, "SMR4-liveness").contains("N/A"), "{lines:?}");
    assert!(verdict(&lines, "SB3-termination").contains("N/A"), "{lines:?}");
    for safety in ["SMR2-agreement", "SB2-agreement", "no-duplication", "epoch-barrier"] {
        assert!(verdict(&lines, safety).contains("PASS"), "{lines:?}");
    }
    assert!(o.status.success());

    // a partial trailing record is a decode error, not a verdict
    let bytes = fs::read(&trace).unwrap();
    let partial = dir.path().join("partial.bin");
    fs::write(&partial, &bytes[..bytes.len() - 3]).unwrap();
    let o = iss(&["verify", "--trace", partial.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_grid_and_empty_range() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("fault_free.toml");
    let csv = dir.path().join("sweep.csv");
    let o = iss(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--param",
        "leaders=1..2",
        "--seeds",
        "2",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let grid: Vec<(&str, &str)> = rows.iter().map(|r| (r[1], r[2])).collect();
    assert_eq!(grid, [("1", "0"), ("1", "1"), ("2", "0"), ("2", "1")]);
    assert!(rows.iter().all(|r| r[0] == "leadersetSize" && r[9] == "PASS"));

    let o = iss(&["sweep", "--config", cfg.to_str().unwrap(), "--param", "leaders=5..2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty range"), "{}", stderr(&o));
    let o = iss(&["sweep", "--config", cfg.to_str().unwrap(), "--param", "leaders="]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_seeds_only() {
    let cfg = scenario("fault_free.toml");
    let o = iss(&["sweep", "--config", cfg.to_str().unwrap(), "--seeds", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ends_with("PASS,")), "{out}");
}
