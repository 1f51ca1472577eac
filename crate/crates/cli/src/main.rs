//! `iss`: run scenarios, verify traces, sweep parameters.
//!
//! Exit codes: 0 clean, 1 some property failed, 2 usage, config or I/O error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use thiserror::Error;

use iss_sim::trace::{self, TraceError};
use iss_sim::{metrics, verify, ScenarioConfig, ScenarioError, TraceEvent};

#[derive(Parser)]
#[command(name = "iss", version, about = "ISS simulator, trace verifier and sweeps")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write trace.bin, metrics.csv and summary.txt.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a recorded trace and print one verdict per property.
    Verify {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Run a grid of scenarios and write one CSV row per run.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `key=lo..hi` (inclusive) or `key=v1,v2,..`; keys are dotted
        /// config paths such as `network.meanDelay`.
        #[arg(long)]
        param: Option<String>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// CSV destination; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("{path}: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error("--param: {0}")]
    Param(String),
    #[error("{0}")]
    Toml(#[from] toml::de::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run { config, seed, out } => cmd_run(&config, seed, &out),
        Cmd::Verify { trace } => cmd_verify(&trace),
        Cmd::Sweep {
            config,
            param,
            seeds,
            out,
        } => cmd_sweep(&config, param.as_deref(), seeds, out.as_deref()),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(ScenarioConfig::from_toml(&text)?)
}

/// Highest epoch any correct node started.
fn final_epoch(trace: &[TraceEvent]) -> Option<u64> {
    let faulty = match trace.first() {
        Some(TraceEvent::Header(h)) => h.faulty.clone(),
        _ => Vec::new(),
    };
    trace
        .iter()
        .filter_map(|e| match e {
            TraceEvent::EpochStart { node, epoch, .. } if !faulty.contains(node) => Some(*epoch),
            _ => None,
        })
        .max()
}

fn cmd_run(config: &Path, seed: u64, out: &Path) -> Result<bool, CliError> {
    let cfg = load_config(config)?;
    let outcome = iss_sim::run(&cfg, seed)?;
    let report = verify(&outcome.trace);
    let sum = metrics::summarize(&outcome.trace);

    fs::create_dir_all(out).map_err(io_err(out))?;
    let p = out.join("trace.bin");
    fs::write(&p, trace::encode(&outcome.trace)).map_err(io_err(&p))?;
    let p = out.join("metrics.csv");
    fs::write(&p, metrics::csv(&metrics::windows(&outcome.trace))).map_err(io_err(&p))?;

    let mut s = String::new();
    let _ = writeln!(s, "seed           {seed}");
    match final_epoch(&outcome.trace) {
        Some(e) => {
            let _ = writeln!(s, "final epoch    {e}");
        }
        None => {
            let _ = writeln!(s, "final epoch    -");
        }
    }
    let _ = writeln!(s, "delivered      {}", sum.completed);
    let _ = writeln!(s, "end            {:.3} s", outcome.end as f64 / 1e9);
    if outcome.truncated {
        let _ = writeln!(s, "truncated at horizon");
    }
    if outcome.load_cut {
        let _ = writeln!(s, "stopped at epoch cap with requests pending");
    }
    s.push_str(&sum.to_string());
    s.push('\n');
    s.push_str(&report.to_string());
    let p = out.join("summary.txt");
    fs::write(&p, &s).map_err(io_err(&p))?;
    print!("{s}");
    Ok(report.ok())
}

fn cmd_verify(path: &Path) -> Result<bool, CliError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let events = trace::decode(&bytes).map_err(|source| CliError::Trace {
        path: path.to_path_buf(),
        source,
    })?;
    let report = verify(&events);
    print!("{report}");
    Ok(report.ok())
}

/// Shorthands accepted as sweep keys.
fn resolve_key(key: &str) -> &str {
    match key {
        "leaders" => "leadersetSize",
        k => k,
    }
}

fn parse_range(spec: &str) -> Result<Vec<toml::Value>, CliError> {
    let spec = spec.trim();
    if let Some((lo, hi)) = spec.split_once("..") {
        let hi = hi.strip_prefix('=').unwrap_or(hi);
        let lo: i64 = lo
            .trim()
            .parse()
            .map_err(|_| CliError::Param(format!("bad range start {lo:?}")))?;
        let hi: i64 = hi
            .trim()
            .parse()
            .map_err(|_| CliError::Param(format!("bad range end {hi:?}")))?;
        if lo > hi {
            return Err(CliError::Param(format!("empty range {spec}")));
        }
        return Ok((lo..=hi).map(toml::Value::Integer).collect());
    }
    let vals: Vec<toml::Value> = spec
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| {
            // bare words are strings, everything else a TOML literal
            toml::from_str::<toml::Table>(&format!("v = {v}"))
                .map(|mut t| t.remove("v").unwrap())
                .unwrap_or_else(|_| toml::Value::String(v.to_string()))
        })
        .collect();
    if vals.is_empty() {
        return Err(CliError::Param(format!("empty range {spec:?}")));
    }
    Ok(vals)
}

fn set_key(doc: &mut toml::Table, key: &str, v: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().filter(|l| !l.is_empty());
    let Some(leaf) = leaf else {
        return Err(CliError::Param(format!("bad key {key:?}")));
    };
    let mut t = doc;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Param(format!("{p} in {key:?} is not a table")))?;
    }
    t.insert(leaf.to_string(), v);
    Ok(())
}

fn csv_field(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        v => v.to_string(),
    }
}

fn cmd_sweep(
    config: &Path,
    param: Option<&str>,
    seeds: u64,
    out: Option<&Path>,
) -> Result<bool, CliError> {
    let text = fs::read_to_string(config).map_err(io_err(config))?;
    let base: toml::Table = toml::from_str(&text)?;
    if seeds == 0 {
        return Err(CliError::Param("--seeds must be at least 1".into()));
    }
    let (key, values) = match param {
        Some(p) => {
            let (k, r) = p
                .split_once('=')
                .ok_or_else(|| CliError::Param(format!("expected key=range, got {p:?}")))?;
            (Some(resolve_key(k.trim())), parse_range(r)?)
        }
        None => (None, vec![toml::Value::String("-".into())]),
    };

    // validate every grid point before running anything
    let mut points = Vec::new();
    for v in &values {
        let mut doc = base.clone();
        if let Some(k) = key {
            set_key(&mut doc, k, v.clone())?;
        }
        let cfg = ScenarioConfig::from_toml(&toml::to_string(&doc).expect("toml table serializes"))?;
        for seed in 0..seeds {
            points.push((csv_field(v), seed, cfg.clone()));
        }
    }

    let rows: Vec<Result<(String, bool), CliError>> = points
        .par_iter()
        .map(|(v, seed, cfg)| {
            let o = iss_sim::run(cfg, *seed)?;
            let report = verify(&o.trace);
            let s = metrics::summarize(&o.trace);
            let failed: Vec<&str> = report.failures().iter().map(|v| v.property).collect();
            let row = format!(
                "{},{},{},{},{},{},{:.1},{:.3},{:.3},{},{}",
                key.unwrap_or("-"),
                v,
                seed,
                final_epoch(&o.trace).map_or(String::from("-"), |e| e.to_string()),
                s.submitted,
                s.completed,
                s.throughput,
                s.mean_latency_ms,
                s.p95_latency_ms,
                if report.ok() { "PASS" } else { "FAIL" },
                failed.join(";"),
            );
            Ok((row, report.ok()))
        })
        .collect();

    let mut csv = String::from(
        "param,value,seed,final_epoch,submitted,delivered_reqs,throughput_rps,mean_latency_ms,p95_latency_ms,verdict,failed\n",
    );
    let mut all_ok = true;
    for r in rows {
        let (row, ok) = r?;
        all_ok &= ok;
        csv.push_str(&row);
        csv.push('\n');
    }
    match out {
        Some(p) => fs::write(p, &csv).map_err(io_err(p))?,
        None => print!("{csv}"),
    }
    Ok(all_ok)
}
