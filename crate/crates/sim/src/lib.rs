//! Deterministic discrete-event simulation of an ISS deployment, the trace
//! it records, and offline checks over that trace.

pub mod config;
pub mod metrics;
pub mod net;
pub mod trace;
pub mod verify;
pub mod world;

pub use config::{ScenarioConfig, ScenarioError};
pub use trace::TraceEvent;
pub use verify::{verify, Report, Status};
pub use world::{run, Outcome};
