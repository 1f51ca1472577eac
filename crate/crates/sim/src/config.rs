//! Scenario configuration: a flat TOML document using the protocol's
//! parameter names. Durations are in milliseconds.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use iss_core::domain::{
    ConfigError, ConsensusKind, FaultModel, OrdererKind, PolicyConfig, PolicyKind,
};
use iss_core::iss::{Behavior, CrashTrigger};
use iss_core::{EpochNr, NodeConfig, NodeId, Time, MS};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Node(#[from] ConfigError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum FaultModelName {
    Byzantine,
    CrashOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum OrdererName {
    Pbft,
    Raft,
    Reference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ConsensusName {
    Ideal,
    Pbft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum PolicyName {
    Simple,
    Backoff,
    Blacklist,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum FaultKind {
    Crash,
    Straggler,
    Equivocate,
    WrongCheckpoint,
    TamperTransfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub node: NodeId,
    /// Crash trigger: `epochStart:<e>`, `epochEnd:<e>` or `time:<ms>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<String>,
}

/// When a crash fault fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trigger {
    Epoch(CrashTrigger),
    At(Time),
}

impl FaultSpec {
    pub fn crash(node: NodeId, trigger: &str) -> Self {
        FaultSpec {
            kind: FaultKind::Crash,
            node,
            trigger: Some(trigger.into()),
        }
    }

    pub fn behavior(kind: FaultKind, node: NodeId) -> Self {
        FaultSpec {
            kind,
            node,
            trigger: None,
        }
    }

    pub fn parsed_trigger(&self) -> Result<Option<Trigger>, ScenarioError> {
        let Some(t) = &self.trigger else {
            return Ok(None);
        };
        let bad = || ScenarioError::Invalid(format!("faults.trigger: cannot parse {t:?}"));
        let (kind, v) = t.split_once(':').ok_or_else(bad)?;
        let v: u64 = v.trim().parse().map_err(|_| bad())?;
        Ok(Some(match kind.trim() {
            "epochStart" => Trigger::Epoch(CrashTrigger::EpochStart(v)),
            "epochEnd" => Trigger::Epoch(CrashTrigger::EpochEnd(v)),
            "time" => Trigger::At(v * MS),
            _ => return Err(bad()),
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Partition {
    pub node: NodeId,
    pub from: u64,
    pub to: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct NetworkConfig {
    pub mean_delay: f64,
    /// Post-GST delays are uniform in `mean · [1 - jitter, 1 + jitter]`.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub gst: u64,
    /// Per-node egress cap for node-to-node traffic, bytes per second.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub egress_bytes_per_sec: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub partitions: Vec<Partition>,
}

fn default_jitter() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ClientsConfig {
    pub count: u64,
    /// Requests per second per client.
    pub rate: f64,
    pub payload_size: usize,
    /// Submission period.
    pub duration: u64,
    #[serde(default = "yes")]
    pub signatures: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RunConfig {
    /// Hard stop; a run cut here is truncated.
    pub horizon: u64,
    #[serde(default)]
    pub min_epochs: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<u64>,
    /// Liveness is judged on truncated runs only once this long has passed
    /// after GST.
    #[serde(default = "default_settle")]
    pub settle: u64,
}

fn default_settle() -> u64 {
    60_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    pub f: usize,
    pub fault_model: FaultModelName,
    pub orderer: OrdererName,
    #[serde(default = "default_consensus")]
    pub consensus: ConsensusName,
    pub policy: PolicyName,
    #[serde(default = "default_ban")]
    pub ban_period: i64,
    #[serde(default = "default_decrease")]
    pub ban_decrease: i64,
    pub epoch_length: u64,
    pub min_segment_size: u64,
    pub buckets_per_leader: u32,
    pub max_batch_size: usize,
    pub batch_rate: f64,
    pub min_batch_timeout: u64,
    pub max_batch_timeout: u64,
    pub epoch_change_timeout: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaderset_size: Option<usize>,
    #[serde(default = "default_watermark")]
    pub watermark_width: u64,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quorum_override: Option<usize>,
    #[serde(default)]
    pub reliable_heartbeats: bool,
    pub network: NetworkConfig,
    pub clients: ClientsConfig,
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub faults: Vec<FaultSpec>,
}

fn default_consensus() -> ConsensusName {
    ConsensusName::Ideal
}
fn default_ban() -> i64 {
    8
}
fn default_decrease() -> i64 {
    1
}
fn default_watermark() -> u64 {
    128
}
fn default_inflight() -> usize {
    16
}

impl ScenarioConfig {
    /// A fault-free PBFT scenario with the default parameters.
    pub fn new(n: usize, f: usize) -> Self {
        let d = NodeConfig::new(n, f);
        ScenarioConfig {
            n,
            f,
            fault_model: FaultModelName::Byzantine,
            orderer: OrdererName::Pbft,
            consensus: ConsensusName::Ideal,
            policy: PolicyName::Blacklist,
            ban_period: 8,
            ban_decrease: 1,
            epoch_length: d.epoch_length,
            min_segment_size: d.min_segment_size,
            buckets_per_leader: 16,
            max_batch_size: d.max_batch_size,
            batch_rate: d.batch_rate,
            min_batch_timeout: d.min_batch_timeout / MS,
            max_batch_timeout: d.max_batch_timeout / MS,
            epoch_change_timeout: d.epoch_change_timeout / MS,
            leaderset_size: None,
            watermark_width: d.watermark_width,
            max_inflight: d.max_inflight,
            quorum_override: None,
            reliable_heartbeats: false,
            network: NetworkConfig {
                mean_delay: 50.0,
                jitter: 0.5,
                gst: 0,
                egress_bytes_per_sec: None,
                partitions: Vec::new(),
            },
            clients: ClientsConfig {
                count: 4,
                rate: 20.0,
                payload_size: 64,
                duration: 5_000,
                signatures: true,
            },
            run: RunConfig {
                horizon: 120_000,
                min_epochs: 0,
                max_epochs: None,
                settle: default_settle(),
            },
            faults: Vec::new(),
        }
    }

    pub fn from_toml(s: &str) -> Result<Self, ScenarioError> {
        let cfg: ScenarioConfig = toml::from_str(s).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serializes")
    }

    pub fn node_config(&self) -> NodeConfig {
        let mut c = NodeConfig::new(self.n, self.f);
        c.fault_model = match self.fault_model {
            FaultModelName::Byzantine => FaultModel::Byzantine,
            FaultModelName::CrashOnly => FaultModel::CrashOnly,
        };
        c.orderer = match self.orderer {
            OrdererName::Pbft => OrdererKind::Pbft,
            OrdererName::Raft => OrdererKind::Raft,
            OrdererName::Reference => OrdererKind::Reference,
        };
        c.consensus = match self.consensus {
            ConsensusName::Ideal => ConsensusKind::Ideal,
            ConsensusName::Pbft => ConsensusKind::Pbft,
        };
        c.policy = PolicyConfig {
            kind: match self.policy {
                PolicyName::Simple => PolicyKind::Simple,
                PolicyName::Backoff => PolicyKind::Backoff,
                PolicyName::Blacklist => PolicyKind::Blacklist,
            },
            ban_period: self.ban_period,
            decrease: self.ban_decrease,
        };
        c.epoch_length = self.epoch_length;
        c.min_segment_size = self.min_segment_size;
        c.num_buckets = self.buckets_per_leader * self.n as u32;
        c.max_batch_size = self.max_batch_size;
        c.batch_rate = self.batch_rate;
        c.min_batch_timeout = self.min_batch_timeout * MS;
        c.max_batch_timeout = self.max_batch_timeout * MS;
        c.epoch_change_timeout = self.epoch_change_timeout * MS;
        c.leaderset_size = self.leaderset_size;
        c.watermark_width = self.watermark_width;
        c.client_signatures = self.clients.signatures;
        c.num_clients = self.clients.count;
        c.fd_reliable_heartbeats = self.reliable_heartbeats;
        c.mean_delay = self.mean_delay();
        c.max_inflight = self.max_inflight;
        c.quorum_override = self.quorum_override;
        c
    }

    pub fn mean_delay(&self) -> Time {
        (self.network.mean_delay * MS as f64) as Time
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.node_config().validate()?;
        let inv = |m: String| Err(ScenarioError::Invalid(m));
        if self.network.mean_delay <= 0.0 {
            return inv("network.meanDelay must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.network.jitter) {
            return inv("network.jitter must be within [0, 1]".into());
        }
        if self.clients.rate < 0.0 {
            return inv("clients.rate must not be negative".into());
        }
        if self.run.max_epochs == Some(0) {
            return inv("run.maxEpochs must be positive".into());
        }
        let mut faulty = std::collections::BTreeSet::new();
        for fs in &self.faults {
            if fs.node >= self.n {
                return inv(format!("faults: node {} out of range", fs.node));
            }
            let trig = fs.parsed_trigger()?;
            match fs.kind {
                FaultKind::Crash if trig.is_none() => {
                    return inv(format!("faults: crash of node {} needs a trigger", fs.node))
                }
                FaultKind::Crash => {}
                _ if self.fault_model == FaultModelName::CrashOnly => {
                    return inv("faults: byzantine behavior under the crash-only model".into())
                }
                _ if trig.is_some() => {
                    return inv("faults: only crashes take a trigger".into())
                }
                _ => {}
            }
            if !faulty.insert(fs.node) {
                return inv(format!("faults: node {} listed twice", fs.node));
            }
        }
        if faulty.len() > self.f {
            return inv(format!("faults: {} faulty nodes exceed f={}", faulty.len(), self.f));
        }
        for p in &self.network.partitions {
            if p.node >= self.n || p.from > p.to {
                return inv(format!("network.partitions: bad entry for node {}", p.node));
            }
        }
        Ok(())
    }

    /// Nodes with any fault; everyone else is correct.
    pub fn faulty(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.faults.iter().map(|f| f.node).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn behavior_of(&self, node: NodeId) -> Behavior {
        self.faults
            .iter()
            .find(|f| f.node == node)
            .map_or(Behavior::Correct, |f| match f.kind {
                FaultKind::Crash => Behavior::Correct,
                FaultKind::Straggler => Behavior::Straggle,
                FaultKind::Equivocate => Behavior::Equivocate,
                FaultKind::WrongCheckpoint => Behavior::WrongCheckpoint,
                FaultKind::TamperTransfer => Behavior::TamperTransfer,
            })
    }

    pub fn crash_of(&self, node: NodeId) -> Option<Trigger> {
        self.faults
            .iter()
            .find(|f| f.node == node && f.kind == FaultKind::Crash)
            .and_then(|f| f.parsed_trigger().ok().flatten())
    }

    pub fn final_epoch_cap(&self) -> Option<EpochNr> {
        self.run.max_epochs.map(|m| m - 1)
    }
}
