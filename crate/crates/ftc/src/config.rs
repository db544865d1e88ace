//! Chain, workload, and fault-plan configuration. These types are the
//! JSON-facing schema consumed by the harness and the simulator.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("chain length must be >= 1")]
    EmptyChain,
    #[error("expected {expected} middlebox specs, got {got}")]
    MiddleboxCount { expected: usize, got: usize },
    #[error("middlebox {index}: {reason}")]
    BadMiddlebox { index: usize, reason: String },
    #[error("loss probability must be in [0, 1), got {0}")]
    BadLoss(f64),
    #[error("duplicate probability must be in [0, 1), got {0}")]
    BadDuplicate(f64),
    #[error("latency range [{min}, {max}] is invalid")]
    BadLatency { min: u64, max: u64 },
    #[error("scalar protocol requires every middlebox to have 1 partition")]
    ScalarNeedsSinglePartition,
    #[error("fault plan crashes {got} distinct replica positions, budget is f = {f}")]
    TooManyCrashes { got: usize, f: u16 },
    #[error("crash targets replica position {position}, chain has {n_eff}")]
    BadCrashPosition { position: u16, n_eff: u16 },
}

/// Which workload middlebox runs at a chain position, with its knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MiddleboxKind {
    /// Counts packets per flow and per shared group. `sharing_level`
    /// controls contention: level P collapses all shared counters into one.
    Monitor { sharing_level: u16 },
    /// Flow-table NAT drawing mappings from a finite pool.
    SimpleNat { pool_size: u64 },
    /// Write-heavy generator producing `state_size` fresh bytes per packet.
    Gen { state_size: u16 },
    /// Stateless filter dropping the listed flows.
    Firewall { block_flows: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiddleboxConfig {
    #[serde(flatten)]
    pub kind: MiddleboxKind,
    /// State partition count P for this middlebox.
    #[serde(default = "default_partitions")]
    pub partitions: u16,
}

fn default_partitions() -> u16 {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    /// Per-message loss probability.
    #[serde(default)]
    pub loss: f64,
    /// Per-message duplication probability.
    #[serde(default)]
    pub duplicate: f64,
    /// Uniform latency bounds in ticks, inclusive.
    #[serde(default = "default_latency_min")]
    pub latency_min: u64,
    #[serde(default = "default_latency_max")]
    pub latency_max: u64,
}

fn default_latency_min() -> u64 {
    50
}
fn default_latency_max() -> u64 {
    150
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            loss: 0.0,
            duplicate: 0.0,
            latency_min: default_latency_min(),
            latency_max: default_latency_max(),
        }
    }
}

impl LinkConfig {
    pub fn mean_latency(&self) -> u64 {
        (self.latency_min + self.latency_max) / 2
    }
}

/// Scalar runs the single-counter sequencing protocol; Vector runs the
/// partial-order protocol with per-partition version vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplicationMode {
    #[default]
    Vector,
    Scalar,
}

/// Test hooks that disable one protocol mechanism each, used to prove the
/// checkers are not vacuous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    /// Buffer releases packets without waiting for commit coverage.
    DisableBufferGate,
    /// Replicas log piggybacked updates without the v1 <= MAX gate.
    DisableReplicaGate,
    /// Tails forward PCLs without overwriting the commit vector.
    DisableTailCommit,
    /// Fetch donors do not fence their group against stale traffic.
    DisableFencing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Number of middleboxes n.
    pub middleboxes: Vec<MiddleboxConfig>,
    /// Failure budget f.
    pub f: u16,
    #[serde(default)]
    pub link: LinkConfig,
    /// Forwarder propagation-timer period in ticks.
    #[serde(default = "default_timer_period")]
    pub timer_period: u64,
    /// Base retransmission-request timeout in ticks.
    #[serde(default = "default_nack_timeout")]
    pub nack_timeout: u64,
    /// Orchestrator failure-detection delay in ticks.
    #[serde(default = "default_detection_delay")]
    pub detection_delay: u64,
    /// Forwarder feedback queue capacity Q.
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    /// Simulated ticks consumed by each transaction read/write/commit step.
    #[serde(default = "default_txn_step_ticks")]
    pub txn_step_ticks: u64,
    #[serde(default)]
    pub protocol: ReplicationMode,
    #[serde(default)]
    pub mutation: Option<Mutation>,
    #[serde(default)]
    pub seed: u64,
}

fn default_timer_period() -> u64 {
    1000
}
fn default_nack_timeout() -> u64 {
    500
}
fn default_detection_delay() -> u64 {
    200
}
fn default_queue_capacity() -> usize {
    1024
}
fn default_txn_step_ticks() -> u64 {
    1
}

impl ChainConfig {
    /// A chain with default timers/links, handy for tests.
    pub fn new(middleboxes: Vec<MiddleboxConfig>, f: u16) -> Self {
        ChainConfig {
            middleboxes,
            f,
            link: LinkConfig::default(),
            timer_period: default_timer_period(),
            nack_timeout: default_nack_timeout(),
            detection_delay: default_detection_delay(),
            queue_capacity: default_queue_capacity(),
            txn_step_ticks: default_txn_step_ticks(),
            protocol: ReplicationMode::Vector,
            mutation: None,
            seed: 0,
        }
    }

    pub fn n(&self) -> u16 {
        self.middleboxes.len() as u16
    }

    /// Effective replica count: short chains are padded with replication-only
    /// replicas so every group still has f+1 members.
    pub fn n_eff(&self) -> u16 {
        self.n().max(self.f + 1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.middleboxes.is_empty() {
            return Err(ConfigError::EmptyChain);
        }
        for (index, mb) in self.middleboxes.iter().enumerate() {
            if mb.partitions == 0 {
                return Err(ConfigError::BadMiddlebox {
                    index,
                    reason: "partition count must be >= 1".into(),
                });
            }
            if let MiddleboxKind::Monitor { sharing_level } = mb.kind {
                if sharing_level == 0 || sharing_level > mb.partitions {
                    return Err(ConfigError::BadMiddlebox {
                        index,
                        reason: format!(
                            "sharing_level must be 1..={}, got {sharing_level}",
                            mb.partitions
                        ),
                    });
                }
            }
        }
        if !(0.0..1.0).contains(&self.link.loss) {
            return Err(ConfigError::BadLoss(self.link.loss));
        }
        if !(0.0..1.0).contains(&self.link.duplicate) {
            return Err(ConfigError::BadDuplicate(self.link.duplicate));
        }
        if self.link.latency_min == 0 || self.link.latency_min > self.link.latency_max {
            return Err(ConfigError::BadLatency {
                min: self.link.latency_min,
                max: self.link.latency_max,
            });
        }
        if self.protocol == ReplicationMode::Scalar
            && self.middleboxes.iter().any(|m| m.partitions != 1)
        {
            return Err(ConfigError::ScalarNeedsSinglePartition);
        }
        Ok(())
    }
}

/// Deterministic traffic shape: `flows` flows of `packets_per_flow` packets
/// each, injected `inter_arrival` ticks apart per flow, with seeded start
/// offsets within `start_spread`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub flows: u64,
    pub packets_per_flow: u64,
    #[serde(default = "default_inter_arrival")]
    pub inter_arrival: u64,
    #[serde(default = "default_start_spread")]
    pub start_spread: u64,
}

fn default_inter_arrival() -> u64 {
    100
}
fn default_start_spread() -> u64 {
    100
}

impl Workload {
    pub fn total_packets(&self) -> u64 {
        self.flows * self.packets_per_flow
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashTarget {
    /// Crashes whatever node currently occupies this chain position, so a
    /// second crash at the same position kills the replacement.
    Replica { position: u16 },
    Forwarder,
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrashEvent {
    pub time: u64,
    pub target: CrashTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FaultPlan {
    #[serde(default)]
    pub crashes: Vec<CrashEvent>,
}

impl FaultPlan {
    pub fn none() -> Self {
        FaultPlan::default()
    }

    pub fn validate(&self, chain: &ChainConfig) -> Result<(), ConfigError> {
        let mut positions = Vec::new();
        for crash in &self.crashes {
            if let CrashTarget::Replica { position } = crash.target {
                if position == 0 || position > chain.n_eff() {
                    return Err(ConfigError::BadCrashPosition {
                        position,
                        n_eff: chain.n_eff(),
                    });
                }
                if !positions.contains(&position) {
                    positions.push(position);
                }
            }
        }
        if positions.len() > chain.f as usize {
            return Err(ConfigError::TooManyCrashes {
                got: positions.len(),
                f: chain.f,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monitor(p: u16) -> MiddleboxConfig {
        MiddleboxConfig {
            kind: MiddleboxKind::Monitor { sharing_level: 1 },
            partitions: p,
        }
    }

    #[test]
    fn n_eff_pads_short_chains() {
        let cfg = ChainConfig::new(vec![monitor(1)], 2);
        assert_eq!(cfg.n_eff(), 3);
        let cfg = ChainConfig::new(vec![monitor(1); 5], 0);
        assert_eq!(cfg.n_eff(), 5);
    }

    #[test]
    fn scalar_mode_rejects_multiple_partitions() {
        let mut cfg = ChainConfig::new(vec![monitor(4)], 1);
        cfg.protocol = ReplicationMode::Scalar;
        assert_eq!(
            cfg.validate(),
            Err(ConfigError::ScalarNeedsSinglePartition)
        );
    }

    #[test]
    fn fault_budget_counts_distinct_positions() {
        let cfg = ChainConfig::new(vec![monitor(1); 3], 1);
        let plan = FaultPlan {
            crashes: vec![
                CrashEvent {
                    time: 10,
                    target: CrashTarget::Replica { position: 2 },
                },
                CrashEvent {
                    time: 20,
                    target: CrashTarget::Replica { position: 2 },
                },
            ],
        };
        // Same position twice (replacement kill) stays within budget.
        assert!(plan.validate(&cfg).is_ok());
        let plan = FaultPlan {
            crashes: vec![
                CrashEvent {
                    time: 10,
                    target: CrashTarget::Replica { position: 1 },
                },
                CrashEvent {
                    time: 20,
                    target: CrashTarget::Replica { position: 2 },
                },
            ],
        };
        assert!(matches!(
            plan.validate(&cfg),
            Err(ConfigError::TooManyCrashes { got: 2, f: 1 })
        ));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ChainConfig::new(
            vec![
                MiddleboxConfig {
                    kind: MiddleboxKind::Firewall {
                        block_flows: vec![9],
                    },
                    partitions: 1,
                },
                monitor(4),
            ],
            1,
        );
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ChainConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
