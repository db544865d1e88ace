//! Fault-tolerant service function chaining.
//!
//! A chain of stateful middleboxes is made tolerant to f replica failures by
//! processing each packet as a serializable transaction at its middlebox's
//! Head, piggybacking the resulting state updates on the packet itself, and
//! replicating them at the f+1 replicas of the middlebox's group as the
//! packet traverses the chain. The Buffer at the egress releases a packet
//! only once every update it depends on is committed (replicated f+1 times),
//! so recovery from surviving replicas is always consistent with everything
//! the chain has emitted.
//!
//! The `sim` module runs the whole protocol inside a deterministic
//! discrete-event network with seeded loss, latency, duplication, and crash
//! injection, checking the protocol invariants after every event.

pub mod config;
pub mod endpoints;
pub mod logstore;
pub mod mbox;
pub mod net;
pub mod node;
pub mod orch;
pub mod piggyback;
pub mod sim;
pub mod trace;
pub mod txn;
pub mod types;
pub mod vclock;

pub use config::{ChainConfig, FaultPlan, Workload};
pub use sim::{run, RunOptions, RunOutcome};
