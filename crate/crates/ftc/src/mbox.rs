//! The four workload middleboxes, written as steppable per-packet programs.
//!
//! A program exposes the transaction's next read/write one operation at a
//! time, so the simulator can interleave concurrent packet transactions at
//! operation boundaries and wound-wait restarts can replay the program from
//! the top. `run_serial` drives a program against a plain map, which is what
//! the harness oracle uses for its reference execution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::MiddleboxKind;
use crate::types::{Key, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MbAction {
    Forward,
    Drop,
}

/// One step of a packet transaction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TxnOp {
    Read(Key),
    Write(Key, Value),
    Finish(MbAction),
}

/// Deterministic "fresh" bytes for the Gen middlebox, derived from the packet
/// id rather than an RNG so runs are reproducible.
pub fn gen_bytes(packet_id: u64, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    let mut x = packet_id.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
    while out.len() < len {
        x ^= x >> 30;
        x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x ^= x >> 27;
        out.extend_from_slice(&x.to_be_bytes());
    }
    out.truncate(len);
    out
}

#[derive(Clone, Debug)]
enum Plan {
    Monitor {
        flow_key: Key,
        shared_key: Key,
    },
    SimpleNat {
        flow_key: Key,
        pool_key: Key,
        pool_size: u64,
    },
    Gen {
        key: Key,
        value: Value,
    },
    Firewall {
        blocked: bool,
    },
}

/// A packet transaction's program. `current` yields the operation to run;
/// `complete` feeds back its result (reads carry the looked-up value).
#[derive(Clone, Debug)]
pub struct MbProgram {
    plan: Plan,
    step: usize,
    reads: Vec<Option<Value>>,
}

impl MbProgram {
    /// Restart from the top, e.g. after a wound-wait abort.
    pub fn reset(&mut self) {
        self.step = 0;
        self.reads.clear();
    }

    pub fn current(&self) -> TxnOp {
        match &self.plan {
            Plan::Monitor {
                flow_key,
                shared_key,
            } => match self.step {
                0 => TxnOp::Read(flow_key.clone()),
                1 => TxnOp::Write(flow_key.clone(), bump(&self.reads[0])),
                2 => TxnOp::Read(shared_key.clone()),
                3 => TxnOp::Write(shared_key.clone(), bump(&self.reads[1])),
                _ => TxnOp::Finish(MbAction::Forward),
            },
            Plan::SimpleNat {
                flow_key,
                pool_key,
                pool_size,
            } => match self.step {
                0 => TxnOp::Read(flow_key.clone()),
                // A mapped flow forwards on the fast path; otherwise consult
                // the free list.
                1 => match &self.reads[0] {
                    Some(_) => TxnOp::Finish(MbAction::Forward),
                    None => TxnOp::Read(pool_key.clone()),
                },
                2 => {
                    let next = self.reads[1].as_ref().map(Value::as_u64).unwrap_or(0);
                    if next >= *pool_size {
                        TxnOp::Finish(MbAction::Drop)
                    } else {
                        TxnOp::Write(pool_key.clone(), Value::from_u64(next + 1))
                    }
                }
                3 => {
                    let next = self.reads[1].as_ref().map(Value::as_u64).unwrap_or(0);
                    TxnOp::Write(flow_key.clone(), Value::from_u64(next))
                }
                _ => TxnOp::Finish(MbAction::Forward),
            },
            Plan::Gen { key, value } => match self.step {
                0 => TxnOp::Write(key.clone(), value.clone()),
                _ => TxnOp::Finish(MbAction::Forward),
            },
            Plan::Firewall { blocked } => {
                if *blocked {
                    TxnOp::Finish(MbAction::Drop)
                } else {
                    TxnOp::Finish(MbAction::Forward)
                }
            }
        }
    }

    /// Marks the current operation complete. Reads pass their result.
    pub fn complete(&mut self, read: Option<Option<Value>>) {
        if let TxnOp::Read(_) = self.current() {
            self.reads
                .push(read.expect("read completion carries the value"));
        }
        self.step += 1;
    }
}

fn bump(read: &Option<Value>) -> Value {
    Value::from_u64(read.as_ref().map(Value::as_u64).unwrap_or(0) + 1)
}

/// Builds the packet program for a middlebox spec.
///
/// Monitor touches `flow:<id>` plus `shared:<g>` with g spreading flows over
/// `ceil(P / sharing_level)` shared counters; SimpleNAT allocates the lowest
/// free index from `pool:free` into `nat:<flow>`; Gen overwrites
/// `gen:<flow mod 16>` with fresh bytes; Firewall is stateless.
pub fn program(kind: &MiddleboxKind, partitions: u16, flow_id: u64, packet_id: u64) -> MbProgram {
    let plan = match kind {
        MiddleboxKind::Monitor { sharing_level } => {
            let groups = u64::from(partitions.div_ceil(*sharing_level));
            Plan::Monitor {
                flow_key: Key::new(format!("flow:{flow_id}").into_bytes()),
                shared_key: Key::new(format!("shared:{}", flow_id % groups).into_bytes()),
            }
        }
        MiddleboxKind::SimpleNat { pool_size } => Plan::SimpleNat {
            flow_key: Key::new(format!("nat:{flow_id}").into_bytes()),
            pool_key: Key::from("pool:free"),
            pool_size: *pool_size,
        },
        MiddleboxKind::Gen { state_size } => Plan::Gen {
            key: Key::new(format!("gen:{}", flow_id % 16).into_bytes()),
            value: Value::new(gen_bytes(packet_id, *state_size as usize)),
        },
        MiddleboxKind::Firewall { block_flows } => Plan::Firewall {
            blocked: block_flows.contains(&flow_id),
        },
    };
    MbProgram {
        plan,
        step: 0,
        reads: Vec::new(),
    }
}

/// Serial reference execution against a plain map. Returns the action and
/// applies the writes; used by the oracle and by unit tests.
pub fn run_serial(program: &mut MbProgram, store: &mut BTreeMap<Key, Value>) -> MbAction {
    loop {
        match program.current() {
            TxnOp::Read(key) => {
                let value = store.get(&key).cloned();
                program.complete(Some(value));
            }
            TxnOp::Write(key, value) => {
                store.insert(key, value);
                program.complete(None);
            }
            TxnOp::Finish(action) => return action,
        }
    }
}
