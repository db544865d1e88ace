//! Message and addressing types shared by chain components, plus the context
//! trait through which components emit sends, timers, and trace records back
//! to the simulator.

use crate::logstore::{LogEntry, LogStore};
use crate::piggyback::PiggybackMessage;
use crate::trace::{EventBody, NodeId};
use crate::types::{MiddleboxId, Packet};
use crate::vclock::VectorClock;

/// Where a message is sent. Positions are resolved against the current
/// routing table at delivery time, so stale senders reach whichever node
/// holds the position after a recovery.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Address {
    Position(u16),
    Node(NodeId),
    Forwarder,
    Buffer,
    Orch,
}

/// Control-plane messages. All carry the sender's deployment epoch so fenced
/// receivers can reject stale traffic.
#[derive(Clone, Debug)]
pub enum ControlMsg {
    /// Ask a group's Head to retransmit the log range (from, to].
    Nack {
        middlebox: MiddleboxId,
        from: VectorClock,
        to: VectorClock,
        epoch: u64,
    },
    /// Reply: after applying `entries`, the requester covers everything up to
    /// `upto`; ranges at or below `pruned_below` may be snapshot-only.
    Retransmit {
        middlebox: MiddleboxId,
        entries: Vec<LogEntry>,
        upto: VectorClock,
        pruned_below: VectorClock,
        epoch: u64,
    },
    /// Recovery bulk fetch of one group's state.
    Fetch {
        middlebox: MiddleboxId,
        epoch: u64,
        attempt: u32,
        requester: NodeId,
    },
    FetchReply {
        middlebox: MiddleboxId,
        log: Box<LogStore>,
        max: VectorClock,
        epoch: u64,
        attempt: u32,
    },
    /// Buffer-to-Forwarder circulation of piggyback state.
    Feedback(PiggybackMessage),
    /// Replacement-to-orchestrator: all groups installed.
    AckRecovered { position: u16, epoch: u64 },
}

impl ControlMsg {
    pub fn kind(&self) -> &'static str {
        match self {
            ControlMsg::Nack { .. } => "nack",
            ControlMsg::Retransmit { .. } => "retransmit",
            ControlMsg::Fetch { .. } => "fetch",
            ControlMsg::FetchReply { .. } => "fetch_reply",
            ControlMsg::Feedback(_) => "feedback",
            ControlMsg::AckRecovered { .. } => "ack_recovered",
        }
    }
}

/// Timers a component can arm on itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimerKind {
    /// Drive one step of a head-side packet transaction.
    TxnStep { txn: u64 },
    /// Re-check a gated group and send a retransmission request if needed.
    NackRetry { middlebox: MiddleboxId },
    /// Re-send an unanswered recovery fetch.
    FetchRetry { middlebox: MiddleboxId },
    /// Forwarder propagation timer.
    Propagation,
}

/// Effects a component can have on the world while handling an event.
pub trait Ctx {
    fn now(&self) -> u64;
    /// Allocates a transaction id and its wound-wait timestamp from global
    /// monotone counters.
    fn alloc_txn(&mut self) -> (u64, u64);
    /// Sends a packet to this component's chain successor.
    fn forward(&mut self, packet: Packet);
    fn control(&mut self, to: Address, msg: ControlMsg);
    fn schedule(&mut self, delay: u64, timer: TimerKind);
    /// Buffer egress: hand a packet to the outside world.
    fn release(&mut self, packet: Packet);
    fn trace(&mut self, body: EventBody);
}
