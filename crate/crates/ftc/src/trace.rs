//! Structured run records. Every component reports what it did through these
//! events; the simulator hashes them in order for replay comparison, feeds
//! them to the online invariant checker, and retains the compact subset the
//! oracle and report need.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::mbox::MbAction;
use crate::types::{Key, MiddleboxId, SeqNo};
use crate::vclock::VectorClock;

pub type NodeId = u32;

/// Which component an event happened at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CompId {
    Forwarder,
    Buffer,
    Node(NodeId),
    Orch,
    Net,
}

#[derive(Clone, Debug, Serialize)]
pub struct Record {
    pub time: u64,
    pub at: CompId,
    pub body: EventBody,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum DropReason {
    Loss,
    DeadTarget,
    DeadSender,
    DecodeFailure,
}

#[derive(Clone, Debug, Serialize)]
pub enum EventBody {
    Inject {
        packet_id: u64,
        flow_id: u64,
    },
    DeliverPacket {
        packet_id: u64,
        piggyback_bytes: usize,
    },
    DeliverControl {
        kind: &'static str,
    },
    NetDrop {
        reason: DropReason,
        description: &'static str,
    },
    TxnBegin {
        packet_id: u64,
        txn: u64,
        middlebox: MiddleboxId,
    },
    TxnRetry {
        txn: u64,
        middlebox: MiddleboxId,
    },
    TxnCommit(CommitRecord),
    LogInsert {
        middlebox: MiddleboxId,
        key: Key,
        seq: SeqNo,
    },
    LogPrune {
        middlebox: MiddleboxId,
        upto: VectorClock,
    },
    MaxAdvance {
        middlebox: MiddleboxId,
        max: VectorClock,
    },
    TailStamp {
        middlebox: MiddleboxId,
        commit: VectorClock,
    },
    PclFenced {
        middlebox: MiddleboxId,
        packet_id: u64,
        packet_epoch: u64,
    },
    Parked {
        packet_id: u64,
        blocked_on: Vec<MiddleboxId>,
    },
    PendingDiscarded {
        packet_id: u64,
        middlebox: MiddleboxId,
    },
    NackSent {
        middlebox: MiddleboxId,
        from: VectorClock,
        to: VectorClock,
    },
    RetransmitServed {
        middlebox: MiddleboxId,
        entries: usize,
    },
    RetransmitApplied {
        middlebox: MiddleboxId,
        upto: VectorClock,
    },
    Hold {
        packet_id: u64,
    },
    Release(ReleaseRecord),
    FeedbackSent {
        pcls: usize,
    },
    QueueCoalesced {
        depth: usize,
    },
    PropagatingEmitted {
        packet_id: u64,
    },
    MiddleboxDrop {
        packet_id: u64,
        middlebox: MiddleboxId,
    },
    Crash,
    FailureDetected {
        position: u16,
    },
    FetchStarted {
        middlebox: MiddleboxId,
        donor: NodeId,
        attempt: u32,
    },
    FetchServed {
        middlebox: MiddleboxId,
        fence_epoch: u64,
    },
    GroupRecovered {
        middlebox: MiddleboxId,
    },
    ReplicaRecovered {
        position: u16,
    },
    Rerouted {
        epoch: u64,
    },
    EndpointRespawned {
        epoch: u64,
    },
}

/// One committed packet transaction; the oracle's unit of replay.
#[derive(Clone, Debug, Serialize)]
pub struct CommitRecord {
    pub packet_id: u64,
    pub flow_id: u64,
    pub middlebox: MiddleboxId,
    pub txn: u64,
    pub v1: VectorClock,
    pub v2: VectorClock,
    pub involved: Vec<u16>,
    /// Written keys with the seq each landed at.
    pub writes: Vec<(Key, SeqNo)>,
    pub action: MbAction,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReleaseRecord {
    pub packet_id: u64,
    pub flow_id: u64,
    /// Per-middlebox v2 this packet was gated on (non-empty PLs at arrival).
    pub required: Vec<(MiddleboxId, VectorClock)>,
}

/// A failed protocol check, with the event index it surfaced at.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub time: u64,
    pub check: &'static str,
    pub detail: String,
}

/// Streaming trace sink: hashes every record, retains the compact records
/// needed downstream, and optionally keeps or writes the full event stream.
pub struct Trace {
    hasher: Sha256,
    records: u64,
    pub commits: Vec<CommitRecord>,
    pub releases: Vec<ReleaseRecord>,
    pub retain_all: bool,
    pub events: Vec<Record>,
    sink: Option<Box<dyn std::io::Write>>,
}

impl Trace {
    pub fn new(retain_all: bool) -> Self {
        Trace {
            hasher: Sha256::new(),
            records: 0,
            commits: Vec::new(),
            releases: Vec::new(),
            retain_all,
            events: Vec::new(),
            sink: None,
        }
    }

    /// Streams every record as one JSON line to `sink`.
    pub fn with_sink(mut self, sink: Box<dyn std::io::Write>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn push(&mut self, record: Record) {
        let line = serde_json::to_string(&record).expect("trace records serialize");
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.records += 1;
        if let Some(sink) = &mut self.sink {
            let _ = writeln!(sink, "{line}");
        }
        match &record.body {
            EventBody::TxnCommit(c) => self.commits.push(c.clone()),
            EventBody::Release(r) => self.releases.push(r.clone()),
            _ => {}
        }
        if self.retain_all {
            self.events.push(record);
        }
    }

    pub fn record_count(&self) -> u64 {
        self.records
    }

    /// Hex digest over every record seen so far, in order.
    pub fn hash(&self) -> String {
        let digest = self.hasher.clone().finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

impl std::fmt::Debug for Trace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trace")
            .field("records", &self.records)
            .field("commits", &self.commits.len())
            .field("releases", &self.releases.len())
            .finish()
    }
}
