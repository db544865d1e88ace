//! The Replica runtime.
//!
//! Every chain position runs one of these: it replicates the piggybacked
//! state of the f+1 groups it belongs to (gating on MAX so logs apply in a
//! serial-equivalent order), hosts the middlebox transaction when it is a
//! group's Head, stamps commit vectors when it is a Tail, asks Heads to
//! retransmit lost ranges, prunes on circulated commits, and serves and
//! installs recovery fetches.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::{MiddleboxKind, Mutation, ReplicationMode};
use crate::logstore::{LogEntry, LogStore};
use crate::mbox::{self, MbAction, MbProgram, TxnOp};
use crate::net::{Address, ControlMsg, Ctx, TimerKind};
use crate::piggyback::{Pcl, PiggybackLog, PiggybackMessage};
use crate::trace::{EventBody, NodeId};
use crate::txn::{TxnEngine, TxnId};
use crate::types::{partition_of, MiddleboxId, Packet, PacketKind, SeqNo};
use crate::vclock::VectorClock;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeParams {
    pub nack_timeout: u64,
    pub txn_step_ticks: u64,
    pub mode: ReplicationMode,
    pub mutation: Option<Mutation>,
}

/// Replication gate: the scalar protocol tracks a single in-order counter,
/// the vector protocol a MAX clock merged from applied v2 vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Gate {
    Scalar { max: SeqNo },
    Vector { max: VectorClock },
}

impl Gate {
    fn new(mode: ReplicationMode, partitions: u16) -> Self {
        match mode {
            ReplicationMode::Scalar => {
                assert_eq!(partitions, 1);
                Gate::Scalar { max: 0 }
            }
            ReplicationMode::Vector => Gate::Vector {
                max: VectorClock::zero(partitions),
            },
        }
    }

    /// May `pl` be applied now? Scalar: its seq is at most max+1. Vector:
    /// its v1 is covered by MAX.
    pub fn passes(&self, pl: &PiggybackLog) -> bool {
        match self {
            Gate::Scalar { max } => {
                let t = pl.v2.entries()[0];
                t <= max + 1
            }
            Gate::Vector { max } => pl.v1.leq(max).expect("group P matches"),
        }
    }

    fn note_applied(&mut self, v2: &VectorClock) {
        match self {
            Gate::Scalar { max } => *max = (*max).max(v2.entries()[0]),
            Gate::Vector { max } => max.merge_from(v2).expect("group P matches"),
        }
    }

    /// After a retransmission reply, everything up to `upto` is covered.
    fn note_covered(&mut self, upto: &VectorClock) {
        self.note_applied(upto);
    }

    fn install(&mut self, from: &VectorClock) {
        match self {
            Gate::Scalar { max } => *max = from.entries()[0],
            Gate::Vector { max } => *max = from.clone(),
        }
    }

    pub fn max_vc(&self) -> VectorClock {
        match self {
            Gate::Scalar { max } => VectorClock::from_entries(vec![*max]),
            Gate::Vector { max } => max.clone(),
        }
    }
}

/// Per-group replication state at one node.
#[derive(Clone, Debug)]
pub struct GroupState {
    pub middlebox: MiddleboxId,
    pub partitions: u16,
    pub is_head: bool,
    pub is_tail: bool,
    pub head_position: u16,
    pub log: LogStore,
    pub gate: Gate,
    /// Packets from epochs below this are no longer admitted for this group.
    pub fenced_epoch: u64,
    nack_armed: bool,
    nack_backoff: u32,
}

impl GroupState {
    pub fn max_vc(&self) -> VectorClock {
        self.gate.max_vc()
    }
}

/// What a node needs to know about one group it serves.
#[derive(Clone, Debug)]
pub struct GroupSpec {
    pub middlebox: MiddleboxId,
    pub partitions: u16,
    pub is_head: bool,
    pub is_tail: bool,
    pub head_position: u16,
}

struct Session {
    program: MbProgram,
    packet: Packet,
    msg: PiggybackMessage,
    parked: bool,
}

struct HeadState {
    middlebox: MiddleboxId,
    kind: MiddleboxKind,
    partitions: u16,
    engine: TxnEngine,
    sessions: BTreeMap<TxnId, Session>,
}

struct PendingPacket {
    packet: Packet,
}

struct RecoveryState {
    epoch: u64,
    attempt: u32,
    donors: BTreeMap<MiddleboxId, NodeId>,
    done: BTreeSet<MiddleboxId>,
}

pub struct Replica {
    pub id: NodeId,
    pub position: u16,
    /// Highest deployment epoch this node has observed.
    pub epoch: u64,
    params: NodeParams,
    groups: BTreeMap<MiddleboxId, GroupState>,
    head: Option<HeadState>,
    pending: Vec<PendingPacket>,
    recovery: Option<RecoveryState>,
}

impl Replica {
    pub fn new(
        id: NodeId,
        position: u16,
        epoch: u64,
        specs: Vec<GroupSpec>,
        head: Option<(MiddleboxId, MiddleboxKind, u16)>,
        params: NodeParams,
    ) -> Self {
        let groups = specs
            .into_iter()
            .map(|s| {
                (
                    s.middlebox,
                    GroupState {
                        middlebox: s.middlebox,
                        partitions: s.partitions,
                        is_head: s.is_head,
                        is_tail: s.is_tail,
                        head_position: s.head_position,
                        log: LogStore::new(s.partitions),
                        gate: Gate::new(params.mode, s.partitions),
                        fenced_epoch: 0,
                        nack_armed: false,
                        nack_backoff: 0,
                    },
                )
            })
            .collect();
        let head = head.map(|(middlebox, kind, partitions)| HeadState {
            middlebox,
            kind,
            partitions,
            engine: match params.mode {
                ReplicationMode::Scalar => TxnEngine::new_scalar(),
                ReplicationMode::Vector => TxnEngine::new_vector(partitions),
            },
            sessions: BTreeMap::new(),
        });
        Replica {
            id,
            position,
            epoch,
            params,
            groups,
            head,
            pending: Vec::new(),
            recovery: None,
        }
    }

    pub fn groups(&self) -> impl Iterator<Item = &GroupState> {
        self.groups.values()
    }

    pub fn group(&self, m: MiddleboxId) -> Option<&GroupState> {
        self.groups.get(&m)
    }

    pub fn head_store(&self) -> Option<(&MiddleboxId, &BTreeMap<crate::types::Key, crate::types::Value>)> {
        self.head.as_ref().map(|h| (&h.middlebox, h.engine.store()))
    }

    pub fn head_frontier(&self) -> Option<VectorClock> {
        self.head.as_ref().map(|h| h.engine.frontier())
    }

    pub fn is_recovering(&self) -> bool {
        self.recovery.is_some()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn active_sessions(&self) -> usize {
        self.head.as_ref().map_or(0, |h| h.sessions.len())
    }

    fn mutated(&self, m: Mutation) -> bool {
        self.params.mutation == Some(m)
    }

    // ------------------------------------------------------------------
    // Packet path
    // ------------------------------------------------------------------

    pub fn on_packet(&mut self, mut packet: Packet, ctx: &mut dyn Ctx) {
        if self.recovery.is_some() {
            return; // not yet serving
        }
        self.epoch = self.epoch.max(packet.epoch);
        let mut msg = packet.piggyback.take().unwrap_or_default();
        let blocked = self.process_piggyback(packet.epoch, packet.packet_id, &mut msg, ctx);
        if blocked.is_empty() {
            self.proceed(packet, msg, ctx);
        } else {
            ctx.trace(EventBody::Parked {
                packet_id: packet.packet_id,
                blocked_on: blocked.iter().copied().collect(),
            });
            for m in blocked {
                self.arm_nack(m, ctx);
            }
            packet.piggyback = Some(msg);
            self.pending.push(PendingPacket { packet });
        }
        self.drain_pending(ctx);
    }

    /// Strips and processes every PCL relevant to this node: fenced PCLs are
    /// removed, appliable ones are logged and advance MAX, gated ones report
    /// the packet as blocked. Commit vectors prune regardless.
    fn process_piggyback(
        &mut self,
        packet_epoch: u64,
        packet_id: u64,
        msg: &mut PiggybackMessage,
        ctx: &mut dyn Ctx,
    ) -> BTreeSet<MiddleboxId> {
        let mut blocked = BTreeSet::new();
        let mut fenced = Vec::new();
        for pcl in msg.pcls_mut() {
            let Some(g) = self.groups.get_mut(&pcl.middlebox) else {
                continue; // unrelated middlebox: pass through untouched
            };
            if packet_epoch < g.fenced_epoch && !matches!(self.params.mutation, Some(Mutation::DisableFencing)) {
                ctx.trace(EventBody::PclFenced {
                    middlebox: pcl.middlebox,
                    packet_id,
                    packet_epoch,
                });
                fenced.push(pcl.middlebox);
                continue;
            }
            if g.is_head {
                // Own state: nothing to replicate (the Head logged at commit);
                // the circulated commit vector still drives pruning below.
            } else if !pcl.pl.is_empty() {
                let pass = matches!(self.params.mutation, Some(Mutation::DisableReplicaGate))
                    || g.gate.passes(&pcl.pl);
                if pass {
                    apply_pl(g, &pcl.pl, ctx);
                } else {
                    blocked.insert(pcl.middlebox);
                }
            }
            if !pcl.commit.is_zero() {
                g.log.prune(&pcl.commit);
                ctx.trace(EventBody::LogPrune {
                    middlebox: pcl.middlebox,
                    upto: pcl.commit.clone(),
                });
            }
        }
        msg.retain(|pcl| !fenced.contains(&pcl.middlebox));
        blocked
    }

    /// After replication: Data packets at a Head enter the middlebox
    /// transaction; everything else is finalized and forwarded directly.
    fn proceed(&mut self, packet: Packet, msg: PiggybackMessage, ctx: &mut dyn Ctx) {
        if packet.kind == PacketKind::Data && self.head.is_some() {
            let head = self.head.as_mut().expect("checked");
            let (txn, ts) = ctx.alloc_txn();
            head.engine.begin(txn, ts);
            let program = mbox::program(
                &head.kind,
                head.partitions,
                packet.flow_id,
                packet.packet_id,
            );
            ctx.trace(EventBody::TxnBegin {
                packet_id: packet.packet_id,
                txn,
                middlebox: head.middlebox,
            });
            head.sessions.insert(
                txn,
                Session {
                    program,
                    packet,
                    msg,
                    parked: false,
                },
            );
            ctx.schedule(self.params.txn_step_ticks, TimerKind::TxnStep { txn });
        } else {
            self.finalize(packet, msg, None, MbAction::Forward, ctx);
        }
    }

    /// Updates the outgoing piggyback message and forwards the packet:
    /// the Head swaps in the transaction's PL, Tails stamp their MAX as the
    /// commit vector and empty the PL, everything else passes through.
    fn finalize(
        &mut self,
        mut packet: Packet,
        mut msg: PiggybackMessage,
        produced: Option<PiggybackLog>,
        action: MbAction,
        ctx: &mut dyn Ctx,
    ) {
        if let Some(pl) = produced {
            let head = self.head.as_ref().expect("produced implies head");
            match msg.get_mut(head.middlebox) {
                Some(pcl) => pcl.pl = pl,
                None => msg.push(Pcl::new(
                    head.middlebox,
                    VectorClock::zero(head.partitions),
                    pl,
                )),
            }
        }
        let disable_tail = self.mutated(Mutation::DisableTailCommit);
        for g in self.groups.values() {
            if !g.is_tail {
                continue;
            }
            if let Some(pcl) = msg.get_mut(g.middlebox) {
                if !disable_tail {
                    pcl.commit = g.max_vc();
                    ctx.trace(EventBody::TailStamp {
                        middlebox: g.middlebox,
                        commit: pcl.commit.clone(),
                    });
                }
                pcl.pl = PiggybackLog::empty(pcl.pl.v2.clone());
            }
        }
        if action == MbAction::Drop {
            ctx.trace(EventBody::MiddleboxDrop {
                packet_id: packet.packet_id,
                middlebox: self.head.as_ref().expect("drop implies head").middlebox,
            });
            packet = packet.into_propagating();
            ctx.trace(EventBody::PropagatingEmitted {
                packet_id: packet.packet_id,
            });
        }
        packet.epoch = self.epoch.max(packet.epoch);
        packet.piggyback = Some(msg);
        ctx.forward(packet);
    }

    /// Re-examines parked packets in arrival order; applying one packet can
    /// unblock the next, so loop to a fixpoint.
    fn drain_pending(&mut self, ctx: &mut dyn Ctx) {
        loop {
            let mut progressed = false;
            let mut i = 0;
            while i < self.pending.len() {
                let still_blocked = {
                    let p = &self.pending[i];
                    let msg = p.packet.piggyback.as_ref().expect("parked with piggyback");
                    msg.pcls().iter().any(|pcl| {
                        self.groups.get(&pcl.middlebox).is_some_and(|g| {
                            !g.is_head
                                && !pcl.pl.is_empty()
                                && p.packet.epoch >= g.fenced_epoch
                                && !g.gate.passes(&pcl.pl)
                        })
                    })
                };
                if still_blocked {
                    i += 1;
                    continue;
                }
                let mut pending = self.pending.remove(i);
                let mut msg = pending.packet.piggyback.take().unwrap_or_default();
                let blocked =
                    self.process_piggyback(pending.packet.epoch, pending.packet.packet_id, &mut msg, ctx);
                debug_assert!(blocked.is_empty());
                self.proceed(pending.packet, msg, ctx);
                progressed = true;
            }
            if !progressed {
                return;
            }
        }
    }

    // ------------------------------------------------------------------
    // Transaction stepping
    // ------------------------------------------------------------------

    pub fn on_timer(&mut self, timer: TimerKind, ctx: &mut dyn Ctx) {
        match timer {
            TimerKind::TxnStep { txn } => self.txn_step(txn, ctx),
            TimerKind::NackRetry { middlebox } => self.nack_fire(middlebox, ctx),
            TimerKind::FetchRetry { middlebox } => self.fetch_retry(middlebox, ctx),
            TimerKind::Propagation => unreachable!("forwarder timer"),
        }
    }

    fn txn_step(&mut self, txn: TxnId, ctx: &mut dyn Ctx) {
        let Some(head) = self.head.as_mut() else {
            return;
        };
        if !head.sessions.contains_key(&txn) {
            return; // stale timer
        }
        if head.engine.is_wounded(txn) {
            head.engine.reset_for_retry(txn);
            let session = head.sessions.get_mut(&txn).expect("present");
            session.program.reset();
            session.parked = false;
            ctx.trace(EventBody::TxnRetry {
                txn,
                middlebox: head.middlebox,
            });
        }
        let session = head.sessions.get_mut(&txn).expect("present");
        if session.parked {
            return; // resumed by a grant, not by this stale timer
        }
        let op = session.program.current();
        let step = self.params.txn_step_ticks;
        match op {
            TxnOp::Read(key) => {
                let res = head.engine.read(txn, &key);
                let session = head.sessions.get_mut(&txn).expect("present");
                match res.access {
                    crate::txn::Access::Granted => {
                        session
                            .program
                            .complete(Some(res.value.expect("read value")));
                        ctx.schedule(step, TimerKind::TxnStep { txn });
                    }
                    crate::txn::Access::Blocked => session.parked = true,
                }
                Self::reschedule(head, &res.wounded, &res.granted, step, ctx);
            }
            TxnOp::Write(key, value) => {
                let res = head.engine.write(txn, &key, value);
                let session = head.sessions.get_mut(&txn).expect("present");
                match res.access {
                    crate::txn::Access::Granted => {
                        session.program.complete(None);
                        ctx.schedule(step, TimerKind::TxnStep { txn });
                    }
                    crate::txn::Access::Blocked => session.parked = true,
                }
                Self::reschedule(head, &res.wounded, &res.granted, step, ctx);
            }
            TxnOp::Finish(action) => self.txn_commit(txn, action, ctx),
        }
    }

    /// Wounded transactions restart and granted ones resume; both need a
    /// fresh step event if they were parked (a running transaction already
    /// has one in flight).
    fn reschedule(
        head: &mut HeadState,
        wounded: &[TxnId],
        granted: &[TxnId],
        step: u64,
        ctx: &mut dyn Ctx,
    ) {
        for &w in wounded {
            if let Some(s) = head.sessions.get_mut(&w) {
                if s.parked {
                    s.parked = false;
                    ctx.schedule(step, TimerKind::TxnStep { txn: w });
                }
            }
        }
        for &g in granted {
            if let Some(s) = head.sessions.get_mut(&g) {
                if s.parked {
                    s.parked = false;
                    ctx.schedule(step, TimerKind::TxnStep { txn: g });
                }
            }
        }
    }

    fn txn_commit(&mut self, txn: TxnId, action: MbAction, ctx: &mut dyn Ctx) {
        let head = self.head.as_mut().expect("committing at a head");
        let own = head.middlebox;
        let session = head.sessions.remove(&txn).expect("present");
        let g = self.groups.get_mut(&own).expect("own group");
        let involved_snapshot = head.engine.involved_of(txn);
        let out = head.engine.commit(txn, &mut g.log);
        for (key, _, seq) in &out.logged {
            ctx.trace(EventBody::LogInsert {
                middlebox: own,
                key: key.clone(),
                seq: *seq,
            });
        }
        if !out.pl.is_empty() {
            g.gate.note_applied(&out.pl.v2);
            ctx.trace(EventBody::MaxAdvance {
                middlebox: own,
                max: g.max_vc(),
            });
        }
        ctx.trace(EventBody::TxnCommit(crate::trace::CommitRecord {
            packet_id: session.packet.packet_id,
            flow_id: session.packet.flow_id,
            middlebox: own,
            txn,
            v1: out.pl.v1.clone(),
            v2: out.pl.v2.clone(),
            involved: involved_snapshot,
            writes: out
                .logged
                .iter()
                .map(|(k, _, seq)| (k.clone(), *seq))
                .collect(),
            action,
        }));
        Self::reschedule(head, &[], &out.granted, self.params.txn_step_ticks, ctx);
        self.finalize(session.packet, session.msg, Some(out.pl), action, ctx);
    }

    // ------------------------------------------------------------------
    // Retransmission
    // ------------------------------------------------------------------

    fn arm_nack(&mut self, m: MiddleboxId, ctx: &mut dyn Ctx) {
        let g = self.groups.get_mut(&m).expect("group");
        if !g.nack_armed {
            g.nack_armed = true;
            g.nack_backoff = 0;
            ctx.schedule(self.params.nack_timeout, TimerKind::NackRetry { middlebox: m });
        }
    }

    /// Retransmission request: everything this node is still missing for the
    /// parked packets of group `m`, addressed to the group's Head.
    fn nack_fire(&mut self, m: MiddleboxId, ctx: &mut dyn Ctx) {
        let Some(g) = self.groups.get(&m) else {
            return;
        };
        let mut needed: Option<VectorClock> = None;
        for p in &self.pending {
            let msg = p.packet.piggyback.as_ref().expect("parked with piggyback");
            if let Some(pcl) = msg.get(m) {
                if !pcl.pl.is_empty() && !g.gate.passes(&pcl.pl) {
                    needed = Some(match needed {
                        None => pcl.pl.v1.clone(),
                        Some(acc) => acc.merge(&pcl.pl.v1).expect("group P"),
                    });
                }
            }
        }
        let g = self.groups.get_mut(&m).expect("group");
        let Some(to) = needed else {
            g.nack_armed = false;
            return;
        };
        let from = g.gate.max_vc();
        ctx.trace(EventBody::NackSent {
            middlebox: m,
            from: from.clone(),
            to: to.clone(),
        });
        ctx.control(
            Address::Position(g.head_position),
            ControlMsg::Nack {
                middlebox: m,
                from,
                to,
                epoch: self.epoch,
            },
        );
        g.nack_backoff = (g.nack_backoff + 1).min(3);
        let delay = self.params.nack_timeout << g.nack_backoff;
        ctx.schedule(delay, TimerKind::NackRetry { middlebox: m });
    }

    // ------------------------------------------------------------------
    // Control plane
    // ------------------------------------------------------------------

    pub fn on_control(&mut self, from: NodeId, msg: ControlMsg, ctx: &mut dyn Ctx) {
        match msg {
            ControlMsg::Nack {
                middlebox,
                from: lo,
                to,
                epoch,
            } => self.serve_nack(from, middlebox, lo, to, epoch, ctx),
            ControlMsg::Retransmit {
                middlebox,
                entries,
                upto,
                pruned_below,
                epoch,
            } => self.apply_retransmit(middlebox, entries, upto, pruned_below, epoch, ctx),
            ControlMsg::Fetch {
                middlebox,
                epoch,
                attempt,
                requester,
            } => self.serve_fetch(middlebox, epoch, attempt, requester, ctx),
            ControlMsg::FetchReply {
                middlebox,
                log,
                max,
                epoch,
                attempt,
            } => self.install_fetched(middlebox, *log, max, epoch, attempt, ctx),
            ControlMsg::Feedback(_) | ControlMsg::AckRecovered { .. } => {
                unreachable!("endpoint/orchestrator message at a replica")
            }
        }
    }

    fn serve_nack(
        &mut self,
        requester: NodeId,
        m: MiddleboxId,
        from: VectorClock,
        to: VectorClock,
        epoch: u64,
        ctx: &mut dyn Ctx,
    ) {
        let Some(g) = self.groups.get(&m) else {
            return;
        };
        if epoch < g.fenced_epoch {
            return;
        }
        // Never claim coverage beyond this node's own MAX: a recovered Head
        // may not have seqs the dead one created but never replicated.
        let own = g.max_vc();
        let upto = VectorClock::from_entries(
            (0..g.partitions)
                .map(|p| {
                    let p = crate::types::PartitionId(p);
                    to.get(p).min(own.get(p))
                })
                .collect(),
        );
        let entries = g.log.range(&from, &upto);
        // Where the range dips below the watermark, history is gone; the
        // retained snapshots in `entries` plus this bound cover it.
        let pruned_below = VectorClock::from_entries(
            (0..g.partitions)
                .map(|p| {
                    let p = crate::types::PartitionId(p);
                    g.log.watermark().get(p).min(upto.get(p))
                })
                .collect(),
        );
        ctx.trace(EventBody::RetransmitServed {
            middlebox: m,
            entries: entries.len(),
        });
        ctx.control(
            Address::Node(requester),
            ControlMsg::Retransmit {
                middlebox: m,
                entries,
                upto,
                pruned_below,
                epoch,
            },
        );
    }

    fn apply_retransmit(
        &mut self,
        m: MiddleboxId,
        entries: Vec<LogEntry>,
        upto: VectorClock,
        pruned_below: VectorClock,
        epoch: u64,
        ctx: &mut dyn Ctx,
    ) {
        let Some(g) = self.groups.get_mut(&m) else {
            return;
        };
        if epoch < g.fenced_epoch || g.is_head {
            return;
        }
        for entry in entries {
            let key = entry.key.clone();
            let seq = entry.seq;
            if g.log.insert(entry) {
                ctx.trace(EventBody::LogInsert {
                    middlebox: m,
                    key,
                    seq,
                });
            }
        }
        g.log.merge_watermark(&pruned_below);
        g.gate.note_covered(&upto);
        ctx.trace(EventBody::RetransmitApplied {
            middlebox: m,
            upto: g.max_vc(),
        });
        self.drain_pending(ctx);
    }

    /// Serves a recovery fetch: fences the group at the recovery epoch,
    /// discards pending packets gated on it, and ships the log plus MAX.
    fn serve_fetch(
        &mut self,
        m: MiddleboxId,
        epoch: u64,
        attempt: u32,
        requester: NodeId,
        ctx: &mut dyn Ctx,
    ) {
        let Some(g) = self.groups.get_mut(&m) else {
            return;
        };
        if epoch < g.fenced_epoch {
            return; // stale recovery wave
        }
        if !matches!(self.params.mutation, Some(Mutation::DisableFencing)) {
            g.fenced_epoch = epoch;
        }
        self.epoch = self.epoch.max(epoch);
        ctx.trace(EventBody::FetchServed {
            middlebox: m,
            fence_epoch: epoch,
        });
        let g = self.groups.get(&m).expect("group");
        let reply = ControlMsg::FetchReply {
            middlebox: m,
            log: Box::new(g.log.clone()),
            max: g.max_vc(),
            epoch,
            attempt,
        };
        // Pending packets gated on the fenced group are discarded, as if lost
        // in the network.
        let gate = g.gate.clone();
        let fenced_epoch = self.groups[&m].fenced_epoch;
        let mut kept = Vec::new();
        for p in std::mem::take(&mut self.pending) {
            let msg = p.packet.piggyback.as_ref().expect("parked with piggyback");
            let discard = msg.get(m).is_some_and(|pcl| {
                !pcl.pl.is_empty() && (p.packet.epoch < fenced_epoch || !gate.passes(&pcl.pl))
            });
            if discard {
                ctx.trace(EventBody::PendingDiscarded {
                    packet_id: p.packet.packet_id,
                    middlebox: m,
                });
            } else {
                kept.push(p);
            }
        }
        self.pending = kept;
        ctx.control(Address::Node(requester), reply);
    }

    // ------------------------------------------------------------------
    // Recovery (replacement side)
    // ------------------------------------------------------------------

    /// Starts fetching every group's state from the assigned donors.
    pub fn begin_recovery(
        &mut self,
        donors: BTreeMap<MiddleboxId, NodeId>,
        epoch: u64,
        ctx: &mut dyn Ctx,
    ) {
        self.epoch = self.epoch.max(epoch);
        let state = RecoveryState {
            epoch,
            attempt: 0,
            donors: donors.clone(),
            done: BTreeSet::new(),
        };
        self.recovery = Some(state);
        for (m, donor) in donors {
            self.send_fetch(m, donor, ctx);
        }
    }

    /// The orchestrator reassigns a donor (who died mid-fetch); partial state
    /// for unfinished groups is discarded by refetching.
    pub fn redirect_fetch(&mut self, m: MiddleboxId, donor: NodeId, ctx: &mut dyn Ctx) {
        let Some(rec) = self.recovery.as_mut() else {
            return;
        };
        if rec.done.contains(&m) {
            return;
        }
        rec.attempt += 1;
        rec.donors.insert(m, donor);
        self.send_fetch(m, donor, ctx);
    }

    fn send_fetch(&mut self, m: MiddleboxId, donor: NodeId, ctx: &mut dyn Ctx) {
        let rec = self.recovery.as_ref().expect("recovering");
        ctx.trace(EventBody::FetchStarted {
            middlebox: m,
            donor,
            attempt: rec.attempt,
        });
        ctx.control(
            Address::Node(donor),
            ControlMsg::Fetch {
                middlebox: m,
                epoch: rec.epoch,
                attempt: rec.attempt,
                requester: self.id,
            },
        );
        ctx.schedule(
            self.params.nack_timeout,
            TimerKind::FetchRetry { middlebox: m },
        );
    }

    fn fetch_retry(&mut self, m: MiddleboxId, ctx: &mut dyn Ctx) {
        let Some(rec) = self.recovery.as_ref() else {
            return;
        };
        if rec.done.contains(&m) {
            return;
        }
        let donor = rec.donors[&m];
        self.send_fetch(m, donor, ctx);
    }

    /// Installs one group's fetched state. A recovered Head rebuilds its
    /// in-operation store from the newest log entry per key and floors its
    /// order matrix at the fetched MAX.
    fn install_fetched(
        &mut self,
        m: MiddleboxId,
        log: LogStore,
        max: VectorClock,
        epoch: u64,
        attempt: u32,
        ctx: &mut dyn Ctx,
    ) {
        let Some(rec) = self.recovery.as_mut() else {
            return;
        };
        if epoch != rec.epoch || attempt != rec.attempt || rec.done.contains(&m) {
            return; // stale reply from a superseded fetch
        }
        rec.done.insert(m);
        let all_done = rec.done.len() == rec.donors.len();
        let rec_epoch = rec.epoch;
        let g = self.groups.get_mut(&m).expect("group");
        g.log = log;
        g.gate.install(&max);
        if g.is_head {
            let head = self.head.as_mut().expect("head group implies head state");
            let store = g
                .log
                .latest_entries()
                .map(|(k, v, _)| (k.clone(), v.clone()))
                .collect();
            head.engine.set_store(store);
            head.engine.recover_from(&max);
        }
        ctx.trace(EventBody::GroupRecovered { middlebox: m });
        if all_done {
            self.recovery = None;
            ctx.trace(EventBody::ReplicaRecovered {
                position: self.position,
            });
            ctx.control(
                Address::Orch,
                ControlMsg::AckRecovered {
                    position: self.position,
                    epoch: rec_epoch,
                },
            );
        }
    }
}

fn apply_pl(g: &mut GroupState, pl: &PiggybackLog, ctx: &mut dyn Ctx) {
    for (key, value) in &pl.updates {
        let p = partition_of(key, g.partitions);
        let seq = pl.v2.get(p);
        let entry = LogEntry::new(key.clone(), value.clone(), seq, g.partitions);
        if g.log.insert(entry) {
            ctx.trace(EventBody::LogInsert {
                middlebox: g.middlebox,
                key: key.clone(),
                seq,
            });
        }
    }
    g.gate.note_applied(&pl.v2);
    ctx.trace(EventBody::MaxAdvance {
        middlebox: g.middlebox,
        max: g.max_vc(),
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Key, Value};

    #[derive(Default)]
    struct TestCtx {
        now: u64,
        txn: u64,
        seq: usize,
        forwarded: Vec<Packet>,
        controls: Vec<(Address, ControlMsg)>,
        timers: Vec<(u64, usize, TimerKind)>,
        events: Vec<EventBody>,
    }

    impl TestCtx {
        fn pop_timer(&mut self) -> Option<(u64, TimerKind)> {
            if self.timers.is_empty() {
                return None;
            }
            let idx = self
                .timers
                .iter()
                .enumerate()
                .min_by_key(|(_, &(t, s, _))| (t, s))
                .map(|(i, _)| i)
                .expect("non-empty");
            let (t, _, k) = self.timers.remove(idx);
            Some((t, k))
        }
    }

    impl Ctx for TestCtx {
        fn now(&self) -> u64 {
            self.now
        }
        fn alloc_txn(&mut self) -> (u64, u64) {
            self.txn += 1;
            (self.txn, self.txn)
        }
        fn forward(&mut self, packet: Packet) {
            self.forwarded.push(packet);
        }
        fn control(&mut self, to: Address, msg: ControlMsg) {
            self.controls.push((to, msg));
        }
        fn schedule(&mut self, delay: u64, timer: TimerKind) {
            self.seq += 1;
            self.timers.push((self.now + delay, self.seq, timer));
        }
        fn release(&mut self, _packet: Packet) {
            unreachable!("replicas never release")
        }
        fn trace(&mut self, body: EventBody) {
            self.events.push(body);
        }
    }

    /// Run all scheduled timers (transaction steps, retries) to completion.
    fn drive(node: &mut Replica, ctx: &mut TestCtx) {
        while let Some((t, kind)) = ctx.pop_timer() {
            ctx.now = t;
            node.on_timer(kind, ctx);
        }
    }

    fn params() -> NodeParams {
        NodeParams {
            nack_timeout: 500,
            txn_step_ticks: 1,
            mode: ReplicationMode::Vector,
            mutation: None,
        }
    }

    fn vc(entries: &[u64]) -> VectorClock {
        VectorClock::from_entries(entries.to_vec())
    }

    fn member_only(m: u16, head_position: u16) -> Replica {
        Replica::new(
            9,
            head_position + 1,
            1,
            vec![GroupSpec {
                middlebox: MiddleboxId(m),
                partitions: 1,
                is_head: false,
                is_tail: true,
                head_position,
            }],
            None,
            params(),
        )
    }

    fn pl_write(key: &str, val: u64, v1: &[u64], v2: &[u64]) -> PiggybackLog {
        PiggybackLog::new(
            vec![(Key::from(key), Value::from_u64(val))],
            vc(v1),
            vc(v2),
        )
    }

    fn packet_with(m: u16, commit: &[u64], pl: PiggybackLog, id: u64) -> Packet {
        let mut p = Packet::data(1, id, vec![]);
        p.epoch = 1;
        p.piggyback = Some(PiggybackMessage::from_pcls(vec![Pcl::new(
            MiddleboxId(m),
            vc(commit),
            pl,
        )]));
        p
    }

    #[test]
    fn in_order_pl_is_logged_and_advances_max() {
        let mut ctx = TestCtx::default();
        let mut node = member_only(2, 2);
        node.on_packet(packet_with(2, &[0], pl_write("k", 7, &[0], &[1]), 1), &mut ctx);
        let g = node.group(MiddleboxId(2)).unwrap();
        assert_eq!(g.max_vc(), vc(&[1]));
        assert_eq!(g.log.latest(&Key::from("k")), Some((&Value::from_u64(7), 1)));
        assert_eq!(ctx.forwarded.len(), 1);
        assert_eq!(node.pending_count(), 0);
    }

    #[test]
    fn gated_packet_parks_then_drains_after_retransmission() {
        let mut ctx = TestCtx::default();
        let mut node = member_only(2, 2);
        // v1=[1] > MAX=[0]: parked, a NACK timer armed.
        node.on_packet(packet_with(2, &[0], pl_write("k", 9, &[1], &[2]), 1), &mut ctx);
        assert_eq!(node.pending_count(), 1);
        assert!(ctx.forwarded.is_empty());
        // Timer fires: NACK(from=MAX=[0], to=v1=[1]) to the head's position.
        drive_nack_only(&mut node, &mut ctx);
        let (to, msg) = ctx.controls.first().expect("nack sent");
        assert_eq!(*to, Address::Position(2));
        let ControlMsg::Nack { from, to: hi, .. } = msg else {
            panic!("expected nack, got {msg:?}");
        };
        assert_eq!((from.clone(), hi.clone()), (vc(&[0]), vc(&[1])));
        // Retransmission fills seq 1: pending drains, MAX = [2].
        node.on_control(
            0,
            ControlMsg::Retransmit {
                middlebox: MiddleboxId(2),
                entries: vec![LogEntry::new(Key::from("j"), Value::from_u64(1), 1, 1)],
                upto: vc(&[1]),
                pruned_below: vc(&[0]),
                epoch: 1,
            },
            &mut ctx,
        );
        assert_eq!(node.pending_count(), 0);
        assert_eq!(ctx.forwarded.len(), 1);
        let g = node.group(MiddleboxId(2)).unwrap();
        assert_eq!(g.max_vc(), vc(&[2]));
        assert_eq!(g.log.latest(&Key::from("k")), Some((&Value::from_u64(9), 2)));
    }

    fn drive_nack_only(node: &mut Replica, ctx: &mut TestCtx) {
        let (t, kind) = ctx.pop_timer().expect("nack timer armed");
        ctx.now = t;
        node.on_timer(kind, ctx);
    }

    #[test]
    fn empty_pl_passes_through_untouched() {
        let mut ctx = TestCtx::default();
        let mut node = member_only(2, 2);
        // Empty PL positioned far ahead of MAX: no park, no merge, no log.
        node.on_packet(
            packet_with(2, &[0], PiggybackLog::empty(vc(&[5])), 1),
            &mut ctx,
        );
        let g = node.group(MiddleboxId(2)).unwrap();
        assert_eq!(g.max_vc(), vc(&[0]));
        assert_eq!(g.log.entry_count(), 0);
        assert_eq!(node.pending_count(), 0);
        assert_eq!(ctx.forwarded.len(), 1);
    }

    #[test]
    fn duplicate_delivery_is_idempotent() {
        let mut ctx = TestCtx::default();
        let mut node = member_only(2, 2);
        let p = packet_with(2, &[0], pl_write("k", 7, &[0], &[1]), 1);
        node.on_packet(p.clone(), &mut ctx);
        node.on_packet(p, &mut ctx);
        let g = node.group(MiddleboxId(2)).unwrap();
        assert_eq!(g.max_vc(), vc(&[1]));
        assert_eq!(g.log.entry_count(), 1);
        assert_eq!(ctx.forwarded.len(), 2);
    }

    /// r1 in a chain of n=2, f=1: Head of m1, Tail of m2.
    fn r1_n2_f1(kind: MiddleboxKind) -> Replica {
        Replica::new(
            1,
            1,
            1,
            vec![
                GroupSpec {
                    middlebox: MiddleboxId(1),
                    partitions: 1,
                    is_head: true,
                    is_tail: false,
                    head_position: 1,
                },
                GroupSpec {
                    middlebox: MiddleboxId(2),
                    partitions: 1,
                    is_head: false,
                    is_tail: true,
                    head_position: 2,
                },
            ],
            Some((MiddleboxId(1), kind, 1)),
            params(),
        )
    }

    #[test]
    fn head_and_tail_roles_compose_on_one_packet() {
        let mut ctx = TestCtx::default();
        let mut node = r1_n2_f1(MiddleboxKind::Monitor { sharing_level: 1 });
        // Incoming packet circulates m2 state: a pending PL plus no commit.
        let mut p = Packet::data(1, 1, vec![0xAB]);
        p.epoch = 1;
        p.piggyback = Some(PiggybackMessage::from_pcls(vec![Pcl::new(
            MiddleboxId(2),
            vc(&[0]),
            pl_write("nat:1", 3, &[0], &[1]),
        )]));
        node.on_packet(p, &mut ctx);
        drive(&mut node, &mut ctx);
        let out = ctx.forwarded.pop().expect("forwarded");
        let msg = out.piggyback.as_ref().unwrap();
        // Own middlebox: fresh PL from the monitor transaction.
        let m1 = msg.get(MiddleboxId(1)).unwrap();
        assert!(!m1.pl.is_empty());
        assert_eq!(m1.pl.v2, vc(&[1]));
        assert_eq!(m1.pl.updates.len(), 2); // flow counter + shared counter
        // Tail of m2: replicated the PL, stamped commit = MAX, emptied it.
        let m2 = msg.get(MiddleboxId(2)).unwrap();
        assert_eq!(m2.commit, vc(&[1]));
        assert!(m2.pl.is_empty());
        let g2 = node.group(MiddleboxId(2)).unwrap();
        assert_eq!(g2.log.latest(&Key::from("nat:1")), Some((&Value::from_u64(3), 1)));
        // Own group logged the monitor writes at the head.
        let g1 = node.group(MiddleboxId(1)).unwrap();
        assert_eq!(g1.log.latest(&Key::from("flow:1")).unwrap().1, 1);
    }

    #[test]
    fn firewall_drop_emits_propagating_packet() {
        let mut ctx = TestCtx::default();
        let mut node = r1_n2_f1(MiddleboxKind::Firewall {
            block_flows: vec![9],
        });
        let mut p = Packet::data(9, 77, vec![0xAB]);
        p.epoch = 1;
        node.on_packet(p, &mut ctx);
        drive(&mut node, &mut ctx);
        let out = ctx.forwarded.pop().expect("forwarded");
        assert_eq!(out.kind, PacketKind::Propagating);
        assert_eq!(out.packet_id, 77);
        assert!(out.payload.is_empty());
        // The firewall's own PCL is present with an empty PL.
        let m1 = out.piggyback.as_ref().unwrap().get(MiddleboxId(1)).unwrap();
        assert!(m1.pl.is_empty());
        // Unblocked flows pass through as data.
        let mut p = Packet::data(8, 78, vec![0xAB]);
        p.epoch = 1;
        node.on_packet(p, &mut ctx);
        drive(&mut node, &mut ctx);
        assert_eq!(ctx.forwarded.pop().unwrap().kind, PacketKind::Data);
    }

    #[test]
    fn propagating_packets_skip_the_middlebox() {
        let mut ctx = TestCtx::default();
        let mut node = r1_n2_f1(MiddleboxKind::Monitor { sharing_level: 1 });
        let mut p = Packet {
            flow_id: 0,
            packet_id: crate::endpoints::PROPAGATING_ID_BASE,
            payload: Vec::new(),
            piggyback: Some(PiggybackMessage::empty()),
            kind: PacketKind::Propagating,
            epoch: 1,
        };
        p.piggyback = Some(PiggybackMessage::from_pcls(vec![Pcl::new(
            MiddleboxId(2),
            vc(&[0]),
            pl_write("k", 1, &[0], &[1]),
        )]));
        node.on_packet(p, &mut ctx);
        assert_eq!(node.active_sessions(), 0);
        let out = ctx.forwarded.pop().expect("forwarded immediately");
        assert_eq!(out.kind, PacketKind::Propagating);
        // Replication still happened.
        assert_eq!(node.group(MiddleboxId(2)).unwrap().max_vc(), vc(&[1]));
    }

    #[test]
    fn retransmit_reply_is_idempotent_after_gap_filled() {
        let mut ctx = TestCtx::default();
        let mut node = member_only(2, 2);
        node.on_packet(packet_with(2, &[0], pl_write("a", 1, &[0], &[1]), 1), &mut ctx);
        node.on_packet(packet_with(2, &[0], pl_write("a", 2, &[1], &[2]), 2), &mut ctx);
        let before_entries = node.group(MiddleboxId(2)).unwrap().log.entry_count();
        // A stale reply for an already-filled range changes nothing.
        node.on_control(
            0,
            ControlMsg::Retransmit {
                middlebox: MiddleboxId(2),
                entries: vec![LogEntry::new(Key::from("a"), Value::from_u64(1), 1, 1)],
                upto: vc(&[1]),
                pruned_below: vc(&[0]),
                epoch: 1,
            },
            &mut ctx,
        );
        let g = node.group(MiddleboxId(2)).unwrap();
        assert_eq!(g.log.entry_count(), before_entries);
        assert_eq!(g.max_vc(), vc(&[2]));
    }

    #[test]
    fn head_serves_nack_and_caps_at_its_coverage() {
        let mut ctx = TestCtx::default();
        let mut head = r1_n2_f1(MiddleboxKind::Gen { state_size: 8 });
        // Two committed packets at the head.
        for (flow, id) in [(1u64, 1u64), (2, 2)] {
            let mut p = Packet::data(flow, id, vec![0]);
            p.epoch = 1;
            node_ingest(&mut head, p, &mut ctx);
        }
        ctx.controls.clear();
        // A follower asks for (0, 2].
        head.on_control(
            9,
            ControlMsg::Nack {
                middlebox: MiddleboxId(1),
                from: vc(&[0]),
                to: vc(&[2]),
                epoch: 1,
            },
            &mut ctx,
        );
        let (to, msg) = ctx.controls.pop().expect("reply");
        assert_eq!(to, Address::Node(9));
        let ControlMsg::Retransmit { entries, upto, .. } = msg else {
            panic!("expected retransmit");
        };
        assert_eq!(entries.len(), 2);
        assert_eq!(upto, vc(&[2]));
    }

    fn node_ingest(node: &mut Replica, p: Packet, ctx: &mut TestCtx) {
        node.on_packet(p, ctx);
        drive(node, ctx);
    }

    #[test]
    fn pruned_range_is_served_as_snapshots() {
        let mut ctx = TestCtx::default();
        let mut head = r1_n2_f1(MiddleboxKind::Gen { state_size: 8 });
        // Gen writes gen:<flow mod 16> per packet: same flow = same key.
        for id in 1..=3u64 {
            let mut p = Packet::data(4, id, vec![0]);
            p.epoch = 1;
            node_ingest(&mut head, p, &mut ctx);
        }
        // Commit vector [2] circulates back: head prunes below it.
        let mut p = Packet::data(4, 10, vec![0]);
        p.epoch = 1;
        p.piggyback = Some(PiggybackMessage::from_pcls(vec![Pcl::new(
            MiddleboxId(1),
            vc(&[2]),
            PiggybackLog::empty(vc(&[2])),
        )]));
        node_ingest(&mut head, p, &mut ctx);
        ctx.controls.clear();
        head.on_control(
            9,
            ControlMsg::Nack {
                middlebox: MiddleboxId(1),
                from: vc(&[0]),
                to: vc(&[2]),
                epoch: 1,
            },
            &mut ctx,
        );
        let ControlMsg::Retransmit {
            entries,
            upto,
            pruned_below,
            ..
        } = &ctx.controls.pop().expect("reply").1
        else {
            panic!("expected retransmit");
        };
        // Seqs 1 and 2 were pruned (latest is 4 after the commit circled);
        // the reply covers the range with the pruned-below bound.
        assert_eq!(*upto, vc(&[2]));
        assert_eq!(*pruned_below, vc(&[2]));
        // A fresh member adopts the reply: coverage claimed, then later
        // traffic applies normally and final values match the head's.
        let mut member = member_only(1, 1);
        member.on_control(
            0,
            ControlMsg::Retransmit {
                middlebox: MiddleboxId(1),
                entries: entries.clone(),
                upto: upto.clone(),
                pruned_below: pruned_below.clone(),
                epoch: 1,
            },
            &mut ctx,
        );
        let g = member.group(MiddleboxId(1)).unwrap();
        assert_eq!(g.max_vc(), vc(&[2]));
        assert!(g.log.watermark().entries()[0] >= 2);
    }

    #[test]
    fn fetch_fences_and_is_idempotent() {
        let mut ctx = TestCtx::default();
        let mut node = member_only(2, 2);
        node.on_packet(packet_with(2, &[0], pl_write("k", 7, &[0], &[1]), 1), &mut ctx);
        // Fetch at recovery epoch 2: fences and returns the snapshot.
        node.on_control(
            0,
            ControlMsg::Fetch {
                middlebox: MiddleboxId(2),
                epoch: 2,
                attempt: 0,
                requester: 42,
            },
            &mut ctx,
        );
        let (to, reply) = ctx.controls.pop().expect("fetch reply");
        assert_eq!(to, Address::Node(42));
        let ControlMsg::FetchReply { log, max, .. } = reply else {
            panic!("expected reply");
        };
        assert_eq!(max, vc(&[1]));
        assert_eq!(log.latest(&Key::from("k")).unwrap().1, 1);
        // Stale-epoch packets now have their PCL ignored and stripped.
        node.on_packet(packet_with(2, &[0], pl_write("x", 1, &[1], &[2]), 2), &mut ctx);
        let g = node.group(MiddleboxId(2)).unwrap();
        assert_eq!(g.max_vc(), vc(&[1]));
        let out = ctx.forwarded.pop().expect("forwarded stripped");
        assert!(out.piggyback.as_ref().unwrap().get(MiddleboxId(2)).is_none());
        // Double fetch at the same epoch: identical snapshot, no side effects.
        node.on_control(
            0,
            ControlMsg::Fetch {
                middlebox: MiddleboxId(2),
                epoch: 2,
                attempt: 1,
                requester: 42,
            },
            &mut ctx,
        );
        let ControlMsg::FetchReply { log: log2, .. } = ctx.controls.pop().unwrap().1 else {
            panic!("expected reply");
        };
        assert_eq!(log, log2);
        // A stale-epoch fetch is rejected outright.
        node.on_control(
            0,
            ControlMsg::Fetch {
                middlebox: MiddleboxId(2),
                epoch: 1,
                attempt: 0,
                requester: 42,
            },
            &mut ctx,
        );
        assert!(ctx.controls.is_empty());
        // New-epoch packets are admitted again.
        let mut p = packet_with(2, &[0], pl_write("x", 1, &[1], &[2]), 3);
        p.epoch = 2;
        node.on_packet(p, &mut ctx);
        assert_eq!(node.group(MiddleboxId(2)).unwrap().max_vc(), vc(&[2]));
    }

    #[test]
    fn fetch_discards_pending_gated_packets() {
        let mut ctx = TestCtx::default();
        let mut node = member_only(2, 2);
        node.on_packet(packet_with(2, &[0], pl_write("k", 9, &[3], &[4]), 1), &mut ctx);
        assert_eq!(node.pending_count(), 1);
        node.on_control(
            0,
            ControlMsg::Fetch {
                middlebox: MiddleboxId(2),
                epoch: 2,
                attempt: 0,
                requester: 42,
            },
            &mut ctx,
        );
        assert_eq!(node.pending_count(), 0);
        assert!(ctx
            .events
            .iter()
            .any(|e| matches!(e, EventBody::PendingDiscarded { packet_id: 1, .. })));
    }

    #[test]
    fn recovered_head_rebuilds_store_and_matrix() {
        let mut ctx = TestCtx::default();
        // Build a donor log with history for two keys.
        let mut donor_log = LogStore::new(1);
        donor_log.insert(LogEntry::new(Key::from("gen:4"), Value::from_u64(1), 1, 1));
        donor_log.insert(LogEntry::new(Key::from("gen:4"), Value::from_u64(2), 3, 1));
        donor_log.insert(LogEntry::new(Key::from("gen:5"), Value::from_u64(5), 2, 1));
        let mut node = Replica::new(
            7,
            1,
            2,
            vec![GroupSpec {
                middlebox: MiddleboxId(1),
                partitions: 1,
                is_head: true,
                is_tail: false,
                head_position: 1,
            }],
            Some((MiddleboxId(1), MiddleboxKind::Gen { state_size: 8 }, 1)),
            params(),
        );
        node.begin_recovery([(MiddleboxId(1), 3)].into(), 2, &mut ctx);
        assert!(node.is_recovering());
        node.on_control(
            3,
            ControlMsg::FetchReply {
                middlebox: MiddleboxId(1),
                log: Box::new(donor_log),
                max: vc(&[3]),
                epoch: 2,
                attempt: 0,
            },
            &mut ctx,
        );
        assert!(!node.is_recovering());
        // In-operation state = newest value per key.
        let (_, store) = node.head_store().unwrap();
        assert_eq!(store.get(&Key::from("gen:4")), Some(&Value::from_u64(2)));
        assert_eq!(store.get(&Key::from("gen:5")), Some(&Value::from_u64(5)));
        // The matrix resumes above the fetched MAX and the ack went out.
        assert_eq!(node.head_frontier().unwrap(), vc(&[3]));
        assert!(ctx
            .controls
            .iter()
            .any(|(to, msg)| *to == Address::Orch
                && matches!(msg, ControlMsg::AckRecovered { position: 1, epoch: 2 })));
        // Sequencing continues above the recovered floor.
        let mut p = Packet::data(4, 50, vec![0]);
        p.epoch = 2;
        node_ingest(&mut node, p, &mut ctx);
        let out = ctx.forwarded.pop().unwrap();
        let pl = &out.piggyback.as_ref().unwrap().get(MiddleboxId(1)).unwrap().pl;
        assert_eq!(pl.v1, vc(&[3]));
        assert_eq!(pl.v2, vc(&[4]));
    }

    #[test]
    fn stale_fetch_reply_is_ignored_after_redirect() {
        let mut ctx = TestCtx::default();
        let mut node = member_only(2, 2);
        node.begin_recovery([(MiddleboxId(2), 3)].into(), 2, &mut ctx);
        node.redirect_fetch(MiddleboxId(2), 4, &mut ctx);
        // Reply from the superseded attempt: dropped.
        node.on_control(
            3,
            ControlMsg::FetchReply {
                middlebox: MiddleboxId(2),
                log: Box::new(LogStore::new(1)),
                max: vc(&[9]),
                epoch: 2,
                attempt: 0,
            },
            &mut ctx,
        );
        assert!(node.is_recovering());
        // Reply from the new donor installs.
        node.on_control(
            4,
            ControlMsg::FetchReply {
                middlebox: MiddleboxId(2),
                log: Box::new(LogStore::new(1)),
                max: vc(&[0]),
                epoch: 2,
                attempt: 1,
            },
            &mut ctx,
        );
        assert!(!node.is_recovering());
    }
}
