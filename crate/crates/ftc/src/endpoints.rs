//! Chain ingress and egress.
//!
//! The Forwarder attaches circulated piggyback messages (received back from
//! the Buffer) to incoming traffic and keeps state flowing through idle gaps
//! with a propagation timer. The Buffer enforces output commit: a packet
//! leaves only when every state update it still depends on is covered by a
//! commit vector, i.e. replicated f+1 times.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::config::Mutation;
use crate::net::{Address, ControlMsg, Ctx, TimerKind};
use crate::piggyback::{Pcl, PiggybackLog, PiggybackMessage};
use crate::trace::{EventBody, ReleaseRecord};
use crate::types::{MiddleboxId, Packet, PacketKind};
use crate::vclock::VectorClock;

/// Id space for Forwarder-emitted propagating packets, disjoint from
/// generator-assigned data packet ids.
pub const PROPAGATING_ID_BASE: u64 = 1 << 63;

pub struct Forwarder {
    pub epoch: u64,
    queue: VecDeque<PiggybackMessage>,
    capacity: usize,
    timer_period: u64,
    last_feedback: Option<PiggybackMessage>,
    last_activity: u64,
    next_prop_id: u64,
}

impl Forwarder {
    pub fn new(epoch: u64, capacity: usize, timer_period: u64, prop_id_offset: u64) -> Self {
        assert!(capacity >= 1);
        Forwarder {
            epoch,
            queue: VecDeque::new(),
            capacity,
            timer_period,
            last_feedback: None,
            last_activity: 0,
            next_prop_id: PROPAGATING_ID_BASE + prop_id_offset,
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Chain ingress: stamp the deployment epoch, attach the oldest queued
    /// piggyback message (or an empty one), and send down the chain.
    pub fn ingress(&mut self, mut packet: Packet, ctx: &mut dyn Ctx) {
        debug_assert_eq!(packet.kind, PacketKind::Data);
        packet.epoch = self.epoch;
        packet.piggyback = Some(self.queue.pop_front().unwrap_or_default());
        self.last_activity = ctx.now();
        ctx.forward(packet);
    }

    /// Feedback from the Buffer: remember it and queue it for circulation.
    /// On overflow the two newest messages coalesce.
    pub fn on_feedback(&mut self, msg: PiggybackMessage, ctx: &mut dyn Ctx) {
        self.last_feedback = Some(msg.clone());
        if self.queue.len() == self.capacity {
            let back = self.queue.pop_back().expect("capacity >= 1");
            let merged = coalesce(back, msg);
            self.queue.push_back(merged);
            ctx.trace(EventBody::QueueCoalesced {
                depth: self.queue.len(),
            });
        } else {
            self.queue.push_back(msg);
        }
    }

    /// Propagation timer: if no ingress consumed a queued message within one
    /// period, circulate state in a propagating packet.
    pub fn on_timer(&mut self, ctx: &mut dyn Ctx) {
        let now = ctx.now();
        let deadline = self.last_activity + self.timer_period;
        if now < deadline {
            ctx.schedule(deadline - now, TimerKind::Propagation);
            return;
        }
        let msg = self
            .queue
            .pop_front()
            .or_else(|| self.last_feedback.clone())
            .unwrap_or_default();
        let packet_id = self.next_prop_id;
        self.next_prop_id += 1;
        let packet = Packet {
            flow_id: 0,
            packet_id,
            payload: Vec::new(),
            piggyback: Some(msg),
            kind: PacketKind::Propagating,
            epoch: self.epoch,
        };
        ctx.trace(EventBody::PropagatingEmitted { packet_id });
        ctx.forward(packet);
        self.last_activity = now;
        ctx.schedule(self.timer_period, TimerKind::Propagation);
    }
}

/// Merges two adjacent queued messages, per middlebox: latest value per key,
/// v1 from the earlier log, v2 from the later, commit vectors joined.
fn coalesce(earlier: PiggybackMessage, later: PiggybackMessage) -> PiggybackMessage {
    let mut out = earlier;
    for pcl in later.pcls() {
        match out.get_mut(pcl.middlebox) {
            None => out.push(pcl.clone()),
            Some(prev) => {
                prev.commit = prev.commit.merge(&pcl.commit).expect("same middlebox P");
                prev.pl = merge_pls(&prev.pl, &pcl.pl);
            }
        }
    }
    out
}

fn merge_pls(earlier: &PiggybackLog, later: &PiggybackLog) -> PiggybackLog {
    if earlier.is_empty() {
        return later.clone();
    }
    if later.is_empty() {
        return earlier.clone();
    }
    let mut updates = earlier.updates.clone();
    for (key, value) in &later.updates {
        match updates.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value.clone(),
            None => updates.push((key.clone(), value.clone())),
        }
    }
    PiggybackLog::new(updates, earlier.v1.clone(), later.v2.clone())
}

struct HeldPacket {
    packet: Packet,
    required: Vec<(MiddleboxId, VectorClock)>,
}

pub struct Buffer {
    held: Vec<HeldPacket>,
    commit_known: BTreeMap<MiddleboxId, VectorClock>,
    seen: BTreeSet<u64>,
    mutation: Option<Mutation>,
}

impl Buffer {
    pub fn new(mutation: Option<Mutation>) -> Self {
        Buffer {
            held: Vec::new(),
            commit_known: BTreeMap::new(),
            seen: BTreeSet::new(),
            mutation,
        }
    }

    pub fn held_count(&self) -> usize {
        self.held.len()
    }

    pub fn commit_known(&self, m: MiddleboxId) -> Option<&VectorClock> {
        self.commit_known.get(&m)
    }

    /// Chain egress. Commit vectors advance `commit_known`; data packets are
    /// held against the v2 of every not-yet-committed PL they carried, held
    /// packets are released FIFO per flow once covered, and the piggyback
    /// state still needing circulation goes back to the Forwarder.
    pub fn egress(&mut self, mut packet: Packet, ctx: &mut dyn Ctx) {
        let msg = packet.piggyback.take().unwrap_or_default();
        let is_data = packet.kind == PacketKind::Data;
        for pcl in msg.pcls() {
            match self.commit_known.get_mut(&pcl.middlebox) {
                Some(known) => {
                    known
                        .merge_from(&pcl.commit)
                        .expect("stable P per middlebox");
                }
                None => {
                    self.commit_known.insert(pcl.middlebox, pcl.commit.clone());
                }
            }
        }
        if is_data && self.seen.insert(packet.packet_id) {
            let required: Vec<(MiddleboxId, VectorClock)> = msg
                .pcls()
                .iter()
                .filter(|pcl| !pcl.pl.is_empty())
                .map(|pcl| (pcl.middlebox, pcl.pl.v2.clone()))
                .collect();
            if !required.is_empty() {
                ctx.trace(EventBody::Hold {
                    packet_id: packet.packet_id,
                });
            }
            self.held.push(HeldPacket { packet, required });
        }
        self.release_ready(ctx);
        if is_data && !msg.is_empty() {
            let feedback = self.build_feedback(&msg);
            ctx.trace(EventBody::FeedbackSent {
                pcls: feedback.len(),
            });
            ctx.control(Address::Forwarder, ControlMsg::Feedback(feedback));
        }
    }

    /// Propagating packets only gossip commits and trigger releases; data
    /// packets also circulate their pending piggyback logs.
    fn build_feedback(&self, msg: &PiggybackMessage) -> PiggybackMessage {
        let mut out = PiggybackMessage::empty();
        for pcl in msg.pcls() {
            let commit = self
                .commit_known
                .get(&pcl.middlebox)
                .cloned()
                .unwrap_or_else(|| VectorClock::zero(pcl.partitions()));
            let pl = if pcl.pl.is_empty() {
                PiggybackLog::empty(pcl.pl.v2.clone())
            } else {
                pcl.pl.clone()
            };
            out.push(Pcl::new(pcl.middlebox, commit, pl));
        }
        out
    }

    /// Releases every held packet whose required v2 vectors are covered by
    /// the known commits, in arrival order, never reordering within a flow.
    fn release_ready(&mut self, ctx: &mut dyn Ctx) {
        let gate_off = self.mutation == Some(Mutation::DisableBufferGate);
        let mut blocked_flows: BTreeSet<u64> = BTreeSet::new();
        let mut kept = Vec::with_capacity(self.held.len());
        for held in std::mem::take(&mut self.held) {
            let flow = held.packet.flow_id;
            let covered = gate_off
                || held.required.iter().all(|(m, v2)| {
                    self.commit_known
                        .get(m)
                        .is_some_and(|known| v2.leq(known).expect("stable P"))
                });
            if covered && !blocked_flows.contains(&flow) {
                ctx.trace(EventBody::Release(ReleaseRecord {
                    packet_id: held.packet.packet_id,
                    flow_id: flow,
                    required: held.required.clone(),
                }));
                ctx.release(held.packet);
            } else {
                blocked_flows.insert(flow);
                kept.push(held);
            }
        }
        self.held = kept;
    }
}
