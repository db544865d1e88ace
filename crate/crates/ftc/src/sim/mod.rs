//! Deterministic discrete-event network simulator.
//!
//! A run is a pure function of (chain config, workload, fault plan): events
//! are processed in (time, sequence) order, all randomness flows from one
//! seeded generator, and the trace hash lets two runs be compared bit for
//! bit. Links lose, delay, and duplicate messages; crashes freeze nodes in
//! place (their logs stay visible to the checker); the orchestrator drives
//! recovery through the same event queue.

pub mod checker;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::config::{ChainConfig, CrashEvent, CrashTarget, FaultPlan, Workload};
use crate::endpoints::{Buffer, Forwarder};
use crate::net::{Address, ControlMsg, Ctx, TimerKind};
use crate::node::{NodeParams, Replica};
use crate::orch::{self, OrchAction, Orchestrator};
use crate::trace::{
    CommitRecord, CompId, DropReason, EventBody, NodeId, Record, ReleaseRecord, Trace, Violation,
};
use crate::types::{Key, MiddleboxId, Packet, SeqNo, Value};
use crate::vclock::VectorClock;

use checker::{Checker, WorldRefs};

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Loc {
    Forwarder,
    Buffer,
    Node(NodeId),
}

#[derive(Debug)]
enum Msg {
    Packet(Packet),
    Control { from: NodeId, msg: ControlMsg },
}

#[derive(Debug)]
enum Action {
    Inject(Packet),
    Deliver { to: Address, msg: Msg },
    Timer { at: Loc, gen: u32, kind: TimerKind },
    Crash(CrashTarget),
    Detect { target: CrashTarget, dead: NodeId },
}

struct Event {
    time: u64,
    seq: u64,
    action: Action,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

// ---------------------------------------------------------------------------
// Run options and outcome
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CheckMode {
    /// Incremental checks after every event plus a final scan.
    #[default]
    All,
    /// Final scan only.
    Final,
    Off,
}

pub struct RunOptions {
    pub check: CheckMode,
    pub stop_on_violation: bool,
    pub retain_events: bool,
    /// Hard stop, in ticks. The run also ends early once quiescent.
    pub horizon: u64,
    pub sink: Option<Box<dyn std::io::Write>>,
}

impl RunOptions {
    pub fn standard(cfg: &ChainConfig, workload: &Workload, faults: &FaultPlan) -> Self {
        RunOptions {
            check: CheckMode::All,
            stop_on_violation: true,
            retain_events: false,
            horizon: default_horizon(cfg, workload, faults),
            sink: None,
        }
    }
}

/// Injection end plus a generous drain window.
pub fn default_horizon(cfg: &ChainConfig, workload: &Workload, faults: &FaultPlan) -> u64 {
    let inject_end = workload.start_spread
        + workload.packets_per_flow.max(1) * workload.inter_arrival
        + workload.flows;
    let last_fault = faults.crashes.iter().map(|c| c.time).max().unwrap_or(0);
    let drain = 60 * cfg.timer_period
        + 40 * cfg.link.latency_max
        + 20 * cfg.nack_timeout
        + 10 * cfg.detection_delay;
    inject_end.max(last_fault) + drain
}

/// Per-(node, middlebox) view of a log store at run end.
#[derive(Clone, Debug)]
pub struct LogSummary {
    pub latest: BTreeMap<Key, (Value, SeqNo)>,
    pub max: VectorClock,
    pub position: u16,
    pub alive: bool,
}

#[derive(Clone, Debug, Default)]
pub struct FinalState {
    /// In-operation stores of the live Heads.
    pub heads: BTreeMap<MiddleboxId, BTreeMap<Key, Value>>,
    pub frontiers: BTreeMap<MiddleboxId, VectorClock>,
    pub logs: BTreeMap<(NodeId, MiddleboxId), LogSummary>,
    pub routing: BTreeMap<u16, NodeId>,
    pub buffer_held: usize,
}

#[derive(Clone, Debug, Default)]
pub struct RecoveryRecord {
    pub position: u16,
    pub crash_time: u64,
    pub detect_time: u64,
    pub rerouted_time: u64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub trace_hash: String,
    pub commits: Vec<CommitRecord>,
    pub releases: Vec<ReleaseRecord>,
    pub events: Vec<Record>,
    pub violations: Vec<Violation>,
    pub injected: u64,
    pub released: u64,
    pub piggyback_bytes_total: u64,
    pub piggyback_messages: u64,
    pub recoveries: Vec<RecoveryRecord>,
    pub final_state: FinalState,
    pub end_time: u64,
    pub quiesced: bool,
    pub record_count: u64,
}

impl RunOutcome {
    pub fn mean_piggyback_bytes(&self) -> f64 {
        if self.piggyback_messages == 0 {
            0.0
        } else {
            self.piggyback_bytes_total as f64 / self.piggyback_messages as f64
        }
    }

    /// Packets forwarded (not dropped) by every middlebox they traversed.
    pub fn forwarded_per_middlebox(&self) -> BTreeMap<MiddleboxId, u64> {
        let mut out = BTreeMap::new();
        for c in &self.commits {
            if c.action == crate::mbox::MbAction::Forward {
                *out.entry(c.middlebox).or_insert(0) += 1;
            }
        }
        out
    }

    pub fn recovery_ticks(&self) -> u64 {
        self.recoveries
            .iter()
            .filter(|r| r.rerouted_time > 0)
            .map(|r| r.rerouted_time - r.detect_time)
            .max()
            .unwrap_or(0)
    }
}

/// Deterministic injection schedule: (time, flow_id, packet_id), sorted.
pub fn traffic_schedule(workload: &Workload, seed: u64) -> Vec<(u64, u64, u64)> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x7261_6666_6963_5f21);
    let mut schedule = Vec::with_capacity(workload.total_packets() as usize);
    for flow in 1..=workload.flows {
        let start = if workload.start_spread > 0 {
            rng.gen_range(0..workload.start_spread)
        } else {
            0
        };
        for i in 0..workload.packets_per_flow {
            let time = start + i * workload.inter_arrival;
            let packet_id = (flow - 1) * workload.packets_per_flow + i + 1;
            schedule.push((time, flow, packet_id));
        }
    }
    schedule.sort();
    schedule
}

// ---------------------------------------------------------------------------
// The world
// ---------------------------------------------------------------------------

struct Shared {
    now: u64,
    seq: u64,
    busy_events: u64, // non-timer events still queued
    queue: BinaryHeap<Reverse<Event>>,
    rng: ChaCha12Rng,
    trace: Trace,
    delta: Vec<(CompId, EventBody)>,
    txn_counter: u64,
    released: u64,
    injected: u64,
    pb_bytes: u64,
    pb_msgs: u64,
    link: crate::config::LinkConfig,
    n_eff: u16,
    fwd_gen: u32,
    buf_gen: u32,
}

impl Shared {
    fn push(&mut self, time: u64, action: Action) {
        if !matches!(action, Action::Timer { .. }) {
            self.busy_events += 1;
        }
        self.seq += 1;
        self.queue.push(Reverse(Event {
            time,
            seq: self.seq,
            action,
        }));
    }

    fn trace_at(&mut self, at: CompId, body: EventBody) {
        self.delta.push((at, body.clone()));
        self.trace.push(Record {
            time: self.now,
            at,
            body,
        });
    }

    fn latency(&mut self) -> u64 {
        self.rng.gen_range(self.link.latency_min..=self.link.latency_max)
    }

    /// Applies loss/latency/duplication and queues deliveries. Control
    /// traffic to and from the orchestrator is reliable.
    fn transmit(&mut self, to: Address, msg: Msg) {
        let reliable = matches!(to, Address::Orch);
        if let Msg::Packet(p) = &msg {
            if let Some(pb) = &p.piggyback {
                self.pb_bytes += pb.encoded_len() as u64;
                self.pb_msgs += 1;
            }
        }
        if !reliable && self.link.loss > 0.0 && self.rng.gen_bool(self.link.loss) {
            self.trace_at(
                CompId::Net,
                EventBody::NetDrop {
                    reason: DropReason::Loss,
                    description: describe(&msg),
                },
            );
            return;
        }
        let delay = self.latency();
        let duplicate = !reliable
            && self.link.duplicate > 0.0
            && self.rng.gen_bool(self.link.duplicate);
        let copy = duplicate.then(|| (self.latency(), clone_msg(&msg)));
        self.push(self.now + delay, Action::Deliver { to, msg });
        if let Some((extra_delay, msg)) = copy {
            self.push(self.now + extra_delay, Action::Deliver { to, msg });
        }
    }
}

fn describe(msg: &Msg) -> &'static str {
    match msg {
        Msg::Packet(_) => "packet",
        Msg::Control { msg, .. } => msg.kind(),
    }
}

fn clone_msg(msg: &Msg) -> Msg {
    match msg {
        Msg::Packet(p) => Msg::Packet(p.clone()),
        Msg::Control { from, msg } => Msg::Control {
            from: *from,
            msg: msg.clone(),
        },
    }
}

/// Per-dispatch context handed to the component being driven.
struct SimCtx<'a> {
    shared: &'a mut Shared,
    at: CompId,
    src: Loc,
    /// Chain position of `src` when it is a replica (successor routing).
    src_position: u16,
}

impl Ctx for SimCtx<'_> {
    fn now(&self) -> u64 {
        self.shared.now
    }

    fn alloc_txn(&mut self) -> (u64, u64) {
        self.shared.txn_counter += 1;
        (self.shared.txn_counter, self.shared.txn_counter)
    }

    fn forward(&mut self, packet: Packet) {
        let to = match self.src {
            Loc::Forwarder => Address::Position(1),
            Loc::Node(_) => {
                if self.src_position == self.shared.n_eff {
                    Address::Buffer
                } else {
                    Address::Position(self.src_position + 1)
                }
            }
            _ => unreachable!("only the data path forwards packets"),
        };
        self.shared.transmit(to, Msg::Packet(packet));
    }

    fn control(&mut self, to: Address, msg: ControlMsg) {
        let from = match self.src {
            Loc::Node(id) => id,
            _ => 0,
        };
        self.shared.transmit(to, Msg::Control { from, msg });
    }

    fn schedule(&mut self, delay: u64, timer: TimerKind) {
        let gen = match self.src {
            Loc::Forwarder => self.shared.fwd_gen,
            Loc::Buffer => self.shared.buf_gen,
            _ => 0,
        };
        self.shared.push(
            self.shared.now + delay,
            Action::Timer {
                at: self.src,
                gen,
                kind: timer,
            },
        );
    }

    fn release(&mut self, _packet: Packet) {
        self.shared.released += 1;
    }

    fn trace(&mut self, body: EventBody) {
        self.shared.trace_at(self.at, body);
    }
}

struct World {
    cfg: ChainConfig,
    shared: Shared,
    nodes: BTreeMap<NodeId, Replica>,
    dead: BTreeSet<NodeId>,
    routing: BTreeMap<u16, NodeId>,
    holders: BTreeMap<u16, Vec<NodeId>>,
    forwarder: Forwarder,
    fwd_alive: bool,
    buffer: Buffer,
    buf_alive: bool,
    orch: Orchestrator,
    checker: Checker,
    recoveries: Vec<RecoveryRecord>,
    crash_times: BTreeMap<u16, u64>,
    opts: RunOptions,
}

impl World {
    fn node_params(cfg: &ChainConfig) -> NodeParams {
        NodeParams {
            nack_timeout: cfg.nack_timeout,
            txn_step_ticks: cfg.txn_step_ticks,
            mode: cfg.protocol,
            mutation: cfg.mutation,
        }
    }

    fn build_replica(cfg: &ChainConfig, id: NodeId, position: u16, epoch: u64) -> Replica {
        let (specs, head) = orch::blueprint(cfg, position);
        Replica::new(id, position, epoch, specs, head, Self::node_params(cfg))
    }

    fn new(cfg: ChainConfig, mut opts: RunOptions) -> Self {
        cfg.validate().expect("valid chain config");
        let orchestrator = Orchestrator::new(cfg.clone());
        let deployment = orchestrator.deployment.clone();
        let mut nodes = BTreeMap::new();
        let mut holders: BTreeMap<u16, Vec<NodeId>> = BTreeMap::new();
        for (&position, &id) in &deployment.nodes {
            nodes.insert(id, Self::build_replica(&cfg, id, position, deployment.epoch));
            holders.entry(position).or_default().push(id);
        }
        let mut trace = Trace::new(opts.retain_events);
        if let Some(sink) = opts.sink.take() {
            trace = trace.with_sink(sink);
        }
        let shared = Shared {
            now: 0,
            seq: 0,
            busy_events: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha12Rng::seed_from_u64(cfg.seed),
            trace,
            delta: Vec::new(),
            txn_counter: 0,
            released: 0,
            injected: 0,
            pb_bytes: 0,
            pb_msgs: 0,
            link: cfg.link,
            n_eff: cfg.n_eff(),
            fwd_gen: 0,
            buf_gen: 0,
        };
        let forwarder = Forwarder::new(deployment.epoch, cfg.queue_capacity, cfg.timer_period, 0);
        let buffer = Buffer::new(cfg.mutation);
        let checker = Checker::new(&cfg);
        let routing = deployment.nodes.clone();
        World {
            cfg,
            shared,
            nodes,
            dead: BTreeSet::new(),
            routing,
            holders,
            forwarder,
            fwd_alive: true,
            buffer,
            buf_alive: true,
            orch: orchestrator,
            checker,
            recoveries: Vec::new(),
            crash_times: BTreeMap::new(),
            opts,
        }
    }

    fn quiescent(&self) -> bool {
        self.shared.busy_events == 0
            && self.buffer.held_count() == 0
            && !self.orch.recovery_in_progress()
            && self
                .nodes
                .iter()
                .filter(|(id, _)| !self.dead.contains(id))
                .all(|(_, n)| {
                    n.pending_count() == 0 && n.active_sessions() == 0 && !n.is_recovering()
                })
    }

    fn dispatch(&mut self, action: Action) {
        match action {
            Action::Inject(packet) => {
                self.shared.injected += 1;
                self.shared.trace_at(
                    CompId::Net,
                    EventBody::Inject {
                        packet_id: packet.packet_id,
                        flow_id: packet.flow_id,
                    },
                );
                if !self.fwd_alive {
                    self.shared.trace_at(
                        CompId::Net,
                        EventBody::NetDrop {
                            reason: DropReason::DeadTarget,
                            description: "ingress at dead forwarder",
                        },
                    );
                    return;
                }
                let mut ctx = SimCtx {
                    shared: &mut self.shared,
                    at: CompId::Forwarder,
                    src: Loc::Forwarder,
                    src_position: 0,
                };
                self.forwarder.ingress(packet, &mut ctx);
            }
            Action::Deliver { to, msg } => self.deliver(to, msg),
            Action::Timer { at, gen, kind } => self.fire_timer(at, gen, kind),
            Action::Crash(target) => self.crash(target),
            Action::Detect { target, dead } => {
                if let CrashTarget::Replica { position } = target {
                    self.shared
                        .trace_at(CompId::Orch, EventBody::FailureDetected { position });
                }
                for a in self.orch.on_failure(target, dead) {
                    self.apply_orch_action(a);
                }
            }
        }
    }

    fn deliver(&mut self, to: Address, msg: Msg) {
        let drop = |world: &mut World, reason: DropReason, what: &'static str| {
            world
                .shared
                .trace_at(CompId::Net, EventBody::NetDrop { reason, description: what });
        };
        match to {
            Address::Forwarder => {
                if !self.fwd_alive {
                    return drop(self, DropReason::DeadTarget, "feedback to dead forwarder");
                }
                let mut ctx = SimCtx {
                    shared: &mut self.shared,
                    at: CompId::Forwarder,
                    src: Loc::Forwarder,
                    src_position: 0,
                };
                match msg {
                    Msg::Control {
                        msg: ControlMsg::Feedback(fb),
                        ..
                    } => {
                        ctx.shared.trace_at(
                            CompId::Forwarder,
                            EventBody::DeliverControl { kind: "feedback" },
                        );
                        self.forwarder.on_feedback(fb, &mut ctx);
                    }
                    other => unreachable!("forwarder got {other:?}"),
                }
            }
            Address::Buffer => {
                if !self.buf_alive {
                    return drop(self, DropReason::DeadTarget, "packet to dead buffer");
                }
                match msg {
                    Msg::Packet(p) => {
                        let bytes = p.piggyback.as_ref().map_or(0, |m| m.encoded_len());
                        self.shared.trace_at(
                            CompId::Buffer,
                            EventBody::DeliverPacket {
                                packet_id: p.packet_id,
                                piggyback_bytes: bytes,
                            },
                        );
                        let mut ctx = SimCtx {
                            shared: &mut self.shared,
                            at: CompId::Buffer,
                            src: Loc::Buffer,
                            src_position: 0,
                        };
                        self.buffer.egress(p, &mut ctx);
                    }
                    other => unreachable!("buffer got {other:?}"),
                }
            }
            Address::Orch => match msg {
                Msg::Control {
                    msg: ControlMsg::AckRecovered { position, epoch },
                    ..
                } => {
                    self.shared
                        .trace_at(CompId::Orch, EventBody::DeliverControl { kind: "ack" });
                    let actions = self.orch.on_ack(position, epoch);
                    for a in actions {
                        self.apply_orch_action(a);
                    }
                }
                other => unreachable!("orchestrator got {other:?}"),
            },
            Address::Position(_) | Address::Node(_) => {
                let id = match to {
                    Address::Position(p) => match self.routing.get(&p) {
                        Some(&id) => id,
                        None => return drop(self, DropReason::DeadTarget, "unroutable position"),
                    },
                    Address::Node(id) => id,
                    _ => unreachable!(),
                };
                if self.dead.contains(&id) || !self.nodes.contains_key(&id) {
                    return drop(self, DropReason::DeadTarget, "delivery to dead node");
                }
                self.drive_node(id, |node, ctx| match msg {
                    Msg::Packet(p) => {
                        let bytes = p.piggyback.as_ref().map_or(0, |m| m.encoded_len());
                        ctx.shared.trace_at(
                            CompId::Node(id),
                            EventBody::DeliverPacket {
                                packet_id: p.packet_id,
                                piggyback_bytes: bytes,
                            },
                        );
                        node.on_packet(p, ctx);
                    }
                    Msg::Control { from, msg } => {
                        ctx.shared.trace_at(
                            CompId::Node(id),
                            EventBody::DeliverControl { kind: msg.kind() },
                        );
                        node.on_control(from, msg, ctx);
                    }
                });
            }
        }
    }

    /// Runs a closure against one replica with a fresh context. The node is
    /// temporarily detached so the context can borrow the rest of the world.
    fn drive_node<F: FnOnce(&mut Replica, &mut SimCtx<'_>)>(&mut self, id: NodeId, f: F) {
        let mut node = self.nodes.remove(&id).expect("node exists");
        let mut ctx = SimCtx {
            shared: &mut self.shared,
            at: CompId::Node(id),
            src: Loc::Node(id),
            src_position: node.position,
        };
        f(&mut node, &mut ctx);
        self.nodes.insert(id, node);
    }

    fn fire_timer(&mut self, at: Loc, gen: u32, kind: TimerKind) {
        match at {
            Loc::Forwarder => {
                if !self.fwd_alive || gen != self.shared.fwd_gen {
                    return; // stale instance
                }
                let mut ctx = SimCtx {
                    shared: &mut self.shared,
                    at: CompId::Forwarder,
                    src: Loc::Forwarder,
                    src_position: 0,
                };
                self.forwarder.on_timer(&mut ctx);
            }
            Loc::Node(id) => {
                if self.dead.contains(&id) || !self.nodes.contains_key(&id) {
                    return;
                }
                self.drive_node(id, |node, ctx| node.on_timer(kind, ctx));
            }
            Loc::Buffer => {}
        }
    }

    fn crash(&mut self, target: CrashTarget) {
        match target {
            CrashTarget::Forwarder => {
                if self.fwd_alive {
                    self.fwd_alive = false;
                    self.shared.trace_at(CompId::Forwarder, EventBody::Crash);
                    self.shared.push(
                        self.shared.now + self.cfg.detection_delay,
                        Action::Detect { target, dead: 0 },
                    );
                }
            }
            CrashTarget::Buffer => {
                if self.buf_alive {
                    self.buf_alive = false;
                    self.shared.trace_at(CompId::Buffer, EventBody::Crash);
                    self.shared.push(
                        self.shared.now + self.cfg.detection_delay,
                        Action::Detect { target, dead: 0 },
                    );
                }
            }
            CrashTarget::Replica { position } => {
                let Some(id) = self.occupant(position) else {
                    return; // nothing alive there
                };
                self.dead.insert(id);
                self.crash_times.insert(position, self.shared.now);
                self.shared.trace_at(CompId::Node(id), EventBody::Crash);
                self.shared.push(
                    self.shared.now + self.cfg.detection_delay,
                    Action::Detect { target, dead: id },
                );
            }
        }
    }

    /// Whoever is meant to be serving this position right now: the routed
    /// node if alive, else an in-flight replacement.
    fn occupant(&self, position: u16) -> Option<NodeId> {
        if let Some(&id) = self.routing.get(&position) {
            if !self.dead.contains(&id) {
                return Some(id);
            }
        }
        self.nodes
            .iter()
            .rev()
            .find(|(id, n)| n.position == position && !self.dead.contains(id))
            .map(|(&id, _)| id)
    }

    fn apply_orch_action(&mut self, action: OrchAction) {
        match action {
            OrchAction::SpawnReplacement {
                node,
                position,
                epoch,
                donors,
            } => {
                let replica = Self::build_replica(&self.cfg, node, position, epoch);
                self.nodes.insert(node, replica);
                self.holders.entry(position).or_default().push(node);
                self.drive_node(node, |n, ctx| n.begin_recovery(donors, epoch, ctx));
            }
            OrchAction::RedirectFetch {
                node,
                middlebox,
                donor,
            } => {
                if !self.dead.contains(&node) && self.nodes.contains_key(&node) {
                    self.drive_node(node, |n, ctx| n.redirect_fetch(middlebox, donor, ctx));
                }
            }
            OrchAction::Reroute { updates, epoch } => {
                for (position, node) in updates {
                    self.routing.insert(position, node);
                    let detect = self
                        .crash_times
                        .get(&position)
                        .copied()
                        .unwrap_or(self.shared.now);
                    self.recoveries.push(RecoveryRecord {
                        position,
                        crash_time: detect,
                        detect_time: detect + self.cfg.detection_delay,
                        rerouted_time: self.shared.now,
                    });
                }
                self.forwarder.epoch = epoch;
                self.shared.trace_at(CompId::Orch, EventBody::Rerouted { epoch });
            }
            OrchAction::RespawnForwarder { epoch } => {
                self.shared.fwd_gen += 1;
                self.forwarder = Forwarder::new(
                    epoch,
                    self.cfg.queue_capacity,
                    self.cfg.timer_period,
                    u64::from(self.shared.fwd_gen) << 32,
                );
                self.fwd_alive = true;
                self.shared
                    .trace_at(CompId::Forwarder, EventBody::EndpointRespawned { epoch });
                let mut ctx = SimCtx {
                    shared: &mut self.shared,
                    at: CompId::Forwarder,
                    src: Loc::Forwarder,
                    src_position: 0,
                };
                ctx.schedule(self.cfg.timer_period, TimerKind::Propagation);
            }
            OrchAction::RespawnBuffer { epoch } => {
                self.shared.buf_gen += 1;
                self.buffer = Buffer::new(self.cfg.mutation);
                self.buf_alive = true;
                self.shared
                    .trace_at(CompId::Buffer, EventBody::EndpointRespawned { epoch });
            }
        }
    }

    fn run_checks(&mut self) {
        let delta = std::mem::take(&mut self.shared.delta);
        let refs = WorldRefs {
            nodes: &self.nodes,
            dead: &self.dead,
            routing: &self.routing,
            holders: &self.holders,
        };
        for (at, body) in &delta {
            self.checker.on_event(self.shared.now, *at, body, &refs);
        }
    }

    fn final_state(&self) -> FinalState {
        let mut state = FinalState {
            routing: self.routing.clone(),
            buffer_held: self.buffer.held_count(),
            ..FinalState::default()
        };
        for (&id, node) in &self.nodes {
            let alive = !self.dead.contains(&id);
            if alive && !node.is_recovering() && self.routing.get(&node.position) == Some(&id) {
                if let Some((m, store)) = node.head_store() {
                    state.heads.insert(*m, store.clone());
                }
                if let Some(front) = node.head_frontier() {
                    state
                        .frontiers
                        .insert(MiddleboxId(node.position), front);
                }
            }
            for g in node.groups() {
                state.logs.insert(
                    (id, g.middlebox),
                    LogSummary {
                        latest: g
                            .log
                            .latest_entries()
                            .map(|(k, v, s)| (k.clone(), (v.clone(), s)))
                            .collect(),
                        max: g.max_vc(),
                        position: node.position,
                        alive,
                    },
                );
            }
        }
        state
    }
}

/// Runs one experiment to quiescence (or the horizon) and returns the trace,
/// metrics, violations, and final global state.
pub fn run(
    cfg: &ChainConfig,
    workload: &Workload,
    faults: &FaultPlan,
    opts: RunOptions,
) -> RunOutcome {
    faults.validate(cfg).expect("valid fault plan");
    let mut world = World::new(cfg.clone(), opts);

    for (time, flow, packet_id) in traffic_schedule(workload, cfg.seed) {
        let packet = Packet::data(flow, packet_id, vec![0; 8]);
        world.shared.push(time, Action::Inject(packet));
    }
    for CrashEvent { time, target } in &faults.crashes {
        world.shared.push(*time, Action::Crash(*target));
    }
    {
        let mut ctx = SimCtx {
            shared: &mut world.shared,
            at: CompId::Forwarder,
            src: Loc::Forwarder,
            src_position: 0,
        };
        ctx.schedule(cfg.timer_period, TimerKind::Propagation);
    }

    let mut quiesced = false;
    while let Some(Reverse(event)) = world.shared.queue.pop() {
        if event.time > world.opts.horizon {
            break;
        }
        world.shared.now = event.time;
        if !matches!(event.action, Action::Timer { .. }) {
            world.shared.busy_events -= 1;
        }
        world.shared.delta.clear();
        world.dispatch(event.action);
        if world.opts.check == CheckMode::All {
            world.run_checks();
            if world.opts.stop_on_violation && !world.checker.violations.is_empty() {
                break;
            }
        }
        if world.quiescent() {
            quiesced = true;
            break;
        }
    }

    if world.opts.check != CheckMode::Off {
        let refs = WorldRefs {
            nodes: &world.nodes,
            dead: &world.dead,
            routing: &world.routing,
            holders: &world.holders,
        };
        world.checker.global_scan(world.shared.now, &refs);
    }

    let final_state = world.final_state();
    RunOutcome {
        trace_hash: world.shared.trace.hash(),
        commits: std::mem::take(&mut world.shared.trace.commits),
        releases: std::mem::take(&mut world.shared.trace.releases),
        events: std::mem::take(&mut world.shared.trace.events),
        violations: world.checker.violations,
        injected: world.shared.injected,
        released: world.shared.released,
        piggyback_bytes_total: world.shared.pb_bytes,
        piggyback_messages: world.shared.pb_msgs,
        recoveries: world.recoveries,
        final_state,
        end_time: world.shared.now,
        quiesced,
        record_count: world.shared.trace.record_count(),
    }
}
