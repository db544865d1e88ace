//! Online protocol checker. Consumes the trace delta of each simulation event
//! and verifies the state change it made; a full-state scan backs it up at
//! run end. Violations are collected rather than panicking so mutation tests
//! can observe them.

use std::collections::{BTreeMap, BTreeSet};

use crate::config::ChainConfig;
use crate::node::Replica;
use crate::orch;
use crate::trace::{CompId, EventBody, NodeId, Violation};
use crate::types::{Key, MiddleboxId, PartitionId, SeqNo};
use crate::vclock::VectorClock;

/// Borrowed view of the world the checker inspects after each event.
pub struct WorldRefs<'a> {
    pub nodes: &'a BTreeMap<NodeId, Replica>,
    pub dead: &'a BTreeSet<NodeId>,
    pub routing: &'a BTreeMap<u16, NodeId>,
    /// Every node that ever held a position, oldest first.
    pub holders: &'a BTreeMap<u16, Vec<NodeId>>,
}

impl<'a> WorldRefs<'a> {
    /// The node currently serving a position, if alive and done recovering.
    fn live_at(&self, position: u16) -> Option<&'a Replica> {
        let id = self.routing.get(&position)?;
        if self.dead.contains(id) {
            return None;
        }
        let node = self.nodes.get(id)?;
        (!node.is_recovering()).then_some(node)
    }
}

pub struct Checker {
    f: u16,
    /// Group member positions in group order (Head first).
    groups: BTreeMap<MiddleboxId, Vec<u16>>,
    /// Last seen MAX per (node, group), for gap checking.
    prev_max: BTreeMap<(NodeId, MiddleboxId), VectorClock>,
    /// Writes of not-yet-released packets, keyed by packet id.
    commits: BTreeMap<u64, Vec<(MiddleboxId, Vec<(Key, SeqNo)>)>>,
    pub violations: Vec<Violation>,
}

impl Checker {
    pub fn new(cfg: &ChainConfig) -> Self {
        let groups = (1..=cfg.n())
            .map(|i| {
                (
                    MiddleboxId(i),
                    orch::group_positions(i, cfg.f, cfg.n_eff()),
                )
            })
            .collect();
        Checker {
            f: cfg.f,
            groups,
            prev_max: BTreeMap::new(),
            commits: BTreeMap::new(),
            violations: Vec::new(),
        }
    }

    fn flag(&mut self, time: u64, check: &'static str, detail: String) {
        self.violations.push(Violation {
            time,
            check,
            detail,
        });
    }

    pub fn on_event(&mut self, time: u64, at: CompId, body: &EventBody, world: &WorldRefs) {
        match (at, body) {
            (CompId::Node(node), EventBody::LogInsert { middlebox, key, seq }) => {
                self.check_log_propagation(time, node, *middlebox, key, *seq, world);
            }
            (CompId::Node(node), EventBody::MaxAdvance { middlebox, max }) => {
                self.check_max_gap(time, node, *middlebox, max, world);
            }
            (CompId::Node(node), EventBody::TailStamp { middlebox, commit }) => {
                self.check_tail_stamp(time, node, *middlebox, commit, world);
            }
            (CompId::Node(node), EventBody::GroupRecovered { middlebox }) => {
                // Reset the MAX shadow to the installed state.
                if let Some(replica) = world.nodes.get(&node) {
                    if let Some(g) = replica.group(*middlebox) {
                        self.prev_max.insert((node, *middlebox), g.max_vc());
                    }
                }
            }
            (_, EventBody::TxnCommit(c)) => {
                if !c.writes.is_empty() {
                    self.commits
                        .entry(c.packet_id)
                        .or_default()
                        .push((c.middlebox, c.writes.clone()));
                }
            }
            (_, EventBody::TxnBegin { packet_id, .. }) => {
                // Propagating packets never reach middlebox logic; their ids
                // live in a disjoint space.
                if *packet_id >= crate::endpoints::PROPAGATING_ID_BASE {
                    self.flag(
                        time,
                        "propagating-isolation",
                        format!("transaction began for propagating packet {packet_id}"),
                    );
                }
            }
            (_, EventBody::Release(r)) => {
                self.check_output_commit(time, r.packet_id, world);
            }
            _ => {}
        }
    }

    /// Log propagation (the per-event form of Invariants 1 and 2): right
    /// after a node logs (key, seq) for group m, every live member earlier in
    /// the group order already holds that key at `seq` or newer.
    fn check_log_propagation(
        &mut self,
        time: u64,
        node: NodeId,
        m: MiddleboxId,
        key: &Key,
        seq: SeqNo,
        world: &WorldRefs,
    ) {
        let Some(members) = self.groups.get(&m).cloned() else {
            return;
        };
        let Some(position) = world
            .nodes
            .get(&node)
            .map(|r| r.position)
            .filter(|p| members.contains(p))
        else {
            return;
        };
        for &p in members.iter().take_while(|&&p| p != position) {
            let Some(earlier) = world.live_at(p) else {
                continue;
            };
            let Some(g) = earlier.group(m) else {
                continue;
            };
            let ok = g.log.latest(key).is_some_and(|(_, have)| have >= seq);
            if !ok {
                self.flag(
                    time,
                    "log-propagation",
                    format!(
                        "group {m}: node {node} (pos {position}) logged {key:?}@{seq} \
                         but predecessor pos {p} has {:?}",
                        g.log.latest(key).map(|(_, s)| s)
                    ),
                );
            }
        }
    }

    /// MAX consistency: every seq at or below MAX is present in the log store
    /// or lies under the pruned watermark.
    fn check_max_gap(
        &mut self,
        time: u64,
        node: NodeId,
        m: MiddleboxId,
        new_max: &VectorClock,
        world: &WorldRefs,
    ) {
        let Some(replica) = world.nodes.get(&node) else {
            return;
        };
        let Some(g) = replica.group(m) else {
            return;
        };
        let prev = self
            .prev_max
            .get(&(node, m))
            .cloned()
            .unwrap_or_else(|| VectorClock::zero(new_max.len() as u16));
        for p in 0..new_max.len() as u16 {
            let pid = PartitionId(p);
            for seq in prev.get(pid) + 1..=new_max.get(pid) {
                if !g.log.has_seq(pid, seq) && seq > g.log.watermark().get(pid) {
                    self.flag(
                        time,
                        "max-consistency",
                        format!(
                            "group {m}: node {node} advanced MAX[{p}] to {} \
                             with no log entry at seq {seq}",
                            new_max.get(pid)
                        ),
                    );
                }
            }
        }
        self.prev_max.insert((node, m), new_max.clone());
    }

    /// A Tail never stamps a commit vector beyond its own MAX.
    fn check_tail_stamp(
        &mut self,
        time: u64,
        node: NodeId,
        m: MiddleboxId,
        commit: &VectorClock,
        world: &WorldRefs,
    ) {
        let Some(g) = world.nodes.get(&node).and_then(|r| r.group(m)) else {
            return;
        };
        if !commit.leq(&g.max_vc()).unwrap_or(false) {
            self.flag(
                time,
                "tail-commit-bound",
                format!("group {m}: tail {node} stamped {commit:?} beyond MAX {:?}", g.max_vc()),
            );
        }
    }

    /// Output commit: at the instant a packet is released, each of its writes
    /// (or a later version of the same key) is in the log stores of f+1
    /// distinct nodes of the owning group. Copies frozen in crashed nodes
    /// count: replication happened before the failure.
    fn check_output_commit(&mut self, time: u64, packet_id: u64, world: &WorldRefs) {
        let Some(commits) = self.commits.remove(&packet_id) else {
            return;
        };
        for (m, writes) in commits {
            let Some(members) = self.groups.get(&m).cloned() else {
                continue;
            };
            for (key, seq) in &writes {
                let mut copies = 0usize;
                for &p in &members {
                    let holders = world.holders.get(&p).cloned().unwrap_or_default();
                    let covered = holders.iter().any(|id| {
                        world
                            .nodes
                            .get(id)
                            .and_then(|r| r.group(m))
                            .and_then(|g| g.log.latest(key))
                            .is_some_and(|(_, have)| have >= *seq)
                    });
                    if covered {
                        copies += 1;
                    }
                }
                if copies < (self.f + 1) as usize {
                    self.flag(
                        time,
                        "output-commit",
                        format!(
                            "released packet {packet_id}: {key:?}@{seq} of group {m} \
                             replicated {copies}x, need {}",
                            self.f + 1
                        ),
                    );
                }
            }
        }
    }

    /// Full-state scan: pairwise log propagation over live members plus MAX
    /// completeness, for every group.
    pub fn global_scan(&mut self, time: u64, world: &WorldRefs) {
        let groups: Vec<(MiddleboxId, Vec<u16>)> = self
            .groups
            .iter()
            .map(|(m, v)| (*m, v.clone()))
            .collect();
        for (m, members) in groups {
            let live: Vec<&Replica> = members
                .iter()
                .filter_map(|&p| world.live_at(p))
                .collect();
            for pair in live.windows(2) {
                let (earlier, later) = (pair[0], pair[1]);
                let (Some(ge), Some(gl)) = (earlier.group(m), later.group(m)) else {
                    continue;
                };
                for (key, _, seq) in gl.log.latest_entries() {
                    let ok = ge.log.latest(key).is_some_and(|(_, have)| have >= seq);
                    if !ok {
                        self.flag(
                            time,
                            "log-propagation",
                            format!(
                                "group {m}: pos {} has {key:?}@{seq}, predecessor pos {} behind",
                                later.position, earlier.position
                            ),
                        );
                    }
                }
            }
            for replica in live {
                let Some(g) = replica.group(m) else {
                    continue;
                };
                let max = g.max_vc();
                for p in 0..max.len() as u16 {
                    let pid = PartitionId(p);
                    for seq in g.log.watermark().get(pid) + 1..=max.get(pid) {
                        if !g.log.has_seq(pid, seq) {
                            self.flag(
                                time,
                                "max-consistency",
                                format!(
                                    "group {m}: node {} MAX[{p}]={} missing seq {seq}",
                                    replica.id,
                                    max.get(pid)
                                ),
                            );
                        }
                    }
                }
            }
        }
    }
}
