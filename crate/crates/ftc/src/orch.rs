//! Chain deployment and failure recovery.
//!
//! The orchestrator places max(n, f+1) replicas, assigns each middlebox a
//! replication group of f+1 consecutive replicas on the logical ring, and on
//! a failure runs the three serial recovery steps: spawn a replacement,
//! recover each group's state from a donor, then reroute tail-to-head and
//! bump the deployment epoch.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::config::{ChainConfig, CrashTarget, MiddleboxKind};
use crate::node::GroupSpec;
use crate::trace::NodeId;
use crate::types::MiddleboxId;

/// Positions of middlebox `head`'s replication group, in group order
/// (Head first, Tail last), wrapping around the ring of `n_eff` replicas.
pub fn group_positions(head: u16, f: u16, n_eff: u16) -> Vec<u16> {
    (0..=f).map(|j| (head - 1 + j) % n_eff + 1).collect()
}

/// Group specs and optional middlebox-host role for one chain position.
pub fn blueprint(
    cfg: &ChainConfig,
    position: u16,
) -> (Vec<GroupSpec>, Option<(MiddleboxId, MiddleboxKind, u16)>) {
    let n_eff = cfg.n_eff();
    let mut specs = Vec::new();
    for i in 1..=cfg.n() {
        let members = group_positions(i, cfg.f, n_eff);
        if members.contains(&position) {
            specs.push(GroupSpec {
                middlebox: MiddleboxId(i),
                partitions: cfg.middleboxes[i as usize - 1].partitions,
                is_head: position == members[0],
                is_tail: position == *members.last().expect("non-empty group"),
                head_position: members[0],
            });
        }
    }
    let head = (position <= cfg.n()).then(|| {
        let mb = &cfg.middleboxes[position as usize - 1];
        (MiddleboxId(position), mb.kind.clone(), mb.partitions)
    });
    (specs, head)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Deployment {
    pub epoch: u64,
    pub n: u16,
    pub f: u16,
    pub n_eff: u16,
    /// Which node currently holds each chain position.
    pub nodes: BTreeMap<u16, NodeId>,
}

impl Deployment {
    pub fn node_at(&self, position: u16) -> NodeId {
        self.nodes[&position]
    }

    pub fn position_of(&self, node: NodeId) -> Option<u16> {
        self.nodes
            .iter()
            .find(|(_, &n)| n == node)
            .map(|(&p, _)| p)
    }
}

/// Initial placement: replicas at positions 1..=n_eff, epoch 1.
pub fn deploy(cfg: &ChainConfig) -> Deployment {
    cfg.validate().expect("valid chain config");
    let n_eff = cfg.n_eff();
    Deployment {
        epoch: 1,
        n: cfg.n(),
        f: cfg.f,
        n_eff,
        nodes: (1..=n_eff).map(|p| (p, NodeId::from(p))).collect(),
    }
}

/// Instructions the simulator executes on the orchestrator's behalf.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OrchAction {
    SpawnReplacement {
        node: NodeId,
        position: u16,
        epoch: u64,
        donors: BTreeMap<MiddleboxId, NodeId>,
    },
    RedirectFetch {
        node: NodeId,
        middlebox: MiddleboxId,
        donor: NodeId,
    },
    /// Apply position->node routing updates in the given order (tail-most
    /// first), then stamp the new epoch at the Forwarder.
    Reroute {
        updates: Vec<(u16, NodeId)>,
        epoch: u64,
    },
    RespawnForwarder {
        epoch: u64,
    },
    RespawnBuffer {
        epoch: u64,
    },
}

#[derive(Debug)]
struct WaveEntry {
    replacement: NodeId,
    donors: BTreeMap<MiddleboxId, NodeId>,
    acked: bool,
}

#[derive(Debug)]
struct Wave {
    epoch: u64,
    entries: BTreeMap<u16, WaveEntry>,
}

#[derive(Debug)]
pub struct Orchestrator {
    cfg: ChainConfig,
    pub deployment: Deployment,
    alive: BTreeSet<NodeId>,
    next_node_id: NodeId,
    next_epoch: u64,
    wave: Option<Wave>,
    queued: VecDeque<u16>,
}

impl Orchestrator {
    pub fn new(cfg: ChainConfig) -> Self {
        let deployment = deploy(&cfg);
        let alive = deployment.nodes.values().copied().collect();
        let next_node_id = deployment.n_eff as NodeId + 1;
        Orchestrator {
            cfg,
            deployment,
            alive,
            next_node_id,
            next_epoch: 2,
            wave: None,
            queued: VecDeque::new(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.deployment.epoch
    }

    pub fn recovery_in_progress(&self) -> bool {
        self.wave.is_some()
    }

    /// A failure report from the (reliable) detector.
    pub fn on_failure(&mut self, target: CrashTarget, dead: NodeId) -> Vec<OrchAction> {
        let mut actions = Vec::new();
        match target {
            CrashTarget::Forwarder => {
                let epoch = self.alloc_epoch();
                self.deployment.epoch = epoch;
                actions.push(OrchAction::RespawnForwarder { epoch });
            }
            CrashTarget::Buffer => {
                let epoch = self.alloc_epoch();
                self.deployment.epoch = epoch;
                actions.push(OrchAction::RespawnBuffer { epoch });
            }
            CrashTarget::Replica { position } => {
                self.alive.remove(&dead);
                self.on_replica_failure(position, dead, &mut actions);
            }
        }
        actions
    }

    fn on_replica_failure(&mut self, position: u16, dead: NodeId, actions: &mut Vec<OrchAction>) {
        if let Some(wave) = self.wave.as_mut() {
            if wave
                .entries
                .get(&position)
                .is_some_and(|e| e.replacement == dead)
            {
                // The replacement itself died: restart its recovery within
                // the wave.
                let node = self.next_node_id;
                self.next_node_id += 1;
                let donors = self.pick_donors(position);
                let wave = self.wave.as_mut().expect("active wave");
                let epoch = wave.epoch;
                wave.entries.insert(
                    position,
                    WaveEntry {
                        replacement: node,
                        donors: donors.clone(),
                        acked: false,
                    },
                );
                actions.push(OrchAction::SpawnReplacement {
                    node,
                    position,
                    epoch,
                    donors,
                });
                return;
            }
            // A donor (or unrelated replica) died mid-wave: redirect any
            // fetches it was serving and queue its own position.
            let mut redirects = Vec::new();
            for (&pos, entry) in wave.entries.iter_mut() {
                if entry.acked {
                    continue;
                }
                for (&m, donor) in entry.donors.iter_mut() {
                    if *donor == dead {
                        redirects.push((pos, entry.replacement, m));
                    }
                }
            }
            for (pos, node, m) in redirects {
                let donor = self.pick_donor(m, pos);
                let wave = self.wave.as_mut().expect("active wave");
                wave.entries
                    .get_mut(&pos)
                    .expect("entry")
                    .donors
                    .insert(m, donor);
                actions.push(OrchAction::RedirectFetch {
                    node,
                    middlebox: m,
                    donor,
                });
            }
            if !self.queued.contains(&position) {
                self.queued.push_back(position);
            }
            return;
        }
        self.start_wave(vec![position], actions);
    }

    fn start_wave(&mut self, positions: Vec<u16>, actions: &mut Vec<OrchAction>) {
        let epoch = self.alloc_epoch();
        let mut entries = BTreeMap::new();
        for position in positions {
            let node = self.next_node_id;
            self.next_node_id += 1;
            let donors = self.pick_donors(position);
            entries.insert(
                position,
                WaveEntry {
                    replacement: node,
                    donors: donors.clone(),
                    acked: false,
                },
            );
            actions.push(OrchAction::SpawnReplacement {
                node,
                position,
                epoch,
                donors,
            });
        }
        self.wave = Some(Wave { epoch, entries });
    }

    /// Recovery acknowledgements; once every replacement in the wave has
    /// acked, routing is updated tail-most first and the epoch bumps.
    pub fn on_ack(&mut self, position: u16, epoch: u64) -> Vec<OrchAction> {
        let mut actions = Vec::new();
        let Some(wave) = self.wave.as_mut() else {
            return actions;
        };
        if wave.epoch != epoch {
            return actions;
        }
        if let Some(entry) = wave.entries.get_mut(&position) {
            entry.acked = true;
        }
        if wave.entries.values().all(|e| e.acked) {
            let wave = self.wave.take().expect("checked");
            let mut updates: Vec<(u16, NodeId)> = wave
                .entries
                .iter()
                .map(|(&pos, e)| (pos, e.replacement))
                .collect();
            // Tail-most position first.
            updates.sort_by(|a, b| b.0.cmp(&a.0));
            for &(pos, node) in &updates {
                self.deployment.nodes.insert(pos, node);
                self.alive.insert(node);
            }
            self.deployment.epoch = wave.epoch;
            actions.push(OrchAction::Reroute {
                updates,
                epoch: wave.epoch,
            });
            // Failures that arrived mid-wave start the next wave now.
            let queued: Vec<u16> = self.queued.drain(..).collect();
            if !queued.is_empty() {
                self.start_wave(queued, &mut actions);
            }
        }
        actions
    }

    fn alloc_epoch(&mut self) -> u64 {
        let e = self.next_epoch;
        self.next_epoch += 1;
        e
    }

    fn pick_donors(&self, position: u16) -> BTreeMap<MiddleboxId, NodeId> {
        let (specs, _) = blueprint(&self.cfg, position);
        specs
            .iter()
            .map(|s| (s.middlebox, self.pick_donor(s.middlebox, position)))
            .collect()
    }

    /// Donor choice per the recovery rules: a failed Head fetches from the
    /// first alive successor in the group (the most advanced survivor); any
    /// other member fetches from the closest alive predecessor, falling back
    /// to the first alive successor.
    fn pick_donor(&self, m: MiddleboxId, failed_position: u16) -> NodeId {
        let members = group_positions(m.0, self.cfg.f, self.cfg.n_eff());
        let idx = members
            .iter()
            .position(|&p| p == failed_position)
            .expect("failed node is in the group");
        let alive_at = |pos: u16| -> Option<NodeId> {
            let node = self.deployment.node_at(pos);
            (self.alive.contains(&node) && !self.is_recovering(node)).then_some(node)
        };
        if idx == 0 {
            // Head: first alive successor.
            members[1..]
                .iter()
                .find_map(|&p| alive_at(p))
                .expect("at most f failures leave a live member")
        } else {
            // Closest alive predecessor, else first alive successor.
            members[..idx]
                .iter()
                .rev()
                .find_map(|&p| alive_at(p))
                .or_else(|| members[idx + 1..].iter().find_map(|&p| alive_at(p)))
                .expect("at most f failures leave a live member")
        }
    }

    fn is_recovering(&self, node: NodeId) -> bool {
        self.wave
            .as_ref()
            .is_some_and(|w| w.entries.values().any(|e| e.replacement == node && !e.acked))
    }
}
