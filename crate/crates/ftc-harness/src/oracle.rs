//! Independent serial oracle.
//!
//! Re-executes the committed packet transactions of a run against plain maps,
//! serially, in a linear extension of the partial order their version-vector
//! brackets induce. The replay never touches the replication machinery, so
//! agreement between its final state and the chain's is evidence the
//! concurrent, replicated execution was equivalent to a serial one.

use std::collections::{BTreeMap, BinaryHeap};

use ftc::config::ChainConfig;
use ftc::mbox;
use ftc::trace::CommitRecord;
use ftc::types::{Key, MiddleboxId, PartitionId, Value};
use ftc::vclock::VectorClock;

#[derive(Debug, Clone, PartialEq)]
pub enum OracleError {
    /// The v1/v2 brackets admitted no serial order: protocol bug.
    CyclicOrder { middlebox: MiddleboxId },
    /// Re-execution diverged from the recorded transaction.
    Divergence {
        middlebox: MiddleboxId,
        packet_id: u64,
        detail: String,
    },
}

impl std::fmt::Display for OracleError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OracleError::CyclicOrder { middlebox } => {
                write!(f, "cyclic transaction order at {middlebox}")
            }
            OracleError::Divergence {
                middlebox,
                packet_id,
                detail,
            } => write!(f, "replay divergence at {middlebox}, packet {packet_id}: {detail}"),
        }
    }
}

impl std::error::Error for OracleError {}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct OracleState {
    pub per_middlebox: BTreeMap<MiddleboxId, BTreeMap<Key, Value>>,
    /// Commits excluded by the survival frontier, per middlebox.
    pub filtered_out: BTreeMap<MiddleboxId, usize>,
}

/// Replays every commit whose v2 lies within `frontier` (the per-middlebox
/// survival bound; `None` replays everything) and returns the expected final
/// key-value state per middlebox.
pub fn oracle_replay(
    cfg: &ChainConfig,
    commits: &[CommitRecord],
    frontiers: &BTreeMap<MiddleboxId, VectorClock>,
) -> Result<OracleState, OracleError> {
    let mut state = OracleState::default();
    let mut by_mb: BTreeMap<MiddleboxId, Vec<&CommitRecord>> = BTreeMap::new();
    for c in commits {
        by_mb.entry(c.middlebox).or_default().push(c);
    }
    for (m, mut list) in by_mb {
        let store = state.per_middlebox.entry(m).or_default();
        // Survival filter: a commit whose v2 exceeds the frontier died with a
        // failed Head before replication and must not be replayed.
        if let Some(frontier) = frontiers.get(&m) {
            let before = list.len();
            list.retain(|c| c.v2.leq(frontier).unwrap_or(false));
            state.filtered_out.insert(m, before - list.len());
        }
        let order = topo_order(m, &list)?;
        let kind = &cfg.middleboxes[m.0 as usize - 1].kind;
        let partitions = cfg.middleboxes[m.0 as usize - 1].partitions;
        for idx in order {
            let c = list[idx];
            let mut program = mbox::program(kind, partitions, c.flow_id, c.packet_id);
            let action = mbox::run_serial(&mut program, store);
            if action != c.action {
                return Err(OracleError::Divergence {
                    middlebox: m,
                    packet_id: c.packet_id,
                    detail: format!("action {:?} vs recorded {:?}", action, c.action),
                });
            }
        }
    }
    Ok(state)
}

/// A linear extension of the conflict order: per partition, writers are
/// totally ordered by their v2 entry and a reader of version k runs after
/// writer k and before writer k+1. Ties (concurrent transactions) break by
/// packet id, then transaction id.
fn topo_order(m: MiddleboxId, list: &[&CommitRecord]) -> Result<Vec<usize>, OracleError> {
    let n = list.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let p = list[0].v1.len() as u16;
    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for part in 0..p {
        let pid = PartitionId(part);
        // (version, reader_flag, idx): writers at (v2, 0), readers at (v1, 1).
        let mut chain: Vec<(u64, u8, usize)> = Vec::new();
        for (idx, c) in list.iter().enumerate() {
            if !c.involved.contains(&part) {
                continue;
            }
            let wrote = c.v2.get(pid) > c.v1.get(pid);
            if wrote {
                chain.push((c.v2.get(pid), 0, idx));
            } else {
                chain.push((c.v1.get(pid), 1, idx));
            }
        }
        chain.sort();
        for pair in chain.windows(2) {
            let ((va, fa, a), (vb, fb, b)) = (pair[0], pair[1]);
            if (va, fa) == (vb, fb) {
                continue; // concurrent readers of one version commute
            }
            succs[a].push(b);
            indegree[b] += 1;
        }
    }
    // Kahn's algorithm with a deterministic tie-break.
    let mut ready: BinaryHeap<std::cmp::Reverse<(u64, u64, usize)>> = (0..n)
        .filter(|&i| indegree[i] == 0)
        .map(|i| std::cmp::Reverse((list[i].packet_id, list[i].txn, i)))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(std::cmp::Reverse((_, _, i))) = ready.pop() {
        order.push(i);
        for &s in &succs[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(std::cmp::Reverse((list[s].packet_id, list[s].txn, s)));
            }
        }
    }
    if order.len() != n {
        return Err(OracleError::CyclicOrder { middlebox: m });
    }
    Ok(order)
}
