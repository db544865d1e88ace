//! Versioned history of state-variable writes for one (replica, middlebox)
//! pair. The log store is the source of recovery truth: `latest` always
//! serves the newest value per key, and pruning keeps that snapshot alive
//! even after the committed history below it is discarded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{partition_of, Key, PartitionId, SeqNo, Value};
use crate::vclock::VectorClock;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub key: Key,
    pub value: Value,
    pub seq: SeqNo,
    pub partition: PartitionId,
}

impl LogEntry {
    pub fn new(key: Key, value: Value, seq: SeqNo, p: u16) -> Self {
        let partition = partition_of(&key, p);
        LogEntry {
            key,
            value,
            seq,
            partition,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogStore {
    partitions: u16,
    /// (partition, seq) -> entries logged by the transaction at that seq.
    by_seq: BTreeMap<(u16, SeqNo), Vec<LogEntry>>,
    /// Newest (value, seq) per key; retained across pruning.
    latest: BTreeMap<Key, (Value, SeqNo)>,
    /// Pruned-below bound: history at or below this vector may be gone.
    watermark: VectorClock,
}

impl LogStore {
    pub fn new(partitions: u16) -> Self {
        assert!(partitions >= 1);
        LogStore {
            partitions,
            by_seq: BTreeMap::new(),
            latest: BTreeMap::new(),
            watermark: VectorClock::zero(partitions),
        }
    }

    pub fn partitions(&self) -> u16 {
        self.partitions
    }

    pub fn watermark(&self) -> &VectorClock {
        &self.watermark
    }

    /// Inserts an entry. Re-inserting an existing (key, seq) is a no-op so
    /// that duplicated or replayed transmissions are harmless; returns true
    /// when the entry was actually added.
    pub fn insert(&mut self, entry: LogEntry) -> bool {
        assert!(entry.seq >= 1, "log entries start at seq 1");
        debug_assert_eq!(entry.partition, partition_of(&entry.key, self.partitions));
        let slot = self
            .by_seq
            .entry((entry.partition.0, entry.seq))
            .or_default();
        if slot.iter().any(|e| e.key == entry.key) {
            return false;
        }
        match self.latest.get(&entry.key) {
            Some(&(_, seq)) if seq >= entry.seq => {}
            _ => {
                self.latest
                    .insert(entry.key.clone(), (entry.value.clone(), entry.seq));
            }
        }
        slot.push(entry);
        true
    }

    /// The entry with maximal seq for `key`, if any.
    pub fn latest(&self, key: &Key) -> Option<(&Value, SeqNo)> {
        self.latest.get(key).map(|(v, t)| (v, *t))
    }

    /// Newest (key, value, seq) triples, for rebuilding in-operation state.
    pub fn latest_entries(&self) -> impl Iterator<Item = (&Key, &Value, SeqNo)> {
        self.latest.iter().map(|(k, (v, t))| (k, v, *t))
    }

    /// Drops entries with seq <= upto[partition], except that the single
    /// newest entry per key always survives as a recovery snapshot. Advances
    /// the watermark by merging `upto` into it.
    pub fn prune(&mut self, upto: &VectorClock) {
        assert_eq!(upto.len(), self.partitions as usize);
        for p in 0..self.partitions {
            let bound = upto.get(PartitionId(p));
            if bound == 0 {
                continue;
            }
            let doomed: Vec<(u16, SeqNo)> = self
                .by_seq
                .range((p, 1)..=(p, bound))
                .map(|(&k, _)| k)
                .collect();
            for slot_key in doomed {
                let slot = self.by_seq.get_mut(&slot_key).expect("slot exists");
                slot.retain(|e| {
                    self.latest
                        .get(&e.key)
                        .is_some_and(|&(_, newest)| newest == e.seq)
                });
                if slot.is_empty() {
                    self.by_seq.remove(&slot_key);
                }
            }
        }
        self.watermark
            .merge_from(upto)
            .expect("watermark has the store's partition count");
    }

    /// Merges an externally learned pruned-below bound (e.g. from a
    /// retransmission whose range was pruned at the sender).
    pub fn merge_watermark(&mut self, below: &VectorClock) {
        self.watermark
            .merge_from(below)
            .expect("watermark has the store's partition count");
    }

    /// Entries with from[p] < seq <= to[p], ascending by (partition, seq).
    /// Retained snapshots inside the range are included.
    pub fn range(&self, from: &VectorClock, to: &VectorClock) -> Vec<LogEntry> {
        let mut out = Vec::new();
        for p in 0..self.partitions {
            let lo = from.get(PartitionId(p));
            let hi = to.get(PartitionId(p));
            if lo >= hi {
                continue;
            }
            for (_, slot) in self.by_seq.range((p, lo + 1)..=(p, hi)) {
                out.extend(slot.iter().cloned());
            }
        }
        out
    }

    /// True when any portion of (from, to] falls at or below the watermark,
    /// i.e. the caller would receive snapshots instead of full history.
    pub fn range_touches_pruned(&self, from: &VectorClock, to: &VectorClock) -> bool {
        (0..self.partitions).any(|p| {
            let p = PartitionId(p);
            from.get(p) < self.watermark.get(p) && from.get(p) < to.get(p)
        })
    }

    pub fn has_seq(&self, p: PartitionId, seq: SeqNo) -> bool {
        self.by_seq.contains_key(&(p.0, seq))
    }

    pub fn entry_count(&self) -> usize {
        self.by_seq.values().map(Vec::len).sum()
    }

    pub fn key_count(&self) -> usize {
        self.latest.len()
    }
}
