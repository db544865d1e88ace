//! Fixed-length version vectors. One entry per state partition of the owning
//! middlebox; all-zero is the initial clock.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::types::{PartitionId, SeqNo};

/// Two clocks of different partition counts were combined; this is a chain
/// configuration error, never a runtime condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("vector clock length mismatch: {left} vs {right}")]
pub struct LengthMismatch {
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VectorClock(Vec<SeqNo>);

impl VectorClock {
    /// The all-zero clock for `p` partitions.
    pub fn zero(p: u16) -> Self {
        VectorClock(vec![0; p as usize])
    }

    pub fn from_entries(entries: Vec<SeqNo>) -> Self {
        assert!(!entries.is_empty(), "vector clock needs at least one entry");
        VectorClock(entries)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, p: PartitionId) -> SeqNo {
        self.0[p.index()]
    }

    pub fn set(&mut self, p: PartitionId, v: SeqNo) {
        self.0[p.index()] = v;
    }

    pub fn entries(&self) -> &[SeqNo] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }

    fn check(&self, other: &VectorClock) -> Result<(), LengthMismatch> {
        if self.0.len() == other.0.len() {
            Ok(())
        } else {
            Err(LengthMismatch {
                left: self.0.len(),
                right: other.0.len(),
            })
        }
    }

    /// Elementwise max (join).
    pub fn merge(&self, other: &VectorClock) -> Result<VectorClock, LengthMismatch> {
        self.check(other)?;
        Ok(VectorClock(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| a.max(b))
                .collect(),
        ))
    }

    /// In-place join. Same contract as [`merge`](Self::merge).
    pub fn merge_from(&mut self, other: &VectorClock) -> Result<(), LengthMismatch> {
        self.check(other)?;
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a = (*a).max(b);
        }
        Ok(())
    }

    /// Partial order: true iff `self[i] <= other[i]` for every partition.
    /// Incomparable pairs return false in both directions.
    pub fn leq(&self, other: &VectorClock) -> Result<bool, LengthMismatch> {
        self.check(other)?;
        Ok(self.0.iter().zip(&other.0).all(|(&a, &b)| a <= b))
    }

    /// Increment one partition's entry by one.
    pub fn bump(&mut self, p: PartitionId) {
        self.0[p.index()] += 1;
    }
}

impl fmt::Debug for VectorClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vc{:?}", self.0)
    }
}
