//! Domain primitives shared by every layer: keys, values, sequence numbers,
//! identifiers, and the simulated packet record.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::piggyback::PiggybackMessage;

/// Maximum key length on the wire (`key_len` is a `u8`, zero is invalid).
pub const MAX_KEY_LEN: usize = 255;
/// Maximum value length on the wire (`value_len` is a `u16`).
pub const MAX_VALUE_LEN: usize = 65535;

/// Monotone per-partition write counter. Zero means "no update yet".
pub type SeqNo = u64;

/// An opaque state-variable name, 1..=255 bytes.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Key(Vec<u8>);

impl Key {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        let bytes = bytes.into();
        assert!(
            !bytes.is_empty() && bytes.len() <= MAX_KEY_LEN,
            "key length must be 1..=255, got {}",
            bytes.len()
        );
        Key(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false // length 1..=255 by construction
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Key({})", String::from_utf8_lossy(&self.0))
    }
}

impl From<&str> for Key {
    fn from(s: &str) -> Self {
        Key::new(s.as_bytes().to_vec())
    }
}

/// An opaque state-variable value, up to 64 KiB.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub struct Value(Vec<u8>);

impl Value {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        let bytes = bytes.into();
        assert!(
            bytes.len() <= MAX_VALUE_LEN,
            "value length must be <= 65535, got {}",
            bytes.len()
        );
        Value(bytes)
    }

    /// Big-endian u64 encoding, used by counter-style middlebox state.
    pub fn from_u64(v: u64) -> Self {
        Value(v.to_be_bytes().to_vec())
    }

    /// Reads this value back as a big-endian u64; zero if malformed.
    pub fn as_u64(&self) -> u64 {
        match <[u8; 8]>::try_from(self.0.as_slice()) {
            Ok(b) => u64::from_be_bytes(b),
            Err(_) => 0,
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.len() == 8 {
            write!(f, "Value(u64:{})", self.as_u64())
        } else {
            write!(f, "Value({}B)", self.0.len())
        }
    }
}

/// Identifies a middlebox within a chain (its 1-based chain position).
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize,
)]
pub struct MiddleboxId(pub u16);

impl fmt::Display for MiddleboxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// A state partition index within one middlebox, `0..P`.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize,
)]
pub struct PartitionId(pub u16);

impl PartitionId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Maps a key to its state partition. Deterministic and identical on every
/// node: FNV-1a 64-bit over the key bytes, reduced mod `p`.
pub fn partition_of(key: &Key, p: u16) -> PartitionId {
    assert!(p >= 1, "partition count must be >= 1");
    PartitionId((fnv1a64(key.as_bytes()) % u64::from(p)) as u16)
}

/// FNV-1a 64-bit.
pub fn fnv1a64(data: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in data {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Distinguishes traffic from the piggyback-circulation packets that carry
/// state during idle gaps or after a middlebox drop.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum PacketKind {
    Data,
    Propagating,
}

/// A simulated packet. Only the piggyback region has a bit-exact wire layout;
/// the rest is a simulator record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Packet {
    pub flow_id: u64,
    /// Generator-assigned, unique per simulation run.
    pub packet_id: u64,
    pub payload: Vec<u8>,
    pub piggyback: Option<PiggybackMessage>,
    pub kind: PacketKind,
    /// Deployment epoch stamped at chain ingress; used for fencing.
    pub epoch: u64,
}

impl Packet {
    pub fn data(flow_id: u64, packet_id: u64, payload: Vec<u8>) -> Self {
        Packet {
            flow_id,
            packet_id,
            payload,
            piggyback: None,
            kind: PacketKind::Data,
            epoch: 0,
        }
    }

    /// Consumes a data packet into the propagating packet that carries its
    /// piggyback state onward (emitted by a Head whose middlebox dropped it).
    pub fn into_propagating(mut self) -> Self {
        self.payload.clear();
        self.kind = PacketKind::Propagating;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_single_partition_is_zero() {
        for k in ["a", "flow:42", "pool:free"] {
            assert_eq!(partition_of(&Key::from(k), 1), PartitionId(0));
        }
    }

    #[test]
    fn partition_of_matches_fnv1a_reference() {
        // Frozen from an independent FNV-1a-64 computation.
        assert_eq!(fnv1a64(b"flow:42"), 0xd59f_875d_82b8_d17b);
        assert_eq!(partition_of(&Key::from("flow:42"), 4), PartitionId(3));
    }

    #[test]
    fn partition_of_is_stable_across_callers() {
        // Determinism law: the mapping depends on nothing but (key, P).
        let keys: Vec<Key> = (0..10_000u64)
            .map(|i| Key::new(format!("k{i}").into_bytes()))
            .collect();
        for key in &keys {
            let head = partition_of(key, 8);
            let replica = partition_of(key, 8);
            assert_eq!(head, replica);
            assert!(head.0 < 8);
        }
    }

    #[test]
    #[should_panic(expected = "key length")]
    fn empty_key_rejected() {
        let _ = Key::new(Vec::new());
    }
}
