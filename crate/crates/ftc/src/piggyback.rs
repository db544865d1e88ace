//! The on-packet replication payload and its bit-exact wire codec.
//!
//! A piggyback message is a list of per-middlebox commit logs. Each commit
//! log carries the middlebox id, a commit vector `C` proving f+1 replication
//! up to `C`, and a piggyback log `(S, V1, V2)`: the state updates of one
//! transaction bracketed by its pre/post version vectors.

use serde::{Deserialize, Serialize};

use crate::types::{Key, MiddleboxId, Value};
use crate::vclock::VectorClock;

/// One transaction's replication payload. `v2 - v1` is a 0/1 vector with
/// ones exactly at the partitions the transaction wrote; `updates` is empty
/// iff `v1 == v2` (a read-only transaction).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiggybackLog {
    pub updates: Vec<(Key, Value)>,
    pub v1: VectorClock,
    pub v2: VectorClock,
}

impl PiggybackLog {
    /// Transaction-produced logs satisfy the stronger invariant that v2 - v1
    /// is 0/1 per partition; queue coalescing at the Forwarder may widen the
    /// bracket, so only the ordering is enforced here.
    pub fn new(updates: Vec<(Key, Value)>, v1: VectorClock, v2: VectorClock) -> Self {
        debug_assert_eq!(v1.len(), v2.len());
        debug_assert!(v1.leq(&v2).unwrap_or(false), "v1 must not exceed v2");
        debug_assert_eq!(updates.is_empty(), v1 == v2);
        PiggybackLog { updates, v1, v2 }
    }

    /// A read-only (no-op) log positioned at `at`.
    pub fn empty(at: VectorClock) -> Self {
        PiggybackLog {
            updates: Vec::new(),
            v1: at.clone(),
            v2: at,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.v1 == self.v2
    }

    pub fn partitions(&self) -> u16 {
        self.v1.len() as u16
    }
}

/// Per-middlebox piggyback commit log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pcl {
    pub middlebox: MiddleboxId,
    pub commit: VectorClock,
    pub pl: PiggybackLog,
}

impl Pcl {
    pub fn new(middlebox: MiddleboxId, commit: VectorClock, pl: PiggybackLog) -> Self {
        debug_assert_eq!(commit.len(), pl.v1.len());
        Pcl {
            middlebox,
            commit,
            pl,
        }
    }

    pub fn partitions(&self) -> u16 {
        self.commit.len() as u16
    }

    /// Exact wire size of this PCL.
    pub fn encoded_len(&self) -> usize {
        pcl_fixed_len(self.partitions())
            + self
                .pl
                .updates
                .iter()
                .map(|(k, v)| update_len(k, v))
                .sum::<usize>()
    }
}

/// The full on-packet payload: at most one PCL per middlebox.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PiggybackMessage {
    pcls: Vec<Pcl>,
}

impl PiggybackMessage {
    pub fn empty() -> Self {
        PiggybackMessage::default()
    }

    pub fn from_pcls(pcls: Vec<Pcl>) -> Self {
        let mut msg = PiggybackMessage::empty();
        for pcl in pcls {
            msg.push(pcl);
        }
        msg
    }

    /// Appends a PCL; panics if its middlebox is already present.
    pub fn push(&mut self, pcl: Pcl) {
        assert!(
            self.get(pcl.middlebox).is_none(),
            "duplicate PCL for {}",
            pcl.middlebox
        );
        self.pcls.push(pcl);
    }

    pub fn get(&self, m: MiddleboxId) -> Option<&Pcl> {
        self.pcls.iter().find(|p| p.middlebox == m)
    }

    pub fn get_mut(&mut self, m: MiddleboxId) -> Option<&mut Pcl> {
        self.pcls.iter_mut().find(|p| p.middlebox == m)
    }

    pub fn pcls(&self) -> &[Pcl] {
        &self.pcls
    }

    pub fn pcls_mut(&mut self) -> &mut [Pcl] {
        &mut self.pcls
    }

    pub fn retain(&mut self, keep: impl FnMut(&Pcl) -> bool) {
        self.pcls.retain(keep);
    }

    pub fn is_empty(&self) -> bool {
        self.pcls.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pcls.len()
    }

    /// Exact wire size: the analytic formula behind the codec.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.pcls.iter().map(Pcl::encoded_len).sum::<usize>()
    }
}

// ---------------------------------------------------------------------------
// Wire codec
// ---------------------------------------------------------------------------
//
// All integers big-endian.
//
//   header (8B): magic 0xF7C0 (u16), version 0x01 (u8), reserved (u8),
//                pcl_count (u16), reserved (u16)
//   per PCL:     middlebox_id (u16), p (u16),
//                commit p*u64, v1 p*u64, v2 p*u64,
//                update_count (u16)
//   per update:  key_len (u8), key bytes, value_len (u16), value bytes

pub const MAGIC: u16 = 0xF7C0;
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 8;

/// Fixed wire bytes of one PCL before its updates: ids and counts (6) plus
/// the three p-length vectors.
pub const fn pcl_fixed_len(p: u16) -> usize {
    6 + 3 * (p as usize) * 8
}

pub fn update_len(key: &Key, value: &Value) -> usize {
    1 + key.len() + 2 + value.len()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("message truncated at byte {0}")]
    Truncated(usize),
    #[error("duplicate PCL for middlebox {0}")]
    DuplicateMiddlebox(u16),
    #[error("PCL with zero partitions")]
    ZeroPartitions,
    #[error("update with zero-length key")]
    EmptyKey,
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
}

pub fn encode(msg: &PiggybackMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(msg.encoded_len());
    out.extend_from_slice(&MAGIC.to_be_bytes());
    out.push(VERSION);
    out.push(0);
    out.extend_from_slice(&(msg.pcls.len() as u16).to_be_bytes());
    out.extend_from_slice(&[0, 0]);
    for pcl in &msg.pcls {
        out.extend_from_slice(&pcl.middlebox.0.to_be_bytes());
        out.extend_from_slice(&pcl.partitions().to_be_bytes());
        for vc in [&pcl.commit, &pcl.pl.v1, &pcl.pl.v2] {
            for &e in vc.entries() {
                out.extend_from_slice(&e.to_be_bytes());
            }
        }
        out.extend_from_slice(&(pcl.pl.updates.len() as u16).to_be_bytes());
        for (key, value) in &pcl.pl.updates {
            out.push(key.len() as u8);
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&(value.len() as u16).to_be_bytes());
            out.extend_from_slice(value.as_bytes());
        }
    }
    debug_assert_eq!(out.len(), msg.encoded_len());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.pos + n > self.buf.len() {
            return Err(DecodeError::Truncated(self.buf.len()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PiggybackMessage, DecodeError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.u16()?;
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(DecodeError::BadVersion(version));
    }
    r.u8()?; // reserved
    let count = r.u16()?;
    r.u16()?; // reserved
    let mut msg = PiggybackMessage::empty();
    for _ in 0..count {
        let middlebox = MiddleboxId(r.u16()?);
        if msg.get(middlebox).is_some() {
            return Err(DecodeError::DuplicateMiddlebox(middlebox.0));
        }
        let p = r.u16()?;
        if p == 0 {
            return Err(DecodeError::ZeroPartitions);
        }
        let mut vectors = [const { Vec::new() }; 3];
        for vec in &mut vectors {
            vec.reserve(p as usize);
            for _ in 0..p {
                vec.push(r.u64()?);
            }
        }
        let [commit, v1, v2] = vectors;
        let update_count = r.u16()?;
        let mut updates = Vec::with_capacity(update_count as usize);
        for _ in 0..update_count {
            let key_len = r.u8()? as usize;
            if key_len == 0 {
                return Err(DecodeError::EmptyKey);
            }
            let key = Key::new(r.take(key_len)?.to_vec());
            let value_len = r.u16()? as usize;
            let value = Value::new(r.take(value_len)?.to_vec());
            updates.push((key, value));
        }
        msg.pcls.push(Pcl {
            middlebox,
            commit: VectorClock::from_entries(commit),
            pl: PiggybackLog {
                updates,
                v1: VectorClock::from_entries(v1),
                v2: VectorClock::from_entries(v2),
            },
        });
    }
    if r.pos != bytes.len() {
        return Err(DecodeError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(msg)
}
