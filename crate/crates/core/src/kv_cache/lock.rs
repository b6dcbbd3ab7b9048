//! Lease-style file locks stored as ordinary metadata records.

use serde::{Deserialize, Serialize};

use crate::simnet::SimTime;

/// Identifies one operation instance: the writer replica plus a random nonce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LockSignature {
    pub writer: u64,
    pub nonce: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LockRecord {
    /// `None` once released.
    pub owner: Option<LockSignature>,
    pub poisoned: bool,
    pub acquired_at: SimTime,
    pub poisoned_at: SimTime,
}

const ENCODED_LEN: usize = 1 + 16 + 1 + 8 + 8;

impl LockRecord {
    pub fn held_by(owner: LockSignature, now: SimTime) -> Self {
        Self {
            owner: Some(owner),
            poisoned: false,
            acquired_at: now,
            poisoned_at: 0,
        }
    }

    pub fn released(now: SimTime) -> Self {
        Self {
            owner: None,
            poisoned: false,
            acquired_at: now,
            poisoned_at: 0,
        }
    }

    pub fn is_free(&self) -> bool {
        self.owner.is_none()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ENCODED_LEN);
        match self.owner {
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.writer.to_le_bytes());
                out.extend_from_slice(&s.nonce.to_le_bytes());
            }
            None => {
                out.push(0);
                out.extend_from_slice(&[0u8; 16]);
            }
        }
        out.push(self.poisoned as u8);
        out.extend_from_slice(&self.acquired_at.to_le_bytes());
        out.extend_from_slice(&self.poisoned_at.to_le_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() != ENCODED_LEN {
            return None;
        }
        let u = |r: std::ops::Range<usize>| u64::from_le_bytes(b[r].try_into().unwrap());
        let owner = match b[0] {
            0 => None,
            1 => Some(LockSignature {
                writer: u(1..9),
                nonce: u(9..17),
            }),
            _ => return None,
        };
        Some(Self {
            owner,
            poisoned: b[17] != 0,
            acquired_at: u(18..26),
            poisoned_at: u(26..34),
        })
    }
}

/// Result of trying to take a lock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockOutcome {
    Acquired,
    /// The metadata cache could not be consulted; locks are best-effort so
    /// the caller proceeds as if it held the lock.
    AcquiredWithoutLock,
    HeldByOther(LockRecord),
}

/// Result of an owner's periodic lock check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LockCheck {
    Held,
    /// Someone poisoned our lease; we must terminate.
    Poisoned,
    /// The record now names a different owner (seized) or is gone.
    Lost,
    Unavailable,
}
