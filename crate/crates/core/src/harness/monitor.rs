//! Correctness monitor: every consumer must see exactly a prefix of what the
//! producer wrote, and at quiescence all of it.

use serde::{Deserialize, Serialize};

/// Produced bytes of one (stream, shard) plus each consumer's position.
#[derive(Debug, Clone, Default)]
pub struct ShardLog {
    pub k_bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub offset: u64,
    pub expected: Option<u8>,
    pub actual: u8,
}

/// A consumer's view of one shard: how many bytes it has read so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadCursor {
    pub read: u64,
}

impl ShardLog {
    pub fn produce(&mut self, bytes: &[u8]) {
        self.k_bytes.extend_from_slice(bytes);
    }

    pub fn len(&self) -> u64 {
        self.k_bytes.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.k_bytes.is_empty()
    }

    /// Check that `bytes` continue the consumer's prefix of `k_bytes`.
    /// The cursor only advances on success.
    pub fn observe(&self, cur: &mut ReadCursor, bytes: &[u8]) -> Result<(), Divergence> {
        let start = cur.read as usize;
        for (i, &b) in bytes.iter().enumerate() {
            let expected = self.k_bytes.get(start + i).copied();
            if expected != Some(b) {
                return Err(Divergence {
                    offset: (start + i) as u64,
                    expected,
                    actual: b,
                });
            }
        }
        cur.read += bytes.len() as u64;
        Ok(())
    }

    /// Termination: the consumer has read everything produced.
    pub fn complete(&self, cur: &ReadCursor) -> bool {
        cur.read == self.len()
    }
}
