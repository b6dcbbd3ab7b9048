use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Kind of a non-chunk record stored in the metadata cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RecordKind {
    CacheLen,
    DurableLen,
    Lock,
}

impl RecordKind {
    fn tag(self) -> &'static str {
        match self {
            RecordKind::CacheLen => "cache-len",
            RecordKind::DurableLen => "durable-len",
            RecordKind::Lock => "lock",
        }
    }
}

/// 128-bit digest addressing one cache record.
///
/// Chunk keys hash `(path, chunk seq)`; metadata keys hash `(path, kind)`.
/// The first eight bytes double as the key's position on the hash ring.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CacheKey([u8; 16]);

impl CacheKey {
    pub fn chunk(path: &str, seq: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"chunk\0");
        h.update(path.as_bytes());
        h.update(b"\0");
        h.update(seq.to_le_bytes());
        Self::from_digest(&h.finalize())
    }

    pub fn record(path: &str, kind: RecordKind) -> Self {
        let mut h = Sha256::new();
        h.update(b"meta\0");
        h.update(path.as_bytes());
        h.update(b"\0");
        h.update(kind.tag().as_bytes());
        Self::from_digest(&h.finalize())
    }

    fn from_digest(d: &[u8]) -> Self {
        let mut out = [0u8; 16];
        out.copy_from_slice(&d[..16]);
        Self(out)
    }

    pub fn ring_position(&self) -> u64 {
        let mut b = [0u8; 8];
        b.copy_from_slice(&self.0[..8]);
        u64::from_be_bytes(b)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_inputs_equal_digests() {
        assert_eq!(
            CacheKey::chunk("/s/0/data", 3),
            CacheKey::chunk("/s/0/data", 3)
        );
        assert_ne!(
            CacheKey::chunk("/s/0/data", 3),
            CacheKey::chunk("/s/0/data", 4)
        );
        assert_ne!(
            CacheKey::chunk("/s/0/data", 3),
            CacheKey::chunk("/s/1/data", 3)
        );
        assert_ne!(
            CacheKey::record("/s/0/data", RecordKind::CacheLen),
            CacheKey::record("/s/0/data", RecordKind::Lock)
        );
    }

    #[test]
    fn path_and_seq_boundaries_do_not_alias() {
        // "/a1" + seq 0 must differ from "/a" + something that prints as "1".
        assert_ne!(CacheKey::chunk("/a1", 0), CacheKey::chunk("/a", 0));
    }
}
