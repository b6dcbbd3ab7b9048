//! Chunked file abstraction over the durable log and the data cache.
//!
//! A file is cut into fixed-size chunks; chunk `s` covers positions
//! `[s*size, (s+1)*size)` and is stored in the data cache as one value that
//! always starts at the chunk's first byte. Any prefix of a stored chunk is
//! therefore a correct prefix of the durable bytes at those positions.
//!
//! Each file has two published lengths in the metadata cache: `cache_len`
//! (bytes contiguously present in the data cache) and `durable_len`.

mod consumer;
mod delayed;
mod index;
mod read;
mod shadow;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use consumer::{ConsumedMessage, ConsumerConfig, ConsumerStep, ShardConsumer};
pub use delayed::DelayedReadState;
pub use index::{IndexRecord, INDEX_RECORD_LEN};
pub use read::{
    publish_length, read_range_cached, LengthPoller, RangeRead, ReadStats, ReadTuning, StorageView,
};
pub use shadow::{PendingPut, PutId, ShadowWriter};

pub const DEFAULT_CHUNK_SIZE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkGeometry {
    pub chunk_size: u64,
}

impl Default for ChunkGeometry {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
        }
    }
}

impl ChunkGeometry {
    pub fn new(chunk_size: u64) -> Self {
        assert!(chunk_size > 0, "chunk size must be positive");
        Self { chunk_size }
    }

    pub fn seq(&self, pos: u64) -> u64 {
        pos / self.chunk_size
    }

    pub fn offset_in_chunk(&self, pos: u64) -> u64 {
        pos % self.chunk_size
    }

    pub fn chunk_start(&self, seq: u64) -> u64 {
        seq * self.chunk_size
    }

    /// Start of the chunk containing `pos`.
    pub fn floor(&self, pos: u64) -> u64 {
        pos - pos % self.chunk_size
    }

    /// Chunk pieces covering `[offset, offset+len)`, ascending.
    pub fn chunk_span(&self, offset: u64, len: u64) -> Vec<(u64, Range<u64>)> {
        let mut out = Vec::new();
        let end = offset + len;
        let mut pos = offset;
        while pos < end {
            let seq = self.seq(pos);
            let lo = pos - self.chunk_start(seq);
            let hi = (end - self.chunk_start(seq)).min(self.chunk_size);
            out.push((seq, lo..hi));
            pos = self.chunk_start(seq) + hi;
        }
        out
    }

    /// Bytes chunk `seq` should hold when `cache_len` bytes are published.
    pub fn expected_fill(&self, seq: u64, cache_len: u64) -> u64 {
        cache_len
            .saturating_sub(self.chunk_start(seq))
            .min(self.chunk_size)
    }
}

/// Lengths of one file as seen through the metadata cache (and the direct
/// durable poll). `None` means unknown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMeta {
    pub cache_len: Option<u64>,
    pub durable_len: Option<u64>,
}

impl FileMeta {
    pub fn readable(&self) -> u64 {
        self.cache_len
            .unwrap_or(0)
            .max(self.durable_len.unwrap_or(0))
    }
}

pub fn encode_length(len: u64) -> [u8; 8] {
    len.to_le_bytes()
}

pub fn decode_length(b: &[u8]) -> Option<u64> {
    Some(u64::from_le_bytes(b.try_into().ok()?))
}

/// Path of file number `file_no` of a stream shard.
pub fn data_path(stream: &str, shard: u32, file_no: u32) -> String {
    format!("/{stream}/{shard}/{file_no:06}.data")
}

pub fn index_path(stream: &str, shard: u32, file_no: u32) -> String {
    format!("/{stream}/{shard}/{file_no:06}.index")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_examples() {
        let g = ChunkGeometry::default();
        assert_eq!(
            g.chunk_span(0, 10000),
            vec![(0, 0..4096), (1, 0..4096), (2, 0..1808)]
        );
        assert_eq!(g.chunk_span(4096, 1), vec![(1, 0..1)]);
        assert!(g.chunk_span(77, 0).is_empty());
        assert_eq!(g.chunk_span(4000, 200), vec![(0, 4000..4096), (1, 0..104)]);
    }

    #[test]
    fn expected_fill_rule() {
        let g = ChunkGeometry::default();
        assert_eq!(g.expected_fill(0, 10000), 4096);
        assert_eq!(g.expected_fill(2, 10000), 10000 - 8192);
        assert_eq!(g.expected_fill(3, 10000), 0);
    }

    #[test]
    fn paths_are_distinct_per_file() {
        assert_ne!(data_path("s", 0, 1), index_path("s", 0, 1));
        assert_ne!(data_path("s", 0, 1), data_path("s", 1, 1));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn span_covers_exactly(cs in 1u64..64, off in 0u64..500, len in 0u64..500) {
                let g = ChunkGeometry::new(cs);
                let mut pos = off;
                let mut last_seq = None;
                for (seq, r) in g.chunk_span(off, len) {
                    prop_assert_eq!(g.chunk_start(seq) + r.start, pos);
                    prop_assert!(r.end <= cs && r.start < r.end);
                    prop_assert!(last_seq.is_none_or(|s| seq > s));
                    last_seq = Some(seq);
                    pos = g.chunk_start(seq) + r.end;
                }
                prop_assert_eq!(pos, off + len);
            }
        }
    }
}
