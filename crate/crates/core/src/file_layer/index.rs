use serde::{Deserialize, Serialize};

pub const INDEX_RECORD_LEN: usize = 28;

/// One fixed-width little-endian entry of a shard's index file.
///
/// A record with `seq == u64::MAX` seals the file: `data_offset` is then the
/// final data length and no more records follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub data_offset: u64,
    pub data_len: u32,
    pub produce_time_ms: u64,
    pub seq: u64,
}

impl IndexRecord {
    pub const SEAL_SEQ: u64 = u64::MAX;

    pub fn seal(data_len_total: u64, now: u64) -> Self {
        Self {
            data_offset: data_len_total,
            data_len: 0,
            produce_time_ms: now,
            seq: Self::SEAL_SEQ,
        }
    }

    pub fn is_seal(&self) -> bool {
        self.seq == Self::SEAL_SEQ
    }

    pub fn data_end(&self) -> u64 {
        self.data_offset + self.data_len as u64
    }

    pub fn encode(&self) -> [u8; INDEX_RECORD_LEN] {
        let mut b = [0u8; INDEX_RECORD_LEN];
        b[0..8].copy_from_slice(&self.data_offset.to_le_bytes());
        b[8..12].copy_from_slice(&self.data_len.to_le_bytes());
        b[12..20].copy_from_slice(&self.produce_time_ms.to_le_bytes());
        b[20..28].copy_from_slice(&self.seq.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() != INDEX_RECORD_LEN {
            return None;
        }
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        Some(Self {
            data_offset: u64_at(0),
            data_len: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            produce_time_ms: u64_at(12),
            seq: u64_at(20),
        })
    }

    /// Decode every whole record in `b`; a trailing partial record is ignored.
    pub fn decode_all(b: &[u8]) -> Vec<Self> {
        b.chunks_exact(INDEX_RECORD_LEN)
            .map(|c| Self::decode(c).expect("exact chunk"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let r = IndexRecord {
            data_offset: 0x0102,
            data_len: 7,
            produce_time_ms: 9,
            seq: 3,
        };
        let b = r.encode();
        assert_eq!(&b[0..2], &[0x02, 0x01]);
        assert_eq!(b[8], 7);
        assert_eq!(b[12], 9);
        assert_eq!(b[20], 3);
        assert_eq!(IndexRecord::decode(&b), Some(r));
    }

    #[test]
    fn decode_all_drops_partial_tail() {
        let r = IndexRecord::seal(10, 1);
        let mut b = r.encode().to_vec();
        b.extend_from_slice(&[1, 2, 3]);
        assert_eq!(IndexRecord::decode_all(&b), vec![r]);
        assert!(r.is_seal());
    }
}
