//! Writer-side chunk assembly for the data cache.
//!
//! Bytes may arrive out of order (parallel deltas from a cache reader). Each
//! chunk keeps the prefix known so far plus parked pieces that start beyond
//! it; a parked piece is merged once the bytes before it arrive. A chunk is
//! written whenever its known prefix grows, always from offset 0, with at
//! most one put in flight per chunk: new bytes arriving meanwhile are sent by
//! a follow-up put when the current one completes. Complete chunks for
//! different sequence numbers go out in parallel.
//!
//! The publishable length stops at the first chunk whose acked prefix is not
//! full.

use std::collections::BTreeMap;

use bytes::Bytes;

use super::ChunkGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PutId(pub u64);

/// A chunk write the caller must issue to the data cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingPut {
    pub id: PutId,
    pub seq: u64,
    /// Chunk bytes from offset 0.
    pub bytes: Bytes,
    /// Chunk prefix length the writer counts as acked once this put succeeds.
    pub end: usize,
}

#[derive(Debug, Clone, Default)]
struct ChunkState {
    prefix: Vec<u8>,
    parked: BTreeMap<usize, Vec<u8>>,
    acked_len: usize,
    in_flight: Option<(PutId, usize)>,
}

#[derive(Debug, Clone)]
pub struct ShadowWriter {
    geom: ChunkGeometry,
    base: u64,
    /// Every chunk below this seq is fully acked and forgotten.
    watermark: u64,
    chunks: BTreeMap<u64, ChunkState>,
    next_id: u64,
    /// When false, partial chunks are written from the first new byte instead
    /// of from the chunk start. Only for mutation testing.
    write_from_chunk_start: bool,
}

impl ShadowWriter {
    /// A writer whose stream begins at `base`, which must be chunk-aligned.
    pub fn new(geom: ChunkGeometry, base: u64) -> Self {
        assert_eq!(
            base % geom.chunk_size,
            0,
            "writer base must be chunk-aligned"
        );
        Self {
            geom,
            base,
            watermark: geom.seq(base),
            chunks: BTreeMap::new(),
            next_id: 0,
            write_from_chunk_start: true,
        }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn geometry(&self) -> ChunkGeometry {
        self.geom
    }

    /// Feed `bytes` at file position `offset`. Returns the puts to issue.
    pub fn receive(&mut self, offset: u64, bytes: &[u8]) -> Vec<PendingPut> {
        let mut out = Vec::new();
        let end = offset + bytes.len() as u64;
        let start = offset.max(self.base);
        if start >= end {
            return out;
        }
        for (seq, r) in self.geom.chunk_span(start, end - start) {
            if seq < self.watermark {
                continue;
            }
            let src_lo = (self.geom.chunk_start(seq) + r.start - offset) as usize;
            let piece = &bytes[src_lo..src_lo + (r.end - r.start) as usize];
            let grew = self.merge(seq, r.start as usize, piece);
            if grew {
                if let Some(p) = self.maybe_put(seq) {
                    out.push(p);
                }
            }
        }
        out
    }

    fn merge(&mut self, seq: u64, at: usize, piece: &[u8]) -> bool {
        let c = self.chunks.entry(seq).or_default();
        let before = c.prefix.len();
        if at <= c.prefix.len() {
            let skip = c.prefix.len() - at;
            if skip < piece.len() {
                c.prefix.extend_from_slice(&piece[skip..]);
            }
        } else {
            let slot = c.parked.entry(at).or_default();
            if piece.len() > slot.len() {
                *slot = piece.to_vec();
            }
        }
        // Pull in parked pieces that now connect.
        while let Some((&at, _)) = c.parked.iter().next() {
            if at > c.prefix.len() {
                break;
            }
            let piece = c.parked.remove(&at).unwrap();
            let skip = c.prefix.len() - at;
            if skip < piece.len() {
                c.prefix.extend_from_slice(&piece[skip..]);
            }
        }
        c.prefix.len() > before
    }

    fn maybe_put(&mut self, seq: u64) -> Option<PendingPut> {
        let c = self.chunks.get_mut(&seq)?;
        if c.in_flight.is_some() || c.prefix.len() <= c.acked_len {
            return None;
        }
        let id = PutId(self.next_id);
        self.next_id += 1;
        let end = c.prefix.len();
        c.in_flight = Some((id, end));
        let bytes = if self.write_from_chunk_start || c.acked_len == 0 {
            Bytes::copy_from_slice(&c.prefix)
        } else {
            Bytes::copy_from_slice(&c.prefix[c.acked_len..])
        };
        Some(PendingPut {
            id,
            seq,
            bytes,
            end,
        })
    }

    /// Record the completion of a put. On success the chunk's acked prefix
    /// advances; on failure the same prefix is reissued. Returns the
    /// follow-up put for this chunk, if any.
    pub fn on_put_done(&mut self, seq: u64, id: PutId, ok: bool) -> Option<PendingPut> {
        let c = self.chunks.get_mut(&seq)?;
        match c.in_flight {
            Some((cur, len)) if cur == id => {
                c.in_flight = None;
                if ok {
                    c.acked_len = c.acked_len.max(len);
                }
            }
            _ => return None,
        }
        let next = self.maybe_put(seq);
        self.advance_watermark();
        next
    }

    fn advance_watermark(&mut self) {
        let cs = self.geom.chunk_size as usize;
        while let Some(c) = self.chunks.get(&self.watermark) {
            if c.acked_len < cs || c.in_flight.is_some() {
                break;
            }
            self.chunks.remove(&self.watermark);
            self.watermark += 1;
        }
    }

    /// Highest position with every byte below it acked in the cache.
    pub fn publishable(&self) -> u64 {
        let cs = self.geom.chunk_size as usize;
        let mut seq = self.watermark;
        loop {
            match self.chunks.get(&seq) {
                Some(c) if c.acked_len == cs => seq += 1,
                Some(c) => return self.geom.chunk_start(seq) + c.acked_len as u64,
                None => return self.geom.chunk_start(seq),
            }
        }
    }

    /// Highest position with every byte below it received.
    pub fn received_end(&self) -> u64 {
        let cs = self.geom.chunk_size as usize;
        let mut seq = self.watermark;
        loop {
            match self.chunks.get(&seq) {
                Some(c) if c.prefix.len() == cs => seq += 1,
                Some(c) => return self.geom.chunk_start(seq) + c.prefix.len() as u64,
                None => return self.geom.chunk_start(seq),
            }
        }
    }

    pub fn in_flight(&self) -> usize {
        self.chunks
            .values()
            .filter(|c| c.in_flight.is_some())
            .count()
    }

    pub fn parked_pieces(&self) -> usize {
        self.chunks.values().map(|c| c.parked.len()).sum()
    }

    /// True when nothing is in flight and every received byte is acked.
    pub fn is_idle(&self) -> bool {
        self.in_flight() == 0 && self.chunks.values().all(|c| c.acked_len == c.prefix.len())
    }

    /// Mutation hook: write only the new bytes of a partial chunk instead of
    /// rewriting it from offset 0.
    #[doc(hidden)]
    pub fn disable_write_from_chunk_start(&mut self) {
        self.write_from_chunk_start = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i % 251) as u8).collect()
    }

    fn ack_all(w: &mut ShadowWriter, mut puts: Vec<PendingPut>) -> Vec<PendingPut> {
        let mut all = Vec::new();
        while let Some(p) = puts.pop() {
            all.push(p.clone());
            if let Some(n) = w.on_put_done(p.seq, p.id, true) {
                puts.push(n);
            }
        }
        all
    }

    #[test]
    fn partial_chunk_rewritten_from_start() {
        let src = data(2100);
        let mut w = ShadowWriter::new(ChunkGeometry::default(), 0);
        let p = w.receive(0, &src[..2000]);
        ack_all(&mut w, p);
        let p = w.receive(2000, &src[2000..]);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].seq, 0);
        assert_eq!(&p[0].bytes[..], &src[..]);
    }

    #[test]
    fn large_write_spans_chunks() {
        let src = data(11000);
        let mut w = ShadowWriter::new(ChunkGeometry::default(), 0);
        let first = w.receive(0, &src[..2000]);
        ack_all(&mut w, first);
        let puts = w.receive(2000, &src[2000..]);
        let lens: Vec<(u64, usize)> = puts.iter().map(|p| (p.seq, p.bytes.len())).collect();
        // 11000 - 2 * 4096 = 2808 bytes land in chunk 2.
        assert_eq!(lens, vec![(0, 4096), (1, 4096), (2, 2808)]);
        ack_all(&mut w, puts);
        assert_eq!(w.publishable(), 11000);
    }

    #[test]
    fn figure_five_reordering() {
        // Chunk 0 already holds 1000 bytes. W1 adds 500 (still inside chunk
        // 0), W2 adds enough to reach into chunk 3, and W2 arrives first.
        let src = data(3 * 4096 + 300);
        let mut w = ShadowWriter::new(ChunkGeometry::default(), 0);
        let p = w.receive(0, &src[..1000]);
        ack_all(&mut w, p);

        let w2 = w.receive(1500, &src[1500..]);
        let seqs: Vec<u64> = w2.iter().map(|p| p.seq).collect();
        assert_eq!(seqs, vec![1, 2, 3]);
        assert_eq!(w.parked_pieces(), 1);
        for p in &w2 {
            assert!(w.on_put_done(p.seq, p.id, true).is_none());
        }
        // Chunk 0 is stuck at 1000 bytes.
        assert_eq!(w.publishable(), 1000);

        let w1 = w.receive(1000, &src[1000..1500]);
        assert_eq!(w1.len(), 1);
        assert_eq!(w1[0].seq, 0);
        assert_eq!(&w1[0].bytes[..], &src[..4096]);
        w.on_put_done(0, w1[0].id, true);
        assert_eq!(w.publishable(), src.len() as u64);
    }

    #[test]
    fn partial_writes_are_serialized() {
        let src = data(300);
        let mut w = ShadowWriter::new(ChunkGeometry::default(), 0);
        let a = w.receive(0, &src[..100]);
        assert_eq!(a.len(), 1);
        assert!(w.receive(100, &src[100..200]).is_empty());
        assert!(w.receive(200, &src[200..]).is_empty());
        let b = w.on_put_done(0, a[0].id, true).unwrap();
        assert_eq!(&b.bytes[..], &src[..]);
        assert_eq!(w.publishable(), 100);
        assert!(w.on_put_done(0, b.id, true).is_none());
        assert_eq!(w.publishable(), 300);
        assert!(w.is_idle());
    }

    #[test]
    fn pointer_waits_for_lower_chunk() {
        let src = data(3 * 4096);
        let mut w = ShadowWriter::new(ChunkGeometry::default(), 0);
        let puts = w.receive(0, &src);
        let by_seq: BTreeMap<u64, PendingPut> = puts.into_iter().map(|p| (p.seq, p)).collect();
        w.on_put_done(2, by_seq[&2].id, true);
        assert_eq!(w.publishable(), 0);
        w.on_put_done(0, by_seq[&0].id, true);
        assert_eq!(w.publishable(), 4096);
        w.on_put_done(1, by_seq[&1].id, true);
        assert_eq!(w.publishable(), 3 * 4096);
    }

    #[test]
    fn failed_put_is_reissued() {
        let src = data(10);
        let mut w = ShadowWriter::new(ChunkGeometry::default(), 0);
        let a = w.receive(0, &src).remove(0);
        let retry = w.on_put_done(0, a.id, false).unwrap();
        assert_eq!(retry.bytes, a.bytes);
        assert_eq!(w.publishable(), 0);
    }

    #[test]
    fn base_skips_earlier_bytes() {
        let src = data(9000);
        let mut w = ShadowWriter::new(ChunkGeometry::default(), 4096);
        let puts = w.receive(0, &src);
        assert_eq!(puts.iter().map(|p| p.seq).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(&puts[0].bytes[..], &src[4096..8192]);
        ack_all(&mut w, puts);
        assert_eq!(w.publishable(), 9000);
    }
}
