//! Read path over both storage layers.

use std::collections::BTreeMap;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::{decode_length, encode_length, ChunkGeometry, FileMeta};
use crate::durable_log::{DurableError, DurableStore};
use crate::kv_cache::{CacheError, CacheKey, KvCache, ReadMode, RecordKind, ReplicaError, Version};
use crate::simnet::{SimRng, SimTime};

/// Latency model and knobs for cache and durable reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReadTuning {
    pub geom: ChunkGeometry,
    pub hedge_delay_ms: u64,
    pub cache_read_ms: u64,
    /// Client deadline for a cache request that gets no usable answer.
    pub cache_deadline_ms: u64,
    pub durable_read_ms: u64,
    /// Added to every round trip (consumers rerouted to another cluster).
    pub extra_latency_ms: u64,
}

impl Default for ReadTuning {
    fn default() -> Self {
        Self {
            geom: ChunkGeometry::default(),
            hedge_delay_ms: 30,
            cache_read_ms: 1,
            cache_deadline_ms: 50,
            durable_read_ms: 8,
            extra_latency_ms: 0,
        }
    }
}

/// Mutable access to one cluster's storage at one instant.
pub struct StorageView<'a> {
    pub data: &'a mut KvCache,
    pub meta: &'a mut KvCache,
    pub durable: &'a mut DurableStore,
    pub rng: &'a mut SimRng,
    pub now: SimTime,
    pub tuning: ReadTuning,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ReadStats {
    pub relaxed: u64,
    pub hedged: u64,
    pub consistent: u64,
    pub cache_chunks: u64,
    pub cache_bytes: u64,
    /// Durable reads caused by cache misses or short chunks.
    pub fallback_reads: u64,
    /// Durable reads chosen up front (delayed-read policy, lagging).
    pub direct_durable_reads: u64,
    pub durable_bytes: u64,
    pub durable_throttled: u64,
}

impl ReadStats {
    pub fn add(&mut self, o: &ReadStats) {
        self.relaxed += o.relaxed;
        self.hedged += o.hedged;
        self.consistent += o.consistent;
        self.cache_chunks += o.cache_chunks;
        self.cache_bytes += o.cache_bytes;
        self.fallback_reads += o.fallback_reads;
        self.direct_durable_reads += o.direct_durable_reads;
        self.durable_bytes += o.durable_bytes;
        self.durable_throttled += o.durable_throttled;
    }

    pub fn durable_reads(&self) -> u64 {
        self.fallback_reads + self.direct_durable_reads
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RangeRead {
    /// Bytes from the requested offset; shorter than requested if some
    /// positions were in neither layer.
    pub bytes: Vec<u8>,
    pub latency_ms: u64,
    pub stats: ReadStats,
}

fn relaxed_hedged(
    view: &mut StorageView<'_>,
    key: &CacheKey,
    stats: &mut ReadStats,
) -> (Option<Bytes>, u64) {
    let t = view.tuning;
    let rtt = t.cache_read_ms + t.extra_latency_ms;
    stats.relaxed += 1;
    let first = view.data.get_relaxed(key, view.now, view.rng);
    match first.result {
        Ok(v) => (v.map(|v| v.bytes), rtt),
        Err(ReplicaError::Migrating) => (None, rtt),
        Err(ReplicaError::Down | ReplicaError::Throttled) => {
            let others: Vec<_> = view
                .data
                .replica_set(key)
                .into_iter()
                .filter(|&r| r != first.replica)
                .collect();
            let Some(&second) = view.rng.pick(&others) else {
                return (None, t.cache_deadline_ms.max(rtt));
            };
            stats.hedged += 1;
            match view.data.read_replica(second, key, view.now) {
                Ok(v) => (v.map(|v| v.bytes), t.hedge_delay_ms + rtt),
                Err(_) => (None, t.cache_deadline_ms.max(t.hedge_delay_ms + rtt)),
            }
        }
    }
}

/// Read `[offset, offset+len)` preferring the data cache.
///
/// Per chunk: relaxed read, hedged to a second replica if the first gives no
/// answer; escalate to a consistent read when a chunk the published
/// `cache_len` says is present comes back short. Whatever is still missing
/// is fetched with one durable read spanning the first to the last missing
/// piece.
pub fn read_range_cached(
    view: &mut StorageView<'_>,
    path: &str,
    offset: u64,
    len: u64,
    cache_len: u64,
) -> RangeRead {
    let geom = view.tuning.geom;
    let mut stats = ReadStats::default();
    let span = geom.chunk_span(offset, len);
    let mut pieces: Vec<Option<Bytes>> = Vec::with_capacity(span.len());
    let mut cache_latency = 0;

    for (seq, r) in &span {
        let key = CacheKey::chunk(path, *seq);
        let need = r.end as usize;
        let (value, mut lat) = relaxed_hedged(view, &key, &mut stats);
        let mut got = value.filter(|b| b.len() >= need);
        if got.is_none() && geom.expected_fill(*seq, cache_len) >= need as u64 {
            stats.consistent += 1;
            match view.data.get_consistent(&key, view.now, view.rng) {
                Ok(v) => {
                    lat += view.tuning.cache_read_ms + 1 + view.tuning.extra_latency_ms;
                    got = v.map(|v| v.bytes).filter(|b| b.len() >= need);
                }
                Err(_) => lat += view.tuning.cache_deadline_ms,
            }
        }
        if got.is_some() {
            stats.cache_chunks += 1;
            stats.cache_bytes += r.end - r.start;
        }
        cache_latency = cache_latency.max(lat);
        pieces.push(got);
    }

    let mut latency = cache_latency;
    let first_missing = pieces.iter().position(Option::is_none);
    let last_missing = pieces.iter().rposition(Option::is_none);
    let mut durable_buf: Vec<u8> = Vec::new();
    let mut durable_from = 0;
    if let (Some(a), Some(b)) = (first_missing, last_missing) {
        durable_from = geom.chunk_start(span[a].0) + span[a].1.start;
        let to = geom.chunk_start(span[b].0) + span[b].1.end;
        stats.fallback_reads += 1;
        latency += view.tuning.durable_read_ms + view.tuning.extra_latency_ms;
        match view
            .durable
            .read(path, durable_from, to - durable_from, view.now)
        {
            Ok(b) => {
                stats.durable_bytes += b.len() as u64;
                durable_buf = b;
            }
            Err(DurableError::Throttled { retry_after_ms }) => {
                stats.durable_throttled += 1;
                latency += retry_after_ms;
            }
            Err(_) => {}
        }
    }

    let mut bytes = Vec::with_capacity(len as usize);
    for ((seq, r), piece) in span.iter().zip(&pieces) {
        match piece {
            Some(b) => bytes.extend_from_slice(&b[r.start as usize..r.end as usize]),
            None => {
                let abs = geom.chunk_start(*seq) + r.start;
                let lo = (abs - durable_from) as usize;
                let want = (r.end - r.start) as usize;
                let have = durable_buf.len().saturating_sub(lo).min(want);
                bytes.extend_from_slice(
                    &durable_buf[lo.min(durable_buf.len())..lo.min(durable_buf.len()) + have],
                );
                if have < want {
                    break;
                }
            }
        }
    }

    RangeRead {
        bytes,
        latency_ms: latency,
        stats,
    }
}

/// Direct durable read, counted as a chosen (not fallback) durable read.
pub(crate) fn read_durable_direct(
    view: &mut StorageView<'_>,
    path: &str,
    offset: u64,
    len: u64,
) -> RangeRead {
    let mut stats = ReadStats {
        direct_durable_reads: 1,
        ..ReadStats::default()
    };
    let mut latency = view.tuning.durable_read_ms + view.tuning.extra_latency_ms;
    let bytes = match view.durable.read(path, offset, len, view.now) {
        Ok(b) => b,
        Err(DurableError::Throttled { retry_after_ms }) => {
            stats.durable_throttled += 1;
            latency += retry_after_ms;
            Vec::new()
        }
        Err(_) => Vec::new(),
    };
    stats.durable_bytes = bytes.len() as u64;
    RangeRead {
        bytes,
        latency_ms: latency,
        stats,
    }
}

/// Write a length record to the metadata cache.
pub fn publish_length(
    meta: &mut KvCache,
    path: &str,
    kind: RecordKind,
    len: u64,
    version: Version,
    now: SimTime,
) -> Result<usize, CacheError> {
    meta.put(
        CacheKey::record(path, kind),
        Bytes::copy_from_slice(&encode_length(len)),
        version,
        now,
    )
}

/// Background length poller shared by all operations of one process.
///
/// Each poll does one consistent bulk read of both length records for all
/// paths. Independently, at most every `durable_poll_ms`, durable lengths
/// are polled straight from the durable store.
#[derive(Debug, Clone)]
pub struct LengthPoller {
    pub durable_poll_ms: u64,
    last_durable_poll: Option<SimTime>,
    durable_known: BTreeMap<String, u64>,
}

impl LengthPoller {
    pub fn new(durable_poll_ms: u64) -> Self {
        Self {
            durable_poll_ms,
            last_durable_poll: None,
            durable_known: BTreeMap::new(),
        }
    }

    pub fn forget(&mut self, path: &str) {
        self.durable_known.remove(path);
    }

    pub fn poll(
        &mut self,
        view: &mut StorageView<'_>,
        paths: &[&str],
    ) -> BTreeMap<String, FileMeta> {
        let mut keys = Vec::with_capacity(paths.len() * 2);
        for p in paths {
            keys.push(CacheKey::record(p, RecordKind::CacheLen));
            keys.push(CacheKey::record(p, RecordKind::DurableLen));
        }
        let res = if keys.is_empty() {
            Vec::new()
        } else {
            view.meta
                .bulk_get(&keys, ReadMode::Consistent, view.now, view.rng)
        };
        let due = self
            .last_durable_poll
            .is_none_or(|t| view.now >= t + self.durable_poll_ms);
        if due {
            self.last_durable_poll = Some(view.now);
            for p in paths {
                if let Ok(n) = view.durable.poll_length(p) {
                    let e = self.durable_known.entry(p.to_string()).or_default();
                    *e = (*e).max(n);
                }
            }
        }
        let decode = |r: &Result<Option<crate::kv_cache::VersionedValue>, CacheError>| {
            r.as_ref()
                .ok()
                .and_then(|v| v.as_ref())
                .and_then(|v| decode_length(&v.bytes))
        };
        let mut out = BTreeMap::new();
        for (i, p) in paths.iter().enumerate() {
            let cache_len = decode(&res[2 * i]);
            let meta_durable = decode(&res[2 * i + 1]);
            let polled = self.durable_known.get(*p).copied();
            let durable_len = match (meta_durable, polled) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            };
            out.insert(
                p.to_string(),
                FileMeta {
                    cache_len,
                    durable_len,
                },
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::durable_log::DurableConfig;
    use crate::kv_cache::{CacheKind, CacheReplicaConfig, ReplicationConfig};

    struct World {
        data: KvCache,
        meta: KvCache,
        durable: DurableStore,
        rng: SimRng,
    }

    impl World {
        fn new() -> Self {
            Self {
                data: KvCache::new(
                    CacheKind::Data,
                    3,
                    ReplicationConfig::default(),
                    CacheReplicaConfig::data_default(),
                ),
                meta: KvCache::new(
                    CacheKind::Metadata,
                    3,
                    ReplicationConfig::default(),
                    CacheReplicaConfig::metadata_default(),
                ),
                durable: DurableStore::new(DurableConfig::default()),
                rng: SimRng::new(11),
            }
        }

        fn view(&mut self, now: SimTime) -> StorageView<'_> {
            StorageView {
                data: &mut self.data,
                meta: &mut self.meta,
                durable: &mut self.durable,
                rng: &mut self.rng,
                now,
                tuning: ReadTuning::default(),
            }
        }
    }

    fn src(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i * 7 % 256) as u8).collect()
    }

    fn put_chunk(w: &mut World, path: &str, seq: u64, bytes: &[u8], version: u64) {
        w.data
            .put(
                CacheKey::chunk(path, seq),
                Bytes::copy_from_slice(bytes),
                version,
                0,
            )
            .unwrap();
    }

    #[test]
    fn all_cached_means_no_durable_reads() {
        let mut w = World::new();
        let s = src(3 * 4096);
        for seq in 0..3 {
            put_chunk(
                &mut w,
                "/f",
                seq,
                &s[seq as usize * 4096..(seq as usize + 1) * 4096],
                1,
            );
        }
        let r = read_range_cached(&mut w.view(1), "/f", 100, 10000, s.len() as u64);
        assert_eq!(r.bytes, &s[100..10100]);
        assert_eq!(r.stats.durable_reads(), 0);
        assert_eq!(r.latency_ms, 1);
    }

    #[test]
    fn lagging_replica_escalates_to_consistent() {
        let mut w = World::new();
        let s = src(4096);
        let key = CacheKey::chunk("/f", 0);
        let set = w.data.replica_set(&key);
        for r in &set {
            w.data
                .apply(*r, key, Bytes::copy_from_slice(&s[..2000]), 1, 0);
        }
        w.data.apply(set[1], key, Bytes::copy_from_slice(&s), 2, 1);
        w.data.apply(set[2], key, Bytes::copy_from_slice(&s), 2, 1);
        let mut escalated = 0;
        for t in 0..40 {
            let r = read_range_cached(&mut w.view(2 + t), "/f", 0, 4096, 4096);
            assert_eq!(r.bytes, s);
            assert_eq!(r.stats.durable_reads(), 0);
            escalated += r.stats.consistent;
        }
        assert!(escalated > 0);
    }

    #[test]
    fn missing_chunks_fetched_in_one_durable_read() {
        let mut w = World::new();
        let s = src(6 * 4096);
        let h = w.durable.open_writer("/f");
        w.durable.append(&h, &s).unwrap();
        for seq in [0u64, 1, 2, 4] {
            put_chunk(
                &mut w,
                "/f",
                seq,
                &s[seq as usize * 4096..(seq as usize + 1) * 4096],
                1,
            );
        }
        let r = read_range_cached(&mut w.view(1), "/f", 0, 6 * 4096, 6 * 4096);
        assert_eq!(r.bytes, s);
        assert_eq!(r.stats.fallback_reads, 1);
        // Chunks 3 to 5 come from the durable log in one read.
        assert_eq!(r.stats.durable_bytes, 3 * 4096);
        assert_eq!(w.durable.stats().reads, 1);
    }

    #[test]
    fn short_everywhere_returns_prefix() {
        let mut w = World::new();
        let s = src(5000);
        let h = w.durable.open_writer("/f");
        w.durable.append(&h, &s[..4500]).unwrap();
        put_chunk(&mut w, "/f", 0, &s[..4096], 1);
        let r = read_range_cached(&mut w.view(1), "/f", 0, 5000, 4096);
        assert_eq!(r.bytes, &s[..4500]);
    }

    #[test]
    fn dead_first_replica_is_hedged() {
        let mut w = World::new();
        let s = src(100);
        put_chunk(&mut w, "/f", 0, &s, 1);
        let set = w.data.replica_set(&CacheKey::chunk("/f", 0));
        w.data.kill_replica(set[0]);
        let mut hedged = 0;
        for t in 0..30 {
            let r = read_range_cached(&mut w.view(t), "/f", 0, 100, 100);
            assert_eq!(r.bytes, s);
            if r.stats.hedged > 0 {
                hedged += 1;
                assert_eq!(r.latency_ms, 31);
            }
        }
        assert!(hedged > 0);
    }

    #[test]
    fn poller_batches_and_falls_back_to_durable() {
        let mut w = World::new();
        let paths: Vec<String> = (0..8).map(|i| format!("/f{i}")).collect();
        for (i, p) in paths.iter().enumerate() {
            publish_length(&mut w.meta, p, RecordKind::CacheLen, i as u64, 1, 0).unwrap();
            publish_length(&mut w.meta, p, RecordKind::DurableLen, 10 + i as u64, 1, 0).unwrap();
        }
        let refs: Vec<&str> = paths.iter().map(String::as_str).collect();
        let mut poller = LengthPoller::new(1000);
        w.meta.take_load();
        let m = poller.poll(&mut w.view(1), &refs);
        assert!(w.meta.take_load().iter().all(|(_, l)| l.requests <= 1));
        assert_eq!(
            m["/f3"],
            FileMeta {
                cache_len: Some(3),
                durable_len: Some(10 + 3)
            }
        );
        assert_eq!(poller.poll(&mut w.view(2), &refs), m);

        // Metadata cache gone: durable length still moves, at the slow cadence.
        for r in w.meta.members() {
            w.meta.kill_replica(r);
        }
        let h = w.durable.open_writer("/f0");
        w.durable.append(&h, &[0; 100]).unwrap();
        let m = poller.poll(&mut w.view(500), &refs);
        assert_eq!(
            m["/f0"],
            FileMeta {
                cache_len: None,
                durable_len: Some(0)
            }
        );
        let m = poller.poll(&mut w.view(1001), &refs);
        assert_eq!(m["/f0"].durable_len, Some(100));
    }
}
