//! Sequential shard consumer.
//!
//! A shard is a chain of (index, data) file pairs. The consumer reads index
//! records first, then the data bytes they describe, and emits messages in
//! file order. Each file picks its layer per poll with the delayed-read
//! policy. A consumer that finds chunks below `cache_len` already gone is
//! lagging and reads the durable log directly until it is back within one
//! chunk of `cache_len` or has read all the durable log has.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::read::read_durable_direct;
use super::{
    data_path, index_path, read_range_cached, DelayedReadState, FileMeta, IndexRecord,
    LengthPoller, RangeRead, ReadStats, StorageView, INDEX_RECORD_LEN,
};
use crate::simnet::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsumerConfig {
    pub poll_ms: u64,
    /// Data bytes per second; 0 disables the cap.
    pub rate_cap_bps: u64,
    pub max_delay_ms: u64,
    pub durable_poll_ms: u64,
}

impl Default for ConsumerConfig {
    fn default() -> Self {
        Self {
            poll_ms: 100,
            rate_cap_bps: 0,
            max_delay_ms: 1000,
            durable_poll_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsumedMessage {
    pub file_no: u32,
    pub seq: u64,
    pub data_offset: u64,
    pub produce_time_ms: u64,
    pub bytes: Vec<u8>,
}

/// Result of one poll cycle.
#[derive(Debug, Clone, Default)]
pub struct ConsumerStep {
    pub messages: Vec<ConsumedMessage>,
    /// Newly accepted bytes: (path, offset, bytes).
    pub reads: Vec<(String, u64, Vec<u8>)>,
    pub latency_ms: u64,
    pub stats: ReadStats,
    /// Set when the index stopped describing a contiguous data file.
    pub corrupt: Option<String>,
}

#[derive(Debug, Clone)]
struct FileCursor {
    pos: u64,
    policy: DelayedReadState,
    lagging: bool,
}

impl FileCursor {
    fn new(max_delay_ms: u64) -> Self {
        Self {
            pos: 0,
            policy: DelayedReadState::new(max_delay_ms),
            lagging: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShardConsumer {
    pub stream: String,
    pub shard: u32,
    cfg: ConsumerConfig,
    file_no: u32,
    index: FileCursor,
    data: FileCursor,
    records: VecDeque<IndexRecord>,
    /// Data bytes read but not yet emitted; starts at `emitted`.
    data_buf: Vec<u8>,
    emitted: u64,
    sealed_at: Option<u64>,
    /// End of the last index record accepted for this file.
    indexed_end: u64,
    corrupt: Option<String>,
    tokens: u64,
    last_refill: Option<SimTime>,
    poller: LengthPoller,
    delivered_bytes: u64,
}

impl ShardConsumer {
    pub fn new(stream: impl Into<String>, shard: u32, cfg: ConsumerConfig) -> Self {
        Self {
            stream: stream.into(),
            shard,
            cfg,
            file_no: 0,
            index: FileCursor::new(cfg.max_delay_ms),
            data: FileCursor::new(cfg.max_delay_ms),
            records: VecDeque::new(),
            data_buf: Vec::new(),
            emitted: 0,
            sealed_at: None,
            indexed_end: 0,
            corrupt: None,
            tokens: 0,
            last_refill: None,
            poller: LengthPoller::new(cfg.durable_poll_ms),
            delivered_bytes: 0,
        }
    }

    pub fn config(&self) -> &ConsumerConfig {
        &self.cfg
    }

    pub fn file_no(&self) -> u32 {
        self.file_no
    }

    /// (file_no, index position, emitted data position).
    pub fn position(&self) -> (u32, u64, u64) {
        (self.file_no, self.index.pos, self.emitted)
    }

    pub fn delivered_bytes(&self) -> u64 {
        self.delivered_bytes
    }

    pub fn corruption(&self) -> Option<&str> {
        self.corrupt.as_deref()
    }

    pub fn is_lagging(&self) -> bool {
        self.data.lagging || self.index.lagging
    }

    fn refill(&mut self, now: SimTime) -> u64 {
        if self.cfg.rate_cap_bps == 0 {
            return u64::MAX;
        }
        let burst = (self.cfg.rate_cap_bps * self.cfg.poll_ms / 1000).max(1);
        let elapsed = self.last_refill.map_or(self.cfg.poll_ms, |t| now - t);
        self.last_refill = Some(now);
        self.tokens = (self.tokens + self.cfg.rate_cap_bps * elapsed / 1000).min(burst);
        self.tokens
    }

    /// One poll cycle: read whatever is available and emit messages.
    pub fn step(&mut self, view: &mut StorageView<'_>) -> ConsumerStep {
        let mut out = ConsumerStep::default();
        if self.corrupt.is_some() {
            return out;
        }
        // Rolling over may make the next file readable in the same cycle.
        for _ in 0..4 {
            let rolled = self.step_file(view, &mut out);
            if !rolled {
                break;
            }
        }
        out
    }

    fn step_file(&mut self, view: &mut StorageView<'_>, out: &mut ConsumerStep) -> bool {
        let ip = index_path(&self.stream, self.shard, self.file_no);
        let dp = data_path(&self.stream, self.shard, self.file_no);
        let metas = self.poller.poll(view, &[&ip, &dp]);
        let imeta = metas[&ip];
        let dmeta = metas[&dp];
        let geom = view.tuning.geom;

        // Both files consult the delayed-read policy on every poll.
        let index_durable = self.sealed_at.is_none()
            && choose_durable(&mut self.index, imeta, view.now, geom.chunk_size);
        let data_durable = choose_durable(&mut self.data, dmeta, view.now, geom.chunk_size);

        // Index: whole records only.
        if self.sealed_at.is_none() {
            let r = read_layer(
                view,
                &ip,
                &mut self.index,
                imeta,
                u64::MAX,
                geom.chunk_size,
                index_durable,
            );
            out.latency_ms = out.latency_ms.max(r.latency_ms);
            out.stats.add(&r.stats);
            let whole = r.bytes.len() - r.bytes.len() % INDEX_RECORD_LEN;
            if whole > 0 {
                let accepted = &r.bytes[..whole];
                for rec in IndexRecord::decode_all(accepted) {
                    if rec.data_offset != self.indexed_end {
                        let why = format!(
                            "file {} index record at data offset {} but expected {}",
                            self.file_no, rec.data_offset, self.indexed_end
                        );
                        out.corrupt = Some(why.clone());
                        self.corrupt = Some(why);
                        return false;
                    }
                    if rec.is_seal() {
                        self.sealed_at = Some(rec.data_offset);
                        break;
                    }
                    self.indexed_end = rec.data_end();
                    self.records.push_back(rec);
                }
                out.reads
                    .push((ip.clone(), self.index.pos, accepted.to_vec()));
                self.index.pos += whole as u64;
            }
        }

        // Data, up to the end of the last known record and within budget.
        let target = self
            .records
            .back()
            .map_or(self.data.pos, IndexRecord::data_end);
        if target > self.data.pos {
            let budget = self.refill(view.now);
            let want = (target - self.data.pos).min(budget);
            if want > 0 {
                let r = read_layer(
                    view,
                    &dp,
                    &mut self.data,
                    dmeta,
                    want,
                    geom.chunk_size,
                    data_durable,
                );
                out.latency_ms = out.latency_ms.max(r.latency_ms);
                out.stats.add(&r.stats);
                if !r.bytes.is_empty() {
                    if self.cfg.rate_cap_bps > 0 {
                        self.tokens = self.tokens.saturating_sub(r.bytes.len() as u64);
                    }
                    out.reads.push((dp.clone(), self.data.pos, r.bytes.clone()));
                    self.data.pos += r.bytes.len() as u64;
                    self.data_buf.extend_from_slice(&r.bytes);
                }
            }
        }

        while let Some(rec) = self.records.front() {
            if rec.data_end() > self.data.pos {
                break;
            }
            let rec = self.records.pop_front().unwrap();
            let lo = (rec.data_offset - self.emitted) as usize;
            let hi = lo + rec.data_len as usize;
            out.messages.push(ConsumedMessage {
                file_no: self.file_no,
                seq: rec.seq,
                data_offset: rec.data_offset,
                produce_time_ms: rec.produce_time_ms,
                bytes: self.data_buf[lo..hi].to_vec(),
            });
            self.delivered_bytes += rec.data_len as u64;
            self.data_buf.drain(..hi);
            self.emitted = rec.data_end();
        }

        match self.sealed_at {
            Some(end) if self.records.is_empty() && self.emitted >= end => {
                self.poller.forget(&ip);
                self.poller.forget(&dp);
                self.file_no += 1;
                self.index = FileCursor::new(self.cfg.max_delay_ms);
                self.data = FileCursor::new(self.cfg.max_delay_ms);
                self.data_buf.clear();
                self.emitted = 0;
                self.sealed_at = None;
                self.indexed_end = 0;
                true
            }
            _ => false,
        }
    }
}

fn choose_durable(cur: &mut FileCursor, meta: FileMeta, now: SimTime, chunk_size: u64) -> bool {
    let cache_len = meta.cache_len.unwrap_or(0);
    let durable_len = meta.durable_len.unwrap_or(0);
    if cur.lagging && cur.pos + chunk_size >= cache_len {
        cur.lagging = false;
    }
    let delayed = cur
        .policy
        .should_read_from_durable(cache_len, durable_len, now);
    cur.lagging || delayed
}

fn read_layer(
    view: &mut StorageView<'_>,
    path: &str,
    cur: &mut FileCursor,
    meta: FileMeta,
    max: u64,
    chunk_size: u64,
    durable: bool,
) -> RangeRead {
    let cache_len = meta.cache_len.unwrap_or(0);
    let durable_len = meta.durable_len.unwrap_or(0);
    if durable {
        if durable_len <= cur.pos {
            return RangeRead::default();
        }
        let r = read_durable_direct(view, path, cur.pos, (durable_len - cur.pos).min(max));
        // Caught up with the durable log, which may trail the cache.
        if cur.pos + r.bytes.len() as u64 >= durable_len {
            cur.lagging = false;
        }
        return r;
    }
    if cache_len <= cur.pos {
        return RangeRead::default();
    }
    let r = read_range_cached(
        view,
        path,
        cur.pos,
        (cache_len - cur.pos).min(max),
        cache_len,
    );
    if r.stats.fallback_reads > 0 && cur.pos + chunk_size < cache_len {
        cur.lagging = true;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::durable_log::{DurableConfig, DurableStore};
    use crate::file_layer::{publish_length, ReadTuning};
    use crate::kv_cache::{
        CacheKey, CacheKind, CacheReplicaConfig, KvCache, RecordKind, ReplicationConfig,
    };
    use crate::simnet::SimRng;
    use bytes::Bytes;

    struct Src {
        data: KvCache,
        meta: KvCache,
        durable: DurableStore,
        rng: SimRng,
        messages: Vec<Vec<u8>>,
    }

    impl Src {
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
                rng: SimRng::new(5),
                messages: Vec::new(),
            }
        }

        /// Append messages to file 0 durably, mirror all chunks into the
        /// cache when `cache` is set, and publish both lengths.
        fn produce(&mut self, n: usize, now: u64, cache: bool, seal: bool) {
            let dp = data_path("s", 0, 0);
            let ip = index_path("s", 0, 0);
            let before = [self.durable.length(&dp), self.durable.length(&ip)];
            let hd = self.durable.open_writer(&dp);
            let hi = self.durable.open_writer(&ip);
            for _ in 0..n {
                let i = self.messages.len();
                let msg: Vec<u8> = (0..(50 + i % 30)).map(|j| (i + j) as u8).collect();
                let off = self.durable.length(&dp);
                self.durable.append(&hd, &msg).unwrap();
                let rec = IndexRecord {
                    data_offset: off,
                    data_len: msg.len() as u32,
                    produce_time_ms: now,
                    seq: i as u64,
                };
                self.durable.append(&hi, &rec.encode()).unwrap();
                self.messages.push(msg);
            }
            if seal {
                let rec = IndexRecord::seal(self.durable.length(&dp), now);
                self.durable.append(&hi, &rec.encode()).unwrap();
            }
            for (p, before) in [(&dp, before[0]), (&ip, before[1])] {
                let all = self.durable.peek(p, 0, u64::MAX).to_vec();
                let v = now + 1;
                if cache {
                    let first = before as usize / 4096;
                    for (seq, c) in all.chunks(4096).enumerate().skip(first) {
                        self.data
                            .put(
                                CacheKey::chunk(p, seq as u64),
                                Bytes::copy_from_slice(c),
                                v,
                                now,
                            )
                            .unwrap();
                    }
                    publish_length(
                        &mut self.meta,
                        p,
                        RecordKind::CacheLen,
                        all.len() as u64,
                        v,
                        now,
                    )
                    .unwrap();
                }
                publish_length(
                    &mut self.meta,
                    p,
                    RecordKind::DurableLen,
                    all.len() as u64,
                    v,
                    now,
                )
                .unwrap();
            }
        }

        fn view(&mut self, now: u64) -> StorageView<'_> {
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

    #[test]
    fn emits_messages_in_order_from_cache() {
        let mut s = Src::new();
        s.produce(200, 0, true, false);
        let mut c = ShardConsumer::new("s", 0, ConsumerConfig::default());
        let step = c.step(&mut s.view(100));
        assert_eq!(step.messages.len(), 200);
        for (m, want) in step.messages.iter().zip(&s.messages) {
            assert_eq!(&m.bytes, want);
        }
        assert_eq!(step.stats.durable_reads(), 0);
        let idle = c.step(&mut s.view(200));
        assert!(idle.messages.is_empty() && idle.reads.is_empty());
    }

    #[test]
    fn late_consumer_reads_durable_then_cache() {
        let mut s = Src::new();
        s.produce(500, 0, true, false);
        // Everything expired from the data cache.
        s.data.gc_tick(600_000);
        s.produce(10, 600_000, true, false);
        let mut c = ShardConsumer::new(
            "s",
            0,
            ConsumerConfig {
                rate_cap_bps: 200_000,
                ..ConsumerConfig::default()
            },
        );
        let mut now = 600_100;
        let mut got = 0;
        let mut durable_steps = 0;
        while got < 510 {
            let st = c.step(&mut s.view(now));
            if st.stats.durable_reads() > 0 {
                durable_steps += 1;
            }
            got += st.messages.len();
            now += 100;
            assert!(now < 700_000);
        }
        assert!(durable_steps > 1);
        // Caught up: the next poll goes back to the cache.
        c.step(&mut s.view(now));
        assert!(!c.is_lagging());
    }

    #[test]
    fn rate_cap_limits_bytes_per_poll() {
        let mut s = Src::new();
        s.produce(1000, 0, true, false);
        let mut c = ShardConsumer::new(
            "s",
            0,
            ConsumerConfig {
                rate_cap_bps: 100_000,
                ..ConsumerConfig::default()
            },
        );
        let st = c.step(&mut s.view(100));
        let bytes: usize = st
            .reads
            .iter()
            .filter(|(p, _, _)| p.ends_with(".data"))
            .map(|(_, _, b)| b.len())
            .sum();
        assert!(bytes <= 10_000, "{bytes}");
        assert!(bytes > 0);
    }

    #[test]
    fn durable_only_when_cache_never_written() {
        let mut s = Src::new();
        s.produce(20, 0, false, true);
        let mut c = ShardConsumer::new("s", 0, ConsumerConfig::default());
        assert!(c.step(&mut s.view(0)).messages.is_empty());
        // The delayed-read policy waits out max_delay before going durable.
        let st = c.step(&mut s.view(1001));
        assert_eq!(st.messages.len(), 20);
        assert!(st.stats.direct_durable_reads > 0);
        assert_eq!(c.file_no(), 1);
    }
}
