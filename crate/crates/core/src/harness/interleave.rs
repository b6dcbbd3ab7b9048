//! Interleaving checker for one file with dueling cache writers.
//!
//! A producer appends to the durable file; several cache writers copy it
//! into a three-replica data cache, each through its own shadow writer and
//! with no lock, so they clobber each other's chunks. Replica writes land,
//! get dropped, or are evicted in any order, and a consumer reads through
//! the regular cache read path. Every consumer read is checked against the
//! produced bytes; at quiescence the consumer must reach the end.
//!
//! Trials pick events at random. When the whole event tree is small enough
//! it is also walked exhaustively.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::durable_log::{DurableConfig, DurableStore, WriterHandle};
use crate::file_layer::{
    decode_length, publish_length, read_range_cached, ChunkGeometry, PendingPut, PutId, ReadTuning,
    ShadowWriter, StorageView,
};
use crate::kv_cache::{
    CacheKey, CacheKind, CacheReplicaConfig, KvCache, RecordKind, ReplicaId, ReplicationConfig,
};
use crate::simnet::SimRng;

const PATH: &str = "/check/0/0.data";
const REPLICAS: u8 = 3;
/// Guard against runaway trials; never reached by a correct model.
const MAX_STEPS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    #[default]
    None,
    /// Partial chunks are written from the first new byte.
    NoChunkPrefix,
    /// Writers publish what they received instead of what was acked.
    PublishBeforeAck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterleaveConfig {
    pub chunks: u64,
    pub chunk_bytes: u64,
    pub writers: usize,
    pub trials: u64,
    pub seed: u64,
    pub mutation: Mutation,
    /// Dropped replica writes plus evictions allowed per trial.
    pub max_faults: u32,
    /// Also walk every reachable state if there are at most this many;
    /// zero skips the walk.
    pub exhaustive_limit: u64,
}

impl Default for InterleaveConfig {
    fn default() -> Self {
        Self {
            chunks: 4,
            chunk_bytes: 4,
            writers: 2,
            trials: 1000,
            seed: 0,
            mutation: Mutation::None,
            max_faults: 3,
            exhaustive_limit: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Event {
    /// Producer appends `len` bytes to the durable file.
    Append {
        len: u64,
    },
    /// Writer copies `len` more bytes from the durable file.
    Pull {
        writer: usize,
        len: u64,
    },
    /// A replica receives (or loses) a writer's `put`-th chunk put.
    Land {
        writer: usize,
        put: u64,
        replica: u8,
        drop: bool,
    },
    /// All replicas answered; the writer learns the outcome.
    Complete {
        writer: usize,
        put: u64,
    },
    Evict {
        replica: u8,
        seq: u64,
    },
    ReadCache,
    ReadDurable,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Event::Append { len } => write!(f, "producer appends {len}"),
            Event::Pull { writer, len } => write!(f, "writer {writer} copies {len}"),
            Event::Land {
                writer,
                put,
                replica,
                drop: false,
            } => {
                write!(f, "replica {replica} applies put {writer}.{put}")
            }
            Event::Land {
                writer,
                put,
                replica,
                drop: true,
            } => {
                write!(f, "replica {replica} drops put {writer}.{put}")
            }
            Event::Complete { writer, put } => {
                write!(f, "writer {writer} completes put {writer}.{put}")
            }
            Event::Evict { replica, seq } => write!(f, "replica {replica} evicts chunk {seq}"),
            Event::ReadCache => write!(f, "consumer reads via cache"),
            Event::ReadDurable => write!(f, "consumer reads durable"),
        }
    }
}

impl Event {
    fn class(&self) -> u8 {
        match self {
            Event::Append { .. } => 0,
            Event::Pull { .. } => 1,
            Event::Land { drop: false, .. } => 2,
            Event::Land { drop: true, .. } => 3,
            Event::Complete { .. } => 4,
            Event::Evict { .. } => 5,
            Event::ReadCache | Event::ReadDurable => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    /// A consumer read returned a byte that differs from the produced one.
    Safety {
        offset: u64,
        expected: u8,
        actual: u8,
    },
    /// A consumer read returned bytes past the end of the file.
    Overrun { offset: u64 },
    /// A writer published a cache length over bytes it had no ack for.
    PointerRule {
        writer: usize,
        published: u64,
        acked_to: u64,
    },
    /// At quiescence the consumer could not read the whole file.
    Termination { read: u64, total: u64 },
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Safety { offset, expected, actual } => {
                write!(f, "safety: byte {offset} read as {actual}, produced {expected}")
            }
            Failure::Overrun { offset } => write!(f, "safety: read past end at {offset}"),
            Failure::PointerRule { writer, published, acked_to } => write!(
                f,
                "pointer rule: writer {writer} published {published} with bytes acked only to {acked_to}"
            ),
            Failure::Termination { read, total } => write!(f, "termination: read {read} of {total} bytes"),
        }
    }
}

impl Failure {
    fn same_kind(&self, o: &Failure) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(o)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    pub trial: u64,
    pub failure: Failure,
    pub events: Vec<Event>,
    /// A 1-minimal subsequence of `events` that still fails the same way.
    pub minimized: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterleaveReport {
    pub trials: u64,
    pub events: u64,
    pub consumer_reads: u64,
    pub clobbers: u64,
    /// Nodes visited by the exhaustive walk, if it ran to completion.
    pub exhaustive_nodes: Option<u64>,
    pub counterexample: Option<Counterexample>,
}

impl InterleaveReport {
    pub fn passed(&self) -> bool {
        self.counterexample.is_none()
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    seq: u64,
    id: PutId,
    bytes: Bytes,
    end: usize,
    version: u64,
    waiting: Vec<u8>,
    acks: usize,
}

#[derive(Debug, Clone)]
struct CacheWriter {
    next: u64,
    shadow: ShadowWriter,
    puts: BTreeMap<u64, InFlight>,
    issued: u64,
    /// Longest acked prefix per chunk.
    acked: BTreeMap<u64, usize>,
    published: u64,
}

#[derive(Debug, Clone)]
struct Model {
    geom: ChunkGeometry,
    total: u64,
    mutation: Mutation,
    max_faults: u32,
    durable: DurableStore,
    handle: WriterHandle,
    data: KvCache,
    meta: KvCache,
    rng: SimRng,
    clock: u64,
    writers: Vec<CacheWriter>,
    read: u64,
    faults: u32,
    /// Something other than the consumer happened since its last read.
    fresh: bool,
    clobbers: u64,
    consumer_reads: u64,
}

/// Produced byte at `pos`: distinct for every position of a small file.
fn k_byte(pos: u64) -> u8 {
    (pos * 37 % 251 + 1) as u8
}

impl Model {
    fn new(cfg: &InterleaveConfig, seed: u64) -> Self {
        let geom = ChunkGeometry::new(cfg.chunk_bytes);
        let mut durable = DurableStore::new(DurableConfig::default());
        let handle = durable.open_writer(PATH);
        let cache_cfg = CacheReplicaConfig::data_default();
        let repl = ReplicationConfig::default();
        let writers = (0..cfg.writers)
            .map(|_| {
                let mut shadow = ShadowWriter::new(geom, 0);
                if cfg.mutation == Mutation::NoChunkPrefix {
                    shadow.disable_write_from_chunk_start();
                }
                CacheWriter {
                    next: 0,
                    shadow,
                    puts: BTreeMap::new(),
                    issued: 0,
                    acked: BTreeMap::new(),
                    published: 0,
                }
            })
            .collect();
        Self {
            geom,
            total: cfg.chunks * cfg.chunk_bytes,
            mutation: cfg.mutation,
            max_faults: cfg.max_faults,
            durable,
            handle,
            data: KvCache::new(CacheKind::Data, REPLICAS as usize, repl, cache_cfg),
            meta: KvCache::new(
                CacheKind::Metadata,
                REPLICAS as usize,
                repl,
                CacheReplicaConfig::metadata_default(),
            ),
            rng: SimRng::new(seed),
            clock: 0,
            writers,
            read: 0,
            faults: 0,
            fresh: true,
            clobbers: 0,
            consumer_reads: 0,
        }
    }

    fn durable_len(&self) -> u64 {
        self.durable.length(PATH)
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn enabled(&self) -> Vec<Event> {
        let mut out = Vec::new();
        let dlen = self.durable_len();
        for len in 1..=(self.total - dlen).min(self.geom.chunk_size) {
            out.push(Event::Append { len });
        }
        for (w, cw) in self.writers.iter().enumerate() {
            for len in 1..=dlen - cw.next {
                out.push(Event::Pull { writer: w, len });
            }
            for (&put, f) in &cw.puts {
                if f.waiting.is_empty() {
                    out.push(Event::Complete { writer: w, put });
                }
                for &replica in &f.waiting {
                    out.push(Event::Land {
                        writer: w,
                        put,
                        replica,
                        drop: false,
                    });
                    if self.faults < self.max_faults {
                        out.push(Event::Land {
                            writer: w,
                            put,
                            replica,
                            drop: true,
                        });
                    }
                }
            }
        }
        if self.faults < self.max_faults {
            for replica in 0..REPLICAS {
                for seq in 0..self.total.div_ceil(self.geom.chunk_size) {
                    let key = CacheKey::chunk(PATH, seq);
                    if self
                        .data
                        .peek_replica(ReplicaId(replica.into()), &key)
                        .is_some()
                    {
                        out.push(Event::Evict { replica, seq });
                    }
                }
            }
        }
        if self.fresh && self.read < self.total {
            out.push(Event::ReadCache);
            if self.read < dlen {
                out.push(Event::ReadDurable);
            }
        }
        out
    }

    /// True when only consumer reads remain.
    fn quiescent(&self) -> bool {
        self.durable_len() == self.total
            && self
                .writers
                .iter()
                .all(|w| w.next == self.total && w.puts.is_empty())
    }

    fn issue(&mut self, w: usize, p: PendingPut) {
        let PendingPut {
            id,
            seq,
            bytes,
            end,
        } = p;
        let version = self.tick();
        let key = CacheKey::chunk(PATH, seq);
        let waiting = self
            .data
            .replica_set(&key)
            .iter()
            .map(|r| r.0 as u8)
            .collect();
        let cw = &mut self.writers[w];
        let put = cw.issued;
        cw.issued += 1;
        cw.puts.insert(
            put,
            InFlight {
                seq,
                id,
                bytes,
                end,
                version,
                waiting,
                acks: 0,
            },
        );
    }

    fn publish(&mut self, w: usize, len: u64) -> Result<(), Failure> {
        if len <= self.writers[w].published {
            return Ok(());
        }
        let acked_to = self.acked_to(w);
        if len > acked_to {
            return Err(Failure::PointerRule {
                writer: w,
                published: len,
                acked_to,
            });
        }
        self.writers[w].published = len;
        let v = self.tick();
        let _ = publish_length(&mut self.meta, PATH, RecordKind::CacheLen, len, v, v);
        Ok(())
    }

    /// End of the contiguous prefix writer `w` has acks for.
    fn acked_to(&self, w: usize) -> u64 {
        let cs = self.geom.chunk_size;
        let mut seq = 0;
        loop {
            match self.writers[w].acked.get(&seq) {
                Some(&n) if n as u64 == cs => seq += 1,
                Some(&n) => return seq * cs + n as u64,
                None => return seq * cs,
            }
        }
    }

    fn check_read(&mut self, bytes: &[u8]) -> Result<(), Failure> {
        for (i, &b) in bytes.iter().enumerate() {
            let offset = self.read + i as u64;
            if offset >= self.total {
                return Err(Failure::Overrun { offset });
            }
            let expected = k_byte(offset);
            if b != expected {
                return Err(Failure::Safety {
                    offset,
                    expected,
                    actual: b,
                });
            }
        }
        self.read += bytes.len() as u64;
        Ok(())
    }

    fn view(&mut self) -> StorageView<'_> {
        let now = self.clock;
        StorageView {
            data: &mut self.data,
            meta: &mut self.meta,
            durable: &mut self.durable,
            rng: &mut self.rng,
            now,
            tuning: ReadTuning {
                geom: self.geom,
                ..ReadTuning::default()
            },
        }
    }

    /// Returns the number of bytes the consumer advanced.
    fn read_cache(&mut self) -> Result<u64, Failure> {
        self.consumer_reads += 1;
        let now = self.clock;
        let key = CacheKey::record(PATH, RecordKind::CacheLen);
        let cache_len = match self.meta.get_consistent(&key, now, &mut self.rng) {
            Ok(v) => v.and_then(|v| decode_length(&v.bytes)).unwrap_or(0),
            Err(_) => 0,
        };
        if cache_len <= self.read {
            return Ok(0);
        }
        let pos = self.read;
        let r = read_range_cached(&mut self.view(), PATH, pos, cache_len - pos, cache_len);
        self.check_read(&r.bytes)?;
        Ok(r.bytes.len() as u64)
    }

    fn read_durable(&mut self) -> Result<u64, Failure> {
        self.consumer_reads += 1;
        let pos = self.read;
        let len = self.durable_len().saturating_sub(pos);
        let now = self.clock;
        let bytes = self.durable.read(PATH, pos, len, now).unwrap_or_default();
        self.check_read(&bytes)?;
        Ok(bytes.len() as u64)
    }

    fn apply(&mut self, ev: Event) -> Result<(), Failure> {
        if !matches!(ev, Event::ReadCache | Event::ReadDurable) {
            self.fresh = true;
        }
        match ev {
            Event::Append { len } => {
                let from = self.durable_len();
                let bytes: Vec<u8> = (from..from + len).map(k_byte).collect();
                self.durable
                    .append(&self.handle, &bytes)
                    .expect("single durable writer");
            }
            Event::Pull { writer, len } => {
                let from = self.writers[writer].next;
                let now = self.clock;
                let bytes = self
                    .durable
                    .read(PATH, from, len, now)
                    .expect("durable read");
                let cw = &mut self.writers[writer];
                cw.next += bytes.len() as u64;
                let puts = cw.shadow.receive(from, &bytes);
                for p in puts {
                    self.issue(writer, p);
                }
                if self.mutation == Mutation::PublishBeforeAck {
                    let end = self.writers[writer].shadow.received_end();
                    self.publish(writer, end)?;
                }
            }
            Event::Land {
                writer,
                put,
                replica,
                drop,
            } => {
                let f = self.writers[writer]
                    .puts
                    .get_mut(&put)
                    .expect("put in flight");
                f.waiting.retain(|&r| r != replica);
                if drop {
                    self.faults += 1;
                } else {
                    let key = CacheKey::chunk(PATH, f.seq);
                    let r = ReplicaId(replica.into());
                    if let Some(cur) = self.data.peek_replica(r, &key) {
                        if cur.bytes.len() > f.bytes.len() && cur.version < f.version {
                            self.clobbers += 1;
                        }
                    }
                    let now = self.clock;
                    if self
                        .data
                        .apply(r, key, f.bytes.clone(), f.version, now)
                        .is_ack()
                    {
                        f.acks += 1;
                    }
                }
            }
            Event::Complete { writer, put } => {
                let f = self.writers[writer]
                    .puts
                    .remove(&put)
                    .expect("put in flight");
                let ok = f.acks > 0;
                let cw = &mut self.writers[writer];
                if ok {
                    let e = cw.acked.entry(f.seq).or_default();
                    *e = (*e).max(f.end);
                }
                let follow = cw.shadow.on_put_done(f.seq, f.id, ok);
                let pubable = cw.shadow.publishable();
                if let Some(p) = follow {
                    self.issue(writer, p);
                }
                if self.mutation != Mutation::PublishBeforeAck {
                    self.publish(writer, pubable)?;
                }
            }
            Event::Evict { replica, seq } => {
                self.faults += 1;
                self.data
                    .evict_key(ReplicaId(replica.into()), &CacheKey::chunk(PATH, seq));
            }
            Event::ReadCache => {
                self.fresh = false;
                self.read_cache()?;
            }
            Event::ReadDurable => {
                self.fresh = false;
                self.read_durable()?;
            }
        }
        Ok(())
    }

    /// Canonical state for deduplicating the exhaustive walk. Versions are
    /// replaced by their rank, so paths that differ only in clock values
    /// collapse. Read-replica choice is not part of the state.
    fn fingerprint(&self) -> String {
        use std::fmt::Write;
        let seqs = self.total.div_ceil(self.geom.chunk_size);
        let len_key = CacheKey::record(PATH, RecordKind::CacheLen);
        let mut versions: Vec<u64> = Vec::new();
        for r in 0..REPLICAS {
            let r = ReplicaId(r.into());
            for seq in 0..seqs {
                if let Some(v) = self.data.peek_replica(r, &CacheKey::chunk(PATH, seq)) {
                    versions.push(v.version);
                }
            }
            if let Some(v) = self.meta.peek_replica(r, &len_key) {
                versions.push(v.version);
            }
        }
        for w in &self.writers {
            versions.extend(w.puts.values().map(|f| f.version));
        }
        versions.sort_unstable();
        versions.dedup();
        let rank = |v: u64| versions.binary_search(&v).unwrap_or(usize::MAX);
        let mut s = String::new();
        let _ = write!(
            s,
            "{} {} {} {}|",
            self.durable_len(),
            self.read,
            self.faults,
            self.fresh
        );
        for w in &self.writers {
            let _ = write!(s, "{} {} {:?} {:?}", w.next, w.published, w.acked, w.shadow);
            for f in w.puts.values() {
                let _ = write!(
                    s,
                    "({} {:?} {} {:?} {} {})",
                    f.seq,
                    &f.bytes[..],
                    f.end,
                    f.waiting,
                    f.acks,
                    rank(f.version)
                );
            }
            s.push('|');
        }
        for r in 0..REPLICAS {
            let r = ReplicaId(r.into());
            for seq in 0..seqs {
                if let Some(v) = self.data.peek_replica(r, &CacheKey::chunk(PATH, seq)) {
                    let _ = write!(s, "{seq}:{:?}@{} ", &v.bytes[..], rank(v.version));
                }
            }
            if let Some(v) = self.meta.peek_replica(r, &len_key) {
                let _ = write!(s, "L{:?}@{}", &v.bytes[..], rank(v.version));
            }
            s.push('|');
        }
        s
    }

    /// Drain the consumer at quiescence: cache first, durable when stuck.
    fn finish(&mut self) -> Result<(), Failure> {
        let bound = 2 * self.total + 4;
        for _ in 0..bound {
            if self.read == self.total {
                break;
            }
            if self.read_cache()? == 0 && self.read_durable()? == 0 {
                break;
            }
        }
        if self.read != self.total {
            return Err(Failure::Termination {
                read: self.read,
                total: self.total,
            });
        }
        Ok(())
    }
}

/// Pick an event class uniformly, then an event within it.
fn choose(rng: &mut SimRng, evs: &[Event]) -> Event {
    let mut classes: Vec<u8> = evs.iter().map(Event::class).collect();
    classes.dedup();
    classes.sort_unstable();
    classes.dedup();
    let c = *rng.pick(&classes).expect("nonempty");
    let within: Vec<&Event> = evs.iter().filter(|e| e.class() == c).collect();
    **rng.pick(&within).expect("nonempty")
}

fn run_trial(cfg: &InterleaveConfig, trial: u64) -> (Result<(), Failure>, Vec<Event>, Model) {
    let seed = cfg
        .seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(trial);
    let mut m = Model::new(cfg, seed);
    let mut pick = SimRng::new(seed ^ 0x5eed);
    let mut events = Vec::new();
    for _ in 0..MAX_STEPS {
        if m.quiescent() {
            break;
        }
        let evs = m.enabled();
        let ev = choose(&mut pick, &evs);
        events.push(ev);
        if let Err(f) = m.apply(ev) {
            return (Err(f), events, m);
        }
    }
    let r = m.finish();
    (r, events, m)
}

/// Replay `events`, skipping any that are not enabled when reached.
fn replay(cfg: &InterleaveConfig, seed: u64, events: &[Event]) -> Option<Failure> {
    let mut m = Model::new(cfg, seed);
    for &ev in events {
        if !m.enabled().contains(&ev) {
            continue;
        }
        if let Err(f) = m.apply(ev) {
            return Some(f);
        }
    }
    if m.quiescent() {
        return m.finish().err();
    }
    None
}

/// Delta debugging down to a 1-minimal failing subsequence.
fn minimize(cfg: &InterleaveConfig, seed: u64, events: &[Event], failure: &Failure) -> Vec<Event> {
    let fails = |evs: &[Event]| replay(cfg, seed, evs).is_some_and(|f| f.same_kind(failure));
    let mut cur = events.to_vec();
    if !fails(&cur) {
        return cur;
    }
    let mut n = 2;
    while cur.len() >= 2 {
        let chunk = cur.len().div_ceil(n);
        let complement = (0..n)
            .map(|i| i * chunk)
            .take_while(|&lo| lo < cur.len())
            .map(|lo| {
                let mut c = cur[..lo].to_vec();
                c.extend_from_slice(&cur[(lo + chunk).min(cur.len())..]);
                c
            })
            .find(|c| fails(c));
        let reduced = complement.is_some();
        if let Some(c) = complement {
            cur = c;
            n = (n - 1).max(2);
        }
        if !reduced {
            if n >= cur.len() {
                break;
            }
            n = (n * 2).min(cur.len());
        }
    }
    cur
}

enum Walk {
    Done,
    Exceeded,
    Failed(Failure, Vec<Event>),
}

fn walk(
    m: &Model,
    path: &mut Vec<Event>,
    seen: &mut HashSet<String>,
    nodes: &mut u64,
    limit: u64,
) -> Walk {
    if !seen.insert(m.fingerprint()) {
        return Walk::Done;
    }
    *nodes += 1;
    if *nodes > limit {
        return Walk::Exceeded;
    }
    if m.quiescent() {
        let mut end = m.clone();
        return match end.finish() {
            Ok(()) => Walk::Done,
            Err(f) => Walk::Failed(f, path.clone()),
        };
    }
    for ev in m.enabled() {
        let mut next = m.clone();
        path.push(ev);
        if let Err(f) = next.apply(ev) {
            return Walk::Failed(f, path.clone());
        }
        match walk(&next, path, seen, nodes, limit) {
            Walk::Done => {}
            other => return other,
        }
        path.pop();
    }
    Walk::Done
}

/// Walk every reachable state if there are at most `limit` of them.
/// Returns `None` when the limit is hit first.
pub fn check_exhaustive(
    cfg: &InterleaveConfig,
    limit: u64,
) -> Option<(u64, Option<Counterexample>)> {
    let seed = cfg.seed;
    let m = Model::new(cfg, seed);
    let mut nodes = 0;
    match walk(&m, &mut Vec::new(), &mut HashSet::new(), &mut nodes, limit) {
        Walk::Done => Some((nodes, None)),
        Walk::Exceeded => None,
        Walk::Failed(failure, events) => {
            let minimized = minimize(cfg, seed, &events, &failure);
            Some((
                nodes,
                Some(Counterexample {
                    trial: 0,
                    failure,
                    events,
                    minimized,
                }),
            ))
        }
    }
}

/// Run the randomized trials, then the exhaustive walk if it fits.
pub fn check_interleavings(cfg: &InterleaveConfig) -> InterleaveReport {
    let mut report = InterleaveReport {
        trials: 0,
        events: 0,
        consumer_reads: 0,
        clobbers: 0,
        exhaustive_nodes: None,
        counterexample: None,
    };
    for trial in 0..cfg.trials {
        let (res, events, m) = run_trial(cfg, trial);
        report.trials += 1;
        report.events += events.len() as u64;
        report.consumer_reads += m.consumer_reads;
        report.clobbers += m.clobbers;
        if let Err(failure) = res {
            let seed = cfg
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(trial);
            let minimized = minimize(cfg, seed, &events, &failure);
            report.counterexample = Some(Counterexample {
                trial,
                failure,
                events,
                minimized,
            });
            return report;
        }
    }
    if cfg.exhaustive_limit > 0 {
        if let Some((nodes, cex)) = check_exhaustive(cfg, cfg.exhaustive_limit) {
            report.exhaustive_nodes = Some(nodes);
            report.counterexample = cex;
        }
    }
    report
}
