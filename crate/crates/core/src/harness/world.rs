//! The simulated deployment: clusters, producers, workers, schedulers,
//! consumers and the fault script, all driven by one event loop.

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;

use super::metrics::{
    CacheReport, ClusterReport, OpsReport, Percentiles, Report, Timeline, Verdict, Violation,
    WindowReport,
};
use super::monitor::{ReadCursor, ShardLog};
use super::scenario::{FaultAction, Scenario, StreamSpec, WorkerRole};
use super::trace::{Trace, TraceRecord};
use crate::copy_tree::{
    build_tree_partial, penalize_and_rebuild, ClusterGraph, CopyTree, NodeMode,
};
use crate::durable_log::{DurableStore, WriterHandle};
use crate::file_layer::{
    data_path, index_path, publish_length, ChunkGeometry, ConsumerConfig, IndexRecord,
    LengthPoller, PutId, ReadTuning, ShadowWriter, ShardConsumer, StorageView,
};
use crate::kv_cache::{
    ApplyOutcome, CacheKey, CacheKind, CacheStats, KvCache, Load, RecordKind, ReplicaError,
    ReplicaId, Version, VersionClock,
};
use crate::scheduler::{PoolView, SchedAction, Scheduler};
use crate::simnet::{ClusterId, Link, ProcessId, Sim, SimRng, SimTime};
use crate::transport::{
    Action, EndReason, InstanceId, OpKey, ReaderOp, Storage, StreamMsg, WriterCtx, WriterOp,
    WriterTimer,
};

const PUT_RETRY_BACKOFF_MS: u64 = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FileKind {
    Data,
    Index,
}

#[derive(Debug, Clone)]
enum Heal {
    Workers {
        cluster: ClusterId,
        role: WorkerRole,
        count: usize,
    },
    Scheduler {
        cluster: ClusterId,
    },
    CacheReplicas {
        cluster: ClusterId,
        cache: CacheKind,
        replicas: Vec<u32>,
    },
    Link {
        a: ClusterId,
        b: ClusterId,
    },
    Durable {
        cluster: ClusterId,
    },
    SplitBrainOver,
    ClusterBack {
        cluster: ClusterId,
    },
}

#[derive(Debug, Clone)]
enum Ev {
    ProducerFlush {
        stream: usize,
    },
    ProducerAppend {
        stream: usize,
        shard: u32,
        file: FileKind,
    },
    Notify {
        cluster: ClusterId,
        path: String,
    },
    CacheApply {
        put: u64,
        replica: ReplicaId,
    },
    PutDeadline {
        put: u64,
    },
    PutDone {
        put: u64,
    },
    ReaderPoll,
    WriterTimer {
        instance: InstanceId,
        timer: WriterTimer,
    },
    Transmit {
        to: ProcessId,
        msg: StreamMsg,
    },
    Deliver {
        from: ProcessId,
        msg: StreamMsg,
    },
    SchedTick {
        cluster: ClusterId,
    },
    WorkerDown {
        pid: ProcessId,
    },
    ConsumerStart {
        consumer: usize,
    },
    ConsumerPoll {
        consumer: usize,
    },
    Gc {
        cluster: ClusterId,
    },
    Autoscale {
        idx: usize,
    },
    Fault {
        idx: usize,
    },
    Heal(Heal),
    Second,
    EndProduction,
    QuiesceCheck,
    PromoteCheck,
}

struct ClusterState {
    data: KvCache,
    meta: KvCache,
    durable: DurableStore,
    rng: SimRng,
    readers: Vec<ProcessId>,
    writers: Vec<ProcessId>,
    scheduler: Option<Scheduler>,
    sched_pid: ProcessId,
    sched_epoch: u64,
    last_sched_hb: SimTime,
    data_load: BTreeMap<ReplicaId, Load>,
    meta_load: BTreeMap<ReplicaId, Load>,
    data_report: CacheReport,
    meta_report: CacheReport,
    last_data_stats: CacheStats,
}

struct ReaderSlot {
    op: ReaderOp,
    writer: ProcessId,
}

struct WriterSlot {
    op: WriterOp,
    reader: ProcessId,
}

struct Worker {
    cluster: ClusterId,
    role: WorkerRole,
    readers: BTreeMap<InstanceId, ReaderSlot>,
    writers: BTreeMap<InstanceId, WriterSlot>,
    poller: LengthPoller,
    orphaned: bool,
}

/// Producer state for one file being written at the source.
struct FileWriter {
    handle: WriterHandle,
    shadow: ShadowWriter,
    published: u64,
    clock: VersionClock,
    pending: Vec<u8>,
    closed: bool,
}

struct ShardProducer {
    file_no: u32,
    data_len: u64,
    next_seq: u64,
    credit: f64,
    buffer: Vec<(SimTime, Vec<u8>)>,
    seal_pending: bool,
    index_pending: Vec<u8>,
    /// Set once the current file has been sealed and the next not opened.
    rolled: bool,
}

struct StreamState {
    spec: StreamSpec,
    tree: CopyTree,
    shards: Vec<ShardProducer>,
    logs: Vec<ShardLog>,
    rng: SimRng,
}

struct ConsumerShard {
    stream: usize,
    consumer: ShardConsumer,
    cursor: ReadCursor,
    broken: bool,
}

struct ConsumerProc {
    cluster: ClusterId,
    pid: Option<ProcessId>,
    poll_ms: u64,
    shards: Vec<ConsumerShard>,
}

enum PutOwner {
    Producer {
        path: String,
    },
    Writer {
        pid: ProcessId,
        instance: InstanceId,
    },
}

struct PutTracker {
    cluster: ClusterId,
    key: CacheKey,
    bytes: Bytes,
    version: Version,
    seq: u64,
    id: PutId,
    owner: PutOwner,
    expected: usize,
    responses: usize,
    acks: usize,
    issued: SimTime,
    done: bool,
}

#[derive(Default)]
struct ClusterMetrics {
    delays: Vec<u64>,
    cache_arrival: Vec<u64>,
    durable_arrival: Vec<u64>,
    fallback_reads: u64,
    cache_failures: u64,
}

/// Result of one run.
pub struct RunOutput {
    pub report: Report,
    pub trace: Trace,
}

pub struct World {
    sc: Scenario,
    sim: Sim<Ev>,
    geom: ChunkGeometry,
    tuning: ReadTuning,
    clusters: BTreeMap<ClusterId, ClusterState>,
    workers: BTreeMap<ProcessId, Worker>,
    graph: ClusterGraph,
    streams: Vec<StreamState>,
    consumers: Vec<ConsumerProc>,
    prod_files: BTreeMap<String, FileWriter>,
    /// Message end offsets and production times per data file.
    arrivals: BTreeMap<String, Vec<(u64, SimTime)>>,
    arrival_marks: BTreeMap<(ClusterId, String, Storage), u64>,
    closed: BTreeMap<String, (u64, SimTime)>,
    puts: BTreeMap<u64, PutTracker>,
    next_put: u64,
    trace: Trace,
    metrics: BTreeMap<ClusterId, ClusterMetrics>,
    fallback_tl: Timeline,
    failure_tl: Timeline,
    delay_by_second: Vec<Vec<u64>>,
    write_latency: Vec<u64>,
    window_delays: Vec<u64>,
    window_msgs: u64,
    ops: OpsReport,
    violation: Option<Violation>,
    producing: bool,
    quiescent_at: Option<SimTime>,
    autoscale_state: Vec<(SimTime, BTreeMap<ReplicaId, Load>)>,
    ended: BTreeSet<InstanceId>,
    messages_produced: u64,
    messages_delivered: u64,
    bytes_produced: u64,
}

fn cid(c: u32) -> ClusterId {
    ClusterId(c)
}

fn stream_of(path: &str) -> &str {
    path.trim_start_matches('/').split('/').next().unwrap_or("")
}

impl World {
    pub fn new(sc: &Scenario) -> Result<Self, String> {
        let sc = sc.clone();
        let t = &sc.tuning;
        let geom = sc.geometry();
        let mut tuning = t.read;
        tuning.geom = geom;
        let mut sim = Sim::new(sc.seed);
        let mut graph = ClusterGraph::new();
        let mut clusters = BTreeMap::new();
        let mut workers = BTreeMap::new();
        for c in &sc.clusters {
            let id = cid(c.id);
            graph.add_node(id);
            let mut data = KvCache::new(
                CacheKind::Data,
                c.data_replicas,
                t.replication,
                t.data_cache,
            )
            .with_value_limit(geom.chunk_size as usize);
            let mut meta = KvCache::new(
                CacheKind::Metadata,
                c.meta_replicas,
                t.replication,
                t.meta_cache,
            );
            for _ in 0..c.spare_replicas {
                data.spawn_replica();
                meta.spawn_replica();
            }
            let mut readers = Vec::new();
            let mut writers = Vec::new();
            for _ in 0..c.readers {
                let pid = sim.spawn(id, "reader");
                readers.push(pid);
                workers.insert(pid, Worker::new(id, WorkerRole::Reader, t.durable.poll_ms));
            }
            for _ in 0..c.writers {
                let pid = sim.spawn(id, "writer");
                writers.push(pid);
                workers.insert(pid, Worker::new(id, WorkerRole::Writer, t.durable.poll_ms));
            }
            let sched_pid = sim.spawn(id, "scheduler");
            let rng = sim.rng.fork();
            clusters.insert(
                id,
                ClusterState {
                    data,
                    meta,
                    durable: DurableStore::new(t.durable),
                    rng,
                    readers,
                    writers,
                    scheduler: Some(Scheduler::new(id, 1, t.scheduler)),
                    sched_pid,
                    sched_epoch: 1,
                    last_sched_hb: 0,
                    data_load: BTreeMap::new(),
                    meta_load: BTreeMap::new(),
                    data_report: CacheReport::default(),
                    meta_report: CacheReport::default(),
                    last_data_stats: CacheStats::default(),
                },
            );
        }
        for l in &sc.links {
            sim.add_link(
                Link::new(cid(l.a), cid(l.b), l.latency_ms, l.bandwidth_bps),
                true,
            );
            graph.add_edge(cid(l.a), cid(l.b), l.cost.unwrap_or(l.latency_ms as f64));
        }
        let mut streams = Vec::new();
        for s in &sc.streams {
            let dests: BTreeSet<ClusterId> = s.destinations.iter().map(|&d| cid(d)).collect();
            let tree = build_tree_partial(&graph, cid(s.source), &dests, &t.tree)
                .map_err(|e| format!("stream {}: {e}", s.name))?;
            if !tree.detached.is_empty() {
                return Err(format!(
                    "stream {}: destinations unreachable: {:?}",
                    s.name, tree.detached
                ));
            }
            let rng = sim.rng.fork();
            streams.push(StreamState {
                spec: s.clone(),
                tree,
                shards: (0..s.shards)
                    .map(|_| ShardProducer {
                        file_no: 0,
                        data_len: 0,
                        next_seq: 0,
                        credit: 0.0,
                        buffer: Vec::new(),
                        seal_pending: false,
                        index_pending: Vec::new(),
                        rolled: false,
                    })
                    .collect(),
                logs: (0..s.shards).map(|_| ShardLog::default()).collect(),
                rng,
            });
        }
        let mut consumers = Vec::new();
        for f in &sc.consumers {
            let stream = sc.stream_index(&f.stream).unwrap();
            let shards = sc.streams[stream].shards;
            let per_shard_cap = f.rate_cap_bps / f.shards_each as u64;
            for i in 0..f.count {
                let cfg = ConsumerConfig {
                    poll_ms: f.poll_ms,
                    rate_cap_bps: per_shard_cap,
                    max_delay_ms: f.max_delay_ms,
                    durable_poll_ms: t.consumer_durable_poll_ms,
                };
                let list = (0..f.shards_each)
                    .map(|j| {
                        let shard = ((i as u32) * f.shards_each + j) % shards;
                        ConsumerShard {
                            stream,
                            consumer: ShardConsumer::new(f.stream.clone(), shard, cfg),
                            cursor: ReadCursor::default(),
                            broken: false,
                        }
                    })
                    .collect();
                let start = f.start_ms
                    + f.ramp
                        .as_ref()
                        .map_or(0, |r| (i / r.step) as u64 * r.every_ms);
                consumers.push((
                    start,
                    ConsumerProc {
                        cluster: cid(f.cluster),
                        pid: None,
                        poll_ms: f.poll_ms,
                        shards: list,
                    },
                ));
            }
        }
        let mut w = Self {
            geom,
            tuning,
            clusters,
            workers,
            graph,
            streams,
            consumers: Vec::new(),
            prod_files: BTreeMap::new(),
            arrivals: BTreeMap::new(),
            arrival_marks: BTreeMap::new(),
            closed: BTreeMap::new(),
            puts: BTreeMap::new(),
            next_put: 0,
            trace: Trace::default(),
            metrics: BTreeMap::new(),
            fallback_tl: Timeline::default(),
            failure_tl: Timeline::default(),
            delay_by_second: Vec::new(),
            write_latency: Vec::new(),
            window_delays: Vec::new(),
            window_msgs: 0,
            ops: OpsReport::default(),
            violation: None,
            producing: true,
            quiescent_at: None,
            autoscale_state: Vec::new(),
            ended: BTreeSet::new(),
            messages_produced: 0,
            messages_delivered: 0,
            bytes_produced: 0,
            sim,
            sc,
        };
        w.trace.push(&TraceRecord::Header {
            scenario: Box::new(w.sc.clone()),
        });
        for i in 0..w.streams.len() {
            w.trace_tree(i);
        }
        w.bootstrap(consumers);
        Ok(w)
    }

    fn bootstrap(&mut self, consumers: Vec<(SimTime, ConsumerProc)>) {
        let t = self.sc.tuning.clone();
        let pids: Vec<(ProcessId, WorkerRole)> =
            self.workers.iter().map(|(p, w)| (*p, w.role)).collect();
        for (pid, role) in pids {
            if role == WorkerRole::Reader {
                let d = self.sim.rng.below(t.reader.poll_ms.max(1));
                self.sim.schedule_to(pid, d, Ev::ReaderPoll);
            }
        }
        let ids: Vec<ClusterId> = self.clusters.keys().copied().collect();
        for c in &ids {
            let sp = self.clusters[c].sched_pid;
            self.sim.schedule_to(sp, 0, Ev::SchedTick { cluster: *c });
            self.sim.schedule(t.gc_interval_ms, Ev::Gc { cluster: *c });
        }
        for s in 0..self.streams.len() {
            for shard in 0..self.streams[s].spec.shards {
                self.open_files(s, shard);
            }
            let iv = self.streams[s].spec.buffer_interval_ms;
            self.sim.schedule(iv, Ev::ProducerFlush { stream: s });
        }
        for (i, (start, c)) in consumers.into_iter().enumerate() {
            self.consumers.push(c);
            self.sim.schedule(start, Ev::ConsumerStart { consumer: i });
        }
        for (i, f) in self.sc.faults.clone().iter().enumerate() {
            self.sim.schedule(f.at_ms, Ev::Fault { idx: i });
        }
        for (i, a) in self.sc.autoscalers.clone().iter().enumerate() {
            self.autoscale_state.push((0, BTreeMap::new()));
            self.sim.schedule(a.check_ms, Ev::Autoscale { idx: i });
        }
        self.sim.schedule(1000, Ev::Second);
        self.sim.schedule(1000, Ev::PromoteCheck);
        self.sim.schedule(self.sc.duration_ms, Ev::EndProduction);
    }

    /// Run to quiescence or the drain limit.
    pub fn run(mut self) -> RunOutput {
        let limit = self.sc.duration_ms + self.sc.drain_ms;
        while let Some(f) = self.sim.next_event() {
            if f.at > limit {
                break;
            }
            self.handle(f.target, f.event);
            if self.quiescent_at.is_some() {
                break;
            }
        }
        self.finish()
    }

    fn now(&self) -> SimTime {
        self.sim.now()
    }

    fn handle(&mut self, target: Option<ProcessId>, ev: Ev) {
        match ev {
            Ev::ProducerFlush { stream } => self.producer_flush(stream, false),
            Ev::ProducerAppend {
                stream,
                shard,
                file,
            } => self.producer_append(stream, shard, file),
            Ev::Notify { cluster, path } => self.notify(cluster, &path),
            Ev::CacheApply { put, replica } => self.cache_apply(put, replica),
            Ev::PutDeadline { put } => self.finish_put(put),
            Ev::PutDone { put } => self.put_done(put),
            Ev::ReaderPoll => self.reader_poll(target.unwrap()),
            Ev::WriterTimer { instance, timer } => {
                self.writer_timer(target.unwrap(), instance, timer)
            }
            Ev::Transmit { to, msg } => self.transmit(target.unwrap(), to, msg),
            Ev::Deliver { from, msg } => self.deliver(target.unwrap(), from, msg),
            Ev::SchedTick { cluster } => self.sched_tick(cluster),
            Ev::WorkerDown { pid } => self.worker_down(pid),
            Ev::ConsumerStart { consumer } => self.consumer_start(consumer),
            Ev::ConsumerPoll { consumer } => self.consumer_poll(consumer),
            Ev::Gc { cluster } => {
                let now = self.now();
                let c = self.clusters.get_mut(&cluster).unwrap();
                c.data.gc_tick(now);
                c.meta.gc_tick(now);
                self.sim
                    .schedule(self.sc.tuning.gc_interval_ms, Ev::Gc { cluster });
            }
            Ev::Autoscale { idx } => self.autoscale(idx),
            Ev::Fault { idx } => self.fault(idx),
            Ev::Heal(h) => self.heal(h),
            Ev::Second => self.second(),
            Ev::EndProduction => self.end_production(),
            Ev::QuiesceCheck => self.quiesce_check(),
            Ev::PromoteCheck => self.promote_check(),
        }
    }

    // ---------------------------------------------------------------- producer

    fn open_files(&mut self, s: usize, shard: u32) {
        let name = self.streams[s].spec.name.clone();
        let source = cid(self.streams[s].spec.source);
        let file_no = self.streams[s].shards[shard as usize].file_no;
        for path in [
            data_path(&name, shard, file_no),
            index_path(&name, shard, file_no),
        ] {
            let handle = self
                .clusters
                .get_mut(&source)
                .unwrap()
                .durable
                .open_writer(&path);
            let mut shadow = ShadowWriter::new(self.geom, 0);
            if self.sc.tuning.disable_chunk_prefix_rule {
                shadow.disable_write_from_chunk_start();
            }
            self.prod_files.insert(
                path.clone(),
                FileWriter {
                    handle,
                    shadow,
                    published: 0,
                    clock: VersionClock::default(),
                    pending: Vec::new(),
                    closed: false,
                },
            );
            self.sim.schedule(
                1,
                Ev::Notify {
                    cluster: source,
                    path,
                },
            );
        }
        let sp = &mut self.streams[s].shards[shard as usize];
        sp.data_len = 0;
        sp.rolled = false;
    }

    fn producer_flush(&mut self, s: usize, final_flush: bool) {
        if !self.producing {
            return;
        }
        let now = self.now();
        let spec = self.streams[s].spec.clone();
        let paused = spec.pause.is_some_and(|w| w.contains(now)) && !final_flush;
        let per_shard = spec.rate_bps as f64 / spec.shards as f64;
        let msgs_per_iv =
            per_shard * spec.buffer_interval_ms as f64 / 1000.0 / spec.message_bytes as f64;
        for shard in 0..spec.shards {
            if !final_flush {
                let st = &mut self.streams[s];
                let sp = &mut st.shards[shard as usize];
                sp.credit += msgs_per_iv;
                let n = sp.credit.floor() as u64;
                sp.credit -= n as f64;
                for i in 0..n {
                    let at =
                        now - spec.buffer_interval_ms + (i + 1) * spec.buffer_interval_ms / (n + 1);
                    let mut payload = vec![0u8; spec.message_bytes as usize];
                    for b in payload.iter_mut() {
                        *b = st.rng.below(256) as u8;
                    }
                    sp.buffer.push((at, payload));
                }
            }
            if paused {
                continue;
            }
            self.flush_shard(s, shard, final_flush);
        }
        if !final_flush {
            self.sim
                .schedule(spec.buffer_interval_ms, Ev::ProducerFlush { stream: s });
        }
    }

    fn flush_shard(&mut self, s: usize, shard: u32, seal: bool) {
        let now = self.now();
        let spec = self.streams[s].spec.clone();
        if self.streams[s].shards[shard as usize].rolled {
            self.streams[s].shards[shard as usize].file_no += 1;
            self.open_files(s, shard);
        }
        let sp = &mut self.streams[s].shards[shard as usize];
        if sp.buffer.is_empty() && !seal {
            return;
        }
        let file_no = sp.file_no;
        let dpath = data_path(&spec.name, shard, file_no);
        let ipath = index_path(&spec.name, shard, file_no);
        let mut data = Vec::new();
        let mut index = Vec::new();
        let arrivals = self.arrivals.entry(dpath.clone()).or_default();
        for (at, payload) in sp.buffer.drain(..) {
            let rec = IndexRecord {
                data_offset: sp.data_len + data.len() as u64,
                data_len: payload.len() as u32,
                produce_time_ms: at,
                seq: sp.next_seq,
            };
            sp.next_seq += 1;
            data.extend_from_slice(&payload);
            arrivals.push((rec.data_end(), at));
            index.extend_from_slice(&rec.encode());
            self.messages_produced += 1;
        }
        sp.data_len += data.len() as u64;
        let roll = seal || sp.data_len >= spec.file_bytes;
        if roll {
            index.extend_from_slice(&IndexRecord::seal(sp.data_len, now).encode());
            sp.rolled = true;
        }
        sp.seal_pending = roll;
        sp.index_pending.extend_from_slice(&index);
        self.prod_files
            .get_mut(&dpath)
            .unwrap()
            .pending
            .extend_from_slice(&data);
        self.prod_files
            .get_mut(&ipath)
            .unwrap()
            .pending
            .extend_from_slice(&sp.index_pending);
        sp.index_pending.clear();
        let lat = self.sc.tuning.durable.append_latency_ms;
        self.sim.schedule(
            lat,
            Ev::ProducerAppend {
                stream: s,
                shard,
                file: FileKind::Data,
            },
        );
    }

    fn producer_append(&mut self, s: usize, shard: u32, file: FileKind) {
        let now = self.now();
        let name = self.streams[s].spec.name.clone();
        let source = cid(self.streams[s].spec.source);
        // The appended file may already be superseded by a rollover.
        let paths: Vec<String> = self
            .prod_files
            .keys()
            .filter(|p| {
                stream_of(p) == name
                    && p.split('/').nth(2) == Some(&shard.to_string())
                    && p.ends_with(if file == FileKind::Data {
                        ".data"
                    } else {
                        ".index"
                    })
            })
            .cloned()
            .collect();
        let lat = self.sc.tuning.durable.append_latency_ms;
        for path in paths {
            let fw = self.prod_files.get_mut(&path).unwrap();
            if fw.pending.is_empty() {
                continue;
            }
            let c = self.clusters.get_mut(&source).unwrap();
            let offset = c.durable.length(&path);
            match c.durable.append(&fw.handle, &fw.pending) {
                Ok(len) => {
                    let bytes = std::mem::take(&mut fw.pending);
                    let v = fw.clock.next(now);
                    let _ = publish_length(&mut c.meta, &path, RecordKind::DurableLen, len, v, now);
                    let puts = fw.shadow.receive(offset, &bytes);
                    if file == FileKind::Data {
                        self.streams[s].logs[shard as usize].produce(&bytes);
                        self.bytes_produced += bytes.len() as u64;
                    }
                    self.note_arrival(source, &path, Storage::Durable, len);
                    for p in puts {
                        let v = self.prod_files.get_mut(&path).unwrap().clock.next(now);
                        self.issue_put(
                            source,
                            CacheKey::chunk(&path, p.seq),
                            p.bytes,
                            v,
                            p.seq,
                            p.id,
                            PutOwner::Producer { path: path.clone() },
                        );
                    }
                }
                Err(_) => {
                    self.sim.schedule(
                        100,
                        Ev::ProducerAppend {
                            stream: s,
                            shard,
                            file,
                        },
                    );
                    return;
                }
            }
        }
        match file {
            FileKind::Data => {
                self.sim.schedule(
                    lat,
                    Ev::ProducerAppend {
                        stream: s,
                        shard,
                        file: FileKind::Index,
                    },
                );
            }
            FileKind::Index => {
                let sp = &mut self.streams[s].shards[shard as usize];
                if sp.seal_pending {
                    sp.seal_pending = false;
                    let file_no = sp.file_no;
                    let src = &self.clusters[&source].durable;
                    for path in [
                        data_path(&name, shard, file_no),
                        index_path(&name, shard, file_no),
                    ] {
                        let len = src.length(&path);
                        self.closed.insert(path.clone(), (len, now));
                        if let Some(fw) = self.prod_files.get_mut(&path) {
                            fw.closed = true;
                        }
                    }
                }
            }
        }
    }

    // ---------------------------------------------------------------- cache puts

    #[allow(clippy::too_many_arguments)]
    fn issue_put(
        &mut self,
        cluster: ClusterId,
        key: CacheKey,
        bytes: Bytes,
        version: Version,
        seq: u64,
        id: PutId,
        owner: PutOwner,
    ) {
        let now = self.now();
        let t = &self.sc.tuning;
        let (lat, jitter, deadline) = (t.put_latency_ms, t.put_jitter_ms, t.put_deadline_ms);
        let c = self.clusters.get_mut(&cluster).unwrap();
        let set = c.data.replica_set(&key);
        let put = self.next_put;
        self.next_put += 1;
        for &r in &set {
            let d = lat + c.rng.below(jitter + 1);
            self.sim.schedule(d, Ev::CacheApply { put, replica: r });
        }
        self.sim.schedule(deadline, Ev::PutDeadline { put });
        self.puts.insert(
            put,
            PutTracker {
                cluster,
                key,
                bytes,
                version,
                seq,
                id,
                owner,
                expected: set.len(),
                responses: 0,
                acks: 0,
                issued: now,
                done: false,
            },
        );
    }

    fn cache_apply(&mut self, put: u64, replica: ReplicaId) {
        let now = self.now();
        let Some(p) = self.puts.get_mut(&put) else {
            return;
        };
        if p.done {
            return;
        }
        let c = self.clusters.get_mut(&p.cluster).unwrap();
        match c
            .data
            .apply(replica, p.key, p.bytes.clone(), p.version, now)
        {
            ApplyOutcome::Rejected(ReplicaError::Down) => return,
            o => {
                p.responses += 1;
                if o.is_ack() {
                    p.acks += 1;
                }
            }
        }
        if p.responses == p.expected {
            self.finish_put(put);
        }
    }

    fn finish_put(&mut self, put: u64) {
        let now = self.now();
        let Some(p) = self.puts.get_mut(&put) else {
            return;
        };
        if p.done {
            return;
        }
        p.done = true;
        self.write_latency.push(now - p.issued);
        let delay = if p.acks == 0 {
            self.ops.put_failures += 1;
            PUT_RETRY_BACKOFF_MS
        } else {
            1
        };
        self.sim.schedule(delay, Ev::PutDone { put });
    }

    fn put_done(&mut self, put: u64) {
        let now = self.now();
        let Some(p) = self.puts.remove(&put) else {
            return;
        };
        match p.owner {
            PutOwner::Producer { path } => {
                let Some(fw) = self.prod_files.get_mut(&path) else {
                    return;
                };
                let follow = fw.shadow.on_put_done(p.seq, p.id, p.acks > 0);
                let pubable = fw.shadow.publishable();
                let mut published = None;
                if pubable > fw.published {
                    fw.published = pubable;
                    let v = fw.clock.next(now);
                    let c = self.clusters.get_mut(&p.cluster).unwrap();
                    let _ =
                        publish_length(&mut c.meta, &path, RecordKind::CacheLen, pubable, v, now);
                    published = Some(pubable);
                }
                if let Some(n) = follow {
                    let v = fw.clock.next(now);
                    self.issue_put(
                        p.cluster,
                        CacheKey::chunk(&path, n.seq),
                        n.bytes,
                        v,
                        n.seq,
                        n.id,
                        PutOwner::Producer { path: path.clone() },
                    );
                } else if fw.closed && fw.shadow.is_idle() && fw.pending.is_empty() {
                    self.prod_files.remove(&path);
                }
                if let Some(len) = published {
                    self.note_arrival(p.cluster, &path, Storage::Cache, len);
                }
            }
            PutOwner::Writer { pid, instance } => {
                let Some(w) = self.workers.get_mut(&pid) else {
                    return;
                };
                let Some(slot) = w.writers.get_mut(&instance) else {
                    return;
                };
                let c = self.clusters.get_mut(&w.cluster).unwrap();
                let mut ctx = WriterCtx {
                    meta: &mut c.meta,
                    durable: &mut c.durable,
                    rng: &mut c.rng,
                    now,
                    geom: self.geom,
                };
                let acts = slot.op.on_put_done(p.seq, p.id, p.acks, &mut ctx);
                let (key, peer) = (slot.op.key.clone(), slot.reader);
                let progress = slot.op.cache_progress();
                let cluster = w.cluster;
                self.route_writer(pid, cluster, &key, instance, peer, acts);
                if let Some((_, published)) = progress {
                    self.note_arrival(cluster, &key.op.path, Storage::Cache, published);
                }
            }
        }
    }

    fn note_arrival(&mut self, cluster: ClusterId, path: &str, layer: Storage, len: u64) {
        let Some(arr) = self.arrivals.get(path) else {
            return;
        };
        let now = self.sim.now();
        let mark = self
            .arrival_marks
            .entry((cluster, path.to_string(), layer))
            .or_insert(0);
        if len <= *mark {
            return;
        }
        let lo = arr.partition_point(|&(end, _)| end <= *mark);
        let hi = arr.partition_point(|&(end, _)| end <= len);
        let m = self.metrics.entry(cluster).or_default();
        for &(_, at) in &arr[lo..hi] {
            let d = now.saturating_sub(at);
            match layer {
                Storage::Cache => m.cache_arrival.push(d),
                Storage::Durable => m.durable_arrival.push(d),
            }
        }
        *mark = len;
    }

    // ---------------------------------------------------------------- schedulers

    fn children(&self, stream: &str, cluster: ClusterId) -> Vec<ClusterId> {
        self.streams
            .iter()
            .find(|s| s.spec.name == stream)
            .map_or_else(Vec::new, |s| s.tree.children(cluster))
    }

    fn notify(&mut self, cluster: ClusterId, path: &str) {
        let now = self.now();
        let kids = self.children(stream_of(path), cluster);
        if kids.is_empty() {
            return;
        }
        if let Some(s) = self.clusters.get_mut(&cluster).unwrap().scheduler.as_mut() {
            s.notify_file(path, &kids, now);
        }
    }

    fn pool_view(&self, cluster: ClusterId) -> PoolView {
        let c = &self.clusters[&cluster];
        let readers = c
            .readers
            .iter()
            .copied()
            .filter(|p| self.sim.is_alive(*p))
            .collect();
        let mut writers = BTreeMap::new();
        for (id, other) in &self.clusters {
            if *id == cluster {
                continue;
            }
            let ws = other
                .writers
                .iter()
                .filter(|p| self.sim.is_alive(**p))
                .map(|p| (*p, self.workers.get(p).map_or(0, |w| w.writers.len())))
                .collect();
            writers.insert(*id, ws);
        }
        PoolView { readers, writers }
    }

    fn sched_tick(&mut self, cluster: ClusterId) {
        let now = self.now();
        let pool = self.pool_view(cluster);
        let c = self.clusters.get_mut(&cluster).unwrap();
        c.last_sched_hb = now;
        let sp = c.sched_pid;
        let acts = match c.scheduler.as_mut() {
            Some(s) => s.tick(now, &pool),
            None => return,
        };
        self.apply_sched(cluster, acts);
        self.sim
            .schedule_to(sp, self.sc.tuning.sched_tick_ms, Ev::SchedTick { cluster });
    }

    fn drain_sched_log(&mut self, cluster: ClusterId) {
        let log = match self.clusters.get_mut(&cluster).unwrap().scheduler.as_mut() {
            Some(s) => s.drain_log(),
            None => return,
        };
        for ch in log {
            match ch.change.as_str() {
                "assign" => self.ops.started += 1,
                "shed" => self.ops.sheds += 1,
                "worker-failed" => self.ops.reschedules += 1,
                _ => {}
            }
            self.trace.push(&TraceRecord::Assign(ch));
        }
    }

    fn apply_sched(&mut self, cluster: ClusterId, acts: Vec<SchedAction>) {
        let now = self.now();
        for a in acts {
            match a {
                SchedAction::Start(a) => {
                    let mut cfg = self.sc.tuning.reader;
                    if self.is_rate_limited(&a.key) {
                        cfg.rate_limit_bps = self.sc.tuning.leaf_rate_bps;
                    }
                    let Some(w) = self.workers.get_mut(&a.reader) else {
                        continue;
                    };
                    let (op, acts) = ReaderOp::start(a.key.clone(), a.instance, cfg, now);
                    w.readers.insert(
                        a.instance,
                        ReaderSlot {
                            op,
                            writer: a.writer,
                        },
                    );
                    self.route_reader(a.reader, &a.key, a.instance, a.writer, acts);
                }
                SchedAction::Stop {
                    assignment: a,
                    reason,
                } => {
                    if let Some(slot) = self
                        .workers
                        .get_mut(&a.reader)
                        .and_then(|w| w.readers.get_mut(&a.instance))
                    {
                        let acts = slot.op.stop(reason, now);
                        self.route_reader(a.reader, &a.key, a.instance, a.writer, acts);
                    }
                    if let Some(w) = self.workers.get_mut(&a.writer) {
                        if let Some(slot) = w.writers.get_mut(&a.instance) {
                            let c = self.clusters.get_mut(&w.cluster).unwrap();
                            let mut ctx = WriterCtx {
                                meta: &mut c.meta,
                                durable: &mut c.durable,
                                rng: &mut c.rng,
                                now,
                                geom: self.geom,
                            };
                            let acts = slot.op.stop(reason, &mut ctx);
                            let wc = w.cluster;
                            self.route_writer(a.writer, wc, &a.key, a.instance, a.reader, acts);
                        }
                    }
                }
            }
        }
        self.drain_sched_log(cluster);
    }

    fn is_rate_limited(&self, key: &OpKey) -> bool {
        self.streams
            .iter()
            .find(|s| s.spec.name == stream_of(&key.op.path))
            .is_some_and(|s| s.tree.mode(key.hop.down) == NodeMode::RateLimitedLeaf)
    }

    fn report_end(&mut self, key: &OpKey, instance: InstanceId, reason: EndReason) {
        let now = self.now();
        if !self.ended.insert(instance) {
            return;
        }
        *self.ops.ended.entry(format!("{reason:?}")).or_default() += 1;
        let owner = key.hop.up;
        if let Some(s) = self.clusters.get_mut(&owner).unwrap().scheduler.as_mut() {
            s.instance_ended(instance, reason, now);
        }
        self.drain_sched_log(owner);
    }

    fn worker_down(&mut self, pid: ProcessId) {
        let now = self.now();
        let ids: Vec<ClusterId> = self.clusters.keys().copied().collect();
        for c in ids {
            let acts = match self.clusters.get_mut(&c).unwrap().scheduler.as_mut() {
                Some(s) => s.worker_failed(pid, now),
                None => continue,
            };
            self.apply_sched(c, acts);
        }
    }

    // ---------------------------------------------------------------- workers

    fn note_lifecycle(&mut self, l: crate::transport::Lifecycle) {
        match l.event.as_str() {
            "poison" => self.ops.poisoned_locks += 1,
            "seize" => self.ops.seized_locks += 1,
            "resync" => self.ops.resyncs += 1,
            _ => {}
        }
        self.trace.push(&TraceRecord::Op(l));
    }

    fn route_reader(
        &mut self,
        pid: ProcessId,
        key: &OpKey,
        instance: InstanceId,
        peer: ProcessId,
        acts: Vec<Action>,
    ) {
        let now = self.now();
        for a in acts {
            match a {
                Action::Send { msg, delay_ms } => {
                    self.sim
                        .schedule_at(now + delay_ms, Some(pid), Ev::Transmit { to: peer, msg });
                }
                Action::Ended(r) => self.report_end(key, instance, r),
                Action::Log(l) => self.note_lifecycle(l),
                _ => {}
            }
        }
    }

    fn route_writer(
        &mut self,
        pid: ProcessId,
        cluster: ClusterId,
        key: &OpKey,
        instance: InstanceId,
        peer: ProcessId,
        acts: Vec<Action>,
    ) {
        let now = self.now();
        for a in acts {
            match a {
                Action::Send { msg, delay_ms } => {
                    self.sim
                        .schedule_at(now + delay_ms, Some(pid), Ev::Transmit { to: peer, msg });
                }
                Action::Put {
                    seq,
                    id,
                    key: ck,
                    bytes,
                    version,
                } => {
                    self.issue_put(
                        cluster,
                        ck,
                        bytes,
                        version,
                        seq,
                        id,
                        PutOwner::Writer { pid, instance },
                    );
                }
                Action::Timer { after_ms, timer } => {
                    self.sim
                        .schedule_to(pid, after_ms, Ev::WriterTimer { instance, timer });
                }
                Action::FileAppeared { path } => self.notify(cluster, &path),
                Action::Ended(r) => self.report_end(key, instance, r),
                Action::Log(l) => self.note_lifecycle(l),
            }
        }
        if key.op.storage == Storage::Durable {
            let len = self.clusters[&cluster].durable.length(&key.op.path);
            self.note_arrival(cluster, &key.op.path, Storage::Durable, len);
        }
    }

    fn transmit(&mut self, from: ProcessId, to: ProcessId, msg: StreamMsg) {
        let (Some(a), Some(b)) = (self.sim.process(from), self.sim.process(to)) else {
            return;
        };
        let (src, dst) = (a.cluster, b.cluster);
        let bytes = msg.wire_bytes();
        let _ = self
            .sim
            .send(src, dst, bytes, Some(to), Ev::Deliver { from, msg });
    }

    fn deliver(&mut self, to: ProcessId, from: ProcessId, msg: StreamMsg) {
        let now = self.now();
        let Some(w) = self.workers.get_mut(&to) else {
            return;
        };
        let instance = msg.instance();
        let cluster = w.cluster;
        match w.role {
            WorkerRole::Reader => {
                let Some(slot) = w.readers.get_mut(&instance) else {
                    self.reject(to, from, &msg);
                    return;
                };
                let acts = slot.op.on_msg(msg, now);
                let (key, peer) = (slot.op.key.clone(), slot.writer);
                self.route_reader(to, &key, instance, peer, acts);
                self.reap(to);
            }
            WorkerRole::Writer => {
                let c = self.clusters.get_mut(&cluster).unwrap();
                let mut ctx = WriterCtx {
                    meta: &mut c.meta,
                    durable: &mut c.durable,
                    rng: &mut c.rng,
                    now,
                    geom: self.geom,
                };
                let (acts, key, peer) = match (w.writers.get_mut(&instance), msg) {
                    (Some(slot), msg) => {
                        let acts = slot.op.on_msg(msg, &mut ctx);
                        (acts, slot.op.key.clone(), slot.reader)
                    }
                    (None, StreamMsg::Open { instance, key }) => {
                        let (op, acts) = WriterOp::open(
                            key.clone(),
                            instance,
                            to.0,
                            self.sc.tuning.writer,
                            &mut ctx,
                        );
                        w.writers.insert(instance, WriterSlot { op, reader: from });
                        (acts, key, from)
                    }
                    (None, msg) => {
                        self.reject(to, from, &msg);
                        return;
                    }
                };
                self.route_writer(to, cluster, &key, instance, peer, acts);
                self.reap(to);
            }
        }
    }

    /// Answer a message for an instance this worker does not run.
    fn reject(&mut self, me: ProcessId, peer: ProcessId, msg: &StreamMsg) {
        if matches!(msg, StreamMsg::Stop { .. }) {
            return;
        }
        let stop = StreamMsg::Stop {
            instance: msg.instance(),
            reason: EndReason::PeerStopped,
        };
        self.sim.schedule_to(
            me,
            0,
            Ev::Transmit {
                to: peer,
                msg: stop,
            },
        );
    }

    fn reap(&mut self, pid: ProcessId) {
        if let Some(w) = self.workers.get_mut(&pid) {
            w.readers.retain(|_, s| s.op.is_live());
            w.writers.retain(|_, s| s.op.is_live());
        }
    }

    fn writer_timer(&mut self, pid: ProcessId, instance: InstanceId, timer: WriterTimer) {
        let now = self.now();
        let Some(w) = self.workers.get_mut(&pid) else {
            return;
        };
        let Some(slot) = w.writers.get_mut(&instance) else {
            return;
        };
        let c = self.clusters.get_mut(&w.cluster).unwrap();
        let mut ctx = WriterCtx {
            meta: &mut c.meta,
            durable: &mut c.durable,
            rng: &mut c.rng,
            now,
            geom: self.geom,
        };
        let acts = slot.op.on_timer(timer, &mut ctx);
        let (key, peer, cluster) = (slot.op.key.clone(), slot.reader, w.cluster);
        self.route_writer(pid, cluster, &key, instance, peer, acts);
        self.reap(pid);
    }

    fn orphan_limit(&self) -> u64 {
        3 * self.sc.tuning.sched_tick_ms.max(1)
    }

    fn reader_poll(&mut self, pid: ProcessId) {
        let now = self.now();
        let poll = self.sc.tuning.reader.poll_ms;
        let linger = self.sc.tuning.cache_linger_ms;
        let limit = self.orphan_limit();
        let Some(w) = self.workers.get_mut(&pid) else {
            return;
        };
        let cluster = w.cluster;
        let hb_ok = {
            let c = &self.clusters[&cluster];
            c.scheduler.is_some() && now.saturating_sub(c.last_sched_hb) <= limit
        };
        let mut logs = Vec::new();
        if !hb_ok && !w.orphaned && !w.readers.is_empty() {
            w.orphaned = true;
            for s in w.readers.values_mut() {
                s.op.mark_orphaned();
                logs.push(crate::transport::Lifecycle {
                    at: now,
                    instance: s.op.instance,
                    op: s.op.key.to_string(),
                    event: "orphaned".into(),
                    detail: String::new(),
                });
            }
        } else if hb_ok && w.orphaned {
            w.orphaned = false;
            for s in w.readers.values_mut() {
                s.op.mark_adopted();
            }
        }
        let paths: BTreeSet<String> = w
            .readers
            .values()
            .map(|s| s.op.key.op.path.clone())
            .collect();
        let c = self.clusters.get_mut(&cluster).unwrap();
        let mut view = StorageView {
            data: &mut c.data,
            meta: &mut c.meta,
            durable: &mut c.durable,
            rng: &mut c.rng,
            now,
            tuning: self.tuning,
        };
        let refs: Vec<&str> = paths.iter().map(|s| s.as_str()).collect();
        let metas = if refs.is_empty() {
            BTreeMap::new()
        } else {
            w.poller.poll(&mut view, &refs)
        };
        let mut routed = Vec::new();
        for (inst, slot) in w.readers.iter_mut() {
            let path = &slot.op.key.op.path;
            let closed = self.closed.get(path).copied();
            let acts = if slot.op.key.op.storage == Storage::Cache
                && closed.is_some_and(|(_, at)| now >= at + linger)
            {
                slot.op.stop(EndReason::Done, now)
            } else {
                let meta = metas.get(path).copied().unwrap_or_default();
                slot.op.on_poll(&mut view, meta, closed.map(|(l, _)| l))
            };
            routed.push((slot.op.key.clone(), *inst, slot.writer, acts));
        }
        for l in logs {
            self.note_lifecycle(l);
        }
        for (key, inst, peer, acts) in routed {
            self.route_reader(pid, &key, inst, peer, acts);
        }
        self.reap(pid);
        self.sim.schedule_to(pid, poll, Ev::ReaderPoll);
    }

    // ---------------------------------------------------------------- consumers

    fn consumer_start(&mut self, i: usize) {
        let c = &self.consumers[i];
        let pid = self.sim.spawn(c.cluster, "consumer");
        let poll = c.poll_ms;
        self.consumers[i].pid = Some(pid);
        let d = self.sim.rng.below(poll.max(1));
        self.sim
            .schedule_to(pid, d, Ev::ConsumerPoll { consumer: i });
    }

    fn consumer_poll(&mut self, i: usize) {
        let now = self.now();
        let window = self.sc.stable_window;
        let proc_ = &mut self.consumers[i];
        let cluster = proc_.cluster;
        let pid = proc_.pid.unwrap();
        let c = self.clusters.get_mut(&cluster).unwrap();
        let m = self.metrics.entry(cluster).or_default();
        let mut violations = Vec::new();
        for sh in proc_.shards.iter_mut() {
            let mut view = StorageView {
                data: &mut c.data,
                meta: &mut c.meta,
                durable: &mut c.durable,
                rng: &mut c.rng,
                now,
                tuning: self.tuning,
            };
            let step = sh.consumer.step(&mut view);
            let durable_reads = step.stats.durable_reads();
            m.fallback_reads += durable_reads;
            m.cache_failures += step.stats.fallback_reads;
            self.fallback_tl.add(now, durable_reads);
            self.failure_tl.add(now, step.stats.fallback_reads);
            let at = now + step.latency_ms;
            let log = &self.streams[sh.stream].logs[sh.consumer.shard as usize];
            for msg in &step.messages {
                if sh.broken {
                    break;
                }
                if let Err(d) = log.observe(&mut sh.cursor, &msg.bytes) {
                    sh.broken = true;
                    let detail = format!(
                        "data byte differs in file {} message {}",
                        msg.file_no, msg.seq
                    );
                    violations.push((
                        sh.stream,
                        sh.consumer.shard,
                        d.offset,
                        d.expected,
                        Some(d.actual),
                        detail,
                    ));
                    break;
                }
                let delay = at.saturating_sub(msg.produce_time_ms);
                m.delays.push(delay);
                let b = (at / 1000) as usize;
                if self.delay_by_second.len() <= b {
                    self.delay_by_second.resize(b + 1, Vec::new());
                }
                self.delay_by_second[b].push(delay);
                if window.is_some_and(|w| w.contains(at)) {
                    self.window_delays.push(delay);
                    self.window_msgs += 1;
                }
                self.messages_delivered += 1;
            }
            if let (Some(why), false) = (step.corrupt, sh.broken) {
                sh.broken = true;
                let off = sh.cursor.read;
                let expected = log.k_bytes.get(off as usize).copied();
                violations.push((sh.stream, sh.consumer.shard, off, expected, None, why));
            }
        }
        for (stream, shard, offset, expected, actual, why) in violations {
            let detail = format!(
                "stream={} shard={} consumer={} offset={} expected={:?} actual={:?}: {}",
                self.streams[stream].spec.name, shard, i, offset, expected, actual, why
            );
            let line = self.trace.push(&TraceRecord::Violation { at: now, detail });
            if self.violation.is_none() {
                self.violation = Some(Violation {
                    at_ms: now,
                    stream: self.streams[stream].spec.name.clone(),
                    shard,
                    consumer: i,
                    offset,
                    expected,
                    actual,
                    detail: why,
                    trace_line: line,
                });
            }
        }
        let poll = self.consumers[i].poll_ms;
        self.sim
            .schedule_to(pid, poll, Ev::ConsumerPoll { consumer: i });
    }

    // ---------------------------------------------------------------- faults

    fn live_workers(&self, cluster: ClusterId, role: WorkerRole) -> Vec<ProcessId> {
        let c = &self.clusters[&cluster];
        let list = match role {
            WorkerRole::Reader => &c.readers,
            WorkerRole::Writer => &c.writers,
        };
        list.iter()
            .copied()
            .filter(|p| self.sim.is_alive(*p))
            .collect()
    }

    fn spawn_worker(&mut self, cluster: ClusterId, role: WorkerRole) {
        let name = match role {
            WorkerRole::Reader => "reader",
            WorkerRole::Writer => "writer",
        };
        let pid = self.sim.spawn(cluster, name);
        self.workers.insert(
            pid,
            Worker::new(cluster, role, self.sc.tuning.durable.poll_ms),
        );
        let c = self.clusters.get_mut(&cluster).unwrap();
        match role {
            WorkerRole::Reader => {
                c.readers.push(pid);
                self.sim.schedule_to(pid, 0, Ev::ReaderPoll);
            }
            WorkerRole::Writer => c.writers.push(pid),
        }
    }

    fn kill_worker(&mut self, pid: ProcessId) {
        self.sim.kill_process(pid);
        self.workers.remove(&pid);
        let d = self.sc.tuning.failure_detect_ms;
        self.sim.schedule(d, Ev::WorkerDown { pid });
    }

    fn fault(&mut self, idx: usize) {
        let now = self.now();
        let f = self.sc.faults[idx].clone();
        self.trace.push(&TraceRecord::Fault {
            at: now,
            detail: serde_json::to_string(&f.action).unwrap(),
        });
        match f.action {
            FaultAction::KillCacheReplicas {
                cluster,
                cache,
                replicas,
                replace,
                restart_after_ms,
            } => {
                let c = self.clusters.get_mut(&cid(cluster)).unwrap();
                let kv = match cache {
                    CacheKind::Data => &mut c.data,
                    CacheKind::Metadata => &mut c.meta,
                };
                for &r in &replicas {
                    kv.kill_replica(ReplicaId(r));
                }
                if replace {
                    for &r in &replicas {
                        kv.replace_replica(ReplicaId(r));
                    }
                    let members = kv.members().len();
                    self.note_replicas(cid(cluster), cache, members);
                }
                if let Some(d) = restart_after_ms {
                    self.sim.schedule(
                        d,
                        Ev::Heal(Heal::CacheReplicas {
                            cluster: cid(cluster),
                            cache,
                            replicas,
                        }),
                    );
                }
            }
            FaultAction::KillWorkers {
                cluster,
                role,
                count,
                restart_after_ms,
            } => {
                let victims: Vec<ProcessId> = self
                    .live_workers(cid(cluster), role)
                    .into_iter()
                    .take(count)
                    .collect();
                let n = victims.len();
                for pid in victims {
                    self.kill_worker(pid);
                }
                if let Some(d) = restart_after_ms {
                    self.sim.schedule(
                        d,
                        Ev::Heal(Heal::Workers {
                            cluster: cid(cluster),
                            role,
                            count: n,
                        }),
                    );
                }
            }
            FaultAction::KillScheduler {
                cluster,
                restart_after_ms,
            } => {
                let c = self.clusters.get_mut(&cid(cluster)).unwrap();
                self.sim.kill_process(c.sched_pid);
                c.scheduler = None;
                if let Some(d) = restart_after_ms {
                    self.sim.schedule(
                        d,
                        Ev::Heal(Heal::Scheduler {
                            cluster: cid(cluster),
                        }),
                    );
                }
            }
            FaultAction::LinkDown { a, b, for_ms } => {
                self.sim.set_link_up(cid(a), cid(b), false);
                self.sim.schedule(
                    for_ms,
                    Ev::Heal(Heal::Link {
                        a: cid(a),
                        b: cid(b),
                    }),
                );
            }
            FaultAction::DurableOutage { cluster, for_ms } => {
                self.clusters
                    .get_mut(&cid(cluster))
                    .unwrap()
                    .durable
                    .set_available(false);
                self.sim.schedule(
                    for_ms,
                    Ev::Heal(Heal::Durable {
                        cluster: cid(cluster),
                    }),
                );
            }
            FaultAction::Reshard {
                cluster,
                cache,
                add,
            } => {
                let c = self.clusters.get_mut(&cid(cluster)).unwrap();
                let kv = match cache {
                    CacheKind::Data => &mut c.data,
                    CacheKind::Metadata => &mut c.meta,
                };
                kv.add_replicas(add, now);
                let n = kv.members().len();
                self.note_replicas(cid(cluster), cache, n);
            }
            FaultAction::SplitBrain { cluster, for_ms } => {
                if let Some(s) = self
                    .clusters
                    .get_mut(&cid(cluster))
                    .unwrap()
                    .scheduler
                    .as_mut()
                {
                    s.set_split_brain(now, now + for_ms);
                    self.sim.schedule(for_ms, Ev::Heal(Heal::SplitBrainOver));
                }
            }
            FaultAction::ClusterOutage { cluster, for_ms } => {
                let c = cid(cluster);
                self.set_cluster_links(c, false);
                self.graph.set_node_up(c, true);
                for s in 0..self.streams.len() {
                    if !self.streams[s].tree.contains(c) || self.streams[s].tree.root == c {
                        continue;
                    }
                    let cfg = self.sc.tuning.tree;
                    let old = self.streams[s].tree.clone();
                    if let Ok(t) = penalize_and_rebuild(&old, &mut self.graph, &[c], &[], &cfg) {
                        self.apply_tree(s, t);
                    }
                }
                self.sim
                    .schedule(for_ms, Ev::Heal(Heal::ClusterBack { cluster: c }));
            }
            FaultAction::AddDestination { stream, cluster } => {
                let s = self.sc.stream_index(&stream).unwrap();
                let cfg = self.sc.tuning.tree;
                let old = self.streams[s].tree.clone();
                if let Ok(t) = crate::copy_tree::add_cluster(&old, &self.graph, cid(cluster), &cfg)
                {
                    self.apply_tree(s, t);
                }
            }
        }
    }

    fn set_cluster_links(&mut self, c: ClusterId, up: bool) {
        let links: Vec<(u32, u32)> = self.sc.links.iter().map(|l| (l.a, l.b)).collect();
        for (a, b) in links {
            if cid(a) == c || cid(b) == c {
                self.sim.set_link_up(cid(a), cid(b), up);
            }
        }
    }

    fn heal(&mut self, h: Heal) {
        let now = self.now();
        self.trace.push(&TraceRecord::Fault {
            at: now,
            detail: format!("heal {h:?}"),
        });
        match h {
            Heal::Workers {
                cluster,
                role,
                count,
            } => {
                for _ in 0..count {
                    self.spawn_worker(cluster, role);
                }
            }
            Heal::Scheduler { cluster } => self.restart_scheduler(cluster),
            Heal::CacheReplicas {
                cluster,
                cache,
                replicas,
            } => {
                let c = self.clusters.get_mut(&cluster).unwrap();
                let kv = match cache {
                    CacheKind::Data => &mut c.data,
                    CacheKind::Metadata => &mut c.meta,
                };
                for r in replicas {
                    if !kv.is_alive(ReplicaId(r)) {
                        kv.restart_replica(ReplicaId(r));
                    }
                }
            }
            Heal::Link { a, b } => self.sim.set_link_up(a, b, true),
            Heal::Durable { cluster } => self
                .clusters
                .get_mut(&cluster)
                .unwrap()
                .durable
                .set_available(true),
            Heal::SplitBrainOver => {}
            Heal::ClusterBack { cluster } => {
                self.set_cluster_links(cluster, true);
                self.graph.clear_penalties();
                for s in 0..self.streams.len() {
                    let spec = &self.streams[s].spec;
                    let mut dests: BTreeSet<ClusterId> =
                        spec.destinations.iter().map(|&d| cid(d)).collect();
                    dests.extend(
                        self.streams[s]
                            .tree
                            .nodes()
                            .filter(|n| *n != cid(spec.source)),
                    );
                    let cfg = self.sc.tuning.tree;
                    if let Ok(t) = build_tree_partial(&self.graph, cid(spec.source), &dests, &cfg) {
                        if t.edges() != self.streams[s].tree.edges() {
                            self.apply_tree(s, t);
                        }
                    }
                }
            }
        }
    }

    fn restart_scheduler(&mut self, cluster: ClusterId) {
        let now = self.now();
        let cfg = self.sc.tuning.scheduler;
        let pid = self.sim.spawn(cluster, "scheduler");
        let c = self.clusters.get_mut(&cluster).unwrap();
        if c.scheduler.is_some() {
            return;
        }
        c.sched_epoch += 1;
        c.sched_pid = pid;
        c.scheduler = Some(Scheduler::new(cluster, c.sched_epoch, cfg));
        // Recover the op set from the files present in this cluster.
        let paths: Vec<String> = c.durable.paths().map(|s| s.to_string()).collect();
        for p in paths {
            let kids = self.children(stream_of(&p), cluster);
            if kids.is_empty() {
                continue;
            }
            let done = self.closed.get(&p).is_some_and(|&(len, _)| {
                kids.iter()
                    .all(|k| self.clusters[k].durable.length(&p) >= len)
            });
            if done {
                continue;
            }
            if let Some(s) = self.clusters.get_mut(&cluster).unwrap().scheduler.as_mut() {
                s.notify_file(&p, &kids, now);
            }
        }
        self.sim.schedule_to(pid, 0, Ev::SchedTick { cluster });
    }

    fn apply_tree(&mut self, s: usize, new: CopyTree) {
        let now = self.now();
        let old_edges: BTreeSet<(ClusterId, ClusterId)> =
            self.streams[s].tree.edges().into_iter().collect();
        let new_edges: BTreeSet<(ClusterId, ClusterId)> = new.edges().into_iter().collect();
        let prefix = format!("/{}/", self.streams[s].spec.name);
        self.streams[s].tree = new;
        self.trace_tree(s);
        for &(u, v) in old_edges.difference(&new_edges) {
            let acts = match self.clusters.get_mut(&u).unwrap().scheduler.as_mut() {
                Some(sc) => sc.drop_hop(v, &prefix, now),
                None => continue,
            };
            self.apply_sched(u, acts);
        }
        for &(u, v) in new_edges.difference(&old_edges) {
            let paths: Vec<String> = self.clusters[&u]
                .durable
                .paths()
                .filter(|p| p.starts_with(&prefix))
                .map(|p| p.to_string())
                .collect();
            if let Some(sc) = self.clusters.get_mut(&u).unwrap().scheduler.as_mut() {
                for p in paths {
                    sc.notify_file(&p, &[v], now);
                }
            }
        }
    }

    fn trace_tree(&mut self, s: usize) {
        let now = self.sim.now();
        let edges = self.streams[s]
            .tree
            .edges()
            .into_iter()
            .map(|(a, b)| (a.0, b.0))
            .collect();
        let stream = self.streams[s].spec.name.clone();
        self.trace.push(&TraceRecord::Tree {
            at: now,
            stream,
            edges,
        });
    }

    fn promote_check(&mut self) {
        let chunk = self.geom.chunk_size;
        for s in 0..self.streams.len() {
            let leaves: Vec<ClusterId> = self.streams[s]
                .tree
                .nodes()
                .filter(|n| self.streams[s].tree.mode(*n) == NodeMode::RateLimitedLeaf)
                .collect();
            let prefix = format!("/{}/", self.streams[s].spec.name);
            for leaf in leaves {
                let Some(&parent) = self.streams[s].tree.parent.get(&leaf) else {
                    continue;
                };
                let up = &self.clusters[&parent].durable;
                let down = &self.clusters[&leaf].durable;
                let caught_up = up
                    .paths()
                    .filter(|p| p.starts_with(&prefix))
                    .all(|p| down.length(p) + chunk >= up.length(p));
                if caught_up && self.streams[s].tree.promote(leaf).is_ok() {
                    self.trace_tree(s);
                    for w in self.workers.values_mut() {
                        for slot in w.readers.values_mut() {
                            if slot.op.key.hop.down == leaf
                                && slot.op.key.op.path.starts_with(&prefix)
                            {
                                slot.op.set_rate_limit(0);
                            }
                        }
                    }
                }
            }
        }
        self.sim.schedule(1000, Ev::PromoteCheck);
    }

    // ---------------------------------------------------------------- autoscaling

    fn note_replicas(&mut self, cluster: ClusterId, cache: CacheKind, n: usize) {
        let now = self.now();
        let c = self.clusters.get_mut(&cluster).unwrap();
        let rep = match cache {
            CacheKind::Data => &mut c.data_report,
            CacheKind::Metadata => &mut c.meta_report,
        };
        rep.replica_changes.push((now, n));
        self.trace.push(&TraceRecord::Scale {
            at: now,
            cluster: cluster.0,
            cache: format!("{cache:?}").to_lowercase(),
            replicas: n,
        });
    }

    fn second(&mut self) {
        let now = self.now();
        for c in self.clusters.values_mut() {
            for (kv, acc, rep) in [
                (&mut c.data, &mut c.data_load, &mut c.data_report),
                (&mut c.meta, &mut c.meta_load, &mut c.meta_report),
            ] {
                for (r, l) in kv.take_load() {
                    rep.peak_replica_qps = rep.peak_replica_qps.max(l.requests);
                    rep.peak_replica_bps = rep.peak_replica_bps.max(l.bytes);
                    let e = acc.entry(r).or_default();
                    e.requests += l.requests;
                    e.bytes += l.bytes;
                }
            }
            let st = c.data.stats();
            let reads = st.relaxed_reads + st.consistent_reads;
            let prev = c.last_data_stats.relaxed_reads + c.last_data_stats.consistent_reads;
            c.data_report.peak_read_qps = c.data_report.peak_read_qps.max(reads - prev);
            c.last_data_stats = st;
        }
        let delivered = self.messages_delivered;
        let produced = self.messages_produced;
        let fb = self.fallback_tl.sum_in(now.saturating_sub(1000), now);
        self.trace.push(&TraceRecord::Summary {
            at: now,
            delivered,
            produced,
            fallback_reads: fb,
        });
        self.sim.schedule(1000, Ev::Second);
    }

    fn autoscale(&mut self, idx: usize) {
        let now = self.now();
        let a = self.sc.autoscalers[idx].clone();
        let cluster = cid(a.cluster);
        let c = self.clusters.get_mut(&cluster).unwrap();
        let (kv, acc) = match a.cache {
            CacheKind::Data => (&mut c.data, &mut c.data_load),
            CacheKind::Metadata => (&mut c.meta, &mut c.meta_load),
        };
        let loads = std::mem::take(acc);
        let secs = a.check_ms as f64 / 1000.0;
        let members = kv.members().len();
        let rate = |l: &Load| (l.requests as f64 / secs, l.bytes as f64 / secs);
        let over = loads.values().any(|l| {
            let (q, b) = rate(l);
            (a.max_qps > 0 && q > a.max_qps as f64) || (a.max_bps > 0 && b > a.max_bps as f64)
        });
        let low = loads.values().all(|l| {
            let (q, b) = rate(l);
            (a.max_qps == 0 || q < a.low_fraction * a.max_qps as f64)
                && (a.max_bps == 0 || b < a.low_fraction * a.max_bps as f64)
        });
        let state = &mut self.autoscale_state[idx];
        let mut changed = None;
        if over && members < a.max_replicas {
            // Size for the total load at 70% of the threshold.
            let total_q: f64 = loads.values().map(|l| rate(l).0).sum();
            let total_b: f64 = loads.values().map(|l| rate(l).1).sum();
            let need_q = if a.max_qps > 0 {
                total_q / (0.7 * a.max_qps as f64)
            } else {
                0.0
            };
            let need_b = if a.max_bps > 0 {
                total_b / (0.7 * a.max_bps as f64)
            } else {
                0.0
            };
            let need = (need_q.max(need_b).ceil() as usize)
                .max(members + 1)
                .min(a.max_replicas);
            kv.add_replicas(need - members, now);
            state.0 = now;
            changed = Some(kv.members().len());
        } else if !low {
            state.0 = now;
        } else if now.saturating_sub(state.0) >= a.stable_ms {
            let floor = a.min_replicas.max(self.sc.tuning.replication.n_replicas);
            if members > floor {
                let n = (members / 4).max(1).min(members - floor);
                kv.remove_replicas(n, now);
                state.0 = now;
                changed = Some(kv.members().len());
            }
        }
        if let Some(n) = changed {
            self.note_replicas(cluster, a.cache, n);
        }
        self.sim.schedule(a.check_ms, Ev::Autoscale { idx });
    }

    // ---------------------------------------------------------------- termination

    fn end_production(&mut self) {
        for s in 0..self.streams.len() {
            self.producer_flush(s, false);
            let shards = self.streams[s].spec.shards;
            self.producing_final(s, shards);
        }
        self.producing = false;
        self.heal_all();
        self.sim.schedule(1000, Ev::QuiesceCheck);
    }

    fn producing_final(&mut self, s: usize, shards: u32) {
        for shard in 0..shards {
            if self.streams[s].shards[shard as usize].rolled {
                // Current file already sealed; nothing left to close.
                if self.streams[s].shards[shard as usize].buffer.is_empty() {
                    continue;
                }
            }
            self.flush_shard(s, shard, true);
        }
    }

    /// Infrastructure becomes healthy for the drain phase.
    fn heal_all(&mut self) {
        let now = self.now();
        let links: Vec<(u32, u32)> = self.sc.links.iter().map(|l| (l.a, l.b)).collect();
        for (a, b) in links {
            self.sim.set_link_up(cid(a), cid(b), true);
        }
        let ids: Vec<ClusterId> = self.clusters.keys().copied().collect();
        for id in ids {
            let c = self.clusters.get_mut(&id).unwrap();
            c.durable.set_available(true);
            for kv in [&mut c.data, &mut c.meta] {
                for r in kv.members() {
                    if !kv.is_alive(r) {
                        kv.restart_replica(r);
                    }
                }
            }
            if c.scheduler.is_none() {
                self.restart_scheduler(id);
            }
            for role in [WorkerRole::Reader, WorkerRole::Writer] {
                let want = {
                    let spec = self.sc.clusters.iter().find(|x| cid(x.id) == id).unwrap();
                    match role {
                        WorkerRole::Reader => spec.readers,
                        WorkerRole::Writer => spec.writers,
                    }
                };
                let have = self.live_workers(id, role).len();
                for _ in have..want {
                    self.spawn_worker(id, role);
                }
            }
        }
        let _ = now;
    }

    fn all_consumers_complete(&self) -> (bool, u64) {
        let mut incomplete = 0;
        for c in &self.consumers {
            let done = c.pid.is_some()
                && c.shards.iter().all(|sh| {
                    self.streams[sh.stream].logs[sh.consumer.shard as usize].complete(&sh.cursor)
                });
            if !done {
                incomplete += 1;
            }
        }
        (incomplete == 0, incomplete)
    }

    fn all_replicated(&self) -> bool {
        self.streams.iter().all(|s| {
            let src = &self.clusters[&cid(s.spec.source)].durable;
            let prefix = format!("/{}/", s.spec.name);
            s.tree.nodes().all(|n| {
                let d = &self.clusters[&n].durable;
                src.paths()
                    .filter(|p| p.starts_with(&prefix))
                    .all(|p| d.length(p) == src.length(p))
            })
        })
    }

    fn quiesce_check(&mut self) {
        let producers_idle = self.prod_files.values().all(|f| f.pending.is_empty());
        if producers_idle && self.all_consumers_complete().0 && self.all_replicated() {
            self.quiescent_at = Some(self.now());
            return;
        }
        self.sim.schedule(1000, Ev::QuiesceCheck);
    }

    fn cache_report(kv: &KvCache, base: &CacheReport) -> CacheReport {
        let st = kv.stats();
        let members = kv.members().len();
        let peak = base
            .replica_changes
            .iter()
            .map(|&(_, n)| n)
            .max()
            .unwrap_or(members)
            .max(members);
        CacheReport {
            reads: st.relaxed_reads + st.consistent_reads,
            writes_applied: st.writes_applied,
            writes_rejected: st.writes_rejected,
            bytes_read: st.bytes_read,
            evicted_ttl: st.evicted_ttl,
            evicted_capacity: st.evicted_capacity,
            unavailable: st.unavailable,
            replicas_final: members,
            replicas_peak: peak,
            ..base.clone()
        }
    }

    fn finish(mut self) -> RunOutput {
        let end = self.now();
        let (complete, incomplete) = self.all_consumers_complete();
        let termination = self.quiescent_at.is_some() && complete;
        let safety = self.violation.is_none();
        let pass = safety && termination;
        self.trace.push(&TraceRecord::Footer { end, pass });
        let mut all_delays = Vec::new();
        let mut clusters = BTreeMap::new();
        for (id, c) in &self.clusters {
            let m = self.metrics.remove(id).unwrap_or_default();
            all_delays.extend_from_slice(&m.delays);
            clusters.insert(
                format!("c{}", id.0),
                ClusterReport {
                    delivery_delay_ms: Percentiles::from_samples(&m.delays),
                    cache_arrival_ms: Percentiles::from_samples(&m.cache_arrival),
                    durable_arrival_ms: Percentiles::from_samples(&m.durable_arrival),
                    data_cache: Self::cache_report(&c.data, &c.data_report),
                    meta_cache: Self::cache_report(&c.meta, &c.meta_report),
                    consumer_fallback_reads: m.fallback_reads,
                    consumer_cache_failures: m.cache_failures,
                },
            );
        }
        let stable_window = self.sc.stable_window.map(|w| WindowReport {
            from_ms: w.from_ms,
            to_ms: w.to_ms,
            messages: self.window_msgs,
            fallback_reads: self.fallback_tl.sum_in(w.from_ms, w.to_ms),
            cache_read_failures: self.failure_tl.sum_in(w.from_ms, w.to_ms),
            delivery_delay_ms: Percentiles::from_samples(&self.window_delays),
        });
        let delay_p99_timeline = self
            .delay_by_second
            .iter()
            .map(|v| Percentiles::from_samples(v).p99)
            .collect();
        let report = Report {
            schema_version: super::scenario::SCHEMA_VERSION,
            scenario: self.sc.name.clone(),
            seed: self.sc.seed,
            duration_ms: self.sc.duration_ms,
            end_ms: end,
            verdict: Verdict {
                pass,
                safety,
                termination,
                first_violation: self.violation.clone(),
                quiescent_at_ms: self.quiescent_at,
                incomplete_consumers: incomplete,
            },
            messages_produced: self.messages_produced,
            bytes_produced: self.bytes_produced,
            messages_delivered: self.messages_delivered,
            delivery_delay_ms: Percentiles::from_samples(&all_delays),
            clusters,
            stable_window,
            fallback_timeline: self.fallback_tl.as_slice().to_vec(),
            cache_failure_timeline: self.failure_tl.as_slice().to_vec(),
            delay_p99_timeline,
            write_latency_ms: Percentiles::from_samples(&self.write_latency),
            ops: self.ops.clone(),
            events_fired: self.sim.stats().fired,
            trace_records: self.trace.len(),
            trace_sha256: self.trace.digest(),
        };
        RunOutput {
            report,
            trace: self.trace,
        }
    }
}

impl Worker {
    fn new(cluster: ClusterId, role: WorkerRole, durable_poll_ms: u64) -> Self {
        Self {
            cluster,
            role,
            readers: BTreeMap::new(),
            writers: BTreeMap::new(),
            poller: LengthPoller::new(durable_poll_ms),
            orphaned: false,
        }
    }
}
