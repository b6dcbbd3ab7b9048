//! Scenario files: schema, defaults and validation.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::copy_tree::TreeConfig;
use crate::durable_log::DurableConfig;
use crate::file_layer::{ChunkGeometry, ReadTuning};
use crate::kv_cache::{CacheKind, CacheReplicaConfig, ReplicationConfig};
use crate::scheduler::SchedulerConfig;
use crate::transport::{ReaderConfig, WriterConfig};

pub const SCHEMA_VERSION: u32 = 1;

fn d_schema() -> u32 {
    SCHEMA_VERSION
}
fn d_drain() -> u64 {
    120_000
}
fn d_data_replicas() -> usize {
    9
}
fn d_meta_replicas() -> usize {
    6
}
fn d_workers() -> usize {
    4
}
fn d_bandwidth() -> u64 {
    10_000_000_000
}
fn d_message_bytes() -> u64 {
    1000
}
fn d_buffer() -> u64 {
    100
}
fn d_file_bytes() -> u64 {
    1 << 20
}
fn d_one() -> u32 {
    1
}
fn d_consumer_poll() -> u64 {
    100
}
fn d_max_delay() -> u64 {
    1000
}
fn d_check() -> u64 {
    1000
}
fn d_low() -> f64 {
    0.25
}
fn d_stable() -> u64 {
    10_000
}
fn d_max_replicas() -> usize {
    64
}
fn d_meta_cache() -> CacheReplicaConfig {
    CacheReplicaConfig::metadata_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "d_schema")]
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_ms: u64,
    /// Upper bound on the drain phase after producers stop.
    #[serde(default = "d_drain")]
    pub drain_ms: u64,
    pub clusters: Vec<ClusterSpec>,
    pub links: Vec<LinkSpec>,
    pub streams: Vec<StreamSpec>,
    #[serde(default)]
    pub consumers: Vec<FleetSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub autoscalers: Vec<AutoscalerSpec>,
    #[serde(default)]
    pub stable_window: Option<Window>,
    #[serde(default)]
    pub tuning: Tuning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub id: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default = "d_data_replicas")]
    pub data_replicas: usize,
    #[serde(default = "d_meta_replicas")]
    pub meta_replicas: usize,
    /// Idle backups per cache, used for failover.
    #[serde(default)]
    pub spare_replicas: usize,
    #[serde(default = "d_workers")]
    pub readers: usize,
    #[serde(default = "d_workers")]
    pub writers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub a: u32,
    pub b: u32,
    pub latency_ms: u64,
    #[serde(default = "d_bandwidth")]
    pub bandwidth_bps: u64,
    /// Routing cost; defaults to the latency.
    #[serde(default)]
    pub cost: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Window {
    pub from_ms: u64,
    pub to_ms: u64,
}

impl Window {
    pub fn contains(&self, t: u64) -> bool {
        t >= self.from_ms && t < self.to_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub name: String,
    pub source: u32,
    pub destinations: Vec<u32>,
    pub shards: u32,
    /// Producer payload rate per stream, bytes per second.
    pub rate_bps: u64,
    #[serde(default = "d_message_bytes")]
    pub message_bytes: u64,
    #[serde(default = "d_buffer")]
    pub buffer_interval_ms: u64,
    /// Data file size that triggers rollover.
    #[serde(default = "d_file_bytes")]
    pub file_bytes: u64,
    /// Producer stops flushing in this window; the backlog is flushed at
    /// its end.
    #[serde(default)]
    pub pause: Option<Window>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ramp {
    pub every_ms: u64,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSpec {
    pub cluster: u32,
    pub stream: String,
    pub count: usize,
    #[serde(default = "d_one")]
    pub shards_each: u32,
    #[serde(default = "d_consumer_poll")]
    pub poll_ms: u64,
    /// Per consumer, split evenly over its shards; 0 disables.
    #[serde(default)]
    pub rate_cap_bps: u64,
    #[serde(default)]
    pub start_ms: u64,
    /// Start consumers gradually instead of all at `start_ms`.
    #[serde(default)]
    pub ramp: Option<Ramp>,
    #[serde(default = "d_max_delay")]
    pub max_delay_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerRole {
    Reader,
    Writer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub at_ms: u64,
    pub action: FaultAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultAction {
    /// Kill cache replicas (ids within the cache). With `replace`, spares
    /// take over their shards.
    KillCacheReplicas {
        cluster: u32,
        cache: CacheKind,
        replicas: Vec<u32>,
        #[serde(default)]
        replace: bool,
        #[serde(default)]
        restart_after_ms: Option<u64>,
    },
    /// Kill the first `count` live workers of a role.
    KillWorkers {
        cluster: u32,
        role: WorkerRole,
        count: usize,
        #[serde(default)]
        restart_after_ms: Option<u64>,
    },
    KillScheduler {
        cluster: u32,
        #[serde(default)]
        restart_after_ms: Option<u64>,
    },
    LinkDown {
        a: u32,
        b: u32,
        for_ms: u64,
    },
    DurableOutage {
        cluster: u32,
        for_ms: u64,
    },
    /// Grow a cache ring by `add` replicas, migrating moved keys.
    Reshard {
        cluster: u32,
        cache: CacheKind,
        add: usize,
    },
    /// The cluster's scheduler double-assigns for `for_ms`.
    SplitBrain {
        cluster: u32,
        for_ms: u64,
    },
    /// Cluster unreachable; copy trees are penalized and rebuilt around it.
    ClusterOutage {
        cluster: u32,
        for_ms: u64,
    },
    /// Onboard a new destination as a rate-limited leaf.
    AddDestination {
        stream: String,
        cluster: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoscalerSpec {
    pub cluster: u32,
    pub cache: CacheKind,
    /// Per-replica requests per second that trigger a scale-up; 0 disables.
    #[serde(default)]
    pub max_qps: u64,
    /// Per-replica bytes per second that trigger a scale-up; 0 disables.
    #[serde(default)]
    pub max_bps: u64,
    #[serde(default = "d_check")]
    pub check_ms: u64,
    /// Scale down after `stable_ms` with every replica below this fraction
    /// of both thresholds.
    #[serde(default = "d_low")]
    pub low_fraction: f64,
    #[serde(default = "d_stable")]
    pub stable_ms: u64,
    #[serde(default)]
    pub min_replicas: usize,
    #[serde(default = "d_max_replicas")]
    pub max_replicas: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tuning {
    pub chunk_size: u64,
    pub replication: ReplicationConfig,
    pub data_cache: CacheReplicaConfig,
    #[serde(default = "d_meta_cache")]
    pub meta_cache: CacheReplicaConfig,
    pub durable: DurableConfig,
    pub read: ReadTuning,
    pub reader: ReaderConfig,
    pub writer: WriterConfig,
    pub scheduler: SchedulerConfig,
    pub tree: TreeConfig,
    /// One-way latency of a cache write to a replica, plus up to
    /// `put_jitter_ms` of random extra delay.
    pub put_latency_ms: u64,
    pub put_jitter_ms: u64,
    pub put_deadline_ms: u64,
    pub sched_tick_ms: u64,
    pub failure_detect_ms: u64,
    pub gc_interval_ms: u64,
    pub consumer_durable_poll_ms: u64,
    /// Cache operations for a closed file give up after this long.
    pub cache_linger_ms: u64,
    /// Rate cap on hops into a rate-limited leaf.
    pub leaf_rate_bps: u64,
    /// Mutation for monitor self-tests: producers put chunk pieces without
    /// the bytes before them.
    pub disable_chunk_prefix_rule: bool,
}

impl Default for Tuning {
    fn default() -> Self {
        Self {
            chunk_size: ChunkGeometry::default().chunk_size,
            replication: ReplicationConfig::default(),
            data_cache: CacheReplicaConfig::data_default(),
            meta_cache: CacheReplicaConfig::metadata_default(),
            durable: DurableConfig::default(),
            read: ReadTuning::default(),
            reader: ReaderConfig::default(),
            writer: WriterConfig::default(),
            scheduler: SchedulerConfig::default(),
            tree: TreeConfig::default(),
            put_latency_ms: 1,
            put_jitter_ms: 2,
            put_deadline_ms: 50,
            sched_tick_ms: 10,
            failure_detect_ms: 30,
            gc_interval_ms: 1000,
            consumer_durable_poll_ms: 1000,
            cache_linger_ms: 30_000,
            leaf_rate_bps: 2_000_000,
            disable_chunk_prefix_rule: false,
        }
    }
}

/// A scenario that failed to load; carries a JSON path and, when known, the
/// line and column of the offending value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l} column {c}: {}: {}", self.path, self.message),
            (Some(l), None) => write!(f, "line {l}: {}: {}", self.path, self.message),
            _ => write!(f, "{}: {}", self.path, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

impl Scenario {
    /// Parse and validate scenario JSON.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ConfigError {
                path,
                line: Some(inner.line()),
                column: Some(inner.column()),
                message: strip_position(&inner.to_string()),
            }
        })?;
        sc.validate().map_err(|(path, message)| {
            let (line, column) =
                locate(text, &path).map_or((None, None), |(l, c)| (Some(l), Some(c)));
            ConfigError {
                path,
                line,
                column,
                message,
            }
        })?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn geometry(&self) -> ChunkGeometry {
        ChunkGeometry::new(self.tuning.chunk_size)
    }

    pub fn stream_index(&self, name: &str) -> Option<usize> {
        self.streams.iter().position(|s| s.name == name)
    }

    /// Semantic checks. Errors carry a JSON path.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let err = |p: String, m: &str| Err((p, m.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return err("schema_version".into(), "unsupported schema version");
        }
        if self.duration_ms == 0 {
            return err("duration_ms".into(), "must be > 0");
        }
        if self.tuning.chunk_size == 0 {
            return err("tuning.chunk_size".into(), "must be > 0");
        }
        let rf = self.tuning.replication.n_replicas;
        if self.tuning.replication.read_quorum == 0 || self.tuning.replication.read_quorum > rf {
            return err(
                "tuning.replication.read_quorum".into(),
                "must be in 1..=n_replicas",
            );
        }
        if self.clusters.is_empty() {
            return err("clusters".into(), "at least one cluster required");
        }
        let mut ids = BTreeSet::new();
        for (i, c) in self.clusters.iter().enumerate() {
            if !ids.insert(c.id) {
                return err(format!("clusters[{i}].id"), "duplicate cluster id");
            }
            if c.data_replicas < rf {
                return err(
                    format!("clusters[{i}].data_replicas"),
                    "fewer replicas than the replication factor",
                );
            }
            if c.meta_replicas < rf {
                return err(
                    format!("clusters[{i}].meta_replicas"),
                    "fewer replicas than the replication factor",
                );
            }
            if c.readers == 0 || c.writers == 0 {
                return err(
                    format!("clusters[{i}]"),
                    "needs at least one reader and one writer",
                );
            }
        }
        let known = |c: u32| ids.contains(&c);
        for (i, l) in self.links.iter().enumerate() {
            if !known(l.a) {
                return err(format!("links[{i}].a"), "unknown cluster");
            }
            if !known(l.b) {
                return err(format!("links[{i}].b"), "unknown cluster");
            }
            if l.a == l.b {
                return err(format!("links[{i}]"), "self link");
            }
            if l.bandwidth_bps == 0 {
                return err(format!("links[{i}].bandwidth_bps"), "must be > 0");
            }
        }
        let mut names = BTreeSet::new();
        for (i, s) in self.streams.iter().enumerate() {
            if !names.insert(s.name.as_str()) || s.name.is_empty() || s.name.contains('/') {
                return err(
                    format!("streams[{i}].name"),
                    "stream names must be unique, non-empty and contain no '/'",
                );
            }
            if !known(s.source) {
                return err(format!("streams[{i}].source"), "unknown cluster");
            }
            for (j, d) in s.destinations.iter().enumerate() {
                if !known(*d) {
                    return err(format!("streams[{i}].destinations[{j}]"), "unknown cluster");
                }
            }
            if s.shards == 0 {
                return err(format!("streams[{i}].shards"), "must be > 0");
            }
            if s.message_bytes == 0 {
                return err(format!("streams[{i}].message_bytes"), "must be > 0");
            }
            if s.buffer_interval_ms == 0 {
                return err(format!("streams[{i}].buffer_interval_ms"), "must be > 0");
            }
            if s.file_bytes == 0 {
                return err(format!("streams[{i}].file_bytes"), "must be > 0");
            }
        }
        for (i, f) in self.consumers.iter().enumerate() {
            if !known(f.cluster) {
                return err(format!("consumers[{i}].cluster"), "unknown cluster");
            }
            let Some(s) = self.streams.iter().find(|s| s.name == f.stream) else {
                return err(format!("consumers[{i}].stream"), "unknown stream");
            };
            if f.cluster != s.source && !s.destinations.contains(&f.cluster) {
                let onboarded = self.faults.iter().any(|x| {
                    matches!(&x.action, FaultAction::AddDestination { stream, cluster } if *stream == f.stream && *cluster == f.cluster)
                });
                if !onboarded {
                    return err(
                        format!("consumers[{i}].cluster"),
                        "cluster does not receive this stream",
                    );
                }
            }
            if f.shards_each == 0 || f.shards_each > s.shards {
                return err(
                    format!("consumers[{i}].shards_each"),
                    "must be in 1..=stream shards",
                );
            }
            if f.poll_ms == 0 {
                return err(format!("consumers[{i}].poll_ms"), "must be > 0");
            }
            if f.ramp
                .as_ref()
                .is_some_and(|r| r.every_ms == 0 || r.step == 0)
            {
                return err(
                    format!("consumers[{i}].ramp"),
                    "every_ms and step must be > 0",
                );
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            let p = format!("faults[{i}].action");
            let c = match &f.action {
                FaultAction::KillCacheReplicas { cluster, .. }
                | FaultAction::KillWorkers { cluster, .. }
                | FaultAction::KillScheduler { cluster, .. }
                | FaultAction::DurableOutage { cluster, .. }
                | FaultAction::Reshard { cluster, .. }
                | FaultAction::SplitBrain { cluster, .. }
                | FaultAction::ClusterOutage { cluster, .. } => vec![*cluster],
                FaultAction::LinkDown { a, b, .. } => vec![*a, *b],
                FaultAction::AddDestination { stream, cluster } => {
                    if !names.contains(stream.as_str()) {
                        return err(format!("{p}.stream"), "unknown stream");
                    }
                    vec![*cluster]
                }
            };
            if c.iter().any(|&c| !known(c)) {
                return err(format!("{p}.cluster"), "unknown cluster");
            }
        }
        for (i, a) in self.autoscalers.iter().enumerate() {
            if !known(a.cluster) {
                return err(format!("autoscalers[{i}].cluster"), "unknown cluster");
            }
            if a.check_ms == 0 {
                return err(format!("autoscalers[{i}].check_ms"), "must be > 0");
            }
        }
        if let Some(w) = self.stable_window {
            if w.from_ms >= w.to_ms {
                return err("stable_window".into(), "from_ms must be < to_ms");
            }
        }
        Ok(())
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

/// Line and column of the value at `path` (like `streams[1].source`) in
/// JSON `text`. Best effort: falls back to the deepest resolvable prefix.
pub fn locate(text: &str, path: &str) -> Option<(usize, usize)> {
    let value: serde_json::Value = serde_json::from_str(text).ok()?;
    let mut segs = Vec::new();
    for part in path.split('.') {
        let (name, rest) = part.split_once('[').map_or((part, ""), |(a, b)| (a, b));
        if !name.is_empty() {
            segs.push(Seg::Key(name.to_string()));
        }
        for idx in rest.split('[') {
            if let Ok(n) = idx.trim_end_matches(']').parse::<usize>() {
                segs.push(Seg::Index(n));
            }
        }
    }
    // Walk the text with a tiny scanner that tracks the current path.
    let bytes = text.as_bytes();
    let mut pos = 0usize;
    let mut best = None;
    let mut cur = &value;
    for seg in &segs {
        pos = skip_ws(bytes, pos);
        match (seg, cur) {
            (Seg::Key(k), serde_json::Value::Object(m)) => {
                let next = m.get(k)?;
                pos = find_key(bytes, pos, k)?;
                cur = next;
            }
            (Seg::Index(n), serde_json::Value::Array(a)) => {
                let next = a.get(*n)?;
                pos = find_index(bytes, pos, *n)?;
                cur = next;
            }
            _ => break,
        }
        best = Some(pos);
    }
    let at = best?;
    let line = text[..at].matches('\n').count() + 1;
    let col = at - text[..at].rfind('\n').map_or(0, |i| i + 1) + 1;
    Some((line, col))
}

enum Seg {
    Key(String),
    Index(usize),
}

fn skip_ws(b: &[u8], mut i: usize) -> usize {
    while i < b.len() && b[i].is_ascii_whitespace() {
        i += 1;
    }
    i
}

fn skip_string(b: &[u8], mut i: usize) -> usize {
    i += 1;
    while i < b.len() {
        match b[i] {
            b'\\' => i += 2,
            b'"' => return i + 1,
            _ => i += 1,
        }
    }
    i
}

/// End of the JSON value starting at `i`.
fn skip_value(b: &[u8], i: usize) -> usize {
    let i = skip_ws(b, i);
    match b.get(i) {
        Some(b'"') => skip_string(b, i),
        Some(b'{') | Some(b'[') => {
            let mut depth = 0i32;
            let mut j = i;
            while j < b.len() {
                match b[j] {
                    b'"' => {
                        j = skip_string(b, j);
                        continue;
                    }
                    b'{' | b'[' => depth += 1,
                    b'}' | b']' => {
                        depth -= 1;
                        if depth == 0 {
                            return j + 1;
                        }
                    }
                    _ => {}
                }
                j += 1;
            }
            j
        }
        _ => {
            let mut j = i;
            while j < b.len() && !matches!(b[j], b',' | b'}' | b']') && !b[j].is_ascii_whitespace()
            {
                j += 1;
            }
            j
        }
    }
}

/// Position of the value of `key` in the object starting at `i`.
fn find_key(b: &[u8], i: usize, key: &str) -> Option<usize> {
    let mut j = skip_ws(b, i);
    if b.get(j) != Some(&b'{') {
        return None;
    }
    j += 1;
    loop {
        j = skip_ws(b, j);
        if b.get(j) != Some(&b'"') {
            return None;
        }
        let end = skip_string(b, j);
        let name = std::str::from_utf8(&b[j + 1..end - 1]).ok()?;
        j = skip_ws(b, end);
        if b.get(j) != Some(&b':') {
            return None;
        }
        j = skip_ws(b, j + 1);
        if name == key {
            return Some(j);
        }
        j = skip_ws(b, skip_value(b, j));
        if b.get(j) == Some(&b',') {
            j += 1;
        } else {
            return None;
        }
    }
}

fn find_index(b: &[u8], i: usize, n: usize) -> Option<usize> {
    let mut j = skip_ws(b, i);
    if b.get(j) != Some(&b'[') {
        return None;
    }
    j += 1;
    for _ in 0..n {
        j = skip_ws(b, skip_value(b, j));
        if b.get(j) != Some(&b',') {
            return None;
        }
        j += 1;
    }
    Some(skip_ws(b, j))
}
