//! Per-hop reader and writer operations.
//!
//! An operation copies one file in one storage layer across one copy-tree
//! hop. The reader runs in the upstream cluster, polls lengths and ships
//! byte deltas; the writer runs downstream and applies them. Both are plain
//! state machines: the harness feeds them messages, poll ticks, timers and
//! put completions, and carries out the [`Action`]s they return.
//!
//! Durable operations are strictly sequential and rely on writer-handle
//! epochs for exclusivity. Cache operations ship deltas in parallel, write
//! chunks through a [`ShadowWriter`] and take a poisonable lease in the
//! downstream metadata cache.

use std::collections::BTreeMap;
use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::durable_log::{DurableError, DurableStore, WriterHandle};
use crate::file_layer::{
    publish_length, read_range_cached, ChunkGeometry, FileMeta, PendingPut, PutId, ShadowWriter,
    StorageView,
};
use crate::kv_cache::{
    CacheKey, KvCache, LockCheck, LockOutcome, LockSignature, ReadMode, RecordKind, Version,
    VersionClock,
};
use crate::simnet::{ClusterId, SimRng, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    Durable,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpId {
    pub path: String,
    pub storage: Storage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Hop {
    pub up: ClusterId,
    pub down: ClusterId,
}

/// What the scheduler schedules: one file, one layer, one hop.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpKey {
    pub op: OpId,
    pub hop: Hop,
}

impl fmt::Display for OpKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.op.storage {
            Storage::Durable => "durable",
            Storage::Cache => "cache",
        };
        write!(
            f,
            "{}#{} {}>{}",
            self.op.path, s, self.hop.up, self.hop.down
        )
    }
}

/// One scheduled incarnation of an operation.
pub type InstanceId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpState {
    Starting,
    Running,
    Orphaned,
    Terminating,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Done,
    /// A newer writer handle or a newer instance took over.
    Superseded,
    Poisoned,
    LockLost,
    StreamBroken,
    WriteFailed,
    Gap,
    Shed,
    PeerStopped,
}

impl EndReason {
    /// Whether the scheduler should schedule a replacement.
    pub fn needs_reschedule(self) -> bool {
        !matches!(self, EndReason::Done)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamMsg {
    Open {
        instance: InstanceId,
        key: OpKey,
    },
    Ready {
        instance: InstanceId,
        start: u64,
    },
    Data {
        instance: InstanceId,
        offset: u64,
        bytes: Bytes,
    },
    Heartbeat {
        instance: InstanceId,
    },
    Ack {
        instance: InstanceId,
        pos: u64,
    },
    Stop {
        instance: InstanceId,
        reason: EndReason,
    },
}

impl StreamMsg {
    pub fn instance(&self) -> InstanceId {
        match self {
            StreamMsg::Open { instance, .. }
            | StreamMsg::Ready { instance, .. }
            | StreamMsg::Data { instance, .. }
            | StreamMsg::Heartbeat { instance }
            | StreamMsg::Ack { instance, .. }
            | StreamMsg::Stop { instance, .. } => *instance,
        }
    }

    /// Bytes on the wire.
    pub fn wire_bytes(&self) -> u64 {
        match self {
            StreamMsg::Data { bytes, .. } => 32 + bytes.len() as u64,
            _ => 32,
        }
    }
}

/// Machine-parseable lifecycle record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lifecycle {
    pub at: SimTime,
    pub instance: InstanceId,
    pub op: String,
    pub event: String,
    pub detail: String,
}

impl fmt::Display for Lifecycle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={} inst={} op=\"{}\" event={} detail=\"{}\"",
            self.at, self.instance, self.op, self.event, self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriterTimer {
    LockRetry,
    LockCheck,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Send to the peer after `delay_ms` of local work.
    Send {
        msg: StreamMsg,
        delay_ms: u64,
    },
    /// Write a chunk to the local data cache and report back through
    /// [`WriterOp::on_put_done`].
    Put {
        seq: u64,
        id: PutId,
        key: CacheKey,
        bytes: Bytes,
        version: Version,
    },
    Timer {
        after_ms: u64,
        timer: WriterTimer,
    },
    /// A file first appeared in this cluster, in either layer.
    FileAppeared {
        path: String,
    },
    Ended(EndReason),
    Log(Lifecycle),
}

fn log(
    at: SimTime,
    instance: InstanceId,
    key: &OpKey,
    event: &str,
    detail: impl Into<String>,
) -> Action {
    Action::Log(Lifecycle {
        at,
        instance,
        op: key.to_string(),
        event: event.to_string(),
        detail: detail.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReaderConfig {
    pub poll_ms: u64,
    /// Stream declared broken after this much silence from the peer.
    pub silence_ms: u64,
    pub max_delta_bytes: u64,
    /// Unacked cache deltas allowed at once.
    pub max_inflight: usize,
    /// Byte rate cap for hops into a rate-limited leaf; 0 disables.
    pub rate_limit_bps: u64,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            poll_ms: 50,
            silence_ms: 150,
            max_delta_bytes: 1 << 20,
            max_inflight: 8,
            rate_limit_bps: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReaderOp {
    pub key: OpKey,
    pub instance: InstanceId,
    pub state: OpState,
    cfg: ReaderConfig,
    next: u64,
    acked: u64,
    ready: bool,
    busy_until: SimTime,
    last_heard: SimTime,
    outstanding: BTreeMap<u64, SimTime>,
    tokens: u64,
    last_refill: SimTime,
}

impl ReaderOp {
    /// Start the op; the first action opens the stream.
    pub fn start(
        key: OpKey,
        instance: InstanceId,
        cfg: ReaderConfig,
        now: SimTime,
    ) -> (Self, Vec<Action>) {
        let acts = vec![
            log(now, instance, &key, "schedule", "reader"),
            Action::Send {
                msg: StreamMsg::Open {
                    instance,
                    key: key.clone(),
                },
                delay_ms: 0,
            },
        ];
        let op = Self {
            key,
            instance,
            state: OpState::Starting,
            cfg,
            next: 0,
            acked: 0,
            ready: false,
            busy_until: now,
            last_heard: now,
            outstanding: BTreeMap::new(),
            tokens: 0,
            last_refill: now,
        };
        (op, acts)
    }

    pub fn set_rate_limit(&mut self, bps: u64) {
        self.cfg.rate_limit_bps = bps;
    }

    pub fn sent(&self) -> u64 {
        self.next
    }

    pub fn acked(&self) -> u64 {
        self.acked
    }

    pub fn is_live(&self) -> bool {
        !matches!(self.state, OpState::Terminated)
    }

    pub fn mark_orphaned(&mut self) {
        if self.state == OpState::Running {
            self.state = OpState::Orphaned;
        }
    }

    pub fn mark_adopted(&mut self) {
        if self.state == OpState::Orphaned {
            self.state = OpState::Running;
        }
    }

    fn end(&mut self, reason: EndReason, notify_peer: bool, now: SimTime) -> Vec<Action> {
        if self.state == OpState::Terminated {
            return Vec::new();
        }
        self.state = OpState::Terminated;
        let mut acts = vec![log(
            now,
            self.instance,
            &self.key,
            "terminate",
            format!("{reason:?}"),
        )];
        if notify_peer {
            acts.push(Action::Send {
                msg: StreamMsg::Stop {
                    instance: self.instance,
                    reason,
                },
                delay_ms: 0,
            });
        }
        acts.push(Action::Ended(reason));
        acts
    }

    /// Stop on request of the scheduler (shedding or supersession).
    pub fn stop(&mut self, reason: EndReason, now: SimTime) -> Vec<Action> {
        self.end(reason, true, now)
    }

    pub fn on_msg(&mut self, msg: StreamMsg, now: SimTime) -> Vec<Action> {
        if self.state == OpState::Terminated {
            return Vec::new();
        }
        self.last_heard = now;
        match msg {
            StreamMsg::Ready { start, .. } => {
                self.ready = true;
                self.next = start;
                self.acked = start;
                if self.state == OpState::Starting {
                    self.state = OpState::Running;
                }
                vec![log(
                    now,
                    self.instance,
                    &self.key,
                    "ready",
                    format!("start={start}"),
                )]
            }
            StreamMsg::Ack { pos, .. } => {
                self.acked = self.acked.max(pos);
                self.outstanding = self.outstanding.split_off(&(pos + 1));
                Vec::new()
            }
            StreamMsg::Stop { reason, .. } => {
                let r = if reason == EndReason::Done {
                    EndReason::Done
                } else {
                    reason
                };
                self.end(r, false, now)
            }
            _ => Vec::new(),
        }
    }

    /// One poll cycle. `meta` holds the upstream lengths; `final_len` is set
    /// once the file is closed at the source.
    pub fn on_poll(
        &mut self,
        view: &mut StorageView<'_>,
        meta: FileMeta,
        final_len: Option<u64>,
    ) -> Vec<Action> {
        let now = view.now;
        if self.state == OpState::Terminated {
            return Vec::new();
        }
        if now.saturating_sub(self.last_heard) > self.cfg.silence_ms {
            return self.end(EndReason::StreamBroken, true, now);
        }
        if !self.ready {
            return vec![Action::Send {
                msg: StreamMsg::Heartbeat {
                    instance: self.instance,
                },
                delay_ms: 0,
            }];
        }
        if let Some(f) = final_len {
            if self.acked >= f {
                return self.end(EndReason::Done, true, now);
            }
        }
        let avail = match self.key.op.storage {
            Storage::Durable => meta.durable_len,
            Storage::Cache => meta.cache_len,
        }
        .unwrap_or(0);
        let avail = final_len.map_or(avail, |f| avail.min(f));

        let mut budget = self.cfg.max_delta_bytes;
        if self.cfg.rate_limit_bps > 0 {
            let cap = (self.cfg.rate_limit_bps * self.cfg.poll_ms / 1000).max(1);
            self.tokens =
                (self.tokens + self.cfg.rate_limit_bps * (now - self.last_refill) / 1000).min(cap);
            self.last_refill = now;
            budget = budget.min(self.tokens);
        }

        let can_send = match self.key.op.storage {
            Storage::Durable => now >= self.busy_until,
            Storage::Cache => self.outstanding.len() < self.cfg.max_inflight,
        };
        if can_send && self.next < avail && budget > 0 {
            let len = (avail - self.next).min(budget);
            let cache_len = meta.cache_len.unwrap_or(0);
            let r = read_range_cached(view, &self.key.op.path, self.next, len, cache_len);
            if !r.bytes.is_empty() {
                let n = r.bytes.len() as u64;
                let offset = self.next;
                self.next += n;
                self.tokens = self.tokens.saturating_sub(n);
                self.busy_until = now + r.latency_ms;
                self.outstanding.insert(self.next, now);
                return vec![Action::Send {
                    msg: StreamMsg::Data {
                        instance: self.instance,
                        offset,
                        bytes: Bytes::from(r.bytes),
                    },
                    delay_ms: r.latency_ms,
                }];
            }
        }
        vec![Action::Send {
            msg: StreamMsg::Heartbeat {
                instance: self.instance,
            },
            delay_ms: 0,
        }]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WriterConfig {
    pub lock_check_ms: u64,
    pub seize_delay_ms: u64,
    pub silence_ms: u64,
    pub put_retries: u32,
    /// A cache stream this far behind the durable file restarts at the
    /// durable position instead of catching up.
    pub resync_lag_bytes: u64,
    /// When false, a contender proceeds without poisoning the current lock
    /// holder, forcing dual writers.
    pub poisoning: bool,
    pub open_cost_ms: u64,
    pub append_latency_ms: u64,
}

impl Default for WriterConfig {
    fn default() -> Self {
        Self {
            lock_check_ms: 100,
            seize_delay_ms: 500,
            silence_ms: 150,
            put_retries: 3,
            resync_lag_bytes: 256 << 10,
            poisoning: true,
            open_cost_ms: 100,
            append_latency_ms: 4,
        }
    }
}

/// Downstream storage access for a writer.
pub struct WriterCtx<'a> {
    pub meta: &'a mut KvCache,
    pub durable: &'a mut DurableStore,
    pub rng: &'a mut SimRng,
    pub now: SimTime,
    pub geom: ChunkGeometry,
}

/// Where a cache stream starts, and whether that is a resync jump.
pub fn cache_start_position(
    cache_len: Option<u64>,
    durable_len: u64,
    geom: ChunkGeometry,
    resync_lag_bytes: u64,
) -> (u64, bool) {
    match cache_len {
        Some(c) if c.saturating_add(resync_lag_bytes) >= durable_len => (geom.floor(c), false),
        _ => {
            let s = geom.floor(durable_len);
            (s, s > 0)
        }
    }
}

#[derive(Debug, Clone)]
enum LockState {
    /// Contending: since when, and whether we already poisoned.
    Waiting {
        since: SimTime,
    },
    Held,
    /// Proceeding without the lease (cache unavailable or poisoning off).
    Unlocked,
}

#[derive(Debug, Clone)]
enum WriterKind {
    Durable {
        handle: Option<WriterHandle>,
    },
    Cache {
        sig: LockSignature,
        lock: LockState,
        shadow: Option<ShadowWriter>,
        published: u64,
        failures: BTreeMap<u64, u32>,
        finishing: bool,
    },
}

#[derive(Debug, Clone)]
pub struct WriterOp {
    pub key: OpKey,
    pub instance: InstanceId,
    pub state: OpState,
    cfg: WriterConfig,
    kind: WriterKind,
    clock: VersionClock,
    last_heard: SimTime,
    announced: bool,
}

impl WriterOp {
    /// Handle the stream's `Open`.
    pub fn open(
        key: OpKey,
        instance: InstanceId,
        writer_id: u64,
        cfg: WriterConfig,
        ctx: &mut WriterCtx<'_>,
    ) -> (Self, Vec<Action>) {
        let now = ctx.now;
        let kind = match key.op.storage {
            Storage::Durable => WriterKind::Durable { handle: None },
            Storage::Cache => WriterKind::Cache {
                sig: LockSignature {
                    writer: writer_id,
                    nonce: ctx.rng.next_u64(),
                },
                lock: LockState::Waiting { since: now },
                shadow: None,
                published: 0,
                failures: BTreeMap::new(),
                finishing: false,
            },
        };
        let mut op = Self {
            key,
            instance,
            state: OpState::Starting,
            cfg,
            kind,
            clock: VersionClock::default(),
            last_heard: now,
            announced: false,
        };
        let mut acts = vec![log(now, instance, &op.key, "schedule", "writer")];
        match op.key.op.storage {
            Storage::Durable => {
                let h = ctx.durable.open_writer(&op.key.op.path);
                let start = ctx.durable.length(&op.key.op.path);
                acts.push(log(
                    now,
                    instance,
                    &op.key,
                    "open",
                    format!("epoch={}", h.epoch),
                ));
                op.kind = WriterKind::Durable { handle: Some(h) };
                op.state = OpState::Running;
                acts.push(Action::Send {
                    msg: StreamMsg::Ready { instance, start },
                    delay_ms: cfg.open_cost_ms,
                });
            }
            Storage::Cache => acts.extend(op.contend(ctx, true)),
        }
        (op, acts)
    }

    pub fn is_live(&self) -> bool {
        !matches!(self.state, OpState::Terminated)
    }

    pub fn mark_orphaned(&mut self) {
        if self.state == OpState::Running {
            self.state = OpState::Orphaned;
        }
    }

    pub fn mark_adopted(&mut self) {
        if self.state == OpState::Orphaned {
            self.state = OpState::Running;
        }
    }

    pub fn lock_signature(&self) -> Option<LockSignature> {
        match &self.kind {
            WriterKind::Cache { sig, .. } => Some(*sig),
            WriterKind::Durable { .. } => None,
        }
    }

    /// Base of the cache stream (bytes below it are served by the durable
    /// log only) and the last published cache length.
    pub fn cache_progress(&self) -> Option<(u64, u64)> {
        match &self.kind {
            WriterKind::Cache {
                shadow: Some(s),
                published,
                ..
            } => Some((s.base(), *published)),
            _ => None,
        }
    }

    fn lock_key(&self) -> CacheKey {
        CacheKey::record(&self.key.op.path, RecordKind::Lock)
    }

    fn contend(&mut self, ctx: &mut WriterCtx<'_>, first: bool) -> Vec<Action> {
        let now = ctx.now;
        let key = self.lock_key();
        let poisoning = self.cfg.poisoning;
        let WriterKind::Cache { sig, lock, .. } = &mut self.kind else {
            return Vec::new();
        };
        let sig = *sig;
        let since = match lock {
            LockState::Waiting { since } => *since,
            _ => return Vec::new(),
        };
        let mut acts = Vec::new();
        match ctx.meta.acquire_lock(key, sig, now, ctx.rng) {
            LockOutcome::Acquired => {
                *lock = LockState::Held;
                acts.push(log(now, self.instance, &self.key, "acquire", "lock"));
            }
            LockOutcome::AcquiredWithoutLock => {
                *lock = LockState::Unlocked;
                acts.push(log(
                    now,
                    self.instance,
                    &self.key,
                    "acquire",
                    "without-lock",
                ));
            }
            LockOutcome::HeldByOther(rec) => {
                if !poisoning {
                    *lock = LockState::Unlocked;
                    acts.push(log(now, self.instance, &self.key, "acquire", "dual-writer"));
                } else if now >= since + self.cfg.seize_delay_ms {
                    match ctx.meta.seize_lock(key, sig, now, ctx.rng) {
                        LockOutcome::Acquired => *lock = LockState::Held,
                        _ => *lock = LockState::Unlocked,
                    }
                    acts.push(log(now, self.instance, &self.key, "seize", "lock"));
                } else {
                    if first || !rec.poisoned {
                        ctx.meta.poison_lock(key, now, ctx.rng);
                        acts.push(log(now, self.instance, &self.key, "poison", "lock"));
                    }
                    acts.push(Action::Timer {
                        after_ms: self.cfg.lock_check_ms,
                        timer: WriterTimer::LockRetry,
                    });
                    return acts;
                }
            }
        }
        acts.extend(self.become_ready(ctx));
        acts
    }

    fn become_ready(&mut self, ctx: &mut WriterCtx<'_>) -> Vec<Action> {
        let now = ctx.now;
        let path = self.key.op.path.clone();
        let c = match ctx.meta.get_consistent(
            &CacheKey::record(&path, RecordKind::CacheLen),
            now,
            ctx.rng,
        ) {
            Ok(v) => v.and_then(|v| crate::file_layer::decode_length(&v.bytes)),
            Err(_) => None,
        };
        let d = ctx.durable.length(&path);
        let (start, resync) = cache_start_position(c, d, ctx.geom, self.cfg.resync_lag_bytes);
        let mut acts = Vec::new();
        if resync {
            let v = self.clock.next(now);
            let _ = publish_length(ctx.meta, &path, RecordKind::CacheLen, start, v, now);
            acts.push(log(
                now,
                self.instance,
                &self.key,
                "resync",
                format!("start={start} durable={d}"),
            ));
        }
        if let WriterKind::Cache {
            shadow, published, ..
        } = &mut self.kind
        {
            *shadow = Some(ShadowWriter::new(ctx.geom, start));
            *published = start;
        }
        self.state = OpState::Running;
        acts.push(Action::Send {
            msg: StreamMsg::Ready {
                instance: self.instance,
                start,
            },
            delay_ms: 0,
        });
        acts.push(Action::Timer {
            after_ms: self.cfg.lock_check_ms,
            timer: WriterTimer::LockCheck,
        });
        acts
    }

    fn end(
        &mut self,
        reason: EndReason,
        notify_peer: bool,
        ctx: &mut WriterCtx<'_>,
    ) -> Vec<Action> {
        if self.state == OpState::Terminated {
            return Vec::new();
        }
        self.state = OpState::Terminated;
        let now = ctx.now;
        if let WriterKind::Cache {
            sig,
            lock: LockState::Held,
            ..
        } = &self.kind
        {
            if reason != EndReason::LockLost {
                ctx.meta.release_lock(self.lock_key(), *sig, now, ctx.rng);
            }
        }
        let mut acts = vec![log(
            now,
            self.instance,
            &self.key,
            "terminate",
            format!("{reason:?}"),
        )];
        if notify_peer {
            acts.push(Action::Send {
                msg: StreamMsg::Stop {
                    instance: self.instance,
                    reason,
                },
                delay_ms: 0,
            });
        }
        acts.push(Action::Ended(reason));
        acts
    }

    /// Stop on request of the scheduler.
    pub fn stop(&mut self, reason: EndReason, ctx: &mut WriterCtx<'_>) -> Vec<Action> {
        self.end(reason, true, ctx)
    }

    pub fn on_msg(&mut self, msg: StreamMsg, ctx: &mut WriterCtx<'_>) -> Vec<Action> {
        if self.state == OpState::Terminated {
            return Vec::new();
        }
        self.last_heard = ctx.now;
        match msg {
            StreamMsg::Data { offset, bytes, .. } => match self.key.op.storage {
                Storage::Durable => self.durable_data(offset, &bytes, ctx),
                Storage::Cache => self.cache_data(offset, &bytes, ctx),
            },
            StreamMsg::Heartbeat { .. } => {
                let pos = self.position(ctx);
                let mut acts = vec![Action::Send {
                    msg: StreamMsg::Ack {
                        instance: self.instance,
                        pos,
                    },
                    delay_ms: 0,
                }];
                if let Storage::Durable = self.key.op.storage {
                    acts.extend(self.check_handle(ctx));
                }
                acts
            }
            StreamMsg::Stop { reason, .. } => {
                if reason == EndReason::Done {
                    self.finish(ctx)
                } else {
                    self.end(EndReason::PeerStopped, false, ctx)
                }
            }
            _ => Vec::new(),
        }
    }

    fn position(&self, ctx: &WriterCtx<'_>) -> u64 {
        match &self.kind {
            WriterKind::Durable { .. } => ctx.durable.length(&self.key.op.path),
            WriterKind::Cache { shadow, .. } => shadow.as_ref().map_or(0, |s| s.publishable()),
        }
    }

    fn check_handle(&mut self, ctx: &mut WriterCtx<'_>) -> Vec<Action> {
        if let WriterKind::Durable { handle: Some(h) } = &self.kind {
            if ctx.durable.is_stale(h) {
                return self.end(EndReason::Superseded, true, ctx);
            }
        }
        Vec::new()
    }

    fn durable_data(&mut self, offset: u64, bytes: &[u8], ctx: &mut WriterCtx<'_>) -> Vec<Action> {
        let WriterKind::Durable { handle: Some(h) } = &self.kind else {
            return Vec::new();
        };
        let h = h.clone();
        if ctx.durable.is_stale(&h) {
            return self.end(EndReason::Superseded, true, ctx);
        }
        let path = self.key.op.path.clone();
        let len = ctx.durable.length(&path);
        let end = offset + bytes.len() as u64;
        if offset > len {
            return self.end(EndReason::Gap, true, ctx);
        }
        let mut acts = Vec::new();
        if end > len {
            match ctx
                .durable
                .append_at(&h, len, &bytes[(len - offset) as usize..])
            {
                Ok(new_len) => {
                    let v = self.clock.next(ctx.now);
                    let _ = publish_length(
                        ctx.meta,
                        &path,
                        RecordKind::DurableLen,
                        new_len,
                        v,
                        ctx.now,
                    );
                    if !self.announced {
                        self.announced = true;
                        acts.push(Action::FileAppeared { path: path.clone() });
                    }
                }
                Err(DurableError::StaleHandle { .. }) => {
                    return self.end(EndReason::Superseded, true, ctx)
                }
                Err(_) => return self.end(EndReason::WriteFailed, true, ctx),
            }
        }
        acts.push(Action::Send {
            msg: StreamMsg::Ack {
                instance: self.instance,
                pos: ctx.durable.length(&path),
            },
            delay_ms: self.cfg.append_latency_ms,
        });
        acts
    }

    fn cache_data(&mut self, offset: u64, bytes: &[u8], ctx: &mut WriterCtx<'_>) -> Vec<Action> {
        let path = self.key.op.path.clone();
        let WriterKind::Cache {
            shadow: Some(s), ..
        } = &mut self.kind
        else {
            return Vec::new();
        };
        let puts = s.receive(offset, bytes);
        puts.into_iter()
            .map(|p| self.put_action(&path, p, ctx.now))
            .collect()
    }

    fn put_action(&mut self, path: &str, p: PendingPut, now: SimTime) -> Action {
        Action::Put {
            seq: p.seq,
            id: p.id,
            key: CacheKey::chunk(path, p.seq),
            bytes: p.bytes,
            version: self.clock.next(now),
        }
    }

    /// A chunk put finished with `acks` replicas acknowledging.
    pub fn on_put_done(
        &mut self,
        seq: u64,
        id: PutId,
        acks: usize,
        ctx: &mut WriterCtx<'_>,
    ) -> Vec<Action> {
        if self.state == OpState::Terminated {
            return Vec::new();
        }
        let path = self.key.op.path.clone();
        let retries = self.cfg.put_retries;
        let WriterKind::Cache {
            shadow: Some(s),
            published,
            failures,
            finishing,
            ..
        } = &mut self.kind
        else {
            return Vec::new();
        };
        let ok = acks > 0;
        if !ok {
            let f = failures.entry(seq).or_default();
            *f += 1;
            if *f > retries {
                return self.end(EndReason::WriteFailed, true, ctx);
            }
        } else {
            failures.remove(&seq);
        }
        let follow = s.on_put_done(seq, id, ok);
        let p = s.publishable();
        let mut publish = None;
        if p > *published {
            *published = p;
            publish = Some(p);
        }
        let idle = s.is_idle();
        let finishing = *finishing;
        let mut acts = Vec::new();
        if let Some(p) = publish {
            let v = self.clock.next(ctx.now);
            let _ = publish_length(ctx.meta, &path, RecordKind::CacheLen, p, v, ctx.now);
            if !self.announced {
                self.announced = true;
                acts.push(Action::FileAppeared { path: path.clone() });
            }
            acts.push(Action::Send {
                msg: StreamMsg::Ack {
                    instance: self.instance,
                    pos: p,
                },
                delay_ms: 0,
            });
        }
        if let Some(n) = follow {
            acts.push(self.put_action(&path, n, ctx.now));
        } else if finishing && idle {
            acts.extend(self.end(EndReason::Done, false, ctx));
        }
        acts
    }

    fn finish(&mut self, ctx: &mut WriterCtx<'_>) -> Vec<Action> {
        match &mut self.kind {
            WriterKind::Durable { .. } => self.end(EndReason::Done, false, ctx),
            WriterKind::Cache {
                shadow, finishing, ..
            } => {
                if shadow.as_ref().is_none_or(|s| s.is_idle()) {
                    self.end(EndReason::Done, false, ctx)
                } else {
                    *finishing = true;
                    Vec::new()
                }
            }
        }
    }

    pub fn on_timer(&mut self, timer: WriterTimer, ctx: &mut WriterCtx<'_>) -> Vec<Action> {
        if self.state == OpState::Terminated {
            return Vec::new();
        }
        let now = ctx.now;
        if now.saturating_sub(self.last_heard) > self.cfg.silence_ms {
            return self.end(EndReason::StreamBroken, true, ctx);
        }
        match timer {
            WriterTimer::LockRetry => self.contend(ctx, false),
            WriterTimer::LockCheck => {
                let key = self.lock_key();
                let mut acts = Vec::new();
                if let WriterKind::Cache { sig, lock, .. } = &mut self.kind {
                    let sig = *sig;
                    match lock {
                        LockState::Held => match ctx.meta.check_lock(key, sig, now, ctx.rng) {
                            LockCheck::Poisoned => return self.end(EndReason::Poisoned, true, ctx),
                            LockCheck::Lost => return self.end(EndReason::LockLost, true, ctx),
                            LockCheck::Held | LockCheck::Unavailable => {}
                        },
                        LockState::Unlocked if self.cfg.poisoning => {
                            // Try to regularize once the cache is back.
                            match ctx.meta.acquire_lock(key, sig, now, ctx.rng) {
                                LockOutcome::Acquired => *lock = LockState::Held,
                                LockOutcome::HeldByOther(_) => {
                                    return self.end(EndReason::LockLost, true, ctx)
                                }
                                LockOutcome::AcquiredWithoutLock => {}
                            }
                        }
                        _ => {}
                    }
                }
                acts.push(Action::Timer {
                    after_ms: self.cfg.lock_check_ms,
                    timer: WriterTimer::LockCheck,
                });
                acts
            }
        }
    }
}

/// Lengths of `paths` in one cluster via a consistent metadata read, for
/// callers that are not a [`crate::file_layer::LengthPoller`].
pub fn peek_lengths(
    meta: &mut KvCache,
    paths: &[&str],
    now: SimTime,
    rng: &mut SimRng,
) -> Vec<FileMeta> {
    let mut keys = Vec::with_capacity(paths.len() * 2);
    for p in paths {
        keys.push(CacheKey::record(p, RecordKind::CacheLen));
        keys.push(CacheKey::record(p, RecordKind::DurableLen));
    }
    let res = meta.bulk_get(&keys, ReadMode::Consistent, now, rng);
    let dec = |i: usize| {
        res[i]
            .as_ref()
            .ok()
            .and_then(|v| v.as_ref())
            .and_then(|v| crate::file_layer::decode_length(&v.bytes))
    };
    (0..paths.len())
        .map(|i| FileMeta {
            cache_len: dec(2 * i),
            durable_len: dec(2 * i + 1),
        })
        .collect()
}

#[cfg(test)]
mod tests;
