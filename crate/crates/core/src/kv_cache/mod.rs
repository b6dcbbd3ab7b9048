//! Replicated in-memory key-value cache.
//!
//! One `KvCache` models one cache instance in one cluster (the data cache or
//! the metadata cache). Each key lives on `n_replicas` replicas chosen by a
//! consistent-hash ring. Reads come in two flavors: *relaxed* reads hit a
//! single random replica and may be stale or short, *consistent* reads wait
//! for `read_quorum` replicas and return the highest version among them.
//!
//! Replicas are volatile: killing one drops its contents. Entries expire by
//! TTL and, under capacity pressure, are evicted least-recently-modified
//! first. Every replica enforces a request/byte budget per throttle window;
//! requests beyond it are rejected.
//!
//! All methods here are synchronous and apply at a single instant. The
//! harness builds asynchronous fan-out (per-replica arrival times, acks) on
//! top of [`KvCache::apply`].

mod key;
mod lock;
mod ring;

use std::collections::{BTreeMap, BTreeSet};

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use key::{CacheKey, RecordKind};
pub use lock::{LockCheck, LockOutcome, LockRecord, LockSignature};
pub use ring::Ring;

use crate::simnet::{SimRng, SimTime};

pub type Version = u64;

/// Index of a replica within one cache instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplicaId(pub u32);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionedValue {
    pub bytes: Bytes,
    pub version: Version,
    pub written_at: SimTime,
}

/// Client-side version source: strictly increasing, and ordered across
/// writers by the shared simulated clock.
#[derive(Debug, Clone, Copy, Default)]
pub struct VersionClock {
    last: Version,
}

impl VersionClock {
    pub fn next(&mut self, now: SimTime) -> Version {
        self.last = (self.last + 1).max(now << 16);
        self.last
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheKind {
    Data,
    Metadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicationConfig {
    pub n_replicas: usize,
    pub write_quorum: usize,
    pub read_quorum: usize,
}

impl Default for ReplicationConfig {
    fn default() -> Self {
        Self {
            n_replicas: 3,
            write_quorum: 3,
            read_quorum: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheReplicaConfig {
    pub capacity_bytes: u64,
    pub gc_start_fraction: f64,
    pub ttl_ms: u64,
    /// 0 disables the request throttle.
    pub max_qps: u64,
    /// 0 disables the byte throttle.
    pub max_bps: u64,
    pub throttle_window_ms: u64,
    /// Period during which a migrating key is unavailable after a reshard.
    pub migration_ms: u64,
    pub vnodes: u32,
}

impl CacheReplicaConfig {
    pub fn data_default() -> Self {
        Self {
            capacity_bytes: 256 << 20,
            gc_start_fraction: 0.80,
            ttl_ms: 60_000,
            max_qps: 0,
            max_bps: 0,
            throttle_window_ms: 100,
            migration_ms: 2_000,
            vnodes: 32,
        }
    }

    pub fn metadata_default() -> Self {
        Self {
            ttl_ms: 86_400_000,
            migration_ms: 500,
            ..Self::data_default()
        }
    }
}

impl Default for CacheReplicaConfig {
    fn default() -> Self {
        Self::data_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("fewer than read-quorum replicas answered")]
    Unavailable,
    #[error("no replica accepted the write")]
    WriteFailed,
    #[error("value of {0} bytes exceeds the {1}-byte limit")]
    ValueTooLarge(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ReplicaError {
    #[error("replica down")]
    Down,
    #[error("replica throttled")]
    Throttled,
    #[error("key migrating")]
    Migrating,
}

/// Outcome of applying one write on one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyOutcome {
    Applied,
    /// Replica already holds an equal or newer version; counts as an ack.
    Stale,
    Rejected(ReplicaError),
}

impl ApplyOutcome {
    pub fn is_ack(self) -> bool {
        matches!(self, ApplyOutcome::Applied | ApplyOutcome::Stale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadMode {
    Relaxed,
    Consistent,
}

#[derive(Debug, Clone)]
pub struct RelaxedRead {
    pub replica: ReplicaId,
    pub result: Result<Option<VersionedValue>, ReplicaError>,
}

/// Requests and bytes seen by a replica over some interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Load {
    pub requests: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub relaxed_reads: u64,
    pub consistent_reads: u64,
    pub unavailable: u64,
    pub writes_applied: u64,
    pub writes_rejected: u64,
    pub evicted_ttl: u64,
    pub evicted_capacity: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Occupancy {
    pub replica: ReplicaId,
    pub alive: bool,
    pub member: bool,
    pub used_bytes: u64,
    pub entries: usize,
}

#[derive(Debug, Clone, Default)]
struct Throttle {
    window_start: SimTime,
    requests: u64,
    bytes: u64,
}

impl Throttle {
    fn roll(&mut self, now: SimTime, window: u64) {
        let window = window.max(1);
        let start = now - now % window;
        if start != self.window_start {
            self.window_start = start;
            self.requests = 0;
            self.bytes = 0;
        }
    }

    fn admit(&mut self, now: SimTime, cfg: &CacheReplicaConfig) -> bool {
        self.roll(now, cfg.throttle_window_ms);
        let w = cfg.throttle_window_ms.max(1);
        let req_budget = cfg.max_qps * w / 1000;
        let byte_budget = cfg.max_bps * w / 1000;
        if (cfg.max_qps > 0 && self.requests >= req_budget.max(1))
            || (cfg.max_bps > 0 && self.bytes >= byte_budget.max(1))
        {
            return false;
        }
        self.requests += 1;
        true
    }

    fn add_bytes(&mut self, now: SimTime, bytes: u64, window: u64) {
        self.roll(now, window);
        self.bytes += bytes;
    }
}

#[derive(Debug, Clone)]
struct Replica {
    alive: bool,
    store: BTreeMap<CacheKey, VersionedValue>,
    by_age: BTreeSet<(SimTime, CacheKey)>,
    used_bytes: u64,
    throttle: Throttle,
    load: Load,
}

impl Replica {
    fn new() -> Self {
        Self {
            alive: true,
            store: BTreeMap::new(),
            by_age: BTreeSet::new(),
            used_bytes: 0,
            throttle: Throttle::default(),
            load: Load::default(),
        }
    }

    fn clear(&mut self) {
        self.store.clear();
        self.by_age.clear();
        self.used_bytes = 0;
    }

    fn insert(&mut self, key: CacheKey, value: VersionedValue) {
        if let Some(old) = self.store.remove(&key) {
            self.by_age.remove(&(old.written_at, key));
            self.used_bytes -= old.bytes.len() as u64;
        }
        self.used_bytes += value.bytes.len() as u64;
        self.by_age.insert((value.written_at, key));
        self.store.insert(key, value);
    }

    fn remove(&mut self, key: &CacheKey) -> bool {
        if let Some(old) = self.store.remove(key) {
            self.by_age.remove(&(old.written_at, *key));
            self.used_bytes -= old.bytes.len() as u64;
            true
        } else {
            false
        }
    }

    /// Drop the least-recently-modified entry.
    fn evict_oldest(&mut self) -> bool {
        match self.by_age.iter().next().copied() {
            Some((_, k)) => self.remove(&k),
            None => false,
        }
    }
}

/// One replicated cache instance.
#[derive(Debug, Clone)]
pub struct KvCache {
    kind: CacheKind,
    repl: ReplicationConfig,
    cfg: CacheReplicaConfig,
    max_value_bytes: Option<usize>,
    replicas: Vec<Replica>,
    ring: Ring,
    migrating_until: BTreeMap<CacheKey, SimTime>,
    stats: CacheStats,
}

impl KvCache {
    /// A cache with `members` ring members (all alive) and no spares.
    pub fn new(
        kind: CacheKind,
        members: usize,
        repl: ReplicationConfig,
        cfg: CacheReplicaConfig,
    ) -> Self {
        assert!(
            repl.read_quorum >= 1 && repl.read_quorum <= repl.n_replicas,
            "read quorum must be in 1..=n_replicas"
        );
        assert!(
            cfg.gc_start_fraction > 0.0 && cfg.gc_start_fraction <= 1.0,
            "gc_start_fraction must be in (0, 1]"
        );
        let replicas = (0..members).map(|_| Replica::new()).collect();
        let ring = Ring::new((0..members as u32).map(ReplicaId), cfg.vnodes);
        Self {
            kind,
            repl,
            cfg,
            max_value_bytes: None,
            replicas,
            ring,
            migrating_until: BTreeMap::new(),
            stats: CacheStats::default(),
        }
    }

    /// Reject values larger than `limit` (the chunk size, for data caches).
    pub fn with_value_limit(mut self, limit: usize) -> Self {
        self.max_value_bytes = Some(limit);
        self
    }

    pub fn kind(&self) -> CacheKind {
        self.kind
    }

    pub fn config(&self) -> &CacheReplicaConfig {
        &self.cfg
    }

    pub fn replication(&self) -> &ReplicationConfig {
        &self.repl
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn members(&self) -> Vec<ReplicaId> {
        self.ring.members().iter().copied().collect()
    }

    pub fn replica_count(&self) -> usize {
        self.replicas.len()
    }

    pub fn is_alive(&self, r: ReplicaId) -> bool {
        self.replicas.get(r.0 as usize).is_some_and(|x| x.alive)
    }

    /// The key-shard holding `key`.
    pub fn replica_set(&self, key: &CacheKey) -> Vec<ReplicaId> {
        self.ring.owners(key.ring_position(), self.repl.n_replicas)
    }

    pub fn is_migrating(&self, key: &CacheKey, now: SimTime) -> bool {
        self.migrating_until.get(key).is_some_and(|&t| now < t)
    }

    fn expired(&self, v: &VersionedValue, now: SimTime) -> bool {
        now >= v.written_at.saturating_add(self.cfg.ttl_ms)
    }

    // ---- writes ----

    /// Apply one write on one replica, as it arrives there.
    pub fn apply(
        &mut self,
        r: ReplicaId,
        key: CacheKey,
        bytes: Bytes,
        version: Version,
        now: SimTime,
    ) -> ApplyOutcome {
        let cfg = self.cfg;
        let Some(rep) = self.replicas.get_mut(r.0 as usize) else {
            return ApplyOutcome::Rejected(ReplicaError::Down);
        };
        if !rep.alive {
            return ApplyOutcome::Rejected(ReplicaError::Down);
        }
        rep.load.requests += 1;
        rep.load.bytes += bytes.len() as u64;
        if !rep.throttle.admit(now, &cfg) {
            self.stats.writes_rejected += 1;
            return ApplyOutcome::Rejected(ReplicaError::Throttled);
        }
        rep.throttle
            .add_bytes(now, bytes.len() as u64, cfg.throttle_window_ms);
        if let Some(cur) = rep.store.get(&key) {
            if cur.version >= version {
                return ApplyOutcome::Stale;
            }
        }
        self.stats.writes_applied += 1;
        self.stats.bytes_written += bytes.len() as u64;
        rep.insert(
            key,
            VersionedValue {
                bytes,
                version,
                written_at: now,
            },
        );
        while rep.used_bytes > cfg.capacity_bytes && rep.evict_oldest() {
            self.stats.evicted_capacity += 1;
        }
        ApplyOutcome::Applied
    }

    /// Write to every replica of the key's shard at once. Returns the number
    /// of acks; zero acks is a write failure.
    pub fn put(
        &mut self,
        key: CacheKey,
        bytes: Bytes,
        version: Version,
        now: SimTime,
    ) -> Result<usize, CacheError> {
        self.check_value(&bytes)?;
        let acked = self
            .replica_set(&key)
            .into_iter()
            .filter(|&r| self.apply(r, key, bytes.clone(), version, now).is_ack())
            .count();
        if acked == 0 {
            Err(CacheError::WriteFailed)
        } else {
            Ok(acked)
        }
    }

    pub fn check_value(&self, bytes: &Bytes) -> Result<(), CacheError> {
        match self.max_value_bytes {
            Some(limit) if bytes.len() > limit => {
                Err(CacheError::ValueTooLarge(bytes.len(), limit))
            }
            _ => Ok(()),
        }
    }

    // ---- reads ----

    /// Read `key` from one specific replica.
    pub fn read_replica(
        &mut self,
        r: ReplicaId,
        key: &CacheKey,
        now: SimTime,
    ) -> Result<Option<VersionedValue>, ReplicaError> {
        self.admit_read(r, now)?;
        self.read_admitted(r, key, now)
    }

    fn admit_read(&mut self, r: ReplicaId, now: SimTime) -> Result<(), ReplicaError> {
        let cfg = self.cfg;
        let rep = self
            .replicas
            .get_mut(r.0 as usize)
            .ok_or(ReplicaError::Down)?;
        if !rep.alive {
            return Err(ReplicaError::Down);
        }
        rep.load.requests += 1;
        if !rep.throttle.admit(now, &cfg) {
            return Err(ReplicaError::Throttled);
        }
        Ok(())
    }

    fn read_admitted(
        &mut self,
        r: ReplicaId,
        key: &CacheKey,
        now: SimTime,
    ) -> Result<Option<VersionedValue>, ReplicaError> {
        if self.is_migrating(key, now) {
            return Err(ReplicaError::Migrating);
        }
        let window = self.cfg.throttle_window_ms;
        let value = match self.replicas[r.0 as usize].store.get(key) {
            Some(v) if !self.expired(v, now) => Some(v.clone()),
            _ => None,
        };
        let n = value.as_ref().map_or(0, |v| v.bytes.len() as u64);
        let rep = &mut self.replicas[r.0 as usize];
        rep.load.bytes += n;
        rep.throttle.add_bytes(now, n, window);
        self.stats.bytes_read += n;
        Ok(value)
    }

    /// Single random replica of the key's shard; may be stale.
    pub fn get_relaxed(&mut self, key: &CacheKey, now: SimTime, rng: &mut SimRng) -> RelaxedRead {
        self.stats.relaxed_reads += 1;
        let set = self.replica_set(key);
        let replica = *rng.pick(&set).expect("cache has no members");
        RelaxedRead {
            replica,
            result: self.read_replica(replica, key, now),
        }
    }

    /// Quorum read: the highest version among the first `read_quorum`
    /// replicas to answer.
    pub fn get_consistent(
        &mut self,
        key: &CacheKey,
        now: SimTime,
        rng: &mut SimRng,
    ) -> Result<Option<VersionedValue>, CacheError> {
        self.stats.consistent_reads += 1;
        if self.is_migrating(key, now) {
            self.stats.unavailable += 1;
            return Err(CacheError::Unavailable);
        }
        let mut order = self.replica_set(key);
        rng.shuffle(&mut order);
        let mut answers = Vec::with_capacity(self.repl.read_quorum);
        for r in order {
            if let Ok(v) = self.read_replica(r, key, now) {
                answers.push(v);
                if answers.len() == self.repl.read_quorum {
                    break;
                }
            }
        }
        if answers.len() < self.repl.read_quorum {
            self.stats.unavailable += 1;
            return Err(CacheError::Unavailable);
        }
        Ok(answers.into_iter().flatten().max_by_key(|v| v.version))
    }

    /// Batched read. Each replica touched by the batch is charged one
    /// request; per-key results follow the scalar semantics.
    pub fn bulk_get(
        &mut self,
        keys: &[CacheKey],
        mode: ReadMode,
        now: SimTime,
        rng: &mut SimRng,
    ) -> Vec<Result<Option<VersionedValue>, CacheError>> {
        let mut status: BTreeMap<ReplicaId, Result<(), ReplicaError>> = BTreeMap::new();
        let mut out = Vec::with_capacity(keys.len());
        for key in keys {
            let mut order = self.replica_set(key);
            let want = match mode {
                ReadMode::Relaxed => {
                    self.stats.relaxed_reads += 1;
                    1
                }
                ReadMode::Consistent => {
                    self.stats.consistent_reads += 1;
                    self.repl.read_quorum
                }
            };
            rng.shuffle(&mut order);
            if mode == ReadMode::Relaxed {
                order.truncate(1);
            }
            let mut answers = Vec::new();
            for r in order {
                let st = *status.entry(r).or_insert_with(|| self.admit_read(r, now));
                if st.is_err() {
                    continue;
                }
                if let Ok(v) = self.read_admitted(r, key, now) {
                    answers.push(v);
                    if answers.len() == want {
                        break;
                    }
                }
            }
            if answers.len() < want {
                if mode == ReadMode::Consistent {
                    self.stats.unavailable += 1;
                }
                out.push(Err(CacheError::Unavailable));
            } else {
                out.push(Ok(answers.into_iter().flatten().max_by_key(|v| v.version)));
            }
        }
        out
    }

    // ---- locks ----

    fn write_lock(
        &mut self,
        key: CacheKey,
        rec: LockRecord,
        prev: Option<Version>,
        now: SimTime,
    ) -> Result<usize, CacheError> {
        let version = prev.map_or(now << 16, |v| (v + 1).max(now << 16));
        self.put(key, Bytes::from(rec.encode()), version, now)
    }

    fn read_lock(
        &mut self,
        key: &CacheKey,
        now: SimTime,
        rng: &mut SimRng,
    ) -> Result<Option<(LockRecord, Version)>, CacheError> {
        Ok(self
            .get_consistent(key, now, rng)?
            .and_then(|v| LockRecord::decode(&v.bytes).map(|r| (r, v.version))))
    }

    pub fn acquire_lock(
        &mut self,
        key: CacheKey,
        sig: LockSignature,
        now: SimTime,
        rng: &mut SimRng,
    ) -> LockOutcome {
        let current = match self.read_lock(&key, now, rng) {
            Ok(c) => c,
            Err(_) => return LockOutcome::AcquiredWithoutLock,
        };
        match current {
            Some((rec, _)) if rec.owner == Some(sig) && !rec.poisoned => LockOutcome::Acquired,
            Some((rec, _)) if !rec.is_free() && rec.owner != Some(sig) => {
                LockOutcome::HeldByOther(rec)
            }
            other => match self.write_lock(
                key,
                LockRecord::held_by(sig, now),
                other.map(|(_, v)| v),
                now,
            ) {
                Ok(_) => LockOutcome::Acquired,
                Err(_) => LockOutcome::AcquiredWithoutLock,
            },
        }
    }

    /// Mark the current lease poisoned. Returns whether a record was poisoned.
    pub fn poison_lock(&mut self, key: CacheKey, now: SimTime, rng: &mut SimRng) -> bool {
        match self.read_lock(&key, now, rng) {
            Ok(Some((mut rec, v))) if !rec.is_free() => {
                if rec.poisoned {
                    return true;
                }
                rec.poisoned = true;
                rec.poisoned_at = now;
                self.write_lock(key, rec, Some(v), now).is_ok()
            }
            _ => false,
        }
    }

    pub fn check_lock(
        &mut self,
        key: CacheKey,
        sig: LockSignature,
        now: SimTime,
        rng: &mut SimRng,
    ) -> LockCheck {
        match self.read_lock(&key, now, rng) {
            Err(_) => LockCheck::Unavailable,
            Ok(Some((rec, _))) if rec.owner == Some(sig) => {
                if rec.poisoned {
                    LockCheck::Poisoned
                } else {
                    LockCheck::Held
                }
            }
            Ok(_) => LockCheck::Lost,
        }
    }

    /// Release the lease if we still own it.
    pub fn release_lock(
        &mut self,
        key: CacheKey,
        sig: LockSignature,
        now: SimTime,
        rng: &mut SimRng,
    ) {
        if let Ok(Some((rec, v))) = self.read_lock(&key, now, rng) {
            if rec.owner == Some(sig) {
                let _ = self.write_lock(key, LockRecord::released(now), Some(v), now);
            }
        }
    }

    /// Take the lease unconditionally (used after the seize delay).
    pub fn seize_lock(
        &mut self,
        key: CacheKey,
        sig: LockSignature,
        now: SimTime,
        rng: &mut SimRng,
    ) -> LockOutcome {
        let prev = self
            .read_lock(&key, now, rng)
            .ok()
            .flatten()
            .map(|(_, v)| v);
        match self.write_lock(key, LockRecord::held_by(sig, now), prev, now) {
            Ok(_) => LockOutcome::Acquired,
            Err(_) => LockOutcome::AcquiredWithoutLock,
        }
    }

    pub fn lock_record(&self, key: &CacheKey, now: SimTime) -> Option<LockRecord> {
        self.peek_newest(key, now)
            .and_then(|v| LockRecord::decode(&v.bytes))
    }

    // ---- maintenance ----

    /// Expire entries past their TTL, then evict least-recently-modified
    /// entries on replicas above the GC threshold.
    pub fn gc_tick(&mut self, now: SimTime) -> usize {
        let ttl = self.cfg.ttl_ms;
        let threshold = (self.cfg.capacity_bytes as f64 * self.cfg.gc_start_fraction) as u64;
        let mut evicted = 0;
        for rep in self.replicas.iter_mut().filter(|r| r.alive) {
            while let Some(&(t, k)) = rep.by_age.iter().next() {
                if now < t.saturating_add(ttl) {
                    break;
                }
                rep.remove(&k);
                self.stats.evicted_ttl += 1;
                evicted += 1;
            }
            while rep.used_bytes > threshold && rep.evict_oldest() {
                self.stats.evicted_capacity += 1;
                evicted += 1;
            }
        }
        self.migrating_until.retain(|_, &mut t| now < t);
        evicted
    }

    /// Highest live version of `key` across all replicas, without charging
    /// any replica. Test and monitor use only.
    pub fn peek_newest(&self, key: &CacheKey, now: SimTime) -> Option<VersionedValue> {
        self.replicas
            .iter()
            .filter(|r| r.alive)
            .filter_map(|r| r.store.get(key))
            .filter(|v| !self.expired(v, now))
            .max_by_key(|v| v.version)
            .cloned()
    }

    /// Value held by one replica, without charging it.
    pub fn peek_replica(&self, r: ReplicaId, key: &CacheKey) -> Option<&VersionedValue> {
        self.replicas.get(r.0 as usize)?.store.get(key)
    }

    pub fn inspect_occupancy(&self) -> Vec<Occupancy> {
        let members = self.ring.members();
        self.replicas
            .iter()
            .enumerate()
            .map(|(i, r)| Occupancy {
                replica: ReplicaId(i as u32),
                alive: r.alive,
                member: members.contains(&ReplicaId(i as u32)),
                used_bytes: r.used_bytes,
                entries: r.store.len(),
            })
            .collect()
    }

    /// Per-member load since the last call; resets the counters.
    pub fn take_load(&mut self) -> Vec<(ReplicaId, Load)> {
        let members: Vec<ReplicaId> = self.members();
        members
            .into_iter()
            .map(|r| {
                let rep = &mut self.replicas[r.0 as usize];
                (r, std::mem::take(&mut rep.load))
            })
            .collect()
    }

    // ---- admin ----

    /// Drop one key from one replica, as capacity GC would.
    pub fn evict_key(&mut self, r: ReplicaId, key: &CacheKey) -> bool {
        let Some(rep) = self.replicas.get_mut(r.0 as usize) else {
            return false;
        };
        let hit = rep.remove(key);
        if hit {
            self.stats.evicted_capacity += 1;
        }
        hit
    }

    /// Kill a replica; its volatile contents are lost.
    pub fn kill_replica(&mut self, r: ReplicaId) {
        if let Some(rep) = self.replicas.get_mut(r.0 as usize) {
            rep.alive = false;
            rep.clear();
        }
    }

    /// Bring a replica back, empty.
    pub fn restart_replica(&mut self, r: ReplicaId) {
        if let Some(rep) = self.replicas.get_mut(r.0 as usize) {
            rep.alive = true;
            rep.clear();
        }
    }

    /// Add an idle replica outside the ring (a backup).
    pub fn spawn_replica(&mut self) -> ReplicaId {
        self.replicas.push(Replica::new());
        ReplicaId(self.replicas.len() as u32 - 1)
    }

    /// Live replicas that are not ring members.
    pub fn spares(&self) -> Vec<ReplicaId> {
        let members = self.ring.members();
        (0..self.replicas.len() as u32)
            .map(ReplicaId)
            .filter(|r| !members.contains(r) && self.replicas[r.0 as usize].alive)
            .collect()
    }

    /// Grow the ring by `n` fresh replicas.
    pub fn add_replicas(&mut self, n: usize, now: SimTime) -> Vec<ReplicaId> {
        let added: Vec<ReplicaId> = (0..n).map(|_| self.spawn_replica()).collect();
        let mut members = self.ring.members().clone();
        members.extend(added.iter().copied());
        self.trigger_reshard(members, now);
        added
    }

    /// Shrink the ring by up to `n` replicas (highest ids first), never
    /// below the replication factor. Removed replicas are retired.
    pub fn remove_replicas(&mut self, n: usize, now: SimTime) -> Vec<ReplicaId> {
        let mut members = self.ring.members().clone();
        let mut removed = Vec::new();
        while removed.len() < n && members.len() > self.repl.n_replicas {
            let last = *members.iter().next_back().unwrap();
            members.remove(&last);
            removed.push(last);
        }
        if !removed.is_empty() {
            self.trigger_reshard(members, now);
            for r in &removed {
                let rep = &mut self.replicas[r.0 as usize];
                rep.alive = false;
                rep.clear();
            }
        }
        removed
    }

    /// Fail a dead member over to a spare. The spare takes the dead
    /// replica's ring positions and starts empty; no other key moves.
    pub fn replace_replica(&mut self, dead: ReplicaId) -> Option<ReplicaId> {
        if !self.ring.members().contains(&dead) {
            return None;
        }
        let spare = *self.spares().first()?;
        self.ring.substitute(dead, spare);
        self.replicas[spare.0 as usize].clear();
        Some(spare)
    }

    /// Move to a new membership. Keys whose shard changed are copied to
    /// their new owners and stay unavailable for `migration_ms`. Returns the
    /// number of keys that moved.
    pub fn trigger_reshard(&mut self, members: BTreeSet<ReplicaId>, now: SimTime) -> usize {
        let old_ring = self.ring.clone();
        let new_ring = Ring::new(members, self.cfg.vnodes);
        let n = self.repl.n_replicas;

        let mut newest: BTreeMap<CacheKey, VersionedValue> = BTreeMap::new();
        for rep in self.replicas.iter().filter(|r| r.alive) {
            for (k, v) in &rep.store {
                match newest.get(k) {
                    Some(cur) if cur.version >= v.version => {}
                    _ => {
                        newest.insert(*k, v.clone());
                    }
                }
            }
        }

        let mut moved = 0;
        for (key, value) in newest {
            let old_set = old_ring.owners(key.ring_position(), n);
            let new_set = new_ring.owners(key.ring_position(), n);
            if old_set == new_set {
                continue;
            }
            moved += 1;
            for (i, rep) in self.replicas.iter_mut().enumerate() {
                let r = ReplicaId(i as u32);
                if !rep.alive {
                    continue;
                }
                if new_set.contains(&r) {
                    let stale = rep
                        .store
                        .get(&key)
                        .is_none_or(|v| v.version < value.version);
                    if stale {
                        rep.insert(key, value.clone());
                    }
                } else {
                    rep.remove(&key);
                }
            }
            self.migrating_until
                .insert(key, now + self.cfg.migration_ms);
        }
        self.ring = new_ring;
        moved
    }
}
