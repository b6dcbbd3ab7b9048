//! Cluster-local operation scheduler.
//!
//! Each cluster's scheduler owns the operations for hops leaving that
//! cluster. It assigns every operation a local reader and a writer in the
//! downstream cluster, reschedules after failures, caps admissions per tick
//! and sheds operations from overloaded readers.
//!
//! Assignment is weakly consistent on purpose: during a split-brain window
//! two views of the scheduler each assign the same operation, and the
//! transport's duel settles which instance survives.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::simnet::{ClusterId, ProcessId, SimTime};
use crate::transport::{EndReason, Hop, InstanceId, OpId, OpKey, Storage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerConfig {
    pub reschedule_delay_ms: u64,
    /// Backoff when no live worker is available.
    pub retry_backoff_ms: u64,
    pub balance_interval_ms: u64,
    pub imbalance_factor: f64,
    pub max_admissions_per_tick: usize,
    pub max_shed_per_balance: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            reschedule_delay_ms: 50,
            retry_backoff_ms: 100,
            balance_interval_ms: 1000,
            imbalance_factor: 1.5,
            max_admissions_per_tick: 64,
            max_shed_per_balance: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub instance: InstanceId,
    pub key: OpKey,
    pub reader: ProcessId,
    pub writer: ProcessId,
    pub epoch: u64,
    /// Which scheduler view made the assignment; only differs from 0 inside
    /// a split-brain window.
    pub view: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchedAction {
    Start(Assignment),
    Stop {
        assignment: Assignment,
        reason: EndReason,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentChange {
    pub at: SimTime,
    pub cluster: ClusterId,
    pub epoch: u64,
    pub instance: InstanceId,
    pub op: String,
    pub reader: ProcessId,
    pub writer: ProcessId,
    pub change: String,
}

/// Live workers the scheduler may use right now.
#[derive(Debug, Clone, Default)]
pub struct PoolView {
    pub readers: Vec<ProcessId>,
    /// Live writers per downstream cluster with their current op counts.
    pub writers: BTreeMap<ClusterId, Vec<(ProcessId, usize)>>,
}

#[derive(Debug, Clone, Default)]
struct OpEntry {
    instances: BTreeMap<InstanceId, Assignment>,
    not_before: SimTime,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    pub cluster: ClusterId,
    pub epoch: u64,
    cfg: SchedulerConfig,
    ops: BTreeMap<OpKey, OpEntry>,
    finished: BTreeSet<OpKey>,
    /// Instance ids owned by this scheduler, for fast lookup.
    by_instance: BTreeMap<InstanceId, OpKey>,
    counter: u64,
    split_brain: Option<(SimTime, SimTime)>,
    last_balance: SimTime,
    log: Vec<AssignmentChange>,
}

impl Scheduler {
    pub fn new(cluster: ClusterId, epoch: u64, cfg: SchedulerConfig) -> Self {
        Self {
            cluster,
            epoch,
            cfg,
            ops: BTreeMap::new(),
            finished: BTreeSet::new(),
            by_instance: BTreeMap::new(),
            counter: 0,
            split_brain: None,
            last_balance: 0,
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    /// Two views assign independently while `from <= now < until`.
    pub fn set_split_brain(&mut self, from: SimTime, until: SimTime) {
        self.split_brain = Some((from, until));
    }

    fn in_split_brain(&self, now: SimTime) -> bool {
        self.split_brain.is_some_and(|(a, b)| now >= a && now < b)
    }

    /// A file now exists in this cluster; make sure both of its operations
    /// exist on every outgoing hop. Idempotent.
    pub fn notify_file(&mut self, path: &str, children: &[ClusterId], now: SimTime) -> usize {
        let mut created = 0;
        for &down in children {
            for storage in [Storage::Durable, Storage::Cache] {
                let key = OpKey {
                    op: OpId {
                        path: path.to_string(),
                        storage,
                    },
                    hop: Hop {
                        up: self.cluster,
                        down,
                    },
                };
                if self.finished.contains(&key) || self.ops.contains_key(&key) {
                    continue;
                }
                self.ops.insert(
                    key,
                    OpEntry {
                        instances: BTreeMap::new(),
                        not_before: now,
                    },
                );
                created += 1;
            }
        }
        created
    }

    /// Producer hook: a new (index, data) file pair was created.
    pub fn notify_produced(
        &mut self,
        stream: &str,
        shard: u32,
        file_no: u32,
        children: &[ClusterId],
        now: SimTime,
    ) -> usize {
        let d = crate::file_layer::data_path(stream, shard, file_no);
        let i = crate::file_layer::index_path(stream, shard, file_no);
        self.notify_file(&d, children, now) + self.notify_file(&i, children, now)
    }

    /// Drop every op for files under `prefix` on the hop into `down` (the
    /// hop left that stream's tree).
    pub fn drop_hop(&mut self, down: ClusterId, prefix: &str, now: SimTime) -> Vec<SchedAction> {
        let keys: Vec<OpKey> = self
            .ops
            .keys()
            .filter(|k| k.hop.down == down && k.op.path.starts_with(prefix))
            .cloned()
            .collect();
        let mut out = Vec::new();
        for k in keys {
            self.finished.remove(&k);
            if let Some(e) = self.ops.remove(&k) {
                for (_, a) in e.instances {
                    self.by_instance.remove(&a.instance);
                    self.record(now, &a, "drop");
                    out.push(SchedAction::Stop {
                        assignment: a,
                        reason: EndReason::Shed,
                    });
                }
            }
        }
        out
    }

    fn record(&mut self, at: SimTime, a: &Assignment, change: &str) {
        self.log.push(AssignmentChange {
            at,
            cluster: self.cluster,
            epoch: a.epoch,
            instance: a.instance,
            op: a.key.to_string(),
            reader: a.reader,
            writer: a.writer,
            change: change.to_string(),
        });
    }

    fn reader_loads(&self, pool: &PoolView) -> BTreeMap<ProcessId, usize> {
        let mut m: BTreeMap<ProcessId, usize> = pool.readers.iter().map(|&r| (r, 0)).collect();
        for e in self.ops.values() {
            for a in e.instances.values() {
                if let Some(c) = m.get_mut(&a.reader) {
                    *c += 1;
                }
            }
        }
        m
    }

    fn next_instance(&mut self) -> InstanceId {
        self.counter += 1;
        ((self.cluster.0 as u64) << 48) | ((self.epoch & 0xffff) << 32) | self.counter
    }

    /// Admit pending operations. Call every scheduler tick.
    pub fn tick(&mut self, now: SimTime, pool: &PoolView) -> Vec<SchedAction> {
        let mut out = Vec::new();
        if now >= self.last_balance + self.cfg.balance_interval_ms {
            self.last_balance = now;
            out.extend(self.balance_tick(now, pool));
        }
        let mut loads = self.reader_loads(pool);
        let mut wloads: BTreeMap<ClusterId, BTreeMap<ProcessId, usize>> = pool
            .writers
            .iter()
            .map(|(c, ws)| (*c, ws.iter().copied().collect()))
            .collect();
        let views = if self.in_split_brain(now) { 2 } else { 1 };
        let pending: Vec<OpKey> = self
            .ops
            .iter()
            .filter(|(_, e)| e.instances.is_empty() && now >= e.not_before)
            .map(|(k, _)| k.clone())
            .take(self.cfg.max_admissions_per_tick)
            .collect();
        for key in pending {
            let mut placed = Vec::new();
            for view in 0..views {
                let reader = least_loaded(
                    &loads,
                    &placed
                        .iter()
                        .map(|a: &Assignment| a.reader)
                        .collect::<Vec<_>>(),
                );
                let writer = wloads.get(&key.hop.down).and_then(|w| {
                    least_loaded(
                        w,
                        &placed
                            .iter()
                            .map(|a: &Assignment| a.writer)
                            .collect::<Vec<_>>(),
                    )
                });
                let (Some(reader), Some(writer)) = (reader, writer) else {
                    break;
                };
                *loads.get_mut(&reader).unwrap() += 1;
                *wloads
                    .get_mut(&key.hop.down)
                    .unwrap()
                    .get_mut(&writer)
                    .unwrap() += 1;
                let a = Assignment {
                    instance: self.next_instance(),
                    key: key.clone(),
                    reader,
                    writer,
                    epoch: self.epoch,
                    view,
                };
                placed.push(a);
            }
            if placed.is_empty() {
                self.ops.get_mut(&key).unwrap().not_before = now + self.cfg.retry_backoff_ms;
                continue;
            }
            for a in placed {
                self.ops
                    .get_mut(&key)
                    .unwrap()
                    .instances
                    .insert(a.instance, a.clone());
                self.by_instance.insert(a.instance, key.clone());
                self.record(now, &a, "assign");
                out.push(SchedAction::Start(a));
            }
        }
        out
    }

    /// A worker died. Its instances are dropped, their surviving halves
    /// stopped, and the ops rescheduled after the reschedule delay.
    pub fn worker_failed(&mut self, pid: ProcessId, now: SimTime) -> Vec<SchedAction> {
        let hit: Vec<InstanceId> = self
            .ops
            .values()
            .flat_map(|e| e.instances.values())
            .filter(|a| a.reader == pid || a.writer == pid)
            .map(|a| a.instance)
            .collect();
        let mut out = Vec::new();
        for i in hit {
            if let Some(a) = self.remove_instance(i, now) {
                self.record(now, &a, "worker-failed");
                out.push(SchedAction::Stop {
                    assignment: a,
                    reason: EndReason::PeerStopped,
                });
            }
        }
        out
    }

    fn remove_instance(&mut self, instance: InstanceId, now: SimTime) -> Option<Assignment> {
        let key = self.by_instance.remove(&instance)?;
        let delay = self.cfg.reschedule_delay_ms;
        let e = self.ops.get_mut(&key)?;
        let a = e.instances.remove(&instance)?;
        if e.instances.is_empty() {
            e.not_before = now + delay;
        }
        Some(a)
    }

    /// An instance reported its end.
    pub fn instance_ended(&mut self, instance: InstanceId, reason: EndReason, now: SimTime) {
        let Some(key) = self.by_instance.get(&instance).cloned() else {
            return;
        };
        if let Some(a) = self.remove_instance(instance, now) {
            self.record(now, &a, &format!("end:{reason:?}"));
        }
        if !reason.needs_reschedule() {
            if let Some(e) = self.ops.remove(&key) {
                for a in e.instances.values() {
                    self.by_instance.remove(&a.instance);
                }
            }
            self.finished.insert(key);
        }
    }

    /// Shed operations from readers above `mean * imbalance_factor`.
    pub fn balance_tick(&mut self, now: SimTime, pool: &PoolView) -> Vec<SchedAction> {
        let loads = self.reader_loads(pool);
        if loads.is_empty() {
            return Vec::new();
        }
        let total: usize = loads.values().sum();
        let mean = total as f64 / loads.len() as f64;
        let limit = mean * self.cfg.imbalance_factor;
        let target = mean.ceil() as usize;
        let mut budget = self.cfg.max_shed_per_balance;
        let mut victims = Vec::new();
        for (&r, &n) in &loads {
            if (n as f64) <= limit || budget == 0 {
                continue;
            }
            let excess = (n - target).min(budget);
            budget -= excess;
            let mut mine: Vec<InstanceId> = self
                .ops
                .values()
                .flat_map(|e| e.instances.values())
                .filter(|a| a.reader == r)
                .map(|a| a.instance)
                .collect();
            mine.sort_unstable();
            victims.extend(mine.into_iter().rev().take(excess));
        }
        let mut out = Vec::new();
        for i in victims {
            if let Some(a) = self.remove_instance(i, now) {
                // Shed ops are re-admitted on the next tick.
                if let Some(e) = self.ops.get_mut(&a.key) {
                    e.not_before = now;
                }
                self.record(now, &a, "shed");
                out.push(SchedAction::Stop {
                    assignment: a,
                    reason: EndReason::Shed,
                });
            }
        }
        out
    }

    pub fn assignments(&self) -> impl Iterator<Item = &Assignment> {
        self.ops.values().flat_map(|e| e.instances.values())
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    pub fn pending(&self) -> usize {
        self.ops.values().filter(|e| e.instances.is_empty()).count()
    }

    pub fn is_finished(&self, key: &OpKey) -> bool {
        self.finished.contains(key)
    }

    pub fn owns(&self, instance: InstanceId) -> bool {
        self.by_instance.contains_key(&instance)
    }

    pub fn log(&self) -> &[AssignmentChange] {
        &self.log
    }

    pub fn drain_log(&mut self) -> Vec<AssignmentChange> {
        std::mem::take(&mut self.log)
    }
}

/// Least-loaded candidate not in `avoid`, falling back to any candidate;
/// ties go to the lower process id.
fn least_loaded(loads: &BTreeMap<ProcessId, usize>, avoid: &[ProcessId]) -> Option<ProcessId> {
    let pick = |skip: bool| {
        loads
            .iter()
            .filter(|(p, _)| !skip || !avoid.contains(p))
            .min_by_key(|(p, n)| (**n, **p))
            .map(|(p, _)| *p)
    };
    pick(true).or_else(|| pick(false))
}
