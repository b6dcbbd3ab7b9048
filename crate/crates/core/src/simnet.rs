//! Deterministic discrete-event substrate.
//!
//! A single-threaded event queue over a millisecond clock, a seeded RNG that
//! is the only source of randomness, directed inter-cluster links with
//! latency and serialization delay, and a process table whose dead entries
//! silently swallow any event addressed to them.
//!
//! The queue is generic over the event payload so that callers dispatch
//! events themselves; this keeps borrows simple (the world owns the `Sim`
//! and matches on each fired event).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in milliseconds.
pub type SimTime = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterId(pub u32);

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcessId(pub u64);

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

/// Seeded RNG wrapper. Every random choice in a run goes through one of these.
#[derive(Debug, Clone)]
pub struct SimRng {
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream, e.g. one per trial.
    pub fn fork(&mut self) -> SimRng {
        SimRng::new(self.inner.random())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, bound)`; returns 0 when `bound == 0`.
    pub fn below(&mut self, bound: u64) -> u64 {
        if bound == 0 {
            0
        } else {
            self.inner.random_range(0..bound)
        }
    }

    /// Uniform in the inclusive range `[lo, hi]`.
    pub fn between(&mut self, lo: u64, hi: u64) -> u64 {
        if hi <= lo {
            lo
        } else {
            self.inner.random_range(lo..=hi)
        }
    }

    pub fn chance(&mut self, p: f64) -> bool {
        p > 0.0 && self.inner.random_bool(p.min(1.0))
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> Option<&'a T> {
        if items.is_empty() {
            None
        } else {
            Some(&items[self.below(items.len() as u64) as usize])
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Monotonic simulated clock. Only the event loop advances it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now: SimTime,
}

impl SimClock {
    pub fn now(&self) -> SimTime {
        self.now
    }

    fn advance_to(&mut self, t: SimTime) {
        debug_assert!(
            t >= self.now,
            "clock moved backwards: {} -> {}",
            self.now,
            t
        );
        self.now = self.now.max(t);
    }
}

/// Directed link between two clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub src: ClusterId,
    pub dst: ClusterId,
    pub latency_ms: u64,
    pub bandwidth_bps: u64,
    pub up: bool,
}

impl Link {
    pub fn new(src: ClusterId, dst: ClusterId, latency_ms: u64, bandwidth_bps: u64) -> Self {
        Self {
            src,
            dst,
            latency_ms,
            bandwidth_bps: bandwidth_bps.max(1),
            up: true,
        }
    }

    /// Serialization delay rounded to the nearest millisecond.
    pub fn serialization_ms(&self, payload_bytes: u64) -> u64 {
        let bits_ms = payload_bytes as u128 * 8 * 1000;
        let bps = self.bandwidth_bps.max(1) as u128;
        ((bits_ms + bps / 2) / bps) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SendError {
    #[error("no link {0} -> {1}")]
    NoLink(ClusterId, ClusterId),
    #[error("link {0} -> {1} is down")]
    LinkDown(ClusterId, ClusterId),
}

#[derive(Debug, Clone)]
pub struct ProcessHandle {
    pub id: ProcessId,
    pub cluster: ClusterId,
    pub name: String,
    pub alive: bool,
}

struct Scheduled<E> {
    at: SimTime,
    seq: u64,
    target: Option<ProcessId>,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl<E> Eq for Scheduled<E> {}
impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Scheduled<E> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// An event popped from the queue.
#[derive(Debug)]
pub struct Fired<E> {
    pub id: EventId,
    pub at: SimTime,
    pub target: Option<ProcessId>,
    pub event: E,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SimStats {
    pub fired: u64,
    pub dropped_dead_target: u64,
    pub dropped_link_down: u64,
}

struct LinkState {
    link: Link,
    last_delivery: SimTime,
}

/// The simulator: clock, queue, links, processes and RNG.
pub struct Sim<E> {
    clock: SimClock,
    next_seq: u64,
    queue: BinaryHeap<Scheduled<E>>,
    links: BTreeMap<(ClusterId, ClusterId), LinkState>,
    processes: BTreeMap<ProcessId, ProcessHandle>,
    next_pid: u64,
    pub rng: SimRng,
    stats: SimStats,
}

impl<E> Sim<E> {
    pub fn new(seed: u64) -> Self {
        Self {
            clock: SimClock::default(),
            next_seq: 0,
            queue: BinaryHeap::new(),
            links: BTreeMap::new(),
            processes: BTreeMap::new(),
            next_pid: 1,
            rng: SimRng::new(seed),
            stats: SimStats::default(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock.now()
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Fire `event` at `now + delay_ms`. Same-time events fire in insertion order.
    pub fn schedule(&mut self, delay_ms: u64, event: E) -> EventId {
        self.push(self.now() + delay_ms, None, event)
    }

    /// Like [`Sim::schedule`] but addressed to a process; dropped if the
    /// process is dead when the event comes due.
    pub fn schedule_to(&mut self, target: ProcessId, delay_ms: u64, event: E) -> EventId {
        self.push(self.now() + delay_ms, Some(target), event)
    }

    pub fn schedule_at(&mut self, at: SimTime, target: Option<ProcessId>, event: E) -> EventId {
        self.push(at.max(self.now()), target, event)
    }

    fn push(&mut self, at: SimTime, target: Option<ProcessId>, event: E) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Scheduled {
            at,
            seq,
            target,
            event,
        });
        EventId(seq)
    }

    /// Pop the next deliverable event, advancing the clock. Events addressed
    /// to dead processes are discarded along the way.
    pub fn next_event(&mut self) -> Option<Fired<E>> {
        while let Some(s) = self.queue.pop() {
            self.clock.advance_to(s.at);
            if let Some(pid) = s.target {
                if !self.is_alive(pid) {
                    self.stats.dropped_dead_target += 1;
                    continue;
                }
            }
            self.stats.fired += 1;
            return Some(Fired {
                id: EventId(s.seq),
                at: s.at,
                target: s.target,
                event: s.event,
            });
        }
        None
    }

    /// Time of the next queued event, if any.
    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|s| s.at)
    }

    // ---- links ----

    /// Install a link; `symmetric` also installs the reverse direction.
    pub fn add_link(&mut self, link: Link, symmetric: bool) {
        self.links.insert(
            (link.src, link.dst),
            LinkState {
                link,
                last_delivery: 0,
            },
        );
        if symmetric {
            let rev = Link {
                src: link.dst,
                dst: link.src,
                ..link
            };
            self.links.insert(
                (rev.src, rev.dst),
                LinkState {
                    link: rev,
                    last_delivery: 0,
                },
            );
        }
    }

    pub fn link(&self, src: ClusterId, dst: ClusterId) -> Option<&Link> {
        self.links.get(&(src, dst)).map(|s| &s.link)
    }

    /// Bring both directions of a link up or down.
    pub fn set_link_up(&mut self, a: ClusterId, b: ClusterId, up: bool) {
        for key in [(a, b), (b, a)] {
            if let Some(s) = self.links.get_mut(&key) {
                s.link.up = up;
            }
        }
    }

    /// Send `payload_bytes` over `src -> dst`. On success the event is queued
    /// for the delivery time, which is never earlier than the previous
    /// delivery on the same link (FIFO).
    pub fn send(
        &mut self,
        src: ClusterId,
        dst: ClusterId,
        payload_bytes: u64,
        target: Option<ProcessId>,
        event: E,
    ) -> Result<SimTime, SendError> {
        let now = self.now();
        let state = self
            .links
            .get_mut(&(src, dst))
            .ok_or(SendError::NoLink(src, dst))?;
        if !state.link.up {
            self.stats.dropped_link_down += 1;
            return Err(SendError::LinkDown(src, dst));
        }
        let at = (now + state.link.latency_ms + state.link.serialization_ms(payload_bytes))
            .max(state.last_delivery);
        state.last_delivery = at;
        self.push(at, target, event);
        Ok(at)
    }

    // ---- processes ----

    pub fn spawn(&mut self, cluster: ClusterId, name: impl Into<String>) -> ProcessId {
        let id = ProcessId(self.next_pid);
        self.next_pid += 1;
        self.processes.insert(
            id,
            ProcessHandle {
                id,
                cluster,
                name: name.into(),
                alive: true,
            },
        );
        id
    }

    pub fn is_alive(&self, pid: ProcessId) -> bool {
        self.processes.get(&pid).is_some_and(|p| p.alive)
    }

    pub fn process(&self, pid: ProcessId) -> Option<&ProcessHandle> {
        self.processes.get(&pid)
    }

    /// Kill a process. Its pending events are dropped when they come due.
    pub fn kill_process(&mut self, pid: ProcessId) {
        if let Some(p) = self.processes.get_mut(&pid) {
            p.alive = false;
        }
    }

    /// Restart a process as a fresh incarnation with a new id; nothing
    /// addressed to the old id is ever delivered to the new one.
    pub fn restart_process(&mut self, pid: ProcessId) -> Option<ProcessId> {
        let (cluster, name) = {
            let p = self.processes.get_mut(&pid)?;
            p.alive = false;
            (p.cluster, p.name.clone())
        };
        Some(self.spawn(cluster, name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drain<E>(sim: &mut Sim<E>) -> Vec<(SimTime, E)> {
        let mut out = Vec::new();
        while let Some(f) = sim.next_event() {
            out.push((f.at, f.event));
        }
        out
    }

    #[test]
    fn zero_delay_fires_before_later_events() {
        let mut sim = Sim::new(1);
        sim.schedule(1, "later");
        sim.schedule(0, "now");
        assert_eq!(drain(&mut sim), vec![(0, "now"), (1, "later")]);
    }

    #[test]
    fn same_timestamp_fires_in_insertion_order() {
        let mut sim = Sim::new(1);
        for i in 0..10 {
            sim.schedule(5, i);
        }
        let order: Vec<_> = drain(&mut sim).into_iter().map(|(_, e)| e).collect();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn poll_interval_event_fires_at_fifty() {
        let mut sim = Sim::new(1);
        sim.schedule(50, "poll");
        let f = sim.next_event().unwrap();
        assert_eq!(f.at, 50);
        assert_eq!(sim.now(), 50);
    }

    #[test]
    fn send_small_payload_rounds_serialization_away() {
        let mut sim = Sim::new(1);
        sim.add_link(
            Link::new(ClusterId(0), ClusterId(1), 10, 1_000_000_000),
            true,
        );
        let at = sim
            .send(ClusterId(0), ClusterId(1), 1024, None, ())
            .unwrap();
        assert_eq!(at, 10);
        // 1 MB at 1 Gbps is 8 ms of serialization.
        let at = sim
            .send(ClusterId(1), ClusterId(0), 1_000_000, None, ())
            .unwrap();
        assert_eq!(at, 18);
    }

    #[test]
    fn link_down_drops_payload() {
        let mut sim = Sim::new(1);
        sim.add_link(Link::new(ClusterId(0), ClusterId(1), 10, 1_000_000), true);
        sim.set_link_up(ClusterId(0), ClusterId(1), false);
        assert_eq!(
            sim.send(ClusterId(0), ClusterId(1), 10, None, ()),
            Err(SendError::LinkDown(ClusterId(0), ClusterId(1)))
        );
        assert!(sim.next_event().is_none());
    }

    #[test]
    fn link_sends_never_reorder() {
        let mut sim = Sim::new(1);
        // 1 KB/s link: a big message followed by a tiny one.
        sim.add_link(Link::new(ClusterId(0), ClusterId(1), 5, 8_000), false);
        sim.send(ClusterId(0), ClusterId(1), 1000, None, "big")
            .unwrap();
        sim.send(ClusterId(0), ClusterId(1), 1, None, "small")
            .unwrap();
        let order: Vec<_> = drain(&mut sim).into_iter().map(|(_, e)| e).collect();
        assert_eq!(order, vec!["big", "small"]);
    }

    #[test]
    fn dead_process_receives_nothing() {
        let mut sim = Sim::new(1);
        let p = sim.spawn(ClusterId(0), "reader");
        sim.schedule_to(p, 10, "to-p");
        sim.schedule(20, "global");
        sim.kill_process(p);
        let fired = drain(&mut sim);
        assert_eq!(fired, vec![(20, "global")]);
        assert_eq!(sim.stats().dropped_dead_target, 1);
    }

    #[test]
    fn restart_yields_fresh_incarnation() {
        let mut sim = Sim::new(1);
        let p = sim.spawn(ClusterId(3), "writer");
        sim.schedule_to(p, 10, 1);
        let q = sim.restart_process(p).unwrap();
        assert_ne!(p, q);
        assert!(sim.is_alive(q) && !sim.is_alive(p));
        assert_eq!(sim.process(q).unwrap().cluster, ClusterId(3));
        sim.schedule_to(q, 10, 2);
        let fired: Vec<_> = drain(&mut sim).into_iter().map(|(_, e)| e).collect();
        assert_eq!(fired, vec![2]);
    }

    #[test]
    fn identical_seeds_give_identical_streams() {
        let mut a = SimRng::new(42);
        let mut b = SimRng::new(42);
        let xs: Vec<_> = (0..32).map(|_| a.below(1000)).collect();
        let ys: Vec<_> = (0..32).map(|_| b.below(1000)).collect();
        assert_eq!(xs, ys);
    }

    proptest::proptest! {
        #[test]
        fn events_pop_in_nondecreasing_time(delays in proptest::collection::vec(0u64..500, 1..64)) {
            let mut sim = Sim::new(7);
            for (i, d) in delays.iter().enumerate() {
                sim.schedule(*d, i);
            }
            let mut last = 0;
            while let Some(f) = sim.next_event() {
                proptest::prop_assert!(f.at >= last);
                last = f.at;
            }
        }
    }
}
