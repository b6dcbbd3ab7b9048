//! Measurement collection and the machine-readable run report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::simnet::SimTime;

/// Nearest-rank percentile summary of millisecond samples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Percentiles {
    pub count: u64,
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
    pub p999: u64,
    pub p9999: u64,
    pub max: u64,
}

/// Nearest-rank percentile of sorted samples; `q` in (0, 1].
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Percentiles {
    pub fn from_samples(samples: &[u64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_unstable();
        Self {
            count: s.len() as u64,
            p50: percentile(&s, 0.50),
            p95: percentile(&s, 0.95),
            p99: percentile(&s, 0.99),
            p999: percentile(&s, 0.999),
            p9999: percentile(&s, 0.9999),
            max: s.last().copied().unwrap_or(0),
        }
    }
}

/// Per-second counters.
#[derive(Debug, Clone, Default)]
pub struct Timeline {
    buckets: Vec<u64>,
}

impl Timeline {
    pub fn add(&mut self, at: SimTime, n: u64) {
        let i = (at / 1000) as usize;
        if self.buckets.len() <= i {
            self.buckets.resize(i + 1, 0);
        }
        self.buckets[i] += n;
    }

    pub fn set_max(&mut self, at: SimTime, v: u64) {
        self.add(at, 0);
        let i = (at / 1000) as usize;
        self.buckets[i] = self.buckets[i].max(v);
    }

    pub fn sum_in(&self, from: SimTime, to: SimTime) -> u64 {
        let a = (from / 1000) as usize;
        let b = to.div_ceil(1000) as usize;
        self.buckets.iter().skip(a).take(b.saturating_sub(a)).sum()
    }

    pub fn peak(&self) -> u64 {
        self.buckets.iter().copied().max().unwrap_or(0)
    }

    pub fn into_vec(self) -> Vec<u64> {
        self.buckets
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.buckets
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    pub reads: u64,
    pub writes_applied: u64,
    pub writes_rejected: u64,
    pub bytes_read: u64,
    pub peak_read_qps: u64,
    /// Peak requests per second seen by a single replica.
    pub peak_replica_qps: u64,
    pub peak_replica_bps: u64,
    pub evicted_ttl: u64,
    pub evicted_capacity: u64,
    pub unavailable: u64,
    pub replicas_final: usize,
    pub replicas_peak: usize,
    /// (time_ms, member count) at every change.
    pub replica_changes: Vec<(u64, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub delivery_delay_ms: Percentiles,
    /// Production to cache-length publication in this cluster.
    pub cache_arrival_ms: Percentiles,
    /// Production to durable-length publication in this cluster.
    pub durable_arrival_ms: Percentiles,
    pub data_cache: CacheReport,
    pub meta_cache: CacheReport,
    pub consumer_fallback_reads: u64,
    pub consumer_cache_failures: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub from_ms: u64,
    pub to_ms: u64,
    pub messages: u64,
    pub fallback_reads: u64,
    pub cache_read_failures: u64,
    pub delivery_delay_ms: Percentiles,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpsReport {
    pub started: u64,
    pub ended: BTreeMap<String, u64>,
    pub poisoned_locks: u64,
    pub seized_locks: u64,
    pub resyncs: u64,
    pub reschedules: u64,
    pub sheds: u64,
    pub put_failures: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub at_ms: u64,
    pub stream: String,
    pub shard: u32,
    pub consumer: usize,
    /// Offset into the shard's produced byte sequence.
    pub offset: u64,
    pub expected: Option<u8>,
    pub actual: Option<u8>,
    pub detail: String,
    /// Line of the matching record in the event trace.
    pub trace_line: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub safety: bool,
    pub termination: bool,
    pub first_violation: Option<Violation>,
    pub quiescent_at_ms: Option<u64>,
    /// Consumers that had not received every produced byte at the end.
    pub incomplete_consumers: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub end_ms: u64,
    pub verdict: Verdict,
    pub messages_produced: u64,
    pub bytes_produced: u64,
    pub messages_delivered: u64,
    pub delivery_delay_ms: Percentiles,
    pub clusters: BTreeMap<String, ClusterReport>,
    pub stable_window: Option<WindowReport>,
    /// Consumer durable reads per second.
    pub fallback_timeline: Vec<u64>,
    /// Consumer cache reads that produced nothing usable, per second.
    pub cache_failure_timeline: Vec<u64>,
    /// p99 delivery delay per second of consumption.
    pub delay_p99_timeline: Vec<u64>,
    pub write_latency_ms: Percentiles,
    pub ops: OpsReport,
    pub events_fired: u64,
    pub trace_records: u64,
    pub trace_sha256: String,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let s: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&s, 0.5), 50);
        assert_eq!(percentile(&s, 0.99), 99);
        assert_eq!(percentile(&s, 0.999), 100);
        assert_eq!(percentile(&[7], 0.01), 7);
        assert_eq!(percentile(&[], 0.5), 0);
    }

    #[test]
    fn timeline_sums_windows() {
        let mut t = Timeline::default();
        t.add(500, 1);
        t.add(1500, 2);
        t.add(2500, 4);
        assert_eq!(t.sum_in(1000, 2000), 2);
        assert_eq!(t.sum_in(0, 3000), 7);
        assert_eq!(t.peak(), 4);
    }
}
