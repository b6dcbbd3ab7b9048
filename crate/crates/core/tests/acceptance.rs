//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion failed. Runs without the libtest harness so the
//! lines always reach the output.

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use filecast::copy_tree::{build_tree, penalize_and_rebuild, ClusterGraph, TreeConfig, TreeError};
use filecast::file_layer::DelayedReadState;
use filecast::harness::interleave::{check_interleavings, InterleaveConfig, Mutation};
use filecast::harness::{run_scenario, Report, RunOutput, Scenario, TraceRecord};
use filecast::simnet::{ClusterId, SimRng};

use common::{min_tree_cost_exhaustive, random_graph, run_chunk_pattern, DelayedReadOracle};

const SUITE_SEEDS: u64 = 10;
const SUITE_BUDGET: Duration = Duration::from_secs(300);
const INTERLEAVE_TRIALS: u64 = 100_000;
const INTERLEAVE_BUDGET: Duration = Duration::from_secs(600);
const ALGO_SEQUENCES: u64 = 1_000_000;
const TREE_GRAPHS: u64 = 200;
const CHUNK_PATTERNS: u64 = 10_000;
/// Relative tolerance of the steady-state p99 against the analytic bound.
const P99_TOLERANCE: f64 = 0.20;
/// Seconds after a disruption by which fallbacks must be back at zero.
const RECOVERY_S: usize = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(path: &Path) -> Scenario {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Scenario::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn run(sc: &Scenario) -> RunOutput {
    run_scenario(sc).unwrap_or_else(|e| panic!("{}: {e}", sc.name))
}

fn suite() -> Vec<Scenario> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(scenarios_dir().join("suite"))
        .expect("suite directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load(p)).collect()
}

fn fallbacks(r: &Report) -> u64 {
    r.clusters.values().map(|c| c.consumer_fallback_reads).sum()
}

struct SuiteRun {
    name: String,
    seed: u64,
    report: Report,
}

fn run_suite() -> (Vec<SuiteRun>, Duration) {
    let t = Instant::now();
    let mut out = Vec::new();
    for base in suite() {
        for seed in 0..SUITE_SEEDS {
            let mut sc = base.clone();
            sc.seed = seed;
            out.push(SuiteRun {
                name: sc.name.clone(),
                seed,
                report: run(&sc).report,
            });
        }
    }
    (out, t.elapsed())
}

fn c1_safety(runs: &[SuiteRun], elapsed: Duration) -> Outcome {
    let scenarios: BTreeSet<&str> = runs.iter().map(|r| r.name.as_str()).collect();
    let bad: Vec<String> = runs
        .iter()
        .filter(|r| !r.report.verdict.safety)
        .map(|r| {
            let v = r.report.verdict.first_violation.as_ref();
            format!("{} seed {}: {:?}", r.name, r.seed, v.map(|v| &v.detail))
        })
        .collect();
    let pass = bad.is_empty() && scenarios.len() >= 20 && elapsed < SUITE_BUDGET;
    outcome(
        pass,
        format!(
            "{} scenarios x {} seeds, {} violations, {:.1}s{}",
            scenarios.len(),
            SUITE_SEEDS,
            bad.len(),
            elapsed.as_secs_f64(),
            bad.first()
                .map_or(String::new(), |b| format!("; first: {b}"))
        ),
    )
}

fn c2_termination(runs: &[SuiteRun], extra: &[&Report]) -> Outcome {
    let reports = runs
        .iter()
        .map(|r| (&r.report, r.name.as_str(), r.seed))
        .chain(extra.iter().map(|r| (*r, r.scenario.as_str(), r.seed)));
    let mut total = 0;
    let mut bad = Vec::new();
    for (r, name, seed) in reports {
        total += 1;
        let v = &r.verdict;
        if !v.termination || v.incomplete_consumers > 0 || v.quiescent_at_ms.is_none() {
            bad.push(format!(
                "{name} seed {seed}: {} incomplete",
                v.incomplete_consumers
            ));
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "{total} runs, {} did not deliver every byte{}",
            bad.len(),
            bad.first()
                .map_or(String::new(), |b| format!("; first: {b}"))
        ),
    )
}

fn c3_interleavings() -> Outcome {
    let t = Instant::now();
    let mut notes = Vec::new();
    let mut pass = true;
    for (chunks, bytes, writers) in [(4, 4, 2), (2, 2, 4)] {
        let base = InterleaveConfig {
            chunks,
            chunk_bytes: bytes,
            writers,
            trials: INTERLEAVE_TRIALS,
            seed: 7,
            mutation: Mutation::None,
            max_faults: 3,
            exhaustive_limit: 0,
        };
        let r = check_interleavings(&base);
        pass &= r.passed() && r.trials == INTERLEAVE_TRIALS;
        notes.push(format!(
            "{chunks}x{bytes}x{writers}: {} trials {}",
            r.trials,
            r.counterexample
                .as_ref()
                .map_or("ok".into(), |c| c.failure.to_string())
        ));
        for m in [Mutation::NoChunkPrefix, Mutation::PublishBeforeAck] {
            let r = check_interleavings(&InterleaveConfig {
                mutation: m,
                ..base
            });
            let caught = r.counterexample.as_ref();
            pass &= caught.is_some();
            notes.push(format!(
                "{m:?} {}",
                caught.map_or("missed".into(), |c| format!(
                    "caught at trial {} ({} events)",
                    c.trial,
                    c.minimized.len()
                ))
            ));
        }
    }
    let elapsed = t.elapsed();
    pass &= elapsed < INTERLEAVE_BUDGET;
    outcome(
        pass,
        format!("{}; {:.1}s", notes.join(", "), elapsed.as_secs_f64()),
    )
}

fn c4_delayed_reads() -> Outcome {
    let mut rng = SimRng::new(4);
    let mut mismatches = 0u64;
    let mut trues = 0u64;
    let mut calls = 0u64;
    for _ in 0..ALGO_SEQUENCES {
        let max_delay = rng.between(0, 50);
        let mut ours = DelayedReadState::new(max_delay);
        let mut oracle = DelayedReadOracle::new(max_delay);
        let steps = rng.between(1, 12);
        let (mut time, mut cache, mut durable) = (0u64, 0u64, 0u64);
        for _ in 0..steps {
            time += rng.between(0, 30);
            // Both sizes mostly grow; occasionally either jumps or regresses.
            cache = match rng.below(8) {
                0 => rng.between(0, 200),
                _ => cache + rng.between(0, 20),
            };
            durable = match rng.below(8) {
                0 => rng.between(0, 200),
                _ => durable + rng.between(0, 20),
            };
            let a = ours.should_read_from_durable(cache, durable, time);
            let b = oracle.should_read(cache, durable, time);
            calls += 1;
            trues += u64::from(b);
            if a != b {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && trues > 0,
        format!("{ALGO_SEQUENCES} sequences, {calls} calls, {trues} durable reads, {mismatches} mismatches"),
    )
}

fn tree_depth_of(out: &RunOutput, stream: &str, cluster: u32) -> Option<u32> {
    let edges = out
        .trace
        .lines()
        .iter()
        .find_map(|l| match serde_json::from_str(l) {
            Ok(TraceRecord::Tree {
                stream: s, edges, ..
            }) if s == stream => Some(edges),
            _ => None,
        })?;
    let mut depth = 0;
    let mut cur = cluster;
    while let Some(&(p, _)) = edges.iter().find(|(_, c)| *c == cur) {
        cur = p;
        depth += 1;
    }
    Some(depth)
}

fn c5_steady_state(out: &RunOutput, sc: &Scenario) -> Outcome {
    let r = &out.report;
    let Some(w) = &r.stable_window else {
        return outcome(false, "no stable window in report");
    };
    let consumer = &sc.consumers[0];
    let stream = sc
        .streams
        .iter()
        .find(|s| s.name == consumer.stream)
        .expect("stream");
    let hops = tree_depth_of(out, &stream.name, consumer.cluster).unwrap_or(0);
    let link = sc.links.iter().map(|l| l.latency_ms).min().unwrap_or(0);
    let bound = stream.buffer_interval_ms
        + u64::from(hops) * (sc.tuning.reader.poll_ms + link)
        + consumer.poll_ms;
    let p99 = w.delivery_delay_ms.p99;
    let within = (p99 as f64 - bound as f64).abs() <= P99_TOLERANCE * bound as f64;
    outcome(
        w.fallback_reads == 0 && within && hops == 3 && w.messages > 0,
        format!(
            "{} messages in window, {} fallbacks, p99 {p99}ms vs bound {bound}ms ({hops} hops, +/-{:.0}%)",
            w.messages,
            w.fallback_reads,
            P99_TOLERANCE * 100.0
        ),
    )
}

/// Nonzero fallbacks within two seconds of `at_ms`, then zero from
/// `RECOVERY_S` seconds later until the end of production.
fn burst_then_zero(r: &Report, at_ms: u64) -> (bool, u64, Option<usize>) {
    let tl = &r.fallback_timeline;
    let at = (at_ms / 1000) as usize;
    let end = (r.duration_ms / 1000) as usize;
    let burst: u64 = tl.iter().skip(at).take(2).sum();
    let settled = at + RECOVERY_S;
    let last_nonzero = tl
        .iter()
        .enumerate()
        .take(end)
        .filter(|&(_, &n)| n > 0)
        .map(|(i, _)| i)
        .next_back();
    let zero_after = tl.iter().take(end).skip(settled).all(|&n| n == 0);
    (burst > 0 && zero_after, burst, last_nonzero)
}

fn c6_disruptions(
    spike: &Report,
    two: &Report,
    one: &Report,
    spike_at: u64,
    kill_at: u64,
) -> Outcome {
    let (ok_spike, b1, l1) = burst_then_zero(spike, spike_at);
    let (ok_two, b2, l2) = burst_then_zero(two, kill_at);
    let one_failures: u64 = one
        .clusters
        .values()
        .map(|c| c.consumer_cache_failures)
        .sum();
    let one_fallbacks = fallbacks(one);
    let ok_one = one_failures == 0 && one_fallbacks == 0 && one.ops.put_failures == 0;
    outcome(
        ok_spike && ok_two && ok_one && spike.verdict.pass && two.verdict.pass && one.verdict.pass,
        format!(
            "spike burst {b1} (last fallback second {l1:?}), 2-replica kill burst {b2} (last {l2:?}), \
             1-replica kill: {one_fallbacks} fallbacks {one_failures} cache read failures {} put failures",
            one.ops.put_failures
        ),
    )
}

fn c7_copy_tree() -> Outcome {
    let cfg = TreeConfig {
        alpha_depth: 0.0,
        beta_fanout: 0.0,
        ..TreeConfig::default()
    };
    let mut rng = SimRng::new(7);
    let (mut agree, mut unreachable, mut bad) = (0, 0, Vec::new());
    for i in 0..TREE_GRAPHS {
        let n = rng.between(2, 7) as u32;
        let g = random_graph(&mut rng, n, 0.35, 0.9);
        let src = ClusterId(rng.below(u64::from(n)) as u32);
        let dests: BTreeSet<ClusterId> = g.nodes().filter(|&x| x != src).collect();
        let want = min_tree_cost_exhaustive(&g, src, cfg.max_depth);
        match (build_tree(&g, src, &dests, &cfg), want) {
            (Ok(t), Some(w)) if (t.total_cost(&g) - w).abs() < 1e-9 && t.max_depth() <= 4 => {
                agree += 1
            }
            (Err(TreeError::Unreachable(_)), None) => unreachable += 1,
            (got, w) => bad.push(format!(
                "graph {i}: built {:?}, minimum {w:?}",
                got.map(|t| (t.total_cost(&g), t.max_depth()))
            )),
        }
    }

    // Outage on a mid-tree relay: it should come back as a leaf.
    let mut g = ClusterGraph::from_edges([
        (0, 1, 1.0),
        (0, 2, 2.0),
        (0, 3, 4.0),
        (1, 2, 1.0),
        (1, 3, 3.0),
        (2, 3, 5.0),
    ]);
    let all: BTreeSet<ClusterId> = (1..4).map(ClusterId).collect();
    let t = build_tree(&g, ClusterId(0), &all, &cfg).expect("tree");
    let before = t.fanout(ClusterId(1));
    let t2 = penalize_and_rebuild(&t, &mut g, &[ClusterId(1)], &[], &cfg).expect("rebuild");
    let demoted = before > 0 && t2.contains(ClusterId(1)) && t2.fanout(ClusterId(1)) == 0;
    g.clear_penalties();
    let restored = build_tree(&g, ClusterId(0), &all, &cfg).is_ok_and(|t3| t3 == t);

    outcome(
        bad.is_empty() && demoted && restored,
        format!(
            "{agree} graphs match the enumerated minimum, {unreachable} agree no depth-4 tree exists, {} mismatches; \
             outage relay fanout {before} -> {} (restored after clearing: {restored}){}",
            bad.len(),
            t2.fanout(ClusterId(1)),
            bad.first().map_or(String::new(), |b| format!("; first: {b}"))
        ),
    )
}

fn c8_chunks() -> Outcome {
    let mut rng = SimRng::new(8);
    let (mut ok, mut bad) = (0, Vec::new());
    for i in 0..CHUNK_PATTERNS {
        let r = run_chunk_pattern(&mut rng, false);
        match (r.reassembled, r.prefix_violation) {
            (true, None) => ok += 1,
            (re, v) => bad.push(format!("pattern {i}: reassembled {re}, {v:?}")),
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "{ok}/{CHUNK_PATTERNS} patterns reassemble with every intermediate chunk a prefix{}",
            bad.first()
                .map_or(String::new(), |b| format!("; first: {b}"))
        ),
    )
}

fn c9_determinism(runs: &[SuiteRun], exp: &[(&Scenario, &Report)]) -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    let firsts = runs
        .iter()
        .filter(|r| r.seed == 0)
        .map(|r| (r.name.clone(), r.report.clone()));
    let suite: Vec<Scenario> = suite();
    let mut pairs: Vec<(Scenario, Report)> = firsts
        .map(|(name, rep)| {
            let mut sc = suite
                .iter()
                .find(|s| s.name == name)
                .expect("scenario")
                .clone();
            sc.seed = 0;
            (sc, rep)
        })
        .collect();
    pairs.extend(exp.iter().map(|(s, r)| ((*s).clone(), (*r).clone())));
    for (sc, first) in &pairs {
        let again = run(sc).report;
        checked += 1;
        if again.to_json() != first.to_json() {
            bad.push(sc.name.clone());
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "{checked} scenarios re-run, {} reports differ {:?}",
            bad.len(),
            bad
        ),
    )
}

fn line(n: u32, name: &str, o: &Outcome) -> bool {
    println!(
        "{} {n}. {name}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

fn main() {
    let (runs, suite_time) = run_suite();

    let steady = load(&scenarios_dir().join("regimes/steady_state.json"));
    let spike_sc = load(&scenarios_dir().join("regimes/consumer_spike.json"));
    let two = load(&scenarios_dir().join("regimes/kill_two_replicas.json"));
    let one = load(&scenarios_dir().join("regimes/kill_one_replica.json"));
    let out_steady = run(&steady);
    let r_spike = run(&spike_sc).report;
    let r_two = run(&two).report;
    let r_one = run(&one).report;
    let spike_at = spike_sc
        .consumers
        .iter()
        .map(|c| c.start_ms)
        .max()
        .unwrap_or(0);
    let kill_at = two.faults.first().map_or(0, |f| f.at_ms);

    let results = [
        line(1, "safety", &c1_safety(&runs, suite_time)),
        line(
            2,
            "termination",
            &c2_termination(&runs, &[&out_steady.report, &r_spike, &r_two, &r_one]),
        ),
        line(3, "interleavings", &c3_interleavings()),
        line(4, "delayed durable reads", &c4_delayed_reads()),
        line(
            5,
            "steady-state delivery",
            &c5_steady_state(&out_steady, &steady),
        ),
        line(
            6,
            "disruption recovery",
            &c6_disruptions(&r_spike, &r_two, &r_one, spike_at, kill_at),
        ),
        line(7, "copy tree", &c7_copy_tree()),
        line(8, "chunk round-trip", &c8_chunks()),
        line(
            9,
            "determinism",
            &c9_determinism(
                &runs,
                &[
                    (&steady, &out_steady.report),
                    (&spike_sc, &r_spike),
                    (&two, &r_two),
                    (&one, &r_one),
                ],
            ),
        ),
    ];
    let failed = results.iter().filter(|&&p| !p).count();
    println!(
        "{} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
