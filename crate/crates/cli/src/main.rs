use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use filecast::copy_tree::{build_tree_partial, ClusterGraph, GraphSpec, TreeConfig};
use filecast::harness::interleave::{check_interleavings, InterleaveConfig, Mutation};
use filecast::harness::{replay, run_scenario, Scenario};
use filecast::simnet::ClusterId;

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "filecast",
    version,
    about = "Deterministic file-delivery simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and check every consumer against the producer.
    Run {
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write the NDJSON event trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Explore interleavings of dueling cache writers on one file.
    CheckInterleavings {
        #[arg(long, default_value_t = 4)]
        chunks: u64,
        #[arg(long, default_value_t = 4)]
        chunk_bytes: u64,
        #[arg(long, default_value_t = 2)]
        writers: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = MutationArg::None)]
        mutation: MutationArg,
        /// Dropped replica writes plus evictions per trial.
        #[arg(long, default_value_t = 3)]
        max_faults: u32,
        /// Also walk every reachable state if there are at most this many.
        #[arg(long, default_value_t = 0)]
        exhaustive_limit: u64,
    },
    /// Build a copy tree over a weighted cluster graph.
    BuildTree {
        graph: PathBuf,
        #[arg(long)]
        source: u32,
        /// Destination clusters; all other graph nodes when omitted.
        #[arg(long, value_delimiter = ',')]
        dests: Vec<u32>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        max_depth: Option<u32>,
    },
    /// Re-run the scenario embedded in a trace and compare.
    Replay { trace: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum MutationArg {
    None,
    NoChunkPrefix,
    PublishBeforeAck,
}

impl From<MutationArg> for Mutation {
    fn from(m: MutationArg) -> Self {
        match m {
            MutationArg::None => Mutation::None,
            MutationArg::NoChunkPrefix => Mutation::NoChunkPrefix,
            MutationArg::PublishBeforeAck => Mutation::PublishBeforeAck,
        }
    }
}

fn read(path: &Path) -> Result<String, ExitCode> {
    fs::read_to_string(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })
}

fn write(path: &Path, text: &str) -> Result<(), ExitCode> {
    fs::write(path, text).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })
}

fn cmd_run(
    path: &Path,
    seed: Option<u64>,
    report: Option<&Path>,
    trace: Option<&Path>,
) -> Result<ExitCode, ExitCode> {
    let text = read(path)?;
    let mut sc = Scenario::from_json(&text).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let out = run_scenario(&sc).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })?;
    let json = out.report.to_json();
    match report {
        Some(p) => write(p, &json)?,
        None => println!("{json}"),
    }
    if let Some(p) = trace {
        write(p, &out.trace.to_ndjson())?;
    }
    let v = &out.report.verdict;
    if v.pass {
        eprintln!("PASS {} seed {}", sc.name, sc.seed);
        Ok(ExitCode::SUCCESS)
    } else {
        match &v.first_violation {
            Some(x) => eprintln!(
                "FAIL {} seed {}: {} (stream {} shard {} consumer {} offset {}, trace line {})",
                sc.name, sc.seed, x.detail, x.stream, x.shard, x.consumer, x.offset, x.trace_line
            ),
            None => eprintln!(
                "FAIL {} seed {}: {} consumers incomplete",
                sc.name, sc.seed, v.incomplete_consumers
            ),
        }
        Ok(ExitCode::from(EXIT_FAIL))
    }
}

fn cmd_check(cfg: InterleaveConfig) -> ExitCode {
    let r = check_interleavings(&cfg);
    println!(
        "trials {} events {} consumer reads {} clobbers {}",
        r.trials, r.events, r.consumer_reads, r.clobbers
    );
    if let Some(n) = r.exhaustive_nodes {
        println!("exhaustive: {n} states");
    }
    match r.counterexample {
        None => {
            println!("PASS");
            ExitCode::SUCCESS
        }
        Some(c) => {
            println!("FAIL trial {}: {}", c.trial, c.failure);
            println!(
                "minimized counterexample ({} of {} events):",
                c.minimized.len(),
                c.events.len()
            );
            for (i, e) in c.minimized.iter().enumerate() {
                println!("  {:>3}. {e}", i + 1);
            }
            ExitCode::from(EXIT_FAIL)
        }
    }
}

fn cmd_build_tree(
    path: &Path,
    source: u32,
    dests: &[u32],
    cfg: TreeConfig,
) -> Result<ExitCode, ExitCode> {
    let text = read(path)?;
    let spec: GraphSpec = serde_json::from_str(&text).map_err(|e| {
        eprintln!(
            "{}: line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        );
        ExitCode::from(EXIT_CONFIG)
    })?;
    let g = ClusterGraph::from_spec(&spec);
    let source = ClusterId(source);
    let dests: BTreeSet<ClusterId> = if dests.is_empty() {
        g.nodes().filter(|&n| n != source).collect()
    } else {
        dests.iter().map(|&d| ClusterId(d)).collect()
    };
    let t = build_tree_partial(&g, source, &dests, &cfg).map_err(|e| {
        eprintln!("{e}");
        ExitCode::from(EXIT_CONFIG)
    })?;
    let out = serde_json::json!({
        "tree": t,
        "edges": t.edges(),
        "total_cost": t.total_cost(&g),
        "score": t.score(&g, &cfg),
        "max_depth": t.max_depth(),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&out).expect("tree serializes")
    );
    if t.detached.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "unreachable within depth {}: {:?}",
            cfg.max_depth, t.detached
        );
        Ok(ExitCode::from(EXIT_FAIL))
    }
}

fn cmd_replay(path: &Path) -> Result<ExitCode, ExitCode> {
    let text = read(path)?;
    let r = replay(&text).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })?;
    match r.first_difference {
        None => {
            println!("identical: {} records", r.records);
            Ok(ExitCode::SUCCESS)
        }
        Some(line) => {
            println!("traces differ at line {line}");
            Ok(ExitCode::from(EXIT_FAIL))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            report,
            trace,
        } => cmd_run(&scenario, seed, report.as_deref(), trace.as_deref()),
        Cmd::CheckInterleavings {
            chunks,
            chunk_bytes,
            writers,
            trials,
            seed,
            mutation,
            max_faults,
            exhaustive_limit,
        } => Ok(cmd_check(InterleaveConfig {
            chunks,
            chunk_bytes,
            writers,
            trials,
            seed,
            mutation: mutation.into(),
            max_faults,
            exhaustive_limit,
        })),
        Cmd::BuildTree {
            graph,
            source,
            dests,
            alpha,
            beta,
            max_depth,
        } => {
            let d = TreeConfig::default();
            let cfg = TreeConfig {
                alpha_depth: alpha.unwrap_or(d.alpha_depth),
                beta_fanout: beta.unwrap_or(d.beta_fanout),
                max_depth: max_depth.unwrap_or(d.max_depth),
                ..d
            };
            cmd_build_tree(&graph, source, &dests, cfg)
        }
        Cmd::Replay { trace } => cmd_replay(&trace),
    };
    res.unwrap_or_else(|code| code)
}
