//! Deterministic end-to-end harness: scenario files in, reports and
//! replayable traces out.

pub mod interleave;
pub mod metrics;
pub mod monitor;
pub mod scenario;
pub mod trace;
mod world;

pub use metrics::{Percentiles, Report, Verdict, Violation};
pub use scenario::{ConfigError, Scenario};
pub use trace::{Trace, TraceRecord};
pub use world::RunOutput;

/// Run a scenario to quiescence or its drain limit.
pub fn run_scenario(sc: &Scenario) -> Result<RunOutput, ConfigError> {
    let w = world::World::new(sc).map_err(|message| ConfigError {
        path: String::new(),
        line: None,
        column: None,
        message,
    })?;
    Ok(w.run())
}

/// Outcome of re-running the scenario embedded in a trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    pub identical: bool,
    pub first_difference: Option<usize>,
    pub records: u64,
}

/// Re-run the trace's scenario and compare the new trace line by line.
pub fn replay(ndjson: &str) -> Result<ReplayOutcome, String> {
    let sc = trace::scenario_of(ndjson)?;
    let out = run_scenario(&sc).map_err(|e| e.to_string())?;
    let fresh = out.trace.to_ndjson();
    let diff = trace::first_difference(ndjson, &fresh);
    Ok(ReplayOutcome {
        identical: diff.is_none(),
        first_difference: diff,
        records: out.trace.len(),
    })
}
