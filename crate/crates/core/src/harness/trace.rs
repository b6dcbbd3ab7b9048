//! Newline-delimited JSON event traces.
//!
//! The first record embeds the scenario, so a trace alone is enough to
//! replay a run and compare it record by record.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scenario::Scenario;
use crate::scheduler::AssignmentChange;
use crate::transport::Lifecycle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceRecord {
    Header {
        scenario: Box<Scenario>,
    },
    Op(Lifecycle),
    Assign(AssignmentChange),
    Fault {
        at: u64,
        detail: String,
    },
    Tree {
        at: u64,
        stream: String,
        edges: Vec<(u32, u32)>,
    },
    Scale {
        at: u64,
        cluster: u32,
        cache: String,
        replicas: usize,
    },
    Violation {
        at: u64,
        detail: String,
    },
    Summary {
        at: u64,
        delivered: u64,
        produced: u64,
        fallback_reads: u64,
    },
    Footer {
        end: u64,
        pass: bool,
    },
}

#[derive(Debug, Default)]
pub struct Trace {
    lines: Vec<String>,
    hasher: Sha256,
}

impl Trace {
    pub fn push(&mut self, rec: &TraceRecord) -> u64 {
        let line = serde_json::to_string(rec).expect("trace record serializes");
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.lines.push(line);
        self.lines.len() as u64
    }

    pub fn len(&self) -> u64 {
        self.lines.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn digest(&self) -> String {
        hex(&self.hasher.clone().finalize())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

pub fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

/// Scenario embedded in a trace's header line.
pub fn scenario_of(ndjson: &str) -> Result<Scenario, String> {
    let first = ndjson.lines().next().ok_or("empty trace")?;
    match serde_json::from_str::<TraceRecord>(first) {
        Ok(TraceRecord::Header { scenario }) => Ok(*scenario),
        Ok(_) => Err("first trace record is not a header".into()),
        Err(e) => Err(format!("line 1: {e}")),
    }
}

/// First line (1-based) where two traces differ, if any.
pub fn first_difference(a: &str, b: &str) -> Option<usize> {
    let mut la = a.lines();
    let mut lb = b.lines();
    let mut n = 0;
    loop {
        n += 1;
        match (la.next(), lb.next()) {
            (None, None) => return None,
            (x, y) if x != y => return Some(n),
            _ => {}
        }
    }
}
