//! The reference oracles must reject known-bad inputs.

mod common;

use filecast::copy_tree::ClusterGraph;
use filecast::simnet::{ClusterId, SimRng};

use common::{min_tree_cost_exhaustive, run_chunk_pattern, DelayedReadOracle};

#[test]
fn chunk_oracle_flags_writes_without_chunk_prefix() {
    let mut rng = SimRng::new(1);
    let flagged = (0..500)
        .map(|_| run_chunk_pattern(&mut rng, true))
        .filter(|r| r.prefix_violation.is_some() || !r.reassembled)
        .count();
    assert!(flagged > 0);
}

#[test]
fn enumeration_respects_depth_bound() {
    let line = ClusterGraph::from_edges((0..5).map(|i| (i, i + 1, 1.0)).chain([(0, 5, 10.0)]));
    assert_eq!(min_tree_cost_exhaustive(&line, ClusterId(0), 10), Some(5.0));
    // Depth 4 forces the expensive shortcut.
    assert_eq!(min_tree_cost_exhaustive(&line, ClusterId(0), 4), Some(14.0));
    assert_eq!(min_tree_cost_exhaustive(&line, ClusterId(0), 2), None);
}

#[test]
fn delayed_read_oracle_follows_the_queue() {
    let mut o = DelayedReadOracle::new(1000);
    assert!(!o.should_read(50, 100, 0));
    assert!(!o.should_read(50, 120, 1000));
    assert!(o.should_read(50, 120, 1001));
    assert!(!o.should_read(200, 120, 1002));
}
