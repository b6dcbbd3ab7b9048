//! Independent reference implementations used by the acceptance suite.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use filecast::copy_tree::ClusterGraph;
use filecast::file_layer::{ChunkGeometry, PendingPut, ShadowWriter};
use filecast::simnet::{ClusterId, SimRng};

/// Line-for-line transliteration of the delayed durable-read procedure.
pub struct DelayedReadOracle {
    pub max_delay: u64,
    size_rec: VecDeque<(u64, u64)>,
}

impl DelayedReadOracle {
    pub fn new(max_delay: u64) -> Self {
        Self {
            max_delay,
            size_rec: VecDeque::new(),
        }
    }

    pub fn should_read(&mut self, cache_size: u64, durable_size: u64, time: u64) -> bool {
        self.size_rec.push_back((time, durable_size));
        while !self.size_rec.is_empty() {
            if self.size_rec.front().unwrap().1 > cache_size {
                break;
            }
            self.size_rec.pop_front();
        }
        if self.size_rec.is_empty() {
            return false;
        }
        if time > self.size_rec.front().unwrap().0 + self.max_delay {
            self.size_rec.clear();
            return true;
        }
        false
    }
}

/// Decode a Prüfer sequence over nodes `0..n` into an edge list.
fn prufer_edges(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &x in seq {
        degree[x] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &x in seq {
        let leaf = (0..n).find(|&i| degree[i] == 1).unwrap();
        edges.push((leaf, x));
        degree[leaf] -= 1;
        degree[x] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

fn depth_from(root: usize, n: usize, edges: &[(usize, usize)]) -> u32 {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut depth = vec![u32::MAX; n];
    depth[root] = 0;
    let mut q = VecDeque::from([root]);
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if depth[v] == u32::MAX {
                depth[v] = depth[u] + 1;
                q.push_back(v);
            }
        }
    }
    depth.into_iter().max().unwrap_or(0)
}

/// Cheapest spanning tree of `g` rooted at `source` with every node within
/// `max_depth` hops, found by enumerating all labeled trees. `None` if no
/// spanning tree fits.
pub fn min_tree_cost_exhaustive(
    g: &ClusterGraph,
    source: ClusterId,
    max_depth: u32,
) -> Option<f64> {
    let nodes: Vec<ClusterId> = g.nodes().collect();
    let n = nodes.len();
    let root = nodes.iter().position(|&c| c == source)?;
    if n == 1 {
        return Some(0.0);
    }
    if n == 2 {
        return g.cost(nodes[0], nodes[1]);
    }
    let mut best: Option<f64> = None;
    let mut seq = vec![0usize; n - 2];
    loop {
        let edges = prufer_edges(&seq, n);
        let cost: Option<f64> = edges.iter().map(|&(a, b)| g.cost(nodes[a], nodes[b])).sum();
        if let Some(c) = cost {
            if best.is_none_or(|b| c < b) && depth_from(root, n, &edges) <= max_depth {
                best = Some(c);
            }
        }
        // Next sequence in base-n counting order.
        let mut i = 0;
        loop {
            if i == seq.len() {
                return best;
            }
            seq[i] += 1;
            if seq[i] < n {
                break;
            }
            seq[i] = 0;
            i += 1;
        }
    }
}

/// Random graph on `n` nodes with integer costs; connected with probability
/// `p_connect`, otherwise possibly split.
pub fn random_graph(rng: &mut SimRng, n: u32, p_edge: f64, p_connect: f64) -> ClusterGraph {
    let mut g = ClusterGraph::new();
    for i in 0..n {
        g.add_node(ClusterId(i));
    }
    let mut order: Vec<u32> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut seen = BTreeSet::new();
    if rng.chance(p_connect) {
        for w in order.windows(2) {
            let (a, b) = (w[0].min(w[1]), w[0].max(w[1]));
            seen.insert((a, b));
            g.add_edge(ClusterId(a), ClusterId(b), rng.between(1, 20) as f64);
        }
    }
    for a in 0..n {
        for b in a + 1..n {
            if !seen.contains(&(a, b)) && rng.chance(p_edge) {
                g.add_edge(ClusterId(a), ClusterId(b), rng.between(1, 20) as f64);
            }
        }
    }
    g
}

/// Outcome of one random write pattern through a shadow writer.
pub struct ChunkPatternResult {
    pub reassembled: bool,
    /// First intermediate state where a stored chunk was not a prefix of the
    /// true chunk, or a published byte was not stored.
    pub prefix_violation: Option<String>,
}

/// Feed `data` to a shadow writer in random out-of-order, overlapping
/// pieces; complete puts in random order, some failing. Failed puts may or
/// may not reach the store. After every step each stored chunk must be a
/// prefix of the true chunk and the publishable length must be readable.
pub fn run_chunk_pattern(rng: &mut SimRng, no_chunk_prefix: bool) -> ChunkPatternResult {
    let cs = rng.between(1, 16);
    let geom = ChunkGeometry::new(cs);
    let len = rng.between(0, 12 * cs);
    let data: Vec<u8> = (0..len).map(|_| rng.below(256) as u8).collect();

    let mut pieces = Vec::new();
    let mut pos = 0;
    while pos < len {
        let n = rng.between(1, 2 * cs).min(len - pos);
        pieces.push((pos, n));
        if rng.chance(0.2) {
            // Overlapping retransmit of part of this piece.
            let back = rng.below(n + 1);
            pieces.push((pos + back, n - back));
        }
        pos += n;
    }
    // Local reordering: swap some neighbors.
    for i in 1..pieces.len() {
        if rng.chance(0.3) {
            pieces.swap(i - 1, i);
        }
    }

    let mut w = ShadowWriter::new(geom, 0);
    if no_chunk_prefix {
        w.disable_write_from_chunk_start();
    }
    let mut store: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
    let mut inflight: Vec<PendingPut> = Vec::new();
    let mut violation = None;
    let mut next_piece = 0;

    let check = |store: &BTreeMap<u64, Vec<u8>>, w: &ShadowWriter| -> Option<String> {
        for (&seq, v) in store {
            let lo = geom.chunk_start(seq) as usize;
            let truth = &data[lo..(lo + cs as usize).min(data.len())];
            if v.len() > truth.len() || v[..] != truth[..v.len()] {
                return Some(format!(
                    "chunk {seq} holds {v:?}, not a prefix of {truth:?}"
                ));
            }
        }
        let published = w.publishable();
        for p in 0..published {
            let seq = geom.seq(p);
            let off = geom.offset_in_chunk(p) as usize;
            if store.get(&seq).is_none_or(|v| v.len() <= off) {
                return Some(format!("published {published} but byte {p} is not stored"));
            }
        }
        None
    };

    loop {
        let can_feed = next_piece < pieces.len();
        if !can_feed && inflight.is_empty() {
            break;
        }
        if can_feed && (inflight.is_empty() || rng.chance(0.4)) {
            let (off, n) = pieces[next_piece];
            next_piece += 1;
            let bytes = &data[off as usize..(off + n) as usize];
            inflight.extend(w.receive(off, bytes));
        } else {
            let i = rng.below(inflight.len() as u64) as usize;
            let p = inflight.swap_remove(i);
            let ok = !rng.chance(0.15);
            if ok || rng.chance(0.5) {
                store.insert(p.seq, p.bytes.to_vec());
            }
            inflight.extend(w.on_put_done(p.seq, p.id, ok));
        }
        if violation.is_none() {
            violation = check(&store, &w);
        }
    }

    let mut out = Vec::new();
    for seq in 0..len.div_ceil(cs) {
        out.extend_from_slice(store.get(&seq).map_or(&[][..], |v| &v[..]));
    }
    ChunkPatternResult {
        reassembled: out == data && w.publishable() == len && w.is_idle(),
        prefix_violation: violation,
    }
}
