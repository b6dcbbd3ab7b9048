//! Per-stream distribution tree over the cluster graph.
//!
//! Prim's algorithm grows the tree from the source. Candidate edge `(u, v)`
//! with `u` in the tree weighs
//!
//! ```text
//! cost(u, v) + edge_penalty(u, v) + node_penalty(u)
//!     + alpha * depth(u) + beta * fanout(u)
//! ```
//!
//! where `fanout(u)` is the number of children `u` has so far. Edges that
//! would put `v` deeper than `max_depth` are not candidates. Summed over a
//! finished tree these weights give a static score (see [`CopyTree::score`]);
//! when the depth bound prunes the greedy result, small graphs are also
//! solved exactly against that score and the better tree wins.
//!
//! Node penalties apply only when the node takes a child, so penalized nodes
//! drift to the leaves. The source is never penalized as a parent.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::ClusterId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub a: ClusterId,
    pub b: ClusterId,
    pub cost: f64,
}

fn norm(a: ClusterId, b: ClusterId) -> (ClusterId, ClusterId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// JSON form of a graph: node list plus weighted edges.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    #[serde(default)]
    pub nodes: Vec<ClusterId>,
    pub edges: Vec<GraphEdge>,
}

/// Undirected cluster graph with health state and outage penalties.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterGraph {
    nodes: BTreeSet<ClusterId>,
    edges: BTreeMap<(ClusterId, ClusterId), f64>,
    down_nodes: BTreeSet<ClusterId>,
    down_edges: BTreeSet<(ClusterId, ClusterId)>,
    node_penalty: BTreeMap<ClusterId, f64>,
    edge_penalty: BTreeMap<(ClusterId, ClusterId), f64>,
}

impl ClusterGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_edges(edges: impl IntoIterator<Item = (u32, u32, f64)>) -> Self {
        let mut g = Self::new();
        for (a, b, c) in edges {
            g.add_edge(ClusterId(a), ClusterId(b), c);
        }
        g
    }

    pub fn from_spec(spec: &GraphSpec) -> Self {
        let mut g = Self::new();
        for &n in &spec.nodes {
            g.add_node(n);
        }
        for e in &spec.edges {
            g.add_edge(e.a, e.b, e.cost);
        }
        g
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            nodes: self.nodes().collect(),
            edges: self.edges().collect(),
        }
    }

    pub fn add_node(&mut self, n: ClusterId) {
        self.nodes.insert(n);
    }

    pub fn add_edge(&mut self, a: ClusterId, b: ClusterId, cost: f64) {
        assert!(
            cost >= 0.0 && a != b,
            "edges need distinct endpoints and nonnegative cost"
        );
        self.nodes.insert(a);
        self.nodes.insert(b);
        self.edges.insert(norm(a, b), cost);
    }

    pub fn nodes(&self) -> impl Iterator<Item = ClusterId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = GraphEdge> + '_ {
        self.edges
            .iter()
            .map(|(&(a, b), &cost)| GraphEdge { a, b, cost })
    }

    pub fn cost(&self, a: ClusterId, b: ClusterId) -> Option<f64> {
        self.edges.get(&norm(a, b)).copied()
    }

    pub fn max_cost(&self) -> f64 {
        self.edges.values().copied().fold(0.0, f64::max)
    }

    pub fn neighbors(&self, n: ClusterId) -> impl Iterator<Item = ClusterId> + '_ {
        self.edges.keys().filter_map(move |&(a, b)| {
            if a == n {
                Some(b)
            } else if b == n {
                Some(a)
            } else {
                None
            }
        })
    }

    pub fn set_node_up(&mut self, n: ClusterId, up: bool) {
        if up {
            self.down_nodes.remove(&n);
        } else {
            self.down_nodes.insert(n);
        }
    }

    pub fn set_edge_up(&mut self, a: ClusterId, b: ClusterId, up: bool) {
        if up {
            self.down_edges.remove(&norm(a, b));
        } else {
            self.down_edges.insert(norm(a, b));
        }
    }

    pub fn node_up(&self, n: ClusterId) -> bool {
        self.nodes.contains(&n) && !self.down_nodes.contains(&n)
    }

    /// Edge exists, is up, and both ends are up.
    pub fn usable(&self, a: ClusterId, b: ClusterId) -> bool {
        self.edges.contains_key(&norm(a, b))
            && !self.down_edges.contains(&norm(a, b))
            && self.node_up(a)
            && self.node_up(b)
    }

    pub fn node_penalty(&self, n: ClusterId) -> f64 {
        self.node_penalty.get(&n).copied().unwrap_or(0.0)
    }

    pub fn edge_penalty(&self, a: ClusterId, b: ClusterId) -> f64 {
        self.edge_penalty.get(&norm(a, b)).copied().unwrap_or(0.0)
    }

    pub fn clear_penalties(&mut self) {
        self.node_penalty.clear();
        self.edge_penalty.clear();
    }

    /// BFS outward from each outage node, adding `p0 / 2^d` to every node at
    /// distance `d <= radius` and half that to the links touching it. Outage
    /// edges get the full `p0`.
    pub fn penalize(
        &mut self,
        outage_nodes: &[ClusterId],
        outage_edges: &[(ClusterId, ClusterId)],
        p0: f64,
        radius: u32,
    ) {
        for &start in outage_nodes {
            let mut dist: BTreeMap<ClusterId, u32> = BTreeMap::new();
            let mut q = VecDeque::new();
            dist.insert(start, 0);
            q.push_back(start);
            while let Some(u) = q.pop_front() {
                let d = dist[&u];
                if d >= radius {
                    continue;
                }
                let next: Vec<ClusterId> = self.neighbors(u).collect();
                for v in next {
                    if let Entry::Vacant(e) = dist.entry(v) {
                        e.insert(d + 1);
                        q.push_back(v);
                    }
                }
            }
            for (&n, &d) in &dist {
                let p = p0 / f64::from(1u32 << d.min(31));
                *self.node_penalty.entry(n).or_default() += p;
                let incident: Vec<(ClusterId, ClusterId)> =
                    self.neighbors(n).map(|m| norm(n, m)).collect();
                for e in incident {
                    *self.edge_penalty.entry(e).or_default() += p / 2.0;
                }
            }
        }
        for &(a, b) in outage_edges {
            *self.edge_penalty.entry(norm(a, b)).or_default() += p0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeConfig {
    pub alpha_depth: f64,
    pub beta_fanout: f64,
    pub max_depth: u32,
    /// Outage penalty base as a multiple of the largest edge cost.
    pub penalty_factor: f64,
    pub penalty_radius: u32,
    /// Largest node count for the exact fallback search.
    pub exact_search_limit: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            alpha_depth: 0.01,
            beta_fanout: 0.01,
            max_depth: 4,
            penalty_factor: 10.0,
            penalty_radius: 1,
            exact_search_limit: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeMode {
    Regular,
    RateLimitedLeaf,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("source {0} is not a healthy graph node")]
    BadSource(ClusterId),
    #[error("unreachable within depth bound: {0:?}")]
    Unreachable(Vec<ClusterId>),
    #[error("no eligible parent for {0}")]
    NoEligibleParent(ClusterId),
    #[error("{0} is not in the tree")]
    NotInTree(ClusterId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyTree {
    pub root: ClusterId,
    pub parent: BTreeMap<ClusterId, ClusterId>,
    pub mode: BTreeMap<ClusterId, NodeMode>,
    /// Destinations that could not be attached.
    #[serde(default)]
    pub detached: BTreeSet<ClusterId>,
}

impl CopyTree {
    pub fn nodes(&self) -> impl Iterator<Item = ClusterId> + '_ {
        std::iter::once(self.root).chain(self.parent.keys().copied())
    }

    pub fn contains(&self, n: ClusterId) -> bool {
        n == self.root || self.parent.contains_key(&n)
    }

    pub fn children(&self, n: ClusterId) -> Vec<ClusterId> {
        self.parent
            .iter()
            .filter(|&(_, &p)| p == n)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn fanout(&self, n: ClusterId) -> usize {
        self.parent.values().filter(|&&p| p == n).count()
    }

    pub fn depth(&self, n: ClusterId) -> Option<u32> {
        let mut d = 0;
        let mut cur = n;
        while cur != self.root {
            cur = *self.parent.get(&cur)?;
            d += 1;
            if d as usize > self.parent.len() {
                return None;
            }
        }
        Some(d)
    }

    pub fn max_depth(&self) -> u32 {
        self.nodes()
            .filter_map(|n| self.depth(n))
            .max()
            .unwrap_or(0)
    }

    /// Root-to-node path, inclusive.
    pub fn path(&self, n: ClusterId) -> Option<Vec<ClusterId>> {
        let mut out = vec![n];
        let mut cur = n;
        while cur != self.root {
            cur = *self.parent.get(&cur)?;
            out.push(cur);
            if out.len() > self.parent.len() + 1 {
                return None;
            }
        }
        out.reverse();
        Some(out)
    }

    /// Parent-to-child edges.
    pub fn edges(&self) -> Vec<(ClusterId, ClusterId)> {
        self.parent.iter().map(|(&c, &p)| (p, c)).collect()
    }

    pub fn mode(&self, n: ClusterId) -> NodeMode {
        self.mode.get(&n).copied().unwrap_or(NodeMode::Regular)
    }

    pub fn total_cost(&self, g: &ClusterGraph) -> f64 {
        self.edges()
            .iter()
            .map(|&(p, c)| g.cost(p, c).unwrap_or(f64::INFINITY))
            .sum()
    }

    /// Sum of the Prim weights of this tree's edges, in closed form.
    pub fn score(&self, g: &ClusterGraph, cfg: &TreeConfig) -> f64 {
        score_parents(g, cfg, self.root, &self.parent)
    }

    /// Structural validity: acyclic, rooted, within depth, leaves respected.
    pub fn check(&self, max_depth: u32) -> Result<(), String> {
        for n in self.nodes() {
            let d = self
                .depth(n)
                .ok_or_else(|| format!("{n} not connected to root"))?;
            if d > max_depth {
                return Err(format!("{n} at depth {d}"));
            }
            if self.mode(n) == NodeMode::RateLimitedLeaf && self.fanout(n) > 0 {
                return Err(format!("rate-limited leaf {n} has children"));
            }
        }
        Ok(())
    }

    pub fn promote(&mut self, n: ClusterId) -> Result<(), TreeError> {
        if !self.contains(n) {
            return Err(TreeError::NotInTree(n));
        }
        self.mode.insert(n, NodeMode::Regular);
        Ok(())
    }
}

fn score_parents(
    g: &ClusterGraph,
    cfg: &TreeConfig,
    root: ClusterId,
    parent: &BTreeMap<ClusterId, ClusterId>,
) -> f64 {
    let mut fan: BTreeMap<ClusterId, usize> = BTreeMap::new();
    let mut s = 0.0;
    for (&c, &p) in parent {
        s += g.cost(p, c).unwrap_or(f64::INFINITY) + g.edge_penalty(p, c);
        *fan.entry(p).or_default() += 1;
        let mut d = 1u32;
        let mut cur = p;
        while cur != root {
            cur = parent[&cur];
            d += 1;
        }
        s += cfg.alpha_depth * f64::from(d - 1);
    }
    for (&p, &f) in &fan {
        let f = f as f64;
        s += cfg.beta_fanout * f * (f - 1.0) / 2.0;
        if p != root {
            s += g.node_penalty(p) * f;
        }
    }
    s
}

fn parent_penalty(g: &ClusterGraph, root: ClusterId, u: ClusterId) -> f64 {
    if u == root {
        0.0
    } else {
        g.node_penalty(u)
    }
}

/// Prim over healthy nodes. Returns the parent map (nodes unreachable within
/// `depth_limit` are left out) and the summed weights of the chosen edges.
fn prim(
    g: &ClusterGraph,
    cfg: &TreeConfig,
    source: ClusterId,
    depth_limit: u32,
) -> (BTreeMap<ClusterId, ClusterId>, f64) {
    let mut depth: BTreeMap<ClusterId, u32> = BTreeMap::from([(source, 0)]);
    let mut fan: BTreeMap<ClusterId, u32> = BTreeMap::new();
    let mut parent = BTreeMap::new();
    let mut total = 0.0;
    loop {
        let mut best: Option<(f64, f64, ClusterId, ClusterId)> = None;
        for (&u, &du) in &depth {
            if du + 1 > depth_limit {
                continue;
            }
            for v in g.neighbors(u) {
                if depth.contains_key(&v) || !g.usable(u, v) {
                    continue;
                }
                let cost = g.cost(u, v).unwrap();
                let w = cost
                    + g.edge_penalty(u, v)
                    + parent_penalty(g, source, u)
                    + cfg.alpha_depth * f64::from(du)
                    + cfg.beta_fanout * f64::from(fan.get(&u).copied().unwrap_or(0));
                let cand = (w, cost, v, u);
                let better = match &best {
                    None => true,
                    Some(b) => (cand.0, cand.1)
                        .partial_cmp(&(b.0, b.1))
                        .unwrap()
                        .then((cand.2, cand.3).cmp(&(b.2, b.3)))
                        .is_lt(),
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let Some((w, _, v, u)) = best else { break };
        total += w;
        depth.insert(v, depth[&u] + 1);
        *fan.entry(u).or_default() += 1;
        parent.insert(v, u);
    }
    (parent, total)
}

/// Branch-and-bound over parent assignments for all `nodes`, minimizing the
/// static score. Returns `None` if no tree within `max_depth` exists.
fn exact_search(
    g: &ClusterGraph,
    cfg: &TreeConfig,
    source: ClusterId,
    nodes: &[ClusterId],
) -> Option<BTreeMap<ClusterId, ClusterId>> {
    // One parent per non-source node; cycles and over-deep chains are both
    // caught by the depth walk. Edge costs alone bound the score from below.
    let others: Vec<ClusterId> = nodes.iter().copied().filter(|&n| n != source).collect();
    let mut best: Option<(f64, BTreeMap<ClusterId, ClusterId>)> = None;
    let mut assign: BTreeMap<ClusterId, ClusterId> = BTreeMap::new();

    fn valid_depths(
        root: ClusterId,
        assign: &BTreeMap<ClusterId, ClusterId>,
        max_depth: u32,
    ) -> bool {
        for &start in assign.keys() {
            let mut d = 0;
            let mut cur = start;
            while cur != root {
                match assign.get(&cur) {
                    Some(&p) => cur = p,
                    None => break, // parent not assigned yet
                }
                d += 1;
                if d > max_depth {
                    return false;
                }
            }
        }
        true
    }

    #[allow(clippy::too_many_arguments)]
    fn rec(
        i: usize,
        others: &[ClusterId],
        g: &ClusterGraph,
        cfg: &TreeConfig,
        source: ClusterId,
        nodes: &[ClusterId],
        assign: &mut BTreeMap<ClusterId, ClusterId>,
        partial: f64,
        best: &mut Option<(f64, BTreeMap<ClusterId, ClusterId>)>,
    ) {
        if let Some((b, _)) = best {
            if partial >= *b - 1e-12 {
                return;
            }
        }
        if i == others.len() {
            let s = score_parents(g, cfg, source, assign);
            if best.as_ref().is_none_or(|(b, _)| s < *b - 1e-12) {
                *best = Some((s, assign.clone()));
            }
            return;
        }
        let v = others[i];
        for &p in nodes {
            if p == v || !g.usable(p, v) {
                continue;
            }
            assign.insert(v, p);
            if valid_depths(source, assign, cfg.max_depth) {
                let add = g.cost(p, v).unwrap() + g.edge_penalty(p, v);
                rec(
                    i + 1,
                    others,
                    g,
                    cfg,
                    source,
                    nodes,
                    assign,
                    partial + add,
                    best,
                );
            }
            assign.remove(&v);
        }
    }

    rec(
        0,
        &others,
        g,
        cfg,
        source,
        nodes,
        &mut assign,
        0.0,
        &mut best,
    );
    best.map(|(_, p)| p)
}

fn tree_depth(root: ClusterId, parent: &BTreeMap<ClusterId, ClusterId>) -> u32 {
    parent
        .keys()
        .map(|&n| {
            let mut d = 0;
            let mut cur = n;
            while cur != root {
                cur = parent[&cur];
                d += 1;
            }
            d
        })
        .max()
        .unwrap_or(0)
}

/// Drop leaves that are neither the source nor a destination.
fn prune(
    parent: &mut BTreeMap<ClusterId, ClusterId>,
    source: ClusterId,
    dests: &BTreeSet<ClusterId>,
) {
    loop {
        let has_child: BTreeSet<ClusterId> = parent.values().copied().collect();
        let drop: Vec<ClusterId> = parent
            .keys()
            .copied()
            .filter(|n| *n != source && !dests.contains(n) && !has_child.contains(n))
            .collect();
        if drop.is_empty() {
            break;
        }
        for n in drop {
            parent.remove(&n);
        }
    }
}

/// Build the tree, attaching as many destinations as possible. Destinations
/// that cannot be reached end up in `detached`.
pub fn build_tree_partial(
    g: &ClusterGraph,
    source: ClusterId,
    dests: &BTreeSet<ClusterId>,
    cfg: &TreeConfig,
) -> Result<CopyTree, TreeError> {
    if !g.node_up(source) {
        return Err(TreeError::BadSource(source));
    }
    let (unbounded, _) = prim(g, cfg, source, u32::MAX);
    let mut parent = if tree_depth(source, &unbounded) <= cfg.max_depth {
        unbounded
    } else {
        let (greedy, _) = prim(g, cfg, source, cfg.max_depth);
        let reachable: Vec<ClusterId> = std::iter::once(source)
            .chain(unbounded.keys().copied())
            .collect();
        let exact = if reachable.len() <= cfg.exact_search_limit {
            exact_search(g, cfg, source, &reachable)
        } else {
            None
        };
        match exact {
            Some(e)
                if e.len() > greedy.len()
                    || (e.len() == greedy.len()
                        && score_parents(g, cfg, source, &e)
                            < score_parents(g, cfg, source, &greedy)) =>
            {
                e
            }
            _ => greedy,
        }
    };
    prune(&mut parent, source, dests);
    let detached: BTreeSet<ClusterId> = dests
        .iter()
        .copied()
        .filter(|d| *d != source && !parent.contains_key(d))
        .collect();
    let mode = std::iter::once(source)
        .chain(parent.keys().copied())
        .map(|n| (n, NodeMode::Regular))
        .collect();
    Ok(CopyTree {
        root: source,
        parent,
        mode,
        detached,
    })
}

/// Build the tree; fails if any destination is unreachable within
/// `max_depth` over healthy nodes and links.
pub fn build_tree(
    g: &ClusterGraph,
    source: ClusterId,
    dests: &BTreeSet<ClusterId>,
    cfg: &TreeConfig,
) -> Result<CopyTree, TreeError> {
    let t = build_tree_partial(g, source, dests, cfg)?;
    if t.detached.is_empty() {
        Ok(t)
    } else {
        Err(TreeError::Unreachable(t.detached.iter().copied().collect()))
    }
}

/// Penalize the outage set in `g` and rebuild. Destinations cut off by the
/// outage come back in `detached` and should be rerouted.
pub fn penalize_and_rebuild(
    tree: &CopyTree,
    g: &mut ClusterGraph,
    outage_nodes: &[ClusterId],
    outage_edges: &[(ClusterId, ClusterId)],
    cfg: &TreeConfig,
) -> Result<CopyTree, TreeError> {
    let p0 = cfg.penalty_factor * g.max_cost();
    g.penalize(outage_nodes, outage_edges, p0, cfg.penalty_radius);
    let dests: BTreeSet<ClusterId> = tree
        .parent
        .keys()
        .copied()
        .chain(tree.detached.iter().copied())
        .collect();
    let mut t = build_tree_partial(g, tree.root, &dests, cfg)?;
    for (n, m) in &tree.mode {
        if *m == NodeMode::RateLimitedLeaf && t.contains(*n) && t.fanout(*n) == 0 {
            t.mode.insert(*n, *m);
        }
    }
    Ok(t)
}

/// Attach `new` as a rate-limited leaf under the cheapest eligible parent.
pub fn add_cluster(
    tree: &CopyTree,
    g: &ClusterGraph,
    new: ClusterId,
    cfg: &TreeConfig,
) -> Result<CopyTree, TreeError> {
    if tree.contains(new) {
        return Ok(tree.clone());
    }
    let best = tree
        .nodes()
        .filter(|&p| tree.mode(p) == NodeMode::Regular && g.usable(p, new))
        .filter_map(|p| {
            let d = tree.depth(p)?;
            (d < cfg.max_depth).then(|| {
                let w = g.cost(p, new).unwrap()
                    + g.edge_penalty(p, new)
                    + parent_penalty(g, tree.root, p)
                    + cfg.alpha_depth * f64::from(d)
                    + cfg.beta_fanout * tree.fanout(p) as f64;
                (w, p)
            })
        })
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let (_, p) = best.ok_or(TreeError::NoEligibleParent(new))?;
    let mut t = tree.clone();
    t.parent.insert(new, p);
    t.mode.insert(new, NodeMode::RateLimitedLeaf);
    t.detached.remove(&new);
    Ok(t)
}

/// Nearest healthy attached cluster to `from` by path cost over live links;
/// ties go to the lower id.
pub fn reroute_consumers(g: &ClusterGraph, tree: &CopyTree, from: ClusterId) -> Option<ClusterId> {
    let mut ug: UnGraph<ClusterId, f64> = UnGraph::new_undirected();
    let mut idx: BTreeMap<ClusterId, NodeIndex> = BTreeMap::new();
    for n in g.nodes() {
        idx.insert(n, ug.add_node(n));
    }
    for e in g.edges() {
        if !g.down_edges.contains(&norm(e.a, e.b)) {
            ug.add_edge(idx[&e.a], idx[&e.b], e.cost);
        }
    }
    let start = *idx.get(&from)?;
    let dist = dijkstra(&ug, start, None, |e| *e.weight());
    let mut best: Option<(f64, ClusterId)> = None;
    for (ni, d) in dist {
        let n = ug[ni];
        if n == from || !g.node_up(n) || !tree.contains(n) {
            continue;
        }
        let better = match best {
            None => true,
            Some((bd, bn)) => d < bd || (d == bd && n < bn),
        };
        if better {
            best = Some((d, n));
        }
    }
    best.map(|(_, n)| n)
}
