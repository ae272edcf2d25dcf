//! Loopless k-shortest paths (Yen) over a sparse weighted digraph.
//!
//! Paths come out in nondecreasing weight. Paths whose weights agree to
//! within `TIE_TOLERANCE` are ordered lexicographically by node sequence.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashSet};

use crate::error::{Error, Result};
use crate::grid::RegionId;

pub const TIE_TOLERANCE: f64 = 1e-9;

/// Extra tied paths Yen may generate past `k` while settling ties.
const TIE_SLACK: usize = 64;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightedDigraph {
    adj: Vec<Vec<(RegionId, f64)>>,
}

impl WeightedDigraph {
    pub fn new(n_nodes: usize) -> Self {
        WeightedDigraph {
            adj: vec![Vec::new(); n_nodes],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.adj.len()
    }

    pub fn n_edges(&self) -> usize {
        self.adj.iter().map(Vec::len).sum()
    }

    /// Adds or replaces the edge `u → v`.
    pub fn add_edge(&mut self, u: RegionId, v: RegionId, w: f64) {
        let row = &mut self.adj[u as usize];
        match row.binary_search_by_key(&v, |e| e.0) {
            Ok(i) => row[i].1 = w,
            Err(i) => row.insert(i, (v, w)),
        }
    }

    pub fn edges(&self, u: RegionId) -> &[(RegionId, f64)] {
        &self.adj[u as usize]
    }

    pub fn weight(&self, u: RegionId, v: RegionId) -> Option<f64> {
        let row = self.adj.get(u as usize)?;
        row.binary_search_by_key(&v, |e| e.0).ok().map(|i| row[i].1)
    }

    /// Sum of edge weights along `nodes`, added left to right.
    pub fn path_weight(&self, nodes: &[RegionId]) -> Option<f64> {
        nodes
            .windows(2)
            .try_fold(0.0, |acc, w| Some(acc + self.weight(w[0], w[1])?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub nodes: Vec<RegionId>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KPaths {
    pub paths: Vec<Path>,
    /// Set when fewer than `k` loopless paths exist.
    pub exhausted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Weight(f64);

impl Eq for Weight {}

impl Ord for Weight {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for Weight {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest path avoiding `removed` nodes and the edges `spur → banned`.
fn dijkstra(
    g: &WeightedDigraph,
    src: RegionId,
    dst: RegionId,
    removed: &[bool],
    spur_banned: &HashSet<RegionId>,
) -> Option<Vec<RegionId>> {
    let n = g.n_nodes();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![RegionId::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[src as usize] = 0.0;
    heap.push(Reverse((Weight(0.0), src)));
    while let Some(Reverse((Weight(d), u))) = heap.pop() {
        if d > dist[u as usize] {
            continue;
        }
        if u == dst {
            break;
        }
        for &(v, w) in g.edges(u) {
            if removed[v as usize] || (u == src && spur_banned.contains(&v)) {
                continue;
            }
            let nd = d + w;
            if nd < dist[v as usize] {
                dist[v as usize] = nd;
                pred[v as usize] = u;
                heap.push(Reverse((Weight(nd), v)));
            }
        }
    }
    if !dist[dst as usize].is_finite() {
        return None;
    }
    let mut path = vec![dst];
    let mut cur = dst;
    while cur != src {
        cur = pred[cur as usize];
        path.push(cur);
    }
    path.reverse();
    Some(path)
}

/// Sorts by weight, then lexicographically within groups of tied weights.
pub fn sort_paths(paths: &mut [Path]) {
    paths.sort_by(|a, b| a.weight.total_cmp(&b.weight).then_with(|| a.nodes.cmp(&b.nodes)));
    let mut start = 0;
    while start < paths.len() {
        let mut end = start + 1;
        while end < paths.len() && paths[end].weight - paths[end - 1].weight <= TIE_TOLERANCE {
            end += 1;
        }
        paths[start..end].sort_by(|a, b| a.nodes.cmp(&b.nodes));
        start = end;
    }
}

pub fn k_shortest_paths(g: &WeightedDigraph, src: RegionId, dst: RegionId, k: usize) -> Result<KPaths> {
    k_shortest_paths_avoiding(g, src, dst, k, &[])
}

/// Yen's algorithm with Dijkstra spur searches. Nodes in `blocked` never
/// appear on a returned path.
pub fn k_shortest_paths_avoiding(
    g: &WeightedDigraph,
    src: RegionId,
    dst: RegionId,
    k: usize,
    blocked: &[RegionId],
) -> Result<KPaths> {
    yen(g, src, dst, k, blocked, f64::INFINITY)
}

/// The first `k` paths whose weight is at most `max_weight`. The search
/// stops as soon as every remaining path is heavier. `exhausted` means fewer
/// than `k` such paths exist.
pub fn k_shortest_paths_within(
    g: &WeightedDigraph,
    src: RegionId,
    dst: RegionId,
    k: usize,
    max_weight: f64,
) -> Result<KPaths> {
    yen(g, src, dst, k, &[], max_weight)
}

fn yen(g: &WeightedDigraph, src: RegionId, dst: RegionId, k: usize, blocked: &[RegionId], bound: f64) -> Result<KPaths> {
    let limit = bound + TIE_TOLERANCE;
    let n = g.n_nodes();
    for r in [src, dst] {
        if r as usize >= n {
            return Err(Error::InvalidRegion(r));
        }
    }
    if src == dst {
        return Err(Error::SameEndpoints(src));
    }
    let mut removed = vec![false; n];
    for &b in blocked {
        if (b as usize) < n {
            removed[b as usize] = true;
        }
    }
    if removed[src as usize] || removed[dst as usize] || k == 0 {
        return if k == 0 && !removed[src as usize] && !removed[dst as usize] {
            Ok(KPaths { paths: Vec::new(), exhausted: false })
        } else {
            Err(Error::Unreachable { src, dst })
        };
    }

    let first = dijkstra(g, src, dst, &removed, &HashSet::new()).ok_or(Error::Unreachable { src, dst })?;
    let mut found: Vec<Path> = vec![Path {
        weight: g.path_weight(&first).expect("dijkstra follows edges"),
        nodes: first.clone(),
    }];
    let mut seen: HashSet<Vec<RegionId>> = HashSet::from([first]);
    let mut candidates: BTreeSet<(Weight, Vec<RegionId>)> = BTreeSet::new();
    let base_removed = removed.clone();

    loop {
        if found.last().unwrap().weight > limit {
            break;
        }
        let prev = found.last().unwrap().nodes.clone();
        for i in 0..prev.len() - 1 {
            let spur = prev[i];
            let root = &prev[..=i];
            let banned: HashSet<RegionId> = found
                .iter()
                .filter(|p| p.nodes.len() > i + 1 && &p.nodes[..=i] == root)
                .map(|p| p.nodes[i + 1])
                .collect();
            let mut removed = base_removed.clone();
            for &r in &root[..i] {
                removed[r as usize] = true;
            }
            if let Some(tail) = dijkstra(g, spur, dst, &removed, &banned) {
                let mut nodes = root[..i].to_vec();
                nodes.extend(tail);
                if seen.insert(nodes.clone()) {
                    let w = g.path_weight(&nodes).expect("spur follows edges");
                    candidates.insert((Weight(w), nodes));
                }
            }
        }
        if found.len() >= k {
            // stop once no remaining candidate ties with the k-th path
            let kth = found[k - 1].weight;
            let settled = candidates
                .first()
                .is_none_or(|(w, _)| w.0 > kth + TIE_TOLERANCE);
            if settled || found.len() >= k + TIE_SLACK {
                break;
            }
        }
        if candidates.first().is_some_and(|(w, _)| w.0 > limit) {
            break;
        }
        match candidates.pop_first() {
            Some((w, nodes)) => found.push(Path { nodes, weight: w.0 }),
            None => break,
        }
    }

    found.retain(|p| p.weight <= limit);
    sort_paths(&mut found);
    let exhausted = found.len() < k;
    found.truncate(k);
    Ok(KPaths {
        paths: found,
        exhausted,
    })
}
