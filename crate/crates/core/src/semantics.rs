//! Population-level region semantics.
//!
//! Each region gets a flow-in and a flow-out distribution over the day. Two
//! regions are similar when their distributions are close under symmetric
//! KL divergence, and similar regions are grouped by average-linkage
//! agglomerative clustering.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{interval_of, RegionId, TimeScheme};
use crate::stations::{Station, StationKind};

/// Raw arrive/depart counts per region and semantic interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowHistogram {
    pub n_in: Vec<u64>,
    pub n_out: Vec<u64>,
}

impl FlowHistogram {
    pub fn zeros(n_semantic: u32) -> Self {
        FlowHistogram {
            n_in: vec![0; n_semantic as usize],
            n_out: vec![0; n_semantic as usize],
        }
    }

    pub fn total(&self) -> u64 {
        self.n_in.iter().sum::<u64>() + self.n_out.iter().sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowDistribution {
    pub p_in: Vec<f64>,
    pub p_out: Vec<f64>,
}

/// Counts arrive stations as flow-in and depart stations as flow-out.
pub fn accumulate_flows(stations: &[Station], n_regions: usize, scheme: &TimeScheme) -> Vec<FlowHistogram> {
    let mut out = vec![FlowHistogram::zeros(scheme.n_semantic); n_regions];
    for s in stations {
        let t = interval_of(s.record.time, scheme.n_semantic) as usize;
        let h = &mut out[s.record.region as usize];
        match s.kind {
            StationKind::Arrive => h.n_in[t] += 1,
            StationKind::Depart => h.n_out[t] += 1,
        }
    }
    out
}

/// Adds `epsilon` to every bucket and divides by the sum. All-zero counts
/// give `None`.
pub fn normalize(counts: &[u64], epsilon: f64) -> Option<Vec<f64>> {
    if counts.iter().all(|&c| c == 0) {
        return None;
    }
    let smoothed: Vec<f64> = counts.iter().map(|&c| c as f64 + epsilon).collect();
    let sum: f64 = smoothed.iter().sum();
    Some(smoothed.into_iter().map(|v| v / sum).collect())
}

/// Both directions normalized, or `None` if either is empty.
pub fn normalize_flows(h: &FlowHistogram, epsilon: f64) -> Option<FlowDistribution> {
    Some(FlowDistribution {
        p_in: normalize(&h.n_in, epsilon)?,
        p_out: normalize(&h.n_out, epsilon)?,
    })
}

/// KL(P‖Q) in nats. Terms with `p = 0` contribute nothing.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    Ok(p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum())
}

/// Symmetric KL: the mean of both directions.
pub fn skl(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok((kl(p, q)? + kl(q, p)?) / 2.0)
}

/// `alpha · SKL(in) + beta · SKL(out)`.
pub fn semantic_distance(a: &FlowDistribution, b: &FlowDistribution, alpha: f64, beta: f64) -> Result<f64> {
    Ok(alpha * skl(&a.p_in, &b.p_in)? + beta * skl(&a.p_out, &b.p_out)?)
}

/// Pairwise distances among scored regions, normalized by the largest.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    /// Scored regions in ascending order; matrix rows follow this order.
    pub regions: Vec<RegionId>,
    /// Row-major `d_s` matrix.
    pub distance: Vec<f64>,
    /// Largest pairwise distance.
    pub z: f64,
}

impl SimilarityGraph {
    pub fn build(dists: &[(RegionId, FlowDistribution)], alpha: f64, beta: f64) -> Result<Self> {
        let n = dists.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            Ok(0.0)
                        } else {
                            semantic_distance(&dists[i].1, &dists[j].1, alpha, beta)
                        }
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let distance: Vec<f64> = rows.into_iter().flatten().collect();
        let z = distance.iter().copied().fold(0.0, f64::max);
        Ok(SimilarityGraph {
            regions: dists.iter().map(|(r, _)| *r).collect(),
            distance,
            z,
        })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn d(&self, i: usize, j: usize) -> f64 {
        self.distance[i * self.len() + j]
    }

    /// `1 - d / z`, with identical regions at 1 and everything at 1 when
    /// all distances are zero.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if i == j || self.z <= 0.0 {
            1.0
        } else {
            1.0 - self.d(i, j) / self.z
        }
    }

    /// Position of `region` among the scored regions.
    pub fn index_of(&self, region: RegionId) -> Option<usize> {
        self.regions.binary_search(&region).ok()
    }

    /// Row-major `1 - weight` matrix, the input to clustering.
    pub fn dissimilarity(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = 1.0 - self.weight(i, j);
            }
        }
        out
    }
}

/// Average-linkage agglomerative clustering of `n` items with a row-major
/// dissimilarity matrix. Merging continues while the closest pair of
/// clusters is at most `max_distance` apart; ties go to the pair with the
/// smallest indices. Returns a label per item, numbered by first member.
pub fn average_linkage(dissimilarity: &[f64], n: usize, max_distance: f64) -> Vec<usize> {
    assert_eq!(dissimilarity.len(), n * n);
    let mut d = dissimilarity.to_vec();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut nn = vec![usize::MAX; n];

    let nearest = |d: &[f64], active: &[bool], i: usize| -> usize {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if j != i && active[j] && (best == usize::MAX || d[i * n + j] < best_d) {
                best = j;
                best_d = d[i * n + j];
            }
        }
        best
    };
    for i in 0..n {
        nn[i] = nearest(&d, &active, i);
    }

    loop {
        let mut pick: Option<(f64, usize, usize)> = None;
        for i in (0..n).filter(|&i| active[i] && nn[i] != usize::MAX) {
            let j = nn[i];
            let cand = (d[i * n + j], i.min(j), i.max(j));
            let better = match pick {
                None => true,
                Some(p) => cand.0 < p.0 || (cand.0 == p.0 && (cand.1, cand.2) < (p.1, p.2)),
            };
            if better {
                pick = Some(cand);
            }
        }
        let Some((dist, a, b)) = pick else { break };
        if dist > max_distance {
            break;
        }
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for k in 0..n {
            if active[k] && k != a && k != b {
                let v = (na * d[a * n + k] + nb * d[b * n + k]) / (na + nb);
                d[a * n + k] = v;
                d[k * n + a] = v;
            }
        }
        active[b] = false;
        size[a] += size[b];
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        nn[b] = usize::MAX;
        for k in 0..n {
            if !active[k] {
                continue;
            }
            if k == a || nn[k] == a || nn[k] == b {
                nn[k] = nearest(&d, &active, k);
            } else {
                let cur = nn[k];
                let v = d[k * n + a];
                if v < d[k * n + cur] || (v == d[k * n + cur] && a < cur) {
                    nn[k] = a;
                }
            }
        }
    }

    let mut labels = vec![usize::MAX; n];
    let mut next = 0;
    for i in 0..n {
        if labels[i] == usize::MAX {
            let root = (0..n).find(|&r| active[r] && members[r].contains(&i)).unwrap();
            for &m in &members[root] {
                labels[m] = next;
            }
            next += 1;
        }
    }
    labels
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticClustering {
    /// Cluster id per region; `None` for unscored regions.
    pub cluster_of: Vec<Option<usize>>,
    /// Members of each cluster, ascending.
    pub clusters: Vec<Vec<RegionId>>,
}

impl SemanticClustering {
    /// Clusters the graph, merging while similarity stays at or above
    /// `threshold`.
    pub fn from_graph(g: &SimilarityGraph, n_regions: usize, threshold: f64) -> Self {
        let labels = average_linkage(&g.dissimilarity(), g.len(), 1.0 - threshold);
        Self::from_labels(&g.regions, &labels, n_regions)
    }

    fn from_labels(regions: &[RegionId], labels: &[usize], n_regions: usize) -> Self {
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut clusters = vec![Vec::new(); k];
        let mut cluster_of = vec![None; n_regions];
        for (&r, &l) in regions.iter().zip(labels) {
            clusters[l].push(r);
            cluster_of[r as usize] = Some(l);
        }
        SemanticClustering {
            cluster_of,
            clusters,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }
}

/// Everything the synthesizer needs to know about region semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticModel {
    pub n_semantic: u32,
    pub alpha: f64,
    pub beta: f64,
    pub distributions: Vec<Option<FlowDistribution>>,
    pub graph: SimilarityGraph,
    pub clustering: SemanticClustering,
    /// Regions left out because a flow direction was empty.
    pub skipped: Vec<RegionId>,
    centroids: Vec<FlowDistribution>,
}

impl SemanticModel {
    pub fn build(
        flows: &[FlowHistogram],
        n_semantic: u32,
        alpha: f64,
        beta: f64,
        epsilon: f64,
        threshold: f64,
    ) -> Result<Self> {
        let distributions: Vec<Option<FlowDistribution>> =
            flows.iter().map(|h| normalize_flows(h, epsilon)).collect();
        let graph = Self::graph_of(&distributions, alpha, beta)?;
        let clustering = SemanticClustering::from_graph(&graph, flows.len(), threshold);
        Ok(Self::assemble(n_semantic, alpha, beta, distributions, graph, clustering))
    }

    fn graph_of(distributions: &[Option<FlowDistribution>], alpha: f64, beta: f64) -> Result<SimilarityGraph> {
        let scored: Vec<(RegionId, FlowDistribution)> = distributions
            .iter()
            .enumerate()
            .filter_map(|(r, d)| d.clone().map(|d| (r as RegionId, d)))
            .collect();
        SimilarityGraph::build(&scored, alpha, beta)
    }

    fn assemble(
        n_semantic: u32,
        alpha: f64,
        beta: f64,
        distributions: Vec<Option<FlowDistribution>>,
        graph: SimilarityGraph,
        clustering: SemanticClustering,
    ) -> Self {
        let skipped = distributions
            .iter()
            .enumerate()
            .filter(|(_, d)| d.is_none())
            .map(|(r, _)| r as RegionId)
            .collect();
        let centroids = clustering
            .clusters
            .iter()
            .map(|members| {
                let mut c = FlowDistribution {
                    p_in: vec![0.0; n_semantic as usize],
                    p_out: vec![0.0; n_semantic as usize],
                };
                for &r in members {
                    let d = distributions[r as usize].as_ref().expect("clustered regions are scored");
                    for t in 0..n_semantic as usize {
                        c.p_in[t] += d.p_in[t] / members.len() as f64;
                        c.p_out[t] += d.p_out[t] / members.len() as f64;
                    }
                }
                c
            })
            .collect();
        SemanticModel {
            n_semantic,
            alpha,
            beta,
            distributions,
            graph,
            clustering,
            skipped,
            centroids,
        }
    }

    pub fn n_regions(&self) -> usize {
        self.distributions.len()
    }

    pub fn cluster_of(&self, region: RegionId) -> Option<usize> {
        self.clustering.cluster_of.get(region as usize).copied().flatten()
    }

    pub fn members(&self, cluster: usize) -> &[RegionId] {
        &self.clustering.clusters[cluster]
    }

    /// Similarity of two scored regions.
    pub fn similarity(&self, a: RegionId, b: RegionId) -> Option<f64> {
        Some(self.graph.weight(self.graph.index_of(a)?, self.graph.index_of(b)?))
    }

    /// The other cluster whose mean distribution is closest to this one's.
    pub fn nearest_other_cluster(&self, cluster: usize) -> Option<usize> {
        let me = &self.centroids[cluster];
        let mut best: Option<(f64, usize)> = None;
        for (c, other) in self.centroids.iter().enumerate() {
            if c == cluster {
                continue;
            }
            let d = semantic_distance(me, other, self.alpha, self.beta).ok()?;
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, c));
            }
        }
        best.map(|(_, c)| c)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_distributions(std::fs::File::create(dir.join(DISTRIBUTIONS_FILE))?)?;
        self.write_similarity(std::io::BufWriter::new(std::fs::File::create(
            dir.join(SIMILARITY_FILE),
        )?))?;
        self.write_clusters(std::fs::File::create(dir.join(CLUSTERS_FILE))?)?;
        Ok(())
    }

    /// Reloads a saved model. The similarity graph is recomputed from the
    /// stored distributions, which are written at full precision, and
    /// checked against the binary matrix.
    pub fn load(dir: &Path, alpha: f64, beta: f64) -> Result<Self> {
        let (n_semantic, distributions) =
            read_distributions(std::fs::File::open(dir.join(DISTRIBUTIONS_FILE))?)?;
        let n_regions = distributions.len();
        let graph = Self::graph_of(&distributions, alpha, beta)?;
        let sims = read_similarity(std::io::BufReader::new(std::fs::File::open(
            dir.join(SIMILARITY_FILE),
        )?))?;
        if sims.n_regions != n_regions || sims.n_semantic != n_semantic || sims.n_scored != graph.len() {
            return Err(Error::artifact(SIMILARITY_FILE, "dimensions disagree with distributions"));
        }
        let labels = read_clusters(std::fs::File::open(dir.join(CLUSTERS_FILE))?, n_regions)?;
        let clustering = clustering_from_labels(&labels, &graph)?;
        Ok(Self::assemble(n_semantic, alpha, beta, distributions, graph, clustering))
    }

    pub fn write_distributions<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["region".to_string(), "dir".to_string()];
        header.extend((0..self.n_semantic).map(|t| format!("t{t}")));
        w.write_record(&header)?;
        for (r, d) in self.distributions.iter().enumerate() {
            if let Some(d) = d {
                for (dir, p) in [("in", &d.p_in), ("out", &d.p_out)] {
                    let mut row = vec![r.to_string(), dir.to_string()];
                    row.extend(p.iter().map(|v| format!("{v:?}")));
                    w.write_record(&row)?;
                }
            }
        }
        // region count travels in a trailing marker row so empty regions at
        // the end of the map survive a round trip
        let mut tail = vec![self.n_regions().to_string(), "end".to_string()];
        tail.extend((0..self.n_semantic).map(|_| String::new()));
        w.write_record(&tail)?;
        w.flush()?;
        Ok(())
    }

    /// Binary matrix: "GSIM", |R|, N_S and the scored count as little-endian
    /// u32, then |R|×|R| f32 similarities with NaN for unscored regions.
    pub fn write_similarity<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.n_regions();
        w.write_all(b"GSIM")?;
        w.write_all(&(n as u32).to_le_bytes())?;
        w.write_all(&self.n_semantic.to_le_bytes())?;
        w.write_all(&(self.graph.len() as u32).to_le_bytes())?;
        let idx: Vec<Option<usize>> = (0..n as RegionId).map(|r| self.graph.index_of(r)).collect();
        let mut row = Vec::with_capacity(n * 4);
        for a in 0..n {
            row.clear();
            for b in 0..n {
                let v = match (idx[a], idx[b]) {
                    (Some(i), Some(j)) => self.graph.weight(i, j) as f32,
                    _ => f32::NAN,
                };
                row.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_clusters<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["region", "cluster"])?;
        for (r, c) in self.clustering.cluster_of.iter().enumerate() {
            if let Some(c) = c {
                w.write_record([r.to_string(), c.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub const DISTRIBUTIONS_FILE: &str = "distributions.csv";
pub const SIMILARITY_FILE: &str = "similarity.bin";
pub const CLUSTERS_FILE: &str = "clusters.csv";

fn read_distributions<R: Read>(reader: R) -> Result<(u32, Vec<Option<FlowDistribution>>)> {
    let bad = |row: usize, why: &str| Error::artifact(DISTRIBUTIONS_FILE, format!("row {row}: {why}"));
    let mut rdr = csv::Reader::from_reader(reader);
    let n_semantic = rdr.headers()?.len().saturating_sub(2) as u32;
    let mut by_region: HashMap<usize, (Option<Vec<f64>>, Option<Vec<f64>>)> = HashMap::new();
    let mut n_regions = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let r: usize = rec[0].parse().map_err(|_| bad(i + 2, "bad region"))?;
        if &rec[1] == "end" {
            n_regions = Some(r);
            continue;
        }
        let values = rec
            .iter()
            .skip(2)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| bad(i + 2, "bad probability"))?;
        let slot = by_region.entry(r).or_default();
        match &rec[1] {
            "in" => slot.0 = Some(values),
            "out" => slot.1 = Some(values),
            _ => return Err(bad(i + 2, "dir must be in or out")),
        }
    }
    let n_regions = n_regions.ok_or_else(|| bad(0, "missing end marker"))?;
    let mut out = vec![None; n_regions];
    for (r, (p_in, p_out)) in by_region {
        match (p_in, p_out) {
            (Some(p_in), Some(p_out)) if r < n_regions => out[r] = Some(FlowDistribution { p_in, p_out }),
            _ => return Err(bad(0, &format!("incomplete region {r}"))),
        }
    }
    Ok((n_semantic, out))
}

/// Decoded similarity matrix file.
#[derive(Debug, Clone)]
pub struct SimilarityFile {
    pub n_regions: usize,
    pub n_semantic: u32,
    pub n_scored: usize,
    pub weights: Vec<f32>,
}

pub fn read_similarity<R: Read>(mut r: R) -> Result<SimilarityFile> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)?;
    if &head[0..4] != b"GSIM" {
        return Err(Error::artifact(SIMILARITY_FILE, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
    let n = word(4) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n * n * 4 {
        return Err(Error::artifact(SIMILARITY_FILE, "truncated matrix"));
    }
    Ok(SimilarityFile {
        n_regions: n,
        n_semantic: word(8),
        n_scored: word(12) as usize,
        weights: bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    })
}

fn read_clusters<R: Read>(reader: R, n_regions: usize) -> Result<Vec<Option<usize>>> {
    let bad = |row: usize| Error::artifact(CLUSTERS_FILE, format!("bad row {row}"));
    let mut out = vec![None; n_regions];
    let mut rdr = csv::Reader::from_reader(reader);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let r: usize = rec[0].parse().map_err(|_| bad(i + 2))?;
        let c: usize = rec[1].parse().map_err(|_| bad(i + 2))?;
        *out.get_mut(r).ok_or_else(|| bad(i + 2))? = Some(c);
    }
    Ok(out)
}

fn clustering_from_labels(labels: &[Option<usize>], g: &SimilarityGraph) -> Result<SemanticClustering> {
    for (r, l) in labels.iter().enumerate() {
        if l.is_some() != g.index_of(r as RegionId).is_some() {
            return Err(Error::artifact(CLUSTERS_FILE, format!("region {r} scored/clustered mismatch")));
        }
    }
    let k = labels.iter().flatten().copied().max().map_or(0, |m| m + 1);
    let mut clusters = vec![Vec::new(); k];
    for (r, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            clusters[*l].push(r as RegionId);
        }
    }
    if clusters.iter().any(Vec::is_empty) {
        return Err(Error::artifact(CLUSTERS_FILE, "cluster ids are not contiguous"));
    }
    Ok(SemanticClustering {
        cluster_of: labels.to_vec(),
        clusters,
    })
}

fn comb2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index<A: Eq + std::hash::Hash, B: Eq + std::hash::Hash>(a: &[A], b: &[B]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as u64;
    let mut joint: HashMap<(&A, &B), u64> = HashMap::new();
    let mut rows: HashMap<&A, u64> = HashMap::new();
    let mut cols: HashMap<&B, u64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = joint.values().map(|&c| comb2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| comb2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| comb2(c)).sum();
    let total = comb2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return if index == expected { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}
