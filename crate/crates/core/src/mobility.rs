//! Population mobility per time interval: a first-order transition graph
//! with `-ln P` edge weights, a runtime tensor giving the typical time spent
//! crossing a region, and the empirical rank of real sections among the
//! k most probable paths.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{interval_of, GridMap, Record, RegionId};
use crate::ksp::{k_shortest_paths_within, WeightedDigraph};
use crate::stations::Section;

pub const EDGES_FILE: &str = "edges.csv";
pub const TENSOR_FILE: &str = "tensor.csv";
pub const RANKS_FILE: &str = "ranks.csv";

/// A region visit within a section: where, and when it was entered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visit {
    pub region: RegionId,
    pub entered: i64,
}

/// Collapses consecutive records in the same region.
pub fn visits(records: &[Record]) -> Vec<Visit> {
    let mut out: Vec<Visit> = Vec::new();
    for r in records {
        if out.last().is_none_or(|v| v.region != r.region) {
            out.push(Visit {
                region: r.region,
                entered: r.time,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionGraph {
    /// Observed counts `from → to`, keyed by `from`, sorted by `to`.
    counts: Vec<Vec<(RegionId, u64)>>,
    graph: WeightedDigraph,
}

impl TransitionGraph {
    fn from_counts(counts: Vec<Vec<(RegionId, u64)>>) -> Self {
        let mut graph = WeightedDigraph::new(counts.len());
        for (u, row) in counts.iter().enumerate() {
            let total: u64 = row.iter().map(|e| e.1).sum();
            for &(v, c) in row {
                graph.add_edge(u as RegionId, v, edge_weight(c as f64 / total as f64));
            }
        }
        TransitionGraph { counts, graph }
    }

    pub fn graph(&self) -> &WeightedDigraph {
        &self.graph
    }

    pub fn count(&self, from: RegionId, to: RegionId) -> u64 {
        let row = &self.counts[from as usize];
        row.binary_search_by_key(&to, |e| e.0).map_or(0, |i| row[i].1)
    }

    /// Estimated `P(to | from)`; zero for unobserved pairs.
    pub fn probability(&self, from: RegionId, to: RegionId) -> f64 {
        let total: u64 = self.counts[from as usize].iter().map(|e| e.1).sum();
        if total == 0 {
            0.0
        } else {
            self.count(from, to) as f64 / total as f64
        }
    }

    pub fn successors(&self, from: RegionId) -> &[(RegionId, u64)] {
        &self.counts[from as usize]
    }
}

/// `-ln p`, with `-0` folded to `0`.
pub fn edge_weight(p: f64) -> f64 {
    let w = -p.ln();
    if w == 0.0 {
        0.0
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuntimeEntry {
    pub mean_s: f64,
    pub count: u64,
}

/// Sparse `(r_B, r_A, r_C) → seconds` for one interval, stored with key
/// order `(r_B, r_C, r_A)` so all entries into a given exit are adjacent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuntimeTensor {
    entries: BTreeMap<(RegionId, RegionId, RegionId), RuntimeEntry>,
}

impl RuntimeTensor {
    pub fn get(&self, b: RegionId, a: RegionId, c: RegionId) -> Option<RuntimeEntry> {
        self.entries.get(&(b, c, a)).copied()
    }

    pub fn insert(&mut self, b: RegionId, a: RegionId, c: RegionId, entry: RuntimeEntry) {
        self.entries.insert((b, c, a), entry);
    }

    /// Count-weighted mean of `T(b, ·, c)` over every observed entry region.
    pub fn mean_into(&self, b: RegionId, c: RegionId) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0u64);
        for (_, e) in self.entries.range((b, c, 0)..=(b, c, RegionId::MAX)) {
            sum += e.mean_s * e.count as f64;
            n += e.count;
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries as `(b, a, c, entry)`, sorted by `(b, a, c)`.
    pub fn iter_sorted(&self) -> Vec<(RegionId, RegionId, RegionId, RuntimeEntry)> {
        let mut v: Vec<_> = self.entries.iter().map(|(&(b, c, a), &e)| (b, a, c, e)).collect();
        v.sort_by_key(|x| (x.0, x.1, x.2));
        v
    }
}

/// Categorical distribution over ranks `1..=k_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankDistribution {
    pub probs: Vec<f64>,
}

impl RankDistribution {
    pub fn uniform(k_max: usize) -> Self {
        RankDistribution {
            probs: vec![1.0 / k_max as f64; k_max],
        }
    }

    /// Normalizes rank counts; all-zero counts fall back to uniform.
    pub fn from_counts(counts: &[u64]) -> Self {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Self::uniform(counts.len().max(1));
        }
        RankDistribution {
            probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        }
    }

    pub fn k_max(&self) -> usize {
        self.probs.len()
    }

    /// Draws a 1-based rank.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let dist = WeightedIndex::new(&self.probs).expect("probabilities are valid");
        dist.sample(rng) + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityModel {
    pub n_regions: usize,
    pub n_mobility: u32,
    pub graphs: Vec<TransitionGraph>,
    pub tensors: Vec<RuntimeTensor>,
    pub ranks: RankDistribution,
}

impl MobilityModel {
    /// Builds graphs and tensors from sections. Each move into a new region
    /// is attributed to the interval in which that region was entered, and
    /// each crossing of `r_B` to the interval in which `r_B` was entered.
    /// Jumps between non-adjacent regions are skipped.
    pub fn build(sections: &[Section], map: &GridMap, n_mobility: u32, k_max: usize) -> Self {
        type Acc = (HashMap<(u32, RegionId, RegionId), u64>, HashMap<(u32, RegionId, RegionId, RegionId), (i64, u64)>);
        let (moves, crossings): Acc = sections
            .par_iter()
            .fold(
                || (HashMap::new(), HashMap::new()),
                |(mut moves, mut crossings): Acc, s| {
                    let v = visits(&s.records);
                    for w in v.windows(2) {
                        if map.is_adjacent(w[0].region, w[1].region) {
                            let t = interval_of(w[1].entered, n_mobility);
                            *moves.entry((t, w[0].region, w[1].region)).or_default() += 1;
                        }
                    }
                    for w in v.windows(3) {
                        let (a, b, c) = (w[0].region, w[1].region, w[2].region);
                        if map.is_adjacent(a, b) && map.is_adjacent(b, c) {
                            let t = interval_of(w[1].entered, n_mobility);
                            let e = crossings.entry((t, b, a, c)).or_default();
                            e.0 += w[2].entered - w[1].entered;
                            e.1 += 1;
                        }
                    }
                    (moves, crossings)
                },
            )
            .reduce(
                || (HashMap::new(), HashMap::new()),
                |(mut m1, mut c1), (m2, c2)| {
                    for (k, v) in m2 {
                        *m1.entry(k).or_default() += v;
                    }
                    for (k, v) in c2 {
                        let e = c1.entry(k).or_default();
                        e.0 += v.0;
                        e.1 += v.1;
                    }
                    (m1, c1)
                },
            );

        let n = map.n_regions();
        let mut counts = vec![vec![Vec::new(); n]; n_mobility as usize];
        for ((t, u, v), c) in moves {
            counts[t as usize][u as usize].push((v, c));
        }
        let graphs = counts
            .into_par_iter()
            .map(|mut rows| {
                rows.iter_mut().for_each(|r| r.sort_unstable());
                TransitionGraph::from_counts(rows)
            })
            .collect();
        let mut tensors = vec![RuntimeTensor::default(); n_mobility as usize];
        for ((t, b, a, c), (sum, count)) in crossings {
            tensors[t as usize].insert(
                b,
                a,
                c,
                RuntimeEntry {
                    mean_s: sum as f64 / count as f64,
                    count,
                },
            );
        }
        MobilityModel {
            n_regions: n,
            n_mobility,
            graphs,
            tensors,
            ranks: RankDistribution::uniform(k_max),
        }
    }

    pub fn graph(&self, interval: u32) -> &TransitionGraph {
        &self.graphs[interval as usize]
    }

    pub fn tensor(&self, interval: u32) -> &RuntimeTensor {
        &self.tensors[interval as usize]
    }

    pub fn n_edges(&self) -> usize {
        self.graphs.iter().map(|g| g.graph.n_edges()).sum()
    }

    pub fn n_tensor_entries(&self) -> usize {
        self.tensors.iter().map(RuntimeTensor::len).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_edges(std::io::BufWriter::new(std::fs::File::create(dir.join(EDGES_FILE))?))?;
        self.write_tensor(std::io::BufWriter::new(std::fs::File::create(dir.join(TENSOR_FILE))?))?;
        self.write_ranks(std::fs::File::create(dir.join(RANKS_FILE))?)?;
        Ok(())
    }

    pub fn load(dir: &Path, n_regions: usize, n_mobility: u32) -> Result<Self> {
        let open = |f: &str| -> Result<std::io::BufReader<std::fs::File>> {
            Ok(std::io::BufReader::new(std::fs::File::open(dir.join(f))?))
        };
        let graphs = read_edges(open(EDGES_FILE)?, n_regions, n_mobility)?;
        let tensors = read_tensor(open(TENSOR_FILE)?, n_regions, n_mobility)?;
        let ranks = read_ranks(open(RANKS_FILE)?)?;
        Ok(MobilityModel {
            n_regions,
            n_mobility,
            graphs,
            tensors,
            ranks,
        })
    }

    /// Rows `t,from,to,count,prob`.
    pub fn write_edges<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "from", "to", "count", "prob"])?;
        for (t, g) in self.graphs.iter().enumerate() {
            for (u, row) in g.counts.iter().enumerate() {
                let total: u64 = row.iter().map(|e| e.1).sum();
                for &(v, c) in row {
                    w.write_record([
                        t.to_string(),
                        u.to_string(),
                        v.to_string(),
                        c.to_string(),
                        format!("{:?}", c as f64 / total as f64),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rows `t,rB,rA,rC,mean_s,count`.
    pub fn write_tensor<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "rB", "rA", "rC", "mean_s", "count"])?;
        for (t, tensor) in self.tensors.iter().enumerate() {
            for (b, a, c, e) in tensor.iter_sorted() {
                w.write_record([
                    t.to_string(),
                    b.to_string(),
                    a.to_string(),
                    c.to_string(),
                    format!("{:?}", e.mean_s),
                    e.count.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rows `k,prob`.
    pub fn write_ranks<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["k", "prob"])?;
        for (i, p) in self.ranks.probs.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{p:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, file: &str, row: usize) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::artifact(file, format!("bad field {i} on row {row}")))
}

fn read_edges<R: Read>(reader: R, n_regions: usize, n_mobility: u32) -> Result<Vec<TransitionGraph>> {
    let mut counts = vec![vec![Vec::new(); n_regions]; n_mobility as usize];
    let mut rdr = csv::Reader::from_reader(reader);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let t: usize = field(&rec, 0, EDGES_FILE, i + 2)?;
        let u: usize = field(&rec, 1, EDGES_FILE, i + 2)?;
        let v: RegionId = field(&rec, 2, EDGES_FILE, i + 2)?;
        let c: u64 = field(&rec, 3, EDGES_FILE, i + 2)?;
        if t >= n_mobility as usize || u >= n_regions || v as usize >= n_regions || c == 0 {
            return Err(Error::artifact(EDGES_FILE, format!("row {} out of range", i + 2)));
        }
        counts[t][u].push((v, c));
    }
    Ok(counts
        .into_iter()
        .map(|mut rows| {
            rows.iter_mut().for_each(|r| r.sort_unstable());
            TransitionGraph::from_counts(rows)
        })
        .collect())
}

fn read_tensor<R: Read>(reader: R, n_regions: usize, n_mobility: u32) -> Result<Vec<RuntimeTensor>> {
    let mut tensors = vec![RuntimeTensor::default(); n_mobility as usize];
    let mut rdr = csv::Reader::from_reader(reader);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let t: usize = field(&rec, 0, TENSOR_FILE, i + 2)?;
        let b: RegionId = field(&rec, 1, TENSOR_FILE, i + 2)?;
        let a: RegionId = field(&rec, 2, TENSOR_FILE, i + 2)?;
        let c: RegionId = field(&rec, 3, TENSOR_FILE, i + 2)?;
        let mean_s: f64 = field(&rec, 4, TENSOR_FILE, i + 2)?;
        let count: u64 = field(&rec, 5, TENSOR_FILE, i + 2)?;
        if t >= n_mobility as usize || [a, b, c].iter().any(|&r| r as usize >= n_regions) {
            return Err(Error::artifact(TENSOR_FILE, format!("row {} out of range", i + 2)));
        }
        tensors[t].insert(b, a, c, RuntimeEntry { mean_s, count });
    }
    Ok(tensors)
}

fn read_ranks<R: Read>(reader: R) -> Result<RankDistribution> {
    let mut probs = Vec::new();
    let mut rdr = csv::Reader::from_reader(reader);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let k: usize = field(&rec, 0, RANKS_FILE, i + 2)?;
        if k != i + 1 {
            return Err(Error::artifact(RANKS_FILE, "ranks must be listed 1, 2, ..."));
        }
        probs.push(field(&rec, 1, RANKS_FILE, i + 2)?);
    }
    if probs.is_empty() {
        return Err(Error::artifact(RANKS_FILE, "empty distribution"));
    }
    Ok(RankDistribution { probs })
}

/// Rank of a section's own region sequence among the `k_max` most probable
/// paths of its midpoint interval, or `None` when the section cannot be
/// ranked (same endpoints or unreachable). Sections that revisit a region,
/// or whose path is not among the first `k_max`, count as rank `k_max`.
pub fn section_rank(section: &Section, model: &MobilityModel, k_max: usize) -> Option<usize> {
    let path: Vec<RegionId> = visits(&section.records).iter().map(|v| v.region).collect();
    let (src, dst) = (*path.first()?, *path.last()?);
    let mid = (section.start.record.time + section.end.record.time) / 2;
    let t = interval_of(mid, model.n_mobility);
    let g = model.graph(t).graph();
    let mut distinct = path.clone();
    distinct.sort_unstable();
    distinct.dedup();
    // only paths no heavier than the actual one can outrank it
    let bound = if distinct.len() == path.len() { g.path_weight(&path) } else { None };
    let found = k_shortest_paths_within(g, src, dst, k_max, bound.unwrap_or(f64::NEG_INFINITY)).ok()?;
    Some(
        found
            .paths
            .iter()
            .position(|p| p.nodes == path)
            .map_or(k_max, |i| i + 1),
    )
}

/// Empirical rank distribution over an evenly strided sample of at most
/// `max_sections` sections. Empty input gives the uniform distribution.
pub fn estimate_rank_distribution(
    sections: &[Section],
    model: &MobilityModel,
    k_max: usize,
    max_sections: usize,
) -> RankDistribution {
    let step = sections.len().div_ceil(max_sections.max(1)).max(1);
    let sample: Vec<&Section> = sections.iter().step_by(step).collect();
    let ranks: Vec<Option<usize>> = sample.par_iter().map(|s| section_rank(s, model, k_max)).collect();
    let mut counts = vec![0u64; k_max];
    for r in ranks.into_iter().flatten() {
        counts[r - 1] += 1;
    }
    RankDistribution::from_counts(&counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stations::{Station, StationKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn section(points: &[(RegionId, i64)]) -> Section {
        let records: Vec<Record> = points.iter().map(|&(r, t)| Record::new(r, t)).collect();
        let st = |i: usize, kind| Station {
            vehicle_id: "v".into(),
            record: records[i],
            kind,
            index: i,
        };
        Section {
            start: st(0, StationKind::Depart),
            end: st(records.len() - 1, StationKind::Arrive),
            records: records.clone(),
        }
    }

    #[test]
    fn crossing_time_is_entry_to_exit() {
        // regions 0 -> 1 -> 2 on the bottom row; left 0 at 100, reached 2 at 400
        let map = GridMap::default();
        let s = section(&[(0, 0), (0, 50), (1, 100), (1, 250), (2, 400), (2, 450)]);
        let m = MobilityModel::build(&[s], &map, 24, 10);
        let e = m.tensor(0).get(1, 0, 2).unwrap();
        assert_eq!(e.mean_s, 300.0);
        assert_eq!(e.count, 1);
        assert_eq!(m.tensor(0).mean_into(1, 2), Some(300.0));
        assert_eq!(m.tensor(0).get(2, 1, 0), None);
    }

    #[test]
    fn single_departure_has_probability_one() {
        let map = GridMap::default();
        let m = MobilityModel::build(&[section(&[(0, 0), (1, 60)])], &map, 24, 10);
        assert_eq!(m.graph(0).probability(0, 1), 1.0);
        assert_eq!(m.graph(0).graph().weight(0, 1), Some(0.0));
        assert!(m.graph(0).graph().weight(0, 1).unwrap().is_sign_positive());
    }

    #[test]
    fn quarter_probability_weight() {
        assert!((edge_weight(0.25) - 1.3863).abs() < 1e-4);
        let map = GridMap::default();
        // from region 13: three moves to 14, one to 12
        let mut secs = vec![section(&[(13, 0), (12, 60)])];
        for i in 0..3 {
            secs.push(section(&[(13, i * 10), (14, 60 + i * 10)]));
        }
        let m = MobilityModel::build(&secs, &map, 24, 10);
        assert!((m.graph(0).graph().weight(13, 12).unwrap() - 4f64.ln()).abs() < 1e-12);
        let total: f64 = m.graph(0).successors(13).iter().map(|&(v, _)| m.graph(0).probability(13, v)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_adjacent_jumps_are_ignored() {
        let map = GridMap::default();
        let m = MobilityModel::build(&[section(&[(0, 0), (5, 60), (6, 120)])], &map, 24, 10);
        assert_eq!(m.graph(0).count(0, 5), 0);
        assert_eq!(m.graph(0).count(5, 6), 1);
        assert!(m.tensor(0).is_empty());
    }

    #[test]
    fn transitions_use_entry_interval() {
        let map = GridMap::default();
        let m = MobilityModel::build(&[section(&[(0, 3500), (1, 3700)])], &map, 24, 10);
        assert_eq!(m.graph(0).count(0, 1), 0);
        assert_eq!(m.graph(1).count(0, 1), 1);
    }

    #[test]
    fn empty_sections_give_uniform_ranks() {
        let map = GridMap::default();
        let m = MobilityModel::build(&[], &map, 24, 10);
        assert_eq!(m.n_edges(), 0);
        let r = estimate_rank_distribution(&[], &m, 10, 100);
        assert_eq!(r, RankDistribution::uniform(10));
    }

    #[test]
    fn sections_on_best_paths_rank_first() {
        let map = GridMap::default();
        let mut secs = Vec::new();
        for i in 0..5 {
            secs.push(section(&[(0, i), (1, 100 + i), (2, 200 + i)]));
        }
        secs.push(section(&[(0, 7), (13, 100), (2, 200)]));
        let mut m = MobilityModel::build(&secs, &map, 24, 10);
        m.ranks = estimate_rank_distribution(&secs, &m, 10, 1000);
        assert!((m.ranks.probs[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.ranks.probs[1] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn bounded_rank_matches_full_search() {
        use crate::city::{generate_synthetic_city, SyntheticCitySpec};
        use crate::ksp::k_shortest_paths;
        use crate::stations::{extract_sections, extract_stations_parking, SpeedTable};
        let map = GridMap::default();
        let scheme = crate::grid::TimeScheme::default();
        let city = generate_synthetic_city(&SyntheticCitySpec::new(map.clone(), 40, 3, 2)).unwrap();
        let speeds = SpeedTable::estimate(&city.traces, &map, &scheme, 10, 300);
        let sections: Vec<Section> = city
            .traces
            .iter()
            .flat_map(|t| extract_sections(t, &extract_stations_parking(t, &speeds, 9.0, &scheme)))
            .collect();
        let m = MobilityModel::build(&sections, &map, 24, 10);
        for s in &sections {
            let path: Vec<RegionId> = visits(&s.records).iter().map(|v| v.region).collect();
            let t = interval_of((s.start.record.time + s.end.record.time) / 2, 24);
            let naive = k_shortest_paths(m.graph(t).graph(), path[0], *path.last().unwrap(), 10)
                .ok()
                .map(|f| f.paths.iter().position(|p| p.nodes == path).map_or(10, |i| i + 1));
            assert_eq!(section_rank(s, &m, 10), naive);
        }
    }

    #[test]
    fn rank_sampling_follows_probabilities() {
        let r = RankDistribution {
            probs: vec![0.0, 1.0, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..50).all(|_| r.sample(&mut rng) == 2));
    }

    #[test]
    fn save_load_round_trip() {
        let map = GridMap::default();
        let secs = vec![
            section(&[(0, 0), (1, 100), (2, 400), (14, 700)]),
            section(&[(0, 4000), (13, 4100), (14, 4300)]),
        ];
        let mut m = MobilityModel::build(&secs, &map, 24, 10);
        m.ranks = RankDistribution::from_counts(&[3, 1, 0, 0, 0, 0, 0, 0, 0, 1]);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = MobilityModel::load(dir.path(), map.n_regions(), 24).unwrap();
        assert_eq!(back, m);
    }
}
