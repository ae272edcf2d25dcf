//! Online impostor synthesis.
//!
//! A query names a user's real record. The stations around it form a
//! template; each template station is replaced by semantically similar fake
//! regions, consecutive fakes are paired so their distances track the real
//! ones, the gaps are filled with probable paths, and the paths are timed to
//! match the real section durations.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assignment::max_weight_matching;
use crate::error::{Error, Result};
use crate::grid::{interval_len, interval_of, GridMap, Record, RegionId, Trace};
use crate::ksp::{k_shortest_paths_avoiding, WeightedDigraph};
use crate::mobility::RuntimeTensor;
use crate::offline::OfflineModel;
use crate::semantics::SemanticModel;
use crate::stations::{Station, StationKind};

/// Identifies a station for fake reuse: its region and published interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StationKey {
    pub region: RegionId,
    pub interval: u32,
}

/// Fake records already issued per user and station, kept in an
/// append-only log. The first entry for a key wins.
#[derive(Debug)]
pub struct FakeRecordStore {
    n_user: u32,
    entries: BTreeMap<String, BTreeMap<StationKey, Vec<Record>>>,
    log: Option<(PathBuf, File)>,
}

impl FakeRecordStore {
    pub fn in_memory(n_user: u32) -> Self {
        FakeRecordStore {
            n_user,
            entries: BTreeMap::new(),
            log: None,
        }
    }

    /// Replays the log at `path`, then appends new entries to it.
    pub fn open(path: &Path, n_user: u32) -> Result<Self> {
        let mut store = FakeRecordStore::in_memory(n_user);
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.is_empty() {
                    continue;
                }
                let (user, key, fakes) =
                    parse_log_line(&line).ok_or_else(|| Error::artifact(path.display().to_string(), format!("bad line {}", i + 1)))?;
                store.entries.entry(user).or_default().entry(key).or_insert(fakes);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        store.log = Some((path.to_path_buf(), file));
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        self.log.as_ref().map(|(p, _)| p.as_path())
    }

    pub fn key(&self, record: &Record) -> StationKey {
        StationKey {
            region: record.region,
            interval: record.interval(self.n_user),
        }
    }

    pub fn get(&self, user: &str, key: &StationKey) -> Option<&[Record]> {
        self.entries.get(user)?.get(key).map(Vec::as_slice)
    }

    pub fn is_special(&self, user: &str, record: &Record) -> bool {
        self.get(user, &self.key(record)).is_some()
    }

    /// Stores fakes for a station unless it already has some. Returns
    /// whether anything was stored.
    pub fn insert(&mut self, user: &str, key: StationKey, fakes: Vec<Record>) -> Result<bool> {
        let slot = self.entries.entry(user.to_string()).or_default();
        if slot.contains_key(&key) {
            return Ok(false);
        }
        if let Some((_, file)) = &mut self.log {
            let line = format_log_line(user, &key, &fakes);
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        slot.insert(key, fakes);
        Ok(true)
    }

    /// Number of stored stations.
    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `user<TAB>region<TAB>interval<TAB>r:t;r:t...`. Tabs keep arbitrary user
/// ids (commas included) unambiguous.
fn format_log_line(user: &str, key: &StationKey, fakes: &[Record]) -> String {
    let list: Vec<String> = fakes.iter().map(|f| format!("{}:{}", f.region, f.time)).collect();
    format!("{}\t{}\t{}\t{}\n", user.replace(['\t', '\n'], " "), key.region, key.interval, list.join(";"))
}

fn parse_log_line(line: &str) -> Option<(String, StationKey, Vec<Record>)> {
    let mut parts = line.split('\t');
    let user = parts.next()?.to_string();
    let region = parts.next()?.parse().ok()?;
    let interval = parts.next()?.parse().ok()?;
    let fakes = parts
        .next()?
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|f| {
            let (r, t) = f.split_once(':')?;
            Some(Record::new(r.parse().ok()?, t.parse().ok()?))
        })
        .collect::<Option<Vec<_>>>()?;
    Some((user, StationKey { region, interval }, fakes))
}

/// A real record to protect, with the user's surrounding trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryContext {
    pub user_id: String,
    pub target: Record,
    pub trajectory: Vec<Record>,
    pub n: usize,
}

impl QueryContext {
    /// Takes the records within `window_s` seconds of `target`, adding the
    /// target itself when the trace has no record at that time.
    pub fn around(trace: &Trace, target: Record, window_s: i64, n: usize) -> Self {
        let mut trajectory = trace.window(target.time - window_s, target.time + window_s).to_vec();
        let at = trajectory.partition_point(|r| r.time < target.time);
        if trajectory.get(at).is_none_or(|r| r.time != target.time) {
            trajectory.insert(at, target);
        }
        QueryContext {
            user_id: trace.vehicle_id.clone(),
            target,
            trajectory,
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StationOrigin {
    Real(StationKind),
    /// The queried record standing in for a missing start or end station.
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemplateStation {
    pub record: Record,
    pub origin: StationOrigin,
    pub special: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub stations: Vec<TemplateStation>,
}

impl Template {
    pub fn start_time(&self) -> i64 {
        self.stations[0].record.time
    }

    pub fn end_time(&self) -> i64 {
        self.stations.last().unwrap().record.time
    }
}

/// Start is the nearest special station at or before the target, else the
/// nearest ordinary one, else the target itself; the end is chosen the same
/// way after the target. Every station in between is kept.
pub fn select_template(target: &Record, stations: &[Station], is_special: impl Fn(&Record) -> bool) -> Template {
    let real = |s: &Station| TemplateStation {
        record: s.record,
        origin: StationOrigin::Real(s.kind),
        special: is_special(&s.record),
    };
    let virtual_target = TemplateStation {
        record: *target,
        origin: StationOrigin::Target,
        special: false,
    };
    let before: Vec<&Station> = stations.iter().filter(|s| s.record.time <= target.time).collect();
    let after: Vec<&Station> = stations.iter().filter(|s| s.record.time > target.time).collect();
    let start = before
        .iter()
        .rev()
        .find(|s| is_special(&s.record))
        .or(before.last())
        .map_or(virtual_target, |s| real(s));
    let end = after
        .iter()
        .find(|s| is_special(&s.record))
        .or(after.first())
        .map_or(virtual_target, |s| real(s));
    let mut out = vec![start];
    out.extend(
        stations
            .iter()
            .filter(|s| s.record.time > start.record.time && s.record.time < end.record.time)
            .map(real),
    );
    out.push(end);
    out.dedup_by(|b, a| a.record.time >= b.record.time);
    Template { stations: out }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    /// The station's region has no cluster; every clustered region is a
    /// candidate.
    Unclustered,
    /// The cluster has no usable member besides the station; the nearest
    /// other cluster supplies candidates.
    Singleton,
    /// Every stored fake for a special station was unusable.
    SpecialExhausted,
    /// Stored fakes were reused although some lie outside the station's
    /// cluster (they came from an earlier fallback).
    StoredOffCluster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub records: Vec<Record>,
    pub special: bool,
    pub fallback: Option<Fallback>,
}

/// Regions of the station's cluster other than the station itself.
pub fn ordinary_candidates(region: RegionId, semantics: &SemanticModel) -> Result<Vec<RegionId>> {
    let c = semantics.cluster_of(region).ok_or(Error::UnclusteredRegion(region))?;
    let rest: Vec<RegionId> = semantics.members(c).iter().copied().filter(|&r| r != region).collect();
    if rest.is_empty() {
        Err(Error::EmptyCandidateSet(region))
    } else {
        Ok(rest)
    }
}

/// Candidate fake records for a station. `excluded` regions (the real query
/// region) never appear.
pub fn candidate_fakes(
    station: &TemplateStation,
    stored: Option<&[Record]>,
    semantics: &SemanticModel,
    excluded: RegionId,
) -> Result<Candidates> {
    let time = station.record.time;
    let region = station.record.region;
    let mut fallback = None;
    if let Some(stored) = stored {
        let usable: Vec<Record> = stored
            .iter()
            .filter(|f| f.region != excluded && f.region != region)
            .map(|f| Record::new(f.region, time))
            .collect();
        if !usable.is_empty() {
            let own = semantics.cluster_of(region);
            let off = usable.iter().any(|f| own.is_none() || semantics.cluster_of(f.region) != own);
            return Ok(Candidates {
                records: usable,
                special: true,
                fallback: off.then_some(Fallback::StoredOffCluster),
            });
        }
        fallback = Some(Fallback::SpecialExhausted);
    }
    let keep = |rs: Vec<RegionId>| -> Vec<Record> {
        rs.into_iter()
            .filter(|&r| r != excluded && r != region)
            .map(|r| Record::new(r, time))
            .collect()
    };
    let regions = match ordinary_candidates(region, semantics) {
        Ok(rs) => {
            let recs = keep(rs);
            if !recs.is_empty() {
                return Ok(Candidates {
                    records: recs,
                    special: false,
                    fallback,
                });
            }
            let c = semantics.cluster_of(region).expect("clustered");
            fallback = Some(Fallback::Singleton);
            semantics
                .nearest_other_cluster(c)
                .map(|o| semantics.members(o).to_vec())
                .unwrap_or_default()
        }
        Err(Error::EmptyCandidateSet(_)) => {
            let c = semantics.cluster_of(region).expect("clustered");
            fallback = Some(Fallback::Singleton);
            semantics
                .nearest_other_cluster(c)
                .map(|o| semantics.members(o).to_vec())
                .unwrap_or_default()
        }
        Err(Error::UnclusteredRegion(_)) => {
            fallback = Some(Fallback::Unclustered);
            semantics.graph.regions.clone()
        }
        Err(e) => return Err(e),
    };
    let records = keep(regions);
    if records.is_empty() {
        return Err(Error::EmptyCandidateSet(region));
    }
    Ok(Candidates {
        records,
        special: false,
        fallback,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSelection {
    /// `(start index, end index)` into the candidate lists.
    pub pairs: Vec<(usize, usize)>,
    /// Fewer than `n` pairs were matched and some were reused.
    pub cyclic: bool,
}

/// Matches start and end candidates so that pair distances track
/// `real_distance`, then keeps the `n` matched pairs closest to it.
pub fn match_station_pairs(
    map: &GridMap,
    starts: &[Record],
    ends: &[Record],
    real_distance: f64,
    n: usize,
) -> PairSelection {
    assert!(!starts.is_empty() && !ends.is_empty(), "empty candidate set");
    let weight: Vec<Vec<f64>> = starts
        .iter()
        .map(|s| {
            ends.iter()
                .map(|e| -(real_distance - map.region_distance(s.region, e.region)).abs())
                .collect()
        })
        .collect();
    let matched = max_weight_matching(&weight);
    let mut pairs: Vec<(f64, usize, usize)> = matched
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (-weight[i][j], i, j)))
        .collect();
    pairs.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then_with(|| starts[a.1].region.cmp(&starts[b.1].region))
            .then_with(|| ends[a.2].region.cmp(&ends[b.2].region))
    });
    let cyclic = pairs.len() < n;
    let chosen = (0..n).map(|i| (pairs[i % pairs.len()].1, pairs[i % pairs.len()].2)).collect();
    PairSelection { pairs: chosen, cyclic }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fill {
    pub path: Vec<RegionId>,
    /// Rank requested from the distribution.
    pub k: usize,
    /// Fewer than `k` paths existed and the last one was used.
    pub rank_clamped: bool,
    /// No path existed in the graph; the greedy geographic path was used.
    pub geographic: bool,
}

/// The `k`-th most probable path from `s` to `e`, avoiding `blocked`.
pub fn fill_section(
    graph: &WeightedDigraph,
    map: &GridMap,
    s: RegionId,
    e: RegionId,
    k: usize,
    blocked: &[RegionId],
) -> Fill {
    if s == e {
        return Fill {
            path: vec![s],
            k,
            rank_clamped: false,
            geographic: false,
        };
    }
    match k_shortest_paths_avoiding(graph, s, e, k, blocked) {
        Ok(found) if !found.paths.is_empty() => {
            let idx = k.min(found.paths.len()) - 1;
            Fill {
                path: found.paths[idx].nodes.clone(),
                k,
                rank_clamped: found.paths.len() < k,
                geographic: false,
            }
        }
        _ => Fill {
            path: geographic_path(map, s, e, blocked),
            k,
            rank_clamped: false,
            geographic: true,
        },
    }
}

/// Steps to the unvisited, unblocked neighbor closest to `dst` (lowest id on
/// ties) until `dst` is reached.
pub fn geographic_path(map: &GridMap, src: RegionId, dst: RegionId, blocked: &[RegionId]) -> Vec<RegionId> {
    let mut path = vec![src];
    let mut visited: HashSet<RegionId> = HashSet::from([src]);
    let mut cur = src;
    while cur != dst {
        let next = map
            .neighbors(cur)
            .filter(|r| *r == dst || (!visited.contains(r) && !blocked.contains(r)))
            .min_by(|a, b| {
                map.region_distance(*a, dst)
                    .total_cmp(&map.region_distance(*b, dst))
                    .then(a.cmp(b))
            });
        match next {
            Some(r) => {
                visited.insert(r);
                path.push(r);
                cur = r;
            }
            None => {
                path.push(dst);
                break;
            }
        }
    }
    path
}

/// A timed region of an impostor trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpostorRecord {
    pub region: RegionId,
    /// Estimated arrival, seconds on the trace clock.
    pub et: f64,
    /// Published interval of `et`.
    pub cloak: u32,
}

/// Crossing times along `path` scaled to fill `[t_s, t_e]`. The first
/// region's crossing uses the count-weighted mean over every observed entry
/// region; missing entries take `fallback_s`. Returns the records and
/// whether the modeled total was zero (uniform spacing used instead).
pub fn add_timestamps(
    path: &[RegionId],
    t_s: i64,
    t_e: i64,
    tensor: &RuntimeTensor,
    fallback_s: f64,
    n_user: u32,
) -> (Vec<ImpostorRecord>, bool) {
    let cloak = |et: f64| interval_of(et.floor() as i64, n_user);
    if path.len() == 1 {
        let mut out = vec![ImpostorRecord {
            region: path[0],
            et: t_s as f64,
            cloak: cloak(t_s as f64),
        }];
        if t_e > t_s {
            out.push(ImpostorRecord {
                region: path[0],
                et: t_e as f64,
                cloak: cloak(t_e as f64),
            });
        }
        return (out, false);
    }
    let m = path.len();
    // tau[j] is the time spent in path[j] before entering path[j + 1]
    let mut tau = Vec::with_capacity(m - 1);
    tau.push(tensor.mean_into(path[0], path[1]).filter(|&s| s > 0.0).unwrap_or(fallback_s));
    for j in 1..m - 1 {
        tau.push(
            tensor
                .get(path[j], path[j - 1], path[j + 1])
                .map(|e| e.mean_s)
                .filter(|&s| s > 0.0)
                .unwrap_or(fallback_s),
        );
    }
    let phi: f64 = tau.iter().sum();
    let span = (t_e - t_s) as f64;
    let zero_phi = !(phi > 0.0);
    let mut psi = 0.0;
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let et = if j == m - 1 {
            t_e as f64
        } else if zero_phi {
            t_s as f64 + span * j as f64 / (m - 1) as f64
        } else {
            t_s as f64 + span / phi * psi
        };
        out.push(ImpostorRecord {
            region: path[j],
            et,
            cloak: cloak(et),
        });
        if j < m - 1 {
            psi += tau[j];
        }
    }
    (out, zero_phi)
}

/// How one fake station was chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FakeStation {
    pub record: Record,
    /// The real station it stands for.
    pub real: Record,
    pub special: bool,
    pub fallback: Option<Fallback>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SectionProvenance {
    pub fill: Fill,
    pub zero_phi: bool,
    /// The pair was reused because too few pairs were matched.
    pub cyclic: bool,
    /// The head had no match and took its best candidate directly.
    pub unmatched: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpostorTrace {
    pub records: Vec<ImpostorRecord>,
    pub stations: Vec<FakeStation>,
    pub sections: Vec<SectionProvenance>,
}

impl ImpostorTrace {
    /// Region occupied at `time`: the last record reached by then.
    pub fn region_at(&self, time: i64) -> RegionId {
        let t = time as f64;
        let i = self.records.partition_point(|r| r.et <= t);
        self.records[i.saturating_sub(1)].region
    }

    pub fn any_fallback(&self) -> bool {
        self.stations.iter().any(|s| s.fallback.is_some())
            || self
                .sections
                .iter()
                .any(|s| s.fill.geographic || s.fill.rank_clamped || s.zero_phi || s.cyclic || s.unmatched)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisOutput {
    pub template: Template,
    pub impostors: Vec<ImpostorTrace>,
    /// One fake record per impostor at the target time.
    pub fakes: Vec<Record>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable seed derived from a base seed and a list of parts.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ p))
}

pub struct Synthesizer<'m> {
    model: &'m OfflineModel,
    seed: u64,
}

impl<'m> Synthesizer<'m> {
    pub fn new(model: &'m OfflineModel) -> Self {
        Synthesizer {
            model,
            seed: model.params.rng_seed,
        }
    }

    pub fn with_seed(model: &'m OfflineModel, seed: u64) -> Self {
        Synthesizer { model, seed }
    }

    pub fn model(&self) -> &OfflineModel {
        self.model
    }

    /// Rank for one fake section: the same user, endpoints and hour always
    /// get the same draw.
    fn rank_for(&self, user: &str, s: RegionId, e: RegionId, t: u32) -> usize {
        let seed = derive_seed(self.seed, &[fnv1a(user), s as u64, e as u64, t as u64]);
        self.model.mobility.ranks.sample(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn template_for(&self, ctx: &QueryContext, store: &FakeRecordStore) -> Result<Template> {
        let trace = Trace::new(ctx.user_id.clone(), ctx.trajectory.clone());
        let stations = self.model.segment(&trace)?.stations;
        Ok(select_template(&ctx.target, &stations, |r| store.is_special(&ctx.user_id, r)))
    }

    pub fn synthesize(&self, ctx: &QueryContext, store: &mut FakeRecordStore) -> Result<SynthesisOutput> {
        let model = self.model;
        let map = &model.map;
        let scheme = &model.scheme;
        let target = ctx.target;
        let template = self.template_for(ctx, store)?;
        let n = ctx.n;
        if n == 0 {
            return Ok(SynthesisOutput {
                template,
                impostors: Vec::new(),
                fakes: Vec::new(),
            });
        }
        let stations = &template.stations;
        let cands: Vec<Candidates> = stations
            .iter()
            .map(|s| {
                let stored = match s.origin {
                    StationOrigin::Real(_) => store.get(&ctx.user_id, &store.key(&s.record)),
                    StationOrigin::Target => None,
                };
                candidate_fakes(s, stored, &model.semantics, target.region)
            })
            .collect::<Result<_>>()?;
        let fake = |j: usize, rec: Record| FakeStation {
            record: rec,
            real: stations[j].record,
            special: cands[j].special,
            fallback: cands[j].fallback,
        };

        let mut impostors: Vec<ImpostorTrace>;
        if stations.len() == 1 {
            let mut order: Vec<usize> = (0..cands[0].records.len()).collect();
            let seed = derive_seed(self.seed, &[fnv1a(&ctx.user_id), target.time as u64, 1]);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let cyclic = order.len() < n;
            impostors = (0..n)
                .map(|i| {
                    let rec = cands[0].records[order[i % order.len()]];
                    let t = stations[0].record.time;
                    ImpostorTrace {
                        records: vec![ImpostorRecord {
                            region: rec.region,
                            et: t as f64,
                            cloak: interval_of(t, scheme.n_user),
                        }],
                        stations: vec![fake(0, rec)],
                        sections: if cyclic {
                            vec![SectionProvenance {
                                fill: Fill { path: vec![rec.region], k: 1, rank_clamped: false, geographic: false },
                                zero_phi: false,
                                cyclic: true,
                                unmatched: false,
                            }]
                        } else {
                            Vec::new()
                        },
                    }
                })
                .collect();
        } else {
            // choose fake stations along the chain
            let real_d = |j: usize| map.region_distance(stations[j].record.region, stations[j + 1].record.region);
            let first = match_station_pairs(map, &cands[0].records, &cands[1].records, real_d(0), n);
            let mut chains: Vec<Vec<FakeStation>> = first
                .pairs
                .iter()
                .map(|&(a, b)| vec![fake(0, cands[0].records[a]), fake(1, cands[1].records[b])])
                .collect();
            let mut cyclic_flags = vec![vec![first.cyclic]; n];
            let mut unmatched_flags = vec![vec![false]; n];
            for j in 1..stations.len() - 1 {
                let next = &cands[j + 1].records;
                let d = real_d(j);
                let weight: Vec<Vec<f64>> = chains
                    .iter()
                    .map(|c| {
                        let head = c.last().unwrap().record.region;
                        next.iter().map(|e| -(d - map.region_distance(head, e.region)).abs()).collect()
                    })
                    .collect();
                let matched = max_weight_matching(&weight);
                for (i, chain) in chains.iter_mut().enumerate() {
                    let (col, unmatched) = match matched[i] {
                        Some(c) => (c, false),
                        None => {
                            let best = (0..next.len())
                                .max_by(|&a, &b| weight[i][a].total_cmp(&weight[i][b]).then(b.cmp(&a)))
                                .unwrap();
                            (best, true)
                        }
                    };
                    chain.push(fake(j + 1, next[col]));
                    cyclic_flags[i].push(false);
                    unmatched_flags[i].push(unmatched);
                }
            }

            // target interval window, used to keep paths off the real region
            let len = interval_len(scheme.n_user)? as i64;
            let win_start = target.time.div_euclid(len) * len;
            let win_end = win_start + len;
            let fallback_s = model.fallback_crossing_s();

            impostors = Vec::with_capacity(n);
            for (i, chain) in chains.into_iter().enumerate() {
                let mut records: Vec<ImpostorRecord> = Vec::new();
                let mut sections = Vec::with_capacity(stations.len() - 1);
                for j in 0..stations.len() - 1 {
                    let (t_s, t_e) = (stations[j].record.time, stations[j + 1].record.time);
                    let (s, e) = (chain[j].record.region, chain[j + 1].record.region);
                    let t = interval_of((t_s + t_e).div_euclid(2), scheme.n_mobility);
                    let blocked: &[RegionId] = if t_s < win_end && t_e >= win_start { &[target.region] } else { &[] };
                    let k = self.rank_for(&ctx.user_id, s, e, t);
                    let fill = fill_section(model.mobility.graph(t).graph(), map, s, e, k, blocked);
                    let (timed, zero_phi) =
                        add_timestamps(&fill.path, t_s, t_e, model.mobility.tensor(t), fallback_s, scheme.n_user);
                    let skip = usize::from(!records.is_empty());
                    records.extend(timed.into_iter().skip(skip));
                    sections.push(SectionProvenance {
                        fill,
                        zero_phi,
                        cyclic: cyclic_flags[i][j],
                        unmatched: unmatched_flags[i][j],
                    });
                }
                impostors.push(ImpostorTrace {
                    records,
                    stations: chain,
                    sections,
                });
            }
        }

        // the stations just forged become special
        for (j, s) in stations.iter().enumerate() {
            if matches!(s.origin, StationOrigin::Real(_)) && !cands[j].special {
                let fakes = impostors.iter().map(|imp| imp.stations[j].record).collect();
                store.insert(&ctx.user_id, store.key(&s.record), fakes)?;
            }
        }

        let fakes = impostors
            .iter()
            .map(|imp| Record::new(imp.region_at(target.time), target.time))
            .collect();
        Ok(SynthesisOutput {
            template,
            impostors,
            fakes,
        })
    }
}

/// Every way `out` breaks the synthesis guarantees for `ctx`, as readable
/// messages. Empty when the output is sound.
pub fn check_output(ctx: &QueryContext, out: &SynthesisOutput, model: &OfflineModel) -> Vec<String> {
    let mut bad = Vec::new();
    let n_user = model.scheme.n_user;
    let target = ctx.target;
    let target_iv = target.interval(n_user);
    let m = out.template.stations.len();
    if out.impostors.len() != ctx.n || out.fakes.len() != ctx.n {
        bad.push(format!("expected {} impostors, got {}", ctx.n, out.impostors.len()));
    }
    let (t_s, t_e) = (out.template.start_time() as f64, out.template.end_time() as f64);
    for (i, imp) in out.impostors.iter().enumerate() {
        if imp.stations.len() != m {
            bad.push(format!("impostor {i}: {} stations, template has {m}", imp.stations.len()));
        }
        for fs in &imp.stations {
            let own = model.semantics.cluster_of(fs.real.region);
            let same = own.is_some() && model.semantics.cluster_of(fs.record.region) == own;
            if !same && fs.fallback.is_none() {
                bad.push(format!("impostor {i}: station {} outside cluster of {}", fs.record.region, fs.real.region));
            }
            if fs.record.region == target.region {
                bad.push(format!("impostor {i}: fake station on the real region"));
            }
        }
        if imp.records.first().map(|r| r.et) != Some(t_s) || imp.records.last().map(|r| r.et) != Some(t_e) {
            bad.push(format!("impostor {i}: ET does not span [{t_s}, {t_e}]"));
        }
        if imp.records.windows(2).any(|w| !(w[1].et > w[0].et)) {
            bad.push(format!("impostor {i}: ET not strictly increasing"));
        }
        if imp.records.iter().any(|r| r.region == target.region && r.cloak == target_iv)
            || imp.region_at(target.time) == target.region
        {
            bad.push(format!("impostor {i}: real region at the target interval"));
        }
    }
    if out.fakes.iter().any(|f| f.region == target.region) {
        bad.push("fake query record on the real region".into());
    }
    bad
}

/// The real record and its fakes in a seeded random order. Returns the
/// blended list and the position of the real record.
pub fn blend_query_set(real: Record, fakes: &[Record], seed: u64) -> (Vec<Record>, usize) {
    let mut all: Vec<(bool, Record)> = std::iter::once((true, real))
        .chain(fakes.iter().map(|f| (false, *f)))
        .collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let truth = all.iter().position(|(is_real, _)| *is_real).unwrap();
    (all.into_iter().map(|(_, r)| r).collect(), truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::RuntimeEntry;
    use crate::semantics::{FlowHistogram, SemanticModel};

    fn st(region: RegionId, time: i64, kind: StationKind) -> Station {
        Station {
            vehicle_id: "u".into(),
            record: Record::new(region, time),
            kind,
            index: 0,
        }
    }

    #[test]
    fn special_start_beats_nearer_ordinary() {
        let target = Record::new(50, 10 * 3600);
        let stations = [
            st(1, 8 * 3600, StationKind::Depart),
            st(2, 9 * 3600, StationKind::Arrive),
            st(3, 12 * 3600, StationKind::Arrive),
        ];
        let special = |r: &Record| r.region == 1;
        let t = select_template(&target, &stations, special);
        let regions: Vec<_> = t.stations.iter().map(|s| s.record.region).collect();
        assert_eq!(regions, vec![1, 2, 3]);
        assert!(t.stations[0].special);
    }

    #[test]
    fn nearest_ordinary_on_both_sides() {
        let target = Record::new(50, 10 * 3600);
        let stations = [
            st(1, 8 * 3600, StationKind::Depart),
            st(2, 9 * 3600, StationKind::Arrive),
            st(3, 12 * 3600, StationKind::Arrive),
            st(4, 13 * 3600, StationKind::Depart),
        ];
        let t = select_template(&target, &stations, |_| false);
        let regions: Vec<_> = t.stations.iter().map(|s| s.record.region).collect();
        assert_eq!(regions, vec![2, 3]);
    }

    #[test]
    fn target_closes_template_without_later_station() {
        let target = Record::new(50, 10 * 3600);
        let t = select_template(&target, &[st(2, 9 * 3600, StationKind::Depart)], |_| false);
        assert_eq!(t.stations.len(), 2);
        assert_eq!(t.stations[1].origin, StationOrigin::Target);
        assert_eq!(t.stations[1].record, target);
        let t = select_template(&target, &[st(2, 11 * 3600, StationKind::Arrive)], |_| false);
        assert_eq!(t.stations[0].origin, StationOrigin::Target);
        let t = select_template(&target, &[], |_| false);
        assert_eq!(t.stations.len(), 1);
    }

    /// Regions 0..3 share one flow profile, 4 has its own, 5 and 6 another.
    fn toy_semantics() -> SemanticModel {
        let h = |i: [u64; 4], o: [u64; 4]| FlowHistogram {
            n_in: i.to_vec(),
            n_out: o.to_vec(),
        };
        let flows = vec![
            h([0, 9, 0, 0], [0, 0, 9, 0]),
            h([0, 9, 0, 0], [0, 0, 9, 0]),
            h([0, 9, 0, 0], [0, 0, 9, 0]),
            h([0, 9, 0, 0], [0, 0, 9, 0]),
            h([9, 0, 0, 0], [0, 0, 0, 9]),
            h([0, 0, 9, 0], [0, 9, 0, 0]),
            h([0, 0, 9, 1], [0, 9, 0, 0]),
            h([0, 0, 0, 0], [0, 0, 0, 0]),
        ];
        SemanticModel::build(&flows, 4, 0.5, 0.5, 1e-6, 0.75).unwrap()
    }

    fn tstation(region: RegionId) -> TemplateStation {
        TemplateStation {
            record: Record::new(region, 100),
            origin: StationOrigin::Real(StationKind::Arrive),
            special: false,
        }
    }

    #[test]
    fn ordinary_candidates_exclude_own_region() {
        let sem = toy_semantics();
        let c = candidate_fakes(&tstation(1), None, &sem, 99).unwrap();
        let regions: Vec<_> = c.records.iter().map(|r| r.region).collect();
        assert_eq!(regions, vec![0, 2, 3]);
        assert!(c.records.iter().all(|r| r.time == 100));
        assert_eq!(c.fallback, None);
        // the query region is never offered
        let c = candidate_fakes(&tstation(1), None, &sem, 2).unwrap();
        assert!(c.records.iter().all(|r| r.region != 2));
    }

    #[test]
    fn special_station_uses_stored_fakes() {
        let sem = toy_semantics();
        let stored: Vec<Record> = [0, 2, 3, 5].iter().map(|&r| Record::new(r, 40)).collect();
        let c = candidate_fakes(&tstation(1), Some(&stored), &sem, 99).unwrap();
        assert!(c.special);
        assert_eq!(c.records.iter().map(|r| r.region).collect::<Vec<_>>(), vec![0, 2, 3, 5]);
        assert!(c.records.iter().all(|r| r.time == 100));
    }

    #[test]
    fn singleton_and_unclustered_fallbacks() {
        let sem = toy_semantics();
        assert!(matches!(ordinary_candidates(4, &sem), Err(Error::EmptyCandidateSet(4))));
        assert!(matches!(ordinary_candidates(7, &sem), Err(Error::UnclusteredRegion(7))));
        let c = candidate_fakes(&tstation(4), None, &sem, 99).unwrap();
        assert_eq!(c.fallback, Some(Fallback::Singleton));
        assert!(!c.records.is_empty());
        let c = candidate_fakes(&tstation(7), None, &sem, 99).unwrap();
        assert_eq!(c.fallback, Some(Fallback::Unclustered));
        assert_eq!(c.records.len(), 7);
    }

    #[test]
    fn single_candidate_pair_is_reused() {
        let map = GridMap::default();
        let sel = match_station_pairs(&map, &[Record::new(0, 0)], &[Record::new(5, 0)], 3000.0, 3);
        assert_eq!(sel.pairs, vec![(0, 0); 3]);
        assert!(sel.cyclic);
    }

    #[test]
    fn two_by_two_prefers_zero_delta() {
        // s1-e1 and s2-e2 are 1 km apart, the crossed pairs 6 km
        let map = GridMap::with_size(12, 12);
        let at = |c, r| Record::new(map.region_at(c, r), 0);
        let starts = [at(0, 0), at(0, 11)];
        let ends = [at(1, 0), at(1, 11)];
        let sel = match_station_pairs(&map, &starts, &ends, 1000.0, 2);
        let mut pairs = sel.pairs.clone();
        pairs.sort();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert!(!sel.cyclic);
    }

    #[test]
    fn keeps_the_n_closest_pairs() {
        // 100 m cells; matched pair lengths 2.9, 7.0 and 3.2 km against 3 km
        let map = GridMap::new(31.2, 121.4, 100.0, 100, 101).unwrap();
        let at = |c, r| Record::new(map.region_at(c, r), 0);
        let starts = [at(0, 0), at(0, 50), at(0, 100)];
        let ends = [at(29, 0), at(70, 50), at(32, 100)];
        let sel = match_station_pairs(&map, &starts, &ends, 3000.0, 2);
        assert_eq!(sel.pairs, vec![(0, 0), (2, 2)]);
    }

    fn diamond_map() -> (GridMap, WeightedDigraph) {
        // on a 2×2 map every region touches every other
        let map = GridMap::with_size(2, 2);
        let mut g = WeightedDigraph::new(4);
        g.add_edge(0, 1, 1.0);
        g.add_edge(1, 3, 1.0);
        g.add_edge(0, 2, 0.5);
        g.add_edge(2, 3, 2.0);
        (map, g)
    }

    #[test]
    fn fill_direct_edge() {
        let (map, g) = diamond_map();
        let f = fill_section(&g, &map, 0, 1, 1, &[]);
        assert_eq!(f.path, vec![0, 1]);
        assert!(!f.geographic && !f.rank_clamped);
    }

    #[test]
    fn fill_second_rank_takes_second_path() {
        let (map, g) = diamond_map();
        assert_eq!(fill_section(&g, &map, 0, 3, 2, &[]).path, vec![0, 2, 3]);
        let f = fill_section(&g, &map, 0, 3, 5, &[]);
        assert_eq!(f.path, vec![0, 2, 3]);
        assert!(f.rank_clamped);
    }

    #[test]
    fn unreachable_uses_geographic_path() {
        let (map, g) = diamond_map();
        let f = fill_section(&g, &map, 3, 0, 1, &[]);
        assert!(f.geographic);
        assert_eq!(f.path, vec![3, 0]);
        let big = GridMap::default();
        let p = geographic_path(&big, 0, 3, &[1]);
        assert_eq!(p.first(), Some(&0));
        assert_eq!(p.last(), Some(&3));
        assert!(!p.contains(&1));
        assert!(p.windows(2).all(|w| big.is_adjacent(w[0], w[1])));
    }

    #[test]
    fn timestamps_scale_to_real_duration() {
        // crossing 0 takes 250 s and crossing 1 takes 250 s; real span 1000 s
        let mut tensor = RuntimeTensor::default();
        tensor.insert(0, 5, 1, RuntimeEntry { mean_s: 250.0, count: 1 });
        tensor.insert(1, 0, 2, RuntimeEntry { mean_s: 250.0, count: 1 });
        let (recs, zero) = add_timestamps(&[0, 1, 2], 0, 1000, &tensor, 120.0, 288);
        assert!(!zero);
        let ets: Vec<f64> = recs.iter().map(|r| r.et).collect();
        assert_eq!(ets, vec![0.0, 500.0, 1000.0]);
        assert_eq!(recs[1].cloak, 1);
        assert_eq!(recs[2].et, 1000.0);
    }

    #[test]
    fn missing_crossings_use_fallback() {
        let (recs, _) = add_timestamps(&[0, 1, 2, 3], 100, 400, &RuntimeTensor::default(), 60.0, 288);
        let ets: Vec<f64> = recs.iter().map(|r| r.et).collect();
        assert_eq!(ets, vec![100.0, 200.0, 300.0, 400.0]);
    }

    #[test]
    fn weighted_mean_over_entry_regions() {
        let mut tensor = RuntimeTensor::default();
        tensor.insert(0, 5, 1, RuntimeEntry { mean_s: 100.0, count: 3 });
        tensor.insert(0, 6, 1, RuntimeEntry { mean_s: 500.0, count: 1 });
        assert_eq!(tensor.mean_into(0, 1), Some(200.0));
    }

    #[test]
    fn store_log_replays_and_keeps_first() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.log");
        let key = StationKey { region: 3, interval: 96 };
        {
            let mut s = FakeRecordStore::open(&path, 288).unwrap();
            assert!(s.insert("a,b", key, vec![Record::new(1, 5), Record::new(2, 5)]).unwrap());
            assert!(!s.insert("a,b", key, vec![Record::new(9, 5)]).unwrap());
        }
        let s = FakeRecordStore::open(&path, 288).unwrap();
        assert_eq!(s.get("a,b", &key).unwrap(), &[Record::new(1, 5), Record::new(2, 5)]);
        assert_eq!(s.len(), 1);
        assert!(s.get("other", &key).is_none());
    }

    #[test]
    fn blended_set_hides_real_position() {
        let real = Record::new(1, 0);
        let fakes = [Record::new(2, 0), Record::new(3, 0)];
        let (a, ta) = blend_query_set(real, &fakes, 7);
        let (b, tb) = blend_query_set(real, &fakes, 7);
        assert_eq!((a.clone(), ta), (b, tb));
        assert_eq!(a[ta], real);
        assert_eq!(a.len(), 3);
    }
}
