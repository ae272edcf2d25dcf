//! Synthetic city: commuters driving between home, work and leisure regions
//! on a grid road network, with known region classes as ground truth.
//!
//! Vehicles log a record every `sample_period_s` seconds while driving and
//! nothing while parked, so a parked period shows up as a long dwell of
//! consecutive records in one region.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::io::Write;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{GridMap, Record, RegionId, Trace, SECONDS_PER_DAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LatentClass {
    Home,
    Work,
    Leisure,
    Transit,
}

impl LatentClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            LatentClass::Home => "home",
            LatentClass::Work => "work",
            LatentClass::Leisure => "leisure",
            LatentClass::Transit => "transit",
        }
    }
}

impl FromStr for LatentClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "home" => Ok(LatentClass::Home),
            "work" => Ok(LatentClass::Work),
            "leisure" => Ok(LatentClass::Leisure),
            "transit" => Ok(LatentClass::Transit),
            other => Err(Error::config(format!("unknown class '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassLayout {
    pub classes: Vec<LatentClass>,
}

impl ClassLayout {
    /// Scatters classes over the map: roughly 35% home, 25% work, 15%
    /// leisure and the rest transit, with at least one region of each of the
    /// first three.
    pub fn scattered(map: &GridMap, seed: u64) -> Self {
        let n = map.n_regions();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a70_u64);
        let mut classes: Vec<LatentClass> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                if u < 0.35 {
                    LatentClass::Home
                } else if u < 0.60 {
                    LatentClass::Work
                } else if u < 0.75 {
                    LatentClass::Leisure
                } else {
                    LatentClass::Transit
                }
            })
            .collect();
        for (i, class) in [LatentClass::Home, LatentClass::Work, LatentClass::Leisure]
            .into_iter()
            .enumerate()
        {
            if !classes.contains(&class) && i < n {
                classes[i] = class;
            }
        }
        ClassLayout { classes }
    }

    pub fn regions_of(&self, class: LatentClass) -> Vec<RegionId> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == class)
            .map(|(i, _)| i as RegionId)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCitySpec {
    pub map: GridMap,
    pub layout: ClassLayout,
    pub n_agents: usize,
    pub n_days: u32,
    /// Standard deviation of departure times, minutes.
    pub schedule_noise_min: f64,
    /// Chance of an evening stop at a leisure region.
    pub leisure_prob: f64,
    pub sample_period_s: u32,
    pub rng_seed: u64,
}

impl SyntheticCitySpec {
    pub fn new(map: GridMap, n_agents: usize, n_days: u32, rng_seed: u64) -> Self {
        let layout = ClassLayout::scattered(&map, rng_seed);
        SyntheticCitySpec {
            map,
            layout,
            n_agents,
            n_days,
            schedule_noise_min: 20.0,
            leisure_prob: 0.4,
            sample_period_s: 30,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.map.validate()?;
        if self.layout.classes.len() != self.map.n_regions() {
            return Err(Error::config("class layout does not cover the map"));
        }
        for class in [LatentClass::Home, LatentClass::Work, LatentClass::Leisure] {
            if !self.layout.classes.contains(&class) {
                return Err(Error::config(format!("layout has no {} region", class.as_str())));
            }
        }
        if self.sample_period_s == 0 {
            return Err(Error::config("sample period must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: String,
    pub home: RegionId,
    pub work: RegionId,
    pub leisure: Vec<RegionId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trip {
    pub agent: usize,
    pub from: RegionId,
    pub to: RegionId,
    pub depart: i64,
    pub arrive: i64,
    pub path: Vec<RegionId>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCity {
    pub traces: Vec<Trace>,
    /// Latent class of every region.
    pub labels: Vec<LatentClass>,
    pub agents: Vec<Agent>,
    pub trips: Vec<Trip>,
}

impl SyntheticCity {
    pub fn n_records(&self) -> usize {
        self.traces.iter().map(Trace::len).sum()
    }
}

/// Free-flow speed of a cell: every fourth row and column is an arterial.
fn cell_speed_kmh(map: &GridMap, region: RegionId) -> f64 {
    let (c, r) = map.col_row(region);
    if c % 4 == 1 || r % 4 == 1 {
        50.0
    } else {
        30.0
    }
}

fn congestion(second_of_day: u32) -> f64 {
    let h = second_of_day as f64 / 3600.0;
    if (7.0..9.5).contains(&h) || (16.5..19.0).contains(&h) {
        0.6
    } else if !(6.0..22.0).contains(&h) {
        1.2
    } else {
        1.0
    }
}

#[derive(PartialEq)]
struct HeapItem(f64, RegionId);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Fastest free-flow routes, cached per origin.
struct Router<'a> {
    map: &'a GridMap,
    trees: HashMap<RegionId, Vec<Option<RegionId>>>,
}

impl<'a> Router<'a> {
    fn new(map: &'a GridMap) -> Self {
        Router {
            map,
            trees: HashMap::new(),
        }
    }

    fn tree(&mut self, src: RegionId) -> &Vec<Option<RegionId>> {
        let map = self.map;
        self.trees.entry(src).or_insert_with(|| {
            let n = map.n_regions();
            let mut dist = vec![f64::INFINITY; n];
            let mut pred = vec![None; n];
            let mut heap = BinaryHeap::new();
            dist[src as usize] = 0.0;
            heap.push(HeapItem(0.0, src));
            while let Some(HeapItem(d, u)) = heap.pop() {
                if d > dist[u as usize] {
                    continue;
                }
                for v in map.neighbors(u) {
                    let speed = (cell_speed_kmh(map, u) + cell_speed_kmh(map, v)) / 2.0;
                    let nd = d + map.region_distance(u, v) / speed;
                    if nd < dist[v as usize] {
                        dist[v as usize] = nd;
                        pred[v as usize] = Some(u);
                        heap.push(HeapItem(nd, v));
                    }
                }
            }
            pred
        })
    }

    fn route(&mut self, src: RegionId, dst: RegionId) -> Vec<RegionId> {
        let tree = self.tree(src);
        let mut path = vec![dst];
        let mut cur = dst;
        while cur != src {
            cur = tree[cur as usize].expect("grid is connected");
            path.push(cur);
        }
        path.reverse();
        path
    }
}

/// Drives `path` starting at `depart`; appends sampled records and returns
/// the arrival time.
fn drive(
    map: &GridMap,
    path: &[RegionId],
    depart: i64,
    sample_s: u32,
    out: &mut Vec<Record>,
) -> i64 {
    // (leg start, leg end) times, with the leg's midpoint marking the border
    let mut legs = Vec::with_capacity(path.len().saturating_sub(1));
    let mut t = depart as f64;
    for w in path.windows(2) {
        let sod = (t as i64).rem_euclid(SECONDS_PER_DAY as i64) as u32;
        let kmh = (cell_speed_kmh(map, w[0]) + cell_speed_kmh(map, w[1])) / 2.0 * congestion(sod);
        let secs = map.region_distance(w[0], w[1]) / (kmh / 3.6);
        legs.push((t, t + secs));
        t += secs;
    }
    let arrive = t.round() as i64;
    let region_at = |time: f64| -> RegionId {
        for (i, &(s, e)) in legs.iter().enumerate() {
            if time < e {
                return if time < (s + e) / 2.0 { path[i] } else { path[i + 1] };
            }
        }
        *path.last().unwrap()
    };
    let mut ts = depart;
    while ts < arrive {
        out.push(Record::new(region_at(ts as f64), ts));
        ts += sample_s as i64;
    }
    out.push(Record::new(*path.last().unwrap(), arrive));
    arrive
}

fn pick_near<R: Rng>(
    map: &GridMap,
    rng: &mut R,
    pool: &[RegionId],
    anchor: RegionId,
    draws: usize,
    exclude: RegionId,
) -> RegionId {
    let mut best: Option<RegionId> = None;
    for _ in 0..draws {
        let &c = pool.choose(rng).expect("non-empty pool");
        if c == exclude {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => map.region_distance(anchor, c) < map.region_distance(anchor, b),
        };
        if better {
            best = Some(c);
        }
    }
    best.unwrap_or_else(|| *pool.iter().find(|&&c| c != exclude).unwrap_or(&pool[0]))
}

pub fn generate_synthetic_city(spec: &SyntheticCitySpec) -> Result<SyntheticCity> {
    spec.validate()?;
    let map = &spec.map;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let homes = spec.layout.regions_of(LatentClass::Home);
    let works = spec.layout.regions_of(LatentClass::Work);
    let leisures = spec.layout.regions_of(LatentClass::Leisure);

    let agents: Vec<Agent> = (0..spec.n_agents)
        .map(|i| {
            let home = *homes.choose(&mut rng).unwrap();
            let work = pick_near(map, &mut rng, &works, home, 3, home);
            let leisure = (0..2)
                .map(|_| pick_near(map, &mut rng, &leisures, work, 3, work))
                .collect();
            Agent {
                id: format!("car{i:05}"),
                home,
                work,
                leisure,
            }
        })
        .collect();

    let sigma = spec.schedule_noise_min.max(0.0) * 60.0;
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid std-dev");
    let jitter = |rng: &mut ChaCha8Rng| -> f64 {
        if sigma > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        }
    };

    let mut router = Router::new(map);
    let mut traces = Vec::with_capacity(agents.len());
    let mut trips = Vec::new();
    for (ai, agent) in agents.iter().enumerate() {
        let personal = jitter(&mut rng).clamp(-3.0 * sigma, 3.0 * sigma);
        let mut records = Vec::new();
        for day in 0..spec.n_days as i64 {
            let base = day * SECONDS_PER_DAY as i64;
            let morning = 7.75 * 3600.0 + personal + jitter(&mut rng);
            let depart = base + morning.clamp(5.0 * 3600.0, 10.5 * 3600.0) as i64;
            let mut legs = vec![(agent.home, agent.work)];
            let evening_stop = rng.random_bool(spec.leisure_prob);
            let leisure = *agent.leisure.choose(&mut rng).unwrap();
            let evening = 17.0 * 3600.0 + personal + jitter(&mut rng);
            let stay = rng.random_range(1.5 * 3600.0..3.0 * 3600.0);
            if evening_stop {
                legs.push((agent.work, leisure));
                legs.push((leisure, agent.home));
            } else {
                legs.push((agent.work, agent.home));
            }

            let mut t = depart;
            for (li, (from, to)) in legs.into_iter().enumerate() {
                if li == 1 {
                    let planned = base + evening.clamp(14.5 * 3600.0, 20.0 * 3600.0) as i64;
                    t = planned.max(t + 3600);
                } else if li == 2 {
                    t += stay as i64;
                }
                let path = router.route(from, to);
                let arrive = drive(map, &path, t, spec.sample_period_s, &mut records);
                trips.push(Trip {
                    agent: ai,
                    from,
                    to,
                    depart: t,
                    arrive,
                    path,
                });
                t = arrive;
            }
        }
        records.dedup_by_key(|r| r.time);
        traces.push(Trace::new(agent.id.clone(), records));
    }

    Ok(SyntheticCity {
        traces,
        labels: spec.layout.classes.clone(),
        agents,
        trips,
    })
}

/// Writes ground-truth labels as `region,class`.
pub fn write_labels<W: Write>(writer: W, labels: &[LatentClass]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["region", "class"])?;
    for (r, c) in labels.iter().enumerate() {
        w.write_record([r.to_string().as_str(), c.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels<R: std::io::Read>(reader: R) -> Result<Vec<LatentClass>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let region: usize = rec[0].parse().map_err(|_| Error::MalformedRow {
            row: i + 2,
            reason: "bad region".into(),
        })?;
        if region != out.len() {
            return Err(Error::MalformedRow {
                row: i + 2,
                reason: "labels must list regions in order".into(),
            });
        }
        out.push(rec[1].parse()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_spec(agents: usize, days: u32, seed: u64) -> SyntheticCitySpec {
        let mut spec = SyntheticCitySpec::new(GridMap::default(), agents, days, seed);
        spec.schedule_noise_min = 0.0;
        spec
    }

    #[test]
    fn single_agent_day_has_commute_trips() {
        for seed in 0..10 {
            let city = generate_synthetic_city(&quiet_spec(1, 1, seed)).unwrap();
            let a = &city.agents[0];
            assert!(city.trips.len() == 2 || city.trips.len() == 3);
            assert_eq!(city.trips[0].from, a.home);
            assert_eq!(city.trips[0].to, a.work);
            assert_eq!(city.trips[1].from, a.work);
            assert_eq!(city.trips.last().unwrap().to, a.home);
            assert_eq!(city.labels[a.home as usize], LatentClass::Home);
            assert_eq!(city.labels[a.work as usize], LatentClass::Work);
        }
    }

    #[test]
    fn same_seed_same_traces() {
        let a = generate_synthetic_city(&SyntheticCitySpec::new(GridMap::default(), 20, 3, 9)).unwrap();
        let b = generate_synthetic_city(&SyntheticCitySpec::new(GridMap::default(), 20, 3, 9)).unwrap();
        assert_eq!(a.traces, b.traces);
        let c = generate_synthetic_city(&SyntheticCitySpec::new(GridMap::default(), 20, 3, 10)).unwrap();
        assert_ne!(a.traces, c.traces);
    }

    #[test]
    fn records_move_between_adjacent_cells() {
        let spec = SyntheticCitySpec::new(GridMap::default(), 30, 2, 3);
        let city = generate_synthetic_city(&spec).unwrap();
        for t in &city.traces {
            assert!(t.gaps(&spec.map).is_empty(), "gap in {}", t.vehicle_id);
            assert!(t.records.windows(2).all(|w| w[0].time < w[1].time));
        }
    }

    #[test]
    fn labels_round_trip() {
        let layout = ClassLayout::scattered(&GridMap::default(), 1);
        let mut buf = Vec::new();
        write_labels(&mut buf, &layout.classes).unwrap();
        assert_eq!(read_labels(buf.as_slice()).unwrap(), layout.classes);
    }
}
