//! Stations (meaningful stops) and the sections between them.
//!
//! Taxi traces mark stations by occupancy flips. Private-car traces mark them
//! by dwells: a run of consecutive records in one region that lasts longer
//! than `numerator / v(r, t)` hours, where `v` is the typical speed there.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{interval_of, GridMap, Record, RegionId, TimeScheme, Trace};

/// Speed assumed when the seed data contains no movement at all.
const DEFAULT_SPEED_KMH: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StationKind {
    /// Something ends here: counts as flow-in.
    Arrive,
    /// Something starts here: counts as flow-out.
    Depart,
}

impl StationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StationKind::Arrive => "arrive",
            StationKind::Depart => "depart",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub vehicle_id: String,
    pub record: Record,
    pub kind: StationKind,
    /// Position of `record` in the source trace.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub start: Station,
    pub end: Station,
    /// Records from `start` to `end`, both included.
    pub records: Vec<Record>,
}

impl Section {
    pub fn duration(&self) -> i64 {
        self.end.record.time - self.start.record.time
    }
}

/// Mean speed per region and mobility interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedTable {
    n_mobility: u32,
    n_regions: usize,
    kmh: Vec<f64>,
    samples: Vec<u32>,
    global_kmh: f64,
    min_samples: usize,
}

impl SpeedTable {
    /// Same speed everywhere.
    pub fn uniform(n_regions: usize, n_mobility: u32, kmh: f64) -> Self {
        SpeedTable {
            n_mobility,
            n_regions,
            kmh: vec![kmh; n_regions * n_mobility as usize],
            samples: vec![u32::MAX; n_regions * n_mobility as usize],
            global_kmh: kmh,
            min_samples: 0,
        }
    }

    /// Estimates speeds from consecutive record pairs no more than
    /// `max_gap_s` apart. Displacement is measured between cell centers and
    /// attributed to the first record's region and interval.
    pub fn estimate(
        traces: &[Trace],
        map: &GridMap,
        scheme: &TimeScheme,
        min_samples: usize,
        max_gap_s: i64,
    ) -> Self {
        let n = map.n_regions();
        let nm = scheme.n_mobility;
        let cells = n * nm as usize;
        let (dist, secs, counts) = traces
            .par_iter()
            .fold(
                || (vec![0.0f64; cells], vec![0.0f64; cells], vec![0u32; cells]),
                |(mut d, mut s, mut c), trace| {
                    for w in trace.records.windows(2) {
                        let dt = w[1].time - w[0].time;
                        if dt <= 0 || dt > max_gap_s {
                            continue;
                        }
                        let i = w[0].region as usize * nm as usize
                            + interval_of(w[0].time, nm) as usize;
                        d[i] += map.region_distance(w[0].region, w[1].region);
                        s[i] += dt as f64;
                        c[i] += 1;
                    }
                    (d, s, c)
                },
            )
            .reduce(
                || (vec![0.0f64; cells], vec![0.0f64; cells], vec![0u32; cells]),
                |(mut d, mut s, mut c), (d2, s2, c2)| {
                    for i in 0..cells {
                        d[i] += d2[i];
                        s[i] += s2[i];
                        c[i] += c2[i];
                    }
                    (d, s, c)
                },
            );
        let total_d: f64 = dist.iter().sum();
        let total_s: f64 = secs.iter().sum();
        let global_kmh = if total_d > 0.0 && total_s > 0.0 {
            total_d / total_s * 3.6
        } else {
            DEFAULT_SPEED_KMH
        };
        let kmh = (0..cells)
            .map(|i| {
                if secs[i] > 0.0 && dist[i] > 0.0 {
                    dist[i] / secs[i] * 3.6
                } else {
                    f64::NAN
                }
            })
            .collect();
        SpeedTable {
            n_mobility: nm,
            n_regions: n,
            kmh,
            samples: counts,
            global_kmh,
            min_samples,
        }
    }

    pub fn n_mobility(&self) -> u32 {
        self.n_mobility
    }

    pub fn global_kmh(&self) -> f64 {
        self.global_kmh
    }

    /// Speed in km/h, falling back to the global mean for sparse cells.
    pub fn speed(&self, region: RegionId, interval: u32) -> f64 {
        let i = region as usize * self.n_mobility as usize + interval as usize;
        match (self.kmh.get(i), self.samples.get(i)) {
            (Some(&v), Some(&c)) if v > 0.0 && c as usize >= self.min_samples => v,
            _ => self.global_kmh,
        }
    }

    pub fn samples(&self, region: RegionId, interval: u32) -> u32 {
        let i = region as usize * self.n_mobility as usize + interval as usize;
        self.samples.get(i).copied().unwrap_or(0)
    }

    /// Parking threshold in seconds: `numerator_km / v` hours.
    pub fn threshold_seconds(&self, region: RegionId, interval: u32, numerator_km: f64) -> f64 {
        numerator_km / self.speed(region, interval) * 3600.0
    }

    /// Scales every defined speed, used to probe threshold monotonicity.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.kmh.iter_mut().for_each(|v| *v *= factor);
        out.global_kmh *= factor;
        out
    }

    /// Rows `region,t,kmh,samples` for every cell with samples.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["region", "t", "kmh", "samples"])?;
        for r in 0..self.n_regions {
            for t in 0..self.n_mobility as usize {
                let i = r * self.n_mobility as usize + t;
                if self.samples[i] > 0 && self.kmh[i].is_finite() {
                    w.write_record([
                        r.to_string(),
                        t.to_string(),
                        format!("{:.9}", self.kmh[i]),
                        self.samples[i].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(
        reader: R,
        n_regions: usize,
        n_mobility: u32,
        global_kmh: f64,
        min_samples: usize,
    ) -> Result<Self> {
        let cells = n_regions * n_mobility as usize;
        let mut table = SpeedTable {
            n_mobility,
            n_regions,
            kmh: vec![f64::NAN; cells],
            samples: vec![0; cells],
            global_kmh,
            min_samples,
        };
        let bad = |row: usize| Error::artifact("speeds.csv", format!("bad row {row}"));
        let mut rdr = csv::Reader::from_reader(reader);
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let r: usize = rec[0].parse().map_err(|_| bad(i + 2))?;
            let t: usize = rec[1].parse().map_err(|_| bad(i + 2))?;
            if r >= n_regions || t >= n_mobility as usize {
                return Err(bad(i + 2));
            }
            let cell = r * n_mobility as usize + t;
            table.kmh[cell] = rec[2].parse().map_err(|_| bad(i + 2))?;
            table.samples[cell] = rec[3].parse().map_err(|_| bad(i + 2))?;
        }
        Ok(table)
    }
}

/// How stations are recognized in a trace.
#[derive(Debug, Clone, Copy)]
pub enum StationMode<'a> {
    Occupancy,
    Parking { speeds: &'a SpeedTable, numerator_km: f64 },
}

/// Keeps the first of several stations sharing (region, interval, kind).
fn dedup(stations: Vec<Station>, n_user: u32) -> Vec<Station> {
    let mut seen = HashSet::new();
    stations
        .into_iter()
        .filter(|s| {
            seen.insert((
                s.record.region,
                s.record.day(),
                s.record.interval(n_user),
                s.kind,
            ))
        })
        .collect()
}

/// Occupancy flips: 0→1 is a pickup (depart), 1→0 a dropoff (arrive).
pub fn extract_stations_occupancy(trace: &Trace, scheme: &TimeScheme) -> Result<Vec<Station>> {
    let mut out = Vec::new();
    let mut prev: Option<bool> = None;
    for (i, rec) in trace.records.iter().enumerate() {
        let occ = rec.occupied.ok_or_else(|| Error::MissingSignal {
            vehicle: trace.vehicle_id.clone(),
            index: i,
        })?;
        let kind = match (prev, occ) {
            (Some(false), true) => Some(StationKind::Depart),
            (Some(true), false) => Some(StationKind::Arrive),
            _ => None,
        };
        if let Some(kind) = kind {
            out.push(Station {
                vehicle_id: trace.vehicle_id.clone(),
                record: *rec,
                kind,
                index: i,
            });
        }
        prev = Some(occ);
    }
    Ok(dedup(out, scheme.n_user))
}

/// Dwells longer than the local threshold: arrive at the dwell's first
/// record, depart at its last. The threshold is taken at the interval of the
/// first record and the comparison is strict.
pub fn extract_stations_parking(
    trace: &Trace,
    speeds: &SpeedTable,
    numerator_km: f64,
    scheme: &TimeScheme,
) -> Vec<Station> {
    let recs = &trace.records;
    let mut out = Vec::new();
    let mut start = 0;
    while start < recs.len() {
        let mut end = start;
        while end + 1 < recs.len() && recs[end + 1].region == recs[start].region {
            end += 1;
        }
        let first = recs[start];
        let dwell = (recs[end].time - first.time) as f64;
        let limit = speeds.threshold_seconds(
            first.region,
            interval_of(first.time, speeds.n_mobility()),
            numerator_km,
        );
        if end > start && dwell > limit {
            out.push(Station {
                vehicle_id: trace.vehicle_id.clone(),
                record: first,
                kind: StationKind::Arrive,
                index: start,
            });
            out.push(Station {
                vehicle_id: trace.vehicle_id.clone(),
                record: recs[end],
                kind: StationKind::Depart,
                index: end,
            });
        }
        start = end + 1;
    }
    dedup(out, scheme.n_user)
}

pub fn extract_stations(trace: &Trace, mode: StationMode<'_>, scheme: &TimeScheme) -> Result<Vec<Station>> {
    match mode {
        StationMode::Occupancy => extract_stations_occupancy(trace, scheme),
        StationMode::Parking {
            speeds,
            numerator_km,
        } => Ok(extract_stations_parking(trace, speeds, numerator_km, scheme)),
    }
}

/// One section per depart station directly followed by an arrive station.
pub fn extract_sections(trace: &Trace, stations: &[Station]) -> Vec<Section> {
    stations
        .windows(2)
        .filter(|w| w[0].kind == StationKind::Depart && w[1].kind == StationKind::Arrive)
        .filter(|w| w[0].index < w[1].index)
        .map(|w| Section {
            start: w[0].clone(),
            end: w[1].clone(),
            records: trace.records[w[0].index..=w[1].index].to_vec(),
        })
        .collect()
}

/// Writes `vehicle_id,region,interval,second_of_day,kind,day` with the
/// interval counted in `n` buckets per day.
pub fn write_stations<W: Write>(writer: W, stations: &[Station], n: u32) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["vehicle_id", "region", "interval", "second_of_day", "kind", "day"])?;
    for s in stations {
        w.write_record([
            s.vehicle_id.clone(),
            s.record.region.to_string(),
            s.record.interval(n).to_string(),
            s.record.second_of_day().to_string(),
            s.kind.as_str().to_string(),
            s.record.day().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scheme() -> TimeScheme {
        TimeScheme::default()
    }

    fn taxi(flags: &[(RegionId, i64, bool)]) -> Trace {
        Trace::new(
            "taxi",
            flags
                .iter()
                .map(|&(r, t, o)| Record {
                    region: r,
                    time: t,
                    occupied: Some(o),
                })
                .collect(),
        )
    }

    fn plain(points: &[(RegionId, i64)]) -> Trace {
        Trace::new("car", points.iter().map(|&(r, t)| Record::new(r, t)).collect())
    }

    #[test]
    fn constant_occupancy_has_no_stations() {
        let t = taxi(&[(0, 0, true), (1, 30, true), (2, 60, true)]);
        assert!(extract_stations_occupancy(&t, &scheme()).unwrap().is_empty());
    }

    #[test]
    fn pickup_then_dropoff() {
        let t = taxi(&[(0, 0, false), (1, 30, true), (2, 60, true), (3, 90, false)]);
        let s = extract_stations_occupancy(&t, &scheme()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].kind, s[0].index), (StationKind::Depart, 1));
        assert_eq!((s[1].kind, s[1].index), (StationKind::Arrive, 3));
        let sections = extract_sections(&t, &s);
        assert_eq!(sections.len(), 1);
        assert_eq!(sections[0].start.record.region, 1);
        assert_eq!(sections[0].end.record.region, 3);
    }

    #[test]
    fn pickups_in_same_region_interval_merge() {
        let t = taxi(&[
            (5, 0, false),
            (5, 10, true),
            (5, 20, false),
            (5, 40, true),
            (6, 60, true),
        ]);
        let s = extract_stations_occupancy(&t, &scheme()).unwrap();
        let departs = s.iter().filter(|s| s.kind == StationKind::Depart).count();
        assert_eq!(departs, 1);
    }

    #[test]
    fn missing_signal_is_reported() {
        let t = plain(&[(0, 0), (1, 30)]);
        assert!(matches!(
            extract_stations_occupancy(&t, &scheme()),
            Err(Error::MissingSignal { index: 0, .. })
        ));
    }

    #[test]
    fn parking_threshold_at_thirty_kmh() {
        let speeds = SpeedTable::uniform(108, 24, 30.0);
        assert!((speeds.threshold_seconds(0, 0, 9.0) - 1080.0).abs() < 1e-9);
        let long = plain(&[(1, 0), (2, 100), (2, 1300), (3, 1400)]);
        assert_eq!(extract_stations_parking(&long, &speeds, 9.0, &scheme()).len(), 2);
        let short = plain(&[(1, 0), (2, 100), (2, 1000), (3, 1100)]);
        assert!(extract_stations_parking(&short, &speeds, 9.0, &scheme()).is_empty());
    }

    #[test]
    fn dwell_equal_to_threshold_is_not_a_station() {
        let speeds = SpeedTable::uniform(108, 24, 30.0);
        let t = plain(&[(2, 0), (2, 1080)]);
        assert!(extract_stations_parking(&t, &speeds, 9.0, &scheme()).is_empty());
        let t = plain(&[(2, 0), (2, 1081)]);
        assert_eq!(extract_stations_parking(&t, &speeds, 9.0, &scheme()).len(), 2);
    }

    #[test]
    fn moving_trace_has_no_parking_stations() {
        let speeds = SpeedTable::uniform(108, 24, 30.0);
        let t = plain(&[(0, 0), (1, 5000), (2, 10000)]);
        assert!(extract_stations_parking(&t, &speeds, 9.0, &scheme()).is_empty());
        assert!(extract_stations_parking(&plain(&[]), &speeds, 9.0, &scheme()).is_empty());
    }

    #[test]
    fn threshold_uses_first_record_interval() {
        let mut speeds = SpeedTable::uniform(108, 24, 30.0);
        // region 2 is slow at hour 0 and fast at hour 1
        speeds.kmh[2 * 24] = 5.0;
        speeds.kmh[2 * 24 + 1] = 100.0;
        let t = plain(&[(2, 3000), (2, 4000)]);
        assert!(extract_stations_parking(&t, &speeds, 9.0, &scheme()).is_empty());
        let t = plain(&[(2, 3600), (2, 4000)]);
        assert_eq!(extract_stations_parking(&t, &speeds, 9.0, &scheme()).len(), 2);
    }

    #[test]
    fn office_restaurant_home_gives_two_sections() {
        // company (0) -> restaurant (2) -> home (4), parked at each
        let speeds = SpeedTable::uniform(108, 24, 30.0);
        let t = plain(&[
            (0, 0),
            (0, 3600),
            (1, 3700),
            (2, 3800),
            (2, 7000),
            (3, 7100),
            (4, 7200),
            (4, 40000),
        ]);
        let st = extract_stations_parking(&t, &speeds, 9.0, &scheme());
        let kinds: Vec<_> = st.iter().map(|s| (s.record.region, s.kind)).collect();
        use StationKind::*;
        assert_eq!(
            kinds,
            vec![(0, Arrive), (0, Depart), (2, Arrive), (2, Depart), (4, Arrive), (4, Depart)]
        );
        let sections = extract_sections(&t, &st);
        let ends: Vec<_> = sections
            .iter()
            .map(|s| (s.start.record.region, s.end.record.region))
            .collect();
        assert_eq!(ends, vec![(0, 2), (2, 4)]);
    }

    #[test]
    fn too_few_stations_give_no_sections() {
        let t = plain(&[(0, 0), (1, 10)]);
        assert!(extract_sections(&t, &[]).is_empty());
        let one = Station {
            vehicle_id: "car".into(),
            record: t.records[0],
            kind: StationKind::Depart,
            index: 0,
        };
        assert!(extract_sections(&t, &[one]).is_empty());
    }

    #[test]
    fn speed_estimate_and_fallback() {
        let map = GridMap::default();
        // 1000 m per 120 s = 30 km/h, 20 samples in region 0..1 at hour 0
        let mut recs = Vec::new();
        for i in 0..21 {
            recs.push(Record::new(if i % 2 == 0 { 0 } else { 1 }, i * 120));
        }
        let table = SpeedTable::estimate(&[Trace::new("v", recs)], &map, &scheme(), 10, 300);
        assert!((table.speed(0, 0) - 30.0).abs() < 1e-9);
        assert!((table.global_kmh() - 30.0).abs() < 1e-9);
        // region 1 has 10 samples, region 5 none
        assert!((table.speed(5, 0) - 30.0).abs() < 1e-9);
        assert_eq!(table.samples(5, 0), 0);
    }

    #[test]
    fn speed_table_round_trip() {
        let map = GridMap::default();
        let recs = (0..40).map(|i| Record::new((i % 3) as RegionId, i * 60)).collect();
        let table = SpeedTable::estimate(&[Trace::new("v", recs)], &map, &scheme(), 2, 300);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let back = SpeedTable::read_csv(buf.as_slice(), 108, 24, table.global_kmh(), 2).unwrap();
        for r in 0..108 {
            for t in 0..24 {
                assert!((back.speed(r, t) - table.speed(r, t)).abs() < 1e-6);
            }
        }
    }

    fn arb_trace() -> impl Strategy<Value = Trace> {
        prop::collection::vec((0u32..4, 1i64..2000), 0..40).prop_map(|steps| {
            let mut t = 0;
            let recs = steps
                .into_iter()
                .map(|(r, dt)| {
                    t += dt;
                    Record::new(r, t)
                })
                .collect();
            Trace::new("p", recs)
        })
    }

    proptest! {
        #[test]
        fn stations_come_from_the_trace(trace in arb_trace(), kmh in 5.0f64..80.0) {
            let speeds = SpeedTable::uniform(108, 24, kmh);
            let st = extract_stations_parking(&trace, &speeds, 9.0, &scheme());
            for s in &st {
                prop_assert_eq!(trace.records[s.index], s.record);
            }
            prop_assert!(st.windows(2).all(|w| w[0].index <= w[1].index));
        }

        #[test]
        fn slower_speeds_never_add_stations(trace in arb_trace(), kmh in 5.0f64..80.0, f in 0.05f64..1.0) {
            let fast = SpeedTable::uniform(108, 24, kmh);
            let slow = fast.scaled(f);
            let a = extract_stations_parking(&trace, &fast, 9.0, &scheme()).len();
            let b = extract_stations_parking(&trace, &slow, 9.0, &scheme()).len();
            prop_assert!(b <= a);
        }

        #[test]
        fn sections_reproduce_trace_slices(trace in arb_trace(), kmh in 5.0f64..80.0) {
            let speeds = SpeedTable::uniform(108, 24, kmh);
            let st = extract_stations_parking(&trace, &speeds, 9.0, &scheme());
            let sections = extract_sections(&trace, &st);
            let mut last_end = 0;
            for s in &sections {
                prop_assert!(s.start.record.time < s.end.record.time || s.start.index < s.end.index);
                prop_assert!(s.start.index >= last_end);
                prop_assert_eq!(&s.records[..], &trace.records[s.start.index..=s.end.index]);
                // interior holds no station
                prop_assert!(st.iter().all(|x| x.index <= s.start.index || x.index >= s.end.index));
                last_end = s.end.index;
            }
        }
    }
}
