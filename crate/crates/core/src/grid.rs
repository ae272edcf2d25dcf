//! Spatio-temporal discretization: the grid map, the day partitions and the
//! record/trace types every other module works on.
//!
//! Regions are numbered row-major from the south-west corner, so the cell in
//! column `c` and row `r` has id `r * width + c`. Coordinates are projected
//! with an equirectangular approximation anchored at the map origin.

use crate::error::{Error, Result};

pub type RegionId = u32;

pub const SECONDS_PER_DAY: u32 = 86_400;

const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Meters per degree of latitude on the mean-radius sphere.
pub const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_size_m: f64,
    pub width_cells: u32,
    pub height_cells: u32,
}

impl Default for GridMap {
    fn default() -> Self {
        GridMap {
            origin_lat: 31.20,
            origin_lon: 121.40,
            cell_size_m: 1000.0,
            width_cells: 12,
            height_cells: 9,
        }
    }
}

impl GridMap {
    pub fn new(
        origin_lat: f64,
        origin_lon: f64,
        cell_size_m: f64,
        width_cells: u32,
        height_cells: u32,
    ) -> Result<Self> {
        let map = GridMap {
            origin_lat,
            origin_lon,
            cell_size_m,
            width_cells,
            height_cells,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn with_size(width_cells: u32, height_cells: u32) -> Self {
        GridMap {
            width_cells,
            height_cells,
            ..GridMap::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_cells == 0 || self.height_cells == 0 {
            return Err(Error::config("map needs at least one cell in each direction"));
        }
        if !(self.cell_size_m > 0.0 && self.cell_size_m.is_finite()) {
            return Err(Error::config("cell_size_m must be positive"));
        }
        if !(-90.0..=90.0).contains(&self.origin_lat) || !(-180.0..=180.0).contains(&self.origin_lon)
        {
            return Err(Error::config("map origin is not a valid coordinate"));
        }
        Ok(())
    }

    pub fn n_regions(&self) -> usize {
        self.width_cells as usize * self.height_cells as usize
    }

    pub fn contains(&self, region: RegionId) -> bool {
        (region as usize) < self.n_regions()
    }

    pub fn check(&self, region: RegionId) -> Result<()> {
        if self.contains(region) {
            Ok(())
        } else {
            Err(Error::InvalidRegion(region))
        }
    }

    pub fn region_at(&self, col: u32, row: u32) -> RegionId {
        debug_assert!(col < self.width_cells && row < self.height_cells);
        row * self.width_cells + col
    }

    pub fn col_row(&self, region: RegionId) -> (u32, u32) {
        (region % self.width_cells, region / self.width_cells)
    }

    fn meters_per_degree_lon(&self) -> f64 {
        METERS_PER_DEGREE * self.origin_lat.to_radians().cos()
    }

    /// Projects a coordinate to meters east/north of the origin.
    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        (
            (lon - self.origin_lon) * self.meters_per_degree_lon(),
            (lat - self.origin_lat) * METERS_PER_DEGREE,
        )
    }

    pub fn unproject(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.origin_lat + y / METERS_PER_DEGREE,
            self.origin_lon + x / self.meters_per_degree_lon(),
        )
    }

    pub fn center_xy(&self, region: RegionId) -> (f64, f64) {
        let (c, r) = self.col_row(region);
        (
            (c as f64 + 0.5) * self.cell_size_m,
            (r as f64 + 0.5) * self.cell_size_m,
        )
    }

    pub fn center_latlon(&self, region: RegionId) -> (f64, f64) {
        let (x, y) = self.center_xy(region);
        self.unproject(x, y)
    }

    /// Cell index along one axis. Points on an internal boundary go to the
    /// lower (south or west) cell.
    fn axis_cell(&self, v: f64, cells: u32) -> Option<u32> {
        let extent = cells as f64 * self.cell_size_m;
        if !(0.0..=extent).contains(&v) {
            return None;
        }
        let idx = (v / self.cell_size_m).ceil() as i64 - 1;
        Some(idx.clamp(0, cells as i64 - 1) as u32)
    }

    pub fn xy_to_region(&self, x: f64, y: f64) -> Option<RegionId> {
        let col = self.axis_cell(x, self.width_cells)?;
        let row = self.axis_cell(y, self.height_cells)?;
        Some(self.region_at(col, row))
    }

    pub fn fix_to_region(&self, lat: f64, lon: f64) -> Result<RegionId> {
        let (x, y) = self.project(lat, lon);
        self.xy_to_region(x, y)
            .ok_or(Error::OutOfBounds { lat, lon })
    }

    /// Straight-line distance between two cell centers, in meters.
    pub fn region_distance(&self, a: RegionId, b: RegionId) -> f64 {
        let (ax, ay) = self.center_xy(a);
        let (bx, by) = self.center_xy(b);
        (ax - bx).hypot(ay - by)
    }

    /// 8-neighborhood adjacency. A region is not adjacent to itself.
    pub fn is_adjacent(&self, a: RegionId, b: RegionId) -> bool {
        if a == b {
            return false;
        }
        let (ac, ar) = self.col_row(a);
        let (bc, br) = self.col_row(b);
        ac.abs_diff(bc) <= 1 && ar.abs_diff(br) <= 1
    }

    /// Neighbors in ascending id order.
    pub fn neighbors(&self, region: RegionId) -> impl Iterator<Item = RegionId> + '_ {
        let (c, r) = self.col_row(region);
        let (c, r) = (c as i64, r as i64);
        (-1..=1i64).flat_map(move |dr| {
            (-1..=1i64).filter_map(move |dc| {
                let (nc, nr) = (c + dc, r + dr);
                if (dc == 0 && dr == 0)
                    || nc < 0
                    || nr < 0
                    || nc >= self.width_cells as i64
                    || nr >= self.height_cells as i64
                {
                    None
                } else {
                    Some(self.region_at(nc as u32, nr as u32))
                }
            })
        })
    }
}

/// Number of intervals per day used by each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeScheme {
    /// Intervals for flow distributions.
    pub n_semantic: u32,
    /// Intervals for the mobility model.
    pub n_mobility: u32,
    /// Intervals for published (cloaked) records.
    pub n_user: u32,
}

impl Default for TimeScheme {
    fn default() -> Self {
        TimeScheme {
            n_semantic: 4,
            n_mobility: 24,
            n_user: 288,
        }
    }
}

impl TimeScheme {
    pub fn validate(&self) -> Result<()> {
        for n in [self.n_semantic, self.n_mobility, self.n_user] {
            interval_len(n)?;
        }
        Ok(())
    }
}

/// Length in seconds of one of `n` equal intervals of a day.
pub fn interval_len(n: u32) -> Result<u32> {
    if n == 0 || !SECONDS_PER_DAY.is_multiple_of(n) {
        return Err(Error::InvalidBucketCount(n));
    }
    Ok(SECONDS_PER_DAY / n)
}

pub fn second_to_interval(second_of_day: u32, n: u32) -> Result<u32> {
    let len = interval_len(n)?;
    debug_assert!(second_of_day < SECONDS_PER_DAY);
    Ok(second_of_day / len)
}

/// Interval of an absolute local time. `n` must already be validated.
pub(crate) fn interval_of(time: i64, n: u32) -> u32 {
    let sod = time.rem_euclid(SECONDS_PER_DAY as i64) as u32;
    sod / (SECONDS_PER_DAY / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawFix {
    pub vehicle_id: String,
    /// Seconds since the epoch.
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub occupancy: Option<bool>,
}

impl RawFix {
    pub fn has_valid_coordinates(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// A discretized `<region, time>` pair.
///
/// `time` is local seconds counted from midnight of day 0, so the day and the
/// second of day are both recoverable and any interval index can be derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Record {
    pub region: RegionId,
    pub time: i64,
    pub occupied: Option<bool>,
}

impl Record {
    pub fn new(region: RegionId, time: i64) -> Self {
        Record {
            region,
            time,
            occupied: None,
        }
    }

    pub fn at(region: RegionId, day: i64, second_of_day: u32) -> Self {
        Record::new(region, day * SECONDS_PER_DAY as i64 + second_of_day as i64)
    }

    pub fn day(&self) -> i64 {
        self.time.div_euclid(SECONDS_PER_DAY as i64)
    }

    pub fn second_of_day(&self) -> u32 {
        self.time.rem_euclid(SECONDS_PER_DAY as i64) as u32
    }

    /// Day-relative interval index under `n` buckets.
    pub fn interval(&self, n: u32) -> u32 {
        interval_of(self.time, n)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub vehicle_id: String,
    pub records: Vec<Record>,
}

impl Trace {
    pub fn new(vehicle_id: impl Into<String>, records: Vec<Record>) -> Self {
        Trace {
            vehicle_id: vehicle_id.into(),
            records,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Indices `i` where records `i - 1` and `i` are neither in the same nor
    /// in adjacent regions.
    pub fn gaps(&self, map: &GridMap) -> Vec<usize> {
        self.records
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0].region != w[1].region && !map.is_adjacent(w[0].region, w[1].region))
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Records whose time falls within `[from, to]`.
    pub fn window(&self, from: i64, to: i64) -> &[Record] {
        let lo = self.records.partition_point(|r| r.time < from);
        let hi = self.records.partition_point(|r| r.time <= to);
        &self.records[lo..hi]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map12x9() -> GridMap {
        GridMap::default()
    }

    fn fix_at(map: &GridMap, x: f64, y: f64) -> (f64, f64) {
        // independent of `unproject`: hand-rolled equirectangular inverse
        let m_lat = 6_371_008.8 * std::f64::consts::PI / 180.0;
        let m_lon = m_lat * map.origin_lat.to_radians().cos();
        (map.origin_lat + y / m_lat, map.origin_lon + x / m_lon)
    }

    #[test]
    fn origin_corner_is_region_zero() {
        let map = map12x9();
        assert_eq!(map.fix_to_region(map.origin_lat, map.origin_lon).unwrap(), 0);
    }

    #[test]
    fn cell_center_row_major() {
        let map = map12x9();
        let (lat, lon) = fix_at(&map, 2500.0, 1500.0);
        assert_eq!(map.fix_to_region(lat, lon).unwrap(), 14);
    }

    #[test]
    fn offset_fix_lands_in_second_column() {
        let map = map12x9();
        let (lat, lon) = fix_at(&map, 1500.0, 500.0);
        assert_eq!(map.fix_to_region(lat, lon).unwrap(), 1);
    }

    #[test]
    fn boundary_goes_south_west() {
        let map = map12x9();
        assert_eq!(map.xy_to_region(1000.0, 500.0), Some(0));
        assert_eq!(map.xy_to_region(500.0, 1000.0), Some(0));
        assert_eq!(map.xy_to_region(12_000.0, 9_000.0), Some(107));
        assert_eq!(map.xy_to_region(12_000.1, 10.0), None);
    }

    #[test]
    fn outside_fix_is_an_error() {
        let map = map12x9();
        let err = map.fix_to_region(map.origin_lat - 0.01, map.origin_lon).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { .. }));
    }

    #[test]
    fn interval_examples() {
        assert_eq!(second_to_interval(0, 288).unwrap(), 0);
        assert_eq!(second_to_interval(500, 288).unwrap(), 1);
        assert_eq!(second_to_interval(86_399, 24).unwrap(), 23);
        assert!(matches!(
            second_to_interval(10, 7),
            Err(Error::InvalidBucketCount(7))
        ));
    }

    #[test]
    fn distance_examples() {
        let map = map12x9();
        assert_eq!(map.region_distance(5, 5), 0.0);
        assert!((map.region_distance(0, 1) - 1000.0).abs() < 1e-9);
        assert!((map.region_distance(0, 13) - 1414.2).abs() < 0.1);
    }

    #[test]
    fn adjacency_is_eight_neighborhood() {
        let map = map12x9();
        assert_eq!(map.neighbors(0).collect::<Vec<_>>(), vec![1, 12, 13]);
        assert_eq!(map.neighbors(13).count(), 8);
        assert!(!map.is_adjacent(13, 13));
        assert!(map.is_adjacent(13, 26));
        assert!(!map.is_adjacent(11, 12)); // row wrap
    }

    #[test]
    fn gaps_are_flagged() {
        let map = map12x9();
        let t = Trace::new(
            "v",
            vec![Record::new(0, 0), Record::new(1, 30), Record::new(5, 60)],
        );
        assert_eq!(t.gaps(&map), vec![2]);
    }

    #[test]
    fn invalid_maps_rejected() {
        assert!(GridMap::new(0.0, 0.0, 1000.0, 0, 3).is_err());
        assert!(GridMap::new(0.0, 0.0, -1.0, 3, 3).is_err());
    }

    proptest! {
        #[test]
        fn center_round_trip(x in 0.0f64..12_000.0, y in 0.0f64..9_000.0) {
            let map = map12x9();
            let (lat, lon) = map.unproject(x, y);
            let region = map.fix_to_region(lat, lon).unwrap();
            let (cx, cy) = map.center_xy(region);
            let bound = map.cell_size_m * std::f64::consts::SQRT_2 / 2.0 + 1e-6;
            prop_assert!((cx - x).hypot(cy - y) <= bound);
        }

        #[test]
        fn interval_monotone(a in 0u32..86_400, b in 0u32..86_400) {
            for n in [4u32, 24, 288] {
                let (lo, hi) = (a.min(b), a.max(b));
                prop_assert!(second_to_interval(lo, n).unwrap() <= second_to_interval(hi, n).unwrap());
                prop_assert!(second_to_interval(hi, n).unwrap() < n);
            }
        }

        #[test]
        fn triangle_inequality(a in 0u32..108, b in 0u32..108, c in 0u32..108) {
            let map = map12x9();
            let ab = map.region_distance(a, b);
            let bc = map.region_distance(b, c);
            let ac = map.region_distance(a, c);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert_eq!(ab, map.region_distance(b, a));
        }
    }

    #[test]
    fn interval_surjective() {
        for n in [4u32, 24, 288] {
            let len = SECONDS_PER_DAY / n;
            let hit: std::collections::BTreeSet<u32> = (0..SECONDS_PER_DAY)
                .step_by(len as usize)
                .map(|s| second_to_interval(s, n).unwrap())
                .collect();
            assert_eq!(hit.len(), n as usize);
        }
    }
}
