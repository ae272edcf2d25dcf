//! Offline pipeline: seed traces → speeds → stations → sections → semantic
//! and mobility models, plus their on-disk form.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::config::ModelParams;
use crate::error::{Error, Result};
use crate::grid::{GridMap, TimeScheme, Trace};
use crate::mobility::{estimate_rank_distribution, MobilityModel};
use crate::semantics::{accumulate_flows, SemanticModel};
use crate::stations::{extract_sections, extract_stations, Section, SpeedTable, Station, StationMode};

pub const META_FILE: &str = "model.meta";
pub const SPEEDS_FILE: &str = "speeds.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StationSource {
    Occupancy,
    Parking,
}

impl StationSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            StationSource::Occupancy => "occupancy",
            StationSource::Parking => "parking",
        }
    }
}

impl FromStr for StationSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "occupancy" => Ok(StationSource::Occupancy),
            "parking" => Ok(StationSource::Parking),
            other => Err(Error::config(format!("unknown station source '{other}'"))),
        }
    }
}

/// Wall time of each build stage. Never persisted.
#[derive(Debug, Clone, Default)]
pub struct BuildTimings {
    pub speeds: Duration,
    pub stations: Duration,
    pub semantics: Duration,
    pub mobility: Duration,
    pub ranks: Duration,
}

impl BuildTimings {
    pub fn total(&self) -> Duration {
        self.speeds + self.stations + self.semantics + self.mobility + self.ranks
    }
}

#[derive(Debug, Clone, Default)]
pub struct BuildStats {
    pub n_traces: usize,
    pub n_records: usize,
    pub n_stations: usize,
    pub n_sections: usize,
    pub timings: BuildTimings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineModel {
    pub map: GridMap,
    pub scheme: TimeScheme,
    pub params: ModelParams,
    pub source: StationSource,
    pub speeds: SpeedTable,
    pub semantics: SemanticModel,
    pub mobility: MobilityModel,
}

/// Stations and sections of one trace.
pub struct Segmented {
    pub stations: Vec<Station>,
    pub sections: Vec<Section>,
}

impl OfflineModel {
    pub fn build(
        traces: &[Trace],
        map: &GridMap,
        scheme: &TimeScheme,
        params: &ModelParams,
        source: StationSource,
    ) -> Result<(Self, BuildStats)> {
        map.validate()?;
        scheme.validate()?;
        params.validate()?;
        let mut timings = BuildTimings::default();

        let clock = Instant::now();
        let speeds = SpeedTable::estimate(traces, map, scheme, params.speed_min_samples, params.speed_max_gap_s);
        timings.speeds = clock.elapsed();

        let clock = Instant::now();
        let segmented: Vec<Segmented> = traces
            .par_iter()
            .map(|t| segment(t, source, &speeds, params, scheme))
            .collect::<Result<_>>()?;
        let stations: Vec<Station> = segmented.iter().flat_map(|s| s.stations.iter().cloned()).collect();
        let sections: Vec<Section> = segmented.into_iter().flat_map(|s| s.sections).collect();
        timings.stations = clock.elapsed();

        let clock = Instant::now();
        let flows = accumulate_flows(&stations, map.n_regions(), scheme);
        let semantics = SemanticModel::build(
            &flows,
            scheme.n_semantic,
            params.alpha,
            params.beta,
            params.epsilon,
            params.cluster_threshold,
        )?;
        timings.semantics = clock.elapsed();

        let clock = Instant::now();
        let mut mobility = MobilityModel::build(&sections, map, scheme.n_mobility, params.k_max);
        timings.mobility = clock.elapsed();

        let clock = Instant::now();
        mobility.ranks = estimate_rank_distribution(&sections, &mobility, params.k_max, params.rank_sample);
        timings.ranks = clock.elapsed();

        let stats = BuildStats {
            n_traces: traces.len(),
            n_records: traces.iter().map(Trace::len).sum(),
            n_stations: stations.len(),
            n_sections: sections.len(),
            timings,
        };
        let model = OfflineModel {
            map: map.clone(),
            scheme: *scheme,
            params: params.clone(),
            source,
            speeds,
            semantics,
            mobility,
        };
        Ok((model, stats))
    }

    /// Stations and sections of a trace under this model's extraction rule.
    pub fn segment(&self, trace: &Trace) -> Result<Segmented> {
        segment(trace, self.source, &self.speeds, &self.params, &self.scheme)
    }

    /// Seconds to cross one cell at the global mean speed.
    pub fn fallback_crossing_s(&self) -> f64 {
        self.map.cell_size_m / (self.speeds.global_kmh() / 3.6)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(META_FILE), self.meta())?;
        self.speeds.write_csv(std::fs::File::create(dir.join(SPEEDS_FILE))?)?;
        self.semantics.save(dir)?;
        self.mobility.save(dir)?;
        Ok(())
    }

    fn meta(&self) -> String {
        let p = &self.params;
        let m = &self.map;
        let s = &self.scheme;
        let rows: Vec<(&str, String)> = vec![
            ("origin_lat", format!("{:?}", m.origin_lat)),
            ("origin_lon", format!("{:?}", m.origin_lon)),
            ("cell_size_m", format!("{:?}", m.cell_size_m)),
            ("width_cells", m.width_cells.to_string()),
            ("height_cells", m.height_cells.to_string()),
            ("n_semantic", s.n_semantic.to_string()),
            ("n_mobility", s.n_mobility.to_string()),
            ("n_user", s.n_user.to_string()),
            ("alpha", format!("{:?}", p.alpha)),
            ("beta", format!("{:?}", p.beta)),
            ("cluster_threshold", format!("{:?}", p.cluster_threshold)),
            ("parking_numerator_km", format!("{:?}", p.parking_numerator_km)),
            ("window_hours", format!("{:?}", p.window_hours)),
            ("k_max", p.k_max.to_string()),
            ("epsilon", format!("{:?}", p.epsilon)),
            ("rng_seed", p.rng_seed.to_string()),
            ("speed_min_samples", p.speed_min_samples.to_string()),
            ("speed_max_gap_s", p.speed_max_gap_s.to_string()),
            ("rank_sample", p.rank_sample.to_string()),
            ("station_source", self.source.as_str().to_string()),
            ("global_kmh", format!("{:?}", self.speeds.global_kmh())),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(META_FILE))
            .map_err(|e| Error::artifact(META_FILE, e.to_string()))?;
        let kv: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        fn get<T: FromStr>(kv: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
            kv.get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::artifact(META_FILE, format!("missing or bad '{key}'")))
        }
        let map = GridMap::new(
            get(&kv, "origin_lat")?,
            get(&kv, "origin_lon")?,
            get(&kv, "cell_size_m")?,
            get(&kv, "width_cells")?,
            get(&kv, "height_cells")?,
        )?;
        let scheme = TimeScheme {
            n_semantic: get(&kv, "n_semantic")?,
            n_mobility: get(&kv, "n_mobility")?,
            n_user: get(&kv, "n_user")?,
        };
        scheme.validate()?;
        let params = ModelParams {
            alpha: get(&kv, "alpha")?,
            beta: get(&kv, "beta")?,
            cluster_threshold: get(&kv, "cluster_threshold")?,
            parking_numerator_km: get(&kv, "parking_numerator_km")?,
            window_hours: get(&kv, "window_hours")?,
            k_max: get(&kv, "k_max")?,
            epsilon: get(&kv, "epsilon")?,
            rng_seed: get(&kv, "rng_seed")?,
            speed_min_samples: get(&kv, "speed_min_samples")?,
            speed_max_gap_s: get(&kv, "speed_max_gap_s")?,
            rank_sample: get(&kv, "rank_sample")?,
        };
        let source: StationSource = get::<String>(&kv, "station_source")?.parse()?;
        let global_kmh: f64 = get(&kv, "global_kmh")?;
        let n = map.n_regions();
        let speeds = SpeedTable::read_csv(
            std::fs::File::open(dir.join(SPEEDS_FILE))?,
            n,
            scheme.n_mobility,
            global_kmh,
            params.speed_min_samples,
        )?;
        let semantics = SemanticModel::load(dir, params.alpha, params.beta)?;
        if semantics.n_regions() != n {
            return Err(Error::artifact(META_FILE, "semantic model covers a different map"));
        }
        let mobility = MobilityModel::load(dir, n, scheme.n_mobility)?;
        Ok(OfflineModel {
            map,
            scheme,
            params,
            source,
            speeds,
            semantics,
            mobility,
        })
    }
}

fn segment(
    trace: &Trace,
    source: StationSource,
    speeds: &SpeedTable,
    params: &ModelParams,
    scheme: &TimeScheme,
) -> Result<Segmented> {
    let mode = match source {
        StationSource::Occupancy => StationMode::Occupancy,
        StationSource::Parking => StationMode::Parking {
            speeds,
            numerator_km: params.parking_numerator_km,
        },
    };
    let stations = extract_stations(trace, mode, scheme)?;
    let sections = extract_sections(trace, &stations);
    Ok(Segmented { stations, sections })
}
