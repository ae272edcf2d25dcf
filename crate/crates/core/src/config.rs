//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so that typos cannot silently fall back to defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{GridMap, TimeScheme};
use crate::ingest::DatasetFormat;

/// Parameters of the offline builders and the online synthesizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Weight of the flow-in divergence; flow-out gets `beta`.
    pub alpha: f64,
    pub beta: f64,
    /// Similarity below which clusters stop merging.
    pub cluster_threshold: f64,
    /// Numerator of the parking threshold `numerator / v(r, t)` hours.
    pub parking_numerator_km: f64,
    pub window_hours: f64,
    pub k_max: usize,
    /// Additive smoothing for flow and profile counts.
    pub epsilon: f64,
    pub rng_seed: u64,
    /// Minimum samples before a speed cell is trusted.
    pub speed_min_samples: usize,
    /// Consecutive records further apart than this are not speed samples.
    pub speed_max_gap_s: i64,
    /// Cap on seed sections used to estimate the rank distribution.
    pub rank_sample: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            alpha: 0.5,
            beta: 0.5,
            cluster_threshold: 0.75,
            parking_numerator_km: 9.0,
            window_hours: 15.0,
            k_max: 10,
            epsilon: 1e-6,
            rng_seed: 42,
            speed_min_samples: 10,
            speed_max_gap_s: 300,
            rank_sample: 2000,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.alpha) || !unit.contains(&self.beta) {
            return Err(Error::config("alpha and beta must lie in [0, 1]"));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(Error::config("alpha + beta must equal 1"));
        }
        if !unit.contains(&self.cluster_threshold) {
            return Err(Error::config("cluster_threshold must lie in [0, 1]"));
        }
        if !(self.parking_numerator_km > 0.0) {
            return Err(Error::config("parking_numerator_km must be positive"));
        }
        if !(self.window_hours > 0.0) {
            return Err(Error::config("window_hours must be positive"));
        }
        if self.k_max == 0 {
            return Err(Error::config("k_max must be at least 1"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::config("epsilon must be non-negative"));
        }
        if self.speed_max_gap_s <= 0 {
            return Err(Error::config("speed_max_gap_s must be positive"));
        }
        Ok(())
    }

    pub fn window_seconds(&self) -> i64 {
        (self.window_hours * 3600.0).round() as i64
    }
}

/// Knobs of the synthetic city generator exposed through the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct CityParams {
    pub agents: usize,
    pub days: u32,
    pub noise_min: f64,
    pub leisure_prob: f64,
    pub sample_s: u32,
}

impl Default for CityParams {
    fn default() -> Self {
        CityParams {
            agents: 500,
            days: 20,
            noise_min: 20.0,
            leisure_prob: 0.4,
            sample_s: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackerKnowledge {
    /// Profiles come from everything the service observed on training days:
    /// the real trace and the fakes published with it, unlabeled.
    Observed,
    /// Profiles come from the users' true training traces.
    RealHistory,
}

impl FromStr for AttackerKnowledge {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(AttackerKnowledge::Observed),
            "real" | "real-history" => Ok(AttackerKnowledge::RealHistory),
            other => Err(Error::config(format!("unknown attacker_knowledge '{other}'"))),
        }
    }
}

impl AttackerKnowledge {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackerKnowledge::Observed => "observed",
            AttackerKnowledge::RealHistory => "real",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    /// Fraction of days (in order) used for training.
    pub train_fraction: f64,
    /// Number of users whose queries are attacked.
    pub users: usize,
    pub knowledge: AttackerKnowledge,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            train_fraction: 0.7,
            users: 40,
            knowledge: AttackerKnowledge::Observed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub map: GridMap,
    pub scheme: TimeScheme,
    pub utc_offset_s: i64,
    pub dataset_format: DatasetFormat,
    pub dataset_path: Option<PathBuf>,
    pub store_path: Option<PathBuf>,
    pub params: ModelParams,
    pub city: CityParams,
    pub eval: EvalParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            map: GridMap::default(),
            scheme: TimeScheme::default(),
            utc_offset_s: 0,
            dataset_format: DatasetFormat::PrivateCar,
            dataset_path: None,
            store_path: None,
            params: ModelParams::default(),
            city: CityParams::default(),
            eval: EvalParams::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value '{value}' for key '{key}'")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        text.parse()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.params;
        match key {
            "origin_lat" => self.map.origin_lat = parse(key, value)?,
            "origin_lon" => self.map.origin_lon = parse(key, value)?,
            "cell_size_m" => self.map.cell_size_m = parse(key, value)?,
            "width_cells" => self.map.width_cells = parse(key, value)?,
            "height_cells" => self.map.height_cells = parse(key, value)?,
            "n_semantic" => self.scheme.n_semantic = parse(key, value)?,
            "n_mobility" => self.scheme.n_mobility = parse(key, value)?,
            "n_user" => self.scheme.n_user = parse(key, value)?,
            "utc_offset_s" => self.utc_offset_s = parse(key, value)?,
            "dataset_format" => self.dataset_format = value.parse()?,
            "dataset_path" => self.dataset_path = Some(PathBuf::from(value)),
            "store_path" => self.store_path = Some(PathBuf::from(value)),
            "alpha" => p.alpha = parse(key, value)?,
            "beta" => p.beta = parse(key, value)?,
            "cluster_threshold" => p.cluster_threshold = parse(key, value)?,
            "parking_numerator_km" => p.parking_numerator_km = parse(key, value)?,
            "window_hours" => p.window_hours = parse(key, value)?,
            "k_max" => p.k_max = parse(key, value)?,
            "epsilon" => p.epsilon = parse(key, value)?,
            "rng_seed" => p.rng_seed = parse(key, value)?,
            "speed_min_samples" => p.speed_min_samples = parse(key, value)?,
            "speed_max_gap_s" => p.speed_max_gap_s = parse(key, value)?,
            "rank_sample" => p.rank_sample = parse(key, value)?,
            "city_agents" => self.city.agents = parse(key, value)?,
            "city_days" => self.city.days = parse(key, value)?,
            "city_noise_min" => self.city.noise_min = parse(key, value)?,
            "city_leisure_prob" => self.city.leisure_prob = parse(key, value)?,
            "city_sample_s" => self.city.sample_s = parse(key, value)?,
            "train_fraction" => self.eval.train_fraction = parse(key, value)?,
            "eval_users" => self.eval.users = parse(key, value)?,
            "attacker_knowledge" => self.eval.knowledge = value.parse()?,
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn validate(&self) -> Result<()> {
        self.map.validate()?;
        self.scheme.validate()?;
        self.params.validate()?;
        if !(0.0 < self.eval.train_fraction && self.eval.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.city.leisure_prob) {
            return Err(Error::config("city_leisure_prob must lie in [0, 1]"));
        }
        if self.city.sample_s == 0 {
            return Err(Error::config("city_sample_s must be positive"));
        }
        Ok(())
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_file() {
        let cfg: RunConfig = "# demo\nwidth_cells = 20\nheight_cells=15\nalpha = 0.3\nbeta = 0.7\n"
            .parse()
            .unwrap();
        assert_eq!(cfg.map.width_cells, 20);
        assert_eq!(cfg.map.height_cells, 15);
        assert_eq!(cfg.params.alpha, 0.3);
        assert_eq!(cfg.params.cluster_threshold, 0.75);
    }

    #[test]
    fn rejects_unknown_keys() {
        let err = "widht_cells = 3".parse::<RunConfig>().unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn rejects_out_of_range() {
        assert!("alpha = 0.8".parse::<RunConfig>().is_err());
        assert!("n_user = 7".parse::<RunConfig>().is_err());
        assert!("k_max = 0".parse::<RunConfig>().is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("rng_seed=7").unwrap();
        assert_eq!(cfg.params.rng_seed, 7);
        assert!(cfg.apply_override("rng_seed").is_err());
    }
}
