use thiserror::Error;

use crate::grid::RegionId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("coordinate ({lat}, {lon}) lies outside the map")]
    OutOfBounds { lat: f64, lon: f64 },

    #[error("bucket count {0} does not divide 86400")]
    InvalidBucketCount(u32),

    #[error("region {0} is not on the map")]
    InvalidRegion(RegionId),

    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },

    #[error("row {row} has no occupancy value")]
    MissingOccupancy { row: usize },

    #[error("record {index} of vehicle {vehicle} has no occupancy signal")]
    MissingSignal { vehicle: String, index: usize },

    #[error("distributions have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("no path from region {src} to region {dst}")]
    Unreachable { src: RegionId, dst: RegionId },

    #[error("path query needs distinct endpoints, got {0} twice")]
    SameEndpoints(RegionId),

    #[error("region {0} has no semantic cluster")]
    UnclusteredRegion(RegionId),

    #[error("cluster of region {0} has no other member")]
    EmptyCandidateSet(RegionId),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid model artifact {file}: {reason}")]
    Artifact { file: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn artifact(file: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Artifact {
            file: file.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidBucketCount(_))
    }
}
