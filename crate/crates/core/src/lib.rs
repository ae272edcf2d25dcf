//! Impostor trace synthesis for location privacy.
//!
//! Offline builders turn seed traces into a semantic model (region clusters
//! by flow similarity) and a mobility model (per-hour transition graphs and
//! runtime tensors). The online synthesizer uses both to forge traces that
//! hide a user's real query among plausible fakes, and the adversary module
//! measures how often a Markov-profile attacker still picks the real one.

pub mod adversary;
pub mod assignment;
pub mod city;
pub mod config;
pub mod error;
pub mod grid;
pub mod ingest;
pub mod ksp;
pub mod mobility;
pub mod offline;
pub mod semantics;
pub mod stations;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{GridMap, RawFix, Record, RegionId, TimeScheme, Trace};
