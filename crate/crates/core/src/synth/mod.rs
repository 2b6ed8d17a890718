//! Synthetic traceroute corpora with known ground truth.
//!
//! A [`Topology`] fixes routers, probes, forward paths, one-way link delays
//! and per-(router, probe) return delays. An [`AnomalyScript`] injects
//! congestion, packet loss and reroutes for chosen bins. [`generate`] turns
//! both into records in the ingest schema.

mod generate;
mod script;
mod topology;

use thiserror::Error;

pub use generate::{generate, SynthConfig, DEFAULT_START};
pub use script::{Anomaly, AnomalyKind, AnomalyScript};
pub use topology::{
    default_topology, default_topology_text, Node, NodeKind, NoiseModel, OutlierModel, PathSpec,
    ProbeSpec, Topology, DEFAULT_LINK_MS, DEFAULT_PACKETS, DEFAULT_RATE, DEFAULT_RETURN_SPREAD_MS,
};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl SynthError {
    fn parse(line: usize, reason: impl Into<String>) -> Self {
        SynthError::Parse {
            line,
            reason: reason.into(),
        }
    }
}
