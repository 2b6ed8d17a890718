//! Detection and localization of Internet delay changes and forwarding
//! anomalies from large-scale traceroute measurements.
//!
//! The pipeline works in fixed time bins. For every bin it
//!
//! 1. computes differential RTTs for each link seen in the traceroutes
//!    ([`diffrtt`]),
//! 2. drops links that lack probe AS diversity,
//! 3. characterizes each link's differential RTTs with a median and an
//!    order-statistic confidence interval ([`delaydetect`]),
//! 4. compares them to an exponentially smoothed reference and reports
//!    non-overlapping intervals as delay changes,
//! 5. updates the references.
//!
//! In parallel, per-router forwarding patterns are checked against their own
//! references ([`fwdetect`]). Alarms are rolled up per AS into severity
//! series and scored with a robust magnitude ([`aggregate`]).

pub mod aggregate;
pub mod delaydetect;
pub mod diffrtt;
pub mod fwdetect;
pub mod ingest;
pub mod output;
pub mod pipeline;
pub mod state;
pub mod stats;
pub mod synth;

pub use ingest::{Asn, BinConfig, Prefix, PrefixTable, TimeBin, TracerouteRecord};
