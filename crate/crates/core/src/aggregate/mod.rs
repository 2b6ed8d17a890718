//! Per-AS aggregation of alarms, disruption magnitudes and event
//! characterization.
//!
//! Delay alarms are assigned to the AS of each link endpoint (an
//! inter-AS link feeds both), forwarding alarms to the AS of each next hop.
//! Each AS gets two severity series per bin: the sum of `|d|` over its delay
//! alarms and the signed sum of its next hops' responsibilities.

mod components;
mod magnitude;
mod monitor;
mod replay;
mod tfidf;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::delaydetect::DelayAlarm;
use crate::fwdetect::{ForwardingAlarm, NextHop};
use crate::ingest::{Asn, PrefixTable};

pub use components::{connected_alarms, Component};
pub use magnitude::{magnitude, magnitude_of, DEFAULT_WINDOW, MAD_SCALE};
pub use monitor::{
    AsMonitor, ComponentSummary, EventConfig, EventMode, EventReport, MagnitudeSample, OpenEvent,
    DEFAULT_EVENT_THRESHOLD, DEFAULT_TOPK,
};
pub use replay::{replay_alarms, ReplayConfig};
pub use tfidf::{term_for, tfidf_characterize, TermCounts, TermScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeverityKind {
    Delay,
    Forwarding,
}

/// What one AS accumulated in one bin.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AsBinSummary {
    /// Σ |d| over delay alarms touching the AS.
    pub delay: f64,
    /// Σ r_i over next hops inside the AS.
    pub forwarding: f64,
    pub delay_alarms: u32,
    pub forwarding_alarms: u32,
    /// /24 (or /64) prefixes of the AS's addresses named by delay alarms.
    pub delay_terms: TermCounts,
    /// Same for forwarding alarms.
    pub forwarding_terms: TermCounts,
}

impl AsBinSummary {
    pub fn value(&self, kind: SeverityKind) -> f64 {
        match kind {
            SeverityKind::Delay => self.delay,
            SeverityKind::Forwarding => self.forwarding,
        }
    }

    pub fn terms(&self, kind: SeverityKind) -> &TermCounts {
        match kind {
            SeverityKind::Delay => &self.delay_terms,
            SeverityKind::Forwarding => &self.forwarding_terms,
        }
    }
}

/// Groups one bin's alarms by AS.
///
/// Addresses the table cannot map go to [`Asn::UNKNOWN`]. Unresponsive next
/// hops carry responsibility but no address and are not assigned.
pub fn assign_alarms(
    delay: &[DelayAlarm],
    forwarding: &[ForwardingAlarm],
    table: &PrefixTable,
) -> BTreeMap<Asn, AsBinSummary> {
    let mut out: BTreeMap<Asn, AsBinSummary> = BTreeMap::new();
    for alarm in delay {
        let ends = [alarm.link.near, alarm.link.far];
        let asns: BTreeSet<Asn> = ends.iter().map(|a| table.lookup_or_unknown(*a)).collect();
        for asn in asns {
            let summary = out.entry(asn).or_default();
            summary.delay += alarm.change.deviation.abs();
            summary.delay_alarms += 1;
            for addr in ends {
                if table.lookup_or_unknown(addr) == asn {
                    *summary.delay_terms.entry(term_for(addr)).or_default() += 1;
                }
            }
        }
    }
    for alarm in forwarding {
        let mut touched = BTreeSet::new();
        for (hop, r) in &alarm.responsibilities {
            let NextHop::Addr(addr) = hop else { continue };
            let asn = table.lookup_or_unknown(*addr);
            let summary = out.entry(asn).or_default();
            summary.forwarding += r;
            if *r != 0.0 {
                *summary.forwarding_terms.entry(term_for(*addr)).or_default() += 1;
            }
            touched.insert(asn);
        }
        for asn in touched {
            out.get_mut(&asn).expect("touched AS present").forwarding_alarms += 1;
        }
    }
    out
}

/// Summaries of the components touching each AS, in component order.
pub fn components_by_as(components: &[Component], table: &PrefixTable) -> BTreeMap<Asn, Vec<ComponentSummary>> {
    let mut out: BTreeMap<Asn, Vec<ComponentSummary>> = BTreeMap::new();
    for c in components {
        let asns: BTreeSet<Asn> = c.nodes.iter().map(|a| table.lookup_or_unknown(*a)).collect();
        for asn in asns {
            out.entry(asn).or_default().push(c.into());
        }
    }
    out
}

/// Dense per-bin severity series of one AS.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AsSeries {
    pub asn: Asn,
    /// Bin start → Σ |d|.
    pub delay: BTreeMap<i64, f64>,
    /// Bin start → Σ r_i.
    pub forwarding: BTreeMap<i64, f64>,
}

impl AsSeries {
    pub fn new(asn: Asn) -> Self {
        AsSeries {
            asn,
            ..Default::default()
        }
    }

    pub fn add(&mut self, bin_start: i64, summary: &AsBinSummary) {
        *self.delay.entry(bin_start).or_default() += summary.delay;
        *self.forwarding.entry(bin_start).or_default() += summary.forwarding;
    }

    /// Values for every bin start in `starts`, zero where nothing was seen.
    pub fn dense(&self, kind: SeverityKind, starts: &[i64]) -> Vec<f64> {
        let map = match kind {
            SeverityKind::Delay => &self.delay,
            SeverityKind::Forwarding => &self.forwarding,
        };
        starts.iter().map(|s| map.get(s).copied().unwrap_or(0.0)).collect()
    }
}
