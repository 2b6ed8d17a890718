//! Offline aggregation of a previously written alarm stream.

use std::collections::{BTreeMap, BTreeSet};

use super::{assign_alarms, components_by_as, connected_alarms, AsMonitor, EventConfig, EventReport, MagnitudeSample};
use crate::delaydetect::DelayAlarm;
use crate::diffrtt::LinkKey;
use crate::fwdetect::ForwardingAlarm;
use crate::ingest::{BinConfig, PrefixTable};

/// Bin range and event options of a replay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub bins: BinConfig,
    /// First bin start; defaults to the earliest alarm.
    pub from: Option<i64>,
    /// Last bin start; defaults to the latest alarm.
    pub to: Option<i64>,
    pub events: EventConfig,
    /// Close events still open after the last bin.
    pub flush: bool,
}

/// Rebuilds per-AS magnitudes and events from alarms, exactly as the
/// pipeline would have when started at `from`.
pub fn replay_alarms(
    delay: &[DelayAlarm],
    forwarding: &[ForwardingAlarm],
    table: &PrefixTable,
    cfg: &ReplayConfig,
) -> (Vec<MagnitudeSample>, Vec<EventReport>) {
    let bins = cfg.bins;
    let mut by_bin: BTreeMap<i64, (Vec<DelayAlarm>, Vec<ForwardingAlarm>)> = BTreeMap::new();
    for a in delay {
        by_bin.entry(bins.index(a.bin.start)).or_default().0.push(a.clone());
    }
    for a in forwarding {
        by_bin.entry(bins.index(a.bin.start)).or_default().1.push(a.clone());
    }
    let first = cfg.from.map(|s| bins.index(s)).or(by_bin.keys().next().copied());
    let last = cfg.to.map(|s| bins.index(s)).or(by_bin.keys().next_back().copied());
    let (Some(first), Some(last)) = (first, last) else {
        return (Vec::new(), Vec::new());
    };

    let per_bin: BTreeMap<i64, _> = by_bin
        .range(first..=last)
        .map(|(i, (d, f))| (*i, assign_alarms(d, f, table)))
        .collect();
    let asns: BTreeSet<_> = per_bin.values().flat_map(|m| m.keys().copied()).collect();
    let start = bins.bin_at(first).start;
    let mut monitors: BTreeMap<_, _> = asns.into_iter().map(|a| (a, AsMonitor::new(a, []))).collect();

    let mut magnitudes = Vec::new();
    let mut events = Vec::new();
    let empty = BTreeMap::new();
    for index in first..=last {
        let bin = bins.bin_at(index);
        let summaries = per_bin.get(&index).unwrap_or(&empty);
        let alarmed: Vec<LinkKey> = by_bin
            .get(&index)
            .map(|(d, _)| d.iter().map(|a| a.link).collect())
            .unwrap_or_default();
        let touching = components_by_as(&connected_alarms(&alarmed), table);
        for (asn, monitor) in monitors.iter_mut() {
            let summary = summaries.get(asn).cloned().unwrap_or_default();
            let comps = touching.get(asn).map(Vec::as_slice).unwrap_or(&[]);
            let (sample, reports) = monitor.push(bin.start, summary, comps, &cfg.events);
            magnitudes.push(sample);
            events.extend(reports);
        }
    }
    if cfg.flush {
        for m in monitors.values_mut() {
            events.extend(m.flush(&cfg.events));
        }
    }
    debug_assert!(magnitudes.first().is_none_or(|m| m.bin == start));
    (magnitudes, events)
}
