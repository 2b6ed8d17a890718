//! Streaming per-AS severity windows and event tracking.

use std::collections::{BTreeMap, VecDeque};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use super::magnitude::magnitude_of;
use super::tfidf::{tfidf_characterize, TermScore};
use super::{AsBinSummary, Component, SeverityKind};
use crate::ingest::Asn;

pub const DEFAULT_EVENT_THRESHOLD: f64 = 5.0;
pub const DEFAULT_TOPK: usize = 10;

/// Which bins make up an event's document set for characterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventMode {
    /// Every consecutive bin whose |magnitude| exceeds the threshold.
    Contiguous,
    /// Only the bin with the largest |magnitude|.
    Peak,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventConfig {
    pub window: usize,
    pub threshold: f64,
    pub topk: usize,
    pub mode: EventMode,
}

impl Default for EventConfig {
    fn default() -> Self {
        EventConfig {
            window: super::DEFAULT_WINDOW,
            threshold: DEFAULT_EVENT_THRESHOLD,
            topk: DEFAULT_TOPK,
            mode: EventMode::Contiguous,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub nodes: Vec<IpAddr>,
    pub edges: usize,
}

impl From<&Component> for ComponentSummary {
    fn from(c: &Component) -> Self {
        ComponentSummary {
            nodes: c.nodes.clone(),
            edges: c.edges.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenEvent {
    pub start: i64,
    pub end: i64,
    pub peak_bin: i64,
    pub peak_magnitude: f64,
    pub components: Vec<ComponentSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventReport {
    pub asn: Asn,
    pub kind: SeverityKind,
    pub start_bin: i64,
    pub end_bin: i64,
    pub peak_bin: i64,
    pub peak_magnitude: f64,
    pub characterization: Vec<TermScore>,
    /// Delay-alarm components touching the AS at the peak bin.
    pub components: Vec<ComponentSummary>,
}

/// Severity values and magnitudes of one AS for one bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeSample {
    pub asn: Asn,
    pub bin: i64,
    pub delay: f64,
    pub forwarding: f64,
    pub delay_magnitude: Option<f64>,
    pub forwarding_magnitude: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WindowEntry {
    start: i64,
    summary: AsBinSummary,
}

/// Trailing window of one AS's bins plus any events still in progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsMonitor {
    asn: Asn,
    entries: VecDeque<WindowEntry>,
    open: BTreeMap<SeverityKind, OpenEvent>,
}

impl AsMonitor {
    /// A monitor whose window already holds empty bins at `history` starts,
    /// so that an AS first seen late is scored against the zeros it had.
    pub fn new<I: IntoIterator<Item = i64>>(asn: Asn, history: I) -> Self {
        AsMonitor {
            asn,
            entries: history
                .into_iter()
                .map(|start| WindowEntry {
                    start,
                    summary: AsBinSummary::default(),
                })
                .collect(),
            open: BTreeMap::new(),
        }
    }

    pub fn asn(&self) -> Asn {
        self.asn
    }

    /// Nothing in the window and no event in progress: dropping the monitor
    /// and recreating it later from zeros loses nothing.
    pub fn is_idle(&self) -> bool {
        self.open.is_empty() && self.entries.iter().all(|e| e.summary == AsBinSummary::default())
    }

    /// Appends one bin. `components` are the bin's delay-alarm components
    /// that touch this AS.
    pub fn push(
        &mut self,
        start: i64,
        summary: AsBinSummary,
        components: &[ComponentSummary],
        cfg: &EventConfig,
    ) -> (MagnitudeSample, Vec<EventReport>) {
        self.entries.push_back(WindowEntry { start, summary });
        while self.entries.len() > cfg.window.max(1) {
            self.entries.pop_front();
        }
        let current = &self.entries.back().expect("just pushed").summary;
        let (delay, forwarding) = (current.delay, current.forwarding);
        let delay_magnitude = self.magnitude(SeverityKind::Delay);
        let forwarding_magnitude = self.magnitude(SeverityKind::Forwarding);

        let mut reports = Vec::new();
        for (kind, mag) in [
            (SeverityKind::Delay, delay_magnitude),
            (SeverityKind::Forwarding, forwarding_magnitude),
        ] {
            let comps = if kind == SeverityKind::Delay { components } else { &[] };
            if let Some(r) = self.track(kind, start, mag, comps, cfg) {
                reports.push(r);
            }
        }
        (
            MagnitudeSample {
                asn: self.asn,
                bin: start,
                delay,
                forwarding,
                delay_magnitude,
                forwarding_magnitude,
            },
            reports,
        )
    }

    fn magnitude(&self, kind: SeverityKind) -> Option<f64> {
        let values: Vec<f64> = self.entries.iter().map(|e| e.summary.value(kind)).collect();
        magnitude_of(&values, *values.last()?)
    }

    fn track(
        &mut self,
        kind: SeverityKind,
        bin: i64,
        mag: Option<f64>,
        components: &[ComponentSummary],
        cfg: &EventConfig,
    ) -> Option<EventReport> {
        match mag.filter(|m| m.abs() > cfg.threshold) {
            Some(m) => {
                let ev = self.open.entry(kind).or_insert_with(|| OpenEvent {
                    start: bin,
                    end: bin,
                    peak_bin: bin,
                    peak_magnitude: m,
                    components: components.to_vec(),
                });
                ev.end = bin;
                if m.abs() > ev.peak_magnitude.abs() {
                    ev.peak_bin = bin;
                    ev.peak_magnitude = m;
                    ev.components = components.to_vec();
                }
                None
            }
            None => {
                let ev = self.open.remove(&kind)?;
                Some(self.report(kind, ev, cfg))
            }
        }
    }

    /// Closes every event still open, e.g. at the end of the input.
    pub fn flush(&mut self, cfg: &EventConfig) -> Vec<EventReport> {
        let open = std::mem::take(&mut self.open);
        open.into_iter().map(|(kind, ev)| self.report(kind, ev, cfg)).collect()
    }

    pub fn open_events(&self) -> &BTreeMap<SeverityKind, OpenEvent> {
        &self.open
    }

    fn report(&self, kind: SeverityKind, ev: OpenEvent, cfg: &EventConfig) -> EventReport {
        let docs: Vec<_> = self.entries.iter().map(|e| e.summary.terms(kind).clone()).collect();
        let event: Vec<usize> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| match cfg.mode {
                EventMode::Contiguous => e.start >= ev.start && e.start <= ev.end,
                EventMode::Peak => e.start == ev.peak_bin,
            })
            .map(|(i, _)| i)
            .collect();
        let mut characterization = tfidf_characterize(&docs, &event);
        characterization.truncate(cfg.topk);
        EventReport {
            asn: self.asn,
            kind,
            start_bin: ev.start,
            end_bin: ev.end,
            peak_bin: ev.peak_bin,
            peak_magnitude: ev.peak_magnitude,
            characterization,
            components: ev.components,
        }
    }
}
