//! Bin-by-bin orchestration of the detectors and the per-AS aggregation.

use std::collections::{BTreeMap, HashMap};

use log::{debug, warn};
use rayon::prelude::*;
use thiserror::Error;

use crate::aggregate::{
    assign_alarms, components_by_as, connected_alarms, AsMonitor, Component, EventConfig,
    EventReport, MagnitudeSample,
};
use crate::delaydetect::{
    characterize, detect, min_bin_hours, DelayAlarm, DelayError, DelayReference, DEFAULT_ALPHA,
    DEFAULT_MIN_DIFF_MS, DEFAULT_Z, MIN_SAMPLES,
};
use crate::diffrtt::{enforce_diversity, link_seed, BinAccumulator, DiversityConfig, LinkKey};
use crate::fwdetect::{
    add_record, detect_forwarding, ForwardingAlarm, ForwardingPattern, ForwardingReference,
    PatternKey, DEFAULT_FW_ALPHA, DEFAULT_TAU,
};
use crate::ingest::{BinConfig, PrefixTable, TimeBin, TracerouteRecord};
use crate::state::{Checkpoint, PipelineState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub bins: BinConfig,
    pub diversity: DiversityConfig,
    pub seed: u64,
    pub z: f64,
    pub alpha: f64,
    pub min_diff_ms: f64,
    /// Observations with fewer samples update the reference but never alarm.
    pub min_samples: usize,
    pub tau: f64,
    pub fw_alpha: f64,
    pub events: EventConfig,
    /// Declared traceroutes per probe per hour, checked against the bin width.
    pub probing_rate: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bins: BinConfig::default(),
            diversity: DiversityConfig::default(),
            seed: 0,
            z: DEFAULT_Z,
            alpha: DEFAULT_ALPHA,
            min_diff_ms: DEFAULT_MIN_DIFF_MS,
            min_samples: MIN_SAMPLES,
            tau: DEFAULT_TAU,
            fw_alpha: DEFAULT_FW_ALPHA,
            events: EventConfig::default(),
            probing_rate: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    BinTooShort(#[from] DelayError),
    #[error("bin starting at {bin} is not after the last processed bin {last}")]
    OutOfOrder { bin: i64, last: i64 },
    #[error("checkpoint was written with bins of {found_width} s at epoch {found_epoch}, run uses {width} s at epoch {epoch}")]
    CheckpointMismatch {
        found_width: i64,
        found_epoch: i64,
        width: i64,
        epoch: i64,
    },
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.alpha) || !unit(self.fw_alpha) {
            return Err(PipelineError::Config("smoothing factors must lie in (0, 1]".into()));
        }
        if !(self.z >= 0.0 && self.z.is_finite()) {
            return Err(PipelineError::Config("z must be a non-negative number".into()));
        }
        if !(self.min_diff_ms >= 0.0) {
            return Err(PipelineError::Config("min-diff-ms must be non-negative".into()));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(PipelineError::Config("tau must lie in [-1, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.diversity.entropy_threshold) {
            return Err(PipelineError::Config("entropy threshold must lie in [0, 1)".into()));
        }
        if self.diversity.min_as == 0 {
            return Err(PipelineError::Config("min-as must be at least 1".into()));
        }
        if self.events.window < 2 {
            return Err(PipelineError::Config("window must hold at least 2 bins".into()));
        }
        if let Some(rate) = self.probing_rate {
            let probes = self.diversity.min_as as u32;
            let bin_hours = self.bins.width() as f64 / 3600.0;
            if !(rate > 0.0) {
                return Err(DelayError::InvalidRate { rate, probes }.into());
            }
            let min_hours = min_bin_hours(rate, probes);
            if bin_hours < min_hours {
                return Err(DelayError::BinTooShort {
                    bin_hours,
                    min_hours,
                    rate,
                    probes,
                }
                .into());
            }
        }
        Ok(())
    }
}

/// Counters describing one processed bin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BinStats {
    pub records: usize,
    pub links: usize,
    pub links_accepted: usize,
    pub patterns: usize,
}

/// Everything one bin produced.
#[derive(Debug, Clone, PartialEq)]
pub struct BinOutput {
    pub bin: TimeBin,
    pub delay_alarms: Vec<DelayAlarm>,
    pub forwarding_alarms: Vec<ForwardingAlarm>,
    pub components: Vec<Component>,
    pub magnitudes: Vec<MagnitudeSample>,
    /// Events that ended with this bin.
    pub events: Vec<EventReport>,
    pub stats: BinStats,
}

pub struct Pipeline {
    config: PipelineConfig,
    table: PrefixTable,
    state: PipelineState,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, table: PrefixTable) -> Result<Self, PipelineError> {
        config.validate()?;
        if config.diversity.min_as < 3 {
            warn!(
                "min-as {} below 3 monitors more links at the cost of accuracy",
                config.diversity.min_as
            );
        }
        Ok(Pipeline {
            config,
            table,
            state: PipelineState::default(),
        })
    }

    /// Continues from a checkpoint taken with the same bin layout.
    pub fn resume(config: PipelineConfig, table: PrefixTable, checkpoint: Checkpoint) -> Result<Self, PipelineError> {
        let (width, epoch) = (config.bins.width(), config.bins.bin_at(0).start);
        if checkpoint.bin_width != width || checkpoint.epoch != epoch {
            return Err(PipelineError::CheckpointMismatch {
                found_width: checkpoint.bin_width,
                found_epoch: checkpoint.epoch,
                width,
                epoch,
            });
        }
        let mut p = Self::new(config, table)?;
        p.state = checkpoint.state;
        Ok(p)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn state(&self) -> &PipelineState {
        &self.state
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.config.bins.width(),
            self.config.bins.bin_at(0).start,
            self.state.clone(),
        )
    }

    /// Start of the last completed bin.
    pub fn last_bin(&self) -> Option<i64> {
        self.state.last_bin
    }

    /// Runs steps 1 to 5 for the delay detector, the forwarding detector and
    /// the aggregation on one bin. `records` must all fall inside `bin` and
    /// carry resolved probe ASNs.
    pub fn process_bin(&mut self, bin: TimeBin, records: &[TracerouteRecord]) -> Result<BinOutput, PipelineError> {
        if let Some(last) = self.state.last_bin {
            if bin.start <= last {
                return Err(PipelineError::OutOfOrder { bin: bin.start, last });
            }
        }
        let mut stats = BinStats {
            records: records.len(),
            ..Default::default()
        };

        let (delay_alarms, links_seen, links_accepted) = self.delay_stage(bin, records);
        stats.links = links_seen;
        stats.links_accepted = links_accepted;
        let (forwarding_alarms, patterns) = self.forwarding_stage(bin, records);
        stats.patterns = patterns;

        let alarmed: Vec<LinkKey> = delay_alarms.iter().map(|a| a.link).collect();
        let components = connected_alarms(&alarmed);
        let (magnitudes, events) = self.aggregate_stage(bin, &delay_alarms, &forwarding_alarms, &components);

        if self.state.first_bin.is_none() {
            self.state.first_bin = Some(bin.start);
        }
        self.state.last_bin = Some(bin.start);
        debug!(
            "bin {}: {} records, {}/{} links kept, {} delay and {} forwarding alarms",
            bin.start,
            stats.records,
            stats.links_accepted,
            stats.links,
            delay_alarms.len(),
            forwarding_alarms.len()
        );
        Ok(BinOutput {
            bin,
            delay_alarms,
            forwarding_alarms,
            components,
            magnitudes,
            events,
            stats,
        })
    }

    fn delay_stage(&mut self, bin: TimeBin, records: &[TracerouteRecord]) -> (Vec<DelayAlarm>, usize, usize) {
        let mut acc = BinAccumulator::new(bin);
        for r in records {
            acc.add_record(r);
        }
        let links = acc.finish();
        let seen = links.len();
        let cfg = &self.config;
        let refs = &self.state.delay_refs;
        let results: Vec<(LinkKey, Option<DelayAlarm>, DelayReference)> = links
            .par_iter()
            .filter_map(|obs| {
                let (verdict, kept) = enforce_diversity(obs, &cfg.diversity, link_seed(cfg.seed, &obs.key, &bin));
                if !verdict.accepted || kept.samples.is_empty() {
                    return None;
                }
                let mut estimate = characterize(&kept.deltas(), cfg.z).ok()?;
                estimate.n_probes = kept.probe_count();
                estimate.n_asns = verdict.n_asns;
                let mut reference = refs.get(&obs.key).cloned().unwrap_or_default();
                let alarm = if estimate.n_samples >= cfg.min_samples {
                    detect(&estimate, &reference, cfg.min_diff_ms).map(|change| DelayAlarm {
                        link: obs.key,
                        bin,
                        change,
                        observed: estimate,
                        reference: (&reference).into(),
                    })
                } else {
                    None
                };
                reference.update(&estimate, cfg.alpha);
                Some((obs.key, alarm, reference))
            })
            .collect();
        let accepted = results.len();
        let mut alarms = Vec::new();
        for (key, alarm, reference) in results {
            self.state.delay_refs.insert(key, reference);
            alarms.extend(alarm);
        }
        (alarms, seen, accepted)
    }

    fn forwarding_stage(&mut self, bin: TimeBin, records: &[TracerouteRecord]) -> (Vec<ForwardingAlarm>, usize) {
        let mut acc = HashMap::new();
        for r in records {
            add_record(&mut acc, r);
        }
        let mut patterns: Vec<ForwardingPattern> = acc
            .into_iter()
            .map(|(key, counts)| ForwardingPattern { key, bin, counts })
            .collect();
        patterns.sort_unstable_by_key(|p| p.key);
        let cfg = &self.config;
        let refs = &self.state.fw_refs;
        let results: Vec<(PatternKey, Option<ForwardingAlarm>, ForwardingReference)> = patterns
            .par_iter()
            .map(|pattern| {
                let mut reference = refs.get(&pattern.key).cloned().unwrap_or_default();
                let alarm = if reference.bins_observed > 0 {
                    detect_forwarding(pattern, &reference, cfg.tau)
                } else {
                    None
                };
                reference.update(&pattern.counts, cfg.fw_alpha);
                (pattern.key, alarm, reference)
            })
            .collect();
        let n = results.len();
        let mut alarms = Vec::new();
        for (key, alarm, reference) in results {
            self.state.fw_refs.insert(key, reference);
            alarms.extend(alarm);
        }
        (alarms, n)
    }

    fn aggregate_stage(
        &mut self,
        bin: TimeBin,
        delay: &[DelayAlarm],
        forwarding: &[ForwardingAlarm],
        components: &[Component],
    ) -> (Vec<MagnitudeSample>, Vec<EventReport>) {
        let mut summaries = assign_alarms(delay, forwarding, &self.table);
        let touching = components_by_as(components, &self.table);

        let width = bin.width;
        let first = self.state.first_bin.unwrap_or(bin.start);
        let history_start = first.max(bin.start - (self.config.events.window as i64 - 1) * width);
        for asn in summaries.keys() {
            self.state.monitors.entry(*asn).or_insert_with(|| {
                AsMonitor::new(*asn, (history_start..bin.start).step_by(width as usize))
            });
        }

        let cfg = self.config.events;
        let results: Vec<(MagnitudeSample, Vec<EventReport>)> = self
            .state
            .monitors
            .iter_mut()
            .map(|(asn, m)| (asn, m))
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(asn, monitor)| {
                let summary = summaries.get(asn).cloned().unwrap_or_default();
                let comps = touching.get(asn).map(Vec::as_slice).unwrap_or(&[]);
                monitor.push(bin.start, summary, comps, &cfg)
            })
            .collect();
        summaries.clear();
        self.state.monitors.retain(|_, m| !m.is_idle());

        let mut magnitudes = Vec::with_capacity(results.len());
        let mut events = Vec::new();
        for (sample, reports) in results {
            magnitudes.push(sample);
            events.extend(reports);
        }
        (magnitudes, events)
    }

    /// Closes events still open at the end of the input.
    pub fn flush_events(&mut self) -> Vec<EventReport> {
        let cfg = self.config.events;
        let mut out = Vec::new();
        for m in self.state.monitors.values_mut() {
            out.extend(m.flush(&cfg));
        }
        out
    }

    /// Processes grouped records bin by bin, including bins without
    /// records between the first and last ones. Bins at or before the last
    /// completed bin are skipped with a warning.
    pub fn run<F, E>(&mut self, grouped: &BTreeMap<i64, Vec<TracerouteRecord>>, mut sink: F) -> Result<usize, E>
    where
        F: FnMut(BinOutput) -> Result<(), E>,
        E: From<PipelineError>,
    {
        let bins = self.config.bins;
        let Some((&last_index, _)) = grouped.iter().next_back() else {
            return Ok(0);
        };
        let resume_from = self.state.last_bin.map(|s| bins.index(s) + 1);
        let first_index = *grouped.keys().next().expect("non-empty");
        let stale: usize = grouped
            .iter()
            .filter(|(i, _)| resume_from.is_some_and(|r| **i < r))
            .map(|(_, v)| v.len())
            .sum();
        if stale > 0 {
            warn!("skipping {stale} records in bins already covered by the checkpoint");
        }
        let start = resume_from.unwrap_or(first_index);
        let empty = Vec::new();
        let mut processed = 0;
        for index in start..=last_index {
            let records = grouped.get(&index).unwrap_or(&empty);
            let out = self.process_bin(bins.bin_at(index), records)?;
            sink(out)?;
            processed += 1;
        }
        Ok(processed)
    }
}

/// Buckets records by bin index.
pub fn group_by_bin<I>(records: I, bins: &BinConfig) -> BTreeMap<i64, Vec<TracerouteRecord>>
where
    I: IntoIterator<Item = TracerouteRecord>,
{
    let mut grouped: BTreeMap<i64, Vec<TracerouteRecord>> = BTreeMap::new();
    for r in records {
        grouped.entry(bins.index(r.timestamp)).or_default().push(r);
    }
    grouped
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_topology, generate, AnomalyScript, SynthConfig, DEFAULT_START};

    fn run_all(pipeline: &mut Pipeline, grouped: &BTreeMap<i64, Vec<TracerouteRecord>>) -> Vec<BinOutput> {
        let mut outs = Vec::new();
        pipeline
            .run(grouped, |o| {
                outs.push(o);
                Ok::<_, PipelineError>(())
            })
            .unwrap();
        outs
    }

    #[test]
    fn bin_below_minimum_is_rejected_with_bound() {
        let cfg = PipelineConfig {
            bins: BinConfig::new(900).unwrap(),
            probing_rate: Some(2.0),
            ..Default::default()
        };
        let err = Pipeline::new(cfg, PrefixTable::new()).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("0.5000 h") && msg.contains("9 / (3"), "{msg}");
        let ok = PipelineConfig {
            bins: BinConfig::new(1800).unwrap(),
            probing_rate: Some(2.0),
            ..Default::default()
        };
        assert!(Pipeline::new(ok, PrefixTable::new()).is_ok());
    }

    #[test]
    fn baseline_is_quiet_and_references_follow_every_bin() {
        let topo = default_topology();
        let recs = generate(&topo, &AnomalyScript::empty(), &SynthConfig::new(12, 1));
        let cfg = PipelineConfig::default();
        let grouped = group_by_bin(recs, &cfg.bins);
        let mut p = Pipeline::new(cfg, topo.prefix_table()).unwrap();
        let outs = run_all(&mut p, &grouped);
        assert_eq!(outs.len(), 12);
        assert!(outs.iter().all(|o| o.delay_alarms.is_empty() && o.forwarding_alarms.is_empty()));
        assert!(outs.iter().all(|o| o.stats.links_accepted == 6), "{:?}", outs[0].stats);
        assert!(p.state().delay_refs.values().all(|r| r.bins_observed == 12));
        assert_eq!(p.last_bin(), Some(DEFAULT_START + 11 * 3600));
    }

    #[test]
    fn out_of_order_bin_rejected() {
        let mut p = Pipeline::new(PipelineConfig::default(), PrefixTable::new()).unwrap();
        let bins = BinConfig::default();
        p.process_bin(bins.bin_at(5), &[]).unwrap();
        assert!(matches!(p.process_bin(bins.bin_at(5), &[]), Err(PipelineError::OutOfOrder { .. })));
    }
}
