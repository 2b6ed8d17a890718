//! Median characterization of differential RTTs and delay-change detection.
//!
//! Each bin's samples are summarized by their median and a distribution-free
//! 95% confidence interval whose bounds are order statistics picked with the
//! Wilson score. A link's normal behaviour is an exponentially smoothed
//! median and interval; a bin whose interval does not overlap the reference
//! interval is a delay change.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffrtt::LinkKey;
use crate::ingest::TimeBin;
use crate::stats::median_sorted;

pub const DEFAULT_Z: f64 = 1.96;
pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_MIN_DIFF_MS: f64 = 1.0;
/// Packets expected for a minimally monitored link: three probes, three
/// packets each.
pub const MIN_SAMPLES: usize = 9;
/// Floor on the reference half-width used as the deviation denominator.
pub const DEGENERATE_EPSILON: f64 = 1e-6;
/// Bins used to seed a reference.
pub const WARMUP_BINS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum DelayError {
    #[error("no samples to characterize")]
    NoSamples,
    #[error("probing rate and probe count must be positive (rate {rate}, probes {probes})")]
    InvalidRate { rate: f64, probes: u32 },
    #[error(
        "bin of {bin_hours} h is below the minimum usable bin of {min_hours:.4} h \
         (9 / (3 * {rate} traceroutes/h * {probes} probes))"
    )]
    BinTooShort {
        bin_hours: f64,
        min_hours: f64,
        rate: f64,
        probes: u32,
    },
}

/// Wilson score bounds `(w_l, w_u)` for the median (`p = 0.5`) of `n` samples.
pub fn wilson_score(n: usize, z: f64) -> Result<(f64, f64), DelayError> {
    if n == 0 {
        return Err(DelayError::NoSamples);
    }
    let n = n as f64;
    let p = 0.5;
    let z2 = z * z;
    let scale = 1.0 / (1.0 + z2 / n);
    let center = p + z2 / (2.0 * n);
    let spread = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Ok((scale * (center - spread), scale * (center + spread)))
}

/// One-based ranks of the confidence bounds in the sorted samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ranks {
    pub lower: usize,
    pub upper: usize,
}

/// Rounds the Wilson bounds outward to ranks: `l = max(1, floor(n w_l))`,
/// `u = min(n, ceil(n w_u))`.
pub fn wilson_ranks(n: usize, z: f64) -> Result<Ranks, DelayError> {
    let (wl, wu) = wilson_score(n, z)?;
    let nf = n as f64;
    let lower = ((nf * wl).floor() as usize).clamp(1, n);
    let upper = ((nf * wu).ceil() as usize).clamp(lower, n);
    Ok(Ranks { lower, upper })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianEstimate {
    pub median: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_samples: usize,
    pub n_probes: usize,
    pub n_asns: usize,
}

/// Median and confidence interval of `samples`.
///
/// The interval is widened to include the median when rank rounding would
/// leave it out (possible for even `n` and very small `z`).
/// `n_probes` and `n_asns` are left at zero for the caller to fill in.
pub fn characterize(samples: &[f64], z: f64) -> Result<MedianEstimate, DelayError> {
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    characterize_sorted(&sorted, z)
}

pub fn characterize_sorted(sorted: &[f64], z: f64) -> Result<MedianEstimate, DelayError> {
    let ranks = wilson_ranks(sorted.len(), z)?;
    let median = median_sorted(sorted);
    Ok(MedianEstimate {
        median,
        ci_low: sorted[ranks.lower - 1].min(median),
        ci_high: sorted[ranks.upper - 1].max(median),
        n_samples: sorted.len(),
        n_probes: 0,
        n_asns: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
}

/// Outcome of comparing one bin against its reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayChange {
    /// Gap between the intervals over the reference half-width; positive for
    /// an increase, negative for a decrease.
    pub deviation: f64,
    pub direction: Direction,
    /// The reference half-width on the relevant side was below
    /// [`DEGENERATE_EPSILON`] and was floored.
    pub degenerate: bool,
    /// Fewer than [`MIN_SAMPLES`] samples backed the observation.
    pub low_n: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupEntry {
    pub median: f64,
    pub low: f64,
    pub high: f64,
}

/// Smoothed normal behaviour of one link.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DelayReference {
    pub median: f64,
    pub low: f64,
    pub high: f64,
    pub bins_observed: u64,
    pub warmup: Vec<WarmupEntry>,
}

impl DelayReference {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_ready(&self) -> bool {
        self.bins_observed >= WARMUP_BINS as u64
    }

    /// Folds one bin into the reference.
    ///
    /// The first three bins are buffered; the reference is then seeded with
    /// the median of each of the three medians, lows and highs. Afterwards
    /// each of the three values is smoothed with `x̄ ← x̄ + α (x − x̄)`.
    pub fn update(&mut self, obs: &MedianEstimate, alpha: f64) {
        self.bins_observed += 1;
        if !self.is_ready() {
            self.warmup.push(WarmupEntry {
                median: obs.median,
                low: obs.ci_low,
                high: obs.ci_high,
            });
            return;
        }
        if !self.warmup.is_empty() {
            self.warmup.push(WarmupEntry {
                median: obs.median,
                low: obs.ci_low,
                high: obs.ci_high,
            });
            let pick = |f: fn(&WarmupEntry) -> f64| {
                let mut v: Vec<f64> = self.warmup.iter().map(f).collect();
                v.sort_unstable_by(f64::total_cmp);
                median_sorted(&v)
            };
            self.median = pick(|w| w.median);
            self.low = pick(|w| w.low);
            self.high = pick(|w| w.high);
            self.warmup.clear();
            return;
        }
        self.median += alpha * (obs.median - self.median);
        self.low += alpha * (obs.ci_low - self.low);
        self.high += alpha * (obs.ci_high - self.high);
    }
}

/// Returns the functional form of [`DelayReference::update`].
pub fn update_reference(reference: &DelayReference, obs: &MedianEstimate, alpha: f64) -> DelayReference {
    let mut next = reference.clone();
    next.update(obs, alpha);
    next
}

/// Compares an observation with the reference.
///
/// No change is reported while the reference is warming up, when the two
/// intervals intersect, or when the medians differ by less than
/// `min_diff_ms`.
pub fn detect(obs: &MedianEstimate, reference: &DelayReference, min_diff_ms: f64) -> Option<DelayChange> {
    if !reference.is_ready() {
        return None;
    }
    if (obs.median - reference.median).abs() < min_diff_ms {
        return None;
    }
    let low_n = obs.n_samples < MIN_SAMPLES;
    if reference.high < obs.ci_low {
        let half = reference.high - reference.median;
        let degenerate = half < DEGENERATE_EPSILON;
        let deviation = (obs.ci_low - reference.high) / half.max(DEGENERATE_EPSILON);
        Some(DelayChange {
            deviation,
            direction: Direction::Increase,
            degenerate,
            low_n,
        })
    } else if reference.low > obs.ci_high {
        let half = reference.median - reference.low;
        let degenerate = half < DEGENERATE_EPSILON;
        let deviation = (reference.low - obs.ci_high) / half.max(DEGENERATE_EPSILON);
        Some(DelayChange {
            deviation: -deviation,
            direction: Direction::Decrease,
            degenerate,
            low_n,
        })
    } else {
        None
    }
}

/// Reference values at the time an alarm was raised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSnapshot {
    pub median: f64,
    pub low: f64,
    pub high: f64,
    pub bins_observed: u64,
}

impl From<&DelayReference> for ReferenceSnapshot {
    fn from(r: &DelayReference) -> Self {
        ReferenceSnapshot {
            median: r.median,
            low: r.low,
            high: r.high,
            bins_observed: r.bins_observed,
        }
    }
}

/// A delay change on one link in one bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayAlarm {
    #[serde(flatten)]
    pub link: LinkKey,
    pub bin: TimeBin,
    #[serde(flatten)]
    pub change: DelayChange,
    pub observed: MedianEstimate,
    pub reference: ReferenceSnapshot,
}

/// Shortest event, in hours, that shifts the median of a link monitored by
/// `probes` probes each running `rate` traceroutes per hour, with bins of
/// `bin_hours`: `1/(3 r n) + T/2`.
///
/// Fails when the bin is shorter than `T_min = 9/(3 r n)`, the bin that
/// yields nine packets per link.
pub fn min_detectable_event(rate: f64, probes: u32, bin_hours: f64) -> Result<f64, DelayError> {
    if !(rate > 0.0) || probes == 0 {
        return Err(DelayError::InvalidRate { rate, probes });
    }
    let packets_per_hour = 3.0 * rate * f64::from(probes);
    let min_hours = min_bin_hours(rate, probes);
    if bin_hours < min_hours {
        return Err(DelayError::BinTooShort {
            bin_hours,
            min_hours,
            rate,
            probes,
        });
    }
    Ok(1.0 / packets_per_hour + bin_hours / 2.0)
}

/// `T_min = m / (3 r n)` with `m = 9`.
pub fn min_bin_hours(rate: f64, probes: u32) -> f64 {
    MIN_SAMPLES as f64 / (3.0 * rate * f64::from(probes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranks_for_hundred_samples() {
        let (wl, wu) = wilson_score(100, 1.96).unwrap();
        assert!((wl - 0.403_829_828_590_147_15).abs() < 1e-12);
        assert!((wu - 0.596_170_171_409_852_85).abs() < 1e-12);
        assert_eq!(wilson_ranks(100, 1.96).unwrap(), Ranks { lower: 40, upper: 60 });
    }

    #[test]
    fn single_sample_and_zero_z() {
        assert_eq!(wilson_ranks(1, 1.96).unwrap(), Ranks { lower: 1, upper: 1 });
        assert_eq!(wilson_score(10, 0.0).unwrap(), (0.5, 0.5));
        assert_eq!(wilson_ranks(10, 0.0).unwrap(), Ranks { lower: 5, upper: 5 });
        assert_eq!(wilson_ranks(7, 0.0).unwrap(), Ranks { lower: 3, upper: 4 });
        assert_eq!(wilson_ranks(0, 1.96), Err(DelayError::NoSamples));
    }

    #[test]
    fn characterize_examples() {
        let e = characterize(&[5.0, 1.0, 4.0, 2.0, 3.0], 0.0).unwrap();
        assert_eq!(e.median, 3.0);
        // ranks floor(2.5)=2 and ceil(2.5)=3
        assert_eq!((e.ci_low, e.ci_high), (2.0, 3.0));

        let samples: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        let e = characterize(&samples, 1.96).unwrap();
        assert_eq!(e.median, 50.5);
        assert_eq!((e.ci_low, e.ci_high), (40.0, 60.0));
        assert_eq!(e.n_samples, 100);

        assert_eq!(characterize(&[], 1.96), Err(DelayError::NoSamples));
    }

    #[test]
    fn interval_widened_to_contain_even_median() {
        let e = characterize(&[1.0, 2.0], 0.0).unwrap();
        assert_eq!(e.median, 1.5);
        assert!(e.ci_low <= e.median && e.median <= e.ci_high);
    }

    fn ready_reference(median: f64, low: f64, high: f64) -> DelayReference {
        DelayReference {
            median,
            low,
            high,
            bins_observed: 10,
            warmup: Vec::new(),
        }
    }

    fn estimate(median: f64, low: f64, high: f64) -> MedianEstimate {
        MedianEstimate {
            median,
            ci_low: low,
            ci_high: high,
            n_samples: 100,
            n_probes: 10,
            n_asns: 3,
        }
    }

    #[test]
    fn increase_deviation() {
        let change = detect(&estimate(11.0, 10.0, 12.0), &ready_reference(5.0, 4.0, 6.0), 1.0).unwrap();
        assert_eq!(change.direction, Direction::Increase);
        assert_eq!(change.deviation, 4.0);
        assert!(!change.degenerate);
    }

    #[test]
    fn overlap_and_small_difference_are_quiet() {
        let r = ready_reference(5.0, 4.0, 6.0);
        assert_eq!(detect(&estimate(5.2, 4.9, 5.5), &r, 1.0), None);
        let tight = ready_reference(5.3, 5.25, 5.35);
        assert_eq!(detect(&estimate(5.8, 5.7, 5.9), &tight, 1.0), None);
        // the same intervals are flagged once the 1 ms gate is lowered
        assert!(detect(&estimate(5.8, 5.7, 5.9), &tight, 0.1).is_some());
    }

    #[test]
    fn degenerate_reference_is_floored() {
        let r = ready_reference(5.0, 5.0, 5.0);
        let change = detect(&estimate(8.0, 7.0, 9.0), &r, 1.0).unwrap();
        assert!(change.degenerate);
        assert_eq!(change.deviation, 2.0 / DEGENERATE_EPSILON);
    }

    #[test]
    fn warmup_never_alarms() {
        let mut r = DelayReference::new();
        for m in [5.0, 7.0] {
            r.update(&estimate(m, m - 1.0, m + 1.0), 0.01);
            assert_eq!(detect(&estimate(100.0, 99.0, 101.0), &r, 1.0), None);
        }
    }

    #[test]
    fn warmup_seeds_with_median_of_three() {
        let mut r = DelayReference::new();
        for m in [5.0, 7.0, 6.0] {
            r.update(&estimate(m, m - 1.0, m + 0.5), 0.01);
        }
        assert!(r.is_ready());
        assert_eq!((r.median, r.low, r.high), (6.0, 5.0, 6.5));
        assert!(r.warmup.is_empty());
    }

    #[test]
    fn smoothing_step() {
        let r = ready_reference(6.0, 5.0, 7.0);
        let next = update_reference(&r, &estimate(10.0, 9.0, 11.0), 0.01);
        assert!((next.median - 6.04).abs() < 1e-12);
        assert!((next.low - 5.04).abs() < 1e-12);
        assert!((next.high - 7.04).abs() < 1e-12);
    }

    #[test]
    fn constant_stream_is_a_fixed_point() {
        let mut r = DelayReference::new();
        for _ in 0..500 {
            r.update(&estimate(4.25, 4.0, 4.5), 0.05);
        }
        assert_eq!((r.median, r.low, r.high), (4.25, 4.0, 4.5));
    }

    #[test]
    fn minimum_detectable_event() {
        let builtin = min_detectable_event(2.0, 3, 1.0).unwrap();
        assert!((builtin * 60.0 - 33.333).abs() < 0.01);
        let anchoring = min_detectable_event(4.0, 3, 0.25).unwrap();
        assert!((anchoring * 60.0 - 9.1667).abs() < 0.01);
        let wide = min_detectable_event(2.0, 1_000_000, 1.0).unwrap();
        assert!((wide - 0.5).abs() < 1e-6);
        assert!(matches!(
            min_detectable_event(2.0, 3, 0.4),
            Err(DelayError::BinTooShort { .. })
        ));
        assert!(min_detectable_event(0.0, 3, 1.0).is_err());
        assert!((min_bin_hours(2.0, 3) - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ranks_are_ordered_and_in_range(n in 1usize..5000, z in 0.0f64..4.0) {
            let r = wilson_ranks(n, z).unwrap();
            prop_assert!(1 <= r.lower && r.lower <= r.upper && r.upper <= n);
        }

        #[test]
        fn relative_width_shrinks_with_n(n in 1usize..5000) {
            let (l1, u1) = wilson_score(n, 1.96).unwrap();
            let (l2, u2) = wilson_score(n + 1, 1.96).unwrap();
            prop_assert!(u2 - l2 < u1 - l1);
        }

        #[test]
        fn estimate_brackets_median(v in proptest::collection::vec(-100.0f64..100.0, 1..300), z in 0.0f64..3.0) {
            let e = characterize(&v, z).unwrap();
            prop_assert!(e.ci_low <= e.median && e.median <= e.ci_high);
        }

        #[test]
        fn detect_is_symmetric(
            m in -50.0f64..50.0, hw in 0.1f64..5.0, gap in 1.5f64..20.0, ohw in 0.1f64..5.0,
        ) {
            // observed interval strictly above the reference interval
            let reference = ready_reference(m, m - hw, m + hw);
            let obs = estimate(m + hw + gap + ohw, m + hw + gap, m + hw + gap + 2.0 * ohw);
            let up = detect(&obs, &reference, 1.0).unwrap();
            prop_assert_eq!(up.direction, Direction::Increase);
            prop_assert!((up.deviation - gap / hw).abs() < 1e-9);
            // swap roles: the old reference is now the observation
            let swapped_ref = ready_reference(obs.median, obs.ci_low, obs.ci_high);
            let swapped_obs = estimate(m, m - hw, m + hw);
            let down = detect(&swapped_obs, &swapped_ref, 1.0).unwrap();
            prop_assert_eq!(down.direction, Direction::Decrease);
            let half = obs.median - obs.ci_low;
            prop_assert!((down.deviation + gap / half).abs() < 1e-9);
        }

        #[test]
        fn median_breakdown(
            v in proptest::collection::vec(-100.0f64..100.0, 5..200),
            big in 1e6f64..1e9,
            frac in 0.0f64..0.49,
        ) {
            let n = v.len();
            let k = ((n as f64) * frac) as usize;
            let k = k.min((n - 1) / 2);
            let base = characterize(&v, 1.96).unwrap().median;
            let mut contaminated = v.clone();
            contaminated.extend(std::iter::repeat_n(big, k));
            let m = characterize(&contaminated, 1.96).unwrap().median;
            // the median moves no further than k order statistics up
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            let bound = sorted[((n - 1) / 2 + k).min(n - 1)].max(sorted[(n / 2 + k).min(n - 1)]);
            prop_assert!(m >= base);
            prop_assert!(m <= bound + 1e-9);
        }
    }
}
