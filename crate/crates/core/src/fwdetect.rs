//! Forwarding-pattern model and anomaly detection.
//!
//! For every router and traceroute destination we count the probe packets
//! forwarded to each next hop in a bin. Packets whose next position did not
//! answer land in a single unresponsive bucket. Patterns are compared to an
//! exponentially smoothed reference with the Pearson correlation; strongly
//! anti-correlated patterns are anomalous and each next hop gets a
//! responsibility score for the change.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};

use crate::ingest::{TimeBin, TracerouteRecord};

pub const DEFAULT_TAU: f64 = -0.25;
pub const DEFAULT_FW_ALPHA: f64 = 0.01;
/// Smoothed counts below this are dropped from a reference.
pub const PRUNE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NextHop {
    Addr(IpAddr),
    Unresponsive,
}

impl fmt::Display for NextHop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NextHop::Addr(a) => write!(f, "{a}"),
            NextHop::Unresponsive => f.write_str("*"),
        }
    }
}

impl Serialize for NextHop {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NextHop {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        if s == "*" {
            Ok(NextHop::Unresponsive)
        } else {
            s.parse().map(NextHop::Addr).map_err(serde::de::Error::custom)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatternKey {
    pub router: IpAddr,
    pub destination: IpAddr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardingPattern {
    pub key: PatternKey,
    pub bin: TimeBin,
    pub counts: BTreeMap<NextHop, f64>,
}

/// Counts next hops for every responsive router in `records`.
///
/// For a responsive hop R followed by hop R+1, each answered packet of R+1
/// counts toward its address and each unanswered one toward
/// [`NextHop::Unresponsive`]. A hop with no R+1 entry (end of trace or a
/// gap in indices) contributes nothing.
pub fn build_patterns<'a, I>(records: I, bin: TimeBin) -> Vec<ForwardingPattern>
where
    I: IntoIterator<Item = &'a TracerouteRecord>,
{
    let mut acc: HashMap<PatternKey, BTreeMap<NextHop, f64>> = HashMap::new();
    for record in records {
        add_record(&mut acc, record);
    }
    let mut out: Vec<_> = acc
        .into_iter()
        .map(|(key, counts)| ForwardingPattern { key, bin, counts })
        .collect();
    out.sort_unstable_by_key(|p| p.key);
    out
}

pub(crate) fn add_record(acc: &mut HashMap<PatternKey, BTreeMap<NextHop, f64>>, record: &TracerouteRecord) {
    for pair in record.hops.windows(2) {
        let (here, next) = (&pair[0], &pair[1]);
        if next.index != here.index + 1 || !here.is_responsive() {
            continue;
        }
        let Some(router) = here.from_addr else {
            continue;
        };
        let counts = acc
            .entry(PatternKey {
                router,
                destination: record.dst_addr,
            })
            .or_default();
        if let (Some(addr), answered) = (next.from_addr, next.rtts.len()) {
            if answered > 0 {
                *counts.entry(NextHop::Addr(addr)).or_default() += answered as f64;
            }
        }
        let lost = next.lost();
        if lost > 0 {
            *counts.entry(NextHop::Unresponsive).or_default() += f64::from(lost);
        }
    }
}

/// Smoothed forwarding counts for one router toward one destination.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ForwardingReference {
    pub counts: BTreeMap<NextHop, f64>,
    pub bins_observed: u64,
}

impl ForwardingReference {
    /// `F̄ ← α F + (1 − α) F̄` over the union of next hops; the first pattern
    /// initializes the reference.
    pub fn update(&mut self, pattern: &BTreeMap<NextHop, f64>, alpha: f64) {
        if self.bins_observed == 0 {
            self.counts = pattern.clone();
        } else {
            let hops: BTreeSet<NextHop> = self.counts.keys().chain(pattern.keys()).copied().collect();
            let mut next = BTreeMap::new();
            for hop in hops {
                let now = pattern.get(&hop).copied().unwrap_or(0.0);
                let before = self.counts.get(&hop).copied().unwrap_or(0.0);
                let v = alpha * now + (1.0 - alpha) * before;
                if v >= PRUNE_EPSILON {
                    next.insert(hop, v);
                }
            }
            self.counts = next;
        }
        self.bins_observed += 1;
    }
}

pub fn update_fw_reference(
    reference: Option<&ForwardingReference>,
    pattern: &BTreeMap<NextHop, f64>,
    alpha: f64,
) -> ForwardingReference {
    let mut next = reference.cloned().unwrap_or_default();
    next.update(pattern, alpha);
    next
}

/// Current and reference counts aligned over the union of next hops.
fn aligned(
    current: &BTreeMap<NextHop, f64>,
    reference: &BTreeMap<NextHop, f64>,
) -> (Vec<NextHop>, Vec<f64>, Vec<f64>) {
    let hops: Vec<NextHop> = current
        .keys()
        .chain(reference.keys())
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let p = hops.iter().map(|h| current.get(h).copied().unwrap_or(0.0)).collect();
    let q = hops.iter().map(|h| reference.get(h).copied().unwrap_or(0.0)).collect();
    (hops, p, q)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    /// Pearson was undefined (a constant vector) and `rho` was substituted.
    pub undefined_variance: bool,
}

/// Pearson correlation between a pattern and its reference.
///
/// If either vector is constant the coefficient is undefined; the result is
/// then 1 when the vectors are proportional and 0 otherwise, flagged.
pub fn correlate(current: &BTreeMap<NextHop, f64>, reference: &BTreeMap<NextHop, f64>) -> Correlation {
    let (_, p, q) = aligned(current, reference);
    pearson(&p, &q)
}

fn pearson(p: &[f64], q: &[f64]) -> Correlation {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mq = q.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in p.iter().zip(q) {
        let (dx, dy) = (x - mp, y - mq);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let scale = p.iter().chain(q).fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let tiny = (1e-12 * scale).powi(2) * n;
    if sxx <= tiny || syy <= tiny {
        let rho = if proportional(p, q) { 1.0 } else { 0.0 };
        return Correlation {
            rho,
            undefined_variance: true,
        };
    }
    Correlation {
        rho: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        undefined_variance: false,
    }
}

/// True when `p = c q` for some `c > 0`.
fn proportional(p: &[f64], q: &[f64]) -> bool {
    let sp: f64 = p.iter().sum();
    let sq: f64 = q.iter().sum();
    if sp <= 0.0 || sq <= 0.0 {
        return sp == 0.0 && sq == 0.0;
    }
    p.iter()
        .zip(q)
        .all(|(x, y)| (x / sp - y / sq).abs() <= 1e-9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardingAlarm {
    pub key: PatternKey,
    pub bin: TimeBin,
    pub rho: f64,
    /// `r_i = −ρ (p_i − p̄_i) / Σ_j |p_j − p̄_j|` for every next hop of the
    /// union.
    pub responsibilities: BTreeMap<NextHop, f64>,
}

/// Reports the pattern when its correlation with the reference is below `tau`.
pub fn detect_forwarding(
    pattern: &ForwardingPattern,
    reference: &ForwardingReference,
    tau: f64,
) -> Option<ForwardingAlarm> {
    let (hops, p, q) = aligned(&pattern.counts, &reference.counts);
    let corr = pearson(&p, &q);
    if !(corr.rho < tau) {
        return None;
    }
    let total: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
    assert!(total > 0.0, "identical patterns cannot be anti-correlated");
    let responsibilities = hops
        .into_iter()
        .zip(p.iter().zip(&q))
        .map(|(hop, (a, b))| (hop, -corr.rho * (a - b) / total))
        .collect();
    Some(ForwardingAlarm {
        key: pattern.key,
        bin: pattern.bin,
        rho: corr.rho,
        responsibilities,
    })
}
