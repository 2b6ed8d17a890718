//! Differential RTTs per link and the probe-diversity filter.
//!
//! For two adjacent responsive hops X and Y of one traceroute, every
//! combination `rtt(Y) - rtt(X)` is a differential RTT sample for the link
//! X→Y. Samples from many probes are pooled per link and time bin; a link is
//! only analyzed when its probes are spread over enough origin ASes.

use std::collections::{BTreeMap, HashMap};
use std::net::IpAddr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Asn, TimeBin, TracerouteRecord};

pub const DEFAULT_MIN_AS: usize = 3;
pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 0.5;

/// A directed pair of adjacent addresses as seen on the forward path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkKey {
    pub near: IpAddr,
    pub far: IpAddr,
}

impl LinkKey {
    pub fn new(near: IpAddr, far: IpAddr) -> Self {
        LinkKey { near, far }
    }
}

/// Differential RTTs for every link of one traceroute.
///
/// Only hops whose indices differ by exactly one are adjacent; a link across
/// an unresponsive hop is never emitted, nor is a "link" from an address to
/// itself.
pub fn extract_links(record: &TracerouteRecord) -> Vec<(LinkKey, Vec<f64>)> {
    let mut out = Vec::new();
    for pair in record.hops.windows(2) {
        let (x, y) = (&pair[0], &pair[1]);
        if y.index != x.index + 1 || !x.is_responsive() || !y.is_responsive() {
            continue;
        }
        let (Some(near), Some(far)) = (x.from_addr, y.from_addr) else {
            continue;
        };
        if near == far {
            continue;
        }
        let mut deltas = Vec::with_capacity(x.rtts.len() * y.rtts.len());
        for rx in &x.rtts {
            for ry in &y.rtts {
                deltas.push(ry - rx);
            }
        }
        out.push((LinkKey { near, far }, deltas));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSample {
    pub probe_id: u64,
    pub probe_asn: Option<Asn>,
    /// Milliseconds; may be negative.
    pub delta: f64,
}

/// Pooled differential RTTs of one link in one bin.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkObservations {
    pub key: LinkKey,
    pub bin: TimeBin,
    pub samples: Vec<DeltaSample>,
}

impl LinkObservations {
    pub fn new(key: LinkKey, bin: TimeBin) -> Self {
        LinkObservations {
            key,
            bin,
            samples: Vec::new(),
        }
    }

    pub fn add(&mut self, probe_id: u64, probe_asn: Option<Asn>, deltas: &[f64]) {
        self.samples.extend(deltas.iter().map(|&delta| DeltaSample {
            probe_id,
            probe_asn,
            delta,
        }));
    }

    /// Sorts samples by (probe, delta) so that the pooled set does not depend
    /// on the order records were merged in.
    pub fn canonicalize(&mut self) {
        self.samples.sort_by(|a, b| {
            a.probe_id
                .cmp(&b.probe_id)
                .then_with(|| a.probe_asn.cmp(&b.probe_asn))
                .then_with(|| a.delta.total_cmp(&b.delta))
        });
    }

    /// Merges another shard of the same link and bin.
    pub fn merge(&mut self, other: LinkObservations) {
        debug_assert_eq!(self.key, other.key);
        debug_assert_eq!(self.bin, other.bin);
        self.samples.extend(other.samples);
        self.canonicalize();
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.delta).collect()
    }

    /// Distinct probes grouped by AS. Probes without a known AS are left out.
    pub fn probes_by_as(&self) -> BTreeMap<Asn, Vec<u64>> {
        let mut map: BTreeMap<Asn, Vec<u64>> = BTreeMap::new();
        for s in &self.samples {
            if let Some(asn) = s.probe_asn {
                map.entry(asn).or_default().push(s.probe_id);
            }
        }
        for probes in map.values_mut() {
            probes.sort_unstable();
            probes.dedup();
        }
        map
    }

    /// Number of distinct probes per AS.
    pub fn as_counts(&self) -> BTreeMap<Asn, usize> {
        self.probes_by_as()
            .into_iter()
            .map(|(asn, p)| (asn, p.len()))
            .collect()
    }

    pub fn probe_count(&self) -> usize {
        let mut ids: Vec<u64> = self.samples.iter().map(|s| s.probe_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Collects link observations for one time bin.
#[derive(Debug)]
pub struct BinAccumulator {
    bin: TimeBin,
    links: HashMap<LinkKey, LinkObservations>,
}

impl BinAccumulator {
    pub fn new(bin: TimeBin) -> Self {
        BinAccumulator {
            bin,
            links: HashMap::new(),
        }
    }

    pub fn add_record(&mut self, record: &TracerouteRecord) {
        for (key, deltas) in extract_links(record) {
            self.links
                .entry(key)
                .or_insert_with(|| LinkObservations::new(key, self.bin))
                .add(record.probe_id, record.probe_asn, &deltas);
        }
    }

    /// Canonicalized observations ordered by link.
    pub fn finish(self) -> Vec<LinkObservations> {
        let mut links: Vec<_> = self.links.into_values().collect();
        links.sort_unstable_by_key(|l| l.key);
        for l in &mut links {
            l.canonicalize();
        }
        links
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EntropyError {
    #[error("entropy of an empty AS distribution")]
    Empty,
}

/// Normalized entropy of a probe-per-AS distribution:
/// `H = -(1/ln n) Σ p_i ln p_i` over the `n` ASes with a nonzero count.
///
/// A single AS has entropy 0; an even split over two or more ASes is exactly 1.
pub fn entropy<I>(counts: I) -> Result<f64, EntropyError>
where
    I: IntoIterator<Item = usize>,
{
    let counts: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    if counts.is_empty() {
        return Err(EntropyError::Empty);
    }
    let n = counts.len();
    if n == 1 {
        return Ok(0.0);
    }
    if counts.iter().all(|&c| c == counts[0]) {
        return Ok(1.0);
    }
    let total: usize = counts.iter().sum();
    let total = total as f64;
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok((h / (n as f64).ln()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityConfig {
    pub min_as: usize,
    pub entropy_threshold: f64,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        DiversityConfig {
            min_as: DEFAULT_MIN_AS,
            entropy_threshold: DEFAULT_ENTROPY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rejection {
    /// Fewer distinct probe ASes than required.
    TooFewAses,
    /// Balancing would have removed an AS below the minimum.
    Unbalanced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityVerdict {
    pub accepted: bool,
    /// Entropy after removals (or of the input, when rejected outright).
    pub entropy: f64,
    pub n_asns: usize,
    /// Probes discarded while balancing, in removal order.
    pub removed_probes: Vec<u64>,
    pub rejection: Option<Rejection>,
}

/// Seed for the balancing draw of one link in one bin, mixed from the run
/// seed so that results do not depend on processing order.
pub fn link_seed(seed: u64, key: &LinkKey, bin: &TimeBin) -> u64 {
    let mut h = splitmix(seed ^ bin.start as u64);
    for addr in [key.near, key.far] {
        let bits = match addr {
            IpAddr::V4(a) => u128::from(u32::from(a)),
            IpAddr::V6(a) => u128::from(a),
        };
        h = splitmix(h ^ bits as u64);
        h = splitmix(h ^ (bits >> 64) as u64);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Applies the two diversity criteria to a link.
///
/// Links seen from fewer than `min_as` ASes are rejected. Otherwise, while
/// the entropy is at or below the threshold, a random probe of the most
/// represented AS (lowest ASN on ties) is discarded along with its samples.
/// The draw uses ChaCha8 seeded with `seed`, picking an index into the AS's
/// probe ids sorted ascending.
///
/// Rejected links come back with no samples.
pub fn enforce_diversity(
    obs: &LinkObservations,
    cfg: &DiversityConfig,
    seed: u64,
) -> (DiversityVerdict, LinkObservations) {
    let mut by_as = obs.probes_by_as();
    let initial_entropy = entropy(by_as.values().map(Vec::len)).unwrap_or(0.0);
    let reject = |rejection, entropy, n_asns, removed| {
        (
            DiversityVerdict {
                accepted: false,
                entropy,
                n_asns,
                removed_probes: removed,
                rejection: Some(rejection),
            },
            LinkObservations::new(obs.key, obs.bin),
        )
    };
    if by_as.len() < cfg.min_as.max(1) {
        return reject(Rejection::TooFewAses, initial_entropy, by_as.len(), Vec::new());
    }

    let total: usize = by_as.values().map(Vec::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut removed = Vec::new();
    let mut h = initial_entropy;
    while h <= cfg.entropy_threshold {
        if removed.len() >= total {
            return reject(Rejection::Unbalanced, h, by_as.len(), removed);
        }
        // strict `>` keeps the lowest ASN among equally large groups
        let mut target: Option<(Asn, usize)> = None;
        for (asn, probes) in &by_as {
            if target.is_none_or(|(_, c)| probes.len() > c) {
                target = Some((*asn, probes.len()));
            }
        }
        let Some((asn, count)) = target else {
            return reject(Rejection::Unbalanced, h, 0, removed);
        };
        if count == 1 && by_as.len() - 1 < cfg.min_as.max(1) {
            return reject(Rejection::Unbalanced, h, by_as.len(), removed);
        }
        let probes = by_as.get_mut(&asn).expect("target AS present");
        let victim = probes.remove(rng.random_range(0..probes.len()));
        if probes.is_empty() {
            by_as.remove(&asn);
        }
        removed.push(victim);
        h = entropy(by_as.values().map(Vec::len)).unwrap_or(0.0);
    }

    let mut filtered = obs.clone();
    if !removed.is_empty() {
        let mut gone = removed.clone();
        gone.sort_unstable();
        filtered
            .samples
            .retain(|s| gone.binary_search(&s.probe_id).is_err());
    }
    debug_assert!(by_as.len() >= cfg.min_as && h > cfg.entropy_threshold);
    (
        DiversityVerdict {
            accepted: true,
            entropy: h,
            n_asns: by_as.len(),
            removed_probes: removed,
            rejection: None,
        },
        filtered,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Hop;
    use proptest::prelude::*;

    fn ip(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    fn hop(index: u32, addr: Option<&str>, rtts: &[f64]) -> Hop {
        match addr {
            Some(a) => Hop {
                index,
                from_addr: Some(ip(a)),
                rtts: rtts.to_vec(),
                sent: 3,
            },
            None => Hop::unresponsive(index, 3),
        }
    }

    fn record(hops: Vec<Hop>) -> TracerouteRecord {
        TracerouteRecord {
            probe_id: 1,
            probe_addr: None,
            probe_asn: Some(Asn(1)),
            asn_supplied: true,
            timestamp: 0,
            dst_addr: ip("192.0.2.1"),
            hops,
        }
    }

    #[test]
    fn cross_product_of_rtts() {
        let r = record(vec![
            hop(1, Some("10.0.0.1"), &[10.0, 11.0, 12.0]),
            hop(2, Some("10.0.0.2"), &[15.0, 16.0]),
        ]);
        let links = extract_links(&r);
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].0, LinkKey::new(ip("10.0.0.1"), ip("10.0.0.2")));
        let mut got = links[0].1.clone();
        got.sort_by(f64::total_cmp);
        let mut want = vec![5.0, 4.0, 3.0, 6.0, 5.0, 4.0];
        want.sort_by(f64::total_cmp);
        assert_eq!(got, want);
    }

    #[test]
    fn negative_delta_allowed() {
        let r = record(vec![
            hop(1, Some("10.0.0.1"), &[10.0]),
            hop(2, Some("10.0.0.2"), &[8.0]),
        ]);
        assert_eq!(extract_links(&r)[0].1, vec![-2.0]);
    }

    #[test]
    fn no_link_across_unresponsive_hop_or_gap() {
        let r = record(vec![
            hop(1, Some("10.0.0.1"), &[10.0]),
            hop(2, None, &[]),
            hop(3, Some("10.0.0.3"), &[12.0]),
            hop(5, Some("10.0.0.5"), &[14.0]),
        ]);
        assert!(extract_links(&r).is_empty());
        assert!(extract_links(&record(vec![hop(1, Some("10.0.0.1"), &[1.0])])).is_empty());
    }

    #[test]
    fn self_loop_skipped() {
        let r = record(vec![
            hop(1, Some("10.0.0.1"), &[10.0]),
            hop(2, Some("10.0.0.1"), &[11.0]),
        ]);
        assert!(extract_links(&r).is_empty());
    }

    fn counts(pairs: &[(u32, usize)]) -> BTreeMap<Asn, usize> {
        pairs.iter().map(|&(a, c)| (Asn(a), c)).collect()
    }

    #[test]
    fn entropy_reference_values() {
        assert_eq!(entropy(counts(&[(1, 50), (2, 50)]).into_values()), Ok(1.0));
        assert_eq!(entropy(counts(&[(1, 100)]).into_values()), Ok(0.0));
        // -(0.9 ln 0.9 + 2 * 0.05 ln 0.05) / ln 3, evaluated at 40 digits
        let h = entropy(counts(&[(1, 90), (2, 5), (3, 5)]).into_values()).unwrap();
        assert!((h - 0.358_996_249_646_530_3).abs() < 1e-12, "{h}");
        assert_eq!(entropy(Vec::<usize>::new()), Err(EntropyError::Empty));
        assert_eq!(entropy(vec![0, 0]), Err(EntropyError::Empty));
    }

    fn observations(groups: &[(u32, usize)]) -> LinkObservations {
        let mut obs = LinkObservations::new(
            LinkKey::new(ip("10.0.0.1"), ip("10.0.0.2")),
            TimeBin {
                start: 0,
                width: 3600,
            },
        );
        let mut probe = 0;
        for &(asn, n) in groups {
            for _ in 0..n {
                probe += 1;
                obs.add(probe, Some(Asn(asn)), &[1.0, 2.0]);
            }
        }
        obs.canonicalize();
        obs
    }

    #[test]
    fn two_ases_rejected() {
        let obs = observations(&[(1, 10), (2, 10)]);
        let (v, f) = enforce_diversity(&obs, &DiversityConfig::default(), 1);
        assert!(!v.accepted);
        assert_eq!(v.rejection, Some(Rejection::TooFewAses));
        assert!(f.samples.is_empty());
    }

    #[test]
    fn balanced_link_accepted_untouched() {
        let obs = observations(&[(1, 1), (2, 1), (3, 1)]);
        let (v, f) = enforce_diversity(&obs, &DiversityConfig::default(), 1);
        assert!(v.accepted);
        assert_eq!(v.entropy, 1.0);
        assert!(v.removed_probes.is_empty());
        assert_eq!(f, obs);
    }

    /// Independent replay of the balancing loop: recompute the whole state
    /// from scratch at every step.
    fn replay(obs: &LinkObservations, threshold: f64, seed: u64) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut alive: Vec<(u64, Asn)> = obs
            .samples
            .iter()
            .filter_map(|s| s.probe_asn.map(|a| (s.probe_id, a)))
            .collect();
        alive.sort();
        alive.dedup();
        let mut removed = Vec::new();
        loop {
            let mut per_as: BTreeMap<Asn, usize> = BTreeMap::new();
            for (_, a) in &alive {
                *per_as.entry(*a).or_default() += 1;
            }
            let n = per_as.len() as f64;
            let tot = alive.len() as f64;
            let h = -per_as
                .values()
                .map(|&c| (c as f64 / tot) * (c as f64 / tot).ln())
                .sum::<f64>()
                / n.ln();
            if h > threshold {
                return removed;
            }
            let max = *per_as.values().max().unwrap();
            let asn = *per_as.iter().find(|(_, &c)| c == max).unwrap().0;
            let members: Vec<u64> = alive
                .iter()
                .filter(|(_, a)| *a == asn)
                .map(|(p, _)| *p)
                .collect();
            let victim = members[rand::Rng::random_range(&mut rng, 0..members.len())];
            alive.retain(|(p, _)| *p != victim);
            removed.push(victim);
        }
    }

    #[test]
    fn unbalanced_link_replays_identically() {
        let obs = observations(&[(1, 90), (2, 5), (3, 5)]);
        let cfg = DiversityConfig::default();
        for seed in [0, 1, 42, 0xdead_beef] {
            let (v, f) = enforce_diversity(&obs, &cfg, seed);
            assert!(v.accepted);
            assert!(v.entropy > 0.5);
            assert!(!v.removed_probes.is_empty());
            // every removed probe comes from AS1, the dominant group
            assert!(v.removed_probes.iter().all(|&p| p <= 90));
            assert_eq!(v.removed_probes, replay(&obs, 0.5, seed));
            assert_eq!(f.probe_count(), 100 - v.removed_probes.len());
        }
    }

    #[test]
    fn probes_without_asn_kept_but_not_counted() {
        let mut obs = observations(&[(1, 2), (2, 2), (3, 2)]);
        obs.add(999, None, &[5.0]);
        obs.canonicalize();
        assert_eq!(obs.as_counts().values().sum::<usize>(), 6);
        let (v, f) = enforce_diversity(&obs, &DiversityConfig::default(), 3);
        assert!(v.accepted);
        assert!(f.samples.iter().any(|s| s.probe_id == 999));
    }

    #[test]
    fn single_as_never_accepted_even_with_min_as_one() {
        let obs = observations(&[(1, 4)]);
        let cfg = DiversityConfig {
            min_as: 1,
            entropy_threshold: 0.5,
        };
        let (v, _) = enforce_diversity(&obs, &cfg, 0);
        assert!(!v.accepted);
        assert_eq!(v.rejection, Some(Rejection::Unbalanced));
    }

    proptest! {
        #[test]
        fn entropy_label_and_scale_invariant(
            c in proptest::collection::vec(1usize..50, 2..8),
            k in 1usize..20,
            rot in 0usize..8,
        ) {
            let h = entropy(c.clone()).unwrap();
            let mut rotated = c.clone();
            let rot = rot % rotated.len();
            rotated.rotate_left(rot);
            let scaled: Vec<usize> = c.iter().map(|x| x * k).collect();
            prop_assert!((h - entropy(rotated).unwrap()).abs() < 1e-12);
            prop_assert!((h - entropy(scaled).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&h));
        }

        #[test]
        fn accepted_links_meet_both_criteria(
            groups in proptest::collection::vec((1u32..12, 1usize..40), 1..8),
            seed in any::<u64>(),
            min_as in 1usize..5,
        ) {
            let obs = observations(&groups);
            let cfg = DiversityConfig { min_as, entropy_threshold: 0.5 };
            let (v, f) = enforce_diversity(&obs, &cfg, seed);
            let (v2, _) = enforce_diversity(&obs, &cfg, seed);
            prop_assert_eq!(&v, &v2);
            if v.accepted {
                let counts = f.as_counts();
                prop_assert!(counts.len() >= min_as);
                prop_assert!(entropy(counts.into_values()).unwrap() > 0.5);
            } else {
                prop_assert!(f.samples.is_empty());
            }
        }

        #[test]
        fn sample_count_is_sum_of_products(
            rtts in proptest::collection::vec(proptest::collection::vec(0.1f64..100.0, 1..=3), 2..10),
        ) {
            let hops: Vec<Hop> = rtts
                .iter()
                .enumerate()
                .map(|(i, r)| Hop {
                    index: i as u32 + 1,
                    from_addr: Some(IpAddr::from([10, 0, 0, i as u8 + 1])),
                    rtts: r.clone(),
                    sent: 3,
                })
                .collect();
            let links = extract_links(&record(hops));
            prop_assert_eq!(links.len(), rtts.len() - 1);
            for (i, (_, d)) in links.iter().enumerate() {
                prop_assert_eq!(d.len(), rtts[i].len() * rtts[i + 1].len());
            }
        }

        #[test]
        fn merge_is_order_independent(
            a in proptest::collection::vec((1u64..20, -50.0f64..50.0), 0..30),
            b in proptest::collection::vec((1u64..20, -50.0f64..50.0), 0..30),
            c in proptest::collection::vec((1u64..20, -50.0f64..50.0), 0..30),
        ) {
            let key = LinkKey::new(ip("10.0.0.1"), ip("10.0.0.2"));
            let bin = TimeBin { start: 0, width: 3600 };
            let shard = |v: &[(u64, f64)]| {
                let mut o = LinkObservations::new(key, bin);
                for &(p, d) in v {
                    o.add(p, Some(Asn(p as u32 % 4)), &[d]);
                }
                o.canonicalize();
                o
            };
            let mut left = shard(&a);
            left.merge(shard(&b));
            left.merge(shard(&c));
            let mut right = shard(&c);
            let mut bc = shard(&b);
            bc.merge(shard(&a));
            right.merge(bc);
            prop_assert_eq!(left, right);
        }
    }
}
