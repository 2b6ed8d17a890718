//! The RTT model and record generator.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;

use super::script::{AnomalyKind, AnomalyScript};
use super::topology::{NoiseModel, Topology, DEFAULT_LINK_MS, DEFAULT_RETURN_SPREAD_MS};
use crate::ingest::{Hop, TracerouteRecord, DEFAULT_BIN_WIDTH};

/// First timestamp of generated corpora (aligned on an hour).
pub const DEFAULT_START: i64 = 1_699_999_200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub bins: u32,
    pub seed: u64,
    pub bin_width: i64,
    pub start: i64,
}

impl SynthConfig {
    pub fn new(bins: u32, seed: u64) -> Self {
        SynthConfig {
            bins,
            seed,
            bin_width: DEFAULT_BIN_WIDTH,
            start: DEFAULT_START,
        }
    }
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(parts.iter().fold(mix(0, seed), |h, p| mix(h, *p)))
}

const TAG_RETURN: u64 = 1;
const TAG_PHASE: u64 = 2;
const TAG_TRACE: u64 = 3;
const TAG_JITTER: u64 = 4;

struct Model<'a> {
    topo: &'a Topology,
    seed: u64,
    /// Cumulative forward delay to each node on the probe's first path
    /// through it.
    base_return: HashMap<(usize, u64), f64>,
    noise: Option<LogNormal<f64>>,
}

impl<'a> Model<'a> {
    fn new(topo: &'a Topology, seed: u64) -> Self {
        let mut base_return = HashMap::new();
        for path in &topo.paths {
            let mut cum = DEFAULT_LINK_MS;
            for (j, &node) in path.hops.iter().enumerate() {
                if j > 0 {
                    cum += topo.link_delay(path.hops[j - 1], node);
                }
                base_return.entry((node, path.probe)).or_insert(cum);
            }
        }
        let noise = match topo.noise {
            NoiseModel::None => None,
            NoiseModel::LogNormal { mu, sigma } => {
                Some(LogNormal::new(mu, sigma).expect("lognormal parameters are finite"))
            }
        };
        Model {
            topo,
            seed,
            base_return,
            noise,
        }
    }

    /// ε for `node` seen from `probe`: explicit, or the forward delay plus a
    /// fixed uniform asymmetry drawn once per pair.
    fn return_delay(&self, node: usize, probe: u64, forward: f64) -> f64 {
        if let Some(ms) = self.topo.returns.get(&(node, probe)) {
            return *ms;
        }
        let base = self.base_return.get(&(node, probe)).copied().unwrap_or(forward);
        let mut rng = rng_for(self.seed, &[TAG_RETURN, node as u64, probe]);
        base + rng.random::<f64>() * DEFAULT_RETURN_SPREAD_MS
    }

    fn noise(&self, rng: &mut ChaCha8Rng) -> f64 {
        let Some(dist) = &self.noise else { return 0.0 };
        let mut x = dist.sample(rng);
        let o = self.topo.outliers;
        if rng.random::<f64>() < o.probability {
            x *= o.min_scale + rng.random::<f64>() * (o.max_scale - o.min_scale);
        }
        x
    }

    fn traceroute(
        &self,
        path_index: usize,
        k: u64,
        timestamp: i64,
        bin: u32,
        script: &AnomalyScript,
    ) -> TracerouteRecord {
        let topo = self.topo;
        let path = &topo.paths[path_index];
        let mut rng = rng_for(self.seed, &[TAG_TRACE, path_index as u64, k]);
        let mut jitter = rng_for(self.seed, &[TAG_JITTER, path_index as u64, k]);
        let active: Vec<&AnomalyKind> = script
            .events
            .iter()
            .filter(|e| e.active(bin))
            .map(|e| &e.kind)
            .collect();

        let mut hops_nodes = path.hops.clone();
        for kind in &active {
            if let AnomalyKind::Reroute { router, old, new } = kind {
                if hops_nodes.contains(new) {
                    continue;
                }
                if let Some(i) = hops_nodes.iter().position(|n| n == router) {
                    if hops_nodes.get(i + 1) == Some(old) {
                        hops_nodes[i + 1] = *new;
                    }
                }
            }
        }

        let probe = &topo.probes[&path.probe];
        let mut hops = Vec::with_capacity(hops_nodes.len());
        let mut forward = DEFAULT_LINK_MS;
        let mut survival = 1.0;
        let mut congestion: Vec<(f64, f64)> = Vec::new();
        for (j, &node) in hops_nodes.iter().enumerate() {
            if j > 0 {
                let prev = hops_nodes[j - 1];
                forward += topo.link_delay(prev, node);
                for kind in &active {
                    if let AnomalyKind::Congestion {
                        near,
                        far,
                        added_ms,
                        jitter_ms,
                    } = kind
                    {
                        if *near == prev && *far == node {
                            congestion.push((*added_ms, *jitter_ms));
                        }
                    }
                }
            }
            for kind in &active {
                if let AnomalyKind::Loss { router, probability } = kind {
                    if *router == node {
                        survival *= 1.0 - probability;
                    }
                }
            }
            let spec = &topo.nodes[node];
            let eps = self.return_delay(node, path.probe, forward);
            let mut rtts = Vec::with_capacity(topo.packets as usize);
            for _ in 0..topo.packets {
                let dropped = rng.random::<f64>() >= survival;
                let extra: f64 = congestion
                    .iter()
                    .map(|(add, jit)| add + jitter.random::<f64>() * jit)
                    .sum();
                let rtt = forward + extra + eps + self.noise(&mut rng);
                if !dropped && !spec.silent {
                    rtts.push(rtt);
                }
            }
            hops.push(Hop {
                index: j as u32 + 1,
                from_addr: (!rtts.is_empty()).then_some(spec.addr),
                rtts,
                sent: topo.packets,
            });
        }
        let dst = *path.hops.last().expect("paths end at a destination");
        TracerouteRecord {
            probe_id: probe.id,
            probe_addr: Some(probe.addr),
            probe_asn: Some(probe.asn),
            asn_supplied: true,
            timestamp,
            dst_addr: topo.nodes[dst].addr,
            hops,
        }
    }
}

/// Generates every traceroute of `cfg.bins` bins, ordered by timestamp,
/// then probe id, then destination. Output depends only on the inputs.
pub fn generate(topo: &Topology, script: &AnomalyScript, cfg: &SynthConfig) -> Vec<TracerouteRecord> {
    let model = Model::new(topo, cfg.seed);
    let interval = 3600.0 / topo.rate;
    let end = cfg.start + i64::from(cfg.bins) * cfg.bin_width;
    let mut records: Vec<TracerouteRecord> = (0..topo.paths.len())
        .into_par_iter()
        .flat_map_iter(|p| {
            let phase = rng_for(cfg.seed, &[TAG_PHASE, p as u64]).random::<f64>() * interval;
            let model = &model;
            (0u64..)
                .map(move |k| (k, cfg.start + (phase + k as f64 * interval).floor() as i64))
                .take_while(move |(_, ts)| *ts < end)
                .map(move |(k, ts)| {
                    let bin = ((ts - cfg.start) / cfg.bin_width) as u32;
                    model.traceroute(p, k, ts, bin, script)
                })
        })
        .collect();
    records.sort_by(|a, b| (a.timestamp, a.probe_id, a.dst_addr).cmp(&(b.timestamp, b.probe_id, b.dst_addr)));
    records
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffrtt::extract_links;
    use crate::stats::median;
    use crate::synth::default_topology;

    #[test]
    fn cadence_and_determinism() {
        let t = default_topology();
        let cfg = SynthConfig::new(3, 11);
        let a = generate(&t, &AnomalyScript::empty(), &cfg);
        assert_eq!(a.len(), 40 * 2 * 3);
        let b = generate(&t, &AnomalyScript::empty(), &cfg);
        assert_eq!(a, b);
        let c = generate(&t, &AnomalyScript::empty(), &SynthConfig::new(3, 12));
        assert_ne!(a, c);
        assert!(a.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
        assert!(a.iter().all(|r| r.timestamp >= DEFAULT_START && r.timestamp < DEFAULT_START + 3 * 3600));
    }

    #[test]
    fn noiseless_differential_rtt_is_link_delay_plus_return_gap() {
        let mut t = Topology::parse(
            "noise none\nas 1 10.0.0.0/16\nrouter X 1\nrouter Y 1\ndest D 1\nprobe 1 1\nprobe 2 1\n\
             path 1 D X Y\npath 2 D X Y\nlink X Y 7\nreturn X 1 3\nreturn Y 1 12\n",
        )
        .unwrap();
        t.outliers.probability = 0.0;
        let recs = generate(&t, &AnomalyScript::empty(), &SynthConfig::new(1, 1));
        let x = t.node("X").unwrap().addr;
        for r in recs.iter().filter(|r| r.probe_id == 1) {
            let links = extract_links(r);
            let (_, d) = links.iter().find(|(k, _)| k.near == x).unwrap();
            // forward 7 plus return 12 - 3
            assert!(d.iter().all(|v| (v - 16.0).abs() < 1e-9), "{d:?}");
        }
    }

    #[test]
    fn congestion_shifts_only_its_link() {
        let t = default_topology();
        let script = AnomalyScript::parse("congestion T1 C1 15 0 1 1", &t).unwrap();
        let cfg = SynthConfig::new(2, 5);
        let base = generate(&t, &AnomalyScript::empty(), &cfg);
        let hot = generate(&t, &script, &cfg);
        let (t1, c1, d1) = (t.node("T1").unwrap().addr, t.node("C1").unwrap().addr, t.node("D1").unwrap().addr);
        let pooled = |recs: &[TracerouteRecord], near, far, bin: i64| {
            let mut v = Vec::new();
            for r in recs.iter().filter(|r| (r.timestamp - DEFAULT_START) / 3600 == bin) {
                for (k, d) in extract_links(r) {
                    if k.near == near && k.far == far {
                        v.extend(d);
                    }
                }
            }
            median(&v).unwrap()
        };
        assert!((pooled(&hot, t1, c1, 1) - pooled(&base, t1, c1, 1) - 15.0).abs() < 1e-9);
        assert!((pooled(&hot, t1, c1, 0) - pooled(&base, t1, c1, 0)).abs() < 1e-9);
        assert!((pooled(&hot, c1, d1, 1) - pooled(&base, c1, d1, 1)).abs() < 1e-9);
    }

    #[test]
    fn loss_and_silence() {
        let mut t = default_topology();
        let c1 = t.node_index("C1").unwrap();
        t.nodes[c1].silent = true;
        let script = AnomalyScript::parse("loss T1 1.0 0 0", &t).unwrap();
        let recs = generate(&t, &script, &SynthConfig::new(1, 3));
        for r in &recs {
            let via_t1 = r.probe_id % 2 == 0;
            for h in &r.hops {
                if via_t1 && h.index >= 2 {
                    assert!(h.from_addr.is_none() && h.lost() == 3);
                }
            }
            if r.dst_addr == t.node("D1").unwrap().addr {
                assert!(r.hops[2].from_addr.is_none());
            }
        }
    }

    #[test]
    fn reroute_swaps_next_hop() {
        let t = default_topology();
        let script = AnomalyScript::parse("reroute A1 T2 T1 0 0", &t).unwrap();
        let recs = generate(&t, &script, &SynthConfig::new(1, 3));
        let t1 = t.node("T1").unwrap().addr;
        for r in recs.iter().filter(|r| r.probe_id <= 4) {
            assert_eq!(r.hops[1].from_addr.unwrap_or(t1), t1);
        }
    }
}
