//! Synthetic topology description and its line-oriented text format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use crate::ingest::{Asn, Prefix, PrefixTable};

use super::SynthError;

pub const DEFAULT_LINK_MS: f64 = 1.0;
pub const DEFAULT_RATE: f64 = 2.0;
pub const DEFAULT_PACKETS: u32 = 3;
/// Upper bound of the uniform asymmetry added to default return delays.
pub const DEFAULT_RETURN_SPREAD_MS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    None,
    LogNormal { mu: f64, sigma: f64 },
}

/// Occasional multiplicative spikes applied to the noise term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierModel {
    pub probability: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Router,
    Destination,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub asn: Asn,
    pub addr: IpAddr,
    pub kind: NodeKind,
    /// Never answers probes.
    pub silent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub id: u64,
    pub asn: Asn,
    pub addr: IpAddr,
}

/// Forward path of one probe toward one destination. `hops` are node
/// indices and end with the destination.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec {
    pub probe: u64,
    pub hops: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub ases: BTreeMap<Asn, Prefix>,
    pub nodes: Vec<Node>,
    pub probes: BTreeMap<u64, ProbeSpec>,
    pub paths: Vec<PathSpec>,
    /// One-way link delays in ms, keyed by node pair in declaration order.
    pub links: HashMap<(usize, usize), f64>,
    /// Explicit return-path delays in ms per (node, probe).
    pub returns: HashMap<(usize, u64), f64>,
    pub noise: NoiseModel,
    pub outliers: OutlierModel,
    /// Traceroutes per probe and destination per hour.
    pub rate: f64,
    pub packets: u32,
    names: HashMap<String, usize>,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            ases: BTreeMap::new(),
            nodes: Vec::new(),
            probes: BTreeMap::new(),
            paths: Vec::new(),
            links: HashMap::new(),
            returns: HashMap::new(),
            noise: NoiseModel::LogNormal { mu: 0.0, sigma: 0.5 },
            outliers: OutlierModel {
                probability: 0.01,
                min_scale: 10.0,
                max_scale: 100.0,
            },
            rate: DEFAULT_RATE,
            packets: DEFAULT_PACKETS,
            names: HashMap::new(),
        }
    }
}

struct Allocator {
    next: HashMap<Asn, u128>,
    used: HashSet<IpAddr>,
}

impl Allocator {
    fn take(&mut self, asn: Asn, prefix: &Prefix) -> Option<IpAddr> {
        let width = if prefix.addr().is_ipv4() { 32 } else { 128 };
        let base = match prefix.addr() {
            IpAddr::V4(a) => u128::from(u32::from(a)),
            IpAddr::V6(a) => u128::from(a),
        };
        let size = if width - u32::from(prefix.len()) >= 127 {
            u128::MAX
        } else {
            1u128 << (width - u32::from(prefix.len()))
        };
        let offset = self.next.entry(asn).or_insert(1);
        while *offset < size {
            let raw = base + *offset;
            *offset += 1;
            let addr = if width == 32 {
                IpAddr::V4(Ipv4Addr::from(raw as u32))
            } else {
                IpAddr::V6(Ipv6Addr::from(raw))
            };
            if self.used.insert(addr) {
                return Some(addr);
            }
        }
        None
    }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&&str>, what: &str, line: usize) -> Result<T, SynthError> {
    let tok = tok.ok_or_else(|| SynthError::parse(line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| SynthError::parse(line, format!("invalid {what} '{tok}'")))
}

impl Topology {
    /// Parses the text format. See the crate README for the grammar.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut topo = Topology::default();
        let mut alloc = Allocator {
            next: HashMap::new(),
            used: HashSet::new(),
        };
        let mut pending_paths: Vec<(usize, u64, String, Vec<String>)> = Vec::new();
        let mut pending_links: Vec<(usize, String, String, f64)> = Vec::new();
        let mut pending_returns: Vec<(usize, String, u64, f64)> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("");
            let toks: Vec<&str> = content.split_whitespace().collect();
            let Some(&head) = toks.first() else { continue };
            match head {
                "as" => {
                    let asn = Asn(parse_num(toks.get(1), "asn", line)?);
                    let prefix: Prefix = parse_num(toks.get(2), "prefix", line)?;
                    if topo.ases.insert(asn, prefix).is_some() {
                        return Err(SynthError::parse(line, format!("{asn} declared twice")));
                    }
                }
                "router" | "dest" => {
                    let name = toks
                        .get(1)
                        .ok_or_else(|| SynthError::parse(line, "missing name"))?
                        .to_string();
                    let asn = Asn(parse_num(toks.get(2), "asn", line)?);
                    let mut addr = None;
                    let mut silent = false;
                    for tok in &toks[3..] {
                        if *tok == "silent" {
                            silent = true;
                        } else {
                            addr = Some(parse_num::<IpAddr>(Some(tok), "address", line)?);
                        }
                    }
                    let addr = topo.assign_addr(&mut alloc, asn, addr, line)?;
                    if topo.names.contains_key(&name) {
                        return Err(SynthError::parse(line, format!("node '{name}' declared twice")));
                    }
                    topo.names.insert(name.clone(), topo.nodes.len());
                    topo.nodes.push(Node {
                        name,
                        asn,
                        addr,
                        kind: if head == "dest" {
                            NodeKind::Destination
                        } else {
                            NodeKind::Router
                        },
                        silent,
                    });
                }
                "probe" => {
                    let id: u64 = parse_num(toks.get(1), "probe id", line)?;
                    let asn = Asn(parse_num(toks.get(2), "asn", line)?);
                    let addr = match toks.get(3) {
                        Some(t) => Some(parse_num::<IpAddr>(Some(t), "address", line)?),
                        None => None,
                    };
                    let addr = topo.assign_addr(&mut alloc, asn, addr, line)?;
                    if topo.probes.insert(id, ProbeSpec { id, asn, addr }).is_some() {
                        return Err(SynthError::parse(line, format!("probe {id} declared twice")));
                    }
                }
                "link" => {
                    let a = toks.get(1).ok_or_else(|| SynthError::parse(line, "missing node"))?;
                    let b = toks.get(2).ok_or_else(|| SynthError::parse(line, "missing node"))?;
                    let ms = match toks.get(3) {
                        Some(_) => parse_num(toks.get(3), "delay", line)?,
                        None => DEFAULT_LINK_MS,
                    };
                    pending_links.push((line, a.to_string(), b.to_string(), ms));
                }
                "path" => {
                    let probe: u64 = parse_num(toks.get(1), "probe id", line)?;
                    let dest = toks
                        .get(2)
                        .ok_or_else(|| SynthError::parse(line, "missing destination"))?
                        .to_string();
                    let hops = toks[3..].iter().map(|s| s.to_string()).collect();
                    pending_paths.push((line, probe, dest, hops));
                }
                "return" => {
                    let node = toks.get(1).ok_or_else(|| SynthError::parse(line, "missing node"))?;
                    let probe: u64 = parse_num(toks.get(2), "probe id", line)?;
                    let ms: f64 = parse_num(toks.get(3), "delay", line)?;
                    pending_returns.push((line, node.to_string(), probe, ms));
                }
                "noise" => {
                    topo.noise = match toks.get(1).copied() {
                        Some("none") => NoiseModel::None,
                        Some("lognormal") => NoiseModel::LogNormal {
                            mu: parse_num(toks.get(2), "mu", line)?,
                            sigma: parse_num(toks.get(3), "sigma", line)?,
                        },
                        other => {
                            return Err(SynthError::parse(
                                line,
                                format!("unknown noise model {:?}", other.unwrap_or("")),
                            ))
                        }
                    };
                }
                "outlier" => {
                    topo.outliers = OutlierModel {
                        probability: parse_num(toks.get(1), "probability", line)?,
                        min_scale: parse_num(toks.get(2), "min scale", line)?,
                        max_scale: parse_num(toks.get(3), "max scale", line)?,
                    };
                    let o = topo.outliers;
                    if !(0.0..=1.0).contains(&o.probability) || o.min_scale > o.max_scale {
                        return Err(SynthError::parse(line, "invalid outlier model"));
                    }
                }
                "rate" => {
                    topo.rate = parse_num(toks.get(1), "rate", line)?;
                    if !(topo.rate > 0.0 && topo.rate.is_finite()) {
                        return Err(SynthError::parse(line, "rate must be positive"));
                    }
                }
                "packets" => {
                    topo.packets = parse_num(toks.get(1), "packet count", line)?;
                    if topo.packets == 0 {
                        return Err(SynthError::parse(line, "packet count must be positive"));
                    }
                }
                other => return Err(SynthError::parse(line, format!("unknown directive '{other}'"))),
            }
        }

        for (line, a, b, ms) in pending_links {
            let key = (topo.resolve(&a, line)?, topo.resolve(&b, line)?);
            if !(ms >= 0.0 && ms.is_finite()) {
                return Err(SynthError::parse(line, "link delay must be non-negative"));
            }
            topo.links.insert(key, ms);
        }
        for (line, probe, dest, hops) in pending_paths {
            if !topo.probes.contains_key(&probe) {
                return Err(SynthError::parse(line, format!("unknown probe {probe}")));
            }
            let d = topo.resolve(&dest, line)?;
            if topo.nodes[d].kind != NodeKind::Destination {
                return Err(SynthError::parse(line, format!("'{dest}' is not a destination")));
            }
            let mut ids = hops
                .iter()
                .map(|h| topo.resolve(h, line))
                .collect::<Result<Vec<_>, _>>()?;
            ids.push(d);
            let mut seen = HashSet::new();
            if !ids.iter().all(|n| seen.insert(*n)) {
                return Err(SynthError::parse(line, "path visits a node twice"));
            }
            topo.paths.push(PathSpec { probe, hops: ids });
        }
        for (line, node, probe, ms) in pending_returns {
            let n = topo.resolve(&node, line)?;
            if !topo.probes.contains_key(&probe) {
                return Err(SynthError::parse(line, format!("unknown probe {probe}")));
            }
            topo.returns.insert((n, probe), ms);
        }
        Ok(topo)
    }

    fn assign_addr(
        &self,
        alloc: &mut Allocator,
        asn: Asn,
        addr: Option<IpAddr>,
        line: usize,
    ) -> Result<IpAddr, SynthError> {
        let prefix = self
            .ases
            .get(&asn)
            .ok_or_else(|| SynthError::parse(line, format!("{asn} has no 'as' line")))?;
        match addr {
            Some(a) => {
                if !alloc.used.insert(a) {
                    return Err(SynthError::parse(line, format!("address {a} used twice")));
                }
                Ok(a)
            }
            None => alloc
                .take(asn, prefix)
                .ok_or_else(|| SynthError::parse(line, format!("{asn} address pool exhausted"))),
        }
    }

    fn resolve(&self, name: &str, line: usize) -> Result<usize, SynthError> {
        self.node_index(name)
            .ok_or_else(|| SynthError::parse(line, format!("unknown node '{name}'")))
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.names.get(name).copied()
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.node_index(name).map(|i| &self.nodes[i])
    }

    /// One-way delay between two nodes, in either declared direction.
    pub fn link_delay(&self, a: usize, b: usize) -> f64 {
        self.links
            .get(&(a, b))
            .or_else(|| self.links.get(&(b, a)))
            .copied()
            .unwrap_or(DEFAULT_LINK_MS)
    }

    /// Whether `a` is immediately followed by `b` on some path.
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        self.paths.iter().any(|p| p.hops.windows(2).any(|w| w[0] == a && w[1] == b))
    }

    /// The prefix table matching the topology's address plan.
    pub fn prefix_table(&self) -> PrefixTable {
        let mut table = PrefixTable::new();
        for (asn, prefix) in &self.ases {
            table.insert(*prefix, *asn);
        }
        table
    }
}

/// Text of the built-in topology: 20 probes spread evenly over 5 access
/// ASes, each behind its own access router, reaching two destinations via
/// two transit routers and two core routers.
pub fn default_topology_text() -> String {
    let mut s = String::new();
    s.push_str("rate 2\npackets 3\nnoise lognormal 0 0.5\noutlier 0.01 10 100\n");
    for k in 1..=5 {
        writeln!(s, "as {} 10.{k}.0.0/16", 64500 + k).unwrap();
    }
    s.push_str("as 64510 10.10.0.0/16\nas 64511 10.11.0.0/16\n");
    s.push_str("as 64520 10.20.0.0/16\nas 64521 10.21.0.0/16\n");
    for k in 1..=5 {
        writeln!(s, "router A{k} {}", 64500 + k).unwrap();
    }
    s.push_str("router T1 64510\nrouter T2 64510\nrouter C1 64511\nrouter C2 64511\n");
    s.push_str("dest D1 64520\ndest D2 64521\n");
    for k in 1..=5 {
        writeln!(s, "link A{k} T1 {}", 1.5 + 0.5 * k as f64).unwrap();
        writeln!(s, "link A{k} T2 {}", 2.0 + 0.5 * k as f64).unwrap();
    }
    s.push_str("link T1 C1 5\nlink T2 C1 6\nlink T1 C2 7\nlink T2 C2 4\n");
    s.push_str("link C1 D1 3\nlink C2 D2 8\n");
    for id in 1..=20u64 {
        let k = (id - 1) / 4 + 1;
        writeln!(s, "probe {id} {}", 64500 + k).unwrap();
    }
    for id in 1..=20u64 {
        let k = (id - 1) / 4 + 1;
        let t = if id % 2 == 0 { "T1" } else { "T2" };
        writeln!(s, "path {id} D1 A{k} {t} C1").unwrap();
        writeln!(s, "path {id} D2 A{k} {t} C2").unwrap();
    }
    s
}

pub fn default_topology() -> Topology {
    Topology::parse(&default_topology_text()).expect("built-in topology is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_topology_shape() {
        let t = default_topology();
        assert_eq!(t.probes.len(), 20);
        let ases: HashSet<Asn> = t.probes.values().map(|p| p.asn).collect();
        assert_eq!(ases.len(), 5);
        assert_eq!(t.paths.len(), 40);
        assert!(t.paths.iter().all(|p| p.hops.len() == 4));
        let table = t.prefix_table();
        for n in &t.nodes {
            assert_eq!(table.lookup(n.addr), Some(n.asn));
        }
        for p in t.probes.values() {
            assert_eq!(table.lookup(p.addr), Some(p.asn));
        }
    }

    #[test]
    fn explicit_addresses_and_defaults() {
        let t = Topology::parse(
            "as 1 192.0.2.0/24\nrouter R 1 192.0.2.1 silent\nrouter S 1\ndest D 1\nprobe 7 1\npath 7 D R S\nlink R S 4\n",
        )
        .unwrap();
        let r = t.node("R").unwrap();
        assert!(r.silent);
        assert_eq!(r.addr.to_string(), "192.0.2.1");
        assert_eq!(t.node("S").unwrap().addr.to_string(), "192.0.2.2");
        let (ri, si, di) = (t.node_index("R").unwrap(), t.node_index("S").unwrap(), t.node_index("D").unwrap());
        assert_eq!(t.link_delay(si, ri), 4.0);
        assert_eq!(t.link_delay(si, di), DEFAULT_LINK_MS);
        assert_eq!(t.paths[0].hops, vec![ri, si, di]);
    }

    #[test]
    fn errors_name_the_line() {
        let err = Topology::parse("as 1 10.0.0.0/8\nrouter R 2\n").unwrap_err();
        assert!(matches!(err, SynthError::Parse { line: 2, .. }), "{err}");
        let err = Topology::parse("as 1 10.0.0.0/8\ndest D 1\nprobe 1 1\npath 1 D X\n").unwrap_err();
        assert!(matches!(err, SynthError::Parse { line: 4, .. }), "{err}");
        let err = Topology::parse("bogus\n").unwrap_err();
        assert!(matches!(err, SynthError::Parse { line: 1, .. }));
    }

    #[test]
    fn cyclic_path_rejected() {
        let err = Topology::parse("as 1 10.0.0.0/8\nrouter R 1\ndest D 1\nprobe 1 1\npath 1 D R R\n").unwrap_err();
        assert!(err.to_string().contains("twice"));
    }
}
