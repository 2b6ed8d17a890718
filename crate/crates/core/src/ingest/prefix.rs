//! IP prefixes and the longest-prefix-match table used to map addresses to
//! origin ASes.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Autonomous system number. `Asn(0)` is reserved and used as the catch-all
/// bucket for addresses the prefix table cannot map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Asn(pub u32);

impl Asn {
    pub const UNKNOWN: Asn = Asn(0);
}

impl fmt::Display for Asn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AS{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PrefixError {
    #[error("invalid prefix `{0}`")]
    Syntax(String),
    #[error("prefix length {len} exceeds {max} for {addr}")]
    Length { addr: IpAddr, len: u8, max: u8 },
}

/// A network prefix with its host bits cleared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Prefix {
    addr: IpAddr,
    len: u8,
}

impl Prefix {
    pub fn new(addr: IpAddr, len: u8) -> Result<Self, PrefixError> {
        let max = max_len(&addr);
        if len > max {
            return Err(PrefixError::Length { addr, len, max });
        }
        Ok(Self::truncate(addr, len))
    }

    /// The prefix of length `len` covering `addr`. Lengths beyond the
    /// address width are clamped.
    pub fn truncate(addr: IpAddr, len: u8) -> Self {
        let len = len.min(max_len(&addr));
        let addr = match addr {
            IpAddr::V4(a) => IpAddr::V4(Ipv4Addr::from(mask_v4(u32::from(a), len))),
            IpAddr::V6(a) => IpAddr::V6(Ipv6Addr::from(mask_v6(u128::from(a), len))),
        };
        Prefix { addr, len }
    }

    pub fn addr(&self) -> IpAddr {
        self.addr
    }

    pub fn len(&self) -> u8 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, addr: IpAddr) -> bool {
        match (self.addr, addr) {
            (IpAddr::V4(_), IpAddr::V4(_)) | (IpAddr::V6(_), IpAddr::V6(_)) => {
                Prefix::truncate(addr, self.len) == *self
            }
            _ => false,
        }
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.len)
    }
}

impl FromStr for Prefix {
    type Err = PrefixError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = s
            .split_once('/')
            .ok_or_else(|| PrefixError::Syntax(s.to_string()))?;
        let addr: IpAddr = addr
            .parse()
            .map_err(|_| PrefixError::Syntax(s.to_string()))?;
        let len: u8 = len.parse().map_err(|_| PrefixError::Syntax(s.to_string()))?;
        Prefix::new(addr, len)
    }
}

impl Serialize for Prefix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Prefix {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn max_len(addr: &IpAddr) -> u8 {
    match addr {
        IpAddr::V4(_) => 32,
        IpAddr::V6(_) => 128,
    }
}

fn mask_v4(bits: u32, len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        bits & (u32::MAX << (32 - u32::from(len)))
    }
}

fn mask_v6(bits: u128, len: u8) -> u128 {
    if len == 0 {
        0
    } else {
        bits & (u128::MAX << (128 - u32::from(len)))
    }
}

#[derive(Debug, Error)]
pub enum PrefixTableError {
    #[error("pfx2as line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("reading prefix table: {0}")]
    Io(#[from] std::io::Error),
}

/// One address family's table: a hash map per prefix length, probed from
/// the most specific length downwards.
#[derive(Debug, Clone, Default)]
struct FamilyTable {
    // (length, masked address bits -> asn), sorted by length descending
    levels: Vec<(u8, HashMap<u128, Asn>)>,
}

impl FamilyTable {
    fn insert(&mut self, bits: u128, len: u8, asn: Asn) -> bool {
        let pos = match self.levels.binary_search_by(|(l, _)| len.cmp(l)) {
            Ok(pos) => pos,
            Err(pos) => {
                self.levels.insert(pos, (len, HashMap::new()));
                pos
            }
        };
        let level = &mut self.levels[pos].1;
        if level.contains_key(&bits) {
            return false;
        }
        level.insert(bits, asn);
        true
    }

    fn lookup(&self, bits: u128, width: u8) -> Option<Asn> {
        self.levels.iter().find_map(|(len, level)| {
            let host_bits = u32::from(width - len);
            let masked = if host_bits >= 128 {
                0
            } else {
                bits & !((1u128 << host_bits) - 1)
            };
            level.get(&masked).copied()
        })
    }
}

/// Longest-prefix-match table mapping IP addresses to origin ASNs.
///
/// Immutable once built; share it behind `&` or `Arc` across workers.
#[derive(Debug, Clone, Default)]
pub struct PrefixTable {
    v4: FamilyTable,
    v6: FamilyTable,
    entries: Vec<(Prefix, Asn)>,
}

impl PrefixTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a prefix. The first mapping seen for a given prefix wins; later
    /// duplicates are ignored and `false` is returned.
    pub fn insert(&mut self, prefix: Prefix, asn: Asn) -> bool {
        let inserted = match prefix.addr {
            IpAddr::V4(a) => self.v4.insert(u128::from(u32::from(a)), prefix.len, asn),
            IpAddr::V6(a) => self.v6.insert(u128::from(a), prefix.len, asn),
        };
        if inserted {
            self.entries.push((prefix, asn));
        }
        inserted
    }

    pub fn lookup(&self, addr: IpAddr) -> Option<Asn> {
        match addr {
            IpAddr::V4(a) => self.v4.lookup(u128::from(u32::from(a)), 32),
            IpAddr::V6(a) => self.v6.lookup(u128::from(a), 128),
        }
    }

    /// Same as [`lookup`](Self::lookup) but maps misses to [`Asn::UNKNOWN`].
    pub fn lookup_or_unknown(&self, addr: IpAddr) -> Asn {
        self.lookup(addr).unwrap_or(Asn::UNKNOWN)
    }

    pub fn entries(&self) -> &[(Prefix, Asn)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads the pfx2as text format: `prefix<TAB>length<TAB>asn` per line.
    ///
    /// Multi-origin fields (`64500_64501`, `64500,64501`, `{64500}`) resolve
    /// to their first ASN. Blank lines and `#` comments are ignored.
    pub fn from_pfx2as<R: BufRead>(reader: R) -> Result<Self, PrefixTableError> {
        let mut table = PrefixTable::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let malformed = |reason: &str| PrefixTableError::Malformed {
                line: line_no,
                reason: reason.to_string(),
            };
            let mut fields = trimmed.split_whitespace();
            let (Some(addr), Some(len), Some(asn)) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(malformed("expected three fields"));
            };
            let addr: IpAddr = addr.parse().map_err(|_| malformed("bad address"))?;
            let len: u8 = len.parse().map_err(|_| malformed("bad prefix length"))?;
            let asn = asn
                .trim_matches(|c| c == '{' || c == '}')
                .split(|c| c == '_' || c == ',')
                .next()
                .and_then(|a| a.parse::<u32>().ok())
                .ok_or_else(|| malformed("bad asn"))?;
            let prefix = Prefix::new(addr, len).map_err(|e| malformed(&e.to_string()))?;
            table.insert(prefix, Asn(asn));
        }
        Ok(table)
    }

    pub fn write_pfx2as<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (prefix, asn) in &self.entries {
            writeln!(out, "{}\t{}\t{}", prefix.addr, prefix.len, asn.0)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ip(s: &str) -> IpAddr {
        s.parse().unwrap()
    }

    fn sample_table() -> PrefixTable {
        let mut t = PrefixTable::new();
        t.insert("10.0.0.0/8".parse().unwrap(), Asn(100));
        t.insert("10.1.0.0/16".parse().unwrap(), Asn(200));
        t
    }

    #[test]
    fn longest_match_wins() {
        let t = sample_table();
        assert_eq!(t.lookup(ip("10.1.2.3")), Some(Asn(200)));
        assert_eq!(t.lookup(ip("10.9.9.9")), Some(Asn(100)));
        assert_eq!(t.lookup(ip("192.0.2.1")), None);
        assert_eq!(t.lookup_or_unknown(ip("192.0.2.1")), Asn::UNKNOWN);
    }

    #[test]
    fn default_route_and_host_routes() {
        let mut t = PrefixTable::new();
        t.insert("0.0.0.0/0".parse().unwrap(), Asn(1));
        t.insert("192.0.2.7/32".parse().unwrap(), Asn(7));
        assert_eq!(t.lookup(ip("192.0.2.7")), Some(Asn(7)));
        assert_eq!(t.lookup(ip("192.0.2.8")), Some(Asn(1)));
        // families do not leak into each other
        assert_eq!(t.lookup(ip("2001:db8::1")), None);
    }

    #[test]
    fn ipv6_lookup() {
        let mut t = PrefixTable::new();
        t.insert("2001:db8::/32".parse().unwrap(), Asn(10));
        t.insert("2001:db8:1::/48".parse().unwrap(), Asn(11));
        assert_eq!(t.lookup(ip("2001:db8:1::5")), Some(Asn(11)));
        assert_eq!(t.lookup(ip("2001:db8:2::5")), Some(Asn(10)));
        assert_eq!(t.lookup(ip("2001:db9::1")), None);
    }

    #[test]
    fn duplicate_prefix_keeps_first() {
        let mut t = sample_table();
        assert!(!t.insert("10.0.0.0/8".parse().unwrap(), Asn(999)));
        assert_eq!(t.lookup(ip("10.200.0.1")), Some(Asn(100)));
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn prefix_parsing_clears_host_bits() {
        let p: Prefix = "10.1.2.3/16".parse().unwrap();
        assert_eq!(p.to_string(), "10.1.0.0/16");
        assert!(p.contains(ip("10.1.255.1")));
        assert!(!p.contains(ip("10.2.0.1")));
        assert!("10.0.0.0/33".parse::<Prefix>().is_err());
        assert!("nonsense".parse::<Prefix>().is_err());
        assert_eq!(
            Prefix::truncate(ip("2001:db8:aa:bb:1:2:3:4"), 64).to_string(),
            "2001:db8:aa:bb::/64"
        );
    }

    #[test]
    fn pfx2as_format() {
        let text = "# comment\n10.0.0.0\t8\t100\n10.1.0.0\t16\t200_300\n\n192.168.0.0\t16\t{65000,65001}\n";
        let t = PrefixTable::from_pfx2as(text.as_bytes()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.lookup(ip("10.1.0.1")), Some(Asn(200)));
        assert_eq!(t.lookup(ip("192.168.3.3")), Some(Asn(65000)));

        let mut out = Vec::new();
        t.write_pfx2as(&mut out).unwrap();
        let again = PrefixTable::from_pfx2as(out.as_slice()).unwrap();
        assert_eq!(again.entries(), t.entries());
    }

    #[test]
    fn pfx2as_reports_line_of_bad_entry() {
        let text = "10.0.0.0\t8\t100\n10.1.0.0\t16\n";
        match PrefixTable::from_pfx2as(text.as_bytes()) {
            Err(PrefixTableError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
