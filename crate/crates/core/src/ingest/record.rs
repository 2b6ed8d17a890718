//! Traceroute records in the public Atlas result schema.
//!
//! One JSON document per line:
//!
//! ```text
//! {"prb_id": 1, "from": "10.0.0.9", "timestamp": 1430438400, "dst_addr": "192.0.2.1",
//!  "result": [{"hop": 1, "result": [{"from": "10.0.0.1", "rtt": 1.2}, {"x": "*"}]}]}
//! ```
//!
//! An optional `prb_asn` field carries probe AS metadata and takes precedence
//! over resolving `from` against the prefix table.

use std::borrow::Cow;
use std::io::BufRead;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::prefix::{Asn, PrefixTable};

#[derive(Debug, Clone, PartialEq)]
pub struct Hop {
    pub index: u32,
    /// `None` when no packet of this hop was answered.
    pub from_addr: Option<IpAddr>,
    /// RTT samples in milliseconds, finite and positive.
    pub rtts: Vec<f64>,
    /// Probe packets sent for this hop (answered or not).
    pub sent: u32,
}

impl Hop {
    pub fn unresponsive(index: u32, sent: u32) -> Self {
        Hop {
            index,
            from_addr: None,
            rtts: Vec::new(),
            sent,
        }
    }

    /// A hop is usable for delay analysis when it has an address and samples.
    pub fn is_responsive(&self) -> bool {
        self.from_addr.is_some() && !self.rtts.is_empty()
    }

    /// Packets sent to this position that produced no usable reply.
    pub fn lost(&self) -> u32 {
        self.sent.saturating_sub(self.rtts.len() as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracerouteRecord {
    pub probe_id: u64,
    pub probe_addr: Option<IpAddr>,
    pub probe_asn: Option<Asn>,
    /// Whether `probe_asn` came from the record itself rather than the table.
    pub asn_supplied: bool,
    pub timestamp: i64,
    pub dst_addr: IpAddr,
    /// Ordered by strictly increasing `index`.
    pub hops: Vec<Hop>,
}

impl TracerouteRecord {
    /// Fills `probe_asn` from the probe source address unless the record
    /// carried explicit metadata.
    pub fn resolve_probe_asn(&mut self, table: &PrefixTable) {
        if !self.asn_supplied {
            self.probe_asn = self.probe_addr.and_then(|a| table.lookup(a));
        }
    }

    /// Serializes back to the input schema.
    pub fn to_json(&self) -> serde_json::Value {
        let hops: Vec<_> = self
            .hops
            .iter()
            .map(|hop| {
                let mut replies: Vec<serde_json::Value> = Vec::with_capacity(hop.sent as usize);
                if let Some(from) = hop.from_addr {
                    replies.extend(hop.rtts.iter().map(|rtt| json!({"from": from, "rtt": rtt})));
                }
                replies.extend((0..hop.lost()).map(|_| json!({"x": "*"})));
                json!({"hop": hop.index, "result": replies})
            })
            .collect();
        let mut doc = json!({
            "prb_id": self.probe_id,
            "timestamp": self.timestamp,
            "dst_addr": self.dst_addr,
            "result": hops,
        });
        if let Some(addr) = self.probe_addr {
            doc["from"] = json!(addr);
        }
        if self.asn_supplied {
            if let Some(asn) = self.probe_asn {
                doc["prb_asn"] = json!(asn.0);
            }
        }
        doc
    }

    pub fn to_json_line(&self) -> String {
        self.to_json().to_string()
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input unreadable at line {line}: {source}")]
    Io {
        line: usize,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("invalid json: {0}")]
    Json(String),
    #[error("invalid destination address `{0}`")]
    Destination(String),
}

#[derive(Deserialize)]
struct RawRecord<'a> {
    prb_id: u64,
    #[serde(default, borrow)]
    from: Option<Cow<'a, str>>,
    #[serde(default)]
    prb_asn: Option<u32>,
    timestamp: i64,
    #[serde(borrow)]
    dst_addr: Cow<'a, str>,
    #[serde(default, borrow)]
    result: Vec<RawHop<'a>>,
}

#[derive(Deserialize)]
struct RawHop<'a> {
    hop: u32,
    #[serde(default, borrow)]
    result: Vec<RawReply<'a>>,
}

#[derive(Deserialize, Serialize)]
struct RawReply<'a> {
    #[serde(default, borrow)]
    from: Option<Cow<'a, str>>,
    #[serde(default)]
    rtt: Option<f64>,
}

/// Parses one input line.
///
/// Hop-level problems are repaired rather than rejected: negative or
/// non-finite RTTs are dropped, replies from an address other than the
/// hop's first responder are dropped, and duplicate hop indices keep their
/// first occurrence.
pub fn parse_record(line: &str) -> Result<TracerouteRecord, RecordError> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| RecordError::Json(e.to_string()))?;
    let dst_addr: IpAddr = raw
        .dst_addr
        .parse()
        .map_err(|_| RecordError::Destination(raw.dst_addr.to_string()))?;
    let probe_addr = raw.from.as_deref().and_then(|f| f.parse().ok());

    let mut hops: Vec<Hop> = Vec::with_capacity(raw.result.len());
    for raw_hop in raw.result {
        let mut from_addr: Option<IpAddr> = None;
        let mut rtts = Vec::with_capacity(raw_hop.result.len());
        for reply in &raw_hop.result {
            let (Some(from), Some(rtt)) = (reply.from.as_deref(), reply.rtt) else {
                continue;
            };
            let Ok(addr) = from.parse::<IpAddr>() else {
                continue;
            };
            if !(rtt.is_finite() && rtt > 0.0) {
                continue;
            }
            match from_addr {
                None => from_addr = Some(addr),
                Some(first) if first != addr => continue,
                Some(_) => {}
            }
            rtts.push(rtt);
        }
        hops.push(Hop {
            index: raw_hop.hop,
            from_addr,
            rtts,
            sent: raw_hop.result.len() as u32,
        });
    }
    // stable sort keeps the first occurrence of a duplicated index in front
    hops.sort_by_key(|h| h.index);
    hops.dedup_by_key(|h| h.index);

    Ok(TracerouteRecord {
        probe_id: raw.prb_id,
        probe_addr,
        probe_asn: raw.prb_asn.map(Asn),
        asn_supplied: raw.prb_asn.is_some(),
        timestamp: raw.timestamp,
        dst_addr,
        hops,
    })
}

/// Streaming reader over newline-delimited records.
///
/// Malformed lines are skipped and counted; an I/O failure ends iteration
/// with [`IngestError::Io`] carrying the line number.
pub struct RecordReader<R> {
    inner: R,
    buf: Vec<u8>,
    line: usize,
    skipped: usize,
    first_skipped: Option<usize>,
    done: bool,
}

impl<R: BufRead> RecordReader<R> {
    pub fn new(inner: R) -> Self {
        RecordReader {
            inner,
            buf: Vec::new(),
            line: 0,
            skipped: 0,
            first_skipped: None,
            done: false,
        }
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn first_skipped_line(&self) -> Option<usize> {
        self.first_skipped
    }

    pub fn lines_read(&self) -> usize {
        self.line
    }
}

impl<R: BufRead> Iterator for RecordReader<R> {
    type Item = Result<TracerouteRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            self.buf.clear();
            match self.inner.read_until(b'\n', &mut self.buf) {
                Ok(0) => self.done = true,
                Ok(_) => {
                    self.line += 1;
                    let Ok(text) = std::str::from_utf8(&self.buf) else {
                        self.skip("not utf-8");
                        continue;
                    };
                    let text = text.trim();
                    if text.is_empty() {
                        continue;
                    }
                    match parse_record(text) {
                        Ok(record) => return Some(Ok(record)),
                        Err(e) => self.skip(&e.to_string()),
                    }
                }
                Err(source) => {
                    self.done = true;
                    return Some(Err(IngestError::Io {
                        line: self.line + 1,
                        source,
                    }));
                }
            }
        }
        None
    }
}

impl<R> RecordReader<R> {
    fn skip(&mut self, why: &str) {
        self.skipped += 1;
        self.first_skipped.get_or_insert(self.line);
        log::debug!("skipping line {}: {}", self.line, why);
    }
}

/// Records read from a stream plus the number of lines skipped as malformed.
#[derive(Debug, Default)]
pub struct ParsedRecords {
    pub records: Vec<TracerouteRecord>,
    pub skipped: usize,
}

/// Reads every record from `reader`, resolving probe ASNs against `table`.
pub fn parse_records<R: BufRead>(
    reader: R,
    table: Option<&PrefixTable>,
) -> Result<ParsedRecords, IngestError> {
    let mut it = RecordReader::new(reader);
    let mut records = Vec::new();
    for record in &mut it {
        let mut record = record?;
        if let Some(table) = table {
            record.resolve_probe_asn(table);
        }
        records.push(record);
    }
    Ok(ParsedRecords {
        records,
        skipped: it.skipped(),
    })
}
