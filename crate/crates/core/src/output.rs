//! Newline-delimited JSON output.
//!
//! Every line of the alarm stream is an object with a `type` field:
//!
//! * `delay_alarm`: `near`, `far`, `bin`, `deviation`, `direction`,
//!   `degenerate`, `low_n`, `observed`, `reference`
//! * `forwarding_alarm`: `key` (`router`, `destination`), `bin`, `rho`,
//!   `responsibilities` (next hop to `r_i`, `"*"` for unresponsive)
//! * `components`: `bin` and the connected groups of alarmed links
//! * `event`: `asn`, `kind`, `start_bin`, `end_bin`, `peak_bin`,
//!   `peak_magnitude`, `characterization`, `components`
//!
//! The series stream holds one [`MagnitudeSample`] per AS and bin.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::aggregate::{Component, EventReport, MagnitudeSample};
use crate::delaydetect::DelayAlarm;
use crate::fwdetect::ForwardingAlarm;
use crate::ingest::TimeBin;
use crate::pipeline::BinOutput;

#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutputRecord<'a> {
    DelayAlarm(&'a DelayAlarm),
    ForwardingAlarm(&'a ForwardingAlarm),
    Components {
        bin: TimeBin,
        components: &'a [Component],
    },
    Event(&'a EventReport),
}

pub fn write_record<W: Write>(out: &mut W, record: &OutputRecord<'_>) -> io::Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")
}

/// Writes the alarms, components and closed events of one bin.
pub fn write_bin<W: Write>(out: &mut W, bin: &BinOutput) -> io::Result<()> {
    for a in &bin.delay_alarms {
        write_record(out, &OutputRecord::DelayAlarm(a))?;
    }
    for a in &bin.forwarding_alarms {
        write_record(out, &OutputRecord::ForwardingAlarm(a))?;
    }
    if !bin.components.is_empty() {
        write_record(
            out,
            &OutputRecord::Components {
                bin: bin.bin,
                components: &bin.components,
            },
        )?;
    }
    write_events(out, &bin.events)
}

pub fn write_events<W: Write>(out: &mut W, events: &[EventReport]) -> io::Result<()> {
    for e in events {
        write_record(out, &OutputRecord::Event(e))?;
    }
    Ok(())
}

pub fn write_series<W: Write>(out: &mut W, samples: &[MagnitudeSample]) -> io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum InputRecord {
    DelayAlarm(DelayAlarm),
    ForwardingAlarm(ForwardingAlarm),
    Components {},
    Event {},
}

/// Alarms read back from an alarm stream.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct AlarmStream {
    pub delay: Vec<DelayAlarm>,
    pub forwarding: Vec<ForwardingAlarm>,
    /// Lines that were not valid records.
    pub skipped: usize,
}

/// Reads the alarms of a stream written by [`write_bin`]. Component and
/// event lines are ignored; malformed lines are counted and skipped.
pub fn read_alarm_stream<R: BufRead>(reader: R) -> io::Result<AlarmStream> {
    let mut out = AlarmStream::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<InputRecord>(&line) {
            Ok(InputRecord::DelayAlarm(a)) => out.delay.push(a),
            Ok(InputRecord::ForwardingAlarm(a)) => out.forwarding.push(a),
            Ok(_) => {}
            Err(_) => out.skipped += 1,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::SeverityKind;
    use crate::delaydetect::{DelayChange, Direction, MedianEstimate, ReferenceSnapshot};
    use crate::diffrtt::LinkKey;
    use crate::fwdetect::{NextHop, PatternKey};
    use crate::ingest::Asn;
    use serde_json::Value;

    fn lines(buf: &[u8]) -> Vec<Value> {
        std::str::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn record_schema() {
        let bin = TimeBin { start: 3600, width: 3600 };
        let link = LinkKey::new("10.0.0.1".parse().unwrap(), "10.0.0.2".parse().unwrap());
        let est = MedianEstimate {
            median: 11.0,
            ci_low: 10.0,
            ci_high: 12.0,
            n_samples: 30,
            n_probes: 6,
            n_asns: 3,
        };
        let delay = DelayAlarm {
            link,
            bin,
            change: DelayChange {
                deviation: 4.0,
                direction: Direction::Increase,
                degenerate: false,
                low_n: false,
            },
            observed: est,
            reference: ReferenceSnapshot {
                median: 5.0,
                low: 4.0,
                high: 6.0,
                bins_observed: 10,
            },
        };
        let fw = ForwardingAlarm {
            key: PatternKey {
                router: "10.0.0.1".parse().unwrap(),
                destination: "10.9.9.9".parse().unwrap(),
            },
            bin,
            rho: -0.9,
            responsibilities: [(NextHop::Unresponsive, 0.45), (NextHop::Addr("10.0.0.2".parse().unwrap()), -0.45)]
                .into_iter()
                .collect(),
        };
        let event = EventReport {
            asn: Asn(64500),
            kind: SeverityKind::Delay,
            start_bin: 3600,
            end_bin: 3600,
            peak_bin: 3600,
            peak_magnitude: 12.5,
            characterization: vec![],
            components: vec![],
        };
        let comps = crate::aggregate::connected_alarms(&[link]);
        let out = BinOutput {
            bin,
            delay_alarms: vec![delay],
            forwarding_alarms: vec![fw],
            components: comps,
            magnitudes: vec![],
            events: vec![event],
            stats: Default::default(),
        };
        let mut buf = Vec::new();
        write_bin(&mut buf, &out).unwrap();
        let v = lines(&buf);
        assert_eq!(v.len(), 4);
        assert_eq!(v[0]["type"], "delay_alarm");
        assert_eq!(v[0]["near"], "10.0.0.1");
        assert_eq!(v[0]["direction"], "increase");
        assert_eq!(v[0]["deviation"], 4.0);
        assert_eq!(v[0]["bin"]["start"], 3600);
        assert_eq!(v[1]["type"], "forwarding_alarm");
        assert_eq!(v[1]["responsibilities"]["*"], 0.45);
        assert_eq!(v[2]["type"], "components");
        assert_eq!(v[2]["components"][0]["nodes"].as_array().unwrap().len(), 2);
        assert_eq!(v[3]["type"], "event");
        assert_eq!(v[3]["asn"], 64500);
        assert_eq!(v[3]["kind"], "delay");

        buf.extend_from_slice(b"garbage\n");
        let back = read_alarm_stream(&buf[..]).unwrap();
        assert_eq!(back.delay, out.delay_alarms);
        assert_eq!(back.forwarding, out.forwarding_alarms);
        assert_eq!(back.skipped, 1);
    }
}
