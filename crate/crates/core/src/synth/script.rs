//! Anomaly scripts: timed events injected into a synthetic topology.

use super::topology::{NodeKind, Topology};
use super::SynthError;

#[derive(Debug, Clone, PartialEq)]
pub enum AnomalyKind {
    /// Extra one-way delay on the link `near -> far`, plus a uniform
    /// per-packet jitter in `[0, jitter_ms)`.
    Congestion {
        near: usize,
        far: usize,
        added_ms: f64,
        jitter_ms: f64,
    },
    /// Every packet reaching `router` or beyond is dropped with this
    /// probability.
    Loss { router: usize, probability: f64 },
    /// Paths where `router` is followed by `old` go through `new` instead.
    Reroute { router: usize, old: usize, new: usize },
}

/// One event, active for bins `start_bin..=end_bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Anomaly {
    pub kind: AnomalyKind,
    pub start_bin: u32,
    pub end_bin: u32,
}

impl Anomaly {
    pub fn active(&self, bin: u32) -> bool {
        (self.start_bin..=self.end_bin).contains(&bin)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnomalyScript {
    pub events: Vec<Anomaly>,
}

impl AnomalyScript {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Parses a script against `topology`, rejecting references to
    /// unknown nodes or links.
    pub fn parse(text: &str, topology: &Topology) -> Result<Self, SynthError> {
        let mut events = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let toks: Vec<&str> = raw.split('#').next().unwrap_or("").split_whitespace().collect();
            let Some(&head) = toks.first() else { continue };
            let node = |k: usize| -> Result<usize, SynthError> {
                let name = toks.get(k).ok_or_else(|| SynthError::parse(line, "missing node"))?;
                topology
                    .node_index(name)
                    .ok_or_else(|| SynthError::parse(line, format!("unknown node '{name}'")))
            };
            let num = |k: usize, what: &str| -> Result<f64, SynthError> {
                let tok = toks.get(k).ok_or_else(|| SynthError::parse(line, format!("missing {what}")))?;
                tok.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| SynthError::parse(line, format!("invalid {what} '{tok}'")))
            };
            let bins = |k: usize| -> Result<(u32, u32), SynthError> {
                let parse = |j: usize| -> Result<u32, SynthError> {
                    let tok = toks.get(j).ok_or_else(|| SynthError::parse(line, "missing bin"))?;
                    tok.parse()
                        .map_err(|_| SynthError::parse(line, format!("invalid bin '{tok}'")))
                };
                let (s, e) = (parse(k)?, parse(k + 1)?);
                if s > e {
                    return Err(SynthError::parse(line, "start bin after end bin"));
                }
                if toks.len() > k + 2 {
                    return Err(SynthError::parse(line, "trailing tokens"));
                }
                Ok((s, e))
            };
            let (kind, (start_bin, end_bin)) = match head {
                "congestion" => {
                    let (near, far) = (node(1)?, node(2)?);
                    if !topology.adjacent(near, far) {
                        return Err(SynthError::parse(
                            line,
                            format!("{} -> {} is not on any path", toks[1], toks[2]),
                        ));
                    }
                    let added_ms = num(3, "added delay")?;
                    let jitter_ms = num(4, "jitter")?;
                    if jitter_ms < 0.0 {
                        return Err(SynthError::parse(line, "jitter must be non-negative"));
                    }
                    (
                        AnomalyKind::Congestion {
                            near,
                            far,
                            added_ms,
                            jitter_ms,
                        },
                        bins(5)?,
                    )
                }
                "loss" => {
                    let router = node(1)?;
                    let probability = num(2, "probability")?;
                    if !(0.0..=1.0).contains(&probability) {
                        return Err(SynthError::parse(line, "probability outside [0, 1]"));
                    }
                    (AnomalyKind::Loss { router, probability }, bins(3)?)
                }
                "reroute" => {
                    let (router, old, new) = (node(1)?, node(2)?, node(3)?);
                    if !topology.adjacent(router, old) {
                        return Err(SynthError::parse(
                            line,
                            format!("{} -> {} is not on any path", toks[1], toks[2]),
                        ));
                    }
                    if topology.nodes[new].kind != NodeKind::Router || new == router {
                        return Err(SynthError::parse(line, format!("'{}' cannot replace a hop", toks[3])));
                    }
                    (AnomalyKind::Reroute { router, old, new }, bins(4)?)
                }
                other => return Err(SynthError::parse(line, format!("unknown event '{other}'"))),
            };
            events.push(Anomaly {
                kind,
                start_bin,
                end_bin,
            });
        }
        Ok(AnomalyScript { events })
    }
}
