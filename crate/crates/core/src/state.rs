//! Checkpoints of everything the pipeline carries from one bin to the next.
//!
//! A checkpoint file is a header line followed by a JSON body:
//!
//! ```text
//! TRACELENS-CHECKPOINT v1 sha256=<hex digest of the body bytes>
//! {"version":1,"bin_width":3600,"epoch":0,"state":{...}}
//! ```
//!
//! Every map is written as a list of `[key, value]` pairs sorted by key, so
//! the same state always produces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aggregate::AsMonitor;
use crate::delaydetect::DelayReference;
use crate::diffrtt::LinkKey;
use crate::fwdetect::{ForwardingReference, PatternKey};
use crate::ingest::Asn;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MAGIC: &str = "TRACELENS-CHECKPOINT";

#[derive(Debug, Error)]
pub enum StateError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint integrity check failed: header says {expected}, body hashes to {actual}")]
    Integrity { expected: String, actual: String },
    #[error("checkpoint body: {0}")]
    Decode(#[from] serde_json::Error),
}

/// Serializes a map as a sorted list of pairs, which also works for
/// non-string keys.
pub(crate) mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K, V, S>(map: &BTreeMap<K, V>, s: S) -> Result<S::Ok, S::Error>
    where
        K: Serialize,
        V: Serialize,
        S: Serializer,
    {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

/// Per-key references and per-AS windows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    /// Start of the first bin ever processed.
    pub first_bin: Option<i64>,
    /// Start of the last completed bin.
    pub last_bin: Option<i64>,
    #[serde(with = "pairs")]
    pub delay_refs: BTreeMap<LinkKey, DelayReference>,
    #[serde(with = "pairs")]
    pub fw_refs: BTreeMap<PatternKey, ForwardingReference>,
    #[serde(with = "pairs")]
    pub monitors: BTreeMap<Asn, AsMonitor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub bin_width: i64,
    pub epoch: i64,
    pub state: PipelineState,
}

impl Checkpoint {
    pub fn new(bin_width: i64, epoch: i64, state: PipelineState) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            bin_width,
            epoch,
            state,
        }
    }

    /// The complete file contents.
    pub fn to_bytes(&self) -> Result<Vec<u8>, StateError> {
        let body = serde_json::to_vec(self)?;
        let digest = hex::encode(Sha256::digest(&body));
        let mut out = format!("{MAGIC} v{} sha256={digest}\n", self.version).into_bytes();
        out.extend_from_slice(&body);
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StateError> {
        let split = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| StateError::Format("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| StateError::Format("header is not UTF-8".into()))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(MAGIC) {
            return Err(StateError::Format(format!("expected header starting with {MAGIC}")));
        }
        let found = fields
            .next()
            .and_then(|v| v.strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| StateError::Format("missing version".into()))?;
        if found != CHECKPOINT_VERSION {
            return Err(StateError::VersionMismatch {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let expected = fields
            .next()
            .and_then(|v| v.strip_prefix("sha256="))
            .ok_or_else(|| StateError::Format("missing checksum".into()))?;
        let body = &bytes[split + 1..];
        let body = body.strip_suffix(b"\n").unwrap_or(body);
        let actual = hex::encode(Sha256::digest(body));
        if !actual.eq_ignore_ascii_case(expected) {
            return Err(StateError::Integrity {
                expected: expected.to_string(),
                actual,
            });
        }
        let checkpoint: Checkpoint = serde_json::from_slice(body)?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(StateError::VersionMismatch {
                found: checkpoint.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(checkpoint)
    }
}

/// Writes the checkpoint to a temporary file next to `path` and renames it
/// into place. On failure the previous file is left untouched.
pub fn save(checkpoint: &Checkpoint, path: &Path) -> Result<(), StateError> {
    let bytes = checkpoint.to_bytes()?;
    let io = |source| StateError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(&bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, StateError> {
    let bytes = fs::read(path).map_err(|source| StateError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
