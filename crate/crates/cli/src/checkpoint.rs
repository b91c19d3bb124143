//! Checkpoint file: the magic `BRH1`, a little-endian `u32` format version,
//! then sections of `[tag: 4 bytes][len: u64 LE][payload]`:
//!
//! - `CONF` the materialized config as JSON
//! - `HASH` SHA-256 of the config identity (see [`ExperimentConfig::hash`])
//! - `ITER` completed iterations, `u64` LE
//! - `STAT` networks, optimizer moments and priors as MessagePack
//! - `SUMS` SHA-256 of every preceding byte; always last

use std::path::Path;

use brhier_core::shs::ShsState;
use brhier_core::supervised::SupervisedModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const MAGIC: &[u8; 4] = b"BRH1";
pub const FORMAT_VERSION: u32 = 1;

// held once per process, so the size gap between variants does not matter
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrainedState {
    Shs(ShsState),
    Supervised(SupervisedModel),
}

impl TrainedState {
    pub fn iteration(&self) -> u64 {
        match self {
            TrainedState::Shs(s) => s.iteration,
            TrainedState::Supervised(m) => m.epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: TrainedState,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(format!("corrupt checkpoint: {}", msg.into()))
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        section(&mut out, b"CONF", &serde_json::to_vec(&self.config).expect("config serializes"));
        section(&mut out, b"HASH", &self.config.hash());
        section(&mut out, b"ITER", &self.state.iteration().to_le_bytes());
        section(&mut out, b"STAT", &rmp_serde::to_vec_named(&self.state).expect("state serializes"));
        let sum: [u8; 32] = Sha256::digest(&out).into();
        section(&mut out, b"SUMS", &sum);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CliError> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(bad("missing BRH1 header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CliError::Checkpoint(format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})")));
        }
        let mut pos = 8;
        let (mut conf, mut hash, mut iter, mut stat) = (None, None, None, None);
        loop {
            if bytes.len() < pos + 12 {
                return Err(bad("truncated section header"));
            }
            let tag: [u8; 4] = bytes[pos..pos + 4].try_into().expect("4 bytes");
            let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().expect("8 bytes"));
            let start = pos + 12;
            let end = usize::try_from(len).ok().and_then(|l| start.checked_add(l)).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("section overruns file"))?;
            let payload = &bytes[start..end];
            match &tag {
                b"SUMS" => {
                    let want: [u8; 32] = Sha256::digest(&bytes[..pos]).into();
                    if payload != want {
                        return Err(bad("checksum mismatch"));
                    }
                    if end != bytes.len() {
                        return Err(bad("trailing bytes after checksum"));
                    }
                    break;
                }
                b"CONF" => conf = Some(payload),
                b"HASH" => hash = Some(payload),
                b"ITER" => iter = Some(payload),
                b"STAT" => stat = Some(payload),
                other => return Err(bad(format!("unknown section {:?}", String::from_utf8_lossy(other)))),
            }
            pos = end;
        }
        let missing = |name: &str| bad(format!("missing {name} section"));
        let config: ExperimentConfig = serde_json::from_slice(conf.ok_or_else(|| missing("CONF"))?).map_err(|e| bad(format!("config: {e}")))?;
        if hash.ok_or_else(|| missing("HASH"))? != config.hash() {
            return Err(bad("stored config hash does not match stored config"));
        }
        let state: TrainedState = rmp_serde::from_slice(stat.ok_or_else(|| missing("STAT"))?).map_err(|e| bad(format!("state: {e}")))?;
        let iter = iter.ok_or_else(|| missing("ITER"))?;
        if iter.len() != 8 || u64::from_le_bytes(iter.try_into().expect("8 bytes")) != state.iteration() {
            return Err(bad("iteration counter disagrees with state"));
        }
        Ok(Self { config, state })
    }

    /// Writes via a temporary file so a crash never leaves a half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(CliError::io(format!("writing {}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(CliError::io(format!("writing {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(CliError::io(format!("reading {}", path.display())))?;
        Self::decode(&bytes)
    }
}
