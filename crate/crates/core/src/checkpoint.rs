//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic  b"DDECKPT\0"
//! u32    format version
//! u32    header length N
//! N      JSON header (architecture, counts, step)
//! f64 x  predictor parameters
//! f64 x  4 * T calibration coefficients, then u64 x T update counts   (optional)
//! f64 x  2 * P optimizer moments                                      (optional)
//! ```
//!
//! Floats are stored as raw bits so a save/load cycle is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dde_core::{CalibrationTable, Role};
use crate::error::{DdeError, Result};
use crate::optim::AdamState;
use crate::predictor::{Architecture, NoisePredictor};

const MAGIC: &[u8; 8] = b"DDECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    n_params: usize,
    step: u64,
    table_len: Option<usize>,
    ema_decay: Option<f64>,
    optimizer_step: Option<u64>,
}

/// A predictor plus, optionally, the training state needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub predictor: NoisePredictor,
    pub table: Option<CalibrationTable>,
    pub optimizer: Option<AdamState>,
    pub step: u64,
}

impl Checkpoint {
    pub fn model_only(predictor: NoisePredictor) -> Self {
        Checkpoint { predictor, table: None, optimizer: None, step: 0 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            architecture: *self.predictor.architecture(),
            n_params: self.predictor.num_params(),
            step: self.step,
            table_len: self.table.as_ref().map(CalibrationTable::len),
            ema_decay: self.table.as_ref().map(|t| t.ema_decay),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.predictor.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        };
        put(self.predictor.params());
        if let Some(t) = &self.table {
            for role in Role::ALL {
                put(t.array(role));
            }
        }
        if let Some(o) = &self.optimizer {
            put(&o.m);
            put(&o.v);
        }
        if let Some(t) = &self.table {
            for c in &t.update_counts {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| DdeError::format(origin, reason.to_string());
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated"))? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let hbytes = r.take(hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(hbytes).map_err(|e| bad(&format!("header: {e}")))?;
        let params = r.f64s(header.n_params).ok_or_else(|| bad("truncated parameters"))?;
        let predictor = NoisePredictor::from_params(header.architecture, params)
            .map_err(|e| bad(&format!("parameters: {e}")))?;
        let mut table = match (header.table_len, header.ema_decay) {
            (Some(n), Some(mu)) => {
                let mut t = CalibrationTable::new(n, mu).map_err(|e| bad(&e.to_string()))?;
                for role in Role::ALL {
                    let vals = r.f64s(n).ok_or_else(|| bad("truncated calibration table"))?;
                    t.array_mut(role).copy_from_slice(&vals);
                }
                Some(t)
            }
            (None, None) => None,
            _ => return Err(bad("inconsistent calibration header")),
        };
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let m = r.f64s(header.n_params).ok_or_else(|| bad("truncated optimizer state"))?;
                let v = r.f64s(header.n_params).ok_or_else(|| bad("truncated optimizer state"))?;
                Some(AdamState { m, v, step })
            }
            None => None,
        };
        if let Some(t) = &mut table {
            for c in t.update_counts.iter_mut() {
                *c = r.u64().ok_or_else(|| bad("truncated update counts"))?;
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint { predictor, table, optimizer, step: header.step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| DdeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DdeError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| DdeError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(n.checked_mul(8)?)?;
        Some(
            raw.chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        )
    }
}
