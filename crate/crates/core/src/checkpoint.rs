//! Versioned binary checkpoints.
//!
//! Layout: the magic `MUTATTCK`, a little-endian `u32` version, a `u64`
//! header length, a JSON header, then every parameter tensor followed by the
//! Adam first and second moments in header order as little-endian `f64`, and
//! finally the SHA-256 of all preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{ModelConfig, ModelParams};
use crate::tensor::{ParamSet, Tensor};
use crate::training::OptimizerState;

pub const MAGIC: &[u8; 8] = b"MUTATTCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Hex SHA-256 of a configuration's canonical text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Resolved run configuration as JSON text.
    pub run_config: String,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: u64,
    config_hash: String,
    run_config: String,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, optimizer: OptimizerState, run_config: String) -> Self {
        let config_hash = config_hash(&run_config);
        Self {
            params,
            optimizer,
            run_config,
            config_hash,
        }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let set = self.params.set();
        let header = Header {
            model: *self.params.config(),
            step: self.optimizer.step,
            config_hash: self.config_hash.clone(),
            run_config: self.run_config.clone(),
            tensors: set
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(24 + header.len() + 24 * set.num_values() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for s in [set, &self.optimizer.m, &self.optimizer.v] {
            for t in s.tensors() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Malformed("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum("checkpoint checksum mismatch".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Malformed("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[20..header_end])?;
        let mut values = body[header_end..].chunks_exact(8);
        if values.remainder().len() != 0 {
            return Err(Error::Malformed("payload is not a whole number of f64 values".into()));
        }
        let mut read_set = |what: &str| -> Result<ParamSet> {
            let mut set = ParamSet::new();
            for e in &header.tensors {
                let n: usize = e.shape.iter().product();
                let data: Vec<f64> = values
                    .by_ref()
                    .take(n)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                if data.len() != n {
                    return Err(Error::Malformed(format!("{what} payload ends inside {}", e.name)));
                }
                set.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            }
            Ok(set)
        };
        let params = ModelParams::from_set(header.model, read_set("parameter")?)?;
        let m = read_set("first moment")?;
        let v = read_set("second moment")?;
        if values.next().is_some() {
            return Err(Error::Malformed("trailing payload after optimizer state".into()));
        }
        Ok(Self {
            params,
            optimizer: OptimizerState {
                step: header.step,
                m,
                v,
            },
            run_config: header.run_config,
            config_hash: header.config_hash,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Whether the stored hash matches `expected`; logs a warning otherwise.
    pub fn check_config_hash(&self, expected: &str) -> bool {
        let same = self.config_hash == expected;
        if !same {
            log::warn!(
                "checkpoint config hash {} differs from the current configuration {}",
                self.config_hash,
                expected
            );
        }
        same
    }
}
