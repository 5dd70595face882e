//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! (encoder config, parameter names and shapes, RNG state, provenance), then
//! every parameter as little-endian `f64`s in header order, followed by the
//! Adam first and second moments when present.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, EncoderParams, Encoder};
use crate::error::{Error, Result};
use crate::numkit::{ParamStore, Tensor, RNG_ALGORITHM};

pub const MAGIC: &[u8; 8] = b"ONSETCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub corpus_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder_config: EncoderConfig,
    /// Encoder parameters plus any pretraining-head parameters.
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    pub rng_state: u64,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    encoder_config: EncoderConfig,
    rng_algorithm: String,
    rng_state: u64,
    provenance: Provenance,
    params: Vec<ParamHeader>,
    optimizer_step: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Hex SHA-256 digest, used for provenance hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn encoder_params(&self) -> Result<EncoderParams> {
        let encoder = Encoder::attach(&self.encoder_config, &self.params)?;
        Ok(EncoderParams {
            encoder,
            store: self.params.clone(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            encoder_config: self.encoder_config.clone(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            rng_state: self.rng_state,
            provenance: self.provenance.clone(),
            params: self
                .params
                .iter()
                .map(|(_, p)| ParamHeader {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(json.len() + 20 + 8 * self.params.num_scalars() * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |t: &Tensor| {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (_, p) in self.params.iter() {
            put(&p.value);
        }
        if let Some(o) = &self.optimizer {
            o.m.iter().chain(&o.v).for_each(&mut put);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| bad(format!("header: {e}")))?;
        if header.rng_algorithm != RNG_ALGORITHM {
            return Err(bad(format!("unknown RNG algorithm {}", header.rng_algorithm)));
        }
        let mut params = ParamStore::new();
        for p in &header.params {
            let t = r.tensor(&p.shape)?;
            if params.id(&p.name).is_some() {
                return Err(bad(format!("duplicate parameter {}", p.name)));
            }
            let id = params.add(&p.name, t);
            params.get_mut(id).trainable = p.trainable;
        }
        let optimizer = match header.optimizer_step {
            None => None,
            Some(step) => {
                let moments = |r: &mut Reader| -> Result<Vec<Tensor>> {
                    header.params.iter().map(|p| r.tensor(&p.shape)).collect()
                };
                let m = moments(&mut r)?;
                let v = moments(&mut r)?;
                Some(OptimizerState { step, m, v })
            }
        };
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            encoder_config: header.encoder_config,
            params,
            optimizer,
            rng_state: header.rng_state,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable dump for debugging; not read back.
    pub fn to_debug_json(&self) -> serde_json::Value {
        let params: serde_json::Map<String, serde_json::Value> = self
            .params
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    serde_json::json!({ "shape": p.value.shape(), "data": p.value.data() }),
                )
            })
            .collect();
        serde_json::json!({
            "format_version": FORMAT_VERSION,
            "encoder_config": self.encoder_config,
            "rng_state": self.rng_state,
            "provenance": self.provenance,
            "optimizer_step": self.optimizer.as_ref().map(|o| o.step),
            "params": params,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad shape".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
