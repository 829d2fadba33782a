//! Self-describing binary checkpoints.
//!
//! Layout: `DISPCKPT`, format version (u32 LE), manifest length (u64 LE),
//! compact JSON manifest, then every tensor as little-endian f64 in manifest
//! order. Saving a loaded checkpoint reproduces the file byte for byte.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Config;
use crate::error::{Error, Result};
use crate::init_buffer::InitBuffer;
use crate::ndiff::{Params, Tensor};
use crate::trainer::{EpochMetrics, Frontend, Model, Trainer};

pub const MAGIC: &[u8; 8] = b"DISPCKPT";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const BUFFER: &str = "buffer.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: Config,
    pub frontend: Frontend,
    pub phase: u8,
    pub epoch: usize,
    pub adam_step: u64,
    pub metrics: Vec<EpochMetrics>,
    /// SHA-256 of the model weights, for quick identity checks.
    pub fingerprint: String,
    pub tensors: Vec<TensorEntry>,
}

/// In-memory checkpoint: manifest plus every stored tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Params,
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Checkpoint {
        let mut tensors = t.model.params.clone();
        for (k, v) in t.adam.first.iter() {
            tensors.insert(format!("{ADAM_M}{k}"), v.clone());
        }
        for (k, v) in t.adam.second.iter() {
            tensors.insert(format!("{ADAM_V}{k}"), v.clone());
        }
        for (k, v) in t.model.buffer.to_params(BUFFER).iter() {
            tensors.insert(k.clone(), v.clone());
        }
        let mut offset = 0;
        let entries = tensors
            .iter()
            .map(|(name, v)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: v.shape().to_vec(),
                    offset,
                };
                offset += v.len();
                e
            })
            .collect();
        Checkpoint {
            manifest: Manifest {
                config: t.model.config.clone(),
                frontend: t.model.frontend,
                phase: t.phase,
                epoch: t.epoch,
                adam_step: t.adam.step,
                metrics: t.metrics.clone(),
                fingerprint: t.model.params.fingerprint(),
                tensors: entries,
            },
            tensors,
        }
    }

    /// Rebuilds the full training state.
    pub fn into_trainer(self) -> Result<Trainer> {
        let m = self.manifest;
        m.config.validate()?;
        let mut params = Params::new();
        let mut first = Params::new();
        let mut second = Params::new();
        let mut buf = Params::new();
        for (k, v) in self.tensors.iter() {
            if let Some(n) = k.strip_prefix(ADAM_M) {
                first.insert(n, v.clone());
            } else if let Some(n) = k.strip_prefix(ADAM_V) {
                second.insert(n, v.clone());
            } else if k.starts_with(BUFFER) {
                buf.insert(k.clone(), v.clone());
            } else {
                params.insert(k.clone(), v.clone());
            }
        }
        let tc = &m.config.trainer;
        let mut buffer = InitBuffer::new(
            m.config.pipeline.flat_specs(),
            tc.buffer_capacity,
            tc.ema_decay,
        )?;
        buffer.load_params(&buf, BUFFER)?;
        let epochs = if m.phase == 2 {
            tc.epochs_phase2
        } else {
            tc.epochs_phase1
        };
        let mut adam = Trainer::make_adam(&m.config, epochs);
        adam.step = m.adam_step;
        adam.first = first;
        adam.second = second;
        if params.fingerprint() != m.fingerprint {
            return Err(Error::Config(
                "checkpoint weights do not match their fingerprint".into(),
            ));
        }
        Ok(Trainer {
            model: Model {
                config: m.config,
                params,
                buffer,
                frontend: m.frontend,
            },
            adam,
            phase: m.phase,
            epoch: m.epoch,
            metrics: m.metrics,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let n: usize = self.tensors.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(20 + manifest.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for e in &self.manifest.tensors {
            let t = self
                .tensors
                .get(&e.name)
                .expect("manifest lists stored tensors");
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(fmt_err(0, "not a checkpoint (bad magic)"));
        }
        if bytes.len() < 20 {
            return Err(fmt_err(bytes.len(), "truncated header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(fmt_err(8, format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let body = 20usize
            .checked_add(usize::try_from(mlen).map_err(|_| fmt_err(12, "manifest too large"))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt_err(12, format!("manifest length {mlen} exceeds file")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..body])
            .map_err(|e| fmt_err(20, format!("manifest: {e}")))?;
        let payload = &bytes[body..];
        let mut tensors = Params::new();
        let mut expect = 0usize;
        for e in &manifest.tensors {
            if e.offset != expect {
                return Err(fmt_err(
                    20,
                    format!(
                        "tensor `{}` has offset {}, expected {expect}",
                        e.name, e.offset
                    ),
                ));
            }
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fmt_err(20, format!("tensor `{}` shape overflows", e.name)))?;
            let start = 8 * e.offset;
            let end = n.checked_mul(8).and_then(|b| b.checked_add(start));
            let Some(end) = end.filter(|&end| end <= payload.len()) else {
                return Err(fmt_err(
                    body + payload.len(),
                    format!("payload truncated in `{}`", e.name),
                ));
            };
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            if tensors.contains(&e.name) {
                return Err(fmt_err(20, format!("duplicate tensor `{}`", e.name)));
            }
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            expect += n;
        }
        if 8 * expect != payload.len() {
            return Err(fmt_err(body + 8 * expect, "trailing bytes after payload"));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes one JSON object per epoch.
pub fn write_metrics_jsonl(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
