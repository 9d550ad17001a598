use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Parameters};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"ZNLG";
pub const VERSION: u32 = 1;

/// What produced a checkpoint, one record per completed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: String,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub lambda1: f32,
    pub lambda2: f32,
    pub tau: f32,
    pub mask_percent: f64,
    pub noise_std: f32,
    pub langs: Vec<String>,
    /// Mean loss of the last epoch; absent when no step ran.
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_pairs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub provenance: Vec<StageRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigRecord {
    model: ModelConfig,
    provenance: Vec<StageRecord>,
}

impl Checkpoint {
    /// Freshly initialized model with no training history.
    pub fn fresh(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Checkpoint {
            model: Model::init(config, seed)?,
            provenance: Vec::new(),
        })
    }

    pub fn has_stage(&self, stage: &str) -> bool {
        self.provenance.iter().any(|r| r.stage == stage)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for p in self.model.params.iter() {
            let name = p.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::invalid(format!("parameter name `{}` too long", p.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            let shape = p.tensor.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in p.tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let record = serde_json::to_vec(&ConfigRecord {
            model: self.model.config.clone(),
            provenance: self.provenance.clone(),
        })
        .map_err(|e| Error::invalid(format!("cannot encode config record: {e}")))?;
        out.extend_from_slice(&(record.len() as u32).to_le_bytes());
        out.extend_from_slice(&record);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.error(0, format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error(4, format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let at = r.pos;
            let name_len = r.u16(&format!("name length of tensor {i}"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| r.error(at + 2, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.take(1, "tensor rank")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("tensor dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4, &format!("payload of `{name}`"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| r.error(at, e.to_string()))?;
            tensors.push((name, tensor));
        }
        let record_at = r.pos;
        let len = r.u32("config record length")? as usize;
        let record: ConfigRecord = serde_json::from_slice(r.take(len, "config record")?)
            .map_err(|e| r.error(record_at, format!("bad config record: {e}")))?;
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        // The tensor list must match the architecture named by the config.
        let template = Model::init(record.model.clone(), 0).map_err(|e| r.error(record_at, e.to_string()))?;
        if template.params.len() != tensors.len() {
            return Err(r.error(
                8,
                format!(
                    "header declares {} tensors but the model needs {}",
                    tensors.len(),
                    template.params.len()
                ),
            ));
        }
        let mut params = Parameters::new();
        for ((name, t), want) in tensors.into_iter().zip(template.params.iter()) {
            if name != want.name || t.shape() != want.tensor.shape() {
                return Err(Error::Format {
                    position: 0,
                    message: format!(
                        "tensor `{name}` {:?} does not match expected `{}` {:?}",
                        t.shape(),
                        want.name,
                        want.tensor.shape()
                    ),
                });
            }
            params.insert(name, t)?;
        }
        Ok(Checkpoint {
            model: Model {
                config: record.model,
                params,
            },
            provenance: record.provenance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    c.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, position: usize, message: impl Into<String>) -> Error {
        Error::Format {
            position,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(
                self.pos,
                format!("truncated: {what} needs {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
