//! Versioned binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "MCMIXCK\0"
//! version      u32       1
//! field count  u32       10, then 10 x u32 model config fields in order:
//!                        num_superblocks, blocks_per_superblock, kernel_width,
//!                        window, hop, bottleneck_dim, conv_channels, tac_dim,
//!                        num_outputs, encoder_bases
//! tac bypass   u8        0 or 1
//! sections     u32 count, then per section:
//!   tag        4 bytes   "PARM" | "ADAM" | "STAT"
//!   length     u64       body length in bytes
//!   body
//!
//! tensor list: u32 count, then per tensor:
//!   u32 name length, UTF-8 name, u32 rank, rank x u64 dims, f64 values
//!
//! PARM body: tensor list
//! ADAM body: u64 step, tensor list (first moments), tensor list (second moments)
//! STAT body: u32 count, then per entry: u32 name length, UTF-8 name, u64 value
//! ```
//!
//! Only the PARM section is required. Unknown section tags are rejected.

use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::model::{ModelConfig, ModelError, ModelParams};

pub const MAGIC: &[u8; 8] = b"MCMIXCK\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Adam moments stored alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSection {
    pub step: u64,
    pub first_moment: Vec<(String, Tensor)>,
    pub second_moment: Vec<(String, Tensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tac_bypassed: bool,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerSection>,
    /// Free-form integer state (training step, RNG positions, ...).
    pub state: Vec<(String, u64)>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams) -> Self {
        Self {
            config: *params.config(),
            tac_bypassed: params.tac_bypassed(),
            params: params.named().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            optimizer: None,
            state: Vec::new(),
        }
    }

    pub fn to_params(&self) -> Result<ModelParams, CheckpointError> {
        let mut p = ModelParams::from_named(self.config, self.params.clone())?;
        p.set_tac_bypassed(self.tac_bypassed);
        Ok(p)
    }

    pub fn state_value(&self, key: &str) -> Option<u64> {
        self.state.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let fields = self.config.to_fields();
        out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
        for f in fields {
            out.extend_from_slice(&(f as u32).to_le_bytes());
        }
        out.push(u8::from(self.tac_bypassed));

        let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();
        let mut body = Vec::new();
        write_tensors(&mut body, &self.params);
        sections.push((*b"PARM", body));
        if let Some(opt) = &self.optimizer {
            let mut body = Vec::new();
            body.extend_from_slice(&opt.step.to_le_bytes());
            write_tensors(&mut body, &opt.first_moment);
            write_tensors(&mut body, &opt.second_moment);
            sections.push((*b"ADAM", body));
        }
        if !self.state.is_empty() {
            let mut body = Vec::new();
            body.extend_from_slice(&(self.state.len() as u32).to_le_bytes());
            for (k, v) in &self.state {
                write_name(&mut body, k);
                body.extend_from_slice(&v.to_le_bytes());
            }
            sections.push((*b"STAT", body));
        }
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (tag, body) in sections {
            out.extend_from_slice(&tag);
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        if count != 10 {
            return Err(CheckpointError::Malformed(format!("expected 10 config fields, found {count}")));
        }
        let mut fields = [0usize; 10];
        for f in &mut fields {
            *f = r.u32()? as usize;
        }
        let config = ModelConfig::from_fields(fields);
        let tac_bypassed = match r.take(1)?[0] {
            0 => false,
            1 => true,
            v => return Err(CheckpointError::Malformed(format!("tac flag {v}"))),
        };
        let mut params = None;
        let mut optimizer = None;
        let mut state = Vec::new();
        for _ in 0..r.u32()? {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
            let len = r.u64()? as usize;
            let mut body = Reader {
                bytes: r.take(len)?,
                pos: 0,
            };
            match &tag {
                b"PARM" => params = Some(body.tensors()?),
                b"ADAM" => {
                    let step = body.u64()?;
                    let first_moment = body.tensors()?;
                    let second_moment = body.tensors()?;
                    optimizer = Some(OptimizerSection {
                        step,
                        first_moment,
                        second_moment,
                    });
                }
                b"STAT" => {
                    for _ in 0..body.u32()? {
                        let k = body.name()?;
                        state.push((k, body.u64()?));
                    }
                }
                other => {
                    return Err(CheckpointError::Malformed(format!(
                        "unknown section {:?}",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
            if body.pos != body.bytes.len() {
                return Err(CheckpointError::Malformed("trailing bytes in section".into()));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes after sections".into()));
        }
        Ok(Self {
            config,
            tac_bypassed,
            params: params.ok_or_else(|| CheckpointError::Malformed("missing PARM section".into()))?,
            optimizer,
            state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes just the model (no optimizer state).
pub fn save_model(path: impl AsRef<Path>, params: &ModelParams) -> Result<(), CheckpointError> {
    Checkpoint::from_params(params).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams, CheckpointError> {
    Checkpoint::load(path)?.to_params()
}

fn write_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn write_tensors(out: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        write_name(out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>, CheckpointError> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = self.name()?;
            let rank = self.u32()? as usize;
            if rank > 2 {
                return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            out.push((name, t));
        }
        Ok(out)
    }
}
