//! Binary checkpoint format (little-endian):
//!
//! ```text
//! "LDN1"  u32 count
//! count × { u32 name_len, name (UTF-8), u32 ndim, ndim × u32 dim, f64 data (row-major) }
//! u64 step
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"LDN1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Named tensors in file order.
    pub tensors: Vec<(String, Matrix)>,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, step: u64) -> Self {
        Self {
            tensors: params.named_tensors(),
            step,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(decode(bytes)?.0)
    }

    /// Model parameters from this checkpoint; names and shapes must match `config`.
    pub fn to_params(&self, config: &ModelConfig) -> Result<ModelParams> {
        ModelParams::from_named_tensors(config, &self.tensors)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated file while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint and also returns the byte offset of every tensor name.
fn decode(bytes: &[u8]) -> Result<(Checkpoint, Vec<u64>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    let mut offsets = Vec::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_at = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: name_at,
                msg: format!("tensor {i} name is not UTF-8"),
            })?
            .to_string();
        let ndim_at = r.pos as u64;
        let ndim = r.u32("ndim")?;
        let (rows, cols) = match ndim {
            0 => (1, 1),
            1 => (r.u32("dim")? as usize, 1),
            2 => (r.u32("dim")? as usize, r.u32("dim")? as usize),
            n => {
                return Err(Error::Format {
                    offset: ndim_at,
                    msg: format!("tensor {name} has unsupported ndim {n}"),
                })
            }
        };
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format {
                offset: ndim_at,
                msg: format!("tensor {name} dims overflow"),
            })?;
        let raw = r.take(n, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        offsets.push(name_at);
    }
    let step = r.u64("step")?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok((Checkpoint { tensors, step }, offsets))
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint for a specific model. A tensor name the model does not
/// have is a format error at that name's offset; missing tensors and shape
/// mismatches are reported together as an input error.
pub fn load_model_checkpoint(path: impl AsRef<Path>, config: &ModelConfig) -> Result<(ModelParams, u64)> {
    let bytes = std::fs::read(path)?;
    let (ckpt, offsets) = decode(&bytes)?;
    let expected: std::collections::HashSet<String> = ModelParams::init(config)?
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    for ((name, _), offset) in ckpt.tensors.iter().zip(offsets) {
        if !expected.contains(name) {
            return Err(Error::Format {
                offset,
                msg: format!("unknown tensor name {name}"),
            });
        }
    }
    Ok((ckpt.to_params(config)?, ckpt.step))
}
