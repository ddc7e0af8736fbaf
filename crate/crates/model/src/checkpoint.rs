//! Checkpoint file: `"LKCK"`, u32 version, u32 header length, JSON header,
//! u32 tensor count, then per tensor a u32-length-prefixed name, u32 rows,
//! u32 cols and row-major f32 data. All integers and floats little-endian.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{ModelError, Result};
use crate::net::{Denoiser, NetConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LKCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub net: NetConfig,
    /// Training steps applied to the stored weights.
    #[serde(default)]
    pub steps: u64,
    /// Hash of the run configuration that produced the weights.
    #[serde(default)]
    pub config_hash: Option<String>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub net: Denoiser,
}

pub fn encode_checkpoint(net: &Denoiser, header: &CheckpointHeader) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + net.param_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for (_, name, value) in net.params().iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for v in value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ModelError::Checkpoint(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint. When `expected` is given, the stored network
/// configuration must match it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&NetConfig>) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Incompatible {
            field: "version",
            expected: CHECKPOINT_VERSION.to_string(),
            actual: version.to_string(),
        });
    }
    let len = r.u32("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    if let Some(exp) = expected {
        check_compatible(exp, &header.net)?;
    }
    let count = r.u32("tensor count")? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32("tensor rows")? as usize;
        let cols = r.u32("tensor cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| ModelError::Checkpoint(format!("tensor {name} is too large")))?;
        let data = r.take(n, "tensor data")?;
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Checkpoint(format!("tensor {name} holds non-finite values")));
        }
        store.add(name, Array2::from_shape_vec((rows, cols), values).unwrap());
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes after tensors".into()));
    }
    let net = Denoiser::from_params(header.net.clone(), store)?;
    Ok(Checkpoint { header, net })
}

fn check_compatible(expected: &NetConfig, actual: &NetConfig) -> Result<()> {
    macro_rules! field {
        ($name:ident) => {
            if expected.$name != actual.$name {
                return Err(ModelError::Incompatible {
                    field: stringify!($name),
                    expected: format!("{:?}", expected.$name),
                    actual: format!("{:?}", actual.$name),
                });
            }
        };
    }
    field!(dim);
    field!(frames);
    field!(mode);
    field!(latent);
    field!(layers);
    field!(heads);
    field!(ff);
    field!(warp_hidden);
    field!(mask_channel);
    field!(diffusion_steps);
    field!(schedule);
    Ok(())
}

pub fn save(net: &Denoiser, header: &CheckpointHeader, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net, header)).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path, expected: Option<&NetConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, expected)
}
