//! Binary checkpoint: `DTCA` magic, `u32` version, a length-prefixed
//! `key=value` text block, then named f32 tensors. All integers are
//! little-endian.

use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DTCA";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("checkpoint version {found} unsupported (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

/// Configuration entries and named tensors, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic {
                expected: *CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: version,
                supported: VERSION,
            });
        }
        let len = r.u64("config length")?;
        let text = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| CheckpointError::Malformed("config block is not UTF-8".into()))?;
        let mut config = Vec::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("config line `{line}` lacks `=`")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u64("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = r.u64("name length")?;
            let name = std::str::from_utf8(r.take(nlen, "name")?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u64("rank")?;
            if rank > 8 {
                return Err(CheckpointError::Malformed(format!("`{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u64("dims")).collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` is too large")))?;
            let raw = r.take(numel, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, tensors })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated { what })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{what} {v} overflows")))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> crate::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ck.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> crate::Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}
