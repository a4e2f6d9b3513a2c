//! Binary checkpoints: config echo, step count and named f32 parameter blobs.
//!
//! Layout (little-endian): magic `WMCK`, u16 version, u32 config length,
//! config bytes (UTF-8), u64 step, u32 parameter count, then per parameter
//! u16 name length, name, u8 rank, u32 dims, f32 values.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::kernel::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type CheckpointResult<T> = Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of every parameter in `store`, rounded to f32.
    pub fn capture(store: &ParamStore, config: &str, step: u64) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.map(|v| v as f32 as f64)))
            .collect();
        Self { config: config.to_string(), step, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(t.ndim() as u8);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> CheckpointResult<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let n = r.u32()? as usize;
        let config = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| CheckpointError::Mismatch("config is not UTF-8".into()))?;
        let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| CheckpointError::Mismatch("name is not UTF-8".into()))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<CheckpointResult<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Mismatch(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, step, params })
    }

    pub fn save(&self, path: &Path) -> CheckpointResult<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> CheckpointResult<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Copies values into `store` by name. Every stored blob must match a
    /// parameter of the same shape; with `prefix`, only names starting with
    /// it are restored.
    pub fn restore(&self, store: &mut ParamStore, prefix: Option<&str>) -> CheckpointResult<usize> {
        let mut restored = 0;
        for (name, t) in &self.params {
            if prefix.is_some_and(|p| !name.starts_with(p)) {
                continue;
            }
            let id = store.id(name).ok_or_else(|| CheckpointError::Mismatch(format!("unknown parameter {name}")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(CheckpointError::Mismatch(format!("{name}: stored {:?}, model {:?}", t.shape(), p.value.shape())));
            }
            p.value = t.clone();
            restored += 1;
        }
        Ok(restored)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CheckpointResult<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.b.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> CheckpointResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> CheckpointResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
