//! `PWV1` windowed-corpus container.
//!
//! Layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `PWV1` |
//! | 2 | u16 version |
//! | 1 | u8 modality code |
//! | 4 | u32 channels `C` |
//! | 4 | u32 window length `T` |
//! | 4 | f32 sampling rate |
//! | 8 | u64 window count `B` |
//! | 1 | u8 dtype (0 = f32) |
//!
//! followed by `B·C·T` f32 values in `B, C, T` order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Modality, SignalError, SignalResult, WindowBatch};

pub const CONTAINER_MAGIC: &[u8; 4] = b"PWV1";
pub const CONTAINER_VERSION: u16 = 1;
const HEADER_LEN: usize = 28;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct ContainerHeader {
    pub version: u16,
    pub modality: Modality,
    pub channels: u32,
    pub window: u32,
    pub fs: f32,
    pub count: u64,
    pub dtype: u8,
}

impl ContainerHeader {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(CONTAINER_MAGIC);
        h[4..6].copy_from_slice(&self.version.to_le_bytes());
        h[6] = self.modality.code();
        h[7..11].copy_from_slice(&self.channels.to_le_bytes());
        h[11..15].copy_from_slice(&self.window.to_le_bytes());
        h[15..19].copy_from_slice(&self.fs.to_le_bytes());
        h[19..27].copy_from_slice(&self.count.to_le_bytes());
        h[27] = self.dtype;
        h
    }

    fn decode(h: &[u8]) -> SignalResult<Self> {
        if h.len() < HEADER_LEN {
            return Err(SignalError::Truncated { expected: HEADER_LEN as u64, found: h.len() as u64 });
        }
        if &h[0..4] != CONTAINER_MAGIC {
            return Err(SignalError::BadMagic);
        }
        let version = u16::from_le_bytes([h[4], h[5]]);
        if version != CONTAINER_VERSION {
            return Err(SignalError::VersionMismatch(version));
        }
        let dtype = h[27];
        if dtype != DTYPE_F32 {
            return Err(SignalError::Parse(format!("unsupported dtype code {dtype}")));
        }
        Ok(Self {
            version,
            modality: Modality::from_code(h[6])?,
            channels: u32::from_le_bytes(h[7..11].try_into().unwrap()),
            window: u32::from_le_bytes(h[11..15].try_into().unwrap()),
            fs: f32::from_le_bytes(h[15..19].try_into().unwrap()),
            count: u64::from_le_bytes(h[19..27].try_into().unwrap()),
            dtype,
        })
    }

    fn payload_bytes(&self) -> u64 {
        self.count * self.channels as u64 * self.window as u64 * 4
    }
}

pub fn write_container(win: &WindowBatch, path: impl AsRef<Path>) -> SignalResult<ContainerHeader> {
    let header = ContainerHeader {
        version: CONTAINER_VERSION,
        modality: win.modality,
        channels: win.channels as u32,
        window: win.window as u32,
        fs: win.fs as f32,
        count: win.len() as u64,
        dtype: DTYPE_F32,
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header.encode())?;
    for &v in win.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(header)
}

pub fn read_container(path: impl AsRef<Path>) -> SignalResult<(ContainerHeader, WindowBatch)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let header = ContainerHeader::decode(&bytes)?;
    let expected = header.payload_bytes();
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found != expected {
        return Err(SignalError::Truncated { expected, found });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let (c, t) = (header.channels as usize, header.window as usize);
    let win = WindowBatch::new(header.modality, header.fs as f64, c, t, t, data)?;
    Ok((header, win))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_28_bytes_with_magic_first() {
        let h = ContainerHeader { version: 1, modality: Modality::Emg, channels: 16, window: 1024, fs: 2000.0, count: 3, dtype: 0 };
        let e = h.encode();
        assert_eq!(&e[..4], b"PWV1");
        assert_eq!(ContainerHeader::decode(&e).unwrap(), h);
        assert_eq!(h.payload_bytes(), 3 * 16 * 1024 * 4);
    }
}
