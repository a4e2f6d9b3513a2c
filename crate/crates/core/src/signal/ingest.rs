//! Raw recording ingestion.
//!
//! * CSV: first line `fs=<Hz>`, then one row per sample with one column per channel.
//! * Raw: little-endian f32 samples interleaved by frame (`T × C`), with a sidecar
//!   `<file>.meta` holding `fs=`, `channels=` and optionally `modality=` lines.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Modality, SignalError, SignalRecord, SignalResult};

pub fn read_csv_record(path: impl AsRef<Path>, modality: Modality) -> SignalResult<SignalRecord> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let head = lines.next().ok_or_else(|| SignalError::Parse("empty CSV".into()))?;
    let fs = head
        .trim()
        .strip_prefix("fs=")
        .and_then(|v| v.trim().parse::<f64>().ok())
        .ok_or_else(|| SignalError::Parse(format!("expected `fs=<Hz>` header, got {head:?}")))?;
    let mut chans: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let vals: Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| SignalError::Parse(format!("row {}: {e}", lineno + 2)))?;
        if chans.is_empty() {
            chans = vec![Vec::new(); vals.len()];
        }
        if vals.len() != chans.len() {
            return Err(SignalError::Parse(format!("row {} has {} columns, expected {}", lineno + 2, vals.len(), chans.len())));
        }
        for (c, v) in chans.iter_mut().zip(vals) {
            c.push(v);
        }
    }
    if chans.is_empty() || chans[0].is_empty() {
        return Err(SignalError::Parse("CSV has no samples".into()));
    }
    SignalRecord::from_channels(modality, fs, &chans)
}

pub fn write_csv_record(rec: &SignalRecord, path: impl AsRef<Path>) -> SignalResult<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "fs={}", rec.fs)?;
    for t in 0..rec.samples() {
        let row: Vec<String> = (0..rec.channels()).map(|c| rec.channel(c)[t].to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_raw_record(path: impl AsRef<Path>, default_modality: Modality) -> SignalResult<SignalRecord> {
    let path = path.as_ref();
    let meta_path = {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta");
        std::path::PathBuf::from(p)
    };
    let meta = fs::read_to_string(&meta_path)?;
    let (mut fs_hz, mut channels, mut modality) = (None, None, default_modality);
    for line in meta.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SignalError::Parse(format!("sidecar line {line:?} is not key=value")))?;
        match k.trim() {
            "fs" => fs_hz = v.trim().parse::<f64>().ok(),
            "channels" => channels = v.trim().parse::<usize>().ok(),
            "modality" => modality = v.trim().parse()?,
            other => return Err(SignalError::Parse(format!("unknown sidecar key {other:?}"))),
        }
    }
    let fs_hz = fs_hz.ok_or_else(|| SignalError::Parse("sidecar lacks fs".into()))?;
    let c = channels.ok_or_else(|| SignalError::Parse("sidecar lacks channels".into()))?;
    let bytes = fs::read(path)?;
    if bytes.len() % (4 * c.max(1)) != 0 {
        return Err(SignalError::Parse(format!("{} bytes is not a whole number of {c}-channel frames", bytes.len())));
    }
    let frames: Vec<f64> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    let t = frames.len() / c;
    let mut data = vec![0.0; frames.len()];
    for (i, v) in frames.into_iter().enumerate() {
        data[(i % c) * t + i / c] = v;
    }
    SignalRecord::new(modality, fs_hz, c, data)
}
