//! Recording preprocessing and the windowed-corpus container.

mod container;
mod filter;
mod ingest;
mod preprocess;

pub use container::{read_container, write_container, ContainerHeader, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use filter::{butterworth_highpass, butterworth_lowpass, notch_filter, sosfiltfilt, Biquad};
pub use ingest::{read_csv_record, read_raw_record, write_csv_record};
pub use preprocess::{
    bandpass, notch50, pad_channels, preprocess, resample, slide_windows, zscore, Preset,
};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("invalid band edges {lo}–{hi} Hz at fs={fs} Hz")]
    InvalidBand { lo: f64, hi: f64, fs: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    VersionMismatch(u16),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("malformed input: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type SignalResult<T> = Result<T, SignalError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Ecg,
    Emg,
    Synth,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Ecg => 0,
            Modality::Emg => 1,
            Modality::Synth => 2,
        }
    }

    pub fn from_code(code: u8) -> SignalResult<Self> {
        match code {
            0 => Ok(Modality::Ecg),
            1 => Ok(Modality::Emg),
            2 => Ok(Modality::Synth),
            c => Err(SignalError::Parse(format!("unknown modality code {c}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Ecg => "ecg",
            Modality::Emg => "emg",
            Modality::Synth => "synth",
        })
    }
}

impl FromStr for Modality {
    type Err = SignalError;

    fn from_str(s: &str) -> SignalResult<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ecg" => Ok(Modality::Ecg),
            "emg" => Ok(Modality::Emg),
            "synth" => Ok(Modality::Synth),
            other => Err(SignalError::Parse(format!("unknown modality {other:?}"))),
        }
    }
}

/// A raw multi-channel recording, stored channel-major (`C × T_raw`).
#[derive(Clone, Debug, PartialEq)]
pub struct SignalRecord {
    pub modality: Modality,
    pub fs: f64,
    channels: usize,
    samples: usize,
    data: Vec<f64>,
}

impl SignalRecord {
    pub fn new(modality: Modality, fs: f64, channels: usize, data: Vec<f64>) -> SignalResult<Self> {
        if !(fs > 0.0) || !fs.is_finite() {
            return Err(SignalError::Invalid(format!("sampling rate {fs} must be positive")));
        }
        if channels == 0 || data.is_empty() || !data.len().is_multiple_of(channels) {
            return Err(SignalError::Invalid(format!("{} values cannot form {channels} channels", data.len())));
        }
        let samples = data.len() / channels;
        Ok(Self { modality, fs, channels, samples, data })
    }

    pub fn from_channels(modality: Modality, fs: f64, chans: &[Vec<f64>]) -> SignalResult<Self> {
        let t = chans.first().map(Vec::len).unwrap_or(0);
        if chans.iter().any(|c| c.len() != t) {
            return Err(SignalError::Invalid("channels differ in length".into()));
        }
        Self::new(modality, fs, chans.len(), chans.concat())
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Fixed-shape windows `B × C × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    pub modality: Modality,
    pub fs: f64,
    pub channels: usize,
    pub window: usize,
    /// Hop between consecutive windows; equals `window` when unknown.
    pub step: usize,
    data: Vec<f64>,
}

impl WindowBatch {
    pub fn new(modality: Modality, fs: f64, channels: usize, window: usize, step: usize, data: Vec<f64>) -> SignalResult<Self> {
        if channels == 0 || window == 0 || !data.len().is_multiple_of(channels * window) {
            return Err(SignalError::Invalid(format!(
                "{} values cannot form windows of {channels}x{window}",
                data.len()
            )));
        }
        Ok(Self { modality, fs, channels, window, step, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / (self.channels * self.window)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Window `i` as a `C·T` channel-major slice.
    pub fn window_data(&self, i: usize) -> &[f64] {
        let n = self.channels * self.window;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn window_data_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.channels * self.window;
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Keeps only the listed windows, in the given order.
    pub fn select(&self, idx: &[usize]) -> WindowBatch {
        let mut data = Vec::with_capacity(idx.len() * self.channels * self.window);
        for &i in idx {
            data.extend_from_slice(self.window_data(i));
        }
        WindowBatch { data, ..self.clone_header() }
    }

    pub fn concat(&self, other: &WindowBatch) -> SignalResult<WindowBatch> {
        if other.channels != self.channels || other.window != self.window {
            return Err(SignalError::Invalid("window geometry differs".into()));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(WindowBatch { data, ..self.clone_header() })
    }

    fn clone_header(&self) -> WindowBatch {
        WindowBatch {
            modality: self.modality,
            fs: self.fs,
            channels: self.channels,
            window: self.window,
            step: self.step,
            data: Vec::new(),
        }
    }
}
