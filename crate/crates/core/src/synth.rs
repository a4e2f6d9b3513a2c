//! Seeded synthetic corpora whose classes differ by frequency band.
//!
//! A window mixes a few band-limited latent sources into correlated
//! channels, adds Gaussian-enveloped bursts at the class band centre,
//! optional 50 Hz interference and white noise, then z-scores each channel.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::signal::{zscore, Modality, SignalError, SignalResult, WindowBatch};

/// Energy band of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub center: f64,
    pub width: f64,
    /// Expected bursts per second.
    pub burst_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub modality: Modality,
    pub bands: Vec<Band>,
    pub channels: usize,
    pub fs: f64,
    pub window: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Amplitude of 50 Hz interference (0 disables it).
    pub line_noise: f64,
    /// White-noise standard deviation relative to the unit-power sources.
    pub noise: f64,
    /// Latent sources mixed into the channels.
    pub sources: usize,
    /// Amplitude of a stimulus-locked tone shared by all classes, with a
    /// phase fixed per channel (0 disables it).
    pub locked: f64,
    pub locked_freq: f64,
}

const SINES_PER_SOURCE: usize = 12;

impl SynthSpec {
    /// Modality geometry with `classes` evenly spaced bands.
    pub fn preset(modality: Modality, classes: usize, per_class: usize, seed: u64) -> Self {
        let (channels, fs, window, lo, hi, width, locked, locked_freq) = match modality {
            Modality::Emg => (16, 2000.0, 1024, 60.0, 320.0, 40.0, 0.0, 30.0),
            Modality::Ecg => (12, 500.0, 1024, 6.0, 32.0, 4.0, 0.0, 1.2),
            Modality::Synth => (4, 250.0, 256, 12.0, 90.0, 8.0, 3.0, 24.0),
        };
        let bands = (0..classes)
            .map(|k| {
                let t = if classes > 1 { k as f64 / (classes - 1) as f64 } else { 0.5 };
                Band { center: lo + t * (hi - lo), width, burst_rate: 2.0 }
            })
            .collect();
        Self { modality, bands, channels, fs, window, per_class, seed, line_noise: 0.0, noise: 0.3, sources: 3, locked, locked_freq }
    }

    pub fn classes(&self) -> usize {
        self.bands.len()
    }

    pub fn validate(&self) -> SignalResult<()> {
        if self.bands.is_empty() || self.channels == 0 || self.window < 2 || self.sources == 0 {
            return Err(SignalError::Invalid("synthetic spec needs bands, channels, sources and a window of at least 2".into()));
        }
        let nyq = self.fs / 2.0;
        for b in &self.bands {
            if !(b.width > 0.0) || b.center - b.width / 2.0 <= 0.0 || b.center + b.width / 2.0 >= nyq || b.burst_rate < 0.0 {
                return Err(SignalError::Invalid(format!("band {b:?} does not fit below {nyq} Hz")));
            }
        }
        Ok(())
    }

    /// Windows ordered class-interleaved (`label = i mod classes`).
    pub fn generate(&self) -> SignalResult<(WindowBatch, Vec<usize>)> {
        let labels: Vec<usize> = (0..self.per_class * self.classes()).map(|i| i % self.classes()).collect();
        let w = self.generate_for(&labels)?;
        Ok((w, labels))
    }

    /// One window per given label.
    pub fn generate_for(&self, labels: &[usize]) -> SignalResult<WindowBatch> {
        self.validate()?;
        if let Some(&y) = labels.iter().find(|&&y| y >= self.classes()) {
            return Err(SignalError::Invalid(format!("label {y} without a band")));
        }
        let (c, t, s) = (self.channels, self.window, self.sources);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        // Fixed mixing of sources into channels, each channel dominated by one source.
        let mix: Vec<f64> = (0..c * s)
            .map(|i| if i % s == (i / s) % s { 1.0 } else { 0.4 * normal.sample(&mut rng) })
            .collect();
        let phases: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() * TAU).collect();
        let mut data = Vec::with_capacity(labels.len() * c * t);
        for (wi, &y) in labels.iter().enumerate() {
            let mut r = ChaCha8Rng::seed_from_u64(self.seed);
            r.set_stream(wi as u64 + 1);
            let band = self.bands[y];
            let src: Vec<Vec<f64>> = (0..s).map(|_| self.band_noise(&band, &mut r)).collect();
            let bursts = self.bursts(&band, &mut r);
            let phase50 = r.gen::<f64>() * TAU;
            let gain = self.locked * (0.8 + 0.4 * r.gen::<f64>());
            for ch in 0..c {
                for n in 0..t {
                    let mut v: f64 = (0..s).map(|j| mix[ch * s + j] * src[j][n]).sum();
                    v += bursts[n] * (1.0 + 0.2 * ch as f64 / c as f64);
                    if gain > 0.0 {
                        v += gain * (TAU * self.locked_freq * n as f64 / self.fs + phases[ch]).sin();
                    }
                    if self.line_noise > 0.0 {
                        v += self.line_noise * (TAU * 50.0 * n as f64 / self.fs + phase50).sin();
                    }
                    v += self.noise * normal.sample(&mut r);
                    data.push(v);
                }
            }
        }
        let step = self.window;
        zscore(&WindowBatch::new(self.modality, self.fs, c, t, step, data)?)
    }

    /// Unit-power sum of random sinusoids inside the band.
    fn band_noise(&self, b: &Band, r: &mut ChaCha8Rng) -> Vec<f64> {
        let comps: Vec<(f64, f64, f64)> = (0..SINES_PER_SOURCE)
            .map(|_| (b.center + (r.gen::<f64>() - 0.5) * b.width, r.gen::<f64>() * TAU, 0.5 + r.gen::<f64>()))
            .collect();
        let norm = (comps.iter().map(|c| c.2 * c.2 / 2.0).sum::<f64>()).sqrt();
        (0..self.window)
            .map(|n| {
                let tt = n as f64 / self.fs;
                comps.iter().map(|&(f, p, a)| a * (TAU * f * tt + p).sin()).sum::<f64>() / norm
            })
            .collect()
    }

    fn bursts(&self, b: &Band, r: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = vec![0.0; self.window];
        let dur = self.window as f64 / self.fs;
        let lambda = b.burst_rate * dur;
        let count = if lambda > 0.0 { Poisson::new(lambda).expect("positive rate").sample(r) as usize } else { 0 };
        let sigma = (4.0 / b.center).max(2.0 / self.fs);
        for _ in 0..count {
            let at = r.gen::<f64>() * dur;
            let amp = 1.5 + r.gen::<f64>();
            for (n, o) in out.iter_mut().enumerate() {
                let tt = n as f64 / self.fs - at;
                let env = (-(tt * tt) / (2.0 * sigma * sigma)).exp();
                if env > 1e-6 {
                    *o += amp * env * (TAU * b.center * tt).cos();
                }
            }
        }
        out
    }
}

/// Sidecar path holding the labels of a container.
pub fn labels_path(container: &Path) -> PathBuf {
    let mut p = container.as_os_str().to_owned();
    p.push(".labels");
    PathBuf::from(p)
}

/// One label per line after a `# classes = n` header.
pub fn write_labels(path: &Path, labels: &[usize], classes: usize) -> SignalResult<()> {
    let mut s = format!("# classes = {classes}\n");
    for y in labels {
        let _ = writeln!(s, "{y}");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> SignalResult<(Vec<usize>, usize)> {
    let text = fs::read_to_string(path)?;
    let mut classes = None;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                if k.trim() == "classes" {
                    classes = Some(v.trim().parse::<usize>().map_err(|e| SignalError::Parse(format!("classes: {e}")))?);
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        labels.push(line.parse::<usize>().map_err(|e| SignalError::Parse(format!("label line {}: {e}", i + 1)))?);
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    if labels.iter().any(|&y| y >= classes) {
        return Err(SignalError::Parse(format!("label outside {classes} classes")));
    }
    Ok((labels, classes))
}
