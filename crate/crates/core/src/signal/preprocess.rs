use super::filter::{butterworth_highpass, butterworth_lowpass, notch_filter, sosfiltfilt, Biquad};
use super::{Modality, SignalError, SignalRecord, SignalResult, WindowBatch};

const FILTER_ORDER: usize = 4;
const NOTCH_HZ: f64 = 50.0;
const NOTCH_Q: f64 = 30.0;
const ZSCORE_EPS: f64 = 1e-8;

fn map_channels(rec: &SignalRecord, sos: &[Biquad]) -> SignalRecord {
    let mut out = rec.clone();
    for c in 0..rec.channels() {
        let y = sosfiltfilt(sos, rec.channel(c));
        out.channel_mut(c).copy_from_slice(&y);
    }
    out
}

/// Zero-phase Butterworth band-pass: order-4 high-pass at `lo` cascaded with
/// an order-4 low-pass at `hi`, applied forward and backward per channel.
pub fn bandpass(rec: &SignalRecord, lo: f64, hi: f64) -> SignalResult<SignalRecord> {
    if !(lo > 0.0 && lo < hi && hi < rec.fs / 2.0) {
        return Err(SignalError::InvalidBand { lo, hi, fs: rec.fs });
    }
    let mut sos = butterworth_highpass(FILTER_ORDER, lo, rec.fs)?;
    sos.extend(butterworth_lowpass(FILTER_ORDER, hi, rec.fs)?);
    Ok(map_channels(rec, &sos))
}

/// Zero-phase 50 Hz notch, Q = 30.
pub fn notch50(rec: &SignalRecord) -> SignalResult<SignalRecord> {
    if rec.fs <= 2.0 * NOTCH_HZ {
        return Err(SignalError::Invalid(format!("notch needs fs > 100 Hz, got {}", rec.fs)));
    }
    let sos = [notch_filter(NOTCH_HZ, NOTCH_Q, rec.fs)?];
    Ok(map_channels(rec, &sos))
}

/// Linear-interpolation upsampling to `fs_target`.
pub fn resample(rec: &SignalRecord, fs_target: f64) -> SignalResult<SignalRecord> {
    if fs_target < rec.fs {
        return Err(SignalError::Invalid(format!("downsampling {} -> {fs_target} Hz is not supported", rec.fs)));
    }
    let t = rec.samples();
    let t_new = ((t as f64) * fs_target / rec.fs).round() as usize;
    let ratio = rec.fs / fs_target;
    let mut data = Vec::with_capacity(rec.channels() * t_new);
    for c in 0..rec.channels() {
        let x = rec.channel(c);
        for i in 0..t_new {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(t - 1);
            let i1 = (i0 + 1).min(t - 1);
            let frac = pos - i0 as f64;
            data.push(x[i0] + (x[i1] - x[i0]) * frac.min(1.0));
        }
    }
    SignalRecord::new(rec.modality, fs_target, rec.channels(), data)
}

/// Appends all-zero channels up to `target` channels.
pub fn pad_channels(rec: &SignalRecord, target: usize) -> SignalResult<SignalRecord> {
    if rec.channels() > target {
        return Err(SignalError::Invalid(format!("{} channels exceed target {target}", rec.channels())));
    }
    let mut data = rec.data().to_vec();
    data.resize(target * rec.samples(), 0.0);
    SignalRecord::new(rec.modality, rec.fs, target, data)
}

/// Cuts `⌊(T_raw − T)/step⌋ + 1` windows; a recording shorter than one
/// window yields a single zero-padded window.
pub fn slide_windows(rec: &SignalRecord, window: usize, step: usize) -> SignalResult<WindowBatch> {
    if window == 0 || step == 0 {
        return Err(SignalError::Invalid(format!("window {window} and step {step} must be positive")));
    }
    let (c, t) = (rec.channels(), rec.samples());
    let starts: Vec<usize> = if t >= window { (0..=(t - window) / step).map(|i| i * step).collect() } else { vec![0] };
    let mut data = Vec::with_capacity(starts.len() * c * window);
    for &s in &starts {
        for ch in 0..c {
            let x = rec.channel(ch);
            let end = (s + window).min(t);
            data.extend_from_slice(&x[s..end]);
            data.extend(std::iter::repeat_n(0.0, window - (end - s)));
        }
    }
    WindowBatch::new(rec.modality, rec.fs, c, window, step, data)
}

/// Per-window, per-channel standardisation; near-constant channels become zero.
pub fn zscore(win: &WindowBatch) -> SignalResult<WindowBatch> {
    if win.window < 2 {
        return Err(SignalError::Invalid("z-score needs at least two samples".into()));
    }
    let mut out = win.clone();
    let t = win.window;
    for i in 0..win.len() {
        for ch in out.window_data_mut(i).chunks_mut(t) {
            let mean = ch.iter().sum::<f64>() / t as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
            let std = var.sqrt();
            if std < ZSCORE_EPS {
                ch.iter_mut().for_each(|v| *v = 0.0);
            } else {
                ch.iter_mut().for_each(|v| *v = (*v - mean) / std);
            }
        }
    }
    Ok(out)
}

/// Modality-specific preprocessing pipeline parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub modality: Modality,
    pub band: (f64, f64),
    pub notch: bool,
    pub fs: f64,
    pub channels: usize,
    pub window: usize,
    pub step: usize,
}

impl Preset {
    pub fn ecg() -> Self {
        Self { modality: Modality::Ecg, band: (0.5, 40.0), notch: true, fs: 500.0, channels: 12, window: 1024, step: 512 }
    }

    pub fn emg() -> Self {
        Self { modality: Modality::Emg, band: (20.0, 450.0), notch: true, fs: 2000.0, channels: 16, window: 1024, step: 512 }
    }

    pub fn for_modality(m: Modality) -> Option<Self> {
        match m {
            Modality::Ecg => Some(Self::ecg()),
            Modality::Emg => Some(Self::emg()),
            Modality::Synth => None,
        }
    }
}

/// Resample → band-pass → notch → pad → window → z-score.
///
/// Upsampling runs first so the band edges are always below the Nyquist rate
/// (EMG recorded at 200 Hz cannot hold a 450 Hz edge).
pub fn preprocess(rec: &SignalRecord, preset: &Preset) -> SignalResult<WindowBatch> {
    let mut r = if rec.fs < preset.fs { resample(rec, preset.fs)? } else { rec.clone() };
    if r.fs != preset.fs {
        return Err(SignalError::Invalid(format!("recording at {} Hz cannot be brought to {} Hz", rec.fs, preset.fs)));
    }
    r = bandpass(&r, preset.band.0, preset.band.1)?;
    if preset.notch {
        r = notch50(&r)?;
    }
    r = pad_channels(&r, preset.channels)?;
    let mut w = slide_windows(&r, preset.window, preset.step)?;
    w.modality = preset.modality;
    zscore(&w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(chans: &[Vec<f64>], fs: f64) -> SignalRecord {
        SignalRecord::from_channels(Modality::Synth, fs, chans).unwrap()
    }

    #[test]
    fn resample_counts() {
        let r = rec(&[vec![1.0; 1000]], 250.0);
        let up = resample(&r, 500.0).unwrap();
        assert_eq!(up.samples(), 2000);
        assert!(up.data().iter().all(|&v| v == 1.0));
        let r = rec(&[vec![0.0; 300]], 200.0);
        assert_eq!(resample(&r, 2000.0).unwrap().samples(), 3000);
        assert!(resample(&r, 100.0).is_err());
    }

    #[test]
    fn resample_interpolates_linearly() {
        let r = rec(&[vec![0.0, 1.0, 2.0, 3.0]], 1.0);
        let up = resample(&r, 2.0).unwrap();
        assert_eq!(up.channel(0), &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.0]);
    }

    #[test]
    fn pad_channels_appends_zeros() {
        let r = rec(&vec![vec![1.0; 10]; 8], 200.0);
        let p = pad_channels(&r, 16).unwrap();
        assert_eq!(p.channels(), 16);
        assert!((8..16).all(|c| p.channel(c).iter().all(|&v| v == 0.0)));
        assert_eq!(pad_channels(&r, 8).unwrap(), r);
        assert!(pad_channels(&r, 4).is_err());
        let ecg = rec(&vec![vec![0.5; 4]; 12], 500.0);
        assert_eq!(pad_channels(&ecg, 12).unwrap(), ecg);
    }

    #[test]
    fn window_counts() {
        let r = rec(&[(0..2048).map(|v| v as f64).collect()], 100.0);
        assert_eq!(slide_windows(&r, 1024, 512).unwrap().len(), 3);
        let r = rec(&[vec![1.0; 1000]], 100.0);
        let w = slide_windows(&r, 1024, 512).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w.window_data(0)[1000..].iter().all(|&v| v == 0.0));
        let x: Vec<f64> = (0..1024).map(|v| v as f64).collect();
        let w = slide_windows(&rec(std::slice::from_ref(&x), 100.0), 1024, 512).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w.window_data(0), &x[..]);
        assert!(slide_windows(&r, 0, 1).is_err());
    }

    #[test]
    fn zscore_examples() {
        let w = WindowBatch::new(Modality::Synth, 1.0, 2, 4, 4, vec![1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap();
        let z = zscore(&w).unwrap();
        let c0 = &z.window_data(0)[..4];
        let mean: f64 = c0.iter().sum::<f64>() / 4.0;
        let var: f64 = c0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-10 && (var.sqrt() - 1.0).abs() < 1e-10);
        assert!(z.window_data(0)[4..].iter().all(|&v| v == 0.0));
        let affine = WindowBatch::new(Modality::Synth, 1.0, 1, 4, 4, vec![-1.0, 5.0, 11.0, 17.0]).unwrap();
        let base = WindowBatch::new(Modality::Synth, 1.0, 1, 4, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (a, b) = (zscore(&affine).unwrap(), zscore(&base).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn band_and_notch_preconditions() {
        let r = rec(&[vec![0.0; 64]], 500.0);
        assert!(bandpass(&r, 40.0, 0.5).is_err());
        assert!(bandpass(&r, 0.5, 260.0).is_err());
        assert!(notch50(&rec(&[vec![0.0; 64]], 100.0)).is_err());
        let dc = rec(&[vec![3.0; 512]], 500.0);
        let y = notch50(&dc).unwrap();
        assert!(y.data().iter().all(|v| (v - 3.0).abs() < 1e-6));
    }
}
