use std::f64::consts::PI;

use super::{SignalError, SignalResult};

/// Normalised second-order section (`a0 == 1`), transposed direct form II.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        Self { b0: b[0] / a[0], b1: b[1] / a[0], b2: b[2] / a[0], a1: a[1] / a[0], a2: a[2] / a[0] }
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Steady-state `(z1, z2)` for a unit step input.
    fn step_state(&self) -> (f64, f64) {
        let g = self.dc_gain();
        let z2 = self.b2 - self.a2 * g;
        let z1 = self.b1 - self.a1 * g + z2;
        (z1, z2)
    }

    fn run(&self, x: &mut [f64], (mut z1, mut z2): (f64, f64)) {
        for v in x.iter_mut() {
            let xin = *v;
            let y = self.b0 * xin + z1;
            z1 = self.b1 * xin - self.a1 * y + z2;
            z2 = self.b2 * xin - self.a2 * y;
            *v = y;
        }
    }

    /// Largest pole magnitude.
    fn pole_radius(&self) -> f64 {
        let disc = self.a1 * self.a1 - 4.0 * self.a2;
        if disc < 0.0 {
            self.a2.abs().sqrt()
        } else {
            let r = disc.sqrt();
            ((-self.a1 + r) / 2.0).abs().max(((-self.a1 - r) / 2.0).abs())
        }
    }

    /// Magnitude response at `f` Hz.
    pub fn magnitude(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let (c1, s1, c2, s2) = (w.cos(), -w.sin(), (2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b0 + self.b1 * c1 + self.b2 * c2, self.b1 * s1 + self.b2 * s2);
        let den = (1.0 + self.a1 * c1 + self.a2 * c2, self.a1 * s1 + self.a2 * s2);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

/// Pole-pair quality factors of an order-`order` Butterworth prototype.
fn butterworth_qs(order: usize) -> Vec<f64> {
    (0..order / 2)
        .map(|k| {
            let theta = PI * (2 * k + 1) as f64 / (2 * order) as f64;
            1.0 / (2.0 * theta.cos())
        })
        .collect()
}

fn check_cutoff(f: f64, fs: f64) -> SignalResult<()> {
    if !(f > 0.0 && f < fs / 2.0) {
        return Err(SignalError::InvalidBand { lo: f, hi: f, fs });
    }
    Ok(())
}

/// Even-order Butterworth low-pass as a cascade of bilinear biquads
/// (pre-warped at the cutoff).
pub fn butterworth_lowpass(order: usize, fc: f64, fs: f64) -> SignalResult<Vec<Biquad>> {
    check_cutoff(fc, fs)?;
    if order == 0 || !order.is_multiple_of(2) {
        return Err(SignalError::Invalid(format!("order {order} must be even")));
    }
    let w0 = 2.0 * PI * fc / fs;
    let (s, c) = w0.sin_cos();
    Ok(butterworth_qs(order)
        .into_iter()
        .map(|q| {
            let alpha = s / (2.0 * q);
            Biquad::normalized([(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
        })
        .collect())
}

pub fn butterworth_highpass(order: usize, fc: f64, fs: f64) -> SignalResult<Vec<Biquad>> {
    check_cutoff(fc, fs)?;
    if order == 0 || !order.is_multiple_of(2) {
        return Err(SignalError::Invalid(format!("order {order} must be even")));
    }
    let w0 = 2.0 * PI * fc / fs;
    let (s, c) = w0.sin_cos();
    Ok(butterworth_qs(order)
        .into_iter()
        .map(|q| {
            let alpha = s / (2.0 * q);
            Biquad::normalized([(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0], [1.0 + alpha, -2.0 * c, 1.0 - alpha])
        })
        .collect())
}

/// Second-order notch with -3 dB bandwidth `f0 / q`.
pub fn notch_filter(f0: f64, q: f64, fs: f64) -> SignalResult<Biquad> {
    check_cutoff(f0, fs)?;
    let w0 = 2.0 * PI * f0 / fs;
    let bw = w0 / q;
    let beta = (bw / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    Ok(Biquad::normalized([gain, -2.0 * gain * c, gain], [1.0, -2.0 * gain * c, 2.0 * gain - 1.0]))
}

fn sosfilt(sos: &[Biquad], x: &mut [f64]) {
    let Some(&x0) = x.first() else { return };
    let mut level = x0;
    for s in sos {
        let (z1, z2) = s.step_state();
        s.run(x, (z1 * level, z2 * level));
        level *= s.dc_gain();
    }
}

/// Samples until the slowest pole decays by 60 dB.
fn settle_len(sos: &[Biquad]) -> usize {
    let r = sos.iter().map(Biquad::pole_radius).fold(0.0, f64::max);
    if r <= 0.0 || r >= 1.0 {
        return 0;
    }
    ((1e-3f64).ln() / r.ln()).ceil() as usize
}

/// Zero-phase forward–backward filtering with odd-extension padding and
/// steady-state initial conditions.
///
/// The padding covers the settling time of the slowest pole so edge
/// transients die out before the original samples are reached.
pub fn sosfiltfilt(sos: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (3 * (2 * sos.len() + 1)).max(settle_len(sos)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    sosfilt(sos, &mut ext);
    ext.reverse();
    sosfilt(sos, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}
