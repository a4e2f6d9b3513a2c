//! Learnable multi-level wavelet front-end.
//!
//! A bank of candidate wavelets is mixed by an input-dependent selector,
//! added to per-channel depthwise taps and used for an `L`-level analysis.
//! Adjacent levels are blended by soft gates, every level is brought back to
//! the input length, refined by a cross-scale fusion block and the results
//! are stacked into a `((L+1)·C) × T` subband map.

mod taps;

pub use taps::{lookup, NAMES};

use rand::Rng;
use thiserror::Error;

use crate::kernel::{Graph, KernelError, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveletError {
    #[error("unknown wavelet {0:?}")]
    UnknownBase(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

pub type WaveletResult<T> = Result<T, WaveletError>;

/// Linearly interpolates `h` onto `k` evenly spaced points of its index range
/// and rescales so the L1 norm is unchanged.
pub fn resample_taps(h: &[f64], k: usize) -> WaveletResult<Vec<f64>> {
    if h.len() < 2 || k < 2 {
        return Err(WaveletError::Invalid(format!("cannot resample {} taps to {k}", h.len())));
    }
    let l1: f64 = h.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return Err(WaveletError::Invalid("all-zero taps".into()));
    }
    let k0 = h.len();
    let step = (k0 - 1) as f64 / (k - 1) as f64;
    let mut out: Vec<f64> = (0..k)
        .map(|u| {
            let pos = u as f64 * step;
            let i = (pos.floor() as usize).min(k0 - 2);
            let f = pos - i as f64;
            h[i] * (1.0 - f) + h[i + 1] * f
        })
        .collect();
    let l1_new: f64 = out.iter().map(|v| v.abs()).sum();
    if l1_new == 0.0 {
        return Err(WaveletError::Invalid("interpolated taps vanish".into()));
    }
    let s = l1 / l1_new;
    out.iter_mut().for_each(|v| *v *= s);
    Ok(out)
}

/// Candidate wavelets resampled to a common length.
#[derive(Clone, Debug)]
pub struct WaveletBank {
    pub names: Vec<String>,
    pub k: usize,
    /// `[M, K]` low-pass candidates.
    pub lo: Tensor,
    /// `[M, K]` high-pass candidates.
    pub hi: Tensor,
}

impl WaveletBank {
    pub fn new<S: AsRef<str>>(names: &[S], k: usize) -> WaveletResult<Self> {
        if names.is_empty() {
            return Err(WaveletError::Invalid("wavelet bank needs at least one candidate".into()));
        }
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for n in names {
            let (l, h) = lookup(n.as_ref()).ok_or_else(|| WaveletError::UnknownBase(n.as_ref().to_string()))?;
            lo.push(resample_taps(l, k)?);
            hi.push(resample_taps(h, k)?);
        }
        Self::from_taps(names.iter().map(|n| n.as_ref().to_string()).collect(), lo, hi)
    }

    /// Builds a bank from already resampled taps.
    pub fn from_taps(names: Vec<String>, lo: Vec<Vec<f64>>, hi: Vec<Vec<f64>>) -> WaveletResult<Self> {
        let m = lo.len();
        if m == 0 || hi.len() != m || names.len() != m {
            return Err(WaveletError::Invalid("inconsistent candidate counts".into()));
        }
        let k = lo[0].len();
        if lo.iter().chain(&hi).any(|t| t.len() != k) {
            return Err(WaveletError::Invalid("candidate tap lengths differ".into()));
        }
        let flat = |v: Vec<Vec<f64>>| Tensor::new(vec![m, k], v.concat());
        Ok(Self { names, k, lo: flat(lo)?, hi: flat(hi)? })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// `Σ_w α_w k_w` for both filters.
    pub fn combine(&self, alpha: &[f64]) -> WaveletResult<(Vec<f64>, Vec<f64>)> {
        if alpha.len() != self.len() {
            return Err(WaveletError::Invalid(format!("{} weights for {} candidates", alpha.len(), self.len())));
        }
        let mix = |t: &Tensor| {
            (0..self.k).map(|u| alpha.iter().enumerate().map(|(w, a)| a * t.get2(w, u)).sum()).collect()
        };
        Ok((mix(&self.lo), mix(&self.hi)))
    }

    /// Candidate mixture under uniform weights.
    fn uniform_mix(&self) -> (Tensor, Tensor) {
        let a = vec![1.0 / self.len() as f64; self.len()];
        let (lo, hi) = self.combine(&a).expect("matching length");
        (Tensor::vector(lo), Tensor::vector(hi))
    }
}

/// Overwrites every row of the depthwise taps with candidate `default`.
pub fn init_depthwise(store: &mut ParamStore, k_low: ParamId, k_high: ParamId, bank: &WaveletBank, default: usize) -> WaveletResult<()> {
    if default >= bank.len() {
        return Err(WaveletError::Invalid(format!("default candidate {default} out of range")));
    }
    for (id, src) in [(k_low, &bank.lo), (k_high, &bank.hi)] {
        let p = store.get_mut(id);
        if p.value.ndim() != 2 || p.value.cols() != bank.k {
            return Err(WaveletError::Invalid(format!("depthwise taps {:?} vs K={}", p.value.shape(), bank.k)));
        }
        for c in 0..p.value.rows() {
            p.value.row_mut(c).copy_from_slice(src.row(default));
        }
    }
    Ok(())
}

/// Two-layer MLP from time-averaged channels to candidate scores.
#[derive(Clone, Debug)]
pub struct SelectorNet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub const SELECTOR_HIDDEN: usize = 64;

impl SelectorNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, m: usize, rng: &mut R) -> WaveletResult<Self> {
        Ok(Self {
            w1: store.add(format!("{prefix}w1"), Tensor::randn(&[c, SELECTOR_HIDDEN], (1.0 / c as f64).sqrt(), rng))?,
            b1: store.add(format!("{prefix}b1"), Tensor::zeros(&[SELECTOR_HIDDEN]))?,
            w2: store.add(format!("{prefix}w2"), Tensor::zeros(&[SELECTOR_HIDDEN, m]))?,
            b2: store.add(format!("{prefix}b2"), Tensor::zeros(&[m]))?,
        })
    }

    /// `softmax(MLP(mean_t x))` as a `[1, M]` node.
    pub fn select_alpha(&self, g: &mut Graph, x: Var) -> WaveletResult<Var> {
        let c = g.shape(x)[0];
        let pooled = g.mean_last(x)?;
        let pooled = g.reshape(pooled, &[1, c])?;
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.affine(pooled, w1, Some(b1))?;
        let h = g.gelu(h)?;
        let s = g.affine(h, w2, Some(b2))?;
        Ok(g.softmax(s)?)
    }
}

/// Effective per-channel taps: depthwise parameters plus the deviation of the
/// α-mixture from the uniform mixture.
///
/// At uniform α (the selector's initial output) this is exactly the
/// depthwise taps, so freshly initialised filters equal the default wavelet.
pub fn combine_filters(g: &mut Graph, bank: &WaveletBank, alpha: Var, k_low: ParamId, k_high: ParamId) -> WaveletResult<(Var, Var)> {
    let (ulo, uhi) = bank.uniform_mix();
    let mut out = Vec::with_capacity(2);
    for (cands, uni, id) in [(&bank.lo, ulo, k_low), (&bank.hi, uhi, k_high)] {
        let cv = g.constant(cands.clone());
        let mix = g.matmul(alpha, cv)?;
        let uni = g.constant(uni.reshape(&[1, bank.k])?);
        let delta = g.sub(mix, uni)?;
        let delta = g.reshape(delta, &[bank.k])?;
        let dw = g.param(id);
        out.push(g.add_row(dw, delta)?);
    }
    Ok((out[0], out[1]))
}

/// One analysis step: filter-and-decimate into approximation and detail.
pub fn analysis_level(g: &mut Graph, a_in: Var, k_low: Var, k_high: Var) -> WaveletResult<(Var, Var)> {
    let a = g.conv1d_depthwise_down2(a_in, k_low)?;
    let d = g.conv1d_depthwise_down2(a_in, k_high)?;
    Ok((a, d))
}

const GATE_MARGIN: f64 = 1e-6;

/// Per-channel soft gate from attention-pooled context.
#[derive(Clone, Debug)]
pub struct GateHead {
    pub query: ParamId,
    pub w_local: ParamId,
    pub w_ctx: ParamId,
    pub bias: ParamId,
}

impl GateHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut R) -> WaveletResult<Self> {
        Ok(Self {
            query: store.add(format!("{prefix}query"), Tensor::randn(&[c], 0.1, rng))?,
            w_local: store.add(format!("{prefix}w_local"), Tensor::randn(&[c], 0.1, rng))?,
            w_ctx: store.add(format!("{prefix}w_ctx"), Tensor::randn(&[c], 0.1, rng))?,
            bias: store.add(format!("{prefix}bias"), Tensor::zeros(&[c]))?,
        })
    }

    /// `G[c][n] ≈ σ(w_l·a[c][n] + w_c·g_c + b)`, `g_c` the softmax(q·a)-weighted mean of `a[c]`.
    pub fn gate(&self, g: &mut Graph, a: Var) -> WaveletResult<Var> {
        let q = g.param(self.query);
        let scores = g.mul_col(a, q)?;
        let p = g.softmax(scores)?;
        let pa = g.mul(p, a)?;
        let ctx = g.sum_last(pa)?;
        let wc = g.param(self.w_ctx);
        let ctx = g.mul(ctx, wc)?;
        let b = g.param(self.bias);
        let shift = g.add(ctx, b)?;
        let wl = g.param(self.w_local);
        let local = g.mul_col(a, wl)?;
        let z = g.add_col(local, shift)?;
        let s = g.sigmoid(z)?;
        // Keep the gate strictly inside (0, 1) even where the sigmoid saturates.
        let s = g.scale(s, 1.0 - 2.0 * GATE_MARGIN)?;
        let margin = g.constant(Tensor::full(g.shape(s), GATE_MARGIN));
        Ok(g.add(s, margin)?)
    }
}

/// `â = G⊙a + (1−G)⊙↑₂a_next`, likewise for `d`; returns `(â, d̂)`.
pub fn gate_blend(g: &mut Graph, a: Var, d: Var, a_next: Var, d_next: Var, gate: Var) -> WaveletResult<(Var, Var)> {
    let t = g.shape(a)[1];
    if g.shape(a_next)[1] * 2 != t || g.shape(d_next)[1] * 2 != t || g.shape(d)[1] != t {
        return Err(WaveletError::Invalid(format!(
            "cannot blend level of length {t} with deeper length {}",
            g.shape(a_next)[1]
        )));
    }
    let mut out = Vec::with_capacity(2);
    let ones = g.constant(Tensor::full(g.shape(gate), 1.0));
    let rest = g.sub(ones, gate)?;
    for (cur, next) in [(a, a_next), (d, d_next)] {
        let up = g.upsample_nearest2(next)?;
        let keep = g.mul(gate, cur)?;
        let fill = g.mul(rest, up)?;
        out.push(g.add(keep, fill)?);
    }
    Ok((out[0], out[1]))
}

pub const SEGMENT: usize = 16;
pub const CAFFN_HEADS: usize = 4;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Channel-aggregation feed-forward block followed by attention over
/// segment summaries of shallower levels.
#[derive(Clone, Debug)]
pub struct CaffnBlock {
    pub pw_w: ParamId,
    pub pw_b: ParamId,
    pub dw: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub beta: ParamId,
    pub heads: usize,
}

impl CaffnBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c2: usize, rng: &mut R) -> WaveletResult<Self> {
        let std = (1.0 / c2 as f64).sqrt();
        Ok(Self {
            pw_w: store.add(format!("{prefix}pw_w"), Tensor::randn(&[c2, c2], std, rng))?,
            pw_b: store.add(format!("{prefix}pw_b"), Tensor::zeros(&[c2]))?,
            dw: store.add(format!("{prefix}dw"), Tensor::randn(&[c2, 3], 0.1, rng))?,
            wq: store.add(format!("{prefix}wq"), Tensor::randn(&[c2, c2], std, rng))?,
            wk: store.add(format!("{prefix}wk"), Tensor::randn(&[c2, c2], std, rng))?,
            beta: store.add(format!("{prefix}beta"), Tensor::scalar(0.0))?,
            heads: gcd(CAFFN_HEADS, c2),
        })
    }

    /// `U = X + DwConv(GELU(W X + b))`.
    pub fn ffn(&self, g: &mut Graph, x: Var) -> WaveletResult<Var> {
        let w = g.param(self.pw_w);
        let h = g.matmul(w, x)?;
        let b = g.param(self.pw_b);
        let h = g.add_col(h, b)?;
        let h = g.gelu(h)?;
        let k = g.param(self.dw);
        let h = g.conv1d_depthwise_same(h, k)?;
        Ok(g.add(x, h)?)
    }

    /// `[T/16, 2C]` segment summaries of a `[2C, T]` map.
    pub fn summary(g: &mut Graph, x: Var) -> WaveletResult<Var> {
        let s = g.segment_mean(x, SEGMENT)?;
        Ok(g.transpose(s)?)
    }

    /// Cross-attention of `u`'s summaries over `memory` (stacked summaries),
    /// nearest-upsampled back to `u`'s length. Values are the raw summaries,
    /// so each output column is a convex combination of memory rows.
    pub fn attend(&self, g: &mut Graph, u: Var, memory: Var) -> WaveletResult<Var> {
        let qs = Self::summary(g, u)?;
        let wq = g.param(self.wq);
        let q = g.affine(qs, wq, None)?;
        let wk = g.param(self.wk);
        let k = g.affine(memory, wk, None)?;
        let o = g.attention(q, k, memory, self.heads)?;
        let o = g.transpose(o)?;
        Ok(g.upsample_nearest(o, SEGMENT)?)
    }
}

/// Switches used to pin parts of the front-end to closed-form behaviour.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrontendOverrides {
    /// Replace every gate by this constant.
    pub gate: Option<f64>,
    /// Replace every fusion weight β by this constant.
    pub beta: Option<f64>,
    /// Skip the feed-forward part of the fusion block (`U = X`).
    pub bypass_ffn: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub channels: usize,
    pub levels: usize,
    pub taps: usize,
    pub bases: Vec<String>,
}

/// Nodes produced by one front-end pass over a single `[C, T]` sample.
#[derive(Clone, Debug)]
pub struct FrontendOutput {
    /// `[(L+1)·C, T]`, rows `d¹ … dᴸ, aᴸ`.
    pub spec: Var,
    /// `[1, M]` candidate weights.
    pub alpha: Var,
    /// Decimated approximation bands `a¹ … aᴸ`.
    pub approx: Vec<Var>,
    /// Decimated detail bands `d¹ … dᴸ`.
    pub detail: Vec<Var>,
    /// Gates `G¹ … G^{L-1}`.
    pub gates: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct WaveletFrontend {
    pub config: FrontendConfig,
    pub bank: WaveletBank,
    pub k_low: ParamId,
    pub k_high: ParamId,
    pub selector: SelectorNet,
    pub gates: Vec<GateHead>,
    pub fusion: Vec<CaffnBlock>,
    pub overrides: FrontendOverrides,
}

impl WaveletFrontend {
    /// Registers all parameters under `prefix`; depthwise taps start at the
    /// first candidate of `config.bases`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: FrontendConfig, rng: &mut R) -> WaveletResult<Self> {
        let FrontendConfig { channels: c, levels, taps, .. } = config;
        if c == 0 || levels == 0 {
            return Err(WaveletError::Invalid("front-end needs at least one channel and one level".into()));
        }
        let bank = WaveletBank::new(&config.bases, taps)?;
        let k_low = store.add(format!("{prefix}k_low"), Tensor::zeros(&[c, taps]))?;
        let k_high = store.add(format!("{prefix}k_high"), Tensor::zeros(&[c, taps]))?;
        init_depthwise(store, k_low, k_high, &bank, 0)?;
        let selector = SelectorNet::new(store, &format!("{prefix}selector."), c, bank.len(), rng)?;
        let gates = (1..levels)
            .map(|l| GateHead::new(store, &format!("{prefix}gate{l}."), c, rng))
            .collect::<WaveletResult<_>>()?;
        let fusion = (1..=levels)
            .map(|l| CaffnBlock::new(store, &format!("{prefix}caffn{l}."), 2 * c, rng))
            .collect::<WaveletResult<_>>()?;
        Ok(Self { config, bank, k_low, k_high, selector, gates, fusion, overrides: FrontendOverrides::default() })
    }

    pub fn spec_rows(&self) -> usize {
        (self.config.levels + 1) * self.config.channels
    }

    /// Full pass over one `[C, T]` sample.
    pub fn forward(&self, g: &mut Graph, x: Var) -> WaveletResult<FrontendOutput> {
        let (c, t) = match g.shape(x) {
            [c, t] => (*c, *t),
            s => return Err(WaveletError::Invalid(format!("expected [C, T] input, got {s:?}"))),
        };
        let levels = self.config.levels;
        if c != self.config.channels {
            return Err(WaveletError::Invalid(format!("expected {} channels, got {c}", self.config.channels)));
        }
        if t % (1 << levels) != 0 || t == 0 {
            return Err(WaveletError::Invalid(format!("length {t} not divisible by 2^{levels}")));
        }
        let alpha = self.selector.select_alpha(g, x)?;
        let (kl, kh) = combine_filters(g, &self.bank, alpha, self.k_low, self.k_high)?;

        let (mut approx, mut detail) = (Vec::with_capacity(levels), Vec::with_capacity(levels));
        let mut cur = x;
        for _ in 0..levels {
            let (a, d) = analysis_level(g, cur, kl, kh)?;
            approx.push(a);
            detail.push(d);
            cur = a;
        }

        let mut gates = Vec::with_capacity(levels.saturating_sub(1));
        let mut refined: Vec<Var> = Vec::with_capacity(levels);
        let mut summaries: Vec<Var> = Vec::with_capacity(levels);
        for l in 0..levels {
            let (ah, dh) = if l + 1 < levels {
                let gate = match self.overrides.gate {
                    Some(v) => g.constant(Tensor::full(g.shape(approx[l]), v)),
                    None => self.gates[l].gate(g, approx[l])?,
                };
                gates.push(gate);
                gate_blend(g, approx[l], detail[l], approx[l + 1], detail[l + 1], gate)?
            } else {
                (approx[l], detail[l])
            };
            let pair = g.concat_rows(&[ah, dh])?;
            let pair = g.upsample_nearest(pair, 1 << (l + 1))?;
            let y = self.fuse(g, l, pair, &summaries)?;
            summaries.push(CaffnBlock::summary(g, y)?);
            refined.push(y);
        }

        let spec = assemble_spec(g, &refined, c)?;
        Ok(FrontendOutput { spec, alpha, approx, detail, gates })
    }

    /// `Y = U + β·Attention(U, shallower)`; the first level attends to itself.
    fn fuse(&self, g: &mut Graph, level: usize, pair: Var, shallower: &[Var]) -> WaveletResult<Var> {
        let block = &self.fusion[level];
        let u = if self.overrides.bypass_ffn { pair } else { block.ffn(g, pair)? };
        let memory = if shallower.is_empty() { CaffnBlock::summary(g, u)? } else { g.concat_rows(shallower)? };
        let att = block.attend(g, u, memory)?;
        let beta = match self.overrides.beta {
            Some(v) => g.constant(Tensor::scalar(v)),
            None => g.param(block.beta),
        };
        let scaled = g.mul_scalar(att, beta)?;
        Ok(g.add(u, scaled)?)
    }
}

/// Stacks `d¹ … dᴸ, aᴸ` from refined `[2C, T]` maps whose first half is the
/// approximation and second half the detail.
pub fn assemble_spec(g: &mut Graph, refined: &[Var], channels: usize) -> WaveletResult<Var> {
    let Some(&last) = refined.last() else {
        return Err(WaveletError::Invalid("no levels to assemble".into()));
    };
    let t = g.shape(last)[1];
    let mut rows = Vec::with_capacity(refined.len() + 1);
    for &y in refined {
        if g.shape(y) != [2 * channels, t] {
            return Err(WaveletError::Invalid(format!("refined map {:?}, expected [{}, {t}]", g.shape(y), 2 * channels)));
        }
        rows.push(g.slice_rows(y, channels, channels)?);
    }
    rows.push(g.slice_rows(last, 0, channels)?);
    Ok(g.concat_rows(&rows)?)
}
