//! Patch slicing, spectral-energy guided masking and token embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::kernel::{Graph, KernelError, ParamId, ParamStore, Tensor, Var};

/// Longest token sequence the encoder accepts.
pub const MAX_TOKENS: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("{0}")]
    Invalid(String),
    #[error("{tokens} tokens exceed the limit of {MAX_TOKENS}")]
    TooManyTokens { tokens: usize },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

pub type MaskResult<T> = Result<T, MaskError>;

/// Non-overlapping width-`w` patches of every row of a `[R, T]` map.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub per_row: usize,
    pub width: usize,
    /// Original time length, including the dropped tail.
    pub length: usize,
    /// `[rows·per_row, width]`, patch `(r, n)` at row `r·per_row + n`.
    pub patches: Tensor,
}

fn check_width(w: usize, t: usize) -> MaskResult<usize> {
    if w < 2 {
        return Err(MaskError::Invalid(format!("patch width {w} < 2")));
    }
    if w > t {
        return Err(MaskError::Invalid(format!("patch width {w} exceeds length {t}")));
    }
    Ok(t / w)
}

/// Slices each row into `⌊T/w⌋` patches; the tail is dropped.
pub fn patchify(spec: &Tensor, w: usize) -> MaskResult<PatchGrid> {
    if spec.ndim() != 2 {
        return Err(MaskError::Invalid(format!("expected [R, T], got {:?}", spec.shape())));
    }
    let (r, t) = (spec.rows(), spec.cols());
    let n = check_width(w, t)?;
    let mut data = Vec::with_capacity(r * n * w);
    for row in 0..r {
        data.extend_from_slice(&spec.row(row)[..n * w]);
    }
    Ok(PatchGrid { rows: r, per_row: n, width: w, length: t, patches: Tensor::new(vec![r * n, w], data)? })
}

/// Graph counterpart of [`patchify`]: `[R, T]` → `[R·⌊T/w⌋, w]`.
pub fn patchify_var(g: &mut Graph, spec: Var, w: usize) -> MaskResult<Var> {
    let (r, t) = match g.shape(spec) {
        [r, t] => (*r, *t),
        s => return Err(MaskError::Invalid(format!("expected [R, T], got {s:?}"))),
    };
    let n = check_width(w, t)?;
    let x = if n * w == t { spec } else { g.narrow_cols(spec, 0, n * w)? };
    Ok(g.reshape(x, &[r * n, w])?)
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.per_row
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, r: usize, n: usize) -> &[f64] {
        self.patches.row(r * self.per_row + n)
    }

    /// Rebuilds a `[R, T]` map from the patches, writing `fill` over masked
    /// patches and the dropped tail.
    pub fn assemble(&self, plan: &MaskPlan, fill: f64) -> Tensor {
        let mut out = Tensor::full(&[self.rows, self.length], fill);
        for r in 0..self.rows {
            for n in 0..self.per_row {
                if plan.keep(r, n) {
                    out.row_mut(r)[n * self.width..(n + 1) * self.width].copy_from_slice(self.patch(r, n));
                }
            }
        }
        out
    }
}

/// `Σ_k |F_k|` over all DFT bins of the patch.
pub fn spectral_energy(patch: &[f64]) -> f64 {
    spectral_energies(&[patch])[0]
}

fn spectral_energies(patches: &[&[f64]]) -> Vec<f64> {
    let Some(w) = patches.first().map(|p| p.len()) else { return Vec::new() };
    let fft = FftPlanner::<f64>::new().plan_fft_forward(w);
    let mut buf = vec![Complex::new(0.0, 0.0); w];
    patches
        .iter()
        .map(|p| {
            for (b, &v) in buf.iter_mut().zip(p.iter()) {
                *b = Complex::new(v, 0.0);
            }
            fft.process(&mut buf);
            buf.iter().map(|c| c.norm()).sum()
        })
        .collect()
}

impl PatchGrid {
    /// `[R, N]` spectral energies.
    pub fn energies(&self) -> Tensor {
        let refs: Vec<&[f64]> = (0..self.len()).map(|i| self.patches.row(i)).collect();
        Tensor::from_parts(vec![self.rows, self.per_row], spectral_energies(&refs))
    }
}

/// Per-row masking decision.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub rows: usize,
    pub per_row: usize,
    pub ratio: f64,
    pub blend: f64,
    /// Min-max normalised energies, `[R, N]`.
    pub energies: Tensor,
    /// Blended scores, `[R, N]`.
    pub scores: Tensor,
    /// `true` = kept, row-major `R·N`.
    pub mask: Vec<bool>,
    /// Per-row ascending score order.
    pub order: Vec<Vec<usize>>,
}

/// Patches kept per row, `⌊(1−ρ)N⌋`.
///
/// A small guard absorbs rounding in `(1−ρ)·N` so that exact products such
/// as `0.1·10` do not floor to one less.
pub fn keep_count(n: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * n as f64) + 1e-9).floor() as usize
}

/// Independent noise stream for one row.
pub fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    rng
}

/// Normalises each row of `energies` to `[0, 1]`, blends with seeded uniform
/// noise and masks the highest-scoring `N − ⌊(1−ρ)N⌋` patches.
pub fn blend_and_select(energies: &Tensor, ratio: f64, blend: f64, seed: u64) -> MaskResult<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(MaskError::Invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    if !(0.0..=1.0).contains(&blend) {
        return Err(MaskError::Invalid(format!("importance weight {blend} outside [0, 1]")));
    }
    if energies.ndim() != 2 {
        return Err(MaskError::Invalid(format!("expected [R, N] energies, got {:?}", energies.shape())));
    }
    let (rows, n) = (energies.rows(), energies.cols());
    let keep = keep_count(n, ratio);
    let mut norm = Vec::with_capacity(rows * n);
    let mut scores = Vec::with_capacity(rows * n);
    let mut mask = vec![false; rows * n];
    let mut order = Vec::with_capacity(rows);
    for r in 0..rows {
        let e = energies.row(r);
        let (lo, hi) = e.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = hi - lo;
        let mut rng = row_rng(seed, r);
        let start = scores.len();
        for &v in e {
            let en = if span > 0.0 { (v - lo) / span } else { 0.0 };
            let z: f64 = rng.gen();
            norm.push(en);
            scores.push(blend * en + (1.0 - blend) * z);
        }
        let s = &scores[start..];
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
        for &i in &idx[..keep] {
            mask[r * n + i] = true;
        }
        order.push(idx);
    }
    Ok(MaskPlan {
        rows,
        per_row: n,
        ratio,
        blend,
        energies: Tensor::from_parts(vec![rows, n], norm),
        scores: Tensor::from_parts(vec![rows, n], scores),
        mask,
        order,
    })
}

impl MaskPlan {
    /// Plan that keeps every patch (used for fine-tuning and feature extraction).
    pub fn keep_all(rows: usize, per_row: usize) -> Self {
        Self {
            rows,
            per_row,
            ratio: 0.0,
            blend: 0.0,
            energies: Tensor::zeros(&[rows, per_row]),
            scores: Tensor::zeros(&[rows, per_row]),
            mask: vec![true; rows * per_row],
            order: vec![(0..per_row).collect(); rows],
        }
    }

    pub fn keep(&self, r: usize, n: usize) -> bool {
        self.mask[r * self.per_row + n]
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&k| !k).count()
    }

    /// Flat token indices of masked patches.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    /// Masked patch indices of one row, ascending.
    pub fn masked_in_row(&self, r: usize) -> Vec<usize> {
        (0..self.per_row).filter(|&n| !self.keep(r, n)).collect()
    }
}

/// Fixed sinusoidal position code: `[n][2i] = sin(n·ω_i)`, `[n][2i+1] = cos(n·ω_i)`,
/// `ω_i = 10000^(−2i/D)`.
pub fn sinusoid(position: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = j / 2;
            let a = position as f64 * 10000f64.powf(-2.0 * i as f64 / d as f64);
            if j % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

/// Shared patch projection, mask token and row embeddings.
#[derive(Clone, Debug)]
pub struct TokenEmbed {
    pub proj: ParamId,
    pub bias: ParamId,
    pub mask_token: ParamId,
    pub row_embed: ParamId,
    pub width: usize,
    pub dim: usize,
    pub rows: usize,
}

/// Embedded sequence together with per-token metadata.
#[derive(Clone, Debug)]
pub struct TokenSeq {
    /// `[R·N, D]`.
    pub tokens: Var,
    /// Patch index within its row, used for rotary attention.
    pub positions: Vec<f64>,
    pub row_ids: Vec<usize>,
}

pub const ROW_EMBED_STD: f64 = 0.7;

impl TokenEmbed {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, dim: usize, rows: usize, rng: &mut R) -> MaskResult<Self> {
        let std = (1.0 / width as f64).sqrt();
        Ok(Self {
            proj: store.add(format!("{prefix}proj"), Tensor::randn(&[width, dim], std, rng))?,
            bias: store.add(format!("{prefix}bias"), Tensor::zeros(&[dim]))?,
            mask_token: store.add(format!("{prefix}mask_token"), Tensor::randn(&[dim], 0.02, rng))?,
            // Unit scale, like the sinusoid it is added to, so rows stay
            // distinguishable after normalisation.
            row_embed: store.add(format!("{prefix}row_embed"), Tensor::randn(&[rows, dim], ROW_EMBED_STD, rng))?,
            width,
            dim,
            rows,
        })
    }

    /// Projects `[R·N, w]` patches, swaps masked ones for the mask token and
    /// adds position and row codes.
    pub fn embed(&self, g: &mut Graph, patches: Var, plan: &MaskPlan) -> MaskResult<TokenSeq> {
        let count = plan.rows * plan.per_row;
        if count > MAX_TOKENS {
            return Err(MaskError::TooManyTokens { tokens: count });
        }
        if g.shape(patches) != [count, self.width] || plan.rows != self.rows {
            return Err(MaskError::Invalid(format!(
                "patches {:?} vs plan {}x{} and width {}",
                g.shape(patches),
                plan.rows,
                plan.per_row,
                self.width
            )));
        }
        let (w, b) = (g.param(self.proj), g.param(self.bias));
        let e = g.affine(patches, w, Some(b))?;
        let tok = g.param(self.mask_token);
        let e = g.replace_rows(e, tok, &plan.mask)?;
        let mut pos = Vec::with_capacity(count * self.dim);
        let mut positions = Vec::with_capacity(count);
        let mut row_ids = Vec::with_capacity(count);
        for r in 0..plan.rows {
            for n in 0..plan.per_row {
                pos.extend(sinusoid(n, self.dim));
                positions.push(n as f64);
                row_ids.push(r);
            }
        }
        let pos = g.constant(Tensor::new(vec![count, self.dim], pos)?);
        let e = g.add(e, pos)?;
        let table = g.param(self.row_embed);
        let rows = g.gather_rows(table, &row_ids)?;
        let tokens = g.add(e, rows)?;
        Ok(TokenSeq { tokens, positions, row_ids })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_examples() {
        assert!((spectral_energy(&[1.0, 1.0, 1.0, 1.0]) - 4.0).abs() < 1e-12);
        assert!((spectral_energy(&[1.0, 0.0, -1.0, 0.0]) - 4.0).abs() < 1e-12);
        assert_eq!(spectral_energy(&[0.0; 8]), 0.0);
    }

    #[test]
    fn keep_count_floor_rule() {
        assert_eq!(keep_count(10, 0.7), 3);
        assert_eq!(keep_count(10, 0.9), 1);
        assert_eq!(keep_count(16, 0.7), 4);
        assert_eq!(keep_count(5, 0.0), 5);
    }
}
