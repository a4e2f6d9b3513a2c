//! Masked-reconstruction model: wavelet front-end, patch tokens, a rotary
//! Transformer encoder and a shallow Transformer decoder.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kernel::{Graph, KernelError, ParamId, ParamStore, Tensor, Var};
use crate::masking::{blend_and_select, patchify_var, MaskError, MaskPlan, PatchGrid, TokenEmbed, TokenSeq, MAX_TOKENS};
use crate::wavelet::{FrontendConfig, WaveletError, WaveletFrontend};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

impl ModelError {
    /// Whether a non-finite value caused the failure.
    pub fn is_numeric(&self) -> bool {
        let nf = |k: &KernelError| matches!(k, KernelError::NonFinite { .. });
        match self {
            ModelError::Kernel(k) | ModelError::Wavelet(WaveletError::Kernel(k)) | ModelError::Mask(MaskError::Kernel(k)) => nf(k),
            _ => false,
        }
    }
}

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizePreset {
    Small,
    Base,
    Large,
}

impl SizePreset {
    /// `(D, encoder layers, heads)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            SizePreset::Small => (256, 6, 8),
            SizePreset::Base => (384, 8, 12),
            SizePreset::Large => (512, 12, 16),
        }
    }

    /// Nominal encoder size.
    pub fn nominal_params(self) -> usize {
        match self {
            SizePreset::Small => 5_000_000,
            SizePreset::Base => 15_000_000,
            SizePreset::Large => 37_000_000,
        }
    }
}

impl fmt::Display for SizePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizePreset::Small => "small",
            SizePreset::Base => "base",
            SizePreset::Large => "large",
        })
    }
}

impl std::str::FromStr for SizePreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(SizePreset::Small),
            "base" => Ok(SizePreset::Base),
            "large" => Ok(SizePreset::Large),
            other => Err(format!("unknown size preset {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub drop_path: f64,
    pub dec_dim: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
}

impl EncoderConfig {
    pub fn preset(p: SizePreset) -> Self {
        let (dim, layers, heads) = p.dims();
        Self { dim, layers, heads, mlp_ratio: 4.0, drop_path: 0.1, dec_dim: 256, dec_layers: 8, dec_heads: 8 }
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    /// Samples per input window.
    pub window: usize,
    pub patch: usize,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    pub fn rows(&self) -> usize {
        (self.frontend.levels + 1) * self.frontend.channels
    }

    pub fn patches_per_row(&self) -> usize {
        self.window / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.rows() * self.patches_per_row()
    }

    pub fn validate(&self) -> ModelResult<()> {
        let e = &self.encoder;
        let bad = |m: String| Err(ModelError::Invalid(m));
        if self.patch < 2 || self.patch > self.window {
            return bad(format!("patch width {} invalid for window {}", self.patch, self.window));
        }
        if !self.window.is_multiple_of(1 << self.frontend.levels) {
            return bad(format!("window {} not divisible by 2^{}", self.window, self.frontend.levels));
        }
        if self.tokens() > MAX_TOKENS {
            return bad(format!("{} tokens exceed the limit of {MAX_TOKENS}", self.tokens()));
        }
        if e.heads == 0 || !e.dim.is_multiple_of(e.heads) || !(e.dim / e.heads).is_multiple_of(2) {
            return bad(format!("dim {} with {} heads needs an even head size", e.dim, e.heads));
        }
        if e.dec_heads == 0 || !e.dec_dim.is_multiple_of(e.dec_heads) {
            return bad(format!("decoder dim {} not divisible by {} heads", e.dec_dim, e.dec_heads));
        }
        if !e.dim.is_multiple_of(2) {
            return bad("token dim must be even".into());
        }
        if !(0.0..1.0).contains(&e.drop_path) {
            return bad(format!("drop path {} outside [0, 1)", e.drop_path));
        }
        Ok(())
    }
}

fn xavier<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[din, dout], (2.0 / (din + dout) as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, rng: &mut R) -> ModelResult<Self> {
        Ok(Self {
            w: store.add(format!("{prefix}w"), xavier(din, dout, rng))?,
            b: store.add(format!("{prefix}b"), Tensor::zeros(&[dout]))?,
        })
    }

    /// Weights drawn from `N(0, std²)` instead of the Xavier scale.
    pub fn with_std<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, std: f64, rng: &mut R) -> ModelResult<Self> {
        Ok(Self {
            w: store.add(format!("{prefix}w"), Tensor::randn(&[din, dout], std, rng))?,
            b: store.add(format!("{prefix}b"), Tensor::zeros(&[dout]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> ModelResult<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.affine(x, w, Some(b))?)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> ModelResult<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}gamma"), Tensor::full(&[d], 1.0))?,
            beta: store.add(format!("{prefix}beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> ModelResult<Var> {
        let (a, b) = (g.param(self.gamma), g.param(self.beta));
        Ok(g.layer_norm(x, a, b)?)
    }
}

/// Initial scale of the projections feeding the residual stream.
const RESIDUAL_STD: f64 = 0.02;

/// Pre-norm Transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub rotary: bool,
    pub drop_rate: f64,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        heads: usize,
        rotary: bool,
        drop_rate: f64,
        rng: &mut R,
    ) -> ModelResult<Self> {
        Ok(Self {
            norm1: Norm::new(store, &format!("{prefix}norm1."), d)?,
            q: Linear::new(store, &format!("{prefix}q."), d, d, rng)?,
            k: Linear::new(store, &format!("{prefix}k."), d, d, rng)?,
            v: Linear::new(store, &format!("{prefix}v."), d, d, rng)?,
            out: Linear::with_std(store, &format!("{prefix}out."), d, d, RESIDUAL_STD, rng)?,
            norm2: Norm::new(store, &format!("{prefix}norm2."), d)?,
            fc1: Linear::new(store, &format!("{prefix}fc1."), d, hidden, rng)?,
            fc2: Linear::with_std(store, &format!("{prefix}fc2."), hidden, d, RESIDUAL_STD, rng)?,
            heads,
            rotary,
            drop_rate,
        })
    }

    /// Stochastic depth: in training each residual branch is dropped with
    /// probability `drop_rate` and rescaled otherwise.
    fn branch(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> ModelResult<Var> {
        match rng {
            Some(r) if self.drop_rate > 0.0 => {
                let keep = r.gen::<f64>() >= self.drop_rate;
                Ok(g.scale(x, if keep { 1.0 / (1.0 - self.drop_rate) } else { 0.0 })?)
            }
            _ => Ok(x),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, positions: &[f64], rng: &mut Option<&mut ChaCha8Rng>) -> ModelResult<Var> {
        let h = self.norm1.forward(g, x)?;
        let mut q = self.q.forward(g, h)?;
        let mut k = self.k.forward(g, h)?;
        let v = self.v.forward(g, h)?;
        if self.rotary {
            q = g.rope(q, self.heads, positions)?;
            k = g.rope(k, self.heads, positions)?;
        }
        let a = g.attention(q, k, v, self.heads)?;
        let a = self.out.forward(g, a)?;
        let a = self.branch(g, a, rng)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, h)?;
        let h = self.branch(g, h, rng)?;
        Ok(g.add(x, h)?)
    }
}

/// Masking knobs for one reconstruction pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSettings {
    pub ratio: f64,
    pub blend: f64,
    pub seed: u64,
}

/// Result of one masked reconstruction pass over a sample.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub loss: Var,
    /// `[R·N, w]` decoder output.
    pub recon: Var,
    /// `[R·N, w]` stop-gradient patches of the subband map, scaled to unit RMS.
    pub target: Var,
    pub plan: MaskPlan,
}

pub const ENCODER_PREFIX: &str = "encoder.";

const TARGET_RMS_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub frontend: WaveletFrontend,
    pub embed: TokenEmbed,
    pub encoder: Vec<Block>,
    pub enc_norm: Norm,
    pub dec_proj: Linear,
    pub decoder: Vec<Block>,
    pub dec_norm: Norm,
    pub head: Linear,
}

impl Model {
    /// Registers every parameter, prefixing encoder-side ones with
    /// [`ENCODER_PREFIX`] and decoder-side ones with `decoder.`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> ModelResult<Self> {
        config.validate()?;
        let e = config.encoder.clone();
        let frontend = WaveletFrontend::new(store, "encoder.frontend.", config.frontend.clone(), rng)?;
        let embed = TokenEmbed::new(store, "encoder.embed.", config.patch, e.dim, config.rows(), rng)?;
        let encoder = (0..e.layers)
            .map(|i| {
                let rate = if e.layers > 1 { e.drop_path * i as f64 / (e.layers - 1) as f64 } else { 0.0 };
                Block::new(store, &format!("encoder.block{i}."), e.dim, e.hidden(), e.heads, true, rate, rng)
            })
            .collect::<ModelResult<_>>()?;
        let enc_norm = Norm::new(store, "encoder.norm.", e.dim)?;
        let dec_proj = Linear::new(store, "decoder.proj.", e.dim, e.dec_dim, rng)?;
        let dec_hidden = (e.dec_dim as f64 * e.mlp_ratio).round() as usize;
        let decoder = (0..e.dec_layers)
            .map(|i| Block::new(store, &format!("decoder.block{i}."), e.dec_dim, dec_hidden, e.dec_heads, false, 0.0, rng))
            .collect::<ModelResult<_>>()?;
        let dec_norm = Norm::new(store, "decoder.norm.", e.dec_dim)?;
        let head = Linear::new(store, "decoder.head.", e.dec_dim, config.patch, rng)?;
        Ok(Self { config, frontend, embed, encoder, enc_norm, dec_proj, decoder, dec_norm, head })
    }

    fn check_input(&self, x: &Tensor) -> ModelResult<()> {
        let want = [self.config.frontend.channels, self.config.window];
        if x.shape() != want {
            return Err(ModelError::Invalid(format!("expected input {want:?}, got {:?}", x.shape())));
        }
        Ok(())
    }

    /// `[(L+1)·C, T]` subband map of one `[C, T]` window.
    pub fn spec(&self, g: &mut Graph, x: &Tensor) -> ModelResult<Var> {
        self.check_input(x)?;
        let xv = g.constant(x.clone());
        Ok(self.frontend.forward(g, xv)?.spec)
    }

    pub fn encode(&self, g: &mut Graph, tokens: &TokenSeq, mut rng: Option<&mut ChaCha8Rng>) -> ModelResult<Var> {
        if g.shape(tokens.tokens)[0] > MAX_TOKENS {
            return Err(ModelError::Invalid(format!("sequence of {} tokens too long", g.shape(tokens.tokens)[0])));
        }
        let mut h = tokens.tokens;
        for b in &self.encoder {
            h = b.forward(g, h, &tokens.positions, &mut rng)?;
        }
        self.enc_norm.forward(g, h)
    }

    pub fn decode(&self, g: &mut Graph, latents: Var) -> ModelResult<Var> {
        let mut h = self.dec_proj.forward(g, latents)?;
        let mut none = None;
        for b in &self.decoder {
            h = b.forward(g, h, &[], &mut none)?;
        }
        let h = self.dec_norm.forward(g, h)?;
        self.head.forward(g, h)
    }

    /// Patches of the subband map (differentiable) and the reconstruction
    /// target: their detached copy divided by the map's RMS, so the
    /// front-end cannot shrink or inflate its own target.
    fn patches(&self, g: &mut Graph, x: &Tensor) -> ModelResult<(Var, Var)> {
        let spec = self.spec(g, x)?;
        let p = patchify_var(g, spec, self.config.patch)?;
        let t = g.detach(p);
        let v = g.value(t);
        let rms = (v.data().iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        let t = if rms > TARGET_RMS_FLOOR { g.scale(t, 1.0 / rms)? } else { t };
        Ok((p, t))
    }

    /// Plan for a sample's patches under `mask`.
    pub fn plan_for(&self, g: &Graph, target: Var, mask: MaskSettings) -> ModelResult<MaskPlan> {
        let grid = self.grid_of(g, target);
        Ok(blend_and_select(&grid.energies(), mask.ratio, mask.blend, mask.seed)?)
    }

    fn grid_of(&self, g: &Graph, patches: Var) -> PatchGrid {
        let (rows, n, w) = (self.config.rows(), self.config.patches_per_row(), self.config.patch);
        PatchGrid { rows, per_row: n, width: w, length: self.config.window, patches: g.value(patches).clone() }
    }

    /// Masked reconstruction of one window. With `plan` given, it is used in
    /// place of a freshly drawn one.
    pub fn reconstruct(
        &self,
        g: &mut Graph,
        x: &Tensor,
        mask: MaskSettings,
        plan: Option<&MaskPlan>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> ModelResult<Reconstruction> {
        let (p, target) = self.patches(g, x)?;
        let plan = match plan {
            Some(p) => p.clone(),
            None => self.plan_for(g, target, mask)?,
        };
        let tokens = self.embed.embed(g, p, &plan)?;
        let latents = self.encode(g, &tokens, rng)?;
        let recon = self.decode(g, latents)?;
        let loss = pretrain_loss(g, recon, target, &plan)?;
        Ok(Reconstruction { loss, recon, target, plan })
    }

    /// Masked reconstruction scored against a fixed `[R·N, w]` target
    /// instead of the window's own (stop-gradient) patches.
    pub fn reconstruct_against(
        &self,
        g: &mut Graph,
        x: &Tensor,
        target: &Tensor,
        plan: &MaskPlan,
        rng: Option<&mut ChaCha8Rng>,
    ) -> ModelResult<Reconstruction> {
        let (p, _) = self.patches(g, x)?;
        let target = g.constant(target.clone());
        let tokens = self.embed.embed(g, p, plan)?;
        let latents = self.encode(g, &tokens, rng)?;
        let recon = self.decode(g, latents)?;
        let loss = pretrain_loss(g, recon, target, plan)?;
        Ok(Reconstruction { loss, recon, target, plan: plan.clone() })
    }

    /// Encoder output over the full, unmasked token sequence.
    pub fn features(&self, g: &mut Graph, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> ModelResult<Var> {
        let (p, _) = self.patches(g, x)?;
        let plan = MaskPlan::keep_all(self.config.rows(), self.config.patches_per_row());
        let tokens = self.embed.embed(g, p, &plan)?;
        self.encode(g, &tokens, rng)
    }

    /// Parameters in depth order for layer-wise learning-rate decay:
    /// `(depth index, ids)`, where the front-end and embeddings are depth 0
    /// encoder block `i` is depth `i + 1` and the final norm sits at
    /// `layers + 1` together with any task head.
    pub fn encoder_depths(&self, store: &ParamStore) -> Vec<(usize, Vec<ParamId>)> {
        let mut out = Vec::new();
        let with = |p: &str| store.iter().filter(|(_, q)| q.name.starts_with(p)).map(|(id, _)| id).collect::<Vec<_>>();
        let mut base = with("encoder.frontend.");
        base.extend(with("encoder.embed."));
        out.push((0, base));
        for i in 0..self.encoder.len() {
            out.push((i + 1, with(&format!("encoder.block{i}."))));
        }
        out.push((self.encoder.len() + 1, with("encoder.norm.")));
        out
    }
}

/// Mean Smooth-L1 over the elements of masked patches only.
pub fn pretrain_loss(g: &mut Graph, recon: Var, target: Var, plan: &MaskPlan) -> ModelResult<Var> {
    if g.shape(recon) != g.shape(target) || g.shape(recon)[0] != plan.mask.len() {
        return Err(ModelError::Invalid(format!(
            "reconstruction {:?}, target {:?}, plan of {}",
            g.shape(recon),
            g.shape(target),
            plan.mask.len()
        )));
    }
    let masked = plan.masked_indices();
    if masked.is_empty() {
        return Err(ModelError::Invalid("no masked patches".into()));
    }
    let r = g.gather_rows(recon, &masked)?;
    let t = g.gather_rows(target, &masked)?;
    Ok(g.smooth_l1(r, t)?)
}

/// Per-group parameter totals.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub frontend: usize,
    pub embed: usize,
    pub encoder_blocks: usize,
    pub decoder: usize,
    pub total: usize,
}

impl ParamReport {
    pub fn of(store: &ParamStore) -> Self {
        let n = |p: &str| store.num_elements_with_prefix(p);
        Self {
            frontend: n("encoder.frontend."),
            embed: n("encoder.embed."),
            encoder_blocks: n("encoder.block") + n("encoder.norm."),
            decoder: n("decoder."),
            total: store.num_elements(),
        }
    }

    /// Encoder-side total (front-end, embeddings, Transformer blocks).
    pub fn encoder(&self) -> usize {
        self.frontend + self.embed + self.encoder_blocks
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frontend {} | embed {} | encoder blocks {} | decoder {} | encoder total {} | total {}",
            self.frontend,
            self.embed,
            self.encoder_blocks,
            self.decoder,
            self.encoder(),
            self.total
        )
    }
}
