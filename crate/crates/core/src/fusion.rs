//! Classification heads and softmax-weighted late fusion over frozen branches.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::kernel::{Graph, KernelError, ParamId, ParamStore, Tensor, Var};
use crate::model::{Linear, Model, ModelError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("{0}")]
    Invalid(String),
    #[error("frozen parameter {0} received a gradient")]
    FrozenGradient(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("external logits: {0}")]
    Io(String),
}

impl FusionError {
    pub fn is_numeric(&self) -> bool {
        match self {
            FusionError::Kernel(k) => matches!(k, KernelError::NonFinite { .. }),
            FusionError::Model(m) => m.is_numeric(),
            _ => false,
        }
    }
}

pub type FusionResult<T> = Result<T, FusionError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl HeadConfig {
    /// Hidden width `2·dim`; `hidden = 0` elsewhere means the same.
    pub fn new(dim: usize, classes: usize) -> Self {
        Self { dim, hidden: 2 * dim, classes }
    }

    pub fn with_hidden(dim: usize, hidden: usize, classes: usize) -> Self {
        Self { dim, hidden: if hidden == 0 { 2 * dim } else { hidden }, classes }
    }
}

/// Mean pool, then affine, GELU, affine.
#[derive(Clone, Debug)]
pub struct ClassHead {
    pub config: HeadConfig,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ClassHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: HeadConfig, rng: &mut R) -> FusionResult<Self> {
        if config.classes < 2 {
            return Err(FusionError::Invalid(format!("need at least 2 classes, got {}", config.classes)));
        }
        Ok(Self {
            config,
            fc1: Linear::new(store, &format!("{prefix}fc1."), config.dim, config.hidden, rng)?,
            fc2: Linear::new(store, &format!("{prefix}fc2."), config.hidden, config.classes, rng)?,
        })
    }

    /// `[B, D]` pooled features to `[B, n]` logits.
    pub fn classify(&self, g: &mut Graph, pooled: Var) -> FusionResult<Var> {
        let h = self.fc1.forward(g, pooled)?;
        let h = g.gelu(h)?;
        Ok(self.fc2.forward(g, h)?)
    }

    /// `[tokens, D]` latents to `[1, n]` logits.
    pub fn pool_and_classify(&self, g: &mut Graph, latents: Var) -> FusionResult<Var> {
        let p = mean_pool(g, latents)?;
        self.classify(g, p)
    }
}

/// Mean over rows of `[N, D]`, as `[1, D]`.
pub fn mean_pool(g: &mut Graph, latents: Var) -> FusionResult<Var> {
    let s = g.shape(latents).to_vec();
    if s.len() != 2 || s[0] == 0 {
        return Err(FusionError::Invalid(format!("cannot pool latents of shape {s:?}")));
    }
    let t = g.transpose(latents)?;
    let m = g.mean_last(t)?;
    Ok(g.reshape(m, &[1, s[1]])?)
}

/// Smoothed one-hot rows: `1 − ε + ε/n` on the label, `ε/n` elsewhere.
pub fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Tensor {
    let mut t = Tensor::full(&[labels.len(), classes], smoothing / classes as f64);
    for (i, &y) in labels.iter().enumerate() {
        t.row_mut(i)[y] += 1.0 - smoothing;
    }
    t
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `Σ_m softmax(fusion_logits)_m · z_m`.
pub fn fuse_logits(z: &[Vec<f64>], fusion_logits: &[f64]) -> FusionResult<Vec<f64>> {
    if z.is_empty() || z.len() != fusion_logits.len() {
        return Err(FusionError::Invalid(format!("{} logit vectors for {} fusion weights", z.len(), fusion_logits.len())));
    }
    let n = z[0].len();
    if z.iter().any(|v| v.len() != n) {
        return Err(FusionError::Invalid("logit vectors differ in length".into()));
    }
    let alpha = softmax(fusion_logits);
    let mut out = vec![0.0; n];
    for (a, zm) in alpha.iter().zip(z) {
        for (o, v) in out.iter_mut().zip(zm) {
            *o += a * v;
        }
    }
    Ok(out)
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) }).0
}

/// One free logit per modality; weights are their softmax.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub names: Vec<String>,
    pub logits: ParamId,
}

impl FusionState {
    pub fn new(store: &mut ParamStore, prefix: &str, names: Vec<String>) -> FusionResult<Self> {
        if names.is_empty() {
            return Err(FusionError::Invalid("no modalities".into()));
        }
        let logits = store.add(format!("{prefix}logits"), Tensor::zeros(&[1, names.len()]))?;
        store.get_mut(logits).decay = false;
        Ok(Self { names, logits })
    }

    pub fn alpha(&self, store: &ParamStore) -> Vec<f64> {
        softmax(store.value(self.logits).data())
    }

    /// Fuses per-modality `[B, n]` logits into `[B, n]`.
    pub fn fuse(&self, g: &mut Graph, z: &[Var]) -> FusionResult<Var> {
        if z.len() != self.names.len() {
            return Err(FusionError::Invalid(format!("{} branches for {} modalities", z.len(), self.names.len())));
        }
        let shape = g.shape(z[0]).to_vec();
        if z.iter().any(|&v| g.shape(v) != shape.as_slice()) {
            return Err(FusionError::Invalid("branch logits differ in shape".into()));
        }
        let flat = shape.iter().product::<usize>();
        let rows = z.iter().map(|&v| g.reshape(v, &[1, flat])).collect::<Result<Vec<_>, _>>()?;
        let stacked = g.concat_rows(&rows)?;
        let w = g.param(self.logits);
        let alpha = g.softmax(w)?;
        let fused = g.matmul(alpha, stacked)?;
        Ok(g.reshape(fused, &shape)?)
    }
}

/// Per-sample inputs of one fusion branch.
#[derive(Clone, Debug)]
pub enum Branch {
    /// Pooled features `[S, D]` of a frozen encoder, fed to a trainable head.
    Features { name: String, features: Tensor },
    /// Precomputed logits `[S, n]` read from a file.
    External { name: String, logits: Tensor },
}

impl Branch {
    pub fn name(&self) -> &str {
        match self {
            Branch::Features { name, .. } | Branch::External { name, .. } => name,
        }
    }

    pub fn samples(&self) -> usize {
        match self {
            Branch::Features { features: t, .. } | Branch::External { logits: t, .. } => t.rows(),
        }
    }
}

/// Mean-pooled eval-mode encoder features of every window, `[S, D]`.
pub fn pooled_features(model: &Model, store: &ParamStore, windows: &[Tensor]) -> FusionResult<Tensor> {
    let d = model.config.encoder.dim;
    let mut data = Vec::with_capacity(windows.len() * d);
    for x in windows {
        let mut g = Graph::new(store);
        let lat = model.features(&mut g, x, None)?;
        let p = mean_pool(&mut g, lat)?;
        data.extend_from_slice(g.value(p).data());
    }
    Ok(Tensor::new(vec![windows.len(), d], data)?)
}

/// Trainable heads plus fusion weights over a fixed set of branches.
#[derive(Clone, Debug)]
pub struct Probe {
    pub branches: Vec<Branch>,
    pub heads: Vec<Option<ClassHead>>,
    pub fusion: FusionState,
    pub classes: usize,
}

impl Probe {
    pub fn new(store: &mut ParamStore, branches: Vec<Branch>, classes: usize, hidden: usize, rng: &mut ChaCha8Rng) -> FusionResult<Self> {
        let s = branches.first().map(Branch::samples).ok_or_else(|| FusionError::Invalid("no branches".into()))?;
        if branches.iter().any(|b| b.samples() != s) {
            return Err(FusionError::Invalid("branches cover different sample counts".into()));
        }
        let mut heads = Vec::new();
        for (m, b) in branches.iter().enumerate() {
            heads.push(match b {
                Branch::Features { features, .. } => {
                    let cfg = HeadConfig::with_hidden(features.cols(), hidden, classes);
                    Some(ClassHead::new(store, &format!("probe.head{m}."), cfg, rng)?)
                }
                Branch::External { logits, .. } => {
                    if logits.cols() != classes {
                        return Err(FusionError::Invalid(format!("{}: {} logits for {classes} classes", b.name(), logits.cols())));
                    }
                    None
                }
            });
        }
        let names = branches.iter().map(|b| b.name().to_string()).collect();
        let fusion = FusionState::new(store, "probe.fusion.", names)?;
        Ok(Self { branches, heads, fusion, classes })
    }

    pub fn samples(&self) -> usize {
        self.branches[0].samples()
    }

    /// Fused `[B, n]` logits for the listed samples.
    pub fn logits(&self, g: &mut Graph, idx: &[usize]) -> FusionResult<Var> {
        let mut z = Vec::new();
        for (b, head) in self.branches.iter().zip(&self.heads) {
            match (b, head) {
                (Branch::Features { features, .. }, Some(h)) => {
                    let x = g.constant(select_rows(features, idx));
                    z.push(h.classify(g, x)?);
                }
                (Branch::External { logits, .. }, _) => z.push(g.constant(select_rows(logits, idx))),
                _ => unreachable!("feature branch without head"),
            }
        }
        self.fusion.fuse(g, &z)
    }

    /// Fused logits of one sample as plain numbers.
    pub fn predict(&self, store: &ParamStore, idx: &[usize]) -> FusionResult<Tensor> {
        let mut g = Graph::new(store);
        let z = self.logits(&mut g, idx)?;
        Ok(g.value(z).clone())
    }

    /// Cross-entropy of the fused prediction; gradients are merged into
    /// `store`. Any gradient reaching a non-trainable parameter is an error.
    pub fn probe_step(&self, store: &mut ParamStore, idx: &[usize], labels: &[usize]) -> FusionResult<f64> {
        let targets = smoothed_targets(&idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(), self.classes, 0.0);
        let grads = {
            let mut g = Graph::new(store);
            let z = self.logits(&mut g, idx)?;
            let loss = g.cross_entropy(z, &targets)?;
            (g.scalar(loss), g.backward(loss)?)
        };
        for (id, p) in store.iter() {
            if !p.trainable && grads.1.param(id).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)) {
                return Err(FusionError::FrozenGradient(p.name.clone()));
            }
        }
        store.accumulate(&grads.1);
        Ok(grads.0)
    }

    pub fn accuracy(&self, store: &ParamStore, idx: &[usize], labels: &[usize]) -> FusionResult<f64> {
        if idx.is_empty() {
            return Ok(0.0);
        }
        let z = self.predict(store, idx)?;
        let hits = idx.iter().enumerate().filter(|&(r, &i)| argmax(z.row(r)) == labels[i]).count();
        Ok(hits as f64 / idx.len() as f64)
    }
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), c], data).expect("row selection")
}

/// Reads `sample_id,z_0,...,z_{n-1}` rows (an optional header starting with
/// a non-numeric second field is skipped).
pub fn read_external_logits(path: &Path) -> FusionResult<(Vec<String>, Tensor)> {
    let text = fs::read_to_string(path).map_err(|e| FusionError::Io(format!("{}: {e}", path.display())))?;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(FusionError::Io(format!("line {}: expected sample_id and logits", i + 1)));
        }
        let vals: Result<Vec<f64>, _> = fields[1..].iter().map(|f| f.parse::<f64>()).collect();
        let vals = match vals {
            Ok(v) => v,
            Err(_) if ids.is_empty() && data.is_empty() && width.is_none() => {
                width = Some(fields.len() - 1);
                continue;
            }
            Err(e) => return Err(FusionError::Io(format!("line {}: {e}", i + 1))),
        };
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(FusionError::Io(format!("line {}: expected {} logits, found {}", i + 1, width.unwrap(), vals.len())));
        }
        ids.push(fields[0].to_string());
        data.extend(vals);
    }
    let n = width.ok_or_else(|| FusionError::Io("no rows".into()))?;
    if ids.is_empty() {
        return Err(FusionError::Io("no rows".into()));
    }
    Ok((ids, Tensor::new(vec![data.len() / n, n], data)?))
}

pub fn write_external_logits(path: &Path, ids: &[String], logits: &Tensor) -> FusionResult<()> {
    let mut s = String::from("sample_id");
    for j in 0..logits.cols() {
        let _ = write!(s, ",z_{j}");
    }
    s.push('\n');
    for (i, id) in ids.iter().enumerate() {
        s.push_str(id);
        for v in logits.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| FusionError::Io(format!("{}: {e}", path.display())))
}
