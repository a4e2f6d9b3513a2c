//! AdamW, warmup-cosine schedule, gradient clipping and the training loops.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::fusion::{argmax, smoothed_targets, ClassHead, FusionError, Probe};
use crate::kernel::{precision, set_precision, Graph, Gradients, KernelError, ParamStore, Tensor, Var};
use crate::model::{MaskSettings, Model, ModelError};
use crate::signal::WindowBatch;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("metrics output: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Whether the failure is a numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            TrainError::NonFinite(_) => true,
            TrainError::Kernel(k) => matches!(k, KernelError::NonFinite { .. }),
            TrainError::Model(m) => m.is_numeric(),
            TrainError::Fusion(f) => f.is_numeric(),
            _ => false,
        }
    }
}

pub type TrainResult<T> = Result<T, TrainError>;

/// Linear warmup then cosine decay, indexed by fractional epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_epochs: f64,
    pub epochs: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_floor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { warmup_epochs: 10.0, epochs: 50.0, lr_start: 5e-7, lr_peak: 5e-5, lr_floor: 1e-6 }
    }
}

impl Schedule {
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let e = epoch.clamp(0.0, self.epochs);
        if e < self.warmup_epochs {
            if e == 0.0 {
                return self.lr_start;
            }
            return self.lr_start + (self.lr_peak - self.lr_start) * e / self.warmup_epochs;
        }
        let span = self.epochs - self.warmup_epochs;
        let t = if span > 0.0 { (e - self.warmup_epochs) / span } else { 1.0 };
        if t <= 0.0 {
            self.lr_peak
        } else if t >= 1.0 {
            self.lr_floor
        } else {
            self.lr_floor + (self.lr_peak - self.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: HashMap<usize, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, step: 0, moments: HashMap::new() }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    /// First and second moments of a parameter, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<&(Tensor, Tensor)> {
        self.moments.get(&index)
    }

    /// One update of every trainable parameter at `lr · lr_scale`. Fails
    /// without touching anything if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> TrainResult<()> {
        for (_, p) in store.iter() {
            if p.trainable && !p.grad.is_finite() {
                return Err(TrainError::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(i)
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let lr_p = lr * p.lr_scale;
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let (w, g) = (p.value.data_mut(), p.grad.data());
            for j in 0..w.len() {
                let mj = &mut m.data_mut()[j];
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * g[j];
                let vj = &mut v.data_mut()[j];
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m.data()[j] / c1;
                let vhat = v.data()[j] / c2;
                w[j] -= lr_p * (mhat / (vhat.sqrt() + self.eps) + wd * w[j]);
            }
        }
        Ok(())
    }
}

/// Rescales all trainable gradients so their joint L2 norm is at most
/// `max_norm`; returns the factor applied.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.global_grad_norm();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let s = max_norm / norm;
    for p in store.iter_mut().filter(|p| p.trainable) {
        p.grad.scale_assign(s);
    }
    s
}

/// Errors if any trainable parameter holds a non-finite value.
pub fn check_finite(store: &ParamStore) -> TrainResult<()> {
    match store.iter().find(|(_, p)| p.trainable && !p.value.is_finite()) {
        Some((_, p)) => Err(TrainError::NonFinite(format!("parameter {}", p.name))),
        None => Ok(()),
    }
}

/// Splits a corpus into `[C, T]` tensors.
pub fn windows_of(batch: &WindowBatch) -> Vec<Tensor> {
    (0..batch.len())
        .map(|i| Tensor::new(vec![batch.channels, batch.window], batch.window_data(i).to_vec()).expect("window geometry"))
        .collect()
}

/// Windows with class labels.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub windows: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSet {
    pub fn new(windows: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> TrainResult<Self> {
        if windows.len() != labels.len() {
            return Err(TrainError::Invalid(format!("{} windows but {} labels", windows.len(), labels.len())));
        }
        if classes < 2 {
            return Err(TrainError::Invalid(format!("need at least 2 classes, got {classes}")));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(TrainError::Invalid(format!("label {y} outside {classes} classes")));
        }
        Ok(Self { windows, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            windows: idx.iter().map(|&i| self.windows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Seeded stratified split; the second part holds about `fraction` of
    /// each class.
    pub fn split(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let (a, b) = stratified_split(&self.labels, self.classes, fraction, seed);
        (self.subset(&a), self.subset(&b))
    }
}

/// Index form of [`LabeledSet::split`]: `(kept, held out)`, each ascending.
pub fn stratified_split(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let k = (idx.len() as f64 * fraction).round() as usize;
        b.extend_from_slice(&idx[..k]);
        a.extend_from_slice(&idx[k..]);
    }
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

/// One metrics line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    pub loss: f64,
    pub val_acc: Option<f64>,
}

/// Append-only `step,epoch,lr,loss[,val_acc]` CSV, optionally mirrored to a
/// writer as rows arrive.
pub struct Metrics<'a> {
    pub rows: Vec<MetricsRow>,
    out: Option<&'a mut dyn Write>,
    with_val: bool,
}

impl<'a> Metrics<'a> {
    pub fn new(out: Option<&'a mut dyn Write>, echo: &str, with_val: bool) -> TrainResult<Self> {
        let mut m = Self { rows: Vec::new(), out, with_val };
        if let Some(w) = m.out.as_mut() {
            w.write_all(echo.as_bytes())?;
            writeln!(w, "step,epoch,lr,loss{}", if with_val { ",val_acc" } else { "" })?;
        }
        Ok(m)
    }

    pub fn memory() -> Self {
        Self { rows: Vec::new(), out: None, with_val: false }
    }

    pub fn push(&mut self, row: MetricsRow) -> TrainResult<()> {
        if let Some(w) = self.out.as_mut() {
            write!(w, "{},{:.6},{:.6e},{:.8}", row.step, row.epoch, row.lr, row.loss)?;
            if self.with_val {
                match row.val_acc {
                    Some(a) => write!(w, ",{a:.6}")?,
                    None => write!(w, ",")?,
                }
            }
            writeln!(w)?;
        }
        self.rows.push(row);
        Ok(())
    }
}

/// Gradients and summed loss of `f` over `items`, split into contiguous
/// chunks across `threads` workers and merged in chunk order.
fn batch_gradients<F>(store: &ParamStore, items: &[usize], threads: usize, f: F) -> TrainResult<(Option<Gradients>, f64)>
where
    F: Fn(&mut Graph, usize) -> TrainResult<Var> + Sync,
{
    let run = |chunk: &[usize]| -> TrainResult<(Option<Gradients>, f64)> {
        let mut acc: Option<Gradients> = None;
        let mut total = 0.0;
        for &i in chunk {
            let mut g = Graph::new(store);
            let loss = f(&mut g, i)?;
            total += g.scalar(loss);
            let grads = g.backward(loss)?;
            match acc.as_mut() {
                Some(a) => a.merge(&grads),
                None => acc = Some(grads),
            }
        }
        Ok((acc, total))
    };
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return run(items);
    }
    let size = items.len().div_ceil(threads);
    let prec = precision();
    let parts: Vec<TrainResult<(Option<Gradients>, f64)>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(size)
            .map(|chunk| {
                let run = &run;
                s.spawn(move || {
                    set_precision(prec);
                    run(chunk)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut acc: Option<Gradients> = None;
    let mut total = 0.0;
    for part in parts {
        let (g, l) = part?;
        total += l;
        if let Some(g) = g {
            match acc.as_mut() {
                Some(a) => a.merge(&g),
                None => acc = Some(g),
            }
        }
    }
    Ok((acc, total))
}

fn mix(seed: u64, n: u64) -> u64 {
    let mut z = seed ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Drop-path stream of one training sample.
fn sample_rng(seed: u64, position: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(mix(seed, 0xD20F));
    r.set_stream(position);
    r
}

/// Knobs of the pretraining loop.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub batch: usize,
    pub accumulate: usize,
    pub schedule: Schedule,
    pub max_steps: usize,
    pub mask_ratio: f64,
    pub blend: f64,
    pub clip: f64,
    pub seed: u64,
    pub threads: usize,
}

impl PretrainOptions {
    /// With `ablate_fgm`, patch energies are ignored in mask selection.
    pub fn from_config(cfg: &RunConfig, ablate_fgm: bool) -> Self {
        Self {
            batch: cfg.batch,
            accumulate: cfg.accumulate,
            schedule: cfg.pretrain_schedule(),
            max_steps: cfg.max_steps,
            mask_ratio: cfg.mask_ratio,
            blend: if ablate_fgm { 0.0 } else { cfg.importance },
            clip: cfg.clip,
            seed: cfg.seed,
            threads: cfg.threads,
        }
    }
}

/// Deterministic per-epoch shuffles of `n` items.
struct Shuffler {
    n: usize,
    seed: u64,
    cache: Option<(usize, Vec<usize>)>,
}

impl Shuffler {
    fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, cache: None }
    }

    fn at(&mut self, position: usize) -> usize {
        let (epoch, within) = (position / self.n, position % self.n);
        if self.cache.as_ref().map(|c| c.0) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.n).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, epoch as u64)));
            self.cache = Some((epoch, idx));
        }
        self.cache.as_ref().unwrap().1[within]
    }
}

/// Masked-reconstruction pretraining. Each optimizer step consumes
/// `batch · accumulate` windows; losses are averaged over them.
pub fn pretrain(
    model: &Model,
    store: &mut ParamStore,
    data: &[Tensor],
    opts: &PretrainOptions,
    metrics: &mut Metrics,
) -> TrainResult<AdamW> {
    pretrain_with(model, store, data, opts, metrics, AdamW::new(0.9, 0.98, 1e-8, 0.01))
}

pub fn pretrain_with(
    model: &Model,
    store: &mut ParamStore,
    data: &[Tensor],
    opts: &PretrainOptions,
    metrics: &mut Metrics,
    mut opt: AdamW,
) -> TrainResult<AdamW> {
    if data.is_empty() {
        return Err(TrainError::Invalid("empty pretraining corpus".into()));
    }
    if opts.batch == 0 || opts.accumulate == 0 {
        return Err(TrainError::Invalid("batch and accumulate must be positive".into()));
    }
    let per_step = opts.batch * opts.accumulate;
    let n = data.len();
    let mut total = (opts.schedule.epochs * n as f64 / per_step as f64).ceil() as usize;
    if opts.max_steps > 0 {
        total = total.min(opts.max_steps);
    }
    let mut order = Shuffler::new(n, opts.seed);
    let mask_seed = mix(opts.seed, 0x3A5C);
    for step in 0..total {
        let start = step * per_step;
        let epoch = start as f64 / n as f64;
        store.zero_grad();
        let mut loss_sum = 0.0;
        for micro in 0..opts.accumulate {
            let positions: Vec<usize> = (0..opts.batch).map(|j| start + micro * opts.batch + j).collect();
            let samples: Vec<usize> = positions.iter().map(|&p| order.at(p)).collect();
            let scale = 1.0 / per_step as f64;
            let (grads, l) = batch_gradients(store, &positions, opts.threads, |g, p| {
                let x = &data[samples[p - positions[0]]];
                let mask = MaskSettings { ratio: opts.mask_ratio, blend: opts.blend, seed: mix(mask_seed, p as u64) };
                let mut rng = sample_rng(opts.seed, p as u64);
                let r = model.reconstruct(g, x, mask, None, Some(&mut rng))?;
                Ok(g.scale(r.loss, scale)?)
            })?;
            loss_sum += l;
            if let Some(gr) = grads {
                store.accumulate(&gr);
            }
        }
        clip_global_norm(store, opts.clip);
        let lr = opts.schedule.lr_at(epoch);
        opt.step(store, lr)?;
        check_finite(store)?;
        metrics.push(MetricsRow { step: step + 1, epoch, lr, loss: loss_sum, val_acc: None })?;
    }
    Ok(opt)
}

/// Sets `lr_scale = decay^(max_depth − depth)` over the encoder and the
/// head, which shares the deepest slot with the final encoder norm.
pub fn apply_layer_decay(model: &Model, head: &ClassHead, store: &mut ParamStore, decay: f64) {
    let groups = model.encoder_depths(store);
    let max = groups.iter().map(|g| g.0).max().unwrap_or(0);
    for (depth, ids) in groups {
        for id in ids {
            store.get_mut(id).lr_scale = decay.powi((max - depth) as i32);
        }
    }
    for lin in [&head.fc1, &head.fc2] {
        store.get_mut(lin.w).lr_scale = 1.0;
        store.get_mut(lin.b).lr_scale = 1.0;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOptions {
    pub batch: usize,
    pub schedule: Schedule,
    pub patience: usize,
    pub layer_decay: f64,
    pub smoothing: f64,
    pub clip: f64,
    pub seed: u64,
    pub threads: usize,
    /// Stop after this many optimizer steps (0 = no cap).
    pub max_steps: usize,
}

impl FinetuneOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            batch: cfg.batch,
            schedule: cfg.finetune_schedule(),
            patience: cfg.patience,
            layer_decay: cfg.layer_decay,
            smoothing: cfg.label_smoothing,
            clip: cfg.clip,
            seed: cfg.seed,
            threads: cfg.threads,
            max_steps: cfg.max_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_acc: f64,
}

/// Eval-mode logits `[1, n]` of one window.
pub fn classify(model: &Model, head: &ClassHead, g: &mut Graph, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> TrainResult<Var> {
    let lat = model.features(g, x, rng)?;
    Ok(head.pool_and_classify(g, lat)?)
}

/// Mean unsmoothed cross-entropy and accuracy over a labeled set.
pub fn evaluate(model: &Model, head: &ClassHead, store: &ParamStore, set: &LabeledSet) -> TrainResult<(f64, f64)> {
    if set.is_empty() {
        return Err(TrainError::Invalid("empty evaluation set".into()));
    }
    let (mut loss, mut hits) = (0.0, 0usize);
    for (x, &y) in set.windows.iter().zip(&set.labels) {
        let mut g = Graph::new(store);
        let z = classify(model, head, &mut g, x, None)?;
        let l = g.cross_entropy(z, &smoothed_targets(&[y], set.classes, 0.0))?;
        loss += g.scalar(l);
        hits += (argmax(g.value(z).data()) == y) as usize;
    }
    Ok((loss / set.len() as f64, hits as f64 / set.len() as f64))
}

/// End-to-end supervised training of encoder and head with layer-wise lr
/// decay and label smoothing; early-stopped on validation loss, with the
/// best parameters restored on return. Decoder parameters are frozen.
/// One metrics row is emitted per epoch, after validation.
pub fn finetune(
    model: &Model,
    head: &ClassHead,
    store: &mut ParamStore,
    train: &LabeledSet,
    val: &LabeledSet,
    opts: &FinetuneOptions,
    metrics: &mut Metrics,
    mut opt: AdamW,
) -> TrainResult<FinetuneOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Invalid("empty training or validation set".into()));
    }
    store.set_trainable_by_prefix("decoder.", false);
    apply_layer_decay(model, head, store, opts.layer_decay);
    let n = train.len();
    let steps_per_epoch = n.div_ceil(opts.batch);
    let max_epochs = opts.schedule.epochs.ceil() as usize;
    let mut best = (f64::INFINITY, 0.0, 0usize);
    let mut snapshot: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
    let mut stale = 0;
    let mut step = 0;
    let mut epochs_run = 0;
    for epoch in 0..max_epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(opts.seed ^ 0xF17E, epoch as u64)));
        epochs_run = epoch + 1;
        let (mut epoch_loss, mut lr) = (0.0, 0.0);
        let mut capped = false;
        for (b, chunk) in idx.chunks(opts.batch).enumerate() {
            let frac = epoch as f64 + b as f64 / steps_per_epoch as f64;
            let scale = 1.0 / chunk.len() as f64;
            store.zero_grad();
            let base = step * opts.batch;
            let (grads, l) = batch_gradients(store, chunk, opts.threads, |g, i| {
                let pos = (base + chunk.iter().position(|&c| c == i).unwrap_or(0)) as u64;
                let mut rng = sample_rng(opts.seed ^ 0xF17E, pos);
                let z = classify(model, head, g, &train.windows[i], Some(&mut rng))?;
                let t = smoothed_targets(&[train.labels[i]], train.classes, opts.smoothing);
                let loss = g.cross_entropy(z, &t)?;
                Ok(g.scale(loss, scale)?)
            })?;
            if let Some(gr) = grads {
                store.accumulate(&gr);
            }
            clip_global_norm(store, opts.clip);
            lr = opts.schedule.lr_at(frac);
            opt.step(store, lr)?;
            check_finite(store)?;
            step += 1;
            epoch_loss += l * chunk.len() as f64;
            if opts.max_steps > 0 && step >= opts.max_steps {
                capped = true;
                break;
            }
        }
        let (vl, va) = evaluate(model, head, store, val)?;
        metrics.push(MetricsRow { step, epoch: (epoch + 1) as f64, lr, loss: epoch_loss / n as f64, val_acc: Some(va) })?;
        if vl < best.0 {
            best = (vl, va, epoch + 1);
            snapshot = store.iter().map(|(_, p)| p.value.clone()).collect();
            stale = 0;
        } else {
            stale += 1;
        }
        if capped || stale >= opts.patience {
            break;
        }
    }
    for (p, v) in store.iter_mut().zip(snapshot) {
        p.value = v;
    }
    Ok(FinetuneOutcome { epochs_run, best_epoch: best.2, best_val_loss: best.0, best_val_acc: best.1 })
}

/// Knobs of linear probing over cached branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl ProbeOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self { epochs: cfg.probe_epochs.ceil() as usize, lr: cfg.probe_lr, batch: cfg.batch, seed: cfg.seed }
    }
}

/// Trains probe heads and fusion logits on the samples `idx` at a constant
/// lr; returns the mean loss of each epoch.
pub fn train_probe(probe: &Probe, store: &mut ParamStore, idx: &[usize], labels: &[usize], opts: &ProbeOptions, mut opt: AdamW) -> TrainResult<Vec<f64>> {
    if idx.is_empty() || opts.batch == 0 {
        return Err(TrainError::Invalid("probe needs samples and a positive batch".into()));
    }
    let mut order = idx.to_vec();
    let mut losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(opts.seed ^ 0x9B0E, epoch as u64)));
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch) {
            store.zero_grad();
            total += probe.probe_step(store, chunk, labels)? * chunk.len() as f64;
            opt.step(store, opts.lr)?;
            check_finite(store)?;
        }
        losses.push(total / idx.len() as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffler_is_a_permutation_per_epoch() {
        let mut s = Shuffler::new(7, 3);
        let mut a: Vec<usize> = (0..7).map(|p| s.at(p)).collect();
        let b: Vec<usize> = (7..14).map(|p| s.at(p)).collect();
        assert_ne!(a, b);
        a.sort();
        assert_eq!(a, (0..7).collect::<Vec<_>>());
    }
}
