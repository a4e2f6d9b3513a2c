use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavemae::checkpoint::Checkpoint;
use wavemae::config::RunConfig;
use wavemae::fusion::{pooled_features, read_external_logits, softmax, Branch, ClassHead, HeadConfig, Probe};
use wavemae::kernel::{set_precision, Graph, ParamStore, Precision};
use wavemae::model::{MaskSettings, Model};
use wavemae::signal::{self, read_container, write_container, Modality, Preset, WindowBatch};
use wavemae::synth::{labels_path, read_labels, write_labels, SynthSpec};
use wavemae::train::{
    evaluate, finetune as run_finetune, pretrain_with, train_probe, windows_of, AdamW, FinetuneOptions, LabeledSet, Metrics,
    PretrainOptions, ProbeOptions, stratified_split,
};

use crate::error::CliError;
use crate::Global;

type Result<T> = std::result::Result<T, CliError>;

/// Config from `--config`, else `fallback` text, else defaults; then the
/// global overrides. Also selects the arithmetic mode.
fn config(g: &Global, fallback: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match (&g.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(text)) => RunConfig::parse(text)?,
        (None, None) => RunConfig::default(),
    };
    let mut errors = Vec::new();
    for kv in &g.set {
        match kv.split_once('=') {
            Some((k, v)) => {
                if let Err(e) = cfg.set(k.trim(), v.trim()) {
                    errors.push(CliError::from(e).to_string());
                }
            }
            None => errors.push(format!("--set {kv:?} is not KEY=VALUE")),
        }
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    if g.f64 {
        cfg.f64_mode = true;
    }
    errors.extend(cfg.problems());
    if !errors.is_empty() {
        return Err(CliError::Config(errors.join("; ")));
    }
    set_precision(if cfg.f64_mode { Precision::F64 } else { Precision::F32 });
    Ok(cfg)
}

fn metrics_sink(path: Option<&Path>) -> Result<Option<BufWriter<File>>> {
    Ok(match path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    })
}

fn check_geometry(cfg: &RunConfig, w: &WindowBatch, what: &Path) -> Result<()> {
    if w.channels != cfg.channels || w.window != cfg.window {
        return Err(CliError::data(format!(
            "{}: windows are {}x{}, the model expects {}x{}",
            what.display(),
            w.channels,
            w.window,
            cfg.channels,
            cfg.window
        )));
    }
    Ok(())
}

fn build_model(cfg: &RunConfig) -> Result<(Model, ParamStore, ChaCha8Rng)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::new(&mut store, cfg.model_config(), &mut rng)?;
    Ok((model, store, rng))
}

fn labelled(path: &Path) -> Result<LabeledSet> {
    let (_, w) = read_container(path)?;
    let lp = labels_path(path);
    let (labels, classes) = read_labels(&lp).map_err(|e| CliError::data(format!("{}: {e}", lp.display())))?;
    Ok(LabeledSet::new(windows_of(&w), labels, classes)?)
}

fn loaded(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

// ---- synth ----------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Geometry preset: synth, emg or ecg.
    #[arg(long, default_value = "synth")]
    pub modality: Modality,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// White-noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// 50 Hz interference amplitude.
    #[arg(long, default_value_t = 0.0)]
    pub line_noise: f64,
    /// Amplitude of the class-independent stimulus-locked tone.
    #[arg(long)]
    pub locked: Option<f64>,
}

pub fn synth(g: &Global, a: &SynthArgs) -> Result<()> {
    let cfg = config(g, None)?;
    let mut spec = SynthSpec::preset(a.modality, a.classes, a.per_class, cfg.seed);
    spec.line_noise = a.line_noise;
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    if let Some(l) = a.locked {
        spec.locked = l;
    }
    let (w, labels) = spec.generate()?;
    let header = write_container(&w, &a.out)?;
    write_labels(&labels_path(&a.out), &labels, spec.classes())?;
    println!("wrote {} windows of {}x{} at {} Hz to {}", header.count, w.channels, w.window, w.fs, a.out.display());
    Ok(())
}

// ---- preprocess -----------------------------------------------------------

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// CSV record (`fs=` header line) or raw f32 frames with a `.meta` sidecar.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pipeline preset, emg or ecg (default: the config modality).
    #[arg(long)]
    pub modality: Option<Modality>,
}

pub fn preprocess(g: &Global, a: &PreprocessArgs) -> Result<()> {
    let cfg = config(g, None)?;
    let modality = a.modality.unwrap_or(cfg.modality);
    let preset = Preset::for_modality(modality).ok_or_else(|| CliError::Config(format!("no preprocessing preset for {modality}")))?;
    let is_csv = a.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let rec = if is_csv { signal::read_csv_record(&a.input, modality)? } else { signal::read_raw_record(&a.input, modality)? };
    let w = signal::preprocess(&rec, &preset)?;
    let header = write_container(&w, &a.out)?;
    println!("wrote {} windows of {}x{} at {} Hz to {}", header.count, w.channels, w.window, w.fs, a.out.display());
    Ok(())
}

// ---- pretrain -------------------------------------------------------------

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Unlabelled window container.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV to write.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Pure random masking (importance blend 0).
    #[arg(long)]
    pub ablate_fgm: bool,
}

pub fn pretrain(g: &Global, a: &PretrainArgs) -> Result<()> {
    let cfg = config(g, None)?;
    let (_, w) = read_container(&a.data)?;
    check_geometry(&cfg, &w, &a.data)?;
    let data = windows_of(&w);
    let (model, mut store, _) = build_model(&cfg)?;
    let opts = PretrainOptions::from_config(&cfg, a.ablate_fgm);
    let mut sink = metrics_sink(a.metrics.as_deref())?;
    let mut metrics = Metrics::new(sink.as_mut().map(|s| s as &mut dyn Write), &cfg.echo(), false)?;
    let opt = pretrain_with(&model, &mut store, &data, &opts, &mut metrics, AdamW::from_config(&cfg))?;
    drop(metrics);
    if let Some(mut s) = sink {
        s.flush()?;
    }
    Checkpoint::capture(&store, &cfg.to_text(), opt.step).save(&a.out)?;
    println!("pretrained {} steps on {} windows; checkpoint {}", opt.step, data.len(), a.out.display());
    Ok(())
}

// ---- finetune -------------------------------------------------------------

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Labelled container (labels in the `.labels` sidecar).
    #[arg(long)]
    pub data: PathBuf,
    /// Pretrained checkpoint.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Start from random weights (the checkpoint, if given, only supplies the config).
    #[arg(long)]
    pub no_pretrain: bool,
    /// Held-out labelled container scored after training.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

pub fn finetune(g: &Global, a: &FinetuneArgs) -> Result<()> {
    let ck = match &a.from {
        Some(p) => Some(loaded(p)?),
        None if a.no_pretrain => None,
        None => return Err(CliError::data("a pretrained checkpoint (--from) is required unless --no-pretrain is given")),
    };
    let cfg = config(g, ck.as_ref().map(|c| c.config.as_str()))?;
    let set = labelled(&a.data)?;
    let (model, mut store, mut rng) = build_model(&cfg)?;
    if let (Some(ck), false) = (&ck, a.no_pretrain) {
        ck.restore(&mut store, Some("encoder."))?;
    }
    if let Some(x) = set.windows.first() {
        if x.shape() != [cfg.channels, cfg.window] {
            return Err(CliError::data(format!("{}: windows are {:?}, the model expects {}x{}", a.data.display(), x.shape(), cfg.channels, cfg.window)));
        }
    }
    let head = ClassHead::new(&mut store, "head.", HeadConfig::with_hidden(cfg.dim, cfg.head_hidden, set.classes), &mut rng)?;
    let (train, val) = set.split(cfg.val_fraction, cfg.seed);
    if train.is_empty() || val.is_empty() {
        return Err(CliError::data(format!("{} labelled windows cannot be split by val_fraction = {}", set.len(), cfg.val_fraction)));
    }
    let opts = FinetuneOptions::from_config(&cfg);
    let mut sink = metrics_sink(a.metrics.as_deref())?;
    let mut metrics = Metrics::new(sink.as_mut().map(|s| s as &mut dyn Write), &cfg.echo(), true)?;
    let out = run_finetune(&model, &head, &mut store, &train, &val, &opts, &mut metrics, AdamW::from_config(&cfg))?;
    drop(metrics);
    if let Some(mut s) = sink {
        s.flush()?;
    }
    println!(
        "fine-tuned {} epochs; best epoch {} with validation loss {:.4}, accuracy {:.4}",
        out.epochs_run, out.best_epoch, out.best_val_loss, out.best_val_acc
    );
    if let Some(t) = &a.test {
        let test = labelled(t)?;
        let (loss, acc) = evaluate(&model, &head, &store, &test)?;
        println!("test loss {loss:.4}, accuracy {acc:.4}");
    }
    Checkpoint::capture(&store, &cfg.to_text(), out.epochs_run as u64).save(&a.out)?;
    Ok(())
}

// ---- fuse -----------------------------------------------------------------

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Branch names, comma-separated; `ext:FILE` reads precomputed logits.
    #[arg(long, value_delimiter = ',', required = true)]
    pub modalities: Vec<String>,
    /// `NAME=PATH` checkpoint of an encoder branch. Repeatable.
    #[arg(long = "ckpt", value_name = "NAME=PATH")]
    pub ckpts: Vec<String>,
    /// `NAME=PATH` container of an encoder branch. Repeatable.
    #[arg(long = "data", value_name = "NAME=PATH")]
    pub data: Vec<String>,
    /// Label file (default: the sidecar of the first branch container).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Probe checkpoint (heads and fusion logits) to write.
    #[arg(long)]
    pub out: PathBuf,
}

fn lookup<'a>(pairs: &'a [String], name: &str, flag: &str) -> Result<&'a str> {
    pairs
        .iter()
        .filter_map(|p| p.split_once('='))
        .find(|(k, _)| *k == name)
        .map(|(_, v)| v)
        .ok_or_else(|| CliError::Config(format!("branch {name} needs --{flag} {name}=PATH")))
}

pub fn fuse(g: &Global, a: &FuseArgs) -> Result<()> {
    let cfg = config(g, None)?;
    let mut branches = Vec::new();
    let mut first_data: Option<PathBuf> = None;
    for m in &a.modalities {
        if let Some(file) = m.strip_prefix("ext:") {
            let path = Path::new(file);
            let (_, logits) = read_external_logits(path)?;
            let name = path.file_stem().map_or_else(|| file.to_string(), |s| s.to_string_lossy().into_owned());
            branches.push(Branch::External { name, logits });
            continue;
        }
        let ck_path = PathBuf::from(lookup(&a.ckpts, m, "ckpt")?);
        let data_path = PathBuf::from(lookup(&a.data, m, "data")?);
        let ck = loaded(&ck_path)?;
        let bcfg = RunConfig::parse(&ck.config)?;
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, bcfg.model_config(), &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.restore(&mut store, Some("encoder."))?;
        store.set_trainable_by_prefix("", false);
        let (_, w) = read_container(&data_path)?;
        check_geometry(&bcfg, &w, &data_path)?;
        let features = pooled_features(&model, &store, &windows_of(&w))?;
        first_data.get_or_insert(data_path);
        branches.push(Branch::Features { name: m.clone(), features });
    }
    let lpath = match (&a.labels, &first_data) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => labels_path(d),
        (None, None) => return Err(CliError::Config("external-only fusion needs --labels".into())),
    };
    let (labels, classes) = read_labels(&lpath).map_err(|e| CliError::data(format!("{}: {e}", lpath.display())))?;
    if branches.iter().any(|b| b.samples() != labels.len()) {
        return Err(CliError::data(format!("every branch must cover the {} labelled samples", labels.len())));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe = Probe::new(&mut store, branches, classes, cfg.head_hidden, &mut rng)?;
    let (train_idx, val_idx) = stratified_split(&labels, classes, cfg.val_fraction, cfg.seed);
    let opts = ProbeOptions::from_config(&cfg);
    let losses = train_probe(&probe, &mut store, &train_idx, &labels, &opts, AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, 0.0))?;
    let alpha = probe.fusion.alpha(&store);
    for (n, w) in probe.fusion.names.iter().zip(&alpha) {
        println!("alpha {n} = {w:.4}");
    }
    println!("final train loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
    if !val_idx.is_empty() {
        println!("validation accuracy {:.4}", probe.accuracy(&store, &val_idx, &labels)?);
    }
    let text = format!("{}# modalities = {}\n", cfg.to_text(), probe.fusion.names.join(","));
    Checkpoint::capture(&store, &text, opts.epochs as u64).save(&a.out)?;
    Ok(())
}

// ---- inspect --------------------------------------------------------------

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Model checkpoint, or a probe checkpoint written by `fuse`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Container holding the window to reconstruct.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Window index within the container.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn inspect(g: &Global, a: &InspectArgs) -> Result<()> {
    let ck = loaded(&a.ckpt)?;
    let cfg = config(g, Some(&ck.config))?;
    fs::create_dir_all(&a.out)?;
    let mut wrote = Vec::new();
    if let Some((_, logits)) = ck.params.iter().find(|(n, _)| n == "probe.fusion.logits") {
        let names: Vec<String> = ck
            .config
            .lines()
            .find_map(|l| l.strip_prefix("# modalities = "))
            .map(|s| s.split(',').map(str::to_string).collect())
            .unwrap_or_else(|| (0..logits.len()).map(|i| format!("branch{i}")).collect());
        let mut s = String::from("modality,alpha\n");
        for (n, w) in names.iter().zip(softmax(logits.data())) {
            let _ = writeln!(s, "{n},{w}");
        }
        fs::write(a.out.join("alpha.csv"), s)?;
        wrote.push("alpha.csv");
    }
    let has_model = ck.params.iter().any(|(n, _)| n.starts_with("encoder."));
    match (&a.data, has_model) {
        (Some(d), true) => {
            reconstruction_csvs(&cfg, &ck, d, a.index, &a.out)?;
            wrote.extend(["recon.csv", "assembled.csv", "mask.csv", "spec.csv"]);
        }
        (Some(_), false) => return Err(CliError::data(format!("{} holds no encoder to reconstruct with", a.ckpt.display()))),
        (None, true) => return Err(CliError::Config("reconstruction export needs --data".into())),
        (None, false) => {}
    }
    println!("wrote {} to {}", wrote.join(", "), a.out.display());
    Ok(())
}

fn reconstruction_csvs(cfg: &RunConfig, ck: &Checkpoint, data: &Path, index: usize, out: &Path) -> Result<()> {
    let (_, w) = read_container(data)?;
    check_geometry(cfg, &w, data)?;
    if index >= w.len() {
        return Err(CliError::data(format!("window {index} out of range ({} windows)", w.len())));
    }
    let (model, mut store, _) = build_model(cfg)?;
    ck.restore(&mut store, Some("encoder."))?;
    ck.restore(&mut store, Some("decoder."))?;
    let x = windows_of(&w).swap_remove(index);
    let mut g = Graph::new(&store);
    let mask = MaskSettings { ratio: cfg.mask_ratio, blend: cfg.importance, seed: cfg.seed };
    let r = model.reconstruct(&mut g, &x, mask, None, None)?;
    let (recon, target, plan) = (g.value(r.recon).clone(), g.value(r.target).clone(), r.plan);
    let (rows, n, width) = (plan.rows, plan.per_row, cfg.patch);

    let mut rec = String::from("row,patch,t,target,recon\n");
    let mut asm = String::from("row,t,masked,target,value\n");
    for row in 0..rows {
        for p in 0..n {
            let i = row * n + p;
            let masked = !plan.mask[i];
            for k in 0..width {
                let (tv, rv) = (target.get2(i, k), recon.get2(i, k));
                let t = p * width + k;
                if masked {
                    let _ = writeln!(rec, "{row},{p},{t},{tv},{rv}");
                }
                let _ = writeln!(asm, "{row},{t},{},{tv},{}", masked as u8, if masked { rv } else { tv });
            }
        }
    }
    fs::write(out.join("recon.csv"), rec)?;
    fs::write(out.join("assembled.csv"), asm)?;

    let mut m = String::from("row,patch,energy,score,masked\n");
    for row in 0..rows {
        for p in 0..n {
            let masked = !plan.mask[row * n + p];
            let _ = writeln!(m, "{row},{p},{},{},{}", plan.energies.get2(row, p), plan.scores.get2(row, p), masked as u8);
        }
    }
    fs::write(out.join("mask.csv"), m)?;

    let spec = model.spec(&mut g, &x)?;
    let sv = g.value(spec);
    let mut s = String::from("row,t,value\n");
    for row in 0..sv.rows() {
        for (t, v) in sv.row(row).iter().enumerate() {
            let _ = writeln!(s, "{row},{t},{v}");
        }
    }
    fs::write(out.join("spec.csv"), s)?;
    Ok(())
}
