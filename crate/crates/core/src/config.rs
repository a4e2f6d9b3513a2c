//! Plain-text `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Two shorthand keys are applied
//! before everything else regardless of position: `preset` (`emg`, `ecg`,
//! `tiny`) sets the data and front-end geometry, `size` (`small`, `base`,
//! `large`) sets the encoder width, depth and heads. Unknown keys and
//! unparsable values are all reported together.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::{EncoderConfig, ModelConfig, SizePreset};
use crate::signal::Modality;
use crate::train::Schedule;
use crate::wavelet::FrontendConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("cannot read config: {0}")]
    Io(String),
}

trait Value: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(usize, u64, f64, bool, String, Modality);

impl Value for Vec<String> {
    fn parse(s: &str) -> Result<Self, String> {
        let v: Vec<String> = s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect();
        if v.is_empty() {
            return Err("empty list".into());
        }
        Ok(v)
    }

    fn render(&self) -> String {
        self.join(",")
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr,)*) => {
        /// Every knob of a run. Field names are the config keys.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $name: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl RunConfig {
            /// Config keys in echo order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name),)*];

            fn set_field(&mut self, key: &str, raw: &str) -> Option<Result<(), String>> {
                match key {
                    $(stringify!($name) => Some(<$ty as Value>::parse(raw).map(|v| self.$name = v)),)*
                    _ => None,
                }
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), Value::render(&self.$name)),)*]
            }
        }
    };
}

run_config! {
    modality: Modality = Modality::Emg,
    channels: usize = 16,
    fs: f64 = 2000.0,
    window: usize = 1024,
    step: usize = 512,
    levels: usize = 3,
    taps: usize = 16,
    bases: Vec<String> = vec!["db4".into(), "bior4.4".into(), "sym5".into(), "coif5".into()],
    patch: usize = 64,
    dim: usize = 256,
    layers: usize = 6,
    heads: usize = 8,
    mlp_ratio: f64 = 4.0,
    drop_path: f64 = 0.1,
    dec_dim: usize = 256,
    dec_layers: usize = 8,
    dec_heads: usize = 8,
    mask_ratio: f64 = 0.7,
    /// Weight of spectral energy against uniform noise in the mask score.
    importance: f64 = 0.6,
    batch: usize = 8,
    /// Micro-batches accumulated per optimizer step.
    accumulate: usize = 1,
    epochs: f64 = 50.0,
    warmup_epochs: f64 = 10.0,
    lr_start: f64 = 5e-7,
    lr_peak: f64 = 5e-5,
    lr_floor: f64 = 1e-6,
    weight_decay: f64 = 0.01,
    beta1: f64 = 0.9,
    beta2: f64 = 0.98,
    adam_eps: f64 = 1e-8,
    clip: f64 = 3.0,
    /// Stop after this many optimizer steps (0 = run all epochs).
    max_steps: usize = 0,
    seed: u64 = 0,
    threads: usize = 1,
    f64_mode: bool = false,
    ft_lr_factor: f64 = 0.1,
    layer_decay: f64 = 0.9,
    label_smoothing: f64 = 0.1,
    ft_epochs: f64 = 50.0,
    ft_warmup_epochs: f64 = 0.0,
    patience: usize = 5,
    /// Classifier hidden width (0 = twice the token width).
    head_hidden: usize = 0,
    val_fraction: f64 = 0.2,
    probe_lr: f64 = 1e-2,
    probe_epochs: f64 = 50.0,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        let mut errors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.push((k.trim().to_string(), v.trim().to_string())),
                None => errors.push(format!("line {}: expected key = value", i + 1)),
            }
        }
        let mut cfg = Self::default();
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            if let Err(e) = cfg.apply_preset(v) {
                errors.push(format!("{k}: {e}"));
            }
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k == "size") {
            match v.parse::<SizePreset>() {
                Ok(p) => cfg.apply_size(p),
                Err(e) => errors.push(format!("{k}: {e}")),
            }
        }
        let mut unknown = Vec::new();
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset" && k != "size") {
            match cfg.set_field(k, v) {
                None => unknown.push(k.clone()),
                Some(Err(e)) => errors.push(format!("{k}: {e}")),
                Some(Ok(())) => {}
            }
        }
        if !unknown.is_empty() {
            errors.push(format!("unknown keys: {}", unknown.join(", ")));
        }
        if errors.is_empty() {
            errors.extend(cfg.problems());
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from text, as in a config file line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "preset" => self.apply_preset(value).map_err(|e| ConfigError::Invalid(vec![format!("preset: {e}")])),
            "size" => {
                let p = value.parse::<SizePreset>().map_err(|e| ConfigError::Invalid(vec![format!("size: {e}")]))?;
                self.apply_size(p);
                Ok(())
            }
            _ => match self.set_field(key, value) {
                None => Err(ConfigError::Invalid(vec![format!("unknown keys: {key}")])),
                Some(Err(e)) => Err(ConfigError::Invalid(vec![format!("{key}: {e}")])),
                Some(Ok(())) => Ok(()),
            },
        }
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<(), String> {
        match name {
            "emg" => {
                (self.modality, self.channels, self.fs, self.window, self.step) = (Modality::Emg, 16, 2000.0, 1024, 512);
                (self.levels, self.taps, self.patch) = (3, 16, 64);
            }
            "ecg" => {
                (self.modality, self.channels, self.fs, self.window, self.step) = (Modality::Ecg, 12, 500.0, 1024, 512);
                (self.levels, self.taps, self.patch) = (4, 24, 64);
            }
            "tiny" => {
                (self.modality, self.channels, self.fs, self.window, self.step) = (Modality::Synth, 4, 250.0, 256, 256);
                (self.levels, self.taps, self.patch) = (2, 8, 32);
                (self.dim, self.layers, self.heads) = (64, 2, 4);
                (self.dec_dim, self.dec_layers, self.dec_heads) = (64, 2, 4);
                // 200 steps of batch 8 over 512 windows, 10% warmup.
                (self.epochs, self.warmup_epochs) = (3.125, 0.3125);
                (self.lr_start, self.lr_peak, self.lr_floor) = (3e-5, 3e-3, 6e-5);
                (self.ft_epochs, self.ft_lr_factor) = (30.0, 0.3);
            }
            other => return Err(format!("unknown preset {other:?}")),
        }
        Ok(())
    }

    pub fn apply_size(&mut self, p: SizePreset) {
        (self.dim, self.layers, self.heads) = p.dims();
    }

    /// Semantic problems in an otherwise well-formed config.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.model_config().validate() {
            out.push(e.to_string());
        }
        let mut check = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        check(self.channels > 0, "channels must be positive".into());
        check(self.levels > 0, "levels must be positive".into());
        check(self.taps >= 2, format!("taps {} < 2", self.taps));
        for b in &self.bases {
            check(crate::wavelet::lookup(b).is_some(), format!("bases: unknown wavelet {b:?}"));
        }
        check((0.0..1.0).contains(&self.mask_ratio), format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        check((0.0..=1.0).contains(&self.importance), format!("importance {} outside [0, 1]", self.importance));
        check(self.batch > 0 && self.accumulate > 0, "batch and accumulate must be positive".into());
        check(self.epochs > 0.0 && self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs, "need 0 <= warmup_epochs <= epochs, epochs > 0".into());
        check(self.lr_peak > 0.0 && self.lr_start >= 0.0 && self.lr_floor >= 0.0, "learning rates must be non-negative".into());
        check(self.clip > 0.0, "clip must be positive".into());
        check((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must lie in [0, 1)".into());
        check(self.threads > 0, "threads must be positive".into());
        check((0.0..=1.0).contains(&self.label_smoothing), "label_smoothing outside [0, 1]".into());
        check(self.ft_epochs > 0.0 && self.ft_warmup_epochs >= 0.0 && self.ft_warmup_epochs <= self.ft_epochs, "need 0 <= ft_warmup_epochs <= ft_epochs".into());
        check((0.0..1.0).contains(&self.val_fraction), "val_fraction outside [0, 1)".into());
        check(self.fs > 0.0 && self.window > 0 && self.step > 0, "fs, window and step must be positive".into());
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            frontend: FrontendConfig { channels: self.channels, levels: self.levels, taps: self.taps, bases: self.bases.clone() },
            window: self.window,
            patch: self.patch,
            encoder: EncoderConfig {
                dim: self.dim,
                layers: self.layers,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
                drop_path: self.drop_path,
                dec_dim: self.dec_dim,
                dec_layers: self.dec_layers,
                dec_heads: self.dec_heads,
            },
        }
    }

    pub fn pretrain_schedule(&self) -> Schedule {
        Schedule {
            warmup_epochs: self.warmup_epochs,
            epochs: self.epochs,
            lr_start: self.lr_start,
            lr_peak: self.lr_peak,
            lr_floor: self.lr_floor,
        }
    }

    /// Pretraining shape scaled by `ft_lr_factor` over the fine-tuning epochs.
    pub fn finetune_schedule(&self) -> Schedule {
        let f = self.ft_lr_factor;
        Schedule {
            warmup_epochs: self.ft_warmup_epochs,
            epochs: self.ft_epochs,
            lr_start: self.lr_start * f,
            lr_peak: self.lr_peak * f,
            lr_floor: self.lr_floor * f,
        }
    }

    /// Canonical `key = value` text; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// The config as `# key = value` comment lines for file headers.
    pub fn echo(&self) -> String {
        self.to_text().lines().map(|l| format!("# {l}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.apply_preset("tiny").unwrap();
        c.seed = 17;
        c.lr_peak = 1.25e-3;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn every_offender_is_listed() {
        let err = RunConfig::parse("bogus = 1\ndim = abc\nalso_bad = 2\n").unwrap_err();
        let ConfigError::Invalid(msgs) = err else { panic!() };
        let all = msgs.join("|");
        assert!(all.contains("bogus") && all.contains("also_bad") && all.contains("dim"), "{all}");
    }

    #[test]
    fn presets_apply_before_overrides() {
        let c = RunConfig::parse("dim = 192\nsize = base\npreset = ecg\n").unwrap();
        assert_eq!((c.dim, c.layers, c.heads), (192, 8, 12));
        assert_eq!((c.channels, c.levels, c.taps), (12, 4, 24));
    }
}
