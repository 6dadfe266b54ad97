//! Run configuration and its flat `key = value` text format.
//!
//! Every key maps onto exactly one field of [`RunConfig`]; unknown keys and
//! malformed values are rejected. [`RunConfig::to_text`] writes the fully
//! resolved configuration so that a run directory always records what it
//! was trained with.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Synthetic corpus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub width: u32,
    pub height: u32,
    pub min_regions: usize,
    pub max_regions: usize,
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_box_width: u32,
    pub max_box_width: u32,
    pub min_box_height: u32,
    pub max_box_height: u32,
    /// Probability mass a region type puts on its own block of the vocabulary.
    pub home_mass: f64,
    /// Half-width of the uniform pixel noise added on top of each texture.
    pub pixel_noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            min_regions: 3,
            max_regions: 8,
            vocab_size: 64,
            min_tokens: 1,
            max_tokens: 12,
            min_box_width: 24,
            max_box_width: 64,
            min_box_height: 12,
            max_box_height: 40,
            home_mass: 0.7,
            pixel_noise: 0.05,
        }
    }
}

/// Scaling of attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttnScale {
    /// `1/sqrt(d)` with `d` the model width.
    Model,
    /// `1/sqrt(d/h)`, the per-head width.
    Head,
}

impl FromStr for AttnScale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "model" => Ok(AttnScale::Model),
            "head" => Ok(AttnScale::Head),
            other => Err(format!("expected model|head, got {other:?}")),
        }
    }
}

impl fmt::Display for AttnScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttnScale::Model => "model",
            AttnScale::Head => "head",
        })
    }
}

/// Model dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Sentence-embedding width.
    pub d_text: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    /// RoI-Align output grid side.
    pub pooled: usize,
    pub codebooks: usize,
    pub entries: usize,
    pub entry_dim: usize,
    pub d_quant: usize,
    pub attn_scale: AttnScale,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            layers: 2,
            d_text: 64,
            conv1_channels: 8,
            conv2_channels: 16,
            pooled: 3,
            codebooks: 2,
            entries: 8,
            entry_dim: 32,
            d_quant: 64,
            attn_scale: AttnScale::Model,
        }
    }
}

impl ModelConfig {
    /// RoI feature width `C_f·P·P`.
    pub fn d_visual(&self) -> usize {
        self.conv2_channels * self.pooled * self.pooled
    }

    /// Backbone stride in pixels.
    pub fn stride(&self) -> usize {
        4
    }
}

/// The set of enabled pretraining tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSet {
    pub msm: bool,
    pub vcl: bool,
    pub vla: bool,
    pub mvm: bool,
}

impl TaskSet {
    pub const FULL: TaskSet = TaskSet {
        msm: true,
        vcl: true,
        vla: true,
        mvm: false,
    };
    pub const MSM_MVM: TaskSet = TaskSet {
        msm: true,
        vcl: false,
        vla: false,
        mvm: true,
    };
    pub const MSM_VCL: TaskSet = TaskSet {
        msm: true,
        vcl: true,
        vla: false,
        mvm: false,
    };

    pub fn is_empty(&self) -> bool {
        !(self.msm || self.vcl || self.vla || self.mvm)
    }
}

impl Default for TaskSet {
    fn default() -> Self {
        TaskSet::FULL
    }
}

impl FromStr for TaskSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let mut t = TaskSet {
            msm: false,
            vcl: false,
            vla: false,
            mvm: false,
        };
        for part in s.split('+').map(str::trim).filter(|p| !p.is_empty()) {
            let flag = match part.to_ascii_lowercase().as_str() {
                "msm" => &mut t.msm,
                "vcl" => &mut t.vcl,
                "vla" => &mut t.vla,
                "mvm" => &mut t.mvm,
                other => return Err(format!("unknown task {other:?}")),
            };
            *flag = true;
        }
        if t.is_empty() {
            return Err("at least one task must be enabled".into());
        }
        Ok(t)
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.msm, "msm"),
            (self.vcl, "vcl"),
            (self.vla, "vla"),
            (self.mvm, "mvm"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        f.write_str(&names.join("+"))
    }
}

/// Loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Contrastive temperature κ.
    pub kappa: f64,
    /// Codebook-diversity weight λ.
    pub lambda: f64,
    /// Smooth-L1 threshold β.
    pub beta: f64,
    pub tasks: TaskSet,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kappa: 0.1,
            lambda: 0.1,
            beta: 1.0,
            tasks: TaskSet::FULL,
        }
    }
}

/// Pretraining hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub p_mask_sentence: f64,
    pub p_mask_visual: f64,
    pub clip_norm: f64,
    pub checkpoint_every: usize,
    pub tau_start: f64,
    pub tau_min: f64,
    pub tau_decay: f64,
    /// Seed of the frozen sentence-encoder code table.
    pub text_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-4,
            warmup_frac: 0.2,
            batch_size: 8,
            total_steps: 2000,
            seed: 0,
            p_mask_sentence: 0.15,
            p_mask_visual: 0.075,
            clip_norm: 5.0,
            checkpoint_every: 200,
            tau_start: 2.0,
            tau_min: 0.5,
            tau_decay: 0.999995,
            text_seed: 0x5EED,
        }
    }
}

/// Fine-tuning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Fraction of documents used for training; the rest are held out.
    pub train_frac: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 8,
            train_frac: 0.25,
            seed: 0,
        }
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

macro_rules! config_keys {
    ($($key:literal => $group:ident . $field:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$($key),*];

        fn set_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
            match key {
                $($key => {
                    cfg.$group.$field = value.parse().map_err(|e| {
                        Error::Config(format!("{key} = {value:?}: {e}"))
                    })?;
                })*
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
            Ok(())
        }

        fn get_key(cfg: &RunConfig, key: &str) -> String {
            match key {
                $($key => format_value(&cfg.$group.$field),)*
                _ => unreachable!(),
            }
        }
    };
}

config_keys! {
    "width" => corpus.width,
    "height" => corpus.height,
    "min_regions" => corpus.min_regions,
    "max_regions" => corpus.max_regions,
    "vocab_size" => corpus.vocab_size,
    "min_tokens" => corpus.min_tokens,
    "max_tokens" => corpus.max_tokens,
    "min_box_width" => corpus.min_box_width,
    "max_box_width" => corpus.max_box_width,
    "min_box_height" => corpus.min_box_height,
    "max_box_height" => corpus.max_box_height,
    "home_mass" => corpus.home_mass,
    "pixel_noise" => corpus.pixel_noise,
    "d_model" => model.d_model,
    "heads" => model.heads,
    "layers" => model.layers,
    "d_text" => model.d_text,
    "conv1_channels" => model.conv1_channels,
    "conv2_channels" => model.conv2_channels,
    "pooled" => model.pooled,
    "codebooks" => model.codebooks,
    "entries" => model.entries,
    "entry_dim" => model.entry_dim,
    "d_quant" => model.d_quant,
    "attn_scale" => model.attn_scale,
    "kappa" => loss.kappa,
    "lambda" => loss.lambda,
    "smooth_l1_beta" => loss.beta,
    "tasks" => loss.tasks,
    "lr" => train.lr,
    "weight_decay" => train.weight_decay,
    "warmup_frac" => train.warmup_frac,
    "batch_size" => train.batch_size,
    "total_steps" => train.total_steps,
    "seed" => train.seed,
    "p_mask_sentence" => train.p_mask_sentence,
    "p_mask_visual" => train.p_mask_visual,
    "clip_norm" => train.clip_norm,
    "checkpoint_every" => train.checkpoint_every,
    "tau_start" => train.tau_start,
    "tau_min" => train.tau_min,
    "tau_decay" => train.tau_decay,
    "text_seed" => train.text_seed,
    "finetune_steps" => finetune.steps,
    "finetune_lr" => finetune.lr,
    "finetune_weight_decay" => finetune.weight_decay,
    "finetune_batch_size" => finetune.batch_size,
    "finetune_train_frac" => finetune.train_frac,
    "finetune_seed" => finetune.seed,
}

trait ConfigValue {
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    // `{:?}` round-trips every f64 exactly.
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(u32, u64, usize, AttnScale, TaskSet);

fn format_value<T: ConfigValue>(v: &T) -> String {
    v.render()
}

impl RunConfig {
    /// The desk-scale defaults.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.train.lr = 1e-4;
        cfg
    }

    /// The tiny configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        let mut cfg = Self::default();
        cfg.corpus = CorpusConfig {
            width: 16,
            height: 16,
            min_regions: 3,
            max_regions: 3,
            vocab_size: 16,
            min_tokens: 1,
            max_tokens: 4,
            min_box_width: 4,
            max_box_width: 7,
            min_box_height: 4,
            max_box_height: 7,
            home_mass: 0.7,
            pixel_noise: 0.05,
        };
        cfg.model = ModelConfig {
            d_model: 8,
            heads: 2,
            layers: 1,
            d_text: 8,
            conv1_channels: 3,
            conv2_channels: 4,
            pooled: 2,
            codebooks: 2,
            entries: 4,
            entry_dim: 4,
            d_quant: 8,
            attn_scale: AttnScale::Model,
        };
        cfg.train.batch_size = 2;
        cfg
    }

    /// Full-size reference configuration; far too large for CPU training.
    pub fn full() -> Self {
        let mut cfg = Self::default();
        cfg.model.d_model = 768;
        cfg.model.heads = 12;
        cfg.model.layers = 12;
        cfg.model.d_text = 768;
        cfg.model.d_quant = 768;
        cfg.corpus.width = 512;
        cfg.corpus.height = 512;
        cfg.corpus.max_regions = 64;
        cfg.train.batch_size = 64;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        set_key(self, key, value)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.contains(&key).then(|| get_key(self, key))
    }

    /// Parses `key = value` lines over the preset named by an optional
    /// leading `preset = ...` line (desk when absent). `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::desk();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            if key == "preset" {
                if seen.len() != 1 {
                    return Err(Error::Config("preset must be the first key".into()));
                }
                cfg = RunConfig::preset(value)?;
                continue;
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            s.push_str(key);
            s.push_str(" = ");
            s.push_str(&get_key(self, key));
            s.push('\n');
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let m = &self.model;
        if m.heads == 0 || m.d_model % m.heads != 0 {
            return bad("heads must divide d_model");
        }
        if m.layers == 0 {
            return bad("layers must be at least 1");
        }
        if m.codebooks == 0 || m.entries < 2 {
            return bad("need codebooks >= 1 and entries >= 2");
        }
        if m.pooled == 0 || m.d_text == 0 || m.d_quant == 0 || m.entry_dim == 0 {
            return bad("model dimensions must be positive");
        }
        let l = &self.loss;
        if l.kappa <= 0.0 || l.lambda < 0.0 || l.beta <= 0.0 {
            return bad("kappa and smooth_l1_beta must be > 0, lambda >= 0");
        }
        if l.tasks.is_empty() {
            return bad("at least one task must be enabled");
        }
        let t = &self.train;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(t.p_mask_sentence) && unit(t.p_mask_visual) && unit(t.warmup_frac)) {
            return bad("mask probabilities and warmup_frac must lie in [0, 1]");
        }
        if t.lr < 0.0 || t.weight_decay < 0.0 || t.batch_size == 0 {
            return bad("lr and weight_decay must be >= 0, batch_size >= 1");
        }
        if !(t.tau_min > 0.0 && t.tau_start >= t.tau_min && t.tau_decay > 0.0 && t.tau_decay <= 1.0) {
            return bad("temperature schedule must satisfy 0 < tau_min <= tau_start, 0 < tau_decay <= 1");
        }
        let f = &self.finetune;
        if !(f.train_frac > 0.0 && f.train_frac < 1.0) || f.batch_size == 0 {
            return bad("finetune_train_frac must lie in (0, 1), finetune_batch_size >= 1");
        }
        crate::corpus::validate_config(&self.corpus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let mut cfg = RunConfig::tiny();
        cfg.train.lr = 0.1 + 0.2;
        cfg.loss.tasks = TaskSet::MSM_MVM;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("d_model = 8\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn preset_line_selects_the_base() {
        let cfg = RunConfig::parse("preset = tiny\nseed = 9\n").unwrap();
        assert_eq!(cfg.model.d_model, 8);
        assert_eq!(cfg.train.seed, 9);
        assert!(RunConfig::parse("seed = 9\npreset = tiny\n").is_err());
    }

    #[test]
    fn task_set_parsing() {
        assert_eq!("msm+mvm".parse::<TaskSet>().unwrap(), TaskSet::MSM_MVM);
        assert_eq!("MSM+VCL+VLA".parse::<TaskSet>().unwrap(), TaskSet::FULL);
        assert!("".parse::<TaskSet>().is_err());
        assert!("msm+rel".parse::<TaskSet>().is_err());
        assert_eq!(TaskSet::FULL.to_string(), "msm+vcl+vla");
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(RunConfig::parse("d_model = 10\nheads = 4\n").is_err());
    }

    #[test]
    fn full_preset_records_reference_sizes() {
        let p = RunConfig::full();
        assert_eq!((p.model.layers, p.model.d_model, p.model.heads), (12, 768, 12));
        assert_eq!(p.corpus.max_regions, 64);
        assert_eq!(p.train.lr, 1e-5);
        assert_eq!(p.train.weight_decay, 1e-4);
    }
}
