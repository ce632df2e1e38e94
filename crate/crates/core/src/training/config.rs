use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ValueHead};
use crate::optim::OptimizerKind;

/// Which part of the pipeline is switched off for an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    None,
    /// Fusion runs without the retrieval-probability mask.
    NoMask,
    /// Values are the first `c` base-encoded tokens instead of compressed.
    FirstCTokens,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "no-mask" => Ok(Self::NoMask),
            "first-c-tokens" => Ok(Self::FirstCTokens),
            other => Err(Error::InvalidArgument(format!(
                "unknown ablation {other:?} (expected none, no-mask or first-c-tokens)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::NoMask => "no-mask",
            Self::FirstCTokens => "first-c-tokens",
        })
    }
}

/// Training hyperparameters plus the model dimensions they run against.
///
/// The text form is one `key = value` per line; `#` starts a comment. Keys are
/// the field names below.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub c: usize,
    pub tau: f64,
    pub w_contra: f64,
    pub w_decor: f64,
    pub w_align: f64,
    /// Divides the query-key logits of the contrastive loss.
    pub contra_temperature: f64,
    pub refresh_interval: usize,
    pub reencode_fraction: f64,
    pub gt_injection_prob: f64,
    pub seed: u64,
    pub learning_rate: f64,
    /// Decoupled weight decay applied during pretraining.
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub ablation: Ablation,
    pub shards: usize,
    pub warm_start_steps: usize,
    pub warm_start_batch: usize,
    pub warm_start_lr: f64,
    /// Warm start stops early once held-out Acc@1 reaches this.
    pub warm_start_target: f64,
    pub metrics: Option<PathBuf>,

    pub d: usize,
    pub d_img: usize,
    pub vocab: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub base_layers: usize,
    pub head_layers: usize,
    pub perceiver_layers: usize,
    pub fusion_layers: usize,
    pub decoder_layers: usize,
    pub num_corpora: usize,
    pub patches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::toy();
        Self {
            k: 10,
            c: m.c,
            tau: m.tau,
            w_contra: 0.01,
            w_decor: 0.01,
            w_align: 0.01,
            contra_temperature: 1.0,
            refresh_interval: 1000,
            reencode_fraction: 0.1,
            gt_injection_prob: 0.0,
            seed: 0,
            learning_rate: 0.05,
            weight_decay: 0.0,
            steps: 500,
            batch_size: 8,
            optimizer: OptimizerKind::Sgd,
            ablation: Ablation::None,
            shards: 4,
            warm_start_steps: 0,
            warm_start_batch: 32,
            warm_start_lr: 0.01,
            warm_start_target: 1.0,
            metrics: None,
            d: m.d,
            d_img: m.d_img,
            vocab: m.vocab,
            heads: m.heads,
            ff_mult: m.ff_mult,
            base_layers: m.base_layers,
            head_layers: m.head_layers,
            perceiver_layers: m.perceiver_layers,
            fusion_layers: m.fusion_layers,
            decoder_layers: m.decoder_layers,
            num_corpora: m.num_corpora,
            patches: m.patches,
        }
    }
}

fn parse_num<V: FromStr>(key: &str, value: &str) -> std::result::Result<V, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

impl TrainConfig {
    /// Settings for the planted-fact synthetic task: warm start, then Adam.
    pub fn synthetic() -> Self {
        Self {
            k: 5,
            w_contra: 1.0,
            contra_temperature: 0.1,
            refresh_interval: 10,
            learning_rate: 0.001,
            batch_size: 32,
            optimizer: OptimizerKind::Adam,
            warm_start_steps: 3000,
            warm_start_lr: 0.003,
            warm_start_target: 0.99,
            num_corpora: 3,
            ..Self::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            d_img: self.d_img,
            vocab: self.vocab,
            heads: self.heads,
            ff_mult: self.ff_mult,
            base_layers: self.base_layers,
            head_layers: self.head_layers,
            perceiver_layers: self.perceiver_layers,
            fusion_layers: self.fusion_layers,
            decoder_layers: self.decoder_layers,
            c: self.c,
            num_corpora: self.num_corpora,
            patches: self.patches,
            tau: self.tau,
            value_head: match self.ablation {
                Ablation::FirstCTokens => ValueHead::FirstTokens,
                _ => ValueHead::Perceiver,
            },
            seed: self.seed,
        }
    }

    /// Number of retrieved entries re-encoded with gradient, `ceil(frac * K)`.
    pub fn reencode_count(&self) -> usize {
        ((self.reencode_fraction * self.k as f64) - 1e-9).ceil().max(0.0) as usize
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "k" => self.k = parse_num(key, v)?,
            "c" => self.c = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "w_contra" => self.w_contra = parse_num(key, v)?,
            "w_decor" => self.w_decor = parse_num(key, v)?,
            "w_align" => self.w_align = parse_num(key, v)?,
            "contra_temperature" => self.contra_temperature = parse_num(key, v)?,
            "refresh_interval" => self.refresh_interval = parse_num(key, v)?,
            "reencode_fraction" => self.reencode_fraction = parse_num(key, v)?,
            "gt_injection_prob" => self.gt_injection_prob = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "optimizer" => self.optimizer = v.parse().map_err(|e: Error| e.to_string())?,
            "ablation" => self.ablation = v.parse().map_err(|e: Error| e.to_string())?,
            "shards" => self.shards = parse_num(key, v)?,
            "warm_start_steps" => self.warm_start_steps = parse_num(key, v)?,
            "warm_start_batch" => self.warm_start_batch = parse_num(key, v)?,
            "warm_start_lr" => self.warm_start_lr = parse_num(key, v)?,
            "warm_start_target" => self.warm_start_target = parse_num(key, v)?,
            "metrics" => self.metrics = (!v.is_empty()).then(|| PathBuf::from(v)),
            "d" => self.d = parse_num(key, v)?,
            "d_img" => self.d_img = parse_num(key, v)?,
            "vocab" => self.vocab = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "ff_mult" => self.ff_mult = parse_num(key, v)?,
            "base_layers" => self.base_layers = parse_num(key, v)?,
            "head_layers" => self.head_layers = parse_num(key, v)?,
            "perceiver_layers" => self.perceiver_layers = parse_num(key, v)?,
            "fusion_layers" => self.fusion_layers = parse_num(key, v)?,
            "decoder_layers" => self.decoder_layers = parse_num(key, v)?,
            "num_corpora" => self.num_corpora = parse_num(key, v)?,
            "patches" => self.patches = parse_num(key, v)?,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults, then validates.
    pub fn parse(src: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in src.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(key, value).map_err(|message| Error::Config { line: i + 1, message })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.c < 2 {
            return bad(format!("c must be at least 2, got {}", self.c));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.contra_temperature > 0.0) {
            return bad(format!("contra_temperature must be positive, got {}", self.contra_temperature));
        }
        for (name, w) in [("w_contra", self.w_contra), ("w_decor", self.w_decor), ("w_align", self.w_align)] {
            if !(w >= 0.0) {
                return bad(format!("{name} must be >= 0, got {w}"));
            }
        }
        if self.refresh_interval == 0 {
            return bad("refresh_interval must be at least 1".into());
        }
        for (name, p) in [
            ("reencode_fraction", self.reencode_fraction),
            ("gt_injection_prob", self.gt_injection_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.warm_start_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.warm_start_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.shards == 0 {
            return bad("shards must be at least 1".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d={} must be a multiple of heads={}", self.d, self.heads));
        }
        if self.vocab < 2 || self.num_corpora == 0 || self.patches == 0 || self.d_img == 0 {
            return bad("vocab >= 2, num_corpora >= 1, patches >= 1 and d_img >= 1 required".into());
        }
        Ok(())
    }

    /// Every field as `key = value`, in the order the parser accepts them.
    pub fn render(&self) -> String {
        let metrics = self.metrics.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let fields: Vec<(&str, String)> = vec![
            ("k", self.k.to_string()),
            ("c", self.c.to_string()),
            ("tau", self.tau.to_string()),
            ("w_contra", self.w_contra.to_string()),
            ("w_decor", self.w_decor.to_string()),
            ("w_align", self.w_align.to_string()),
            ("contra_temperature", self.contra_temperature.to_string()),
            ("refresh_interval", self.refresh_interval.to_string()),
            ("reencode_fraction", self.reencode_fraction.to_string()),
            ("gt_injection_prob", self.gt_injection_prob.to_string()),
            ("seed", self.seed.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("ablation", self.ablation.to_string()),
            ("shards", self.shards.to_string()),
            ("warm_start_steps", self.warm_start_steps.to_string()),
            ("warm_start_batch", self.warm_start_batch.to_string()),
            ("warm_start_lr", self.warm_start_lr.to_string()),
            ("warm_start_target", self.warm_start_target.to_string()),
            ("metrics", metrics),
            ("d", self.d.to_string()),
            ("d_img", self.d_img.to_string()),
            ("vocab", self.vocab.to_string()),
            ("heads", self.heads.to_string()),
            ("ff_mult", self.ff_mult.to_string()),
            ("base_layers", self.base_layers.to_string()),
            ("head_layers", self.head_layers.to_string()),
            ("perceiver_layers", self.perceiver_layers.to_string()),
            ("fusion_layers", self.fusion_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("num_corpora", self.num_corpora.to_string()),
            ("patches", self.patches.to_string()),
        ];
        fields.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
