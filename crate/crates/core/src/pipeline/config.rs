//! Run configuration as flat `section.key = value` text.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::NoiseSpec;
use crate::error::{ApeError, Result};
use crate::imitation::ImitationConfig;
use crate::nn::{AdamConfig, NetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub k_max: usize,
    pub dropout: f64,
    pub shortcut: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub vocab_size: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub oversample: usize,
    pub vocab: String,
    pub train: String,
    pub real: String,
    pub dev: String,
    pub test: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSection {
    pub p_delete: f64,
    pub p_substitute: f64,
    pub p_insert: f64,
    pub p_swap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSection {
    pub steps: u64,
    pub batch_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_tokens: usize,
    pub beta: f64,
    pub mask_rate: f64,
    pub augment: bool,
    pub lr_base: f64,
    pub warmup: u64,
    pub eval_every: u64,
    pub patience: u64,
    pub dev_limit: usize,
    pub dump_pseudo: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferSection {
    pub tau: f64,
    pub iterations: usize,
    pub checkpoint: String,
    pub input: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub noise: NoiseSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub infer: InferSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 1,
            model: ModelSection {
                d_model: 64,
                layers: 2,
                heads: 4,
                ffn: 256,
                max_len: 64,
                k_max: 4,
                dropout: 0.0,
                shortcut: true,
            },
            data: DataSection {
                vocab_size: 64,
                train_size: 5000,
                dev_size: 500,
                test_size: 500,
                min_tokens: 6,
                max_tokens: 14,
                oversample: 20,
                vocab: String::new(),
                train: String::new(),
                real: String::new(),
                dev: String::new(),
                test: String::new(),
            },
            noise: NoiseSection {
                p_delete: 0.07,
                p_substitute: 0.08,
                p_insert: 0.07,
                p_swap: 0.02,
            },
            pretrain: PretrainSection {
                steps: 2000,
                batch_tokens: 512,
            },
            train: TrainSection {
                steps: 20_000,
                batch_tokens: 512,
                beta: 0.5,
                mask_rate: 0.2,
                augment: true,
                lr_base: 0.04,
                warmup: 400,
                eval_every: 1000,
                patience: 0,
                dev_limit: 200,
                dump_pseudo: false,
            },
            infer: InferSection {
                tau: 0.3,
                iterations: 5,
                checkpoint: String::new(),
                input: String::new(),
            },
        }
    }
}

pub struct Key {
    pub name: &'static str,
    pub help: &'static str,
    get: fn(&Config) -> String,
    set: fn(&mut Config, &str) -> std::result::Result<(), String>,
}

impl Key {
    pub fn default_value(&self) -> String {
        (self.get)(&Config::default())
    }
}

macro_rules! key {
    ($name:literal, $($field:ident).+, $help:literal) => {
        Key {
            name: $name,
            help: $help,
            get: |c| c.$($field).+.to_string(),
            set: |c, v| {
                c.$($field).+ = v.parse().map_err(|e| format!("{e}"))?;
                Ok(())
            },
        }
    };
}

pub const KEYS: &[Key] = &[
    key!("seed", seed, "seed for initialization, data order and augmentation"),
    key!("model.d_model", model.d_model, "hidden width of every stack"),
    key!("model.layers", model.layers, "blocks per stack"),
    key!("model.heads", model.heads, "attention heads"),
    key!("model.ffn", model.ffn, "feed-forward inner width"),
    key!("model.max_len", model.max_len, "longest framed sequence a stack accepts"),
    key!("model.k_max", model.k_max, "largest quality tag; larger oracle tags are clipped"),
    key!("model.dropout", model.dropout, "dropout rate during training"),
    key!("model.shortcut", model.shortcut, "decoder also attends to the source memory"),
    key!("data.vocab_size", data.vocab_size, "synthetic vocabulary size, reserved tokens included"),
    key!("data.train_size", data.train_size, "synthetic training triplets"),
    key!("data.dev_size", data.dev_size, "synthetic development triplets"),
    key!("data.test_size", data.test_size, "synthetic test triplets"),
    key!("data.min_tokens", data.min_tokens, "shortest synthetic post-edit"),
    key!("data.max_tokens", data.max_tokens, "longest synthetic post-edit"),
    key!("data.oversample", data.oversample, "repetitions of the real triplets when merging"),
    key!("data.vocab", data.vocab, "vocabulary file"),
    key!("data.train", data.train, "training triplets"),
    key!("data.real", data.real, "optional real triplets, oversampled into the training set"),
    key!("data.dev", data.dev, "development triplets"),
    key!("data.test", data.test, "test triplets"),
    key!("noise.p_delete", noise.p_delete, "per-token deletion probability"),
    key!("noise.p_substitute", noise.p_substitute, "per-token substitution probability"),
    key!("noise.p_insert", noise.p_insert, "per-gap insertion probability"),
    key!("noise.p_swap", noise.p_swap, "per-token adjacent swap probability"),
    key!("pretrain.steps", pretrain.steps, "masked-fill pretraining steps"),
    key!("pretrain.batch_tokens", pretrain.batch_tokens, "post-edit tokens per pretraining step"),
    key!("train.steps", train.steps, "sampled batches of training tuples"),
    key!("train.batch_tokens", train.batch_tokens, "post-edit tokens per batch of tuples"),
    key!("train.beta", train.beta, "probability of the random-mask branch in augmentation"),
    key!("train.mask_rate", train.mask_rate, "placeholder rate for pretraining and random masking"),
    key!("train.augment", train.augment, "expand each tuple with pseudo triplets"),
    key!("train.lr_base", train.lr_base, "learning-rate scale"),
    key!("train.warmup", train.warmup, "warmup steps of the learning-rate schedule"),
    key!("train.eval_every", train.eval_every, "steps between development evaluations (0 = never)"),
    key!("train.patience", train.patience, "evaluations without improvement before stopping (0 = never)"),
    key!("train.dev_limit", train.dev_limit, "development triplets used per evaluation"),
    key!("train.dump_pseudo", train.dump_pseudo, "write every expanded batch to pseudo.tsv"),
    key!("infer.tau", infer.tau, "estimated edit rate above which the generative model rewrites"),
    key!("infer.iterations", infer.iterations, "refinement iterations of the atomic editor"),
    key!("infer.checkpoint", infer.checkpoint, "model checkpoint for infer, eval and sweep-tau"),
    key!("infer.input", infer.input, "triplets to post-edit with infer"),
];

fn lookup(key: &str) -> Result<&'static Key> {
    if let Some(k) = KEYS.iter().find(|k| k.name == key) {
        return Ok(k);
    }
    let matches: Vec<&Key> = KEYS
        .iter()
        .filter(|k| k.name.rsplit('.').next() == Some(key))
        .collect();
    match matches.as_slice() {
        [one] => Ok(one),
        [] => Err(ApeError::Config(format!("unknown key `{key}`"))),
        many => Err(ApeError::Config(format!(
            "ambiguous key `{key}`: one of {}",
            many.iter().map(|k| k.name).collect::<Vec<_>>().join(", ")
        ))),
    }
}

impl Config {
    /// Sets one key. `key` may be a full dotted name or a last segment that
    /// names exactly one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = lookup(key.trim())?;
        (k.set)(self, value.trim()).map_err(|e| ApeError::Config(format!("{}: cannot parse `{}`: {e}", k.name, value.trim())))
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok((lookup(key)?.get)(self))
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| ApeError::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ApeError::Parse {
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            cfg.set(k, v).map_err(|e| ApeError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ApeError::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its value, one per line, parseable by [`Config::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{} = {}", k.name, (k.get)(self));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ApeError::Config(m));
        if !(0.0..=1.0).contains(&self.infer.tau) {
            return fail(format!("infer.tau = {} is outside [0, 1]", self.infer.tau));
        }
        if self.infer.iterations == 0 {
            return fail("infer.iterations must be at least 1".into());
        }
        if self.model.heads == 0 || !self.model.d_model.is_multiple_of(self.model.heads) {
            return fail("model.d_model must be a multiple of model.heads".into());
        }
        if self.model.k_max == 0 {
            return fail("model.k_max must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return fail("model.dropout must be in [0, 1)".into());
        }
        if !(self.train.mask_rate > 0.0 && self.train.mask_rate < 1.0) {
            return fail("train.mask_rate must be in (0, 1)".into());
        }
        if self.data.oversample == 0 {
            return fail("data.oversample must be at least 1".into());
        }
        if self.data.min_tokens == 0 || self.data.min_tokens > self.data.max_tokens {
            return fail("need 1 <= data.min_tokens <= data.max_tokens".into());
        }
        self.imitation().validate()?;
        self.noise_spec(0).validate()
    }

    pub fn net_config(&self, vocab_size: usize) -> NetConfig {
        NetConfig {
            vocab_size,
            d_model: self.model.d_model,
            layers: self.model.layers,
            heads: self.model.heads,
            ffn: self.model.ffn,
            max_len: self.model.max_len,
            qe_classes: self.model.k_max + 2,
            dropout: self.model.dropout,
            shortcut: self.model.shortcut,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr_base: self.train.lr_base,
            warmup: self.train.warmup,
            ..AdamConfig::default()
        }
    }

    pub fn imitation(&self) -> ImitationConfig {
        ImitationConfig {
            beta: self.train.beta,
            mask_rate: self.train.mask_rate,
            ..ImitationConfig::default()
        }
    }

    pub fn noise_spec(&self, seed: u64) -> NoiseSpec {
        NoiseSpec {
            p_delete: self.noise.p_delete,
            p_substitute: self.noise.p_substitute,
            p_insert: self.noise.p_insert,
            p_swap: self.noise.p_swap,
            seed,
        }
    }

    /// Multi-line description of every key and its default, for `--help`.
    pub fn help_text() -> String {
        let width = KEYS.iter().map(|k| k.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for k in KEYS {
            let default = k.default_value();
            let default = if default.is_empty() { "\"\"".to_string() } else { default };
            let _ = writeln!(out, "  {:width$}  {} (default {default})", k.name, k.help);
        }
        out
    }
}
