//! Flat key=value run configuration.
//!
//! One text file, `key = value` per line, `#` comments. Command-line
//! `--set key=value` overrides beat file values. Unknown keys are rejected
//! with a nearest-key suggestion; every value is validated up front, before
//! any work starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use muse_core::optim::{ScheduleConfig, ScheduleKind};
use muse_core::{BeamConfig, BlockMode, ConvKind, Elem, ModelConfig, PositionalKind, Projection,
    TaskKind, TaskSpec, TrainConfig};

/// Every known key with its default (as text) and a short description.
const KEYS: &[(&str, &str, &str)] = &[
    // model
    ("mode", "muse", "muse | muse_simple"),
    ("projection", "shared", "shared | separate"),
    ("conv_kind", "dynamic", "dynamic | plain"),
    ("kernel_sizes", "3,15", "comma-separated odd kernel sizes"),
    ("n_layers", "2", "blocks per stack"),
    ("d", "64", "model width"),
    ("d_ff", "128", "pointwise hidden width"),
    ("heads", "4", "attention heads"),
    ("max_len", "64", "maximum sequence length incl. specials"),
    ("dropout", "0.1", "dropout rate"),
    ("label_smoothing", "0.1", "cross-entropy smoothing"),
    ("tie_embeddings", "true", "share source/target embedding table"),
    ("positional", "sinusoidal", "sinusoidal | none"),
    // data
    ("task", "copy", "copy | reverse | sort | files"),
    ("alphabet", "20", "synthetic task alphabet size"),
    ("len_min", "5", "synthetic minimum length"),
    ("len_max", "20", "synthetic maximum length"),
    ("train_samples", "10000", "synthetic training pairs"),
    ("eval_samples", "1000", "synthetic held-out pairs"),
    ("src_file", "", "training source file (task=files)"),
    ("tgt_file", "", "training target file (task=files)"),
    ("eval_src_file", "", "evaluation source file (task=files)"),
    ("eval_tgt_file", "", "evaluation target file (task=files)"),
    ("min_freq", "1", "vocabulary frequency threshold"),
    // training
    ("schedule", "inverse_sqrt", "inverse_sqrt | cosine"),
    ("warmup", "400", "warmup steps"),
    ("max_lr", "0.001", "peak learning rate"),
    ("min_lr", "1e-7", "cosine floor"),
    ("total_steps", "0", "cosine decay horizon"),
    ("max_tokens", "1024", "token budget per micro-batch"),
    ("accum", "1", "micro-batches per optimizer step"),
    ("epochs", "10", "training epochs"),
    ("max_steps", "0", "optimizer step cap, 0 = none"),
    ("clip_norm", "1.0", "gradient clip, 0 = off"),
    ("weight_decay", "0.0", "decoupled weight decay"),
    ("beta1", "0.9", "Adam beta1"),
    ("beta2", "0.98", "Adam beta2"),
    ("adam_eps", "1e-9", "Adam epsilon"),
    ("sort_by_length", "true", "sort sentences before batching"),
    // decoding / evaluation
    ("beam", "5", "beam size"),
    ("alpha", "1.0", "length penalty exponent"),
    ("buckets", "10,20,30,40", "bucket boundaries for evaluation"),
    ("smooth_bleu", "false", "add-one BLEU smoothing for tiny sentences"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.iter().any(|(k, _, _)| *k == key) {
        return Ok(());
    }
    let nearest = KEYS
        .iter()
        .map(|(k, _, _)| (levenshtein(key, k), *k))
        .min()
        .expect("key table is non-empty");
    if nearest.0 <= 3 {
        bail!("unknown config key \"{key}\"; did you mean \"{}\"?", nearest.1);
    }
    bail!("unknown config key \"{key}\"");
}

impl RunConfig {
    /// Parse an optional config file plus `key=value` overrides.
    pub fn parse(
        file: Option<&Path>,
        overrides: &[String],
        seed: u64,
        out_dir: Option<PathBuf>,
    ) -> Result<Self> {
        let mut values: BTreeMap<String, String> =
            KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect();

        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config file {}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    anyhow!("{}:{}: expected key = value", path.display(), lineno + 1)
                })?;
                let key = key.trim();
                check_key(key)?;
                values.insert(key.to_string(), value.trim().to_string());
            }
        }
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("--set needs key=value, got \"{item}\""))?;
            let key = key.trim();
            check_key(key)?;
            values.insert(key.to_string(), value.trim().to_string());
        }

        let cfg = RunConfig { values, seed, out_dir };
        cfg.validate()?;
        Ok(cfg)
    }

    fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or_default()
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        self.raw(key)
            .parse()
            .map_err(|_| anyhow!("config key \"{key}\": cannot parse \"{}\" as {what}", self.raw(key)))
    }

    fn usize_key(&self, key: &str) -> Result<usize> {
        self.parse_as(key, "an unsigned integer")
    }

    fn float_key(&self, key: &str) -> Result<Elem> {
        self.parse_as(key, "a number")
    }

    fn bool_key(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => bail!("config key \"{key}\": expected true/false, got \"{other}\""),
        }
    }

    fn list_key(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| anyhow!("config key \"{key}\": bad list element \"{p}\""))
            })
            .collect()
    }

    /// Validate every key eagerly so bad configs fail before any work.
    fn validate(&self) -> Result<()> {
        self.mode()?;
        self.projection()?;
        self.conv_kind()?;
        self.positional()?;
        self.task_kind()?;
        self.schedule_kind()?;
        for key in [
            "n_layers", "d", "d_ff", "heads", "max_len", "alphabet", "len_min", "len_max",
            "train_samples", "eval_samples", "min_freq", "warmup", "total_steps", "max_tokens",
            "accum", "epochs", "max_steps", "beam",
        ] {
            self.usize_key(key)?;
        }
        for key in [
            "dropout", "label_smoothing", "max_lr", "min_lr", "clip_norm", "weight_decay",
            "beta1", "beta2", "adam_eps", "alpha",
        ] {
            self.float_key(key)?;
        }
        for key in ["tie_embeddings", "sort_by_length", "smooth_bleu"] {
            self.bool_key(key)?;
        }
        self.list_key("kernel_sizes")?;
        self.list_key("buckets")?;
        Ok(())
    }

    fn mode(&self) -> Result<BlockMode> {
        match self.raw("mode") {
            "muse" => Ok(BlockMode::Muse),
            "muse_simple" => Ok(BlockMode::MuseSimple),
            other => bail!("config key \"mode\": expected muse or muse_simple, got \"{other}\""),
        }
    }

    fn projection(&self) -> Result<Projection> {
        match self.raw("projection") {
            "shared" => Ok(Projection::Shared),
            "separate" => Ok(Projection::Separate),
            other => bail!("config key \"projection\": expected shared or separate, got \"{other}\""),
        }
    }

    fn conv_kind(&self) -> Result<ConvKind> {
        match self.raw("conv_kind") {
            "dynamic" => Ok(ConvKind::DynamicDepthwise),
            "plain" => Ok(ConvKind::Plain),
            other => bail!("config key \"conv_kind\": expected dynamic or plain, got \"{other}\""),
        }
    }

    fn positional(&self) -> Result<PositionalKind> {
        match self.raw("positional") {
            "sinusoidal" => Ok(PositionalKind::Sinusoidal),
            "none" => Ok(PositionalKind::None),
            other => bail!("config key \"positional\": expected sinusoidal or none, got \"{other}\""),
        }
    }

    pub fn task_kind(&self) -> Result<Option<TaskKind>> {
        match self.raw("task") {
            "copy" => Ok(Some(TaskKind::Copy)),
            "reverse" => Ok(Some(TaskKind::Reverse)),
            "sort" => Ok(Some(TaskKind::Sort)),
            "files" => Ok(None),
            other => bail!(
                "config key \"task\": expected copy, reverse, sort, or files, got \"{other}\""
            ),
        }
    }

    fn schedule_kind(&self) -> Result<ScheduleKind> {
        match self.raw("schedule") {
            "inverse_sqrt" => Ok(ScheduleKind::InverseSqrt),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => bail!("config key \"schedule\": expected inverse_sqrt or cosine, got \"{other}\""),
        }
    }

    /// Model configuration minus the vocabulary sizes (filled after the
    /// vocabulary is built).
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            n_layers: self.usize_key("n_layers")?,
            d: self.usize_key("d")?,
            d_ff: self.usize_key("d_ff")?,
            heads: self.usize_key("heads")?,
            mode: self.mode()?,
            projection: self.projection()?,
            conv_kind: self.conv_kind()?,
            kernel_sizes: self.list_key("kernel_sizes")?,
            src_vocab: vocab_size,
            tgt_vocab: vocab_size,
            max_len: self.usize_key("max_len")?,
            dropout: self.float_key("dropout")?,
            label_smoothing: self.float_key("label_smoothing")?,
            tie_embeddings: self.bool_key("tie_embeddings")?,
            positional: self.positional()?,
        };
        cfg.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let schedule = ScheduleConfig {
            kind: self.schedule_kind()?,
            warmup: self.usize_key("warmup")?,
            max_lr: self.float_key("max_lr")?,
            min_lr: self.float_key("min_lr")?,
            total: self.usize_key("total_steps")?,
        };
        schedule.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(TrainConfig {
            schedule,
            max_tokens: self.usize_key("max_tokens")?,
            accum: self.usize_key("accum")?,
            epochs: self.usize_key("epochs")?,
            max_steps: self.usize_key("max_steps")?,
            clip_norm: self.float_key("clip_norm")?,
            weight_decay: self.float_key("weight_decay")?,
            beta1: self.float_key("beta1")?,
            beta2: self.float_key("beta2")?,
            adam_eps: self.float_key("adam_eps")?,
            sort_by_length: self.bool_key("sort_by_length")?,
            seed: self.seed,
        })
    }

    pub fn beam_config(&self) -> Result<BeamConfig> {
        let cfg = BeamConfig {
            beam_size: self.usize_key("beam")?,
            alpha: self.float_key("alpha")?,
            max_len: self.usize_key("max_len")?,
        };
        cfg.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(cfg)
    }

    /// Synthetic task spec for the training split.
    pub fn train_task(&self) -> Result<Option<TaskSpec>> {
        Ok(self.task_kind()?.map(|kind| TaskSpec {
            kind,
            alphabet: self.usize_key("alphabet").unwrap_or(20),
            len_min: self.usize_key("len_min").unwrap_or(5),
            len_max: self.usize_key("len_max").unwrap_or(20),
            count: self.usize_key("train_samples").unwrap_or(10000),
            seed: self.seed,
        }))
    }

    /// Held-out split: same shape, shifted seed.
    pub fn eval_task(&self) -> Result<Option<TaskSpec>> {
        Ok(self.train_task()?.map(|spec| TaskSpec {
            count: self.usize_key("eval_samples").unwrap_or(1000),
            seed: spec.seed + 1,
            ..spec
        }))
    }

    pub fn file(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn buckets(&self) -> Result<Vec<usize>> {
        self.list_key("buckets")
    }

    pub fn min_freq(&self) -> Result<usize> {
        self.usize_key("min_freq")
    }

    pub fn smooth_bleu(&self) -> Result<bool> {
        self.bool_key("smooth_bleu")
    }

    pub fn beam_size(&self) -> Result<usize> {
        self.usize_key("beam")
    }

    /// Resolved configuration as canonical text (for the output directory).
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| anyhow!("this command needs --out DIR for its artifacts"))
    }
}
