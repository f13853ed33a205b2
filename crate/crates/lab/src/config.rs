//! Run configuration: a flat `section.key = value` file.
//!
//! Every key has a default (the toy profile), so a config file only lists
//! overrides. Unknown or repeated keys are errors. [`RunConfig::render`]
//! writes the fully resolved configuration back in the same syntax.

use std::fmt::Write as _;
use std::path::Path;

use excitor_core::baselines::{LoraConfig, PrefixConfig};
use excitor_core::data::{TaskKind, TemplateStyle};
use excitor_core::excitor::{ExcitorConfig, ProjectionSet};
use excitor_core::model::{Adapter, ModelConfig};
use excitor_core::optim::{AdamWConfig, Schedule};

use crate::error::{LabError, Result};

/// Which parameters a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    None,
    Excitor,
    ExcitorMm,
    Lora,
    Prefix,
    Full,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 6] = [
        AdapterKind::None,
        AdapterKind::Excitor,
        AdapterKind::ExcitorMm,
        AdapterKind::Lora,
        AdapterKind::Prefix,
        AdapterKind::Full,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LabError::Config(format!("unknown adapter {s:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::None => "none",
            AdapterKind::Excitor => "excitor",
            AdapterKind::ExcitorMm => "excitor-mm",
            AdapterKind::Lora => "lora",
            AdapterKind::Prefix => "prefix",
            AdapterKind::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate at the end of the cosine decay.
    pub lr_floor: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eval_every: usize,
    /// Stop once the eval exact match reaches this value; 0 disables.
    pub target_exact: f64,
    /// Stop once the eval loss falls to this value; 0 disables.
    pub target_loss: f64,
    /// Full training of the base model on `data.pretrain_task`.
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Worker threads for sweeps; 0 means all available cores.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub task: TaskKind,
    pub pretrain_task: TaskKind,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub probe_samples: usize,
    pub alphabet: String,
    pub min_len: usize,
    pub max_len: usize,
    pub template: TemplateStyle,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub model_seed: u64,
    pub excitor: ExcitorConfig,
    pub lora: LoraConfig,
    pub prefix: PrefixConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| LabError::Config(format!("{key}: cannot parse {v:?}")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(LabError::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Desk-scale defaults used by the acceptance runs.
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        Self {
            model,
            model_seed: 1,
            excitor: ExcitorConfig::toy(model.n_layers),
            lora: LoraConfig::new(3, 4),
            prefix: PrefixConfig {
                n_layers: 3,
                prefix_len: 16,
            },
            train: TrainConfig {
                steps: 2000,
                batch: 32,
                lr: 3e-3,
                lr_floor: 3e-4,
                warmup: 100,
                weight_decay: 0.0,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                eval_every: 50,
                target_exact: 0.0,
                target_loss: 0.0,
                pretrain_steps: 1500,
                pretrain_lr: 3e-3,
                workers: 0,
            },
            data: DataConfig {
                task: TaskKind::Reverse,
                pretrain_task: TaskKind::Copy,
                train_samples: 4096,
                eval_samples: 256,
                probe_samples: 64,
                alphabet: "abcdefghijklmnop".into(),
                min_len: 3,
                max_len: 8,
                template: TemplateStyle::Compact,
                seed: 7,
            },
        }
    }

    /// Optimiser settings reported for the 7B runs: lr 9e-3, weight decay
    /// 0.02, batch 64, five epochs with two of warmup.
    pub fn paper_profile() -> Self {
        let mut c = Self::toy();
        let steps_per_epoch = c.data.train_samples / 64;
        c.train.batch = 64;
        c.train.lr = 9e-3;
        c.train.lr_floor = 0.0;
        c.train.weight_decay = 0.02;
        c.train.steps = 5 * steps_per_epoch;
        c.train.warmup = 2 * steps_per_epoch;
        c.excitor.rank = 16;
        c
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::toy();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected key = value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(LabError::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
            c.set(k, v)
                .map_err(|e| LabError::Config(format!("line {}: {}", i + 1, strip(e))))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text).map_err(|e| LabError::Config(format!("{}: {}", path.display(), strip(e))))
    }

    /// Apply one `section.key` override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let e = &mut self.excitor;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "model.n_layers" => m.n_layers = num(key, v)?,
            "model.dim" => m.dim = num(key, v)?,
            "model.n_heads" => m.n_heads = num(key, v)?,
            "model.vocab" => m.vocab = num(key, v)?,
            "model.max_seq" => m.max_seq = num(key, v)?,
            "model.mlp_hidden" => m.mlp_hidden = num(key, v)?,
            "model.rope_base" => m.rope_base = num(key, v)?,
            "model.norm_eps" => m.norm_eps = num(key, v)?,
            "model.tie_embeddings" => m.tie_embeddings = boolean(key, v)?,
            "model.seed" => self.model_seed = num(key, v)?,
            "excitor.layers" => e.n_excited_layers = num(key, v)?,
            "excitor.prompt_len" => e.prompt_len = num(key, v)?,
            "excitor.rank" => e.rank = num(key, v)?,
            "excitor.gate_std" => e.gate_std = num(key, v)?,
            "excitor.gate_per_head" => e.gate_per_head = boolean(key, v)?,
            "excitor.projection" => e.projection = ProjectionSet::parse(v)?,
            "excitor.visual_dim" => e.visual_dim = Some(num(key, v)?),
            "lora.layers" => self.lora.n_layers = num(key, v)?,
            "lora.rank" => self.lora.rank = num(key, v)?,
            "lora.alpha" => self.lora.alpha = num(key, v)?,
            "prefix.layers" => self.prefix.n_layers = num(key, v)?,
            "prefix.prefix_len" => self.prefix.prefix_len = num(key, v)?,
            "train.steps" => t.steps = num(key, v)?,
            "train.batch" => t.batch = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.lr_floor" => t.lr_floor = num(key, v)?,
            "train.warmup" => t.warmup = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.beta1" => t.beta1 = num(key, v)?,
            "train.beta2" => t.beta2 = num(key, v)?,
            "train.eps" => t.eps = num(key, v)?,
            "train.eval_every" => t.eval_every = num(key, v)?,
            "train.target_exact" => t.target_exact = num(key, v)?,
            "train.target_loss" => t.target_loss = num(key, v)?,
            "train.pretrain_steps" => t.pretrain_steps = num(key, v)?,
            "train.pretrain_lr" => t.pretrain_lr = num(key, v)?,
            "train.workers" => t.workers = num(key, v)?,
            "data.task" => d.task = TaskKind::parse(v)?,
            "data.pretrain_task" => d.pretrain_task = TaskKind::parse(v)?,
            "data.train_samples" => d.train_samples = num(key, v)?,
            "data.eval_samples" => d.eval_samples = num(key, v)?,
            "data.probe_samples" => d.probe_samples = num(key, v)?,
            "data.alphabet" => d.alphabet = v.to_string(),
            "data.min_len" => d.min_len = num(key, v)?,
            "data.max_len" => d.max_len = num(key, v)?,
            "data.template" => d.template = TemplateStyle::parse(v)?,
            "data.seed" => d.seed = num(key, v)?,
            _ => return Err(LabError::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Apply `key=value` overrides such as those given on the command line.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// All keys with their resolved values, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let e = &self.excitor;
        let t = &self.train;
        let d = &self.data;
        let mut v = vec![
            ("model.n_layers", m.n_layers.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.n_heads", m.n_heads.to_string()),
            ("model.vocab", m.vocab.to_string()),
            ("model.max_seq", m.max_seq.to_string()),
            ("model.mlp_hidden", m.mlp_hidden.to_string()),
            ("model.rope_base", m.rope_base.to_string()),
            ("model.norm_eps", m.norm_eps.to_string()),
            ("model.tie_embeddings", m.tie_embeddings.to_string()),
            ("model.seed", self.model_seed.to_string()),
            ("excitor.layers", e.n_excited_layers.to_string()),
            ("excitor.prompt_len", e.prompt_len.to_string()),
            ("excitor.rank", e.rank.to_string()),
            ("excitor.gate_std", e.gate_std.to_string()),
            ("excitor.gate_per_head", e.gate_per_head.to_string()),
            ("excitor.projection", e.projection.label()),
        ];
        if let Some(dv) = e.visual_dim {
            v.push(("excitor.visual_dim", dv.to_string()));
        }
        v.extend([
            ("lora.layers", self.lora.n_layers.to_string()),
            ("lora.rank", self.lora.rank.to_string()),
            ("lora.alpha", self.lora.alpha.to_string()),
            ("prefix.layers", self.prefix.n_layers.to_string()),
            ("prefix.prefix_len", self.prefix.prefix_len.to_string()),
            ("train.steps", t.steps.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.lr_floor", t.lr_floor.to_string()),
            ("train.warmup", t.warmup.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.eval_every", t.eval_every.to_string()),
            ("train.target_exact", t.target_exact.to_string()),
            ("train.target_loss", t.target_loss.to_string()),
            ("train.pretrain_steps", t.pretrain_steps.to_string()),
            ("train.pretrain_lr", t.pretrain_lr.to_string()),
            ("train.workers", t.workers.to_string()),
            ("data.task", d.task.name().to_string()),
            ("data.pretrain_task", d.pretrain_task.name().to_string()),
            ("data.train_samples", d.train_samples.to_string()),
            ("data.eval_samples", d.eval_samples.to_string()),
            ("data.probe_samples", d.probe_samples.to_string()),
            ("data.alphabet", d.alphabet.clone()),
            ("data.min_len", d.min_len.to_string()),
            ("data.max_len", d.max_len.to_string()),
            ("data.template", d.template.name().to_string()),
            ("data.seed", d.seed.to_string()),
        ]);
        v
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let s = k.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.validate()?;
        let t = &self.train;
        if t.batch == 0 {
            return Err(LabError::Config("train.batch must be >= 1".into()));
        }
        if !(t.lr >= 0.0 && t.lr_floor >= 0.0 && t.pretrain_lr >= 0.0) {
            return Err(LabError::Config("learning rates must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.eps <= 0.0 {
            return Err(LabError::Config("AdamW betas must lie in [0, 1) and eps be > 0".into()));
        }
        if t.weight_decay < 0.0 {
            return Err(LabError::Config("train.weight_decay must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&t.target_exact) {
            return Err(LabError::Config("train.target_exact must lie in [0, 1]".into()));
        }
        if !(t.target_loss >= 0.0) {
            return Err(LabError::Config("train.target_loss must be >= 0".into()));
        }
        let d = &self.data;
        if d.alphabet.is_empty() || d.min_len == 0 || d.min_len > d.max_len {
            return Err(LabError::Config("data: need a non-empty alphabet and 1 <= min_len <= max_len".into()));
        }
        for c in d.alphabet.chars() {
            excitor_core::data::char_id(c)?;
        }
        if d.train_samples == 0 || d.eval_samples == 0 {
            return Err(LabError::Config("data: sample counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
            weight_decay: self.train.weight_decay,
        }
    }

    pub fn schedule(&self, steps: usize, lr: f64) -> Schedule {
        let floor = if self.train.lr > 0.0 {
            lr * self.train.lr_floor / self.train.lr
        } else {
            0.0
        };
        Schedule {
            peak: lr,
            floor,
            warmup: self.train.warmup.min(steps),
            total: steps,
        }
    }

    /// Core adapter description for `kind`. `Full` and `None` attach nothing.
    pub fn adapter(&self, kind: AdapterKind) -> Adapter {
        match kind {
            AdapterKind::None | AdapterKind::Full => Adapter::None,
            AdapterKind::Excitor => Adapter::Excitor(ExcitorConfig {
                visual_dim: None,
                ..self.excitor
            }),
            AdapterKind::ExcitorMm => Adapter::Excitor(ExcitorConfig {
                visual_dim: Some(self.excitor.visual_dim.unwrap_or(DEFAULT_VISUAL_DIM)),
                ..self.excitor
            }),
            AdapterKind::Lora => Adapter::Lora(self.lora),
            AdapterKind::Prefix => Adapter::Prefix(self.prefix),
        }
    }

    pub fn visual_dim(&self) -> usize {
        self.excitor.visual_dim.unwrap_or(DEFAULT_VISUAL_DIM)
    }
}

/// Toy visual feature width.
pub const DEFAULT_VISUAL_DIM: usize = 16;

fn strip(e: LabError) -> String {
    match e {
        LabError::Config(s) => s,
        other => other.to_string(),
    }
}
