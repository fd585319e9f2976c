use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::generate::SyntheticSpec;
use crate::data::scene::{Color, Concept, Shape, View};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::prompts::pipeline::{DEFAULT_K, DEFAULT_MAX_NEW, DEFAULT_TTO_ITERS, DEFAULT_TTO_STEP};
use crate::tensor::OpKind;
use crate::training::TrainConfig;

/// Every setting a command reads, resolved from defaults, the config file
/// and command-line overrides. [`RunConfig::to_text`] is what gets echoed to
/// the output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Stage 2 overrides of `train.batch_size` and `train.lr`.
    pub stage2_batch_size: usize,
    pub stage2_lr: f64,
    pub data: SyntheticSpec,
    pub k: usize,
    pub tto_iters: usize,
    pub tto_step: f64,
    pub max_new: usize,
    /// Score ground-truth answers instead of model output.
    pub eval_oracle: bool,
    pub eval_split: String,
    pub vocabulary: Option<PathBuf>,
    pub seed: u64,
    pub gradcheck_inject_fault: Option<OpKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            stage1_steps: 3000,
            stage2_steps: 5000,
            stage2_batch_size: 32,
            stage2_lr: 2e-3,
            data: SyntheticSpec::default(),
            k: DEFAULT_K,
            tto_iters: DEFAULT_TTO_ITERS,
            tto_step: DEFAULT_TTO_STEP,
            max_new: DEFAULT_MAX_NEW,
            eval_oracle: false,
            eval_split: "test".into(),
            vocabulary: None,
            seed: 0,
            gradcheck_inject_fault: None,
        }
    }
}

/// Keys outside the model block, in echo order.
const RUN_KEYS: &[&str] = &[
    "seed",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "warmup_steps",
    "warmup_lr",
    "stage1_steps",
    "stage2_steps",
    "stage2_batch_size",
    "stage2_lr",
    "checkpoint_every",
    "dataset",
    "data_seed",
    "grid",
    "colors",
    "shapes",
    "views",
    "target",
    "target_rate",
    "max_distractors",
    "train_images",
    "val_images",
    "test_images",
    "k",
    "tto_iters",
    "tto_step",
    "max_new",
    "eval_split",
    "eval_oracle",
    "vocabulary",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list<T>(key: &str, value: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|w| f(w).ok_or_else(|| Error::Config(format!("bad value {w:?} for {key}"))))
        .collect()
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Applies `key=value` lines. Blank lines and `#` comments are skipped;
    /// unknown keys and malformed lines are errors naming the key.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if ModelConfig::KEYS.contains(&key) {
            self.model.set(key, value)?;
            if key == "image_size" {
                self.data.image_size = self.model.image_size;
            }
            if key == "image_channels" {
                self.data.channels = self.model.image_channels;
            }
            return Ok(());
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "adam_eps" => self.train.eps = parse(key, value)?,
            "warmup_steps" => self.train.warmup_steps = parse(key, value)?,
            "warmup_lr" => self.train.warmup_lr = parse(key, value)?,
            "stage1_steps" => self.stage1_steps = parse(key, value)?,
            "stage2_steps" => self.stage2_steps = parse(key, value)?,
            "stage2_batch_size" => self.stage2_batch_size = parse(key, value)?,
            "stage2_lr" => self.stage2_lr = parse(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "dataset" => self.train.dataset = opt_path(value),
            "data_seed" => self.data.seed = parse(key, value)?,
            "grid" => self.data.grid = parse(key, value)?,
            "colors" => self.data.colors = parse_list(key, value, Color::parse)?,
            "shapes" => self.data.shapes = parse_list(key, value, Shape::parse)?,
            "views" => self.data.views = parse_list(key, value, View::parse)?,
            "target" => {
                let words: Vec<&str> = value.split_whitespace().collect();
                let bad = || Error::Config(format!("bad value {value:?} for target"));
                let [c, s] = words[..] else { return Err(bad()) };
                self.data.target = Concept {
                    color: Color::parse(c).ok_or_else(bad)?,
                    shape: Shape::parse(s).ok_or_else(bad)?,
                };
            }
            "target_rate" => self.data.target_rate = parse(key, value)?,
            "max_distractors" => self.data.max_distractors = parse(key, value)?,
            "train_images" => self.data.train_images = parse(key, value)?,
            "val_images" => self.data.val_images = parse(key, value)?,
            "test_images" => self.data.test_images = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "tto_iters" => self.tto_iters = parse(key, value)?,
            "tto_step" => self.tto_step = parse(key, value)?,
            "max_new" => self.max_new = parse(key, value)?,
            "eval_split" => {
                if !["train", "val", "test"].contains(&value) {
                    return Err(Error::Config(format!("bad value {value:?} for eval_split")));
                }
                self.eval_split = value.to_string();
            }
            "eval_oracle" => self.eval_oracle = parse(key, value)?,
            "vocabulary" => self.vocabulary = opt_path(value),
            // Verification only; deliberately absent from the echo.
            "gradcheck_inject_fault" => {
                self.gradcheck_inject_fault = if value.is_empty() {
                    None
                } else {
                    Some(OpKind::from_name(value).ok_or_else(|| {
                        Error::Config(format!("bad value {value:?} for gradcheck_inject_fault"))
                    })?)
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Cross-field checks, run once every override is in.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "data image_size {} differs from model image_size {}",
                self.data.image_size, self.model.image_size
            )));
        }
        let mut t = self.train.clone();
        t.steps = self.stage1_steps.max(1);
        t.validate()?;
        let mut t2 = self.train_config(2);
        t2.steps = t2.steps.max(1);
        t2.validate()?;
        if self.stage2_steps == 0 {
            return Err(Error::Config("stage2_steps must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.tto_step >= 0.0) {
            return Err(Error::Config("tto_step must be non-negative".into()));
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let d = &self.data;
        let join = |v: Vec<&str>| v.join(",");
        match key {
            "seed" => self.seed.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "lr" => format!("{:e}", self.train.lr),
            "beta1" => self.train.beta1.to_string(),
            "beta2" => self.train.beta2.to_string(),
            "adam_eps" => format!("{:e}", self.train.eps),
            "warmup_steps" => self.train.warmup_steps.to_string(),
            "warmup_lr" => format!("{:e}", self.train.warmup_lr),
            "stage1_steps" => self.stage1_steps.to_string(),
            "stage2_steps" => self.stage2_steps.to_string(),
            "stage2_batch_size" => self.stage2_batch_size.to_string(),
            "stage2_lr" => format!("{:e}", self.stage2_lr),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            "dataset" => self
                .train
                .dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "data_seed" => d.seed.to_string(),
            "grid" => d.grid.to_string(),
            "colors" => join(d.colors.iter().map(|c| c.word()).collect()),
            "shapes" => join(d.shapes.iter().map(|s| s.word()).collect()),
            "views" => join(d.views.iter().map(|v| v.word()).collect()),
            "target" => d.target.phrase(),
            "target_rate" => d.target_rate.to_string(),
            "max_distractors" => d.max_distractors.to_string(),
            "train_images" => d.train_images.to_string(),
            "val_images" => d.val_images.to_string(),
            "test_images" => d.test_images.to_string(),
            "k" => self.k.to_string(),
            "tto_iters" => self.tto_iters.to_string(),
            "tto_step" => self.tto_step.to_string(),
            "max_new" => self.max_new.to_string(),
            "eval_split" => self.eval_split.clone(),
            "eval_oracle" => self.eval_oracle.to_string(),
            "vocabulary" => self
                .vocabulary
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            _ => unreachable!("echo of unlisted key {key}"),
        }
    }

    /// Every key in a fixed order, one `key = value` per line. Parsing the
    /// result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.model.to_pairs() {
            let v = if k == "ln_eps" { format!("{v:e}") } else { format!("{v}") };
            writeln!(out, "{k} = {v}").unwrap();
        }
        for k in RUN_KEYS {
            writeln!(out, "{k} = {}", self.value_of(k)).unwrap();
        }
        out
    }

    /// Stage settings for the trainer.
    pub fn train_config(&self, stage: u8) -> TrainConfig {
        let base = TrainConfig {
            stage,
            seed: self.seed,
            ..self.train.clone()
        };
        if stage == 1 {
            TrainConfig {
                steps: self.stage1_steps,
                ..base
            }
        } else {
            TrainConfig {
                steps: self.stage2_steps,
                batch_size: self.stage2_batch_size,
                lr: self.stage2_lr,
                ..base
            }
        }
    }
}
