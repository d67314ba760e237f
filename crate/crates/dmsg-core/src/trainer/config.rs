//! Training configuration and its flat key=value file format.
//!
//! The file format is line-based: `key = value` pairs, `#` comments, and
//! `[section]` headers that exist purely for human grouping — keys are
//! globally unique, so a flat override list (e.g. from command-line flags)
//! can address every field without knowing sections.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::TrainerError;
use crate::graph::SplitRatios;
use crate::numerics::OptimizerKind;

/// Training regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mode {
    /// Combined objective with diversified memory replay.
    Dmsg,
    /// New-task cross-entropy only (forgetting lower bound).
    Finetune,
    /// Cross-entropy over all training nodes seen so far (upper bound).
    Joint,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dmsg" => Ok(Mode::Dmsg),
            "finetune" => Ok(Mode::Finetune),
            "joint" => Ok(Mode::Joint),
            other => Err(format!(
                "unknown mode {other:?} (expected dmsg, finetune, or joint)"
            )),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dmsg => "dmsg",
            Mode::Finetune => "finetune",
            Mode::Joint => "joint",
        })
    }
}

/// Update rule selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerChoice {
    /// Adaptive moments with decoupled weight decay.
    Adaptive,
    /// Plain gradient descent (the literal synchronized-update rule).
    PlainSgd,
}

impl OptimizerChoice {
    pub fn kind(self) -> OptimizerKind {
        match self {
            OptimizerChoice::Adaptive => OptimizerKind::Adaptive,
            OptimizerChoice::PlainSgd => OptimizerKind::PlainSgd,
        }
    }
}

impl FromStr for OptimizerChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adaptive" => Ok(OptimizerChoice::Adaptive),
            "plain-sgd" => Ok(OptimizerChoice::PlainSgd),
            other => Err(format!(
                "unknown optimizer {other:?} (expected adaptive or plain-sgd)"
            )),
        }
    }
}

impl fmt::Display for OptimizerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerChoice::Adaptive => "adaptive",
            OptimizerChoice::PlainSgd => "plain-sgd",
        })
    }
}

/// Everything one experiment needs beyond the dataset itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Classes arriving per task (the last task may get fewer).
    pub classes_per_task: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerChoice,
    /// New-task nodes per mini-batch step; 0 = full-batch.
    pub batch_new: usize,
    /// Buffer nodes per mini-batch step; 0 = derive from the population
    /// ratio (buffer batch : new batch = buffer nodes : new nodes).
    pub batch_buffer: usize,
    /// Neighbors sampled per node and hop when mini-batching.
    pub fanout: usize,
    /// Weight of the new-task cross-entropy.
    pub w_new: f64,
    /// Weight of the replayed-prediction loss.
    pub lambda_rp: f64,
    /// Weight of the adversarial alignment loss.
    pub lambda_mise: f64,
    /// Weight of the structure (pairwise + KL) loss.
    pub lambda_cgse: f64,
    pub hidden_dim: usize,
    /// Uniform half-width for newly added head columns (0 = start neutral).
    pub init_scale: f64,
    /// Hidden-layer dropout probability; 0 disables the mask entirely.
    pub dropout: f64,
    /// Per-class memory budget b.
    pub buffer_capacity: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    /// Write a parameter checkpoint after every task.
    pub checkpoint_per_task: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Dmsg,
            seed: 0,
            classes_per_task: 2,
            epochs: 200,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            optimizer: OptimizerChoice::Adaptive,
            batch_new: 0,
            batch_buffer: 0,
            fanout: 10,
            w_new: 1.0,
            lambda_rp: 20.0,
            lambda_mise: 1.0,
            lambda_cgse: 1.0,
            hidden_dim: 256,
            init_scale: 0.0,
            dropout: 0.0,
            buffer_capacity: 20,
            split_train: 0.6,
            split_val: 0.2,
            split_test: 0.2,
            checkpoint_per_task: false,
        }
    }
}

fn parsed<T: FromStr>(key: &str, value: &str) -> Result<T, TrainerError>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| TrainerError::Config(format!("{key}: {e}")))
}

impl TrainConfig {
    /// Sets one field by its flat key. Used both by the file parser and by
    /// command-line overrides, so the two override paths cannot drift.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainerError> {
        match key {
            "mode" => self.mode = parsed(key, value)?,
            "seed" => self.seed = parsed(key, value)?,
            "classes_per_task" => self.classes_per_task = parsed(key, value)?,
            "epochs" => self.epochs = parsed(key, value)?,
            "learning_rate" => self.learning_rate = parsed(key, value)?,
            "weight_decay" => self.weight_decay = parsed(key, value)?,
            "optimizer" => self.optimizer = parsed(key, value)?,
            "batch_new" => self.batch_new = parsed(key, value)?,
            "batch_buffer" => self.batch_buffer = parsed(key, value)?,
            "fanout" => self.fanout = parsed(key, value)?,
            "w_new" => self.w_new = parsed(key, value)?,
            "lambda_rp" => self.lambda_rp = parsed(key, value)?,
            "lambda_mise" => self.lambda_mise = parsed(key, value)?,
            "lambda_cgse" => self.lambda_cgse = parsed(key, value)?,
            "hidden_dim" => self.hidden_dim = parsed(key, value)?,
            "init_scale" => self.init_scale = parsed(key, value)?,
            "dropout" => self.dropout = parsed(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parsed(key, value)?,
            "split_train" => self.split_train = parsed(key, value)?,
            "split_val" => self.split_val = parsed(key, value)?,
            "split_test" => self.split_test = parsed(key, value)?,
            "checkpoint_per_task" => self.checkpoint_per_task = parsed(key, value)?,
            other => {
                return Err(TrainerError::Config(format!("unknown key {other:?}")));
            }
        }
        Ok(())
    }

    /// Applies a config file's text on top of `self`. Keys must be unique
    /// within the text; `origin` labels parse errors (usually the path).
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), TrainerError> {
        let mut seen = std::collections::BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| TrainerError::ConfigParse {
                origin: origin.to_string(),
                line: idx + 1,
                msg,
            };
            if line.starts_with('[') {
                if !line.ends_with(']') || line.len() < 3 {
                    return Err(err(format!("malformed section header {line:?}")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            self.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    /// The defaults overridden by a config file.
    pub fn from_file(path: &Path) -> Result<TrainConfig, TrainerError> {
        let text = fs::read_to_string(path).map_err(|e| {
            TrainerError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Renders the full configuration in the file format, sectioned for
    /// humans. Parsing the output reproduces `self` exactly.
    pub fn to_text(&self) -> String {
        format!(
            "[experiment]\n\
             mode = {}\n\
             seed = {}\n\
             classes_per_task = {}\n\
             \n\
             [optimization]\n\
             epochs = {}\n\
             learning_rate = {}\n\
             weight_decay = {}\n\
             optimizer = {}\n\
             batch_new = {}\n\
             batch_buffer = {}\n\
             fanout = {}\n\
             \n\
             [loss]\n\
             w_new = {}\n\
             lambda_rp = {}\n\
             lambda_mise = {}\n\
             lambda_cgse = {}\n\
             \n\
             [model]\n\
             hidden_dim = {}\n\
             init_scale = {}\n\
             dropout = {}\n\
             \n\
             [memory]\n\
             buffer_capacity = {}\n\
             \n\
             [data]\n\
             split_train = {}\n\
             split_val = {}\n\
             split_test = {}\n\
             \n\
             [output]\n\
             checkpoint_per_task = {}\n",
            self.mode,
            self.seed,
            self.classes_per_task,
            self.epochs,
            self.learning_rate,
            self.weight_decay,
            self.optimizer,
            self.batch_new,
            self.batch_buffer,
            self.fanout,
            self.w_new,
            self.lambda_rp,
            self.lambda_mise,
            self.lambda_cgse,
            self.hidden_dim,
            self.init_scale,
            self.dropout,
            self.buffer_capacity,
            self.split_train,
            self.split_val,
            self.split_test,
            self.checkpoint_per_task,
        )
    }

    pub fn split_ratios(&self) -> Result<SplitRatios, TrainerError> {
        SplitRatios::new(self.split_train, self.split_val, self.split_test)
            .map_err(|e| TrainerError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        let bad = |msg: String| Err(TrainerError::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, w) in [
            ("w_new", self.w_new),
            ("lambda_rp", self.lambda_rp),
            ("lambda_mise", self.lambda_mise),
            ("lambda_cgse", self.lambda_cgse),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("{name} must be >= 0, got {w}"));
            }
        }
        if self.classes_per_task == 0 {
            return bad("classes_per_task must be >= 1".into());
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1".into());
        }
        if self.buffer_capacity == 0 {
            return bad("buffer_capacity must be >= 1".into());
        }
        if self.fanout == 0 {
            return bad("fanout must be >= 1".into());
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad(format!("init_scale must be >= 0, got {}", self.init_scale));
        }
        if !(self.dropout.is_finite() && (0.0..1.0).contains(&self.dropout)) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.batch_new == 0 && self.batch_buffer != 0 {
            return bad("batch_buffer needs batch_new > 0 (mini-batching off)".into());
        }
        self.split_ratios()?;
        Ok(())
    }
}
