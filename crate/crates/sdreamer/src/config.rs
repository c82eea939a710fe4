//! Run configuration: a flat `key = value` text file plus command-line
//! overrides.
//!
//! One file describes a whole run — model kind and architecture, optimizer
//! and distillation settings, data paths and subject splits, step budget,
//! and the ablation switches. Overrides (`--override key=value`) apply after
//! the file, so flags beat the file. Parsing and validation both collect
//! *every* problem before reporting, so a bad config is fixed in one pass.
//!
//! The same text form is echoed verbatim into checkpoints; re-parsing an
//! echo reproduces the configuration that produced it.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::model::{EpochModelConfig, SequenceModelConfig};
use crate::train::{DistillConfig, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Epoch,
    Sequence,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Epoch => "epoch",
            ModelKind::Sequence => "sequence",
        }
    }
}

/// Every tunable of a run, with defaults matching the reference
/// hyperparameters (epoch kind, 4 layers, mix experts in the last layer,
/// D=128, W=16, AdamW 1e-3/1e-4, alpha 0.33, temperatures 1 and 3).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub seed: u64,
    pub steps: u64,
    /// `None` picks the kind's default: 256 epochs or 16 sequences.
    pub batch_size: Option<usize>,
    pub eval_interval: u64,
    pub eval_subset: usize,
    pub stop_at_accuracy: Option<f64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub tau_eeg: f64,
    pub tau_emg: f64,
    pub detach_teacher: bool,
    pub scale_by_tau_sq: bool,
    pub kl_teacher_first: bool,
    pub sd_eeg_on: bool,
    pub sd_emg_on: bool,
    pub layers: usize,
    pub mix_start_layer: usize,
    pub epoch_layers: usize,
    pub seq_layers: usize,
    pub seq_mix_start_layer: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub patch_width: usize,
    /// `None` derives the patch count from the data's sample rate.
    pub patches: Option<usize>,
    pub heads: usize,
    pub ffn_dim: usize,
    pub n_classes: usize,
    pub use_pos_encoding: bool,
    pub use_mod_encoding: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: ModelKind::Epoch,
            data_dir: PathBuf::new(),
            out_dir: PathBuf::from("out"),
            train_subjects: Vec::new(),
            test_subjects: Vec::new(),
            seed: 0,
            steps: 2000,
            batch_size: None,
            eval_interval: 100,
            eval_subset: 0,
            stop_at_accuracy: None,
            lr: 1e-3,
            weight_decay: 1e-4,
            alpha: 0.33,
            tau_eeg: 1.0,
            tau_emg: 3.0,
            detach_teacher: true,
            scale_by_tau_sq: false,
            kl_teacher_first: false,
            sd_eeg_on: true,
            sd_emg_on: true,
            layers: 4,
            mix_start_layer: 4,
            epoch_layers: 2,
            seq_layers: 3,
            seq_mix_start_layer: 3,
            seq_len: 16,
            dim: 128,
            patch_width: 16,
            patches: None,
            heads: 4,
            ffn_dim: 512,
            n_classes: 3,
            use_pos_encoding: true,
            use_mod_encoding: true,
        }
    }
}

/// All problems found in one parse or validation pass.
#[derive(Debug, Error)]
#[error("invalid configuration:\n  {}", issues.join("\n  "))]
pub struct ConfigError {
    pub issues: Vec<String>,
}

fn parse_subjects(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

impl RunConfig {
    /// Parse a config file's text on top of the defaults.
    pub fn parse_text(text: &str) -> Result<RunConfig, ConfigError> {
        let mut config = RunConfig::default();
        let mut issues = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                issues.push(format!("line {}: expected `key = value`, got {:?}", lineno + 1, line));
                continue;
            };
            if let Err(e) = config.set(key.trim(), value.trim()) {
                issues.push(e);
            }
        }
        if issues.is_empty() { Ok(config) } else { Err(ConfigError { issues }) }
    }

    /// Apply `key=value` override pairs (flags beat the file).
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        for pair in pairs {
            match pair.split_once('=') {
                Some((key, value)) => {
                    if let Err(e) = self.set(key.trim(), value.trim()) {
                        issues.push(e);
                    }
                }
                None => issues.push(format!("override {pair:?}: expected key=value")),
            }
        }
        if issues.is_empty() { Ok(()) } else { Err(ConfigError { issues }) }
    }

    /// Set one field from its text form. The error names the field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("{key}: expected {what}, got {value:?}"))
        }
        fn flag(key: &str, value: &str) -> Result<bool, String> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("{key}: expected true or false, got {value:?}")),
            }
        }
        match key {
            "kind" => {
                self.kind = match value {
                    "epoch" => ModelKind::Epoch,
                    "sequence" => ModelKind::Sequence,
                    _ => return Err(format!("kind: expected epoch or sequence, got {value:?}")),
                }
            }
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "train_subjects" => self.train_subjects = parse_subjects(value),
            "test_subjects" => self.test_subjects = parse_subjects(value),
            "seed" => self.seed = num(key, value, "an unsigned integer")?,
            "steps" => self.steps = num(key, value, "an unsigned integer")?,
            "batch_size" => {
                self.batch_size = match value {
                    "auto" => None,
                    _ => Some(num(key, value, "an unsigned integer or auto")?),
                }
            }
            "eval_interval" => self.eval_interval = num(key, value, "an unsigned integer")?,
            "eval_subset" => self.eval_subset = num(key, value, "an unsigned integer")?,
            "stop_at_accuracy" => {
                self.stop_at_accuracy = match value {
                    "none" => None,
                    _ => Some(num(key, value, "a number or none")?),
                }
            }
            "lr" => self.lr = num(key, value, "a number")?,
            "weight_decay" => self.weight_decay = num(key, value, "a number")?,
            "alpha" => self.alpha = num(key, value, "a number")?,
            "tau_eeg" => self.tau_eeg = num(key, value, "a number")?,
            "tau_emg" => self.tau_emg = num(key, value, "a number")?,
            "detach_teacher" => self.detach_teacher = flag(key, value)?,
            "scale_by_tau_sq" => self.scale_by_tau_sq = flag(key, value)?,
            "kl_teacher_first" => self.kl_teacher_first = flag(key, value)?,
            "sd_eeg_on" => self.sd_eeg_on = flag(key, value)?,
            "sd_emg_on" => self.sd_emg_on = flag(key, value)?,
            "layers" => self.layers = num(key, value, "an unsigned integer")?,
            "mix_start_layer" => self.mix_start_layer = num(key, value, "an unsigned integer")?,
            "epoch_layers" => self.epoch_layers = num(key, value, "an unsigned integer")?,
            "seq_layers" => self.seq_layers = num(key, value, "an unsigned integer")?,
            "seq_mix_start_layer" => {
                self.seq_mix_start_layer = num(key, value, "an unsigned integer")?
            }
            "seq_len" => self.seq_len = num(key, value, "an unsigned integer")?,
            "dim" => self.dim = num(key, value, "an unsigned integer")?,
            "patch_width" => self.patch_width = num(key, value, "an unsigned integer")?,
            "patches" => {
                self.patches = match value {
                    "auto" => None,
                    _ => Some(num(key, value, "an unsigned integer or auto")?),
                }
            }
            "heads" => self.heads = num(key, value, "an unsigned integer")?,
            "ffn_dim" => self.ffn_dim = num(key, value, "an unsigned integer")?,
            "n_classes" => self.n_classes = num(key, value, "an unsigned integer")?,
            "use_pos_encoding" => self.use_pos_encoding = flag(key, value)?,
            "use_mod_encoding" => self.use_mod_encoding = flag(key, value)?,
            _ => return Err(format!("{key}: unknown key")),
        }
        Ok(())
    }

    /// Check cross-field invariants, reporting every violation.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut bad = |msg: String| issues.push(msg);

        if self.data_dir.as_os_str().is_empty() {
            bad("data_dir: must be set".into());
        }
        if self.train_subjects.is_empty() {
            bad("train_subjects: must list at least one subject".into());
        }
        if self.test_subjects.is_empty() {
            bad("test_subjects: must list at least one subject".into());
        }
        for s in &self.train_subjects {
            if self.test_subjects.contains(s) {
                bad(format!("train_subjects/test_subjects: subject {s} appears in both"));
            }
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            bad(format!("lr: must be a finite non-negative number, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bad(format!("weight_decay: must be finite and non-negative, got {}", self.weight_decay));
        }
        if !(self.alpha.is_finite() && (0.0..=1.0).contains(&self.alpha)) {
            bad(format!("alpha: must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.tau_eeg.is_finite() && self.tau_eeg > 0.0) {
            bad(format!("tau_eeg: must be positive, got {}", self.tau_eeg));
        }
        if !(self.tau_emg.is_finite() && self.tau_emg > 0.0) {
            bad(format!("tau_emg: must be positive, got {}", self.tau_emg));
        }
        if let Some(a) = self.stop_at_accuracy {
            if !(a.is_finite() && (0.0..=1.0).contains(&a)) {
                bad(format!("stop_at_accuracy: must lie in [0, 1], got {a}"));
            }
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            bad(format!("dim/heads: dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.patch_width == 0 {
            bad("patch_width: must be at least 1".into());
        }
        if self.patches == Some(0) {
            bad("patches: must be at least 1 (or auto)".into());
        }
        if self.ffn_dim == 0 {
            bad("ffn_dim: must be at least 1".into());
        }
        if self.n_classes < 2 {
            bad(format!("n_classes: must be at least 2, got {}", self.n_classes));
        }
        match self.kind {
            ModelKind::Epoch => {
                if self.layers == 0 || !(1..=self.layers).contains(&self.mix_start_layer) {
                    bad(format!(
                        "mix_start_layer: must lie in 1..={} (layers), got {}",
                        self.layers, self.mix_start_layer
                    ));
                }
            }
            ModelKind::Sequence => {
                if self.seq_layers == 0
                    || !(1..=self.seq_layers).contains(&self.seq_mix_start_layer)
                {
                    bad(format!(
                        "seq_mix_start_layer: must lie in 1..={} (seq_layers), got {}",
                        self.seq_layers, self.seq_mix_start_layer
                    ));
                }
                if self.seq_len == 0 {
                    bad("seq_len: must be at least 1".into());
                }
            }
        }
        if issues.is_empty() { Ok(()) } else { Err(ConfigError { issues }) }
    }

    /// Full text form; `parse_text` of the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let subjects = |list: &[String]| list.join(",");
        let _ = writeln!(s, "kind = {}", self.kind.as_str());
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "train_subjects = {}", subjects(&self.train_subjects));
        let _ = writeln!(s, "test_subjects = {}", subjects(&self.test_subjects));
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = match self.batch_size {
            Some(b) => writeln!(s, "batch_size = {b}"),
            None => writeln!(s, "batch_size = auto"),
        };
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let _ = writeln!(s, "eval_subset = {}", self.eval_subset);
        let _ = match self.stop_at_accuracy {
            Some(a) => writeln!(s, "stop_at_accuracy = {a}"),
            None => writeln!(s, "stop_at_accuracy = none"),
        };
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "tau_eeg = {}", self.tau_eeg);
        let _ = writeln!(s, "tau_emg = {}", self.tau_emg);
        let _ = writeln!(s, "detach_teacher = {}", self.detach_teacher);
        let _ = writeln!(s, "scale_by_tau_sq = {}", self.scale_by_tau_sq);
        let _ = writeln!(s, "kl_teacher_first = {}", self.kl_teacher_first);
        let _ = writeln!(s, "sd_eeg_on = {}", self.sd_eeg_on);
        let _ = writeln!(s, "sd_emg_on = {}", self.sd_emg_on);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "mix_start_layer = {}", self.mix_start_layer);
        let _ = writeln!(s, "epoch_layers = {}", self.epoch_layers);
        let _ = writeln!(s, "seq_layers = {}", self.seq_layers);
        let _ = writeln!(s, "seq_mix_start_layer = {}", self.seq_mix_start_layer);
        let _ = writeln!(s, "seq_len = {}", self.seq_len);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "patch_width = {}", self.patch_width);
        let _ = match self.patches {
            Some(p) => writeln!(s, "patches = {p}"),
            None => writeln!(s, "patches = auto"),
        };
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "ffn_dim = {}", self.ffn_dim);
        let _ = writeln!(s, "n_classes = {}", self.n_classes);
        let _ = writeln!(s, "use_pos_encoding = {}", self.use_pos_encoding);
        let _ = writeln!(s, "use_mod_encoding = {}", self.use_mod_encoding);
        s
    }

    /// Batch size, defaulted by kind: 256 epochs or 16 sequence windows.
    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.kind {
            ModelKind::Epoch => 256,
            ModelKind::Sequence => 16,
        })
    }

    pub fn epoch_model_config(&self, patches: usize) -> EpochModelConfig {
        EpochModelConfig {
            layers: self.layers,
            mix_start_layer: self.mix_start_layer,
            dim: self.dim,
            patch_width: self.patch_width,
            patches,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            n_classes: self.n_classes,
            use_pos_encoding: self.use_pos_encoding,
            use_mod_encoding: self.use_mod_encoding,
        }
    }

    pub fn sequence_model_config(&self, patches: usize) -> SequenceModelConfig {
        SequenceModelConfig {
            epoch_layers: self.epoch_layers,
            seq_layers: self.seq_layers,
            seq_mix_start_layer: self.seq_mix_start_layer,
            seq_len: self.seq_len,
            dim: self.dim,
            patch_width: self.patch_width,
            patches,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            n_classes: self.n_classes,
            use_pos_encoding: self.use_pos_encoding,
            use_mod_encoding: self.use_mod_encoding,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            tau_eeg: self.tau_eeg,
            tau_emg: self.tau_emg,
            alpha: self.alpha,
            detach_teacher: self.detach_teacher,
            scale_by_tau_sq: self.scale_by_tau_sq,
            kl_teacher_first: self.kl_teacher_first,
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig { lr: self.lr, weight_decay: self.weight_decay, ..OptimConfig::default() }
    }
}
