//! Run configuration and its plain-text form.
//!
//! The file is a list of `key = value` lines grouped under `[section]`
//! headers; `#` starts a comment. Keys not present keep the value of the
//! base preset. Every key is listed in [`KEYS`], which also drives the
//! `--set section.key=value` overrides and the CLI help table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::losses::{FeatureSource, LossConfig, PerceptualAxes, RecTarget, SobelScale};
use crate::model::ModelConfig;
use crate::optim::{AdamWConfig, DecayTarget, Granularity, TrainSchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub seed: u64,
    /// Dataset directory containing `manifest.jsonl`.
    pub dataset: String,
    /// Write a checkpoint after every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    /// Cube side produced by `preprocess`.
    pub crop_side: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub folds: usize,
    pub inner_fraction: f64,
    pub c_grid: Vec<f64>,
    pub svm_iterations: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            inner_fraction: 0.2,
            c_grid: vec![0.01, 0.1, 1.0, 10.0],
            svm_iterations: 10000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub optim: AdamWConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            schedule: TrainSchedule::paper(),
            optim: AdamWConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainSettings {
                batch_size: 4,
                seed: 0,
                dataset: "data".into(),
                checkpoint_every: 100,
                precision: Precision::F32,
            },
            data: DataSettings { crop_side: 96 },
            probe: ProbeConfig::default(),
        }
    }

    /// Paper hyperparameters on the 32³ desk model for 100 epochs.
    pub fn desk() -> Self {
        let mut c = Self::paper();
        c.model = ModelConfig::desk();
        c.schedule = TrainSchedule::desk();
        c.train.checkpoint_every = 10;
        c.data.crop_side = 32;
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: String| ConfigError::Invalid(e);
        self.model.validate().map_err(|e| inv(e.to_string()))?;
        self.schedule.validate().map_err(|e| inv(e.to_string()))?;
        self.augment.validate().map_err(|e| inv(e.to_string()))?;
        if self.train.batch_size == 0 {
            return Err(inv("batch_size must be at least 1".into()));
        }
        let stages = self.loss.perceptual_widths.len();
        if self.loss.use_perceptual {
            if stages == 0 || self.loss.perceptual_widths.contains(&0) {
                return Err(inv("perceptual widths must be a non-empty list of positive integers".into()));
            }
            let need = 1usize << (stages - 1);
            if self.model.input_side % need != 0 {
                return Err(inv(format!(
                    "input side {} must be divisible by {need} for {stages} perceptual stages",
                    self.model.input_side
                )));
            }
        }
        if self.loss.use_edge && self.model.input_side < 3 {
            return Err(inv("edge loss needs an input side of at least 3".into()));
        }
        if !(self.loss.lambda2 >= 0.0) {
            return Err(inv("lambda2 must be non-negative".into()));
        }
        if self.probe.folds < 2 || !(self.probe.inner_fraction > 0.0 && self.probe.inner_fraction < 1.0) {
            return Err(inv("probe needs at least 2 folds and an inner fraction in (0, 1)".into()));
        }
        if self.probe.c_grid.is_empty() || self.probe.c_grid.iter().any(|&c| !(c > 0.0)) {
            return Err(inv("probe C grid must be non-empty and positive".into()));
        }
        if self.data.crop_side == 0 {
            return Err(inv("crop side must be positive".into()));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        let k = find_key(key)?;
        Ok((k.get)(self))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = find_key(key)?;
        (k.set)(self, value.trim()).map_err(|msg| ConfigError::Value {
            key: key.to_string(),
            msg,
        })
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (k, v) = spec.split_once('=').ok_or_else(|| ConfigError::Value {
            key: spec.to_string(),
            msg: "expected section.key=value".into(),
        })?;
        self.set(k.trim(), v)
    }

    /// Full text form listing every key.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# vitae run configuration\n");
        let mut section = "";
        for k in KEYS {
            let (sec, name) = k.name.split_once('.').expect("keys are section.name");
            if sec != section {
                let _ = write!(out, "\n[{sec}]\n");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {}", (k.get)(self));
        }
        out
    }

    /// Parses `text` on top of `base`.
    pub fn from_text(text: &str, base: &RunConfig) -> Result<Self, ConfigError> {
        let mut cfg = base.clone();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                    line: line_no,
                    msg: format!("malformed section header `{line}`"),
                })?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: line_no,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            let sec = section.as_deref().ok_or_else(|| ConfigError::Parse {
                line: line_no,
                msg: "key before any [section] header".into(),
            })?;
            let full = format!("{sec}.{}", k.trim());
            cfg.set(&full, v).map_err(|e| ConfigError::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }
}

/// Where a key's default comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// Value stated by the method description (desk preset may scale it down).
    Paper,
    /// Desk-scale or implementation choice with no published value.
    Desk,
}

pub struct Key {
    pub name: &'static str,
    pub origin: Origin,
    pub help: &'static str,
    pub get: fn(&RunConfig) -> String,
    pub set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

fn find_key(name: &str) -> Result<&'static Key, ConfigError> {
    KEYS.iter()
        .find(|k| k.name == name)
        .ok_or_else(|| ConfigError::UnknownKey(name.to_string()))
}

trait ConfigValue: Sized {
    fn show(&self) -> String;
    fn parse(s: &str) -> Result<Self, String>;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn show(&self) -> String {
                format!("{self:?}")
            }
            fn parse(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("cannot parse `{s}`: {e}"))
            }
        }
    )*};
}
from_str_value!(usize, u64, f64);

impl ConfigValue for bool {
    fn show(&self) -> String {
        (if *self { "on" } else { "off" }).into()
    }
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "on" | "true" | "yes" | "1" => Ok(true),
            "off" | "false" | "no" | "0" => Ok(false),
            _ => Err(format!("expected on/off, got `{s}`")),
        }
    }
}

impl ConfigValue for String {
    fn show(&self) -> String {
        self.clone()
    }
    fn parse(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
}

impl<V: ConfigValue> ConfigValue for Vec<V> {
    fn show(&self) -> String {
        self.iter().map(V::show).collect::<Vec<_>>().join(",")
    }
    fn parse(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| V::parse(p.trim())).collect()
    }
}

impl ConfigValue for [f64; 2] {
    fn show(&self) -> String {
        format!("{:?},{:?}", self[0], self[1])
    }
    fn parse(s: &str) -> Result<Self, String> {
        let v = Vec::<f64>::parse(s)?;
        <[f64; 2]>::try_from(v).map_err(|_| format!("expected two comma-separated numbers, got `{s}`"))
    }
}

macro_rules! serde_enum_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn show(&self) -> String {
                serde_json::to_value(self)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .expect("unit enum serializes to a string")
            }
            fn parse(s: &str) -> Result<Self, String> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|e| format!("`{s}`: {e}"))
            }
        }
    )*};
}
serde_enum_value!(Precision, DecayTarget, Granularity, RecTarget, PerceptualAxes, FeatureSource, SobelScale);

macro_rules! key {
    ($name:literal, $origin:ident, $help:literal, |$c:ident| $field:expr) => {
        Key {
            name: $name,
            origin: Origin::$origin,
            help: $help,
            get: |$c: &RunConfig| ConfigValue::show(&$field),
            set: |$c: &mut RunConfig, v: &str| {
                $field = ConfigValue::parse(v)?;
                Ok(())
            },
        }
    };
}

pub static KEYS: &[Key] = &[
    key!("model.input_side", Paper, "cube side of the network input in voxels", |c| c.model.input_side),
    key!("model.patch_side", Paper, "patch side in voxels", |c| c.model.patch_side),
    key!("model.channels", Paper, "input channels (modalities)", |c| c.model.channels),
    key!("model.enc_dim", Paper, "encoder width", |c| c.model.enc_dim),
    key!("model.enc_blocks", Paper, "encoder transformer blocks", |c| c.model.enc_blocks),
    key!("model.enc_heads", Desk, "encoder attention heads", |c| c.model.enc_heads),
    key!("model.dec_dim", Paper, "decoder width", |c| c.model.dec_dim),
    key!("model.dec_blocks", Paper, "decoder transformer blocks", |c| c.model.dec_blocks),
    key!("model.dec_heads", Desk, "decoder attention heads", |c| c.model.dec_heads),
    key!("model.mask_ratio", Paper, "fraction of patches hidden from the encoder", |c| c.model.mask_ratio),
    key!("model.predictor_hidden", Desk, "hidden width of the contrastive predictor", |c| c.model.predictor_hidden),
    key!("model.mlp_ratio", Desk, "transformer MLP width multiple", |c| c.model.mlp_ratio),
    key!("schedule.base_lr", Paper, "peak learning rate", |c| c.schedule.base_lr),
    key!("schedule.warmup_epochs", Paper, "linear warmup length in epochs", |c| c.schedule.warmup_epochs),
    key!("schedule.epochs", Paper, "total training epochs", |c| c.schedule.total_epochs),
    key!("schedule.lambda1_final", Desk, "floor of the decayed loss weight", |c| c.schedule.lambda1_final),
    key!("schedule.decay_target", Desk, "decayed weight: lambda1, lambda2 or none", |c| c.schedule.decay_target),
    key!("schedule.granularity", Desk, "schedule update: epoch or step", |c| c.schedule.granularity),
    key!("optim.beta1", Desk, "AdamW first-moment decay", |c| c.optim.beta1),
    key!("optim.beta2", Desk, "AdamW second-moment decay", |c| c.optim.beta2),
    key!("optim.eps", Desk, "AdamW denominator epsilon", |c| c.optim.eps),
    key!("optim.weight_decay", Paper, "decoupled weight decay", |c| c.optim.weight_decay),
    key!("loss.lambda1_init", Paper, "initial perceptual weight", |c| c.schedule.lambda1_init),
    key!("loss.lambda2", Paper, "edge loss weight", |c| c.loss.lambda2),
    key!("loss.predictor", Desk, "predictor head on the contrastive branch (on/off)", |c| c.loss.predictor),
    key!("loss.rec_target", Desk, "reconstruction region: full or hidden", |c| c.loss.rec_target),
    key!("loss.perceptual_axes", Desk, "perceptual slicing: axial or all", |c| c.loss.perceptual_axes),
    key!("loss.perceptual_widths", Desk, "perceptual stage widths", |c| c.loss.perceptual_widths),
    key!("loss.perceptual_seed", Desk, "seed of the frozen perceptual net", |c| c.loss.perceptual_seed),
    key!("loss.feature", Desk, "contrastive feature: cls or mean", |c| c.loss.feature),
    key!("loss.decode_both", Desk, "decode and score both views (on/off)", |c| c.loss.decode_both),
    key!("loss.edge_kernel", Desk, "Sobel gain: unit (slope 1 gives 1) or raw integer weights", |c| c.loss.sobel_scale),
    key!("loss.perceptual", Paper, "perceptual term enabled (on/off)", |c| c.loss.use_perceptual),
    key!("loss.edge", Paper, "edge term enabled (on/off)", |c| c.loss.use_edge),
    key!("loss.contrastive", Paper, "contrastive term enabled (on/off)", |c| c.loss.use_contrastive),
    key!("augment.gamma_range", Desk, "gamma exponent range", |c| c.augment.gamma_range),
    key!("augment.max_rotation_degrees", Desk, "rotation range per axis", |c| c.augment.max_rotation_degrees),
    key!("augment.max_translation_voxels", Desk, "translation range per axis", |c| c.augment.max_translation_voxels),
    key!("augment.max_scale_delta", Desk, "isotropic scale range around 1", |c| c.augment.max_scale_delta),
    key!("augment.noise_sigma_range", Desk, "Gaussian noise sigma range (0-255 scale)", |c| c.augment.noise_sigma_range),
    key!("train.batch_size", Paper, "volumes per optimizer step", |c| c.train.batch_size),
    key!("train.seed", Desk, "master seed", |c| c.train.seed),
    key!("train.dataset", Desk, "dataset directory", |c| c.train.dataset),
    key!("train.checkpoint_every", Desk, "checkpoint period in epochs (0 = end only)", |c| c.train.checkpoint_every),
    key!("train.precision", Desk, "f32 or f64", |c| c.train.precision),
    key!("data.crop_side", Paper, "preprocess crop side", |c| c.data.crop_side),
    key!("probe.folds", Paper, "outer cross-validation folds", |c| c.probe.folds),
    key!("probe.inner_fraction", Paper, "inner tuning split fraction", |c| c.probe.inner_fraction),
    key!("probe.c_grid", Desk, "SVM C candidates", |c| c.probe.c_grid),
    key!("probe.svm_iterations", Desk, "SVM subgradient iterations", |c| c.probe.svm_iterations),
    key!("probe.seed", Desk, "fold assignment seed", |c| c.probe.seed),
];

/// One line per key: name, paper value, desk value, origin and description.
pub fn key_table() -> String {
    let (paper, desk) = (RunConfig::paper(), RunConfig::desk());
    let mut out = String::new();
    for k in KEYS {
        let (p, d) = ((k.get)(&paper), (k.get)(&desk));
        let origin = match k.origin {
            Origin::Paper => format!("paper {p}"),
            Origin::Desk => "desk-scale".to_string(),
        };
        let _ = writeln!(out, "  {:<32} {:<14} [{origin}] {}", k.name, d, k.help);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_lossless() {
        for base in [RunConfig::paper(), RunConfig::desk()] {
            let text = base.to_text();
            assert_eq!(RunConfig::from_text(&text, &RunConfig::desk()).unwrap(), base);
        }
        let mut odd = RunConfig::desk();
        odd.schedule.base_lr = 0.1 + 0.2;
        odd.probe.c_grid = vec![1e-7, 3.3];
        odd.loss.rec_target = RecTarget::Hidden;
        assert_eq!(RunConfig::from_text(&odd.to_text(), &RunConfig::paper()).unwrap(), odd);
    }

    #[test]
    fn overrides_and_errors() {
        let mut c = RunConfig::desk();
        c.apply_override("model.mask_ratio=0.5").unwrap();
        c.apply_override("loss.predictor = off").unwrap();
        c.apply_override("train.precision=f64").unwrap();
        assert_eq!(c.model.mask_ratio, 0.5);
        assert!(!c.loss.predictor);
        assert_eq!(c.train.precision, Precision::F64);
        assert!(matches!(c.apply_override("model.nope=1"), Err(ConfigError::UnknownKey(_))));
        assert!(c.apply_override("model.enc_dim=abc").is_err());
        assert!(c.apply_override("loss.feature=pooled").is_err());
        assert!(c.apply_override("nonsense").is_err());
        let err = RunConfig::from_text("[model]\nenc_dim = 64\nbogus line\n", &c).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }));
        assert!(RunConfig::from_text("enc_dim = 4\n", &c).is_err());
    }

    #[test]
    fn comments_and_partial_files() {
        let text = "# header\n[schedule]\nepochs = 7 # short run\n\n[model]\nmask_ratio = 0.6\n";
        let c = RunConfig::from_text(text, &RunConfig::desk()).unwrap();
        assert_eq!(c.schedule.total_epochs, 7);
        assert_eq!(c.model.mask_ratio, 0.6);
        assert_eq!(c.model.enc_dim, 64);
    }

    #[test]
    fn presets_validate_and_bad_values_do_not() {
        RunConfig::paper().validate().unwrap();
        RunConfig::desk().validate().unwrap();
        let mut c = RunConfig::desk();
        c.train.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk();
        c.model.input_side = 30;
        c.model.patch_side = 5;
        c.model.enc_dim = 60;
        assert!(c.validate().is_err(), "30 is not divisible by 4 for three stages");
    }

    #[test]
    fn key_table_lists_every_key_once() {
        let table = key_table();
        for k in KEYS {
            assert_eq!(table.matches(&format!(" {} ", k.name)).count(), 1, "{}", k.name);
        }
        assert!(table.contains("paper 768"));
        assert!(table.contains("desk-scale"));
    }
}
