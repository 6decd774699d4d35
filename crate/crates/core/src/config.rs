//! Declarative run configuration.
//!
//! A config is one strict JSON document with a `version` field. Validation
//! walks the raw document against [`CONFIG_KEYS`] first, so unknown keys,
//! wrong types and out-of-range values are all reported together before any
//! work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fusion::PoolingConfig;
use crate::masking::{MaskMode, MaskSchedule};
use crate::model::ModelConfig;
use crate::synthdata::{benchmark_pair, DomainSpec, Shift, AXES};
use crate::uda::{AdamConfig, GroupRates, Scheduling, StepSettings};

pub const CONFIG_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub masking: MaskingConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            masking: MaskingConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
            output_dir: default_output(),
        }
    }
}

/// Where scenes come from: dataset directories, an inline domain pair, or a
/// named benchmark, checked in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub benchmark: Shift,
    /// Seeds scene generation; independent of the training seed.
    pub seed: u64,
    pub source: Option<DomainSpec>,
    pub target: Option<DomainSpec>,
    pub source_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            benchmark: Shift::Medium,
            seed: 7,
            source: None,
            target: None,
            source_dir: None,
            target_dir: None,
            val_dir: None,
            source_train: 200,
            target_train: 200,
            target_val: 100,
        }
    }
}

impl DataConfig {
    /// Source and target domain specs for generated data.
    pub fn domains(&self) -> (DomainSpec, DomainSpec) {
        let (s, t) = benchmark_pair(self.benchmark);
        (self.source.clone().unwrap_or(s), self.target.clone().unwrap_or(t))
    }

    /// Generation seeds of the source, target and validation splits.
    pub fn split_seeds(&self) -> [u64; 3] {
        let base = self.seed.wrapping_mul(3);
        [base, base.wrapping_add(1), base.wrapping_add(2)]
    }

    pub fn uses_directories(&self) -> bool {
        self.source_dir.is_some() || self.target_dir.is_some() || self.val_dir.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub m_start: f64,
    pub m_end: f64,
    pub warm_frac: f64,
    pub conf_threshold: f64,
    pub block_size: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        let s = MaskSchedule::new(0);
        Self {
            m_start: s.m_start,
            m_end: s.m_end,
            warm_frac: s.warm_frac,
            conf_threshold: s.conf_threshold,
            block_size: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalModel {
    #[default]
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub warmup_iters: usize,
    pub batch_size: usize,
    pub lr_depth: f64,
    pub lr_head: f64,
    pub lr_decay_power: f64,
    pub weight_decay: f64,
    pub ema_alpha: f64,
    pub pseudo_label_threshold: f64,
    pub target_loss_weight: f64,
    pub source_loss_weight: f64,
    pub unmasked_every: usize,
    pub confidence_every: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub brightness_min: f64,
    pub brightness_max: f64,
    pub noise_std: f64,
    pub two_stage: bool,
    pub pretrain_iterations: usize,
    pub pretrain_lr: f64,
    pub pretrain_mask_ratio: f64,
    pub eval_model: EvalModel,
    pub boundary_radius: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            warmup_iters: 150,
            batch_size: 2,
            lr_depth: 5e-5,
            lr_head: 5e-4,
            lr_decay_power: 0.9,
            weight_decay: 0.01,
            ema_alpha: 0.999,
            pseudo_label_threshold: 0.9,
            target_loss_weight: 0.5,
            source_loss_weight: 1.0,
            unmasked_every: 10,
            confidence_every: 100,
            eval_every: 500,
            checkpoint_every: 500,
            brightness_min: 0.7,
            brightness_max: 1.3,
            noise_std: 0.02,
            two_stage: true,
            pretrain_iterations: 1000,
            pretrain_lr: 1e-3,
            pretrain_mask_ratio: 0.5,
            eval_model: EvalModel::Teacher,
            boundary_radius: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub enable_fusion: bool,
    pub enable_depth_gradients: bool,
    pub enable_adaptation: bool,
    pub mask_mode: MaskMode,
    pub scheduling: Scheduling,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            enable_fusion: true,
            enable_depth_gradients: true,
            enable_adaptation: true,
            mask_mode: MaskMode::All,
            scheduling: Scheduling::Scheduled,
        }
    }
}

/// Value kind and valid range of one config key.
#[derive(Clone, Copy, Debug)]
pub enum Kind {
    UInt(u64, u64),
    Float(f64, f64),
    Bool,
    Choice(&'static [&'static str]),
    Text,
    /// Nested object validated by its own keys.
    Object,
    /// Four positive integers.
    Factors,
}

pub struct KeySpec {
    pub path: &'static str,
    pub kind: Kind,
    pub doc: &'static str,
}

const fn key(path: &'static str, kind: Kind, doc: &'static str) -> KeySpec {
    KeySpec { path, kind, doc }
}

const SHIFTS: &[&str] = &["small", "medium", "large"];
const MASK_MODES: &[&str] = &["none", "stochastic_only", "vertical_only", "horizontal_only", "all"];
const SCHEDULING: &[&str] = &["source_only", "target_only", "scheduled"];

/// Every accepted key outside the inline domain specs.
pub const CONFIG_KEYS: &[KeySpec] = &[
    key("version", Kind::UInt(CONFIG_VERSION, CONFIG_VERSION), "config format version (required)"),
    key("seed", Kind::UInt(0, u64::MAX), "root seed for all randomness"),
    key("output_dir", Kind::Text, "directory for checkpoints, logs and reports"),
    key("data", Kind::Object, "scene source"),
    key("data.benchmark", Kind::Choice(SHIFTS), "built-in source/target pair"),
    key("data.seed", Kind::UInt(0, u64::MAX), "scene generation seed"),
    key("data.source", Kind::Object, "inline source domain (overrides benchmark)"),
    key("data.target", Kind::Object, "inline target domain (overrides benchmark)"),
    key("data.source_dir", Kind::Text, "labelled source dataset directory"),
    key("data.target_dir", Kind::Text, "target training dataset directory (labels unused)"),
    key("data.val_dir", Kind::Text, "labelled target validation dataset directory"),
    key("data.source_train", Kind::UInt(1, 100_000), "generated source training scenes"),
    key("data.target_train", Kind::UInt(1, 100_000), "generated target training scenes"),
    key("data.target_val", Kind::UInt(1, 100_000), "generated target validation scenes"),
    key("model", Kind::Object, "network dimensions"),
    key("model.channels", Kind::UInt(1, 256), "feature channels C at every level"),
    key("model.attention_dim", Kind::UInt(1, 256), "query/key dimension d_k"),
    key("model.num_classes", Kind::UInt(2, 255), "number of classes K"),
    key("model.depth_map_gradient_input", Kind::Bool, "feed the raw depth map's gradient as an extra input channel"),
    key("model.pooling", Kind::Object, "key/value pooling factors per level"),
    key("model.pooling.train", Kind::Factors, "pooling factors used while training"),
    key("model.pooling.infer", Kind::Factors, "pooling factors used for inference"),
    key("masking", Kind::Object, "complementary mask schedule"),
    key("masking.m_start", Kind::Float(0.0, 1.0), "mask ratio during warm-up"),
    key("masking.m_end", Kind::Float(0.0, 1.0), "mask ratio at the last iteration"),
    key("masking.warm_frac", Kind::Float(0.0, 1.0), "fraction of iterations held at m_start"),
    key("masking.conf_threshold", Kind::Float(0.0, 1.0), "teacher confidence that switches masking to target"),
    key("masking.block_size", Kind::UInt(1, 1024), "mask block edge in pixels; must divide H and W"),
    key("train", Kind::Object, "optimisation"),
    key("train.iterations", Kind::UInt(0, 10_000_000), "adaptation iterations"),
    key("train.warmup_iters", Kind::UInt(0, 10_000_000), "linear learning-rate warm-up"),
    key("train.batch_size", Kind::UInt(1, 64), "frames per domain per step"),
    key("train.lr_depth", Kind::Float(0.0, 1.0), "depth encoder learning rate"),
    key("train.lr_head", Kind::Float(0.0, 1.0), "fusion and decoder learning rate"),
    key("train.lr_decay_power", Kind::Float(0.0, 10.0), "polynomial decay exponent"),
    key("train.weight_decay", Kind::Float(0.0, 1.0), "decoupled weight decay"),
    key("train.ema_alpha", Kind::Float(0.0, 1.0), "teacher momentum, exclusive bounds"),
    key("train.pseudo_label_threshold", Kind::Float(0.0, 1.0), "teacher max-probability for a pixel to count"),
    key("train.target_loss_weight", Kind::Float(0.0, 100.0), "unmasked target weight while source is masked"),
    key("train.source_loss_weight", Kind::Float(0.0, 100.0), "unmasked source weight while target is masked"),
    key("train.unmasked_every", Kind::UInt(0, 1_000_000), "period of fully unmasked steps (0 = never)"),
    key("train.confidence_every", Kind::UInt(1, 1_000_000), "period of masking phase checks"),
    key("train.eval_every", Kind::UInt(1, 10_000_000), "period of target validation"),
    key("train.checkpoint_every", Kind::UInt(0, 10_000_000), "period of checkpoints (0 = final only)"),
    key("train.brightness_min", Kind::Float(0.0, 10.0), "student brightness augmentation lower bound"),
    key("train.brightness_max", Kind::Float(0.0, 10.0), "student brightness augmentation upper bound"),
    key("train.noise_std", Kind::Float(0.0, 1.0), "student pixel noise"),
    key("train.two_stage", Kind::Bool, "pretrain RGB alone, then freeze it and train depth and fusion"),
    key("train.pretrain_iterations", Kind::UInt(0, 10_000_000), "RGB-only iterations before adaptation"),
    key("train.pretrain_lr", Kind::Float(0.0, 1.0), "RGB-only stage learning rate"),
    key("train.pretrain_mask_ratio", Kind::Float(0.0, 1.0), "RGB-only stage mask ratio"),
    key("train.eval_model", Kind::Choice(&["teacher", "student"]), "network scored on validation"),
    key("train.boundary_radius", Kind::UInt(1, 64), "boundary F1 matching radius"),
    key("ablation", Kind::Object, "components to switch off"),
    key("ablation.enable_fusion", Kind::Bool, "use depth through cross-attention fusion"),
    key("ablation.enable_depth_gradients", Kind::Bool, "append depth gradients to attention queries/keys"),
    key("ablation.enable_adaptation", Kind::Bool, "learn from target pseudo-labels"),
    key("ablation.mask_mode", Kind::Choice(MASK_MODES), "allowed mask geometries"),
    key("ablation.scheduling", Kind::Choice(SCHEDULING), "which domain is masked"),
];

/// `--help` text: every key with its valid range.
pub fn describe_keys() -> String {
    let mut lines = Vec::new();
    let range = |k: &Kind| match *k {
        Kind::UInt(lo, hi) if lo == hi => format!("integer = {lo}"),
        Kind::UInt(lo, hi) => format!("integer in [{lo}, {hi}]"),
        Kind::Float(lo, hi) => format!("number in [{lo}, {hi}]"),
        Kind::Bool => "true | false".into(),
        Kind::Choice(c) => c.join(" | "),
        Kind::Text => "string".into(),
        Kind::Object => "object".into(),
        Kind::Factors => "4 integers >= 1".into(),
    };
    for k in CONFIG_KEYS {
        lines.push(format!("  {:<34} {:<26} {}", k.path, range(&k.kind), k.doc));
    }
    for side in ["source", "target"] {
        for &(name, lo, hi, _) in &AXES {
            lines.push(format!("  data.{side}.{name:<23} number in [{lo}, {hi}]"));
        }
        lines.push(format!("  data.{side}.{:<23} {}", "name", "string"));
        lines.push(format!("  data.{side}.{:<23} {}", "height", "multiple of 8 in [8, 1024]"));
        lines.push(format!("  data.{side}.{:<23} {}", "width", "multiple of 8 in [8, 1024]"));
    }
    lines.join("\n")
}

fn kind_of(path: &str) -> Option<Kind> {
    if let Some(rest) = path.strip_prefix("data.source.").or_else(|| path.strip_prefix("data.target.")) {
        return match rest {
            "name" => Some(Kind::Text),
            "height" | "width" => Some(Kind::UInt(8, 1024)),
            _ => AXES.iter().find(|a| a.0 == rest).map(|a| Kind::Float(a.1, a.2)),
        };
    }
    CONFIG_KEYS.iter().find(|k| k.path == path).map(|k| k.kind)
}

fn check_value(path: &str, v: &Value, errs: &mut Vec<String>) {
    let Some(kind) = kind_of(path) else {
        errs.push(format!("{path}: unknown key"));
        return;
    };
    let bad = |what: String| format!("{path}: {what}");
    match kind {
        Kind::Object => match v.as_object() {
            Some(map) => {
                for (k, child) in map {
                    check_value(&format!("{path}.{k}"), child, errs);
                }
            }
            None if v.is_null() && path.starts_with("data.") => {}
            None => errs.push(bad("expected an object".into())),
        },
        Kind::UInt(lo, hi) => match v.as_u64() {
            Some(n) if (lo..=hi).contains(&n) => {}
            Some(n) => errs.push(bad(format!("{n} outside [{lo}, {hi}]"))),
            None => errs.push(bad(format!("expected an integer, got {v}"))),
        },
        Kind::Float(lo, hi) => match v.as_f64() {
            Some(x) if (lo..=hi).contains(&x) => {}
            Some(x) => errs.push(bad(format!("{x} outside [{lo}, {hi}]"))),
            None => errs.push(bad(format!("expected a number, got {v}"))),
        },
        Kind::Bool => {
            if !v.is_boolean() {
                errs.push(bad(format!("expected true or false, got {v}")));
            }
        }
        Kind::Choice(options) => match v.as_str() {
            Some(s) if options.contains(&s) => {}
            _ => errs.push(bad(format!("expected one of {}, got {v}", options.join(", ")))),
        },
        Kind::Text => {
            if !(v.is_string() || (v.is_null() && path.starts_with("data."))) {
                errs.push(bad(format!("expected a string, got {v}")));
            }
        }
        Kind::Factors => {
            let ok = v
                .as_array()
                .is_some_and(|a| a.len() == 4 && a.iter().all(|x| x.as_u64().is_some_and(|n| n >= 1)));
            if !ok {
                errs.push(bad(format!("expected 4 integers >= 1, got {v}")));
            }
        }
    }
}

impl RunConfig {
    /// Parses and fully validates a config document.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| Error::Json {
            path: origin.to_path_buf(),
            source: e,
        })?;
        let mut errs = Vec::new();
        match raw.as_object() {
            Some(map) => {
                if !map.contains_key("version") {
                    errs.push("version: required".into());
                }
                for (k, v) in map {
                    check_value(k, v, &mut errs);
                }
            }
            None => errs.push("config must be a JSON object".into()),
        }
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        let cfg: RunConfig = serde_json::from_value(raw).map_err(|e| Error::Json {
            path: origin.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Cross-field checks; every violation is listed.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.version != CONFIG_VERSION {
            errs.push(format!("version: expected {CONFIG_VERSION}, got {}", self.version));
        }
        let d = &self.data;
        let (source, target) = d.domains();
        if d.uses_directories() {
            for (name, v) in [("source_dir", &d.source_dir), ("target_dir", &d.target_dir), ("val_dir", &d.val_dir)] {
                if v.is_none() {
                    errs.push(format!("data.{name}: required when any dataset directory is given"));
                }
            }
        } else {
            errs.extend(source.validate().into_iter().map(|e| format!("data.source: {e}")));
            errs.extend(target.validate().into_iter().map(|e| format!("data.target: {e}")));
            if (source.height, source.width) != (target.height, target.width) {
                errs.push("data: source and target scenes must have the same size".into());
            }
            let (h, w) = (source.height, source.width);
            errs.extend(self.model.pooling.validate(h, w).into_iter().map(|e| format!("model.pooling: {e}")));
            let b = self.masking.block_size;
            if b == 0 || h % b != 0 || w % b != 0 {
                errs.push(format!("masking.block_size: {b} must divide the {h}x{w} scene size"));
            }
        }
        let m = &self.masking;
        if m.m_end < m.m_start {
            errs.push(format!("masking.m_end: {} is below m_start {}", m.m_end, m.m_start));
        }
        let t = &self.train;
        if !(t.ema_alpha > 0.0 && t.ema_alpha < 1.0) {
            errs.push(format!("train.ema_alpha: {} must lie strictly between 0 and 1", t.ema_alpha));
        }
        if t.brightness_max < t.brightness_min {
            errs.push("train.brightness_max: below brightness_min".into());
        }
        if t.warmup_iters > t.iterations && t.iterations > 0 {
            errs.push(format!(
                "train.warmup_iters: {} exceeds train.iterations {}",
                t.warmup_iters, t.iterations
            ));
        }
        if self.model.num_classes != 3 && !d.uses_directories() {
            errs.push("model.num_classes: generated scenes have exactly 3 classes".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn pooling(&self) -> PoolingConfig {
        self.model.pooling
    }

    pub fn mask_schedule(&self, t_total: usize) -> MaskSchedule {
        MaskSchedule {
            m_start: self.masking.m_start,
            m_end: self.masking.m_end,
            t_total,
            warm_frac: self.masking.warm_frac,
            conf_threshold: self.masking.conf_threshold,
            ..MaskSchedule::new(t_total)
        }
    }

    /// Settings of the adaptation stage.
    pub fn adapt_settings(&self) -> StepSettings {
        let t = &self.train;
        let a = &self.ablation;
        StepSettings {
            fusion: a.enable_fusion,
            depth_gradients: a.enable_depth_gradients,
            adaptation: a.enable_adaptation,
            mask_mode: a.mask_mode,
            scheduling: a.scheduling,
            block: self.masking.block_size,
            pooling: self.model.pooling,
            pseudo_label_threshold: t.pseudo_label_threshold,
            target_weight: t.target_loss_weight,
            source_weight: t.source_loss_weight,
            unmasked_every: t.unmasked_every,
            confidence_every: t.confidence_every,
            brightness: (t.brightness_min, t.brightness_max),
            noise_std: t.noise_std,
            rates: GroupRates {
                rgb: if t.two_stage { 0.0 } else { t.lr_head },
                depth: t.lr_depth,
                head: t.lr_head,
            },
            warmup: t.warmup_iters,
            decay_power: t.lr_decay_power,
            adam: AdamConfig {
                weight_decay: t.weight_decay,
                ..AdamConfig::default()
            },
        }
    }
}
