//! Run configuration: one JSON document covering data, model, both training
//! stages and evaluation, with dotted `key=value` overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::image::ImageConfig;
use crate::losses::{DEFAULT_MARGIN, DEFAULT_SMOOTHING, DEFAULT_SSL_WEIGHT, DEFAULT_TAU};
use crate::optim::AdamConfig;
use crate::schedule::{LrSchedule, PROMPT_BASE_LR};
use crate::text::TextConfig;

/// Where images come from. Exactly one field must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSource {
    pub synthetic: Option<SyntheticSpec>,
    /// A Market-style directory, or one holding a `manifest.json`.
    pub dir: Option<PathBuf>,
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self { synthetic: Some(SyntheticSpec::default()), dir: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub text: TextConfig,
    pub image: ImageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Fraction of prompt slots masked in each view.
    pub alpha: f64,
    pub lambda_lss: f64,
    pub tau: f64,
    pub adam: AdamConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            base_lr: PROMPT_BASE_LR,
            alpha: 0.5,
            lambda_lss: DEFAULT_SSL_WEIGHT,
            tau: DEFAULT_TAU,
            adam: AdamConfig::default(),
        }
    }
}

/// How stage 2 builds the two views of a positive pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Two distinct images of the identity, each erased once.
    Identity,
    /// One image erased twice.
    Instance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub p: usize,
    pub k: usize,
    pub schedule: LrSchedule,
    /// Fraction of the image area erased in each view.
    pub beta: f64,
    pub lambda_vss: f64,
    pub tau: f64,
    pub margin: f64,
    pub smoothing: f64,
    pub pairs: PairMode,
    pub adam: AdamConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 60,
            p: 16,
            k: 4,
            schedule: LrSchedule::WarmupStep {
                start: 1e-4,
                peak: 1e-3,
                warmup_epochs: 10,
                milestones: vec![30, 50],
                factor: 0.1,
            },
            beta: 1.0 / 3.0,
            lambda_vss: DEFAULT_SSL_WEIGHT,
            tau: DEFAULT_TAU,
            margin: DEFAULT_MARGIN,
            smoothing: DEFAULT_SMOOTHING,
            pairs: PairMode::Identity,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Images per encoder call when embedding.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { chunk: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSource::default(),
            model: ModelConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            eval: EvalConfig::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Compact JSON with fields in declaration order; the digest input.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_json().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        crate::param::hex_digest(&self.digest())
    }

    /// Digest of everything stage 1 depends on: the config with the
    /// stage-2, eval and output sections reset to defaults.
    pub fn stage1_digest(&self) -> [u8; 32] {
        let reduced = Self {
            stage2: Stage2Config::default(),
            eval: EvalConfig::default(),
            output: PathBuf::new(),
            ..self.clone()
        };
        reduced.digest()
    }

    /// The synthetic spec with the run seed filled in, if the source is synthetic.
    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        self.dataset.synthetic.clone().map(|s| SyntheticSpec { seed: self.seed, ..s })
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        ensure(d.synthetic.is_some() != d.dir.is_some(), || {
            "set exactly one of dataset.synthetic and dataset.dir".into()
        })?;
        if let Some(dir) = &d.dir {
            ensure(dir.is_dir(), || format!("dataset directory {} does not exist", dir.display()))?;
        }
        if let Some(s) = &d.synthetic {
            s.validate()?;
            ensure(s.height == self.model.image.height && s.width == self.model.image.width, || {
                format!(
                    "synthetic images are {}x{} but the model expects {}x{}",
                    s.height, s.width, self.model.image.height, self.model.image.width
                )
            })?;
        }
        let m = &self.model;
        ensure(m.text.embed_dim == m.image.embed_dim, || {
            format!("text embed_dim {} != image embed_dim {}", m.text.embed_dim, m.image.embed_dim)
        })?;
        let s1 = &self.stage1;
        ensure(s1.epochs > 0 && s1.batch_size > 0, || "stage1 epochs and batch_size must be positive".into())?;
        ensure(s1.base_lr > 0.0, || "stage1.base_lr must be positive".into())?;
        ensure((0.0..=1.0).contains(&s1.alpha), || format!("stage1.alpha = {} outside [0, 1]", s1.alpha))?;
        ensure(s1.lambda_lss >= 0.0, || "stage1.lambda_lss must be nonnegative".into())?;
        ensure(s1.tau > 0.0, || "stage1.tau must be positive".into())?;
        let s2 = &self.stage2;
        ensure(s2.epochs > 0, || "stage2.epochs must be positive".into())?;
        ensure(s2.p >= 2 && s2.k >= 1, || format!("stage2 needs p >= 2 and k >= 1, got p={} k={}", s2.p, s2.k))?;
        ensure((0.0..1.0).contains(&s2.beta), || format!("stage2.beta = {} outside [0, 1)", s2.beta))?;
        ensure(s2.lambda_vss >= 0.0, || "stage2.lambda_vss must be nonnegative".into())?;
        ensure(s2.tau > 0.0, || "stage2.tau must be positive".into())?;
        ensure(s2.margin >= 0.0, || "stage2.margin must be nonnegative".into())?;
        ensure((0.0..1.0).contains(&s2.smoothing), || "stage2.smoothing outside [0, 1)".into())?;
        s2.schedule.validate()?;
        ensure(self.eval.chunk > 0, || "eval.chunk must be positive".into())?;
        Ok(())
    }

    /// Applies `key=value` overrides such as `stage1.lambda_lss=0`. Values
    /// are parsed as JSON when possible and taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override rejected: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::Config("empty override key".into()))
}
