//! Run configuration: one JSON document per run, with CLI flags layered on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pedcov::covnet::CovNetConfig;
use pedcov::dataset::{leave_one_out, DEFAULT_FRAME_STRIDE};
use pedcov::goalnet::GoalConfig;
use pedcov::pipeline::{GoalSource, Predictor};
use pedcov::sfm::SfmParams;
use pedcov::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Which scenes train the models and which one is scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    /// Hold out the scene at this index of the sorted scene list.
    LeaveOneOut(usize),
    /// An empty `train` list means every other scene.
    Explicit { train: Vec<String>, test: String },
}

impl Default for Split {
    fn default() -> Self {
        Split::LeaveOneOut(0)
    }
}

impl Split {
    /// `(train scenes, test scene)` for the available scene names.
    pub fn resolve(&self, available: &[String]) -> Result<(Vec<String>, String)> {
        match self {
            Split::LeaveOneOut(i) => {
                let plans = leave_one_out(available)?;
                let plan = plans
                    .get(*i)
                    .with_context(|| format!("leave-one-out index {i} out of range for {} scenes", available.len()))?;
                Ok((plan.train_scenes.clone(), plan.test_scene.clone()))
            }
            Split::Explicit { train, test } => {
                for s in train.iter().chain(std::iter::once(test)) {
                    if !available.contains(s) {
                        bail!(
                            "scene `{s}` is not in the window cache (have: {})",
                            available.join(", ")
                        );
                    }
                }
                if train.contains(test) {
                    bail!("test scene `{test}` is also listed for training");
                }
                let train: Vec<String> = if train.is_empty() {
                    available.iter().filter(|s| *s != test).cloned().collect()
                } else {
                    train.clone()
                };
                if train.is_empty() {
                    bail!("no training scenes left after holding out `{test}`");
                }
                Ok((train, test.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data_dir: PathBuf,
    /// Scene names (annotation file stems); empty means every `*.txt`.
    pub scenes: Vec<String>,
    pub split: Split,
    pub predictor: Predictor,
    pub goal_source: GoalSource,
    pub sfm: SfmParams,
    pub goal_model: GoalConfig,
    pub covnet: CovNetConfig,
    pub goal_train: TrainConfig,
    pub cov_train: TrainConfig,
    pub output_dir: PathBuf,
    /// Seeds model initialization and both training loops.
    pub seed: u64,
    pub dt: f64,
    pub frame_stride: i64,
    /// Windows per CovarianceNet forward pass during evaluation.
    pub eval_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data_dir: PathBuf::from("data"),
            scenes: Vec::new(),
            split: Split::default(),
            predictor: Predictor::default(),
            goal_source: GoalSource::default(),
            sfm: SfmParams::default(),
            goal_model: GoalConfig::default(),
            covnet: CovNetConfig::default(),
            goal_train: TrainConfig::default(),
            cov_train: TrainConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
            dt: pedcov::DT,
            frame_stride: DEFAULT_FRAME_STRIDE,
            eval_batch: 256,
        }
    }
}

impl RunConfig {
    /// Reads a config file. The `schema_version` key is mandatory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => bail!("unsupported schema_version {v}; this build reads {SCHEMA_VERSION}"),
            None => bail!("missing integer `schema_version` (expected {SCHEMA_VERSION})"),
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sfm.validate()?;
        self.goal_train.validate()?;
        self.cov_train.validate()?;
        if !(self.dt > 0.0) {
            bail!("dt must be positive, got {}", self.dt);
        }
        if self.frame_stride <= 0 {
            bail!("frame_stride must be positive, got {}", self.frame_stride);
        }
        if self.eval_batch == 0 {
            bail!("eval_batch must be >= 1");
        }
        Ok(())
    }

    /// Fails unless the data directory exists (checked by commands that read it).
    pub fn require_data_dir(&self) -> Result<()> {
        if !self.data_dir.is_dir() {
            bail!("data directory {} does not exist", self.data_dir.display());
        }
        Ok(())
    }

    pub fn goal_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.goal_train.clone()
        }
    }

    pub fn cov_train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.cov_train.clone()
        }
    }
}

/// Parses a kebab-case enum value through its serde representation.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Which model `train` fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Goal,
    Cov,
}

/// Command-line values that replace config keys when given.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub goal_source: Option<GoalSource>,
    pub predictor: Option<Predictor>,
    pub scenes: Vec<String>,
    pub test_scene: Option<String>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
}

impl Overrides {
    /// Training flags go to the config of `target`, or to both when `None`.
    pub fn apply(&self, cfg: &mut RunConfig, target: Option<Target>) {
        if let Some(v) = &self.data_dir {
            cfg.data_dir = v.clone();
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.goal_source {
            cfg.goal_source = v;
        }
        if let Some(v) = self.predictor {
            cfg.predictor = v;
        }
        if !self.scenes.is_empty() {
            cfg.scenes = self.scenes.clone();
        }
        if let Some(test) = &self.test_scene {
            let train = match &cfg.split {
                Split::Explicit { train, .. } => train.iter().filter(|s| *s != test).cloned().collect(),
                Split::LeaveOneOut(_) => Vec::new(),
            };
            cfg.split = Split::Explicit {
                train,
                test: test.clone(),
            };
        }
        let train_cfgs: Vec<&mut TrainConfig> = match target {
            Some(Target::Goal) => vec![&mut cfg.goal_train],
            Some(Target::Cov) => vec![&mut cfg.cov_train],
            None => vec![&mut cfg.goal_train, &mut cfg.cov_train],
        };
        for t in train_cfgs {
            if let Some(v) = self.epochs {
                t.epochs = v;
            }
            if let Some(v) = self.lr {
                t.lr = v;
            }
            if let Some(v) = self.batch_size {
                t.batch_size = v;
            }
        }
    }
}
