//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DistKind;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_FPR_LEVELS;
use crate::model::{Activation, ModelSpec, DEFAULT_TIME_EMBEDDING_DIM};
use crate::schedule::ScheduleDescriptor;
use crate::secmi::{AttackConfig, ClassifierConfig, Distance, ThresholdMode};
use crate::trainer::{Augmentation, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub schedule: ScheduleDescriptor,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Read samples from this dataset file instead of generating them.
    #[serde(default)]
    pub path: Option<PathBuf>,
    pub dist: DistKind,
    pub n: usize,
    pub d: usize,
    /// Generation seed; fixed across trials so trials differ only in the split.
    pub seed: u64,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default)]
    pub conditional: bool,
}

fn default_ratio() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    #[serde(default = "default_time_embedding_dim")]
    pub time_embedding_dim: usize,
    #[serde(default)]
    pub coord_octaves: usize,
    #[serde(default)]
    pub activation: Activation,
}

fn default_time_embedding_dim() -> usize {
    DEFAULT_TIME_EMBEDDING_DIM
}

impl ModelSection {
    pub fn spec(&self, data_dim: usize, condition_dim: usize, num_steps: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(data_dim, &self.hidden, num_steps);
        spec.time_embedding_dim = self.time_embedding_dim;
        spec.coord_octaves = self.coord_octaves;
        spec.condition_dim = condition_dim;
        spec.activation = self.activation;
        spec
    }
}

/// [`TrainConfig`] minus the seed, which comes from the trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub ema_decay: f64,
    #[serde(default)]
    pub augmentation: Augmentation,
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ema_decay: self.ema_decay,
            augmentation: self.augmentation,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    SecmiStat,
    SecmiNns,
    LossMia,
    GanleaksBb,
    McSet,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::SecmiStat => "secmi_stat",
            AttackKind::SecmiNns => "secmi_nns",
            AttackKind::LossMia => "loss_mia",
            AttackKind::GanleaksBb => "ganleaks_bb",
            AttackKind::McSet => "mc_set",
        }
    }
}

/// Which parameter vector of a checkpoint is attacked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    #[default]
    Ema,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub t_sec: usize,
    pub stride_k: usize,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default)]
    pub threshold_mode: ThresholdMode,
    #[serde(default)]
    pub weights: Weights,
    pub attacks: Vec<AttackKind>,
    /// Timesteps visited by the `sweep` command.
    #[serde(default)]
    pub sweep_t: Vec<usize>,
    /// Timesteps averaged by the loss attack; defaults to `[t_sec]`.
    #[serde(default)]
    pub loss_t_set: Vec<usize>,
    #[serde(default = "default_synthetic_size")]
    pub synthetic_size: usize,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    /// Also write the binary per-sample error vectors.
    #[serde(default)]
    pub dump_error_vectors: bool,
}

fn default_synthetic_size() -> usize {
    crate::baselines::DEFAULT_SYNTHETIC_SIZE
}

impl AttackSection {
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            t_sec: self.t_sec,
            stride_k: self.stride_k,
            distance: self.distance,
            threshold_mode: self.threshold_mode,
        }
    }

    pub fn loss_timesteps(&self) -> Vec<usize> {
        if self.loss_t_set.is_empty() {
            vec![self.t_sec]
        } else {
            self.loss_t_set.clone()
        }
    }

    pub fn enabled(&self, kind: AttackKind) -> bool {
        self.attacks.contains(&kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_fpr_levels")]
    pub fpr_levels: Vec<f64>,
    /// One seed per trial; each drives the split, training, and attack randomness.
    pub seeds: Vec<u64>,
    /// Number of leading entries of `seeds` to run; all of them when absent.
    #[serde(default)]
    pub trials: Option<usize>,
}

fn default_fpr_levels() -> Vec<f64> {
    DEFAULT_FPR_LEVELS.to_vec()
}

impl EvalSection {
    pub fn trial_seeds(&self) -> Vec<u64> {
        let n = self.trials.unwrap_or(self.seeds.len());
        self.seeds.iter().copied().take(n).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `dataset.path` is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(p), Some(dir)) = (cfg.dataset.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let seeds = self.eval.trial_seeds();
        if seeds.is_empty() {
            return bad("at least one trial seed is required".into());
        }
        if let Some(n) = self.eval.trials {
            if n == 0 || n > self.eval.seeds.len() {
                return bad(format!(
                    "trials = {n} needs 1..={} listed seeds",
                    self.eval.seeds.len()
                ));
            }
        }
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != seeds.len() {
            return bad("trial seeds must be distinct".into());
        }
        if self.attack.attacks.is_empty() {
            return bad("attack.attacks must enable at least one attack".into());
        }
        let num_steps = self.schedule.num_steps;
        self.attack.attack_config().validate(num_steps)?;
        for &t in &self.attack.sweep_t {
            AttackConfig {
                t_sec: t,
                ..self.attack.attack_config()
            }
            .validate(num_steps)?;
        }
        if self
            .attack
            .loss_timesteps()
            .iter()
            .any(|&t| t == 0 || t > num_steps)
        {
            return bad(format!("loss_t_set entries must lie in 1..={num_steps}"));
        }
        let uses_synthetic =
            self.attack.enabled(AttackKind::GanleaksBb) || self.attack.enabled(AttackKind::McSet);
        if uses_synthetic && self.attack.synthetic_size < 2 {
            return bad("synthetic_size must be at least 2".into());
        }
        if self.eval.fpr_levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
            return bad("fpr_levels must lie in (0, 1)".into());
        }
        Ok(())
    }
}
