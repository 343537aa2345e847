//! Run configuration, parsed from TOML with unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::shift::ShiftLevel;
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub variant: Variant,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub schedule: Schedule,
    pub data: DataConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
    pub finetune: FinetuneConfig,
}

/// Network sizes. Everything here feeds the checkpoint config hash.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Skill horizon in primitive steps.
    pub horizon: usize,
    pub skill_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variant {
    /// Train the skill-step dynamics and use it in rollouts; when off, the
    /// skill-step image is the `H`-fold flat dynamics.
    pub skill_step_dynamics: bool,
    /// High-level policy through the goal generator and inverse dynamics;
    /// when off, a direct `(h, g) -> z` head.
    pub goal_generator: bool,
    /// Cyclic-consistency term of the goal loss.
    pub sanity_check: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta: f32,
    pub alpha: f32,
    pub skill_weight: f32,
    pub prior_weight: f32,
    pub model_weight: f32,
    pub goal_weight: f32,
    /// Weight of the skill-step consistency term during adaptation.
    pub consistency_weight: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub clip_norm: f32,
    pub ema_rate: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub iterations: usize,
    pub epochs: usize,
    /// Minibatches per epoch; the default is about one pass over the
    /// sub-trajectories of the default expert data.
    pub batches_per_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relabel {
    Final,
    Future,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub expert_trajectories: usize,
    pub relabel: Relabel,
    /// Probability of sampling a synthetic trajectory; absent means uniform
    /// over all trajectories.
    pub synthetic_ratio: Option<f32>,
    /// Maze layout file; the built-in maze when absent.
    pub maze: Option<String>,
    /// Side length of the bins used for goal coverage.
    pub coverage_bin: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub branches: usize,
    pub skills: usize,
    pub decode: bool,
    /// Largest tolerated fraction of decoded states clamped out of walls.
    pub max_clamped_fraction: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub max_steps: usize,
    pub shift: ShiftLevel,
    /// Scale of the standard normal noise on skill sampling; zero runs the
    /// mean policy.
    pub noise: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub shots: usize,
    pub steps_per_episode: usize,
    pub lr: f32,
    pub critic_lr: f32,
    pub batch_size: usize,
    pub gamma: f32,
    pub target_rate: f32,
    /// Scale of the exploration noise on skills during adaptation episodes.
    pub exploration: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            skill_dim: 8,
            latent_dim: 16,
            hidden: 64,
        }
    }
}

impl Default for Variant {
    fn default() -> Self {
        Self {
            skill_step_dynamics: true,
            goal_generator: true,
            sanity_check: true,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            alpha: 0.1,
            skill_weight: 1.0,
            prior_weight: 1.0,
            model_weight: 1.0,
            goal_weight: 1.0,
            consistency_weight: 1.0,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 64,
            clip_norm: 10.0,
            ema_rate: 0.05,
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            iterations: 3,
            epochs: 40,
            batches_per_epoch: 100,
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            expert_trajectories: 500,
            relabel: Relabel::Future,
            synthetic_ratio: None,
            maze: None,
            coverage_bin: 0.25,
        }
    }
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            branches: 16,
            skills: 3,
            decode: true,
            max_clamped_fraction: 0.2,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            max_steps: 400,
            shift: ShiftLevel::None,
            noise: 1.0,
        }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            shots: 25,
            steps_per_episode: 50,
            lr: 3e-4,
            critic_lr: 3e-4,
            batch_size: 64,
            gamma: 0.99,
            target_rate: 0.05,
            exploration: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.horizon", self.model.horizon),
            ("model.skill_dim", self.model.skill_dim),
            ("model.latent_dim", self.model.latent_dim),
            ("model.hidden", self.model.hidden),
            ("optim.batch_size", self.optim.batch_size),
            ("finetune.batch_size", self.finetune.batch_size),
            ("eval.max_steps", self.eval.max_steps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let reals = [
            ("loss.beta", self.loss.beta),
            ("loss.alpha", self.loss.alpha),
            ("loss.skill_weight", self.loss.skill_weight),
            ("loss.prior_weight", self.loss.prior_weight),
            ("loss.model_weight", self.loss.model_weight),
            ("loss.goal_weight", self.loss.goal_weight),
            ("loss.consistency_weight", self.loss.consistency_weight),
            ("optim.lr", self.optim.lr),
            ("optim.clip_norm", self.optim.clip_norm),
            ("finetune.lr", self.finetune.lr),
            ("finetune.critic_lr", self.finetune.critic_lr),
            ("finetune.exploration", self.finetune.exploration),
            ("eval.noise", self.eval.noise),
            ("data.coverage_bin", self.data.coverage_bin),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if self.data.coverage_bin <= 0.0 {
            return Err(Error::Config("data.coverage_bin must be positive".into()));
        }
        let unit = [
            ("optim.ema_rate", self.optim.ema_rate),
            ("finetune.gamma", self.finetune.gamma),
            ("finetune.target_rate", self.finetune.target_rate),
            ("rollout.max_clamped_fraction", self.rollout.max_clamped_fraction),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if let Some(r) = self.data.synthetic_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config("data.synthetic_ratio must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Hash of everything that fixes parameter shapes and meaning.
    pub fn architecture_hash(&self) -> [u8; 32] {
        let text = format!(
            "horizon={} skill_dim={} latent_dim={} hidden={} skill_step={} goal_generator={}",
            self.model.horizon,
            self.model.skill_dim,
            self.model.latent_dim,
            self.model.hidden,
            self.variant.skill_step_dynamics,
            self.variant.goal_generator,
        );
        Sha256::digest(text.as_bytes()).into()
    }
}
