//! The iterative offline phase: joint updates on the offline objective
//! followed by model-guided rollouts, with checkpoints and metrics.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skillstep_autodiff::{adam_step, clip_global_norm, AdamConfig, Graph};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::TrainConfig;
use crate::dataset::{DatasetStore, SubSampler};
use crate::env::MazeSpec;
use crate::expert::{generate_expert_dataset, ExpertConfig};
use crate::losses::{Batch, LossSettings, LossValues, OfflineLoss};
use crate::metrics::{emit_metrics, MetricsRecord};
use crate::model::{Dims, ModelBundle, ModuleId};
use crate::par::{derive_seed, stream, Exec};
use crate::rollout::{run_iteration_rollouts, RolloutStats};
use crate::shift::{ShiftConfig, ShiftLevel};
use crate::{Error, Result};

/// Maze named by the config, or the built-in one.
pub fn load_maze(cfg: &TrainConfig) -> Result<MazeSpec> {
    match &cfg.data.maze {
        Some(p) => MazeSpec::load(Path::new(p)),
        None => Ok(MazeSpec::default()),
    }
}

/// Expert dataset for a config: the training region is shared by all
/// shift levels.
pub fn expert_dataset(cfg: &TrainConfig, maze: &MazeSpec) -> Result<DatasetStore> {
    let shift = ShiftConfig::for_level(maze, ShiftLevel::None)?;
    let mut store = generate_expert_dataset(
        maze,
        &shift,
        cfg.data.expert_trajectories,
        derive_seed(cfg.seed, stream::DATA, 0),
        cfg.model.horizon,
        &ExpertConfig::default(),
    )?;
    store.synthetic_ratio = cfg.data.synthetic_ratio;
    Ok(store)
}

/// Modules updated by the offline objective under a config.
pub fn offline_modules(cfg: &TrainConfig) -> Vec<ModuleId> {
    ModuleId::OFFLINE
        .into_iter()
        .filter(|&m| match m {
            ModuleId::SkillStepDynamics => cfg.variant.skill_step_dynamics,
            ModuleId::GoalGenerator => cfg.variant.goal_generator,
            ModuleId::DirectPolicy => !cfg.variant.goal_generator,
            _ => true,
        })
        .collect()
}

/// Summary of one offline iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: u32,
    /// Mean losses of the first and last epoch.
    pub first_epoch: LossValues,
    pub last_epoch: LossValues,
    pub rollouts: RolloutStats,
    pub coverage_before: usize,
    pub coverage_after: usize,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub maze: MazeSpec,
    pub bundle: ModelBundle,
    pub store: DatasetStore,
    pub metrics: Vec<MetricsRecord>,
    pub exec: Exec,
    /// Record elapsed seconds in metrics (off keeps metrics reproducible).
    pub timing: bool,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig, maze: MazeSpec, store: DatasetStore) -> Result<Self> {
        config.validate()?;
        if store.is_empty() {
            return Err(Error::Config("empty dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, stream::INIT, 0));
        let mut bundle = ModelBundle::new(Dims::from_config(&config), &maze, &mut rng);
        bundle.freeze_all_except(&offline_modules(&config));
        Ok(Self {
            config,
            maze,
            bundle,
            store,
            metrics: Vec::new(),
            exec: Exec::default(),
            timing: false,
            started: Instant::now(),
        })
    }

    /// Generate the expert data for `config` and set up training.
    pub fn from_config(config: TrainConfig) -> Result<Self> {
        let maze = load_maze(&config)?;
        let store = expert_dataset(&config, &maze)?;
        Self::new(config, maze, store)
    }

    /// Continue from the files written after a completed iteration.
    pub fn resume(checkpoint: &Path, dataset: &Path, metrics: Vec<MetricsRecord>) -> Result<Self> {
        let ck = load_checkpoint(checkpoint, None)?;
        let store = DatasetStore::load(dataset)?;
        let mut bundle = ck.bundle;
        bundle.freeze_all_except(&offline_modules(&ck.config));
        Ok(Self {
            config: ck.config,
            maze: ck.maze,
            bundle,
            store,
            metrics,
            exec: Exec::default(),
            timing: false,
            started: Instant::now(),
        })
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.config.optim.lr,
            ..AdamConfig::default()
        }
    }

    /// One joint gradient step; returns the batch losses.
    pub fn train_step(&mut self, sampler: &SubSampler, rng: &mut ChaCha8Rng) -> Result<LossValues> {
        let cfg = &self.config;
        let batch = Batch::sample(
            &self.bundle,
            &self.store,
            sampler,
            cfg.data.relabel,
            cfg.optim.batch_size,
            rng,
        )?;
        let mut g = Graph::<f32>::new();
        let vars = OfflineLoss::new(&self.bundle, &batch, LossSettings::from_config(cfg)).total(&mut g)?;
        let values = vars.values(&g);
        if !values.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "offline loss at iteration {}: {values:?}",
                self.bundle.iteration
            )));
        }
        let grads = g.backward(vars.total)?;
        let modules = offline_modules(cfg);
        let mut groups: Vec<_> = modules.iter().map(|&m| grads.for_set(self.bundle.params(m))).collect();
        clip_global_norm(&mut groups, cfg.optim.clip_norm);
        let adam = self.adam();
        let ema = cfg.optim.ema_rate;
        for (&m, grad) in modules.iter().zip(&groups) {
            adam_step(self.bundle.params_mut(m), grad, &adam)?;
        }
        self.bundle.align_targets(ema)?;
        Ok(values)
    }

    fn coverage(&self) -> usize {
        self.store.goal_coverage(self.config.data.coverage_bin)
    }

    fn elapsed(&self) -> f64 {
        if self.timing {
            self.started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }

    /// Train for the configured epochs, then roll out and append.
    pub fn run_iteration(&mut self) -> Result<IterationReport> {
        let it = self.bundle.iteration;
        let sched = self.config.schedule;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, stream::TRAIN, it as u64));
        let sampler = self.store.sampler(self.config.model.horizon)?;
        let coverage_before = self.coverage();
        let mut first = None;
        let mut last = LossValues::default();
        for epoch in 0..sched.epochs {
            let mut sum = LossValues::default();
            for _ in 0..sched.batches_per_epoch {
                let v = self.train_step(&sampler, &mut rng)?;
                accumulate(&mut sum, &v, 1.0 / sched.batches_per_epoch as f64);
            }
            first.get_or_insert(sum);
            last = sum;
            self.metrics.push(MetricsRecord {
                iteration: it,
                epoch: Some(epoch as u32),
                losses: sum,
                coverage: coverage_before,
                trajectories: self.store.len(),
                wall_clock: self.elapsed(),
                ..Default::default()
            });
        }
        let rollouts = run_iteration_rollouts(
            &self.bundle,
            &self.maze,
            &mut self.store,
            &self.config.rollout,
            self.config.variant,
            it,
            self.config.seed,
            self.exec,
        )?;
        self.bundle.iteration = it + 1;
        let coverage_after = self.coverage();
        self.metrics.push(MetricsRecord {
            iteration: it,
            epoch: None,
            losses: last,
            coverage: coverage_after,
            trajectories: self.store.len(),
            rollouts_appended: rollouts.appended,
            rollouts_rejected: rollouts.rejected_clamped + rollouts.rejected_invalid,
            wall_clock: self.elapsed(),
            ..Default::default()
        });
        Ok(IterationReport {
            iteration: it,
            first_epoch: first.unwrap_or_default(),
            last_epoch: last,
            rollouts,
            coverage_before,
            coverage_after,
        })
    }

    /// Run the remaining iterations. With `out`, write a checkpoint, the
    /// dataset and the metrics after each one, and a diagnostic checkpoint
    /// if training diverges.
    pub fn train(&mut self, out: Option<&Path>) -> Result<Vec<IterationReport>> {
        let mut reports = Vec::new();
        while (self.bundle.iteration as usize) < self.config.schedule.iterations {
            match self.run_iteration() {
                Ok(r) => reports.push(r),
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = out {
                        save_checkpoint(&dir.join("diverged.ckpt"), &self.config, &self.maze, &self.bundle)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            if let Some(dir) = out {
                self.write_outputs(dir)?;
            }
        }
        Ok(reports)
    }

    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let it = self.bundle.iteration;
        save_checkpoint(&checkpoint_path(dir, it), &self.config, &self.maze, &self.bundle)?;
        self.store.save(&dataset_path(dir, it))?;
        emit_metrics(&self.metrics, &dir.join("metrics.csv"))
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u32) -> PathBuf {
    dir.join(format!("iter{iteration:03}.ckpt"))
}

pub fn dataset_path(dir: &Path, iteration: u32) -> PathBuf {
    dir.join(format!("iter{iteration:03}.data"))
}

fn accumulate(acc: &mut LossValues, v: &LossValues, w: f64) {
    acc.total += w * v.total;
    acc.skill += w * v.skill;
    acc.skill_recon += w * v.skill_recon;
    acc.skill_kl += w * v.skill_kl;
    acc.prior += w * v.prior;
    acc.model += w * v.model;
    acc.obs_recon += w * v.obs_recon;
    acc.flat += w * v.flat;
    acc.skill_step += w * v.skill_step;
    acc.inverse += w * v.inverse;
    acc.goal += w * v.goal;
    acc.goal_bc += w * v.goal_bc;
    acc.goal_sanity += w * v.goal_sanity;
}
