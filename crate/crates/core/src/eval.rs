//! Zero-shot evaluation and few-shot adaptation of the goal generator.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skillstep_autodiff::{adam_step, AdamConfig, Graph};

use crate::config::{EvalConfig, TrainConfig, Variant};
use crate::dataset::{DatasetStore, Provenance, Trajectory};
use crate::env::{EnvConfig, Goal, MazeSpec};
use crate::losses::{adapt_loss, critic_loss, policy_module, td_targets, AdaptBatch, SkillTransition};
use crate::model::{ModelBundle, ModuleId};
use crate::par::{derive_seed, map_indexed, stream, Exec};
use crate::policy::{run_episode, skill_transitions, GoalPolicy, RecordingPolicy, SkillPolicy};
use crate::shift::{sample_cell, sample_goal, sample_point, ShiftConfig};
use crate::Result;

/// Normalized scores of a batch of episodes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub scores: Vec<f32>,
}

impl EvalReport {
    pub fn mean(&self) -> Option<f32> {
        (!self.scores.is_empty()).then(|| self.scores.iter().sum::<f32>() / self.scores.len() as f32)
    }

    /// Population standard deviation.
    pub fn std(&self) -> Option<f32> {
        let m = self.mean()?;
        let var = self.scores.iter().map(|s| (s - m).powi(2)).sum::<f32>() / self.scores.len() as f32;
        Some(var.sqrt())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.mean(), self.std()) {
            (Some(m), Some(s)) => write!(f, "{m:.1} +/- {s:.1} over {} episodes", self.scores.len()),
            _ => f.write_str("no data"),
        }
    }
}

/// Start in the training region and goal in the evaluation region, in
/// different cells whenever the regions allow it.
pub fn sample_task<R: Rng + ?Sized>(maze: &MazeSpec, shift: &ShiftConfig, rng: &mut R) -> ([f32; 2], Goal) {
    let goal = sample_goal(maze, &shift.eval, rng);
    let goal_cell = maze.cell_of(goal.0);
    let mut cell = sample_cell(&shift.train, rng);
    for _ in 0..32 {
        if (cell.x as i64, cell.y as i64) != goal_cell {
            break;
        }
        cell = sample_cell(&shift.train, rng);
    }
    (sample_point(maze, cell, rng), goal)
}

/// Mean score of `episodes` episodes, each with its own policy from
/// `make_policy`, which receives a per-episode seed.
pub fn evaluate<P, F>(
    maze: &MazeSpec,
    shift: &ShiftConfig,
    episodes: usize,
    max_steps: usize,
    seed: u64,
    exec: Exec,
    make_policy: F,
) -> Result<EvalReport>
where
    P: GoalPolicy,
    F: Fn(u64) -> P + Sync + Send,
{
    let env = EnvConfig::default();
    let scores = map_indexed(episodes, exec, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::EVAL, i as u64));
        let (start, goal) = sample_task(maze, shift, &mut rng);
        let mut policy = make_policy(derive_seed(seed, stream::POLICY, i as u64));
        run_episode(&mut policy, maze, &env, start, &goal, max_steps).map(|o| o.score)
    });
    Ok(EvalReport {
        scores: scores.into_iter().collect::<Result<_>>()?,
    })
}

/// The hierarchical policy on goals from the shift's evaluation region,
/// with episode count, step limit and skill noise from `cfg`.
pub fn eval_zeroshot(
    bundle: &ModelBundle,
    maze: &MazeSpec,
    shift: &ShiftConfig,
    variant: Variant,
    cfg: &EvalConfig,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    evaluate(maze, shift, cfg.episodes, cfg.max_steps, seed, exec, |s| {
        SkillPolicy::new(bundle, variant, cfg.noise, ChaCha8Rng::seed_from_u64(s))
    })
}

/// Outcome of few-shot adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub episode_scores: Vec<f32>,
    pub transitions: usize,
    /// Executed adaptation episodes.
    pub replay: DatasetStore,
}

/// Run `shots` episodes on evaluation-region goals; after each, take
/// `steps_per_episode` critic and adaptation steps on all transitions so
/// far. Only the policy module and the critic change. Settings come from
/// `config.finetune`, the loss weights and the evaluation step limit.
pub fn finetune_fewshot(
    bundle: &mut ModelBundle,
    maze: &MazeSpec,
    shift: &ShiftConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    let cfg = &config.finetune;
    let variant = config.variant;
    let (alpha, consistency) = (config.loss.alpha, config.loss.consistency_weight);
    let max_steps = config.eval.max_steps;
    let env = EnvConfig::default();
    let horizon = bundle.dims().horizon;
    let gamma_h = cfg.gamma.powi(horizon as i32);
    let tuned = policy_module(variant);
    let mut replay = DatasetStore::new(seed, horizon, maze.hash_hex())?;
    let mut buffer: Vec<SkillTransition> = Vec::new();
    let mut scores = Vec::with_capacity(cfg.shots);
    for shot in 0..cfg.shots {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::FINETUNE, shot as u64));
        let (start, goal) = sample_task(maze, shift, &mut rng);
        let mut policy = RecordingPolicy {
            inner: SkillPolicy::new(
                bundle,
                variant,
                cfg.exploration,
                ChaCha8Rng::seed_from_u64(rng.random()),
            ),
            skills: Vec::new(),
        };
        let out = run_episode(&mut policy, maze, &env, start, &goal, max_steps)?;
        scores.push(out.score);
        buffer.extend(skill_transitions(&out, &policy.skills, horizon, &goal, &env));
        replay.push(Trajectory {
            states: out.states,
            actions: out.actions,
            provenance: Provenance::Online,
            iteration_born: shot as u32,
        })?;
        for _ in 0..cfg.steps_per_episode {
            let batch: Vec<SkillTransition> = (0..cfg.batch_size)
                .map(|_| buffer[rng.random_range(0..buffer.len())].clone())
                .collect();

            bundle.freeze_all_except(&[ModuleId::Critic]);
            let targets = td_targets(bundle, &batch, gamma_h, variant);
            let mut g = Graph::<f32>::new();
            let l = critic_loss(&mut g, bundle, &batch, &targets)?;
            let grads = g.backward(l)?;
            let gr = grads.for_set(bundle.params(ModuleId::Critic));
            let adam = AdamConfig {
                lr: cfg.critic_lr,
                ..AdamConfig::default()
            };
            adam_step(bundle.params_mut(ModuleId::Critic), &gr, &adam)?;
            bundle.align_critic_target(cfg.target_rate)?;

            bundle.freeze_all_except(&[tuned]);
            let ab = AdaptBatch {
                states: batch.iter().map(|t| t.state).collect(),
                goals: batch.iter().map(|t| t.goal).collect(),
            };
            let mut g = Graph::<f32>::new();
            let vars = adapt_loss(&mut g, bundle, &ab, variant, alpha, consistency)?;
            let grads = g.backward(vars.total)?;
            let gr = grads.for_set(bundle.params(tuned));
            let adam = AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            };
            adam_step(bundle.params_mut(tuned), &gr, &adam)?;
        }
    }
    bundle.freeze_all_except(&[]);
    Ok(FinetuneReport {
        episode_scores: scores,
        transitions: buffer.len(),
        replay,
    })
}
