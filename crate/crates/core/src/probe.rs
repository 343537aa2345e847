//! Measurements of a trained bundle on held-out expert data.

use skillstep_autodiff::gaussian_kl;

use crate::config::TrainConfig;
use crate::dataset::SubTrajectory;
use crate::env::{Goal, MazeSpec};
use crate::expert::{generate_expert_dataset, ExpertConfig};
use crate::model::ModelBundle;
use crate::par::{derive_seed, stream};
use crate::shift::{ShiftConfig, ShiftLevel};
use crate::Result;

/// Non-overlapping sub-trajectories of fresh expert episodes, each paired
/// with the final state of its episode as goal.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub subs: Vec<SubTrajectory>,
    pub goals: Vec<Goal>,
}

impl HeldOut {
    /// `episodes` expert episodes drawn from a seed stream disjoint from
    /// the training data.
    pub fn generate(cfg: &TrainConfig, maze: &MazeSpec, episodes: usize) -> Result<Self> {
        let shift = ShiftConfig::for_level(maze, ShiftLevel::None)?;
        let h = cfg.model.horizon;
        let seed = derive_seed(cfg.seed, stream::HELDOUT, 0);
        let store = generate_expert_dataset(maze, &shift, episodes, seed, h, &ExpertConfig::default())?;
        let mut subs = Vec::new();
        let mut goals = Vec::new();
        for (i, t) in store.trajectories().iter().enumerate() {
            let goal = Goal(t.states[t.states.len() - 1].pos);
            for offset in (0..t.len().saturating_sub(h)).step_by(h) {
                subs.push(store.slice(i, offset, h));
                goals.push(goal);
            }
        }
        Ok(Self { subs, goals })
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    fn mean(&self, f: impl Fn(usize) -> Result<f64>) -> Result<f64> {
        let total = (0..self.len()).map(f).sum::<Result<f64>>()?;
        Ok(total / self.len().max(1) as f64)
    }

    /// Squared error of decoded actions (in units of the action bound)
    /// under the posterior mean skill, summed over steps.
    pub fn skill_reconstruction(&self, bundle: &ModelBundle) -> Result<f64> {
        let ma = bundle.max_action();
        self.mean(|i| {
            let sub = &self.subs[i];
            let q = bundle.skill_posterior(&sub.states[0], &sub.actions)?;
            Ok(sub
                .actions
                .iter()
                .zip(&sub.states)
                .map(|(a, s)| {
                    let p = bundle.decode_action(s, q.mean());
                    ((p[0] - a[0] / ma).powi(2) + (p[1] - a[1] / ma).powi(2)) as f64
                })
                .sum())
        })
    }

    /// Squared distance between the generated skill-step goal and the
    /// target latent `H` steps ahead.
    pub fn goal_generation(&self, bundle: &ModelBundle) -> Result<f64> {
        self.mean(|i| {
            let sub = &self.subs[i];
            let h = bundle.encode_state(&sub.states[0]);
            let target = bundle.encode_target(&sub.states[sub.horizon()]);
            Ok(sq_dist(&bundle.generate_goal(&h, &self.goals[i]), &target))
        })
    }

    /// `KL(q || P^-1(h_0, h_H))` with the posterior of each sub.
    pub fn inverse_kl(&self, bundle: &ModelBundle) -> Result<f64> {
        self.mean(|i| {
            let sub = &self.subs[i];
            let q = bundle.skill_posterior(&sub.states[0], &sub.actions)?;
            let h0 = bundle.encode_state(&sub.states[0]);
            let hh = bundle.encode_state(&sub.states[sub.horizon()]);
            Ok(gaussian_kl(&q, &bundle.inverse_infer(&h0, &hh))?)
        })
    }

    /// Squared gap between one skill step and `H` flat steps under the
    /// posterior mean skill.
    pub fn composition_gap(&self, bundle: &ModelBundle) -> Result<f64> {
        self.mean(|i| {
            let sub = &self.subs[i];
            let q = bundle.skill_posterior(&sub.states[0], &sub.actions)?;
            let h0 = bundle.encode_state(&sub.states[0]);
            Ok(sq_dist(
                &bundle.skill_step(&h0, q.mean()),
                &bundle.flat_skill_step(&h0, q.mean()),
            ))
        })
    }

    /// Squared error of decoded states against the raw states, in scaled
    /// units.
    pub fn state_reconstruction(&self, bundle: &ModelBundle) -> Result<f64> {
        let scaler = bundle.scaler();
        self.mean(|i| {
            let s = &self.subs[i].states[0];
            let back = bundle.decode_state(&bundle.encode_state(s));
            Ok(sq_dist(&scaler.state(&back), &scaler.state(s)))
        })
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}
