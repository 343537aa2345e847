//! Model-guided rollouts: branch from stored states, imagine skills in
//! latent space and decode them into synthetic trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RolloutConfig, Variant};
use crate::dataset::{DatasetStore, Provenance, Trajectory};
use crate::env::{EnvState, MazeSpec};
use crate::losses::normal_vec;
use crate::model::ModelBundle;
use crate::par::{derive_seed, map_indexed, stream, Exec};
use crate::{Error, Result};

/// Uniform `(trajectory, offset)` pairs. Synthetic trajectories born in
/// `iteration` or later are not eligible.
pub fn select_branching_states<R: Rng + ?Sized>(
    store: &DatasetStore,
    n: usize,
    iteration: u32,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let eligible: Vec<usize> = store
        .trajectories()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.provenance != Provenance::Synthetic || t.iteration_born < iteration)
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Sampling("no trajectory to branch from".into()));
    }
    Ok((0..n)
        .map(|_| {
            let t = eligible[rng.random_range(0..eligible.len())];
            (t, rng.random_range(0..store.trajectories()[t].len()))
        })
        .collect())
}

/// Latent states and the skills that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRollout {
    /// `K * H + 1` latents unless truncated.
    pub latents: Vec<Vec<f32>>,
    /// One skill per started segment.
    pub skills: Vec<Vec<f32>>,
    pub horizon: usize,
    /// Why the rollout stopped early, if it did.
    pub truncated: Option<String>,
}

impl LatentRollout {
    pub fn transitions(&self) -> usize {
        self.latents.len() - 1
    }
}

/// Sample `skills` skills from the prior and unroll the flat dynamics `H`
/// steps under each. With skill-step dynamics enabled, each segment's last
/// latent is replaced by the skill-step prediction from its first.
pub fn latent_rollout<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    start: &EnvState,
    skills: usize,
    variant: Variant,
    rng: &mut R,
) -> LatentRollout {
    let horizon = bundle.dims().horizon;
    let dz = bundle.dims().skill;
    let mut latents = vec![bundle.encode_state(start)];
    let mut zs = Vec::with_capacity(skills);
    let finite = |v: &[f32]| v.iter().all(|x| x.is_finite());
    if !finite(&latents[0]) {
        return LatentRollout {
            latents,
            skills: zs,
            horizon,
            truncated: Some("non-finite initial latent".into()),
        };
    }
    for j in 0..skills {
        let anchor = latents.last().unwrap().clone();
        let noise = normal_vec(rng, dz);
        let z = match bundle.sample_prior(&anchor, &noise) {
            Ok(z) if finite(&z) => z,
            _ => {
                return LatentRollout {
                    latents,
                    skills: zs,
                    horizon,
                    truncated: Some(format!("non-finite skill in segment {j}")),
                }
            }
        };
        zs.push(z.clone());
        for k in 0..horizon {
            let mut next = bundle.flat_step(latents.last().unwrap(), &z);
            if k + 1 == horizon && variant.skill_step_dynamics {
                next = bundle.skill_step(&anchor, &z);
            }
            if !finite(&next) {
                return LatentRollout {
                    latents,
                    skills: zs,
                    horizon,
                    truncated: Some(format!("non-finite latent at segment {j} step {k}")),
                };
            }
            latents.push(next);
        }
    }
    LatentRollout {
        latents,
        skills: zs,
        horizon,
        truncated: None,
    }
}

/// A decoded rollout and how many of its states were moved out of walls.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub trajectory: Trajectory,
    pub clamped: usize,
}

/// Decode latents to states and skills to actions. States outside free
/// space are moved to the nearest free point.
pub fn decode_trajectory(bundle: &ModelBundle, maze: &MazeSpec, rollout: &LatentRollout) -> Decoded {
    let mut clamped = 0;
    let states: Vec<EnvState> = rollout
        .latents
        .iter()
        .map(|h| {
            let mut s = bundle.decode_state(h);
            if !maze.is_free_point(s.pos) {
                s.pos = maze.nearest_free_point(s.pos);
                clamped += 1;
            }
            s
        })
        .collect();
    let actions = states[..states.len() - 1]
        .iter()
        .enumerate()
        .map(|(k, s)| bundle.decode_action(s, &rollout.skills[k / rollout.horizon]))
        .collect();
    Decoded {
        trajectory: Trajectory {
            states,
            actions,
            provenance: Provenance::Synthetic,
            iteration_born: 0,
        },
        clamped,
    }
}

/// Counters for one round of rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RolloutStats {
    pub branches: usize,
    pub appended: usize,
    pub truncated: usize,
    pub rejected_clamped: usize,
    pub rejected_invalid: usize,
    pub clamped_states: usize,
}

/// Branch, imagine, decode, filter and append synthetic trajectories
/// tagged with `iteration`.
#[allow(clippy::too_many_arguments)]
pub fn run_iteration_rollouts(
    bundle: &ModelBundle,
    maze: &MazeSpec,
    store: &mut DatasetStore,
    cfg: &RolloutConfig,
    variant: Variant,
    iteration: u32,
    seed: u64,
    exec: Exec,
) -> Result<RolloutStats> {
    let mut stats = RolloutStats {
        branches: cfg.branches,
        ..Default::default()
    };
    if cfg.branches == 0 {
        return Ok(stats);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::ROLLOUT, iteration as u64));
    let picks = select_branching_states(store, cfg.branches, iteration, &mut rng)?;
    let base = rng.random::<u64>();
    let starts: Vec<EnvState> = picks.iter().map(|&(t, o)| store.trajectories()[t].states[o]).collect();
    let results = map_indexed(starts.len(), exec, |i| {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(base, stream::ROLLOUT, i as u64));
        let rollout = latent_rollout(bundle, &starts[i], cfg.skills, variant, &mut r);
        let decoded = cfg.decode.then(|| decode_trajectory(bundle, maze, &rollout));
        (rollout.truncated.is_some(), decoded)
    });
    let mut accepted = Vec::new();
    for (truncated, decoded) in results {
        stats.truncated += usize::from(truncated);
        let Some(d) = decoded else { continue };
        stats.clamped_states += d.clamped;
        let limit = cfg.max_clamped_fraction * d.trajectory.len() as f32;
        if d.clamped as f32 > limit {
            stats.rejected_clamped += 1;
            continue;
        }
        accepted.push(d.trajectory);
    }
    let report = store.append_synthetic(accepted, iteration);
    stats.appended = report.accepted;
    stats.rejected_invalid = report.rejected.len();
    Ok(stats)
}
