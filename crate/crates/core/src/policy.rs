//! The hierarchical goal-conditioned policy and episode execution.

use rand::Rng;

use crate::config::Variant;
use crate::env::{normalized_score, reset, reward, step, EnvConfig, EnvState, Goal, MazeSpec};
use crate::expert::{ExpertConfig, ScriptedController};
use crate::losses::{normal_vec, SkillTransition};
use crate::model::ModelBundle;
use crate::Result;

/// Skill from the high-level policy with zero noise.
pub fn mean_skill(bundle: &ModelBundle, h: &[f32], goal: &Goal, variant: Variant) -> Vec<f32> {
    let dist = if variant.goal_generator {
        let target = bundle.generate_goal(h, goal);
        bundle.inverse_infer(h, &target)
    } else {
        bundle.direct_policy(h, goal)
    };
    dist.mean().to_vec()
}

/// Encode the state, generate a skill-step goal and sample a skill from
/// the inverse dynamics (or the direct head when the generator is
/// ablated).
pub fn high_level_policy(
    bundle: &ModelBundle,
    s: &EnvState,
    goal: &Goal,
    noise: &[f32],
    variant: Variant,
) -> Result<Vec<f32>> {
    let h = bundle.encode_state(s);
    let dist = if variant.goal_generator {
        let target = bundle.generate_goal(&h, goal);
        bundle.inverse_infer(&h, &target)
    } else {
        bundle.direct_policy(&h, goal)
    };
    Ok(dist.reparameterize(noise)?)
}

/// Anything that maps states to actions toward a goal.
pub trait GoalPolicy {
    fn begin(&mut self, start: &EnvState, goal: &Goal);
    fn act(&mut self, s: &EnvState) -> Result<[f32; 2]>;
}

/// Low-level decoder driven by a skill refreshed every `H` steps.
pub struct SkillPolicy<'a, R> {
    bundle: &'a ModelBundle,
    variant: Variant,
    goal: Goal,
    skill: Vec<f32>,
    steps_into_skill: usize,
    refreshes: usize,
    noise_scale: f32,
    rng: R,
}

impl<'a, R: Rng> SkillPolicy<'a, R> {
    /// `noise_scale` multiplies the standard normal noise of skill sampling;
    /// zero gives the deterministic mean policy.
    pub fn new(bundle: &'a ModelBundle, variant: Variant, noise_scale: f32, rng: R) -> Self {
        Self {
            bundle,
            variant,
            goal: Goal::default(),
            skill: Vec::new(),
            steps_into_skill: 0,
            refreshes: 0,
            noise_scale,
            rng,
        }
    }

    pub fn skill(&self) -> &[f32] {
        &self.skill
    }

    /// Number of skill refreshes since [`GoalPolicy::begin`].
    pub fn refreshes(&self) -> usize {
        self.refreshes
    }

    /// True when the next `act` call draws a new skill.
    pub fn at_boundary(&self) -> bool {
        self.steps_into_skill.is_multiple_of(self.bundle.dims().horizon)
    }
}

impl<R: Rng> GoalPolicy for SkillPolicy<'_, R> {
    fn begin(&mut self, _start: &EnvState, goal: &Goal) {
        self.goal = *goal;
        self.steps_into_skill = 0;
        self.refreshes = 0;
    }

    fn act(&mut self, s: &EnvState) -> Result<[f32; 2]> {
        if self.at_boundary() {
            let dz = self.bundle.dims().skill;
            let noise: Vec<f32> = if self.noise_scale == 0.0 {
                vec![0.0; dz]
            } else {
                normal_vec(&mut self.rng, dz)
                    .into_iter()
                    .map(|v| v * self.noise_scale)
                    .collect()
            };
            self.skill = high_level_policy(self.bundle, s, &self.goal, &noise, self.variant)?;
            self.refreshes += 1;
            self.steps_into_skill = 0;
        }
        self.steps_into_skill += 1;
        Ok(self.bundle.decode_action(s, &self.skill))
    }
}

/// The scripted expert as a policy (noise free).
pub struct ScriptedPolicy<'a> {
    maze: &'a MazeSpec,
    cfg: ExpertConfig,
    ctrl: Option<ScriptedController>,
}

impl<'a> ScriptedPolicy<'a> {
    pub fn new(maze: &'a MazeSpec) -> Self {
        Self {
            maze,
            cfg: ExpertConfig::default(),
            ctrl: None,
        }
    }
}

impl GoalPolicy for ScriptedPolicy<'_> {
    fn begin(&mut self, start: &EnvState, goal: &Goal) {
        self.ctrl = ScriptedController::plan(self.maze, start.pos, goal, &self.cfg);
    }

    fn act(&mut self, s: &EnvState) -> Result<[f32; 2]> {
        Ok(self.ctrl.as_mut().map_or([0.0, 0.0], |c| c.action(s, self.maze)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub states: Vec<EnvState>,
    pub actions: Vec<[f32; 2]>,
    pub success: bool,
    pub score: f32,
}

/// Run one episode; it ends on reaching the goal or after `max_steps`.
pub fn run_episode<P: GoalPolicy>(
    policy: &mut P,
    maze: &MazeSpec,
    env: &EnvConfig,
    start: [f32; 2],
    goal: &Goal,
    max_steps: usize,
) -> Result<EpisodeOutcome> {
    let mut s = reset(maze, start)?;
    policy.begin(&s, goal);
    let mut states = vec![s];
    let mut actions = Vec::new();
    let mut success = false;
    for _ in 0..max_steps {
        let a = policy.act(&s)?;
        s = step(maze, &s, a);
        states.push(s);
        actions.push(a);
        if reward(&s, goal, env) > 0.0 {
            success = true;
            break;
        }
    }
    Ok(EpisodeOutcome {
        score: normalized_score(&s, goal),
        states,
        actions,
        success,
    })
}

/// Cut an episode into skill-step transitions of `horizon` steps. The
/// skills are the ones the policy chose at each boundary, in order.
pub fn skill_transitions(
    outcome: &EpisodeOutcome,
    skills: &[Vec<f32>],
    horizon: usize,
    goal: &Goal,
    env: &EnvConfig,
) -> Vec<SkillTransition> {
    let n = outcome.actions.len();
    (0..n.div_ceil(horizon))
        .zip(skills)
        .map(|(j, z)| {
            let t0 = j * horizon;
            let t1 = (t0 + horizon).min(n);
            let r: f32 = (t0 + 1..=t1).map(|k| reward(&outcome.states[k], goal, env)).sum();
            SkillTransition {
                state: outcome.states[t0],
                skill: z.clone(),
                reward: r,
                next_state: outcome.states[t1],
                done: outcome.success && t1 == n,
                goal: *goal,
            }
        })
        .collect()
}

/// Skill policy that records every skill it draws.
pub struct RecordingPolicy<'a, R> {
    pub inner: SkillPolicy<'a, R>,
    pub skills: Vec<Vec<f32>>,
}

impl<R: Rng> GoalPolicy for RecordingPolicy<'_, R> {
    fn begin(&mut self, start: &EnvState, goal: &Goal) {
        self.skills.clear();
        self.inner.begin(start, goal);
    }

    fn act(&mut self, s: &EnvState) -> Result<[f32; 2]> {
        let boundary = self.inner.at_boundary();
        let a = self.inner.act(s)?;
        if boundary {
            self.skills.push(self.inner.skill().to_vec());
        }
        Ok(a)
    }
}
