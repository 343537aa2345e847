//! The bundle of learnable modules and plain forward passes used outside
//! training.

use std::fmt;

use rand::Rng;
use skillstep_autodiff::{ema_update, DiagGaussian, Init, Mlp, OutputAct, ParamSet};

use crate::config::TrainConfig;
use crate::env::{EnvState, Goal, MazeSpec, StateScaler};
use crate::{Error, Result};

pub const STATE_DIM: usize = 4;
pub const GOAL_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

/// Every network in a bundle. The discriminant is the parameter-set key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleId {
    SkillEncoder = 0,
    SkillDecoder = 1,
    SkillPrior = 2,
    StateEncoder = 3,
    TargetEncoder = 4,
    StateDecoder = 5,
    FlatDynamics = 6,
    SkillStepDynamics = 7,
    InverseDynamics = 8,
    GoalGenerator = 9,
    DirectPolicy = 10,
    Critic = 11,
    TargetCritic = 12,
}

impl ModuleId {
    pub const ALL: [ModuleId; 13] = [
        Self::SkillEncoder,
        Self::SkillDecoder,
        Self::SkillPrior,
        Self::StateEncoder,
        Self::TargetEncoder,
        Self::StateDecoder,
        Self::FlatDynamics,
        Self::SkillStepDynamics,
        Self::InverseDynamics,
        Self::GoalGenerator,
        Self::DirectPolicy,
        Self::Critic,
        Self::TargetCritic,
    ];

    /// Modules updated by the offline objective.
    pub const OFFLINE: [ModuleId; 10] = [
        Self::SkillEncoder,
        Self::SkillDecoder,
        Self::SkillPrior,
        Self::StateEncoder,
        Self::StateDecoder,
        Self::FlatDynamics,
        Self::SkillStepDynamics,
        Self::InverseDynamics,
        Self::GoalGenerator,
        Self::DirectPolicy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SkillEncoder => "skill_encoder",
            Self::SkillDecoder => "skill_decoder",
            Self::SkillPrior => "skill_prior",
            Self::StateEncoder => "state_encoder",
            Self::TargetEncoder => "target_encoder",
            Self::StateDecoder => "state_decoder",
            Self::FlatDynamics => "flat_dynamics",
            Self::SkillStepDynamics => "skill_step_dynamics",
            Self::InverseDynamics => "inverse_dynamics",
            Self::GoalGenerator => "goal_generator",
            Self::DirectPolicy => "direct_policy",
            Self::Critic => "critic",
            Self::TargetCritic => "target_critic",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Slow-moving copies that never receive gradients.
    pub fn is_target(self) -> bool {
        matches!(self, Self::TargetEncoder | Self::TargetCritic)
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sizes shared by every module of a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub horizon: usize,
    pub skill: usize,
    pub latent: usize,
    pub hidden: usize,
}

impl Dims {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            horizon: cfg.model.horizon,
            skill: cfg.model.skill_dim,
            latent: cfg.model.latent_dim,
            hidden: cfg.model.hidden,
        }
    }

    /// Input and output widths of a module.
    pub fn io(&self, m: ModuleId) -> (usize, usize) {
        let (h, z) = (self.latent, self.skill);
        match m {
            ModuleId::SkillEncoder => (ACTION_DIM * self.horizon + STATE_DIM, 2 * z),
            ModuleId::SkillDecoder => (STATE_DIM + z, ACTION_DIM),
            ModuleId::SkillPrior => (h, 2 * z),
            ModuleId::StateEncoder | ModuleId::TargetEncoder => (STATE_DIM, h),
            ModuleId::StateDecoder => (h, STATE_DIM),
            ModuleId::FlatDynamics | ModuleId::SkillStepDynamics => (h + z, h),
            ModuleId::InverseDynamics => (2 * h, 2 * z),
            ModuleId::GoalGenerator => (h + GOAL_DIM, h),
            ModuleId::DirectPolicy => (h + GOAL_DIM, 2 * z),
            ModuleId::Critic | ModuleId::TargetCritic => (h + z, 1),
        }
    }

    pub fn sizes(&self, m: ModuleId) -> Vec<usize> {
        let (i, o) = self.io(m);
        vec![i, self.hidden, self.hidden, o]
    }

    pub fn output_act(m: ModuleId) -> OutputAct {
        if m == ModuleId::SkillDecoder {
            OutputAct::Tanh
        } else {
            OutputAct::Identity
        }
    }
}

/// All networks plus the fixed state scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    dims: Dims,
    nets: Vec<Mlp>,
    scaler: StateScaler,
    max_action: f32,
    /// Offline iterations completed.
    pub iteration: u32,
}

impl ModelBundle {
    pub fn new<R: Rng + ?Sized>(dims: Dims, maze: &MazeSpec, rng: &mut R) -> Self {
        let mut nets: Vec<Mlp> = Vec::with_capacity(ModuleId::ALL.len());
        for m in ModuleId::ALL {
            let net = match m {
                ModuleId::TargetEncoder => nets[ModuleId::StateEncoder.index()].clone(),
                ModuleId::TargetCritic => nets[ModuleId::Critic.index()].clone(),
                _ => Mlp::new(
                    m as u32,
                    m.name(),
                    &dims.sizes(m),
                    Dims::output_act(m),
                    Init::Xavier,
                    rng,
                ),
            };
            nets.push(net);
        }
        let mut bundle = Self {
            dims,
            nets,
            scaler: StateScaler::for_maze(maze),
            max_action: maze.max_action,
            iteration: 0,
        };
        for m in ModuleId::ALL {
            let p = bundle.params_mut(m);
            *p = ParamSet::new(m as u32, m.name(), rekey(p));
            p.set_frozen(m.is_target());
        }
        bundle
    }

    /// Rebuild from stored parameter sets, checking every shape.
    pub fn from_parts(dims: Dims, maze: &MazeSpec, params: Vec<ParamSet>, iteration: u32) -> Result<Self> {
        if params.len() != ModuleId::ALL.len() {
            return Err(Error::Contract(format!(
                "{} parameter sets, expected {}",
                params.len(),
                ModuleId::ALL.len()
            )));
        }
        let nets = ModuleId::ALL
            .into_iter()
            .zip(params)
            .map(|(m, p)| Mlp::from_params(p, dims.sizes(m), Dims::output_act(m)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            dims,
            nets,
            scaler: StateScaler::for_maze(maze),
            max_action: maze.max_action,
            iteration,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn scaler(&self) -> &StateScaler {
        &self.scaler
    }

    pub fn max_action(&self) -> f32 {
        self.max_action
    }

    pub fn net(&self, m: ModuleId) -> &Mlp {
        &self.nets[m.index()]
    }

    pub fn net_mut(&mut self, m: ModuleId) -> &mut Mlp {
        &mut self.nets[m.index()]
    }

    pub fn params(&self, m: ModuleId) -> &ParamSet {
        self.net(m).params()
    }

    pub fn params_mut(&mut self, m: ModuleId) -> &mut ParamSet {
        self.net_mut(m).params_mut()
    }

    pub fn all_params(&self) -> impl Iterator<Item = (ModuleId, &ParamSet)> {
        ModuleId::ALL.into_iter().map(|m| (m, self.params(m)))
    }

    pub fn is_finite(&self) -> bool {
        self.nets.iter().all(|n| n.params().is_finite())
    }

    /// Freeze every module except `trainable`; target copies stay frozen.
    pub fn freeze_all_except(&mut self, trainable: &[ModuleId]) {
        for m in ModuleId::ALL {
            let frozen = m.is_target() || !trainable.contains(&m);
            self.params_mut(m).set_frozen(frozen);
        }
    }

    /// Modules currently open to gradients.
    pub fn trainable(&self) -> Vec<ModuleId> {
        ModuleId::ALL
            .into_iter()
            .filter(|&m| !self.params(m).frozen())
            .collect()
    }

    /// Move the target encoder toward the online encoder.
    pub fn align_targets(&mut self, rate: f32) -> Result<()> {
        let src = self.params(ModuleId::StateEncoder).clone();
        ema_update(self.params_mut(ModuleId::TargetEncoder), &src, rate)?;
        Ok(())
    }

    pub fn align_critic_target(&mut self, rate: f32) -> Result<()> {
        let src = self.params(ModuleId::Critic).clone();
        ema_update(self.params_mut(ModuleId::TargetCritic), &src, rate)?;
        Ok(())
    }

    pub fn scaled_state(&self, s: &EnvState) -> [f32; 4] {
        self.scaler.state(s)
    }

    pub fn scaled_goal(&self, g: &Goal) -> [f32; 2] {
        self.scaler.goal(g)
    }

    pub fn encode_state(&self, s: &EnvState) -> Vec<f32> {
        self.net(ModuleId::StateEncoder).infer(1, &self.scaled_state(s))
    }

    pub fn encode_target(&self, s: &EnvState) -> Vec<f32> {
        self.net(ModuleId::TargetEncoder).infer(1, &self.scaled_state(s))
    }

    pub fn decode_state(&self, h: &[f32]) -> EnvState {
        let v = self.net(ModuleId::StateDecoder).infer(1, h);
        self.scaler.unstate(&v)
    }

    /// Skill posterior for one sub-trajectory (`actions` has `H` entries).
    pub fn skill_posterior(&self, first: &EnvState, actions: &[[f32; 2]]) -> Result<DiagGaussian> {
        if actions.len() != self.dims.horizon {
            return Err(Error::Contract(format!(
                "{} actions for skill horizon {}",
                actions.len(),
                self.dims.horizon
            )));
        }
        let input = encoder_input(&self.scaler, self.max_action, first, actions);
        Ok(DiagGaussian::from_head(
            &self.net(ModuleId::SkillEncoder).infer(1, &input),
        ))
    }

    /// Sample (or, with zero noise, the mean of) the skill posterior.
    pub fn encode_skill(
        &self,
        first: &EnvState,
        actions: &[[f32; 2]],
        noise: &[f32],
    ) -> Result<(Vec<f32>, DiagGaussian)> {
        let q = self.skill_posterior(first, actions)?;
        let z = q.reparameterize(noise)?;
        Ok((z, q))
    }

    /// Low-level action for state `s` under skill `z`, within the action
    /// bounds.
    pub fn decode_action(&self, s: &EnvState, z: &[f32]) -> [f32; 2] {
        let mut input = self.scaled_state(s).to_vec();
        input.extend_from_slice(z);
        let a = self.net(ModuleId::SkillDecoder).infer(1, &input);
        [a[0] * self.max_action, a[1] * self.max_action]
    }

    pub fn prior(&self, h: &[f32]) -> DiagGaussian {
        DiagGaussian::from_head(&self.net(ModuleId::SkillPrior).infer(1, h))
    }

    pub fn sample_prior(&self, h: &[f32], noise: &[f32]) -> Result<Vec<f32>> {
        Ok(self.prior(h).reparameterize(noise)?)
    }

    /// Both dynamics nets predict the change of the latent.
    pub fn flat_step(&self, h: &[f32], z: &[f32]) -> Vec<f32> {
        residual(h, self.net(ModuleId::FlatDynamics).infer(1, &[h, z].concat()))
    }

    pub fn skill_step(&self, h: &[f32], z: &[f32]) -> Vec<f32> {
        residual(h, self.net(ModuleId::SkillStepDynamics).infer(1, &[h, z].concat()))
    }

    /// `H` applications of the flat dynamics with one skill.
    pub fn flat_skill_step(&self, h: &[f32], z: &[f32]) -> Vec<f32> {
        (0..self.dims.horizon).fold(h.to_vec(), |cur, _| self.flat_step(&cur, z))
    }

    pub fn inverse_infer(&self, h: &[f32], h_next: &[f32]) -> DiagGaussian {
        DiagGaussian::from_head(&self.net(ModuleId::InverseDynamics).infer(1, &[h, h_next].concat()))
    }

    pub fn generate_goal(&self, h: &[f32], g: &Goal) -> Vec<f32> {
        let goal = self.scaled_goal(g);
        self.net(ModuleId::GoalGenerator).infer(1, &[h, &goal[..]].concat())
    }

    pub fn direct_policy(&self, h: &[f32], g: &Goal) -> DiagGaussian {
        let goal = self.scaled_goal(g);
        DiagGaussian::from_head(&self.net(ModuleId::DirectPolicy).infer(1, &[h, &goal[..]].concat()))
    }

    pub fn q_value(&self, h: &[f32], z: &[f32]) -> f32 {
        self.net(ModuleId::Critic).infer(1, &[h, z].concat())[0]
    }
}

fn rekey(p: &ParamSet) -> Vec<(String, skillstep_autodiff::Tensor)> {
    p.tensor_names()
        .iter()
        .cloned()
        .zip(p.tensors().iter().cloned())
        .collect()
}

/// Skill-encoder input: scaled actions followed by the scaled first state.
fn residual(h: &[f32], mut delta: Vec<f32>) -> Vec<f32> {
    delta.iter_mut().zip(h).for_each(|(d, x)| *d += x);
    delta
}

pub(crate) fn encoder_input(scaler: &StateScaler, max_action: f32, first: &EnvState, actions: &[[f32; 2]]) -> Vec<f32> {
    let mut v: Vec<f32> = actions
        .iter()
        .flat_map(|a| [a[0] / max_action, a[1] / max_action])
        .collect();
    v.extend_from_slice(&scaler.state(first));
    v
}
