//! Offline objective (skill, prior, model and goal losses), the adaptation
//! objective and the critic regression, built on a gradient tape.

use rand::Rng;
use rand_distr::StandardNormal;
use skillstep_autodiff::{GaussianVar, Graph, Mat, Real, Var};

use crate::config::{Relabel, TrainConfig, Variant};
use crate::dataset::{relabel_goal, DatasetStore, RelabelMode, SubSampler, SubTrajectory};
use crate::env::{EnvState, Goal};
use crate::model::{encoder_input, ModelBundle, ModuleId, ACTION_DIM, GOAL_DIM, STATE_DIM};
use crate::{Error, Result};

/// Scalars that shape the offline objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub beta: f32,
    pub skill_weight: f32,
    pub prior_weight: f32,
    pub model_weight: f32,
    pub goal_weight: f32,
    pub variant: Variant,
}

impl LossSettings {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta: cfg.loss.beta,
            skill_weight: cfg.loss.skill_weight,
            prior_weight: cfg.loss.prior_weight,
            model_weight: cfg.loss.model_weight,
            goal_weight: cfg.loss.goal_weight,
            variant: cfg.variant,
        }
    }
}

impl Default for LossSettings {
    fn default() -> Self {
        Self::from_config(&TrainConfig::default())
    }
}

/// Network-ready minibatch of sub-trajectories with goals and noise.
///
/// State rows are step-major: row `k * size + b` holds step `k` of datum `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    size: usize,
    horizon: usize,
    skill_dim: usize,
    states: Vec<f32>,
    actions: Vec<f32>,
    encoder_in: Vec<f32>,
    goals: Vec<f32>,
    skill_noise: Vec<f32>,
    goal_noise: Vec<f32>,
}

impl Batch {
    pub fn new(
        bundle: &ModelBundle,
        subs: &[SubTrajectory],
        goals: &[Goal],
        skill_noise: Vec<f32>,
        goal_noise: Vec<f32>,
    ) -> Result<Self> {
        let dims = bundle.dims();
        let (b, h) = (subs.len(), dims.horizon);
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if goals.len() != b || skill_noise.len() != b * dims.skill || goal_noise.len() != b * dims.skill {
            return Err(Error::Contract("batch goal or noise length mismatch".into()));
        }
        if let Some(s) = subs.iter().find(|s| s.states.len() != h + 1 || s.actions.len() != h) {
            return Err(Error::Contract(format!(
                "sub-trajectory with {} states and {} actions for horizon {h}",
                s.states.len(),
                s.actions.len()
            )));
        }
        let scaler = bundle.scaler();
        let ma = bundle.max_action();
        let mut states = Vec::with_capacity((h + 1) * b * STATE_DIM);
        for k in 0..=h {
            for s in subs {
                states.extend_from_slice(&scaler.state(&s.states[k]));
            }
        }
        let mut actions = Vec::with_capacity(h * b * ACTION_DIM);
        for k in 0..h {
            for s in subs {
                actions.extend_from_slice(&[s.actions[k][0] / ma, s.actions[k][1] / ma]);
            }
        }
        let encoder_in = subs
            .iter()
            .flat_map(|s| encoder_input(scaler, ma, &s.states[0], &s.actions))
            .collect();
        let goals = goals.iter().flat_map(|g| scaler.goal(g)).collect();
        Ok(Self {
            size: b,
            horizon: h,
            skill_dim: dims.skill,
            states,
            actions,
            encoder_in,
            goals,
            skill_noise,
            goal_noise,
        })
    }

    /// Draw `size` sub-trajectories, relabel their goals and draw noise.
    pub fn sample<R: Rng + ?Sized>(
        bundle: &ModelBundle,
        store: &DatasetStore,
        sampler: &SubSampler,
        relabel: Relabel,
        size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mode = match relabel {
            Relabel::Final => RelabelMode::Final,
            Relabel::Future => RelabelMode::Future,
        };
        let mut subs = Vec::with_capacity(size);
        let mut goals = Vec::with_capacity(size);
        for _ in 0..size {
            let sub = sampler.sample(store, rng);
            let traj = &store.trajectories()[sub.trajectory];
            goals.push(relabel_goal(traj, sub.offset, sampler.horizon(), mode, rng));
            subs.push(sub);
        }
        let dz = bundle.dims().skill;
        let skill_noise = normal_vec(rng, size * dz);
        let goal_noise = normal_vec(rng, size * dz);
        Self::new(bundle, &subs, &goals, skill_noise, goal_noise)
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

pub(crate) fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Scalar nodes of every loss component, each a batch mean.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub skill: Var,
    pub skill_recon: Var,
    pub skill_kl: Var,
    pub prior: Var,
    pub model: Var,
    pub obs_recon: Var,
    pub flat: Var,
    pub skill_step: Var,
    pub inverse: Var,
    pub goal: Var,
    pub goal_bc: Var,
    pub goal_sanity: Var,
}

/// Values of [`LossVars`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub skill: f64,
    pub skill_recon: f64,
    pub skill_kl: f64,
    pub prior: f64,
    pub model: f64,
    pub obs_recon: f64,
    pub flat: f64,
    pub skill_step: f64,
    pub inverse: f64,
    pub goal: f64,
    pub goal_bc: f64,
    pub goal_sanity: f64,
}

impl LossVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.scalar(x).as_f64();
        LossValues {
            total: v(self.total),
            skill: v(self.skill),
            skill_recon: v(self.skill_recon),
            skill_kl: v(self.skill_kl),
            prior: v(self.prior),
            model: v(self.model),
            obs_recon: v(self.obs_recon),
            flat: v(self.flat),
            skill_step: v(self.skill_step),
            inverse: v(self.inverse),
            goal: v(self.goal),
            goal_bc: v(self.goal_bc),
            goal_sanity: v(self.goal_sanity),
        }
    }
}

/// Builds loss components on a tape, sharing forward passes between them.
///
/// Separate instances never share nodes, so each component can also be
/// computed in isolation.
pub struct OfflineLoss<'a> {
    bundle: &'a ModelBundle,
    batch: &'a Batch,
    settings: LossSettings,
    latents: Option<Var>,
    targets: Option<Var>,
    posterior: Option<GaussianVar>,
    skill: Option<Var>,
    stopped_first: Option<Var>,
}

impl<'a> OfflineLoss<'a> {
    pub fn new(bundle: &'a ModelBundle, batch: &'a Batch, settings: LossSettings) -> Self {
        Self {
            bundle,
            batch,
            settings,
            latents: None,
            targets: None,
            posterior: None,
            skill: None,
            stopped_first: None,
        }
    }

    fn net(&self, m: ModuleId) -> &'a skillstep_autodiff::Mlp {
        self.bundle.net(m)
    }

    fn rows(&self) -> (usize, usize) {
        (self.batch.size, self.batch.horizon)
    }

    fn mean<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Var {
        g.sum_over(x, self.batch.size)
    }

    fn zero<T: Real>(g: &mut Graph<T>) -> Var {
        g.constant(Mat::zeros(1, 1))
    }

    fn states<T: Real>(&self, g: &mut Graph<T>) -> Var {
        let (b, h) = self.rows();
        g.constant_f32((h + 1) * b, STATE_DIM, &self.batch.states)
    }

    /// Online latents of every state, `[(H + 1) * B, d_h]`.
    fn latents<T: Real>(&mut self, g: &mut Graph<T>) -> Result<Var> {
        if let Some(v) = self.latents {
            return Ok(v);
        }
        let s = self.states(g);
        let v = self.net(ModuleId::StateEncoder).forward(g, s)?;
        self.latents = Some(v);
        Ok(v)
    }

    /// Target-encoder latents of every state.
    fn targets<T: Real>(&mut self, g: &mut Graph<T>) -> Result<Var> {
        if let Some(v) = self.targets {
            return Ok(v);
        }
        let s = self.states(g);
        let v = self.net(ModuleId::TargetEncoder).forward(g, s)?;
        self.targets = Some(v);
        Ok(v)
    }

    fn posterior<T: Real>(&mut self, g: &mut Graph<T>) -> Result<GaussianVar> {
        if let Some(q) = self.posterior {
            return Ok(q);
        }
        let (b, h) = self.rows();
        let x = g.constant_f32(b, ACTION_DIM * h + STATE_DIM, &self.batch.encoder_in);
        let head = self.net(ModuleId::SkillEncoder).forward(g, x)?;
        let q = GaussianVar::from_head(g, head);
        self.posterior = Some(q);
        Ok(q)
    }

    /// Reparameterized posterior sample, `[B, d_z]`.
    fn skill<T: Real>(&mut self, g: &mut Graph<T>) -> Result<Var> {
        if let Some(z) = self.skill {
            return Ok(z);
        }
        let q = self.posterior(g)?;
        let noise = g.constant_f32(self.batch.size, self.batch.skill_dim, &self.batch.skill_noise);
        let z = q.sample(g, noise);
        self.skill = Some(z);
        Ok(z)
    }

    /// The skill repeated for each of the `H` steps.
    fn skill_per_step<T: Real>(&mut self, g: &mut Graph<T>) -> Result<Var> {
        let z = self.skill(g)?;
        Ok(g.concat_rows(&vec![z; self.batch.horizon]))
    }

    /// Stop-gradient latent of the first state.
    fn stopped_first<T: Real>(&mut self, g: &mut Graph<T>) -> Result<Var> {
        if let Some(v) = self.stopped_first {
            return Ok(v);
        }
        let hs = self.latents(g)?;
        let first = g.slice_rows(hs, 0, self.batch.size);
        let v = g.detach(first);
        self.stopped_first = Some(v);
        Ok(v)
    }

    /// Sum over steps of squared action error, and `KL(q || N(0, I))`.
    pub fn skill_terms<T: Real>(&mut self, g: &mut Graph<T>) -> Result<(Var, Var)> {
        let (b, h) = self.rows();
        let all = self.states(g);
        let s = g.slice_rows(all, 0, h * b);
        let z = self.skill_per_step(g)?;
        let x = g.concat_cols(&[s, z]);
        let pred = self.net(ModuleId::SkillDecoder).forward(g, x)?;
        let target = g.constant_f32(h * b, ACTION_DIM, &self.batch.actions);
        let recon = g.sq_error_over(pred, target, b);
        let q = self.posterior(g)?;
        let kl = q.kl_standard(g);
        let kl = self.mean(g, kl);
        Ok((recon, kl))
    }

    /// `KL(prior(sg h_t) || sg q)`.
    pub fn prior_term<T: Real>(&mut self, g: &mut Graph<T>) -> Result<Var> {
        let h0 = self.stopped_first(g)?;
        let head = self.net(ModuleId::SkillPrior).forward(g, h0)?;
        let p = GaussianVar::from_head(g, head);
        let q = self.posterior(g)?.detach(g);
        let kl = p.kl(g, &q);
        Ok(self.mean(g, kl))
    }

    /// Observation reconstruction, flat dynamics, skill-step dynamics and
    /// inverse-dynamics terms.
    pub fn model_terms<T: Real>(&mut self, g: &mut Graph<T>) -> Result<[Var; 4]> {
        let (b, h) = self.rows();
        let hs = self.latents(g)?;
        let bar = self.targets(g)?;
        let all = self.states(g);

        let hk = g.slice_rows(hs, 0, h * b);
        let recon = self.net(ModuleId::StateDecoder).forward(g, hk)?;
        let sk = g.slice_rows(all, 0, h * b);
        let obs = g.sq_error_over(recon, sk, b);

        let z_steps = self.skill_per_step(g)?;
        let x = g.concat_cols(&[hk, z_steps]);
        let delta = self.net(ModuleId::FlatDynamics).forward(g, x)?;
        let next = g.add(hk, delta);
        let bar_next = g.slice_rows(bar, b, (h + 1) * b);
        let flat = g.sq_error_over(next, bar_next, b);

        let bar_last = g.slice_rows(bar, h * b, (h + 1) * b);
        let skill_step = if self.settings.variant.skill_step_dynamics {
            let h0 = g.slice_rows(hs, 0, b);
            let z = self.skill(g)?;
            let x = g.concat_cols(&[h0, z]);
            let delta = self.net(ModuleId::SkillStepDynamics).forward(g, x)?;
            let jump = g.add(h0, delta);
            g.sq_error_over(jump, bar_last, b)
        } else {
            Self::zero(g)
        };

        let h0 = self.stopped_first(g)?;
        let last = g.slice_rows(hs, h * b, (h + 1) * b);
        let last = g.detach(last);
        let x = g.concat_cols(&[h0, last]);
        let head = self.net(ModuleId::InverseDynamics).forward(g, x)?;
        let inv = GaussianVar::from_head(g, head);
        let q = self.posterior(g)?.detach(g);
        let kl = q.kl(g, &inv);
        let inverse = self.mean(g, kl);
        Ok([obs, flat, skill_step, inverse])
    }

    /// Behavior-cloning and cyclic-consistency terms of the goal loss.
    ///
    /// Without the goal generator the first term trains the direct head
    /// toward the stop-gradient posterior and the second is zero.
    pub fn goal_terms<T: Real>(&mut self, g: &mut Graph<T>) -> Result<(Var, Var)> {
        let (b, h) = self.rows();
        let h0 = self.stopped_first(g)?;
        let goals = g.constant_f32(b, GOAL_DIM, &self.batch.goals);
        let x = g.concat_cols(&[h0, goals]);
        let variant = self.settings.variant;
        if !variant.goal_generator {
            let head = self.net(ModuleId::DirectPolicy).forward(g, x)?;
            let pi = GaussianVar::from_head(g, head);
            let q = self.posterior(g)?.detach(g);
            let kl = q.kl(g, &pi);
            return Ok((self.mean(g, kl), Self::zero(g)));
        }
        let goal_latent = self.net(ModuleId::GoalGenerator).forward(g, x)?;
        let bar = self.targets(g)?;
        let bar_last = g.slice_rows(bar, h * b, (h + 1) * b);
        let bc = g.sq_error_over(bar_last, goal_latent, b);
        let sanity = if variant.sanity_check {
            let x = g.concat_cols(&[h0, goal_latent]);
            let head = self.net(ModuleId::InverseDynamics).forward_stopped(g, x)?;
            let inv = GaussianVar::from_head(g, head);
            let noise = g.constant_f32(b, self.batch.skill_dim, &self.batch.goal_noise);
            let z_hat = inv.sample(g, noise);
            let image = skill_image(g, self.bundle, variant, h0, z_hat, true)?;
            g.sq_error_over(goal_latent, image, b)
        } else {
            Self::zero(g)
        };
        Ok((bc, sanity))
    }

    pub fn skill_loss<T: Real>(&mut self, g: &mut Graph<T>) -> Result<Var> {
        let (recon, kl) = self.skill_terms(g)?;
        let kl = g.scale(kl, self.settings.beta as f64);
        Ok(g.add(recon, kl))
    }

    pub fn model_loss<T: Real>(&mut self, g: &mut Graph<T>) -> Result<Var> {
        let [a, b, c, d] = self.model_terms(g)?;
        let ab = g.add(a, b);
        let cd = g.add(c, d);
        Ok(g.add(ab, cd))
    }

    pub fn goal_loss<T: Real>(&mut self, g: &mut Graph<T>) -> Result<Var> {
        let (bc, sanity) = self.goal_terms(g)?;
        Ok(g.add(bc, sanity))
    }

    /// Weighted sum of the four losses plus every component node.
    pub fn total<T: Real>(&mut self, g: &mut Graph<T>) -> Result<LossVars> {
        let (skill_recon, skill_kl) = self.skill_terms(g)?;
        let kl = g.scale(skill_kl, self.settings.beta as f64);
        let skill = g.add(skill_recon, kl);
        let prior = self.prior_term(g)?;
        let [obs_recon, flat, skill_step, inverse] = self.model_terms(g)?;
        let m1 = g.add(obs_recon, flat);
        let m2 = g.add(skill_step, inverse);
        let model = g.add(m1, m2);
        let (goal_bc, goal_sanity) = self.goal_terms(g)?;
        let goal = g.add(goal_bc, goal_sanity);
        let s = &self.settings;
        let parts = [
            (skill, s.skill_weight),
            (prior, s.prior_weight),
            (model, s.model_weight),
            (goal, s.goal_weight),
        ];
        let mut total = None;
        for (v, w) in parts {
            let term = if w == 1.0 { v } else { g.scale(v, w as f64) };
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
        Ok(LossVars {
            total: total.expect("four terms"),
            skill,
            skill_recon,
            skill_kl,
            prior,
            model,
            obs_recon,
            flat,
            skill_step,
            inverse,
            goal,
            goal_bc,
            goal_sanity,
        })
    }
}

/// Predicted latent one skill-step after `h` under `z`: the skill-step
/// dynamics, or the `H`-fold flat dynamics when that module is ablated.
/// `stopped` keeps gradients out of the dynamics parameters.
pub fn skill_image<T: Real>(
    g: &mut Graph<T>,
    bundle: &ModelBundle,
    variant: Variant,
    h: Var,
    z: Var,
    stopped: bool,
) -> Result<Var> {
    let run = |g: &mut Graph<T>, m: ModuleId, x: Var| {
        if stopped {
            bundle.net(m).forward_stopped(g, x)
        } else {
            bundle.net(m).forward(g, x)
        }
    };
    if variant.skill_step_dynamics {
        let x = g.concat_cols(&[h, z]);
        let delta = run(g, ModuleId::SkillStepDynamics, x)?;
        return Ok(g.add(h, delta));
    }
    let mut cur = h;
    for _ in 0..bundle.dims().horizon {
        let x = g.concat_cols(&[cur, z]);
        let delta = run(g, ModuleId::FlatDynamics, x)?;
        cur = g.add(cur, delta);
    }
    Ok(cur)
}

/// Start states and commanded goals for the adaptation objective.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptBatch {
    pub states: Vec<EnvState>,
    pub goals: Vec<Goal>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptVars {
    pub total: Var,
    pub value: Var,
    pub prior_kl: Var,
    pub consistency: Var,
}

/// The module tuned during adaptation for a variant.
pub fn policy_module(variant: Variant) -> ModuleId {
    if variant.goal_generator {
        ModuleId::GoalGenerator
    } else {
        ModuleId::DirectPolicy
    }
}

/// `-Q(h, z_pi) + alpha * KL(pi || prior(h)) + w * |image(h, z_pi) - f(h, g)|^2`
/// averaged over the batch, where `pi` is the inverse dynamics at the
/// generated goal and `z_pi` its mean.
///
/// Every module but the policy module must be frozen.
pub fn adapt_loss<T: Real>(
    g: &mut Graph<T>,
    bundle: &ModelBundle,
    batch: &AdaptBatch,
    variant: Variant,
    alpha: f32,
    consistency_weight: f32,
) -> Result<AdaptVars> {
    let tuned = policy_module(variant);
    let extra: Vec<_> = bundle.trainable().into_iter().filter(|&m| m != tuned).collect();
    if !extra.is_empty() {
        return Err(Error::Contract(format!("modules not frozen for adaptation: {extra:?}")));
    }
    let n = batch.states.len();
    if n == 0 || batch.goals.len() != n {
        return Err(Error::Contract("adaptation batch is empty or ragged".into()));
    }
    let states: Vec<f32> = batch.states.iter().flat_map(|s| bundle.scaled_state(s)).collect();
    let goals: Vec<f32> = batch.goals.iter().flat_map(|x| bundle.scaled_goal(x)).collect();
    let s = g.constant_f32(n, STATE_DIM, &states);
    let h = bundle.net(ModuleId::StateEncoder).forward(g, s)?;
    let h = g.detach(h);
    let goal = g.constant_f32(n, GOAL_DIM, &goals);
    let x = g.concat_cols(&[h, goal]);
    let (pi, generated) = if variant.goal_generator {
        let f = bundle.net(ModuleId::GoalGenerator).forward(g, x)?;
        let x = g.concat_cols(&[h, f]);
        let head = bundle.net(ModuleId::InverseDynamics).forward(g, x)?;
        (GaussianVar::from_head(g, head), Some(f))
    } else {
        let head = bundle.net(ModuleId::DirectPolicy).forward(g, x)?;
        (GaussianVar::from_head(g, head), None)
    };
    let z = pi.mean;
    let x = g.concat_cols(&[h, z]);
    let q = bundle.net(ModuleId::Critic).forward(g, x)?;
    let q = g.sum_over(q, n);
    let value = g.scale(q, -1.0);

    let head = bundle.net(ModuleId::SkillPrior).forward(g, h)?;
    let prior = GaussianVar::from_head(g, head);
    let kl = pi.kl(g, &prior);
    let prior_kl = g.sum_over(kl, n);

    let consistency = match generated {
        Some(f) => {
            let image = skill_image(g, bundle, variant, h, z, false)?;
            g.sq_error_over(image, f, n)
        }
        None => g.constant(Mat::zeros(1, 1)),
    };
    let a = g.scale(prior_kl, alpha as f64);
    let c = g.scale(consistency, consistency_weight as f64);
    let total = g.add(value, a);
    let total = g.add(total, c);
    Ok(AdaptVars {
        total,
        value,
        prior_kl,
        consistency,
    })
}

/// One online skill-step transition.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillTransition {
    pub state: EnvState,
    pub skill: Vec<f32>,
    /// Reward accumulated over the executed steps.
    pub reward: f32,
    pub next_state: EnvState,
    pub done: bool,
    pub goal: Goal,
}

/// `r + gamma_h * (1 - done) * Q_target(h', z')` with `z'` the current
/// high-level policy's mean skill at `(s', g)`.
pub fn td_targets(bundle: &ModelBundle, batch: &[SkillTransition], gamma_h: f32, variant: Variant) -> Vec<f32> {
    batch
        .iter()
        .map(|t| {
            if t.done {
                return t.reward;
            }
            let h = bundle.encode_state(&t.next_state);
            let z = crate::policy::mean_skill(bundle, &h, &t.goal, variant);
            let q = bundle.net(ModuleId::TargetCritic).infer(1, &[&h[..], &z[..]].concat())[0];
            t.reward + gamma_h * q
        })
        .collect()
}

/// Mean squared error of `Q(h, z)` against fixed targets.
pub fn critic_loss<T: Real>(
    g: &mut Graph<T>,
    bundle: &ModelBundle,
    batch: &[SkillTransition],
    targets: &[f32],
) -> Result<Var> {
    let n = batch.len();
    if n == 0 || targets.len() != n {
        return Err(Error::Contract("critic batch is empty or ragged".into()));
    }
    let dz = bundle.dims().skill;
    let states: Vec<f32> = batch.iter().flat_map(|t| bundle.scaled_state(&t.state)).collect();
    let skills: Vec<f32> = batch.iter().flat_map(|t| t.skill.iter().copied()).collect();
    if skills.len() != n * dz {
        return Err(Error::Contract("transition skill width mismatch".into()));
    }
    let s = g.constant_f32(n, STATE_DIM, &states);
    let h = bundle.net(ModuleId::StateEncoder).forward(g, s)?;
    let h = g.detach(h);
    let z = g.constant_f32(n, dz, &skills);
    let x = g.concat_cols(&[h, z]);
    let q = bundle.net(ModuleId::Critic).forward(g, x)?;
    let y = g.constant_f32(n, 1, targets);
    Ok(g.sq_error_over(q, y, n))
}
