mod common;

use common::{jittered_bundle, tiny_config, tiny_store};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use skillstep::config::TrainConfig;
use skillstep::dataset::{DatasetStore, SubTrajectory};
use skillstep::env::{EnvState, Goal, MazeSpec};
use skillstep::losses::{
    adapt_loss, critic_loss, policy_module, td_targets, AdaptBatch, Batch, LossSettings, OfflineLoss, SkillTransition,
};
use skillstep::model::{ModelBundle, ModuleId};
use skillstep_autodiff::{gaussian_kl, DiagGaussian, Graph};

struct Fixture {
    cfg: TrainConfig,
    bundle: ModelBundle,
    subs: Vec<SubTrajectory>,
    goals: Vec<Goal>,
    skill_noise: Vec<Vec<f32>>,
    goal_noise: Vec<Vec<f32>>,
}

impl Fixture {
    fn new(size: usize) -> Self {
        let cfg = tiny_config();
        let maze = MazeSpec::default();
        let store = tiny_store(&cfg, &maze);
        let bundle = jittered_bundle(&cfg, &maze, 17);
        let h = cfg.model.horizon;
        let subs: Vec<_> = slices(&store, h).into_iter().take(size).collect();
        assert_eq!(subs.len(), size);
        let goals = subs.iter().map(|s| Goal(s.states[h].pos)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut noise = || -> Vec<f32> {
            (0..cfg.model.skill_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        };
        let skill_noise = (0..size).map(|_| noise()).collect();
        let goal_noise = (0..size).map(|_| noise()).collect();
        Self {
            cfg,
            bundle,
            subs,
            goals,
            skill_noise,
            goal_noise,
        }
    }

    fn batch(&self) -> Batch {
        Batch::new(
            &self.bundle,
            &self.subs,
            &self.goals,
            self.skill_noise.concat(),
            self.goal_noise.concat(),
        )
        .unwrap()
    }

    fn posterior(&self, i: usize) -> DiagGaussian {
        self.bundle
            .skill_posterior(&self.subs[i].states[0], &self.subs[i].actions)
            .unwrap()
    }

    fn skill(&self, i: usize) -> Vec<f32> {
        self.posterior(i).reparameterize(&self.skill_noise[i]).unwrap()
    }

    fn infer(&self, m: ModuleId, parts: &[&[f32]]) -> Vec<f32> {
        self.bundle.net(m).infer(1, &parts.concat())
    }

    fn mean_over(&self, f: impl Fn(usize) -> f64) -> f64 {
        (0..self.subs.len()).map(f).sum::<f64>() / self.subs.len() as f64
    }
}

fn slices(store: &DatasetStore, h: usize) -> Vec<SubTrajectory> {
    store
        .trajectories()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.len() > h)
        .map(|(i, t)| store.slice(i, (t.len() - h) / 2, h))
        .collect()
}

fn sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1.0)
}

fn offline(fx: &Fixture, settings: LossSettings, f: impl FnOnce(&mut OfflineLoss, &mut Graph<f64>) -> f64) -> f64 {
    let batch = fx.batch();
    let mut g = Graph::<f64>::new();
    let mut loss = OfflineLoss::new(&fx.bundle, &batch, settings);
    f(&mut loss, &mut g)
}

#[test]
fn skill_loss_matches_hand_composed_reconstruction_and_kl() {
    let fx = Fixture::new(5);
    let ma = fx.bundle.max_action();
    let recon = fx.mean_over(|i| {
        let z = fx.skill(i);
        let sub = &fx.subs[i];
        sub.actions
            .iter()
            .zip(&sub.states)
            .map(|(a, s)| {
                let p = fx.bundle.decode_action(s, &z);
                sq(&[p[0] / ma, p[1] / ma], &[a[0] / ma, a[1] / ma])
            })
            .sum()
    });
    let kl = fx.mean_over(|i| gaussian_kl(&fx.posterior(i), &DiagGaussian::standard(fx.cfg.model.skill_dim)).unwrap());
    let settings = LossSettings::from_config(&fx.cfg);
    let got = offline(&fx, settings, |l, g| {
        let v = l.skill_loss(g).unwrap();
        g.scalar(v)
    });
    assert!(
        close(got, recon + fx.cfg.loss.beta as f64 * kl),
        "{got} vs {}",
        recon + 0.1 * kl
    );

    let pure = offline(&fx, LossSettings { beta: 0.0, ..settings }, |l, g| {
        let v = l.skill_loss(g).unwrap();
        g.scalar(v)
    });
    assert!(close(pure, recon), "{pure} vs {recon}");
}

#[test]
fn prior_loss_matches_hand_composed_kl() {
    let fx = Fixture::new(4);
    let expected = fx.mean_over(|i| {
        let h0 = fx.bundle.encode_state(&fx.subs[i].states[0]);
        gaussian_kl(&fx.bundle.prior(&h0), &fx.posterior(i)).unwrap()
    });
    let got = offline(&fx, LossSettings::from_config(&fx.cfg), |l, g| {
        let v = l.prior_term(g).unwrap();
        g.scalar(v)
    });
    assert!(close(got, expected), "{got} vs {expected}");
}

#[test]
fn model_loss_recomposes_from_independent_components() {
    let fx = Fixture::new(4);
    let b = &fx.bundle;
    let h = fx.cfg.model.horizon;
    let obs = fx.mean_over(|i| {
        (0..h)
            .map(|k| {
                let s = &fx.subs[i].states[k];
                let back = fx.infer(ModuleId::StateDecoder, &[&b.encode_state(s)]);
                sq(&back, &b.scaled_state(s))
            })
            .sum()
    });
    let flat = fx.mean_over(|i| {
        let z = fx.skill(i);
        (0..h)
            .map(|k| {
                let hk = b.encode_state(&fx.subs[i].states[k]);
                sq(&b.flat_step(&hk, &z), &b.encode_target(&fx.subs[i].states[k + 1]))
            })
            .sum()
    });
    let jump = fx.mean_over(|i| {
        let h0 = b.encode_state(&fx.subs[i].states[0]);
        sq(
            &b.skill_step(&h0, &fx.skill(i)),
            &b.encode_target(&fx.subs[i].states[h]),
        )
    });
    let inverse = fx.mean_over(|i| {
        let h0 = b.encode_state(&fx.subs[i].states[0]);
        let hh = b.encode_state(&fx.subs[i].states[h]);
        gaussian_kl(&fx.posterior(i), &b.inverse_infer(&h0, &hh)).unwrap()
    });
    let (parts, total) = {
        let batch = fx.batch();
        let mut g = Graph::<f64>::new();
        let mut l = OfflineLoss::new(b, &batch, LossSettings::from_config(&fx.cfg));
        let terms = l.model_terms(&mut g).unwrap().map(|v| g.scalar(v));
        let total = l.model_loss(&mut g).unwrap();
        (terms, g.scalar(total))
    };
    for (got, want) in parts.iter().zip([obs, flat, jump, inverse]) {
        assert!(close(*got, want), "{parts:?} vs {:?}", [obs, flat, jump, inverse]);
    }
    assert!(close(total, obs + flat + jump + inverse));
}

#[test]
fn goal_loss_recomposes_from_its_two_terms() {
    let fx = Fixture::new(4);
    let b = &fx.bundle;
    let h = fx.cfg.model.horizon;
    let mut bc = 0.0;
    let mut sanity = 0.0;
    for i in 0..fx.subs.len() {
        let h0 = b.encode_state(&fx.subs[i].states[0]);
        let f = b.generate_goal(&h0, &fx.goals[i]);
        bc += sq(&b.encode_target(&fx.subs[i].states[h]), &f);
        let z_hat = b.inverse_infer(&h0, &f).reparameterize(&fx.goal_noise[i]).unwrap();
        sanity += sq(&f, &b.skill_step(&h0, &z_hat));
    }
    let n = fx.subs.len() as f64;
    let (got_bc, got_sanity, got) = {
        let batch = fx.batch();
        let mut g = Graph::<f64>::new();
        let mut l = OfflineLoss::new(b, &batch, LossSettings::from_config(&fx.cfg));
        let (x, y) = l.goal_terms(&mut g).unwrap();
        let t = l.goal_loss(&mut g).unwrap();
        (g.scalar(x), g.scalar(y), g.scalar(t))
    };
    assert!(close(got_bc, bc / n), "{got_bc} vs {}", bc / n);
    assert!(close(got_sanity, sanity / n), "{got_sanity} vs {}", sanity / n);
    assert!(close(got, (bc + sanity) / n));
}

#[test]
fn bc_only_variant_drops_the_sanity_term() {
    let mut fx = Fixture::new(3);
    fx.cfg.variant.sanity_check = false;
    let (bc, sanity, total) = {
        let batch = fx.batch();
        let mut g = Graph::<f64>::new();
        let mut l = OfflineLoss::new(&fx.bundle, &batch, LossSettings::from_config(&fx.cfg));
        let (x, y) = l.goal_terms(&mut g).unwrap();
        let t = l.goal_loss(&mut g).unwrap();
        (g.scalar(x), g.scalar(y), g.scalar(t))
    };
    assert_eq!(sanity, 0.0);
    assert_eq!(total, bc);
}

#[test]
fn adaptation_loss_recomposes_from_three_terms() {
    let fx = Fixture::new(4);
    let mut bundle = fx.bundle.clone();
    let variant = fx.cfg.variant;
    bundle.freeze_all_except(&[policy_module(variant)]);
    let batch = AdaptBatch {
        states: fx.subs.iter().map(|s| s.states[0]).collect(),
        goals: fx.goals.clone(),
    };
    let (alpha, w) = (0.3f32, 0.7f32);
    let (mut value, mut kl, mut cons) = (0.0, 0.0, 0.0);
    for (s, goal) in batch.states.iter().zip(&batch.goals) {
        let h = bundle.encode_state(s);
        let f = bundle.generate_goal(&h, goal);
        let pi = bundle.inverse_infer(&h, &f);
        let z = pi.mean();
        value -= bundle.q_value(&h, z) as f64;
        kl += gaussian_kl(&pi, &bundle.prior(&h)).unwrap();
        cons += sq(&bundle.skill_step(&h, z), &f);
    }
    let n = batch.states.len() as f64;
    let mut g = Graph::<f64>::new();
    let v = adapt_loss(&mut g, &bundle, &batch, variant, alpha, w).unwrap();
    assert!(close(g.scalar(v.value), value / n));
    assert!(close(g.scalar(v.prior_kl), kl / n));
    assert!(close(g.scalar(v.consistency), cons / n));
    let recomposed = g.scalar(v.value) + alpha as f64 * g.scalar(v.prior_kl) + w as f64 * g.scalar(v.consistency);
    assert!(close(g.scalar(v.total), recomposed));
}

#[test]
fn adaptation_requires_everything_else_frozen() {
    let fx = Fixture::new(2);
    let batch = AdaptBatch {
        states: vec![fx.subs[0].states[0]],
        goals: vec![fx.goals[0]],
    };
    let mut g = Graph::<f64>::new();
    assert!(adapt_loss(&mut g, &fx.bundle, &batch, fx.cfg.variant, 0.1, 1.0).is_err());
}

#[test]
fn td_target_matches_scalar_oracle() {
    let fx = Fixture::new(1);
    let b = &fx.bundle;
    let next = EnvState {
        pos: [1.5, 2.5],
        vel: [0.2, -0.1],
    };
    let goal = Goal([3.5, 1.5]);
    let t = SkillTransition {
        state: fx.subs[0].states[0],
        skill: vec![0.1, -0.2],
        reward: 2.0,
        next_state: next,
        done: false,
        goal,
    };
    let gamma_h = 0.99f32.powi(3);
    let h = b.encode_state(&next);
    let z_next = b.inverse_infer(&h, &b.generate_goal(&h, &goal)).mean().to_vec();
    let q = b.net(ModuleId::TargetCritic).infer(1, &[&h[..], &z_next[..]].concat())[0];
    let got = td_targets(b, std::slice::from_ref(&t), gamma_h, fx.cfg.variant);
    assert!((got[0] - (2.0 + gamma_h * q)).abs() < 1e-5);

    let terminal = SkillTransition { done: true, ..t };
    assert_eq!(td_targets(b, &[terminal], gamma_h, fx.cfg.variant), vec![2.0]);
}

#[test]
fn critic_loss_is_mean_squared_td_error() {
    let fx = Fixture::new(2);
    let b = &fx.bundle;
    let batch: Vec<_> = fx
        .subs
        .iter()
        .map(|s| SkillTransition {
            state: s.states[0],
            skill: vec![0.3, 0.4],
            reward: 0.0,
            next_state: s.states[1],
            done: true,
            goal: Goal(s.states[1].pos),
        })
        .collect();
    let targets = [1.0f32, -0.5];
    let expected: f64 = batch
        .iter()
        .zip(targets)
        .map(|(t, y)| (b.q_value(&b.encode_state(&t.state), &t.skill) as f64 - y as f64).powi(2))
        .sum::<f64>()
        / 2.0;
    let mut g = Graph::<f64>::new();
    let l = critic_loss(&mut g, b, &batch, &targets).unwrap();
    assert!(close(g.scalar(l), expected));
    assert!(critic_loss(&mut g, b, &batch, &targets[..1]).is_err());
}

#[test]
fn posterior_reacts_to_a_single_action() {
    let fx = Fixture::new(1);
    let sub = &fx.subs[0];
    let mut actions = sub.actions.clone();
    actions[1][0] = -actions[1][0] + 0.5;
    let a = fx.posterior(0);
    let b = fx.bundle.skill_posterior(&sub.states[0], &actions).unwrap();
    assert_ne!(a.mean(), b.mean());
    assert!(fx.bundle.skill_posterior(&sub.states[0], &actions[1..]).is_err());
}

#[test]
fn total_is_deterministic_for_a_fixed_batch() {
    let cfg = tiny_config();
    let maze = MazeSpec::default();
    let store = tiny_store(&cfg, &maze);
    let bundle = jittered_bundle(&cfg, &maze, 2);
    let run = || {
        let batch = common::batch(&cfg, &bundle, &store, 6, 9);
        let mut g = Graph::<f32>::new();
        let v = OfflineLoss::new(&bundle, &batch, LossSettings::from_config(&cfg))
            .total(&mut g)
            .unwrap();
        g.scalar(v.total).to_bits()
    };
    assert_eq!(run(), run());
}
