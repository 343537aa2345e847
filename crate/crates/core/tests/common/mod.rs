#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use skillstep::config::TrainConfig;
use skillstep::dataset::DatasetStore;
use skillstep::env::MazeSpec;
use skillstep::losses::Batch;
use skillstep::model::{Dims, ModelBundle, ModuleId};
use skillstep::train::expert_dataset;
use skillstep_autodiff::{Graph, Perturbation, Var};

/// Small networks and a short schedule for fast end-to-end checks.
pub fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        seed: 5,
        ..Default::default()
    };
    cfg.model.horizon = 3;
    cfg.model.skill_dim = 2;
    cfg.model.latent_dim = 4;
    cfg.model.hidden = 8;
    cfg.optim.batch_size = 8;
    cfg.schedule.iterations = 2;
    cfg.schedule.epochs = 2;
    cfg.schedule.batches_per_epoch = 3;
    cfg.data.expert_trajectories = 16;
    cfg.rollout.branches = 4;
    cfg.rollout.skills = 2;
    cfg.eval.episodes = 3;
    cfg.eval.max_steps = 40;
    cfg.finetune.shots = 2;
    cfg.finetune.steps_per_episode = 2;
    cfg.finetune.batch_size = 4;
    cfg
}

/// Bundle whose parameters are pushed off their initial values so that
/// zero-initialized layers carry gradient.
pub fn jittered_bundle(cfg: &TrainConfig, maze: &MazeSpec, seed: u64) -> ModelBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bundle = ModelBundle::new(Dims::from_config(cfg), maze, &mut rng);
    let noise = Normal::new(0.0f32, 0.3).unwrap();
    for m in ModuleId::ALL {
        for t in bundle.params_mut(m).tensors_mut() {
            for v in t.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    bundle
}

pub fn tiny_store(cfg: &TrainConfig, maze: &MazeSpec) -> DatasetStore {
    expert_dataset(cfg, maze).unwrap()
}

pub fn batch(cfg: &TrainConfig, bundle: &ModelBundle, store: &DatasetStore, size: usize, seed: u64) -> Batch {
    let sampler = store.sampler(cfg.model.horizon).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch::sample(bundle, store, &sampler, cfg.data.relabel, size, &mut rng).unwrap()
}

/// Relative error between analytic and central-difference gradients of a
/// scalar built by `build`, over every trainable tensor of `bundle`, worst
/// tensor first. Stop-gradient values are held fixed in perturbed replays.
pub fn finite_difference_error<F>(bundle: &ModelBundle, step: f64, build: F) -> Vec<(String, f64)>
where
    F: Fn(&mut Graph<f64>) -> Var,
{
    let mut g = Graph::<f64>::new();
    let loss = build(&mut g);
    let detached = g.detached_values();
    let grads = g.backward(loss).unwrap();
    let mut out = Vec::new();
    for m in bundle.trainable() {
        let set = bundle.params(m);
        for (ti, t) in set.tensors().iter().enumerate() {
            let analytic: Vec<f64> = match grads.get(set.key(), ti) {
                Some(a) => a.to_vec(),
                None => vec![0.0; t.len()],
            };
            let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
            for (e, &a) in analytic.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut g = Graph::<f64>::with_perturbation(Perturbation {
                        set: set.key(),
                        tensor: ti,
                        element: e,
                        delta,
                    });
                    g.set_detach_replay(detached.clone());
                    let l = build(&mut g);
                    g.scalar(l)
                };
                let numeric = (eval(step) - eval(-step)) / (2.0 * step);
                diff += (a - numeric).powi(2);
                na += a * a;
                nn += numeric * numeric;
            }
            let scale = na.sqrt().max(nn.sqrt());
            let rel = if scale < 1e-10 { 0.0 } else { diff.sqrt() / scale };
            out.push((format!("{}[{ti}]", set.name()), rel));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

/// Whether every gradient entry of module `m` is exactly zero (or absent).
pub fn gradient_is_zero(grads: &skillstep_autodiff::Gradients<f64>, bundle: &ModelBundle, m: ModuleId) -> bool {
    let set = bundle.params(m);
    (0..set.tensors().len()).all(|ti| grads.get(set.key(), ti).is_none_or(|g| g.iter().all(|&v| v == 0.0)))
}

/// Bit patterns of every parameter of `m`.
pub fn param_bits(bundle: &ModelBundle, m: ModuleId) -> Vec<u32> {
    bundle
        .params(m)
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}
