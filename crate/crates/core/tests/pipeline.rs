mod common;

use common::{param_bits, tiny_config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skillstep::checkpoint::{load_checkpoint, to_bytes};
use skillstep::config::TrainConfig;
use skillstep::dataset::Provenance;
use skillstep::env::MazeSpec;
use skillstep::eval::{eval_zeroshot, finetune_fewshot, EvalReport};
use skillstep::metrics::{load_metrics, to_csv};
use skillstep::model::ModuleId;
use skillstep::par::Exec;
use skillstep::rollout::{decode_trajectory, latent_rollout, run_iteration_rollouts};
use skillstep::shift::{ShiftConfig, ShiftLevel};
use skillstep::train::{checkpoint_path, dataset_path, Trainer};

fn trained(cfg: &TrainConfig) -> Trainer {
    let mut t = Trainer::from_config(cfg.clone()).unwrap();
    t.train(None).unwrap();
    t
}

#[test]
fn one_iteration_without_rollouts_is_pure_offline_training() {
    let mut cfg = tiny_config();
    cfg.schedule.iterations = 1;
    cfg.rollout.branches = 0;
    let t = trained(&cfg);
    assert_eq!(t.store.count(Provenance::Synthetic), 0);
    assert_eq!(t.store.len(), cfg.data.expert_trajectories);
    assert_eq!(t.bundle.iteration, 1);
    let epochs = t.metrics.iter().filter(|m| m.epoch.is_some()).count();
    assert_eq!(epochs, cfg.schedule.epochs);
}

#[test]
fn identical_config_gives_identical_checkpoint_and_metrics() {
    let cfg = tiny_config();
    let (a, b) = (trained(&cfg), trained(&cfg));
    assert_eq!(
        to_bytes(&a.config, &a.maze, &a.bundle),
        to_bytes(&b.config, &b.maze, &b.bundle)
    );
    assert_eq!(to_csv(&a.metrics), to_csv(&b.metrics));

    let mut other = cfg.clone();
    other.seed += 1;
    let c = trained(&other);
    assert_ne!(
        to_bytes(&a.config, &a.maze, &a.bundle),
        to_bytes(&c.config, &c.maze, &c.bundle)
    );
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let cfg = tiny_config();
    let run = |exec| {
        let mut t = Trainer::from_config(cfg.clone()).unwrap();
        t.exec = exec;
        t.train(None).unwrap();
        to_bytes(&t.config, &t.maze, &t.bundle)
    };
    assert_eq!(run(Exec::Sequential), run(Exec::Parallel));
}

#[test]
fn resume_after_any_iteration_matches_uninterrupted_run() {
    let mut cfg = tiny_config();
    cfg.schedule.iterations = 3;
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let mut t = Trainer::from_config(cfg.clone()).unwrap();
    t.write_outputs(&full).unwrap();
    t.train(Some(&full)).unwrap();
    let reference = std::fs::read(checkpoint_path(&full, 3)).unwrap();
    let reference_metrics = std::fs::read_to_string(full.join("metrics.csv")).unwrap();

    for stop in 0..3u32 {
        let part = dir.path().join(format!("stop{stop}"));
        let mut t = Trainer::from_config(cfg.clone()).unwrap();
        t.write_outputs(&part).unwrap();
        for _ in 0..stop {
            t.run_iteration().unwrap();
            t.write_outputs(&part).unwrap();
        }
        drop(t);
        let metrics = load_metrics(&part.join("metrics.csv")).unwrap();
        let mut resumed = Trainer::resume(&checkpoint_path(&part, stop), &dataset_path(&part, stop), metrics).unwrap();
        resumed.train(Some(&part)).unwrap();
        assert_eq!(
            std::fs::read(checkpoint_path(&part, 3)).unwrap(),
            reference,
            "stop after {stop}"
        );
        assert_eq!(
            std::fs::read_to_string(part.join("metrics.csv")).unwrap(),
            reference_metrics
        );
    }
}

#[test]
fn outputs_round_trip_through_files() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::from_config(cfg.clone()).unwrap();
    t.train(Some(dir.path())).unwrap();
    let ck = load_checkpoint(&checkpoint_path(dir.path(), 2), Some(&cfg)).unwrap();
    assert_eq!(
        to_bytes(&ck.config, &ck.maze, &ck.bundle),
        to_bytes(&cfg, &t.maze, &t.bundle)
    );
    assert_eq!(ck.config, cfg);
    assert_eq!(ck.bundle.iteration, 2);
    assert_eq!(load_metrics(&dir.path().join("metrics.csv")).unwrap(), t.metrics);

    let mut wider = cfg.clone();
    wider.model.skill_dim += 1;
    assert!(matches!(
        load_checkpoint(&checkpoint_path(dir.path(), 2), Some(&wider)),
        Err(skillstep::Error::Version(_))
    ));
}

#[test]
fn coverage_never_shrinks_across_iterations() {
    let mut cfg = tiny_config();
    cfg.schedule.iterations = 3;
    cfg.rollout.branches = 8;
    let mut t = Trainer::from_config(cfg).unwrap();
    let reports = t.train(None).unwrap();
    for r in &reports {
        assert!(r.coverage_after >= r.coverage_before);
        assert!(r.rollouts.appended <= 8);
    }
    for w in reports.windows(2) {
        assert_eq!(w[0].coverage_after, w[1].coverage_before);
    }
}

#[test]
fn latent_rollouts_have_k_times_h_transitions() {
    let mut cfg = tiny_config();
    cfg.model.horizon = 10;
    let maze = MazeSpec::default();
    let bundle = common::jittered_bundle(&cfg, &maze, 1);
    let start = skillstep::env::reset(&maze, [1.5, 1.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, latents) in [(0, 1), (2, 21)] {
        let r = latent_rollout(&bundle, &start, k, cfg.variant, &mut rng);
        if r.truncated.is_none() {
            assert_eq!(r.latents.len(), latents);
            assert_eq!(r.transitions(), k * 10);
            let d = decode_trajectory(&bundle, &maze, &r);
            assert_eq!(d.trajectory.actions.len(), k * 10);
            assert_eq!(d.trajectory.states.len(), k * 10 + 1);
            for s in &d.trajectory.states {
                assert!(maze.is_free_point(s.pos));
            }
        }
    }
    let again = |seed| latent_rollout(&bundle, &start, 3, cfg.variant, &mut ChaCha8Rng::seed_from_u64(seed));
    assert_eq!(again(8), again(8));
}

#[test]
fn rollouts_append_at_most_one_trajectory_per_branch() {
    let mut cfg = tiny_config();
    cfg.rollout.branches = 8;
    cfg.rollout.skills = 3;
    let maze = MazeSpec::default();
    let mut store = common::tiny_store(&cfg, &maze);
    let before = store.len();
    let cov = store.goal_coverage(cfg.data.coverage_bin);
    let bundle = common::jittered_bundle(&cfg, &maze, 6);
    let stats = run_iteration_rollouts(
        &bundle,
        &maze,
        &mut store,
        &cfg.rollout,
        cfg.variant,
        0,
        1,
        Exec::Sequential,
    )
    .unwrap();
    assert!(stats.appended <= 8);
    assert_eq!(store.len(), before + stats.appended);
    assert_eq!(
        stats.appended + stats.rejected_clamped + stats.rejected_invalid,
        8,
        "{stats:?}"
    );
    assert!(store.goal_coverage(cfg.data.coverage_bin) >= cov);
}

#[test]
fn zero_episode_evaluation_reports_no_data() {
    let mut cfg = tiny_config();
    cfg.eval.episodes = 0;
    let maze = MazeSpec::default();
    let bundle = common::jittered_bundle(&cfg, &maze, 0);
    let shift = ShiftConfig::for_level(&maze, ShiftLevel::Large).unwrap();
    let r = eval_zeroshot(&bundle, &maze, &shift, cfg.variant, &cfg.eval, 0, Exec::default()).unwrap();
    assert_eq!(r, EvalReport::default());
    assert_eq!(r.to_string(), "no data");
}

#[test]
fn evaluation_is_reproducible_and_bounded() {
    let cfg = tiny_config();
    let t = trained(&cfg);
    let shift = ShiftConfig::for_level(&t.maze, ShiftLevel::Small).unwrap();
    let run = |exec| eval_zeroshot(&t.bundle, &t.maze, &shift, cfg.variant, &cfg.eval, 3, exec).unwrap();
    let a = run(Exec::Sequential);
    assert_eq!(a, run(Exec::Parallel));
    assert_eq!(a.scores.len(), cfg.eval.episodes);
    assert!(a.scores.iter().all(|s| (0.0..=100.0).contains(s)));
}

#[test]
fn finetuning_changes_only_the_goal_generator_and_critic() {
    let cfg = tiny_config();
    let t = trained(&cfg);
    let shift = ShiftConfig::for_level(&t.maze, ShiftLevel::Large).unwrap();
    let mut bundle = t.bundle.clone();
    let report = finetune_fewshot(&mut bundle, &t.maze, &shift, &cfg, 9).unwrap();
    assert_eq!(report.episode_scores.len(), cfg.finetune.shots);
    assert_eq!(report.replay.len(), cfg.finetune.shots);
    assert!(report.transitions > 0);
    for m in ModuleId::ALL {
        let changed = param_bits(&bundle, m) != param_bits(&t.bundle, m);
        let allowed = matches!(m, ModuleId::GoalGenerator | ModuleId::Critic | ModuleId::TargetCritic);
        assert!(allowed || !changed, "{m} changed");
        if m == ModuleId::GoalGenerator {
            assert!(changed);
        }
    }
}

#[test]
fn finetuning_without_goal_generator_tunes_the_direct_head() {
    let mut cfg = tiny_config();
    cfg.variant.goal_generator = false;
    let t = trained(&cfg);
    let shift = ShiftConfig::for_level(&t.maze, ShiftLevel::Medium).unwrap();
    let mut bundle = t.bundle.clone();
    finetune_fewshot(&mut bundle, &t.maze, &shift, &cfg, 2).unwrap();
    assert_ne!(
        param_bits(&bundle, ModuleId::DirectPolicy),
        param_bits(&t.bundle, ModuleId::DirectPolicy)
    );
    assert_eq!(
        param_bits(&bundle, ModuleId::GoalGenerator),
        param_bits(&t.bundle, ModuleId::GoalGenerator)
    );
    assert_eq!(
        param_bits(&bundle, ModuleId::InverseDynamics),
        param_bits(&t.bundle, ModuleId::InverseDynamics)
    );
}

#[test]
fn ablated_skill_step_dynamics_is_never_trained() {
    let mut cfg = tiny_config();
    cfg.variant.skill_step_dynamics = false;
    let fresh = Trainer::from_config(cfg.clone()).unwrap();
    let t = trained(&cfg);
    assert_eq!(
        param_bits(&t.bundle, ModuleId::SkillStepDynamics),
        param_bits(&fresh.bundle, ModuleId::SkillStepDynamics)
    );
    assert_ne!(
        param_bits(&t.bundle, ModuleId::FlatDynamics),
        param_bits(&fresh.bundle, ModuleId::FlatDynamics)
    );
}
