use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skillstep::ablation::{format_table, run_arm, Ablation, DEFAULT_HORIZONS};
use skillstep::checkpoint::{load_checkpoint, save_checkpoint};
use skillstep::config::TrainConfig;
use skillstep::dataset::DatasetStore;
use skillstep::eval::{eval_zeroshot, finetune_fewshot, EvalReport};
use skillstep::metrics::load_metrics;
use skillstep::par::Exec;
use skillstep::shift::{ShiftConfig, ShiftLevel};
use skillstep::train::{dataset_path, expert_dataset, load_maze, Trainer};

#[derive(Parser)]
#[command(
    name = "skillstep",
    version,
    about = "Skill-step latent models for offline goal-conditioned control"
)]
struct Cli {
    /// Directory for generated files.
    #[arg(long, global = true, env = "SKILLSTEP_OUT", default_value = "skillstep-out")]
    out: PathBuf,
    /// Run every loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> skillstep::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to load; the latest one in the output directory when absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Goal distribution shift: none, small, medium or large.
    #[arg(long, default_value_t = ShiftLevel::None)]
    shift: ShiftLevel,
    /// Evaluation episodes; the config value when absent.
    #[arg(long)]
    episodes: Option<usize>,
    /// Evaluation seed; the config seed when absent.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the expert dataset.
    GenData(RunArgs),
    /// Iterative offline training with checkpoints and metrics.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Zero-shot evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Few-shot adaptation of the goal generator, then evaluation.
    Finetune {
        #[command(flatten)]
        eval: EvalArgs,
        /// Adaptation episodes; the config value when absent.
        #[arg(long)]
        shots: Option<usize>,
    },
    /// Goal coverage of each saved dataset.
    Coverage {
        /// Bin side length; the config default when absent.
        #[arg(long)]
        bin: Option<f32>,
    },
    /// Train and compare the arms of a named ablation.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// no-rollout, no-skill-step-dynamics, no-goal-generator, bc-only or h-sweep.
        #[arg(long)]
        name: Ablation,
        /// Horizons for h-sweep.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        /// Shift level the arms are scored on.
        #[arg(long, default_value_t = ShiftLevel::Large)]
        shift: ShiftLevel,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> skillstep::Result<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    let out = cli.out.as_path();
    match cli.command {
        Command::GenData(args) => {
            let cfg = args.load()?;
            let maze = load_maze(&cfg)?;
            let store = expert_dataset(&cfg, &maze)?;
            let path = out.join("expert.data");
            create_dir(out)?;
            store.save(&path)?;
            println!("wrote {} trajectories to {}", store.len(), path.display());
        }
        Command::Train { run, resume } => {
            let mut trainer = if resume {
                let it = latest_iteration(out)?;
                let metrics = load_metrics(&out.join("metrics.csv"))?;
                Trainer::resume(&checkpoint_file(out, it), &dataset_path(out, it), metrics)?
            } else {
                let cfg = run.load()?;
                let t = Trainer::from_config(cfg)?;
                t.write_outputs(out)?;
                t
            };
            trainer.exec = exec;
            for r in trainer.train(Some(out))? {
                println!(
                    "iteration {}: loss {:.4} -> {:.4}, coverage {} -> {}, rollouts appended {}",
                    r.iteration,
                    r.first_epoch.total,
                    r.last_epoch.total,
                    r.coverage_before,
                    r.coverage_after,
                    r.rollouts.appended
                );
            }
            println!("outputs in {}", out.display());
        }
        Command::Eval(args) => {
            let (ck, shift, cfg) = open_for_eval(out, &args)?;
            let report = eval_zeroshot(&ck.bundle, &ck.maze, &shift, cfg.variant, &cfg.eval, cfg.seed, exec)?;
            print_report(args.shift, &report);
        }
        Command::Finetune { eval, shots } => {
            let (mut ck, shift, mut cfg) = open_for_eval(out, &eval)?;
            if let Some(n) = shots {
                cfg.finetune.shots = n;
            }
            let before = eval_zeroshot(&ck.bundle, &ck.maze, &shift, cfg.variant, &cfg.eval, cfg.seed, exec)?;
            let adapted = finetune_fewshot(&mut ck.bundle, &ck.maze, &shift, &cfg, cfg.seed)?;
            let after = eval_zeroshot(&ck.bundle, &ck.maze, &shift, cfg.variant, &cfg.eval, cfg.seed, exec)?;
            let path = out.join(format!("finetuned-{}.ckpt", eval.shift));
            create_dir(out)?;
            save_checkpoint(&path, &ck.config, &ck.maze, &ck.bundle)?;
            println!(
                "adaptation episodes: {}",
                EvalReport {
                    scores: adapted.episode_scores
                }
            );
            println!("before: {before}");
            print_report(eval.shift, &after);
            println!("adapted checkpoint: {}", path.display());
        }
        Command::Coverage { bin } => {
            let last = latest_iteration(out)?;
            let bin = match bin {
                Some(b) => b,
                None => {
                    load_checkpoint(&checkpoint_file(out, last), None)?
                        .config
                        .data
                        .coverage_bin
                }
            };
            println!("iteration,coverage");
            for it in 0..=last {
                let path = dataset_path(out, it);
                if path.exists() {
                    println!("{it},{}", DatasetStore::load(&path)?.goal_coverage(bin));
                }
            }
        }
        Command::Ablate {
            run,
            name,
            values,
            shift,
        } => {
            let cfg = run.load()?;
            let horizons = if values.is_empty() {
                DEFAULT_HORIZONS.to_vec()
            } else {
                values
            };
            let mut outcomes = Vec::new();
            for arm in name.arms(&cfg, &horizons)? {
                eprintln!("training arm {}", arm.label);
                outcomes.push(run_arm(&arm, shift, exec)?);
            }
            println!("{name} on {shift} shift, seed {}", cfg.seed);
            print!("{}", format_table(&outcomes));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> skillstep::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| skillstep::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn checkpoint_file(dir: &Path, iteration: u32) -> PathBuf {
    skillstep::train::checkpoint_path(dir, iteration)
}

/// Highest iteration with a checkpoint in `dir`.
fn latest_iteration(dir: &Path) -> skillstep::Result<u32> {
    let entries = std::fs::read_dir(dir).map_err(|e| skillstep::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    entries
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter_map(|n| n.strip_prefix("iter")?.strip_suffix(".ckpt")?.parse().ok())
        .max()
        .ok_or_else(|| skillstep::Error::Config(format!("no checkpoint in {}", dir.display())))
}

fn open_for_eval(
    out: &Path,
    args: &EvalArgs,
) -> skillstep::Result<(skillstep::checkpoint::Checkpoint, ShiftConfig, TrainConfig)> {
    let path = match &args.checkpoint {
        Some(p) => p.clone(),
        None => checkpoint_file(out, latest_iteration(out)?),
    };
    let ck = load_checkpoint(&path, None)?;
    let mut cfg = ck.config.clone();
    if let Some(n) = args.episodes {
        cfg.eval.episodes = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let shift = ShiftConfig::for_level(&ck.maze, args.shift)?;
    Ok((ck, shift, cfg))
}

fn print_report(level: ShiftLevel, report: &EvalReport) {
    println!("{level} shift: {report}");
}
