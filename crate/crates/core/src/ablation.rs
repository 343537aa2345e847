//! Named variants of the method, trained and evaluated side by side.

use std::fmt;
use std::str::FromStr;

use crate::config::TrainConfig;
use crate::eval::{eval_zeroshot, EvalReport};
use crate::par::Exec;
use crate::shift::{ShiftConfig, ShiftLevel};
use crate::train::Trainer;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// One iteration without model-guided rollouts.
    NoRollout,
    /// Skill-step image through repeated flat dynamics.
    NoSkillStepDynamics,
    /// Direct `(h, g) -> z` high-level head.
    NoGoalGenerator,
    /// Goal loss without the cyclic-consistency term.
    BcOnly,
    /// One arm per skill horizon.
    HorizonSweep,
}

pub const DEFAULT_HORIZONS: [usize; 4] = [1, 5, 10, 40];

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::NoRollout,
        Ablation::NoSkillStepDynamics,
        Ablation::NoGoalGenerator,
        Ablation::BcOnly,
        Ablation::HorizonSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoRollout => "no-rollout",
            Ablation::NoSkillStepDynamics => "no-skill-step-dynamics",
            Ablation::NoGoalGenerator => "no-goal-generator",
            Ablation::BcOnly => "bc-only",
            Ablation::HorizonSweep => "h-sweep",
        }
    }

    /// Configs to compare. Toggles yield the full method followed by the
    /// ablated arm; the sweep yields one arm per entry of `horizons`.
    pub fn arms(self, base: &TrainConfig, horizons: &[usize]) -> Result<Vec<Arm>> {
        let full = Arm {
            label: "full".into(),
            config: base.clone(),
        };
        let mut cfg = base.clone();
        match self {
            Ablation::NoRollout => {
                cfg.schedule.iterations = 1;
                cfg.rollout.branches = 0;
            }
            Ablation::NoSkillStepDynamics => cfg.variant.skill_step_dynamics = false,
            Ablation::NoGoalGenerator => cfg.variant.goal_generator = false,
            Ablation::BcOnly => cfg.variant.sanity_check = false,
            Ablation::HorizonSweep => {
                if horizons.is_empty() {
                    return Err(Error::Config("h-sweep needs at least one horizon".into()));
                }
                return horizons
                    .iter()
                    .map(|&h| {
                        let mut c = base.clone();
                        c.model.horizon = h;
                        c.validate()?;
                        Ok(Arm {
                            label: format!("H={h}"),
                            config: c,
                        })
                    })
                    .collect();
            }
        }
        let ablated = Arm {
            label: self.name().into(),
            config: cfg,
        };
        Ok(vec![full, ablated])
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub label: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmOutcome {
    pub label: String,
    pub report: EvalReport,
}

/// Train the arm from scratch and score it zero-shot at `level`. Every arm
/// of one seed sees the same evaluation tasks.
pub fn run_arm(arm: &Arm, level: ShiftLevel, exec: Exec) -> Result<ArmOutcome> {
    let mut trainer = Trainer::from_config(arm.config.clone())?;
    trainer.exec = exec;
    trainer.train(None)?;
    let cfg = &trainer.config;
    let shift = ShiftConfig::for_level(&trainer.maze, level)?;
    let report = eval_zeroshot(
        &trainer.bundle,
        &trainer.maze,
        &shift,
        cfg.variant,
        &cfg.eval,
        cfg.seed,
        exec,
    )?;
    Ok(ArmOutcome {
        label: arm.label.clone(),
        report,
    })
}

/// Plain-text table with one row per arm.
pub fn format_table(outcomes: &[ArmOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.label.len()).max().unwrap_or(0).max(3);
    let mut out = format!("{:<width$}  score\n", "arm");
    for o in outcomes {
        out.push_str(&format!("{:<width$}  {}\n", o.label, o.report));
    }
    out
}
