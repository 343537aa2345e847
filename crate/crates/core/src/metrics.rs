//! Per-run metrics as comma-separated text.

use std::fmt::Write as _;
use std::path::Path;

use crate::losses::LossValues;
use crate::{Error, Result};

/// One logging event.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRecord {
    pub iteration: u32,
    /// Epoch within the iteration; `None` for end-of-iteration rows.
    pub epoch: Option<u32>,
    pub losses: LossValues,
    pub coverage: usize,
    pub trajectories: usize,
    pub rollouts_appended: usize,
    pub rollouts_rejected: usize,
    pub eval_mean: Option<f32>,
    /// Seconds since the run started; zero unless timing is enabled.
    pub wall_clock: f64,
}

pub const COLUMNS: [&str; 21] = [
    "iteration",
    "epoch",
    "total",
    "skill",
    "skill_recon",
    "skill_kl",
    "prior",
    "model",
    "obs_recon",
    "flat",
    "skill_step",
    "inverse",
    "goal",
    "goal_bc",
    "goal_sanity",
    "coverage",
    "trajectories",
    "rollouts_appended",
    "rollouts_rejected",
    "eval_mean",
    "wall_clock",
];

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let l = &r.losses;
        let opt = |v: Option<String>| v.unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            opt(r.epoch.map(|e| e.to_string())),
            l.total,
            l.skill,
            l.skill_recon,
            l.skill_kl,
            l.prior,
            l.model,
            l.obs_recon,
            l.flat,
            l.skill_step,
            l.inverse,
            l.goal,
            l.goal_bc,
            l.goal_sanity,
            r.coverage,
            r.trajectories,
            r.rollouts_appended,
            r.rollouts_rejected,
            opt(r.eval_mean.map(|v| v.to_string())),
            r.wall_clock,
        );
    }
    out
}

pub fn emit_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(records)).map_err(|e| Error::io(path, e))
}

/// Records from text produced by [`to_csv`].
pub fn from_csv(text: &str) -> std::result::Result<Vec<MetricsRecord>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(COLUMNS.join(",").as_str()) {
        return Err("unexpected header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| parse_row(line).map_err(|e| format!("row {}: {e}", i + 1)))
        .collect()
}

fn parse_row(line: &str) -> std::result::Result<MetricsRecord, String> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != COLUMNS.len() {
        return Err(format!("expected {} fields, found {}", COLUMNS.len(), f.len()));
    }
    fn num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
        s.parse().map_err(|_| format!("bad number {s:?}"))
    }
    fn opt<T: std::str::FromStr>(s: &str) -> std::result::Result<Option<T>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    }
    let loss = |i: usize| num::<f64>(f[i]);
    Ok(MetricsRecord {
        iteration: num(f[0])?,
        epoch: opt(f[1])?,
        losses: LossValues {
            total: loss(2)?,
            skill: loss(3)?,
            skill_recon: loss(4)?,
            skill_kl: loss(5)?,
            prior: loss(6)?,
            model: loss(7)?,
            obs_recon: loss(8)?,
            flat: loss(9)?,
            skill_step: loss(10)?,
            inverse: loss(11)?,
            goal: loss(12)?,
            goal_bc: loss(13)?,
            goal_sanity: loss(14)?,
        },
        coverage: num(f[15])?,
        trajectories: num(f[16])?,
        rollouts_appended: num(f[17])?,
        rollouts_rejected: num(f[18])?,
        eval_mean: opt(f[19])?,
        wall_clock: num(f[20])?,
    })
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_csv(&text).map_err(|e| Error::corrupt(path, e))
}
