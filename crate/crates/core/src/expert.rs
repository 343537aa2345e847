//! Scripted expert: grid shortest path plus proportional-derivative tracking.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{DatasetStore, Provenance, Trajectory};
use crate::env::{normalized_score, reset, step, Cell, EnvState, Goal, MazeSpec};
use crate::shift::{sample_cell, sample_goal, sample_point, ShiftConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertConfig {
    pub kp: f32,
    pub kd: f32,
    /// Standard deviation of Gaussian noise added to each action.
    pub noise_std: f32,
    /// Distance at which an intermediate waypoint counts as reached.
    pub waypoint_radius: f32,
    /// Half-width of the uniform offset applied to intermediate waypoints,
    /// in cell units; spreads the data across each corridor.
    pub waypoint_jitter: f32,
    /// Distance to the goal at which an episode ends.
    pub goal_radius: f32,
    pub max_steps: usize,
    /// Resampling attempts per trajectory before giving up.
    pub max_retries: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            kp: 4.0,
            kd: 2.0,
            noise_std: 0.1,
            waypoint_radius: 0.35,
            waypoint_jitter: 0.0,
            goal_radius: 0.2,
            max_steps: 400,
            max_retries: 50,
        }
    }
}

/// Waypoint follower toward a fixed goal.
#[derive(Debug, Clone)]
pub struct ScriptedController {
    /// Planned cells from the start cell to the goal cell.
    cells: Vec<Cell>,
    /// Target inside each planned cell after the first; the last is the goal.
    waypoints: Vec<[f32; 2]>,
    next: usize,
    kp: f32,
    kd: f32,
    waypoint_radius: f32,
}

impl ScriptedController {
    /// Plan from the cell containing `start` to `goal`; `None` if the goal
    /// cell is unreachable.
    pub fn plan(maze: &MazeSpec, start: [f32; 2], goal: &Goal, cfg: &ExpertConfig) -> Option<Self> {
        Self::plan_within(maze, start, goal, cfg, None)
    }

    /// [`Self::plan`] through the cells of `region` only.
    pub fn plan_within(
        maze: &MazeSpec,
        start: [f32; 2],
        goal: &Goal,
        cfg: &ExpertConfig,
        region: Option<&BTreeSet<Cell>>,
    ) -> Option<Self> {
        let cell = |p: [f32; 2]| {
            let (x, y) = maze.cell_of(p);
            (x >= 0 && y >= 0).then(|| Cell::new(x as usize, y as usize))
        };
        let path = maze.shortest_path_within(cell(start)?, cell(goal.0)?, region)?;
        let inner = if path.len() > 2 {
            &path[1..path.len() - 1]
        } else {
            &[][..]
        };
        let mut waypoints: Vec<[f32; 2]> = inner.iter().map(|&c| maze.cell_center(c)).collect();
        waypoints.push(goal.0);
        Some(Self {
            cells: path,
            waypoints,
            next: 0,
            kp: cfg.kp,
            kd: cfg.kd,
            waypoint_radius: cfg.waypoint_radius,
        })
    }

    /// Move every intermediate waypoint by a uniform offset of at most
    /// `amount` cell sizes per axis.
    pub fn jitter_waypoints<R: Rng + ?Sized>(&mut self, maze: &MazeSpec, amount: f32, rng: &mut R) {
        let r = amount.clamp(0.0, 0.5) * maze.cell_size;
        if r == 0.0 {
            return;
        }
        let n = self.waypoints.len() - 1;
        for wp in &mut self.waypoints[..n] {
            wp[0] += rng.random_range(-r..=r);
            wp[1] += rng.random_range(-r..=r);
        }
    }

    /// Noise-free action for `state`: track the target of the planned cell
    /// after the current one.
    pub fn action(&mut self, state: &EnvState, maze: &MazeSpec) -> [f32; 2] {
        let (x, y) = maze.cell_of(state.pos);
        let here = self.cells.iter().position(|c| (c.x as i64, c.y as i64) == (x, y));
        if let Some(k) = here {
            self.next = k.min(self.waypoints.len() - 1);
        }
        while self.next + 1 < self.waypoints.len() && dist(state.pos, self.waypoints[self.next]) < self.waypoint_radius
        {
            self.next += 1;
        }
        let wp = self.waypoints[self.next];
        std::array::from_fn(|i| (self.kp * (wp[i] - state.pos[i]) - self.kd * state.vel[i]).clamp(-1.0, 1.0))
    }
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// One noisy expert episode from `start` to `goal`; `None` if it fails to
/// finish with full score.
pub fn expert_episode<R: Rng + ?Sized>(
    maze: &MazeSpec,
    start: [f32; 2],
    goal: &Goal,
    cfg: &ExpertConfig,
    rng: &mut R,
) -> Result<Option<Trajectory>> {
    episode_within(maze, start, goal, cfg, None, rng)
}

/// An expert episode confined to `region`: planned through its cells and
/// discarded if any state leaves it.
fn episode_within<R: Rng + ?Sized>(
    maze: &MazeSpec,
    start: [f32; 2],
    goal: &Goal,
    cfg: &ExpertConfig,
    region: Option<&BTreeSet<Cell>>,
    rng: &mut R,
) -> Result<Option<Trajectory>> {
    let mut ctrl = ScriptedController::plan_within(maze, start, goal, cfg, region)
        .ok_or_else(|| Error::Generation(format!("goal {:?} unreachable from {start:?}", goal.0)))?;
    ctrl.jitter_waypoints(maze, cfg.waypoint_jitter, rng);
    let noise = Normal::new(0.0f32, cfg.noise_std.max(0.0)).map_err(|e| Error::Generation(e.to_string()))?;
    let mut s = reset(maze, start)?;
    let mut states = vec![s];
    let mut actions = Vec::new();
    for _ in 0..cfg.max_steps {
        if dist(s.pos, goal.0) <= cfg.goal_radius {
            break;
        }
        let base = ctrl.action(&s, maze);
        let a = [
            (base[0] + noise.sample(rng)).clamp(-maze.max_action, maze.max_action),
            (base[1] + noise.sample(rng)).clamp(-maze.max_action, maze.max_action),
        ];
        s = step(maze, &s, a);
        states.push(s);
        actions.push(a);
    }
    let inside = |s: &EnvState| {
        let (x, y) = maze.cell_of(s.pos);
        region.is_none_or(|r| x >= 0 && y >= 0 && r.contains(&Cell::new(x as usize, y as usize)))
    };
    if normalized_score(&s, goal) < 100.0 || actions.is_empty() || !states.iter().all(inside) {
        return Ok(None);
    }
    Ok(Some(Trajectory {
        states,
        actions,
        provenance: Provenance::Expert,
        iteration_born: 0,
    }))
}

/// `n` expert trajectories between random start and goal cells of the
/// training region, moving only through its cells.
pub fn generate_expert_dataset(
    maze: &MazeSpec,
    shift: &ShiftConfig,
    n: usize,
    seed: u64,
    horizon: usize,
    cfg: &ExpertConfig,
) -> Result<DatasetStore> {
    if n == 0 {
        return Err(Error::Generation("n must be >= 1".into()));
    }
    if shift.train.len() < 2 {
        return Err(Error::Generation("training region needs two cells".into()));
    }
    let mut store = DatasetStore::new(seed, horizon, maze.hash_hex())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let mut done = false;
        for _ in 0..=cfg.max_retries {
            let goal = sample_goal(maze, &shift.train, &mut rng);
            let goal_cell = maze.cell_of(goal.0);
            let start_cell = loop {
                let c = sample_cell(&shift.train, &mut rng);
                if (c.x as i64, c.y as i64) != goal_cell {
                    break c;
                }
            };
            let start = sample_point(maze, start_cell, &mut rng);
            if let Some(t) = episode_within(maze, start, &goal, cfg, Some(&shift.train), &mut rng)? {
                store.push(t)?;
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::Generation(format!(
                "trajectory {i} failed after {} attempts",
                cfg.max_retries + 1
            )));
        }
    }
    Ok(store)
}
