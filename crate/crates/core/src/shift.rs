//! Train/eval goal regions realizing graded goal distribution shifts.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Cell, Goal, MazeSpec};
use crate::{Error, Result};

/// Margin kept from cell edges when sampling points inside a cell.
pub const CELL_MARGIN: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum ShiftLevel {
    None,
    Small,
    Medium,
    Large,
}

impl ShiftLevel {
    pub const ALL: [ShiftLevel; 4] = [Self::None, Self::Small, Self::Medium, Self::Large];
}

impl fmt::Display for ShiftLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::None => "none",
            Self::Small => "small",
            Self::Medium => "medium",
            Self::Large => "large",
        };
        f.write_str(s)
    }
}

impl FromStr for ShiftLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "small" => Ok(Self::Small),
            "medium" => Ok(Self::Medium),
            "large" => Ok(Self::Large),
            other => Err(Error::Config(format!("unknown shift level {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftConfig {
    pub level: ShiftLevel,
    pub train: BTreeSet<Cell>,
    pub eval: BTreeSet<Cell>,
}

impl ShiftConfig {
    /// Regions for `level` on `maze`.
    ///
    /// The training region is the half of the free cells nearest (by
    /// corridor distance) to the first free cell and is the same for every
    /// level. Evaluation regions:
    /// * none: the training region;
    /// * small: the outer half of the training region plus the cells
    ///   bordering it, so at least half the cells are shared;
    /// * medium: the cells bordering the training region, no overlap;
    /// * large: the quarter of the remaining cells farthest from any
    ///   training cell.
    pub fn for_level(maze: &MazeSpec, level: ShiftLevel) -> Result<Self> {
        let free = maze.free_cells();
        let anchor = free[0];
        let from_anchor = maze.corridor_distances(&[anchor]);
        let mut reachable: Vec<(u32, Cell)> = free
            .iter()
            .filter_map(|&c| maze.distance_at(&from_anchor, c).map(|d| (d, c)))
            .collect();
        if reachable.len() < 4 {
            return Err(Error::Maze(
                "need at least 4 connected free cells for goal regions".into(),
            ));
        }
        reachable.sort_by_key(|&(d, c)| (d, c.y, c.x));
        let n_train = reachable.len().div_ceil(2);
        let train_order: Vec<Cell> = reachable[..n_train].iter().map(|&(_, c)| c).collect();
        let train: BTreeSet<Cell> = train_order.iter().copied().collect();
        let outside: Vec<Cell> = reachable[n_train..].iter().map(|&(_, c)| c).collect();

        let from_train = maze.corridor_distances(&train_order);
        let ring: BTreeSet<Cell> = outside
            .iter()
            .copied()
            .filter(|&c| maze.distance_at(&from_train, c) == Some(1))
            .collect();

        let eval = match level {
            ShiftLevel::None => train.clone(),
            ShiftLevel::Small => {
                let keep = (n_train / 2).max(ring.len()).min(n_train);
                let mut e: BTreeSet<Cell> = train_order[n_train - keep..].iter().copied().collect();
                e.extend(ring.iter().copied());
                e
            }
            ShiftLevel::Medium => ring,
            ShiftLevel::Large => {
                let mut far: Vec<(u32, Cell)> = outside
                    .iter()
                    .map(|&c| (maze.distance_at(&from_train, c).unwrap(), c))
                    .collect();
                far.sort_by_key(|&(d, c)| (std::cmp::Reverse(d), c.y, c.x));
                let n = outside.len().div_ceil(4).max(1);
                far[..n].iter().map(|&(_, c)| c).collect()
            }
        };
        if eval.is_empty() {
            return Err(Error::Maze(format!("empty evaluation region for {level}")));
        }
        Ok(Self { level, train, eval })
    }

    /// Fraction of evaluation cells that are also training cells.
    pub fn overlap(&self) -> f32 {
        self.eval.intersection(&self.train).count() as f32 / self.eval.len() as f32
    }

    pub fn in_train(&self, maze: &MazeSpec, p: [f32; 2]) -> bool {
        region_contains(maze, &self.train, p)
    }

    pub fn in_eval(&self, maze: &MazeSpec, p: [f32; 2]) -> bool {
        region_contains(maze, &self.eval, p)
    }
}

fn region_contains(maze: &MazeSpec, region: &BTreeSet<Cell>, p: [f32; 2]) -> bool {
    let (x, y) = maze.cell_of(p);
    x >= 0 && y >= 0 && region.contains(&Cell::new(x as usize, y as usize))
}

/// Uniform cell from a region.
pub fn sample_cell<R: Rng + ?Sized>(region: &BTreeSet<Cell>, rng: &mut R) -> Cell {
    let i = rng.random_range(0..region.len());
    *region.iter().nth(i).expect("index within region")
}

/// Uniform point inside `cell`, at least [`CELL_MARGIN`] from its edges.
pub fn sample_point<R: Rng + ?Sized>(maze: &MazeSpec, cell: Cell, rng: &mut R) -> [f32; 2] {
    let c = maze.cell_center(cell);
    let r = (0.5 - CELL_MARGIN) * maze.cell_size;
    [c[0] + rng.random_range(-r..=r), c[1] + rng.random_range(-r..=r)]
}

pub fn sample_goal<R: Rng + ?Sized>(maze: &MazeSpec, region: &BTreeSet<Cell>, rng: &mut R) -> Goal {
    Goal(sample_point(maze, sample_cell(region, rng), rng))
}
