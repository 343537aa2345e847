//! Continuous point maze with sparse goal-reaching reward.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Distance kept from a wall face when a move is stopped by it.
const WALL_MARGIN: f32 = 1e-4;

/// Default layout: two corridors joining the upper-left block to the
/// lower-right pocket.
pub const DEFAULT_GRID: [&str; 8] = [
    "########", "#....#.#", "#.##.#.#", "#.#....#", "#.#.##.#", "#...#..#", "##.....#", "########",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

/// Agent position and velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnvState {
    pub pos: [f32; 2],
    pub vel: [f32; 2],
}

impl EnvState {
    pub fn to_array(&self) -> [f32; 4] {
        [self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    pub fn from_array(a: [f32; 4]) -> Self {
        Self {
            pos: [a[0], a[1]],
            vel: [a[2], a[3]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Goal-space point (a target position).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Goal(pub [f32; 2]);

impl Goal {
    pub fn sq_dist(&self, p: [f32; 2]) -> f32 {
        let dx = p[0] - self.0[0];
        let dy = p[1] - self.0[1];
        dx * dx + dy * dy
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvConfig {
    pub gamma: f32,
    /// Episode length limit in primitive steps.
    pub horizon: usize,
    pub success_radius: f32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            horizon: 400,
            success_radius: 1.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MazeFile {
    grid: Vec<String>,
    #[serde(default = "defaults::cell_size")]
    cell_size: f32,
    #[serde(default = "defaults::max_action")]
    max_action: f32,
    #[serde(default = "defaults::dt")]
    dt: f32,
    #[serde(default = "defaults::max_speed")]
    max_speed: f32,
}

mod defaults {
    pub fn cell_size() -> f32 {
        1.0
    }
    pub fn max_action() -> f32 {
        1.0
    }
    pub fn dt() -> f32 {
        0.2
    }
    pub fn max_speed() -> f32 {
        2.0
    }
}

/// Wall grid plus point-mass physics constants.
#[derive(Debug, Clone, PartialEq)]
pub struct MazeSpec {
    width: usize,
    height: usize,
    walls: Vec<bool>,
    pub cell_size: f32,
    pub max_action: f32,
    pub dt: f32,
    pub max_speed: f32,
}

impl Default for MazeSpec {
    fn default() -> Self {
        Self::from_rows(&DEFAULT_GRID, 1.0, 1.0, 0.2, 2.0).expect("default maze is valid")
    }
}

impl MazeSpec {
    /// Build from `#`/`.` rows; row index is the y cell coordinate.
    pub fn from_rows<S: AsRef<str>>(
        rows: &[S],
        cell_size: f32,
        max_action: f32,
        dt: f32,
        max_speed: f32,
    ) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map(|r| r.as_ref().chars().count()).unwrap_or(0);
        if width < 3 || height < 3 {
            return Err(Error::Maze(format!("grid {width}x{height} is smaller than 3x3")));
        }
        let mut walls = Vec::with_capacity(width * height);
        for (y, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.chars().count() != width {
                return Err(Error::Maze(format!(
                    "row {y} has length {} != {width}",
                    row.chars().count()
                )));
            }
            for (x, c) in row.chars().enumerate() {
                let wall = match c {
                    '#' => true,
                    '.' => false,
                    other => return Err(Error::Maze(format!("unexpected character {other:?} at ({x}, {y})"))),
                };
                let border = x == 0 || y == 0 || x == width - 1 || y == height - 1;
                if border && !wall {
                    return Err(Error::Maze(format!("boundary cell ({x}, {y}) must be a wall")));
                }
                walls.push(wall);
            }
        }
        if walls.iter().all(|&w| w) {
            return Err(Error::Maze("no free cell".into()));
        }
        for (name, v) in [
            ("cell_size", cell_size),
            ("max_action", max_action),
            ("dt", dt),
            ("max_speed", max_speed),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Maze(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self {
            width,
            height,
            walls,
            cell_size,
            max_action,
            dt,
            max_speed,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: MazeFile = toml::from_str(text).map_err(|e| Error::Maze(e.to_string()))?;
        Self::from_rows(&f.grid, f.cell_size, f.max_action, f.dt, f.max_speed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let mut s = String::from("grid = [\n");
        for y in 0..self.height {
            let row: String = (0..self.width)
                .map(|x| if self.walls[y * self.width + x] { '#' } else { '.' })
                .collect();
            s.push_str(&format!("  \"{row}\",\n"));
        }
        s.push_str("]\n");
        s.push_str(&format!(
            "cell_size = {:?}\nmax_action = {:?}\ndt = {:?}\nmax_speed = {:?}\n",
            self.cell_size, self.max_action, self.dt, self.max_speed
        ));
        s
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Hex digest identifying layout and physics.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_wall(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return true;
        }
        self.walls[y as usize * self.width + x as usize]
    }

    pub fn is_free_cell(&self, c: Cell) -> bool {
        !self.is_wall(c.x as i64, c.y as i64)
    }

    pub fn cell_of(&self, p: [f32; 2]) -> (i64, i64) {
        (
            (p[0] / self.cell_size).floor() as i64,
            (p[1] / self.cell_size).floor() as i64,
        )
    }

    pub fn is_free_point(&self, p: [f32; 2]) -> bool {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return false;
        }
        let (x, y) = self.cell_of(p);
        !self.is_wall(x, y)
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.walls[y * self.width + x] {
                    out.push(Cell::new(x, y));
                }
            }
        }
        out
    }

    pub fn cell_center(&self, c: Cell) -> [f32; 2] {
        [(c.x as f32 + 0.5) * self.cell_size, (c.y as f32 + 0.5) * self.cell_size]
    }

    pub fn extent(&self) -> [f32; 2] {
        [self.width as f32 * self.cell_size, self.height as f32 * self.cell_size]
    }

    fn neighbors(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        let (x, y) = (c.x as i64, c.y as i64);
        [(1, 0), (-1, 0), (0, 1), (0, -1)]
            .into_iter()
            .map(move |(dx, dy)| (x + dx, y + dy))
            .filter(|&(nx, ny)| !self.is_wall(nx, ny))
            .map(|(nx, ny)| Cell::new(nx as usize, ny as usize))
    }

    /// Multi-source corridor (4-connected) distance to every cell; `None`
    /// for walls and unreachable cells. Indexed `y * width + x`.
    pub fn corridor_distances(&self, sources: &[Cell]) -> Vec<Option<u32>> {
        self.corridor_distances_within(sources, None)
    }

    /// [`Self::corridor_distances`] moving only through cells of `region`
    /// when one is given.
    pub fn corridor_distances_within(&self, sources: &[Cell], region: Option<&BTreeSet<Cell>>) -> Vec<Option<u32>> {
        let allowed = |c: &Cell| region.is_none_or(|r| r.contains(c));
        let mut dist = vec![None; self.width * self.height];
        let mut queue = VecDeque::new();
        for &s in sources {
            if self.is_free_cell(s) && allowed(&s) && dist[s.y * self.width + s.x].is_none() {
                dist[s.y * self.width + s.x] = Some(0);
                queue.push_back(s);
            }
        }
        while let Some(c) = queue.pop_front() {
            let d = dist[c.y * self.width + c.x].unwrap();
            for n in self.neighbors(c).filter(allowed) {
                let slot = &mut dist[n.y * self.width + n.x];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    pub fn distance_at(&self, dist: &[Option<u32>], c: Cell) -> Option<u32> {
        dist[c.y * self.width + c.x]
    }

    /// Shortest 4-connected cell path from `from` to `to`, both inclusive.
    pub fn shortest_path(&self, from: Cell, to: Cell) -> Option<Vec<Cell>> {
        self.shortest_path_within(from, to, None)
    }

    /// Shortest path that stays inside `region` when one is given.
    pub fn shortest_path_within(&self, from: Cell, to: Cell, region: Option<&BTreeSet<Cell>>) -> Option<Vec<Cell>> {
        let dist = self.corridor_distances_within(&[to], region);
        self.distance_at(&dist, from)?;
        let mut path = vec![from];
        let mut cur = from;
        while cur != to {
            let d = self.distance_at(&dist, cur).unwrap();
            cur = self
                .neighbors(cur)
                .find(|&n| self.distance_at(&dist, n) == Some(d - 1))
                .expect("BFS predecessor exists");
            path.push(cur);
        }
        Some(path)
    }

    /// Closest point of free space to `p` (identity for free points).
    pub fn nearest_free_point(&self, p: [f32; 2]) -> [f32; 2] {
        if self.is_free_point(p) {
            return p;
        }
        let cs = self.cell_size;
        let mut best = None::<(f32, [f32; 2])>;
        for c in self.free_cells() {
            let lo = [c.x as f32 * cs, c.y as f32 * cs];
            let hi = [lo[0] + cs - WALL_MARGIN, lo[1] + cs - WALL_MARGIN];
            let q = [p[0].clamp(lo[0], hi[0]), p[1].clamp(lo[1], hi[1])];
            let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, q));
            }
        }
        best.expect("maze has a free cell").1
    }

    /// Move one coordinate along `axis`, stopping at the first wall face
    /// crossed. Returns the new coordinate and whether a wall was hit.
    fn sweep(&self, pos: [f32; 2], axis: usize, delta: f32) -> (f32, bool) {
        let cs = self.cell_size;
        let start = pos[axis];
        let target = start + delta;
        let other = (pos[1 - axis] / cs).floor() as i64;
        let from = (start / cs).floor() as i64;
        let to = (target / cs).floor() as i64;
        let blocked = |k: i64| {
            if axis == 0 {
                self.is_wall(k, other)
            } else {
                self.is_wall(other, k)
            }
        };
        if to > from {
            for k in from + 1..=to {
                if blocked(k) {
                    return (k as f32 * cs - WALL_MARGIN, true);
                }
            }
        } else if to < from {
            for k in (to..from).rev() {
                if blocked(k) {
                    return ((k + 1) as f32 * cs, true);
                }
            }
        }
        (target, false)
    }
}

/// Place the agent at `start` at rest.
pub fn reset(spec: &MazeSpec, start: [f32; 2]) -> Result<EnvState> {
    if !spec.is_free_point(start) {
        return Err(Error::InvalidStart(start[0], start[1]));
    }
    Ok(EnvState {
        pos: start,
        vel: [0.0, 0.0],
    })
}

/// Deterministic point-mass transition with axis-separated wall collision.
pub fn step(spec: &MazeSpec, state: &EnvState, action: [f32; 2]) -> EnvState {
    let mut vel = [0.0f32; 2];
    for i in 0..2 {
        let a = if action[i].is_finite() {
            action[i].clamp(-spec.max_action, spec.max_action)
        } else {
            0.0
        };
        vel[i] = (state.vel[i] + a * spec.dt).clamp(-spec.max_speed, spec.max_speed);
    }
    let mut pos = state.pos;
    let (x, hit_x) = spec.sweep(pos, 0, vel[0] * spec.dt);
    pos[0] = x;
    if hit_x {
        vel[0] = 0.0;
    }
    let (y, hit_y) = spec.sweep(pos, 1, vel[1] * spec.dt);
    pos[1] = y;
    if hit_y {
        vel[1] = 0.0;
    }
    EnvState { pos, vel }
}

/// State-to-goal mapping: the position.
pub fn phi(state: &EnvState) -> Goal {
    Goal(state.pos)
}

/// Sparse reward: 1 inside the closed success ball, else 0.
pub fn reward(state_next: &EnvState, goal: &Goal, cfg: &EnvConfig) -> f32 {
    let r = cfg.success_radius;
    if goal.sq_dist(phi(state_next).0) <= r * r {
        1.0
    } else {
        0.0
    }
}

/// 100 if the squared distance to the goal is at most 1, else 0.
pub fn normalized_score(final_state: &EnvState, goal: &Goal) -> f32 {
    if goal.sq_dist(phi(final_state).0) <= 1.0 {
        100.0
    } else {
        0.0
    }
}

/// Affine map of raw states and goals into roughly `[-1, 1]` for networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateScaler {
    center: [f32; 2],
    half: [f32; 2],
    speed: f32,
}

impl StateScaler {
    pub fn for_maze(spec: &MazeSpec) -> Self {
        let e = spec.extent();
        Self {
            center: [e[0] / 2.0, e[1] / 2.0],
            half: [e[0] / 2.0, e[1] / 2.0],
            speed: spec.max_speed,
        }
    }

    pub fn state(&self, s: &EnvState) -> [f32; 4] {
        [
            (s.pos[0] - self.center[0]) / self.half[0],
            (s.pos[1] - self.center[1]) / self.half[1],
            s.vel[0] / self.speed,
            s.vel[1] / self.speed,
        ]
    }

    pub fn unstate(&self, v: &[f32]) -> EnvState {
        EnvState {
            pos: [
                v[0] * self.half[0] + self.center[0],
                v[1] * self.half[1] + self.center[1],
            ],
            vel: [v[2] * self.speed, v[3] * self.speed],
        }
    }

    pub fn goal(&self, g: &Goal) -> [f32; 2] {
        [
            (g.0[0] - self.center[0]) / self.half[0],
            (g.0[1] - self.center[1]) / self.half[1],
        ]
    }
}
