//! Trajectory storage, sub-trajectory sampling, hindsight relabeling and the
//! on-disk dataset format.

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::env::{phi, EnvState, Goal};
use crate::{Error, Result};

const MAGIC: &str = "skillstep-dataset 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Expert,
    Synthetic,
    /// Collected by the policy during adaptation.
    Online,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Expert => "expert",
            Self::Synthetic => "synthetic",
            Self::Online => "online",
        })
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Self::Expert),
            "synthetic" => Ok(Self::Synthetic),
            "online" => Ok(Self::Online),
            _ => Err(Error::Config(format!("unknown provenance {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<EnvState>,
    pub actions: Vec<[f32; 2]>,
    pub provenance: Provenance,
    pub iteration_born: u32,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Shape and finiteness checks.
    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::Contract("trajectory has no states".into()));
        }
        if self.states.len() != self.actions.len() + 1 {
            return Err(Error::Contract(format!(
                "{} states for {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        if let Some(i) = self.states.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("state {i}")));
        }
        if let Some(i) = self
            .actions
            .iter()
            .position(|a| !(a[0].is_finite() && a[1].is_finite()))
        {
            return Err(Error::NonFinite(format!("action {i}")));
        }
        Ok(())
    }
}

/// `H + 1` contiguous states and the `H` actions between them.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTrajectory {
    pub states: Vec<EnvState>,
    pub actions: Vec<[f32; 2]>,
    pub trajectory: usize,
    pub offset: usize,
}

impl SubTrajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelabelMode {
    /// Goal image of the last state.
    Final,
    /// Goal image of a uniformly drawn state at index `>= t + H`.
    Future,
}

/// Goal for the sub-trajectory starting at `t`. `Future` falls back to
/// `Final` when `t + horizon` runs past the end.
pub fn relabel_goal<R: Rng + ?Sized>(
    traj: &Trajectory,
    t: usize,
    horizon: usize,
    mode: RelabelMode,
    rng: &mut R,
) -> Goal {
    let last = traj.states.len() - 1;
    match mode {
        RelabelMode::Future if t + horizon <= last => {
            let i = rng.random_range(t + horizon..=last);
            phi(&traj.states[i])
        }
        _ => phi(&traj.states[last]),
    }
}

/// Outcome of [`DatasetStore::append_synthetic`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AppendReport {
    pub accepted: usize,
    /// Input index and reason for each rejected trajectory.
    pub rejected: Vec<(usize, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStore {
    trajectories: Vec<Trajectory>,
    pub seed: u64,
    pub horizon: usize,
    pub maze_hash: String,
    /// Probability of drawing a synthetic trajectory when sampling; `None`
    /// samples uniformly over all trajectories.
    pub synthetic_ratio: Option<f32>,
}

impl DatasetStore {
    pub fn new(seed: u64, horizon: usize, maze_hash: impl Into<String>) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("skill horizon must be >= 1".into()));
        }
        Ok(Self {
            trajectories: Vec::new(),
            seed,
            horizon,
            maze_hash: maze_hash.into(),
            synthetic_ratio: None,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.trajectories.iter().filter(|t| t.provenance == provenance).count()
    }

    pub fn push(&mut self, traj: Trajectory) -> Result<()> {
        traj.validate()?;
        self.trajectories.push(traj);
        Ok(())
    }

    /// Validate and append imagined trajectories tagged with `iteration`.
    /// Invalid ones are skipped and reported.
    pub fn append_synthetic(&mut self, trajs: Vec<Trajectory>, iteration: u32) -> AppendReport {
        let mut report = AppendReport::default();
        for (i, mut t) in trajs.into_iter().enumerate() {
            t.provenance = Provenance::Synthetic;
            t.iteration_born = iteration;
            match t.validate() {
                Ok(()) => {
                    self.trajectories.push(t);
                    report.accepted += 1;
                }
                Err(e) => report.rejected.push((i, e.to_string())),
            }
        }
        report
    }

    /// Sampler over trajectories with at least `horizon + 1` states.
    pub fn sampler(&self, horizon: usize) -> Result<SubSampler> {
        let mut expert = Vec::new();
        let mut synthetic = Vec::new();
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.len() > horizon {
                match t.provenance {
                    Provenance::Synthetic => synthetic.push(i),
                    _ => expert.push(i),
                }
            }
        }
        if expert.is_empty() && synthetic.is_empty() {
            return Err(Error::Sampling(format!("no trajectory has {} states", horizon + 1)));
        }
        Ok(SubSampler {
            horizon,
            expert,
            synthetic,
            ratio: self.synthetic_ratio,
        })
    }

    /// One uniformly drawn sub-trajectory of length `horizon`.
    pub fn sample_subtrajectory<R: Rng + ?Sized>(&self, horizon: usize, rng: &mut R) -> Result<SubTrajectory> {
        Ok(self.sampler(horizon)?.sample(self, rng))
    }

    pub fn slice(&self, trajectory: usize, offset: usize, horizon: usize) -> SubTrajectory {
        let t = &self.trajectories[trajectory];
        SubTrajectory {
            states: t.states[offset..=offset + horizon].to_vec(),
            actions: t.actions[offset..offset + horizon].to_vec(),
            trajectory,
            offset,
        }
    }

    /// Number of distinct `bin_size` squares holding the goal image of any
    /// stored state.
    pub fn goal_coverage(&self, bin_size: f32) -> usize {
        let mut bins = HashSet::new();
        for t in &self.trajectories {
            for s in &t.states {
                let g = phi(s).0;
                bins.insert(((g[0] / bin_size).floor() as i64, (g[1] / bin_size).floor() as i64));
            }
        }
        bins.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        self.write_to(&mut out).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "trajectories {}", self.trajectories.len())?;
        writeln!(w, "horizon {}", self.horizon)?;
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "maze_hash {}", self.maze_hash)?;
        match self.synthetic_ratio {
            Some(r) => writeln!(w, "synthetic_ratio {:08x}", r.to_bits())?,
            None => writeln!(w, "synthetic_ratio none")?,
        }
        for t in &self.trajectories {
            writeln!(w, "traj {} {} {}", t.states.len(), t.provenance, t.iteration_born)?;
        }
        writeln!(w, "end")?;
        for t in &self.trajectories {
            for s in &t.states {
                for v in s.to_array() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            for a in &t.actions {
                for v in a {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::corrupt(path, reason))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0usize;
        let mut next_line = || -> std::result::Result<String, String> {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or("truncated header")?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| "header is not utf-8")?;
            pos += nl + 1;
            Ok(line.to_string())
        };
        if next_line()? != MAGIC {
            return Err("bad magic".into());
        }
        fn field(line: &str, key: &str) -> std::result::Result<String, String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| format!("expected `{key}`, got `{line}`"))
        }
        let parse_err = |e: std::num::ParseIntError| e.to_string();
        let n: usize = field(&next_line()?, "trajectories")?.parse().map_err(parse_err)?;
        let horizon: usize = field(&next_line()?, "horizon")?.parse().map_err(parse_err)?;
        let seed: u64 = field(&next_line()?, "seed")?.parse().map_err(parse_err)?;
        let maze_hash = field(&next_line()?, "maze_hash")?;
        let ratio = field(&next_line()?, "synthetic_ratio")?;
        let synthetic_ratio = if ratio == "none" {
            None
        } else {
            Some(f32::from_bits(u32::from_str_radix(&ratio, 16).map_err(parse_err)?))
        };
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let line = next_line()?;
            let record = field(&line, "traj")?;
            let parts: Vec<&str> = record.split(' ').collect();
            if parts.len() != 3 {
                return Err(format!("bad trajectory record `{line}`"));
            }
            let len: usize = parts[0].parse().map_err(parse_err)?;
            if len == 0 {
                return Err("empty trajectory".into());
            }
            let prov: Provenance = parts[1].parse().map_err(|e: Error| e.to_string())?;
            let iter: u32 = parts[2].parse().map_err(parse_err)?;
            shapes.push((len, prov, iter));
        }
        if next_line()? != "end" {
            return Err("missing `end`".into());
        }
        let need: usize = shapes.iter().map(|&(l, _, _)| (4 * l + 2 * (l - 1)) * 4).sum();
        let payload = &bytes[pos..];
        if payload.len() != need {
            return Err(format!("payload has {} bytes, manifest needs {need}", payload.len()));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut trajectories = Vec::with_capacity(n);
        for (len, provenance, iteration_born) in shapes {
            let states = (0..len)
                .map(|_| EnvState::from_array(std::array::from_fn(|_| floats.next().unwrap())))
                .collect();
            let actions = (0..len - 1)
                .map(|_| [floats.next().unwrap(), floats.next().unwrap()])
                .collect();
            trajectories.push(Trajectory {
                states,
                actions,
                provenance,
                iteration_born,
            });
        }
        if horizon == 0 {
            return Err("horizon must be >= 1".into());
        }
        Ok(Self {
            trajectories,
            seed,
            horizon,
            maze_hash,
            synthetic_ratio,
        })
    }
}

/// Cached index of trajectories long enough for a horizon.
#[derive(Debug, Clone)]
pub struct SubSampler {
    horizon: usize,
    expert: Vec<usize>,
    synthetic: Vec<usize>,
    ratio: Option<f32>,
}

impl SubSampler {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let pool_all = self.expert.len() + self.synthetic.len();
        match self.ratio {
            Some(r) if !self.expert.is_empty() && !self.synthetic.is_empty() => {
                if rng.random::<f32>() < r {
                    self.synthetic[rng.random_range(0..self.synthetic.len())]
                } else {
                    self.expert[rng.random_range(0..self.expert.len())]
                }
            }
            _ => {
                let i = rng.random_range(0..pool_all);
                if i < self.expert.len() {
                    self.expert[i]
                } else {
                    self.synthetic[i - self.expert.len()]
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, store: &DatasetStore, rng: &mut R) -> SubTrajectory {
        let ti = self.pick(rng);
        let len = store.trajectories[ti].len();
        let offset = rng.random_range(0..=len - 1 - self.horizon);
        store.slice(ti, offset, self.horizon)
    }
}
