//! Trajectory data types, normalization and dataset persistence.

mod boids;
mod court;
mod io;

pub use boids::{boids_step, generate_boids_dataset, simulate_boids, BoidsParams, BoidsRun, GeneratedBoids};
pub use court::CourtGeometry;
pub use io::{load_dataset, load_sidecar_labels, save_dataset, save_sidecar_labels, DATASET_MAGIC, DATASET_VERSION};

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported dataset version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid normalization statistics: {0}")]
    InvalidStats(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Basketball,
    Boids,
}

impl Domain {
    /// Default `(T, K, d)` for the domain.
    pub fn default_shape(self) -> (usize, usize, usize) {
        match self {
            Domain::Basketball => (50, 5, 2),
            Domain::Boids => (50, 8, 2),
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Basketball => "basketball",
            Domain::Boids => "boids",
        })
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "basketball" => Ok(Domain::Basketball),
            "boids" => Ok(Domain::Boids),
            other => Err(format!("unknown domain `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A `T x K x d` array of agent states stored in `(time, agent, dim)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub domain: Domain,
    #[serde(rename = "T")]
    t_len: usize,
    #[serde(rename = "K")]
    agents: usize,
    #[serde(rename = "d")]
    dim: usize,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn new(domain: Domain, t_len: usize, agents: usize, dim: usize, states: Vec<f64>) -> Result<Self> {
        let traj = Self { domain, t_len, agents, dim, states };
        traj.validate()?;
        Ok(traj)
    }

    /// Checks the shape and finiteness invariants. Deserialized values should
    /// be validated before use.
    pub fn validate(&self) -> Result<()> {
        if self.t_len < 2 || self.agents < 1 || self.dim < 1 {
            return Err(DatasetError::InvalidTrajectory(format!(
                "need T >= 2, K >= 1, d >= 1; got T={}, K={}, d={}",
                self.t_len, self.agents, self.dim
            )));
        }
        let expected = self.t_len * self.agents * self.dim;
        if self.states.len() != expected {
            return Err(DatasetError::ShapeMismatch(format!(
                "expected {expected} values for {}x{}x{}, found {}",
                self.t_len,
                self.agents,
                self.dim,
                self.states.len()
            )));
        }
        if let Some(i) = self.states.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::InvalidTrajectory(format!("non-finite entry at flat index {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t_len
    }

    pub fn is_empty(&self) -> bool {
        self.t_len == 0
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.t_len, self.agents, self.dim)
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn into_states(self) -> Vec<f64> {
        self.states
    }

    /// State of agent `k` at time `t`.
    pub fn state(&self, t: usize, k: usize) -> &[f64] {
        let start = (t * self.agents + k) * self.dim;
        &self.states[start..start + self.dim]
    }

    /// Joint state of all agents at time `t` (`K * d` values).
    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.agents * self.dim;
        &self.states[t * w..(t + 1) * w]
    }

    /// The first `len` frames.
    pub fn prefix(&self, len: usize) -> Result<Trajectory> {
        if len < 1 || len > self.t_len {
            return Err(DatasetError::InvalidTrajectory(format!(
                "prefix length {len} outside 1..={}",
                self.t_len
            )));
        }
        let w = self.agents * self.dim;
        Ok(Trajectory {
            domain: self.domain,
            t_len: len,
            agents: self.agents,
            dim: self.dim,
            states: self.states[..len * w].to_vec(),
        })
    }

    /// Euclidean displacement of agent `k` between `t` and `t + 1`.
    pub fn step_length(&self, t: usize, k: usize) -> f64 {
        let a = self.state(t, k);
        let b = self.state(t + 1, k);
        a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt()
    }

    /// Reverses the time axis.
    pub fn time_reversed(&self) -> Trajectory {
        let w = self.agents * self.dim;
        let mut states = Vec::with_capacity(self.states.len());
        for t in (0..self.t_len).rev() {
            states.extend_from_slice(&self.states[t * w..(t + 1) * w]);
        }
        Trajectory { states, ..self.clone() }
    }

    /// Reorders agents; `order[i]` is the source agent placed at slot `i`.
    pub fn permute_agents(&self, order: &[usize]) -> Trajectory {
        assert_eq!(order.len(), self.agents, "permutation length must equal agent count");
        let mut states = Vec::with_capacity(self.states.len());
        for t in 0..self.t_len {
            for &k in order {
                states.extend_from_slice(self.state(t, k));
            }
        }
        Trajectory { states, ..self.clone() }
    }

    /// Per-agent mean of each state dimension over time.
    pub fn agent_means(&self) -> Vec<Vec<f64>> {
        let mut means = vec![vec![0.0; self.dim]; self.agents];
        for t in 0..self.t_len {
            for (k, mean) in means.iter_mut().enumerate() {
                for (m, v) in mean.iter_mut().zip(self.state(t, k)) {
                    *m += v;
                }
            }
        }
        for mean in &mut means {
            for m in mean.iter_mut() {
                *m /= self.t_len as f64;
            }
        }
        means
    }
}

/// Permutes agents by ascending mean position, lexicographic on the mean of
/// dimension 0, then dimension 1, and so on. Stable, so ties keep their
/// original order; this makes the operation idempotent.
pub fn order_agents(traj: &Trajectory) -> Trajectory {
    let means = traj.agent_means();
    let mut order: Vec<usize> = (0..traj.agents()).collect();
    order.sort_by(|&a, &b| {
        means[a]
            .iter()
            .zip(&means[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    traj.permute_agents(&order)
}

/// Per-dimension affine normalization `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.mean.len() != dim || self.scale.len() != dim {
            return Err(DatasetError::InvalidStats(format!(
                "stats have {}/{} entries for state dimension {dim}",
                self.mean.len(),
                self.scale.len()
            )));
        }
        if self.mean.iter().chain(&self.scale).any(|v| !v.is_finite()) {
            return Err(DatasetError::InvalidStats("non-finite statistic".into()));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(DatasetError::InvalidStats("scale must be positive".into()));
        }
        Ok(())
    }

    /// Mean and standard deviation of every state dimension over all
    /// trajectories, agents and frames. Used for the Boids domain.
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let first = trajs
            .first()
            .ok_or_else(|| DatasetError::InvalidStats("cannot compute statistics of an empty set".into()))?;
        let dim = first.dim();
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for tr in trajs {
            for chunk in tr.states().chunks(dim) {
                for (s, v) in sum.iter_mut().zip(chunk) {
                    *s += v;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; dim];
        for tr in trajs {
            for chunk in tr.states().chunks(dim) {
                for ((acc, v), m) in var.iter_mut().zip(chunk).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let scale = var.iter().map(|v| (v / count as f64).sqrt().max(1e-8)).collect();
        Ok(Self { mean, scale })
    }

    /// Train-split mean shift with division by half the court extent along
    /// each axis.
    pub fn basketball(trajs: &[Trajectory], court: &CourtGeometry) -> Result<Self> {
        let mut stats = Self::from_trajectories(trajs)?;
        stats.scale = vec![court.width / 2.0, court.half_length / 2.0];
        stats.validate(2)?;
        Ok(stats)
    }
}

pub fn normalize(traj: &Trajectory, stats: &NormStats) -> Result<Trajectory> {
    stats.validate(traj.dim())?;
    let d = traj.dim();
    let states = traj
        .states()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - stats.mean[i % d]) / stats.scale[i % d])
        .collect();
    Trajectory::new(traj.domain, traj.t_len, traj.agents, d, states)
}

pub fn denormalize(traj: &Trajectory, stats: &NormStats) -> Result<Trajectory> {
    stats.validate(traj.dim())?;
    let d = traj.dim();
    let states = traj
        .states()
        .iter()
        .enumerate()
        .map(|(i, v)| v * stats.scale[i % d] + stats.mean[i % d])
        .collect();
    Trajectory::new(traj.domain, traj.t_len, traj.agents, d, states)
}

/// A collection of equally shaped trajectories with the normalization
/// statistics of its training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: Domain,
    pub split: Split,
    pub stats: NormStats,
    trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(domain: Domain, split: Split, stats: NormStats, trajectories: Vec<Trajectory>) -> Result<Self> {
        if let Some(first) = trajectories.first() {
            let shape = first.shape();
            for (i, tr) in trajectories.iter().enumerate() {
                if tr.shape() != shape {
                    return Err(DatasetError::ShapeMismatch(format!(
                        "trajectory {i} has shape {:?}, expected {shape:?}",
                        tr.shape()
                    )));
                }
                if tr.domain != domain {
                    return Err(DatasetError::InvalidTrajectory(format!(
                        "trajectory {i} is tagged {}, dataset is {domain}",
                        tr.domain
                    )));
                }
            }
            stats.validate(shape.2)?;
        }
        Ok(Self { domain, split, stats, trajectories })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    /// `(T, K, d)` of the contained trajectories.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.trajectories.first().map(Trajectory::shape)
    }
}
