//! Programmatic weak supervision: labeling functions that map raw
//! trajectories to macro-intent label sequences.

mod functions;
mod io;

pub use functions::{
    calibrate_boids_threshold, closest_neighbor_means, lf_boids, lf_stationary, lf_window, trajectory_vote,
    BoidsCalibration, LabelingFunctionSpec, DEFAULT_BOIDS_DISTANCE, DEFAULT_SPEED_THRESHOLD,
};
pub use io::{load_labels, save_labels, LABELS_MAGIC, LABELS_VERSION};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("label {label} at t={t}, agent={agent} is outside [0, {categories})")]
    OutOfRange { t: usize, agent: usize, label: u16, categories: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid labeling function: {0}")]
    InvalidSpec(String),
    #[error("need at least two agents, got {0}")]
    TooFewAgents(usize),
    #[error("empty input")]
    Empty,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt label file: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, LabelError>;

/// `T x K` categorical macro-intents in `[0, C)`, stored time-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroIntentSequence {
    #[serde(rename = "T")]
    t_len: usize,
    #[serde(rename = "K")]
    agents: usize,
    #[serde(rename = "C")]
    categories: usize,
    labels: Vec<u16>,
}

impl MacroIntentSequence {
    pub fn new(t_len: usize, agents: usize, categories: usize, labels: Vec<u16>) -> Result<Self> {
        let seq = Self { t_len, agents, categories, labels };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.t_len * self.agents {
            return Err(LabelError::ShapeMismatch(format!(
                "{} labels for T={} x K={}",
                self.labels.len(),
                self.t_len,
                self.agents
            )));
        }
        if let Some(i) = self.labels.iter().position(|&l| l as usize >= self.categories) {
            return Err(LabelError::OutOfRange {
                t: i / self.agents.max(1),
                agent: i % self.agents.max(1),
                label: self.labels[i],
                categories: self.categories,
            });
        }
        Ok(())
    }

    /// Builds a sequence from `labels[k][t]` (agent-major) input.
    pub fn from_agent_major(categories: usize, per_agent: &[Vec<u16>]) -> Result<Self> {
        let agents = per_agent.len();
        let t_len = per_agent.first().map_or(0, Vec::len);
        if per_agent.iter().any(|v| v.len() != t_len) {
            return Err(LabelError::ShapeMismatch("agents have different sequence lengths".into()));
        }
        let mut labels = Vec::with_capacity(t_len * agents);
        for t in 0..t_len {
            for agent in per_agent {
                labels.push(agent[t]);
            }
        }
        Self::new(t_len, agents, categories, labels)
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

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, t: usize, k: usize) -> u16 {
        self.labels[t * self.agents + k]
    }

    pub fn set(&mut self, t: usize, k: usize, label: u16) -> Result<()> {
        if label as usize >= self.categories {
            return Err(LabelError::OutOfRange { t, agent: k, label, categories: self.categories });
        }
        self.labels[t * self.agents + k] = label;
        Ok(())
    }

    /// One-hot vector of agent `k` at time `t`.
    pub fn one_hot(&self, t: usize, k: usize) -> Vec<f32> {
        let mut v = vec![0.0; self.categories];
        v[self.get(t, k) as usize] = 1.0;
        v
    }

    /// Labels of agent `k` over time.
    pub fn agent(&self, k: usize) -> Vec<u16> {
        (0..self.t_len).map(|t| self.get(t, k)).collect()
    }
}

/// Shared macro-intent `g_t`: the agent-major concatenation of the `K`
/// one-hot vectors, giving a `T x (K * C)` row-major array with exactly `K`
/// ones per row.
pub fn stack_shared(g: &MacroIntentSequence) -> Vec<f32> {
    let width = g.agents * g.categories;
    let mut out = vec![0.0; g.t_len * width];
    for t in 0..g.t_len {
        for k in 0..g.agents {
            out[t * width + k * g.categories + g.get(t, k) as usize] = 1.0;
        }
    }
    out
}

/// Per-agent frequency of every category over all sequences and timesteps.
pub fn macro_label_distribution(seqs: &[MacroIntentSequence]) -> Result<Vec<Vec<f64>>> {
    let first = seqs.first().ok_or(LabelError::Empty)?;
    let (k, c) = (first.agents, first.categories);
    let mut counts = vec![vec![0u64; c]; k];
    let mut totals = vec![0u64; k];
    for s in seqs {
        if s.agents != k || s.categories != c {
            return Err(LabelError::ShapeMismatch("sequences disagree on K or C".into()));
        }
        for t in 0..s.t_len {
            for (a, row) in counts.iter_mut().enumerate() {
                row[s.get(t, a) as usize] += 1;
                totals[a] += 1;
            }
        }
    }
    Ok(counts
        .into_iter()
        .zip(totals)
        .map(|(row, n)| row.into_iter().map(|x| x as f64 / n.max(1) as f64).collect())
        .collect())
}
