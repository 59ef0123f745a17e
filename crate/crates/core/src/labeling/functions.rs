use super::{LabelError, MacroIntentSequence, Result};
use crate::dataset::{CourtGeometry, Trajectory};
use serde::{Deserialize, Serialize};

/// Speed (ft/frame) under which a basketball player counts as stationary.
pub const DEFAULT_SPEED_THRESHOLD: f64 = 0.25;
/// Uncalibrated neighbor-distance threshold for the Boids labeling function.
pub const DEFAULT_BOIDS_DISTANCE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LabelingFunctionSpec {
    /// Court cell at the end of each window of `window` frames.
    Window { window: usize },
    /// Next court cell where the player is stationary.
    Stationary { speed_threshold: f64 },
    /// Friendly (1) / unfriendly (0) from the mean closest-neighbor distance.
    BoidsNeighbor { distance_threshold: f64 },
}

impl LabelingFunctionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Window { window } if window == 0 => Err(LabelError::InvalidSpec("window must be >= 1".into())),
            Self::Stationary { speed_threshold: th } | Self::BoidsNeighbor { distance_threshold: th } if !(th > 0.0) => {
                Err(LabelError::InvalidSpec("threshold must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn categories(&self, court: &CourtGeometry) -> usize {
        match self {
            Self::BoidsNeighbor { .. } => 2,
            _ => court.cell_count(),
        }
    }

    pub fn apply(&self, traj: &Trajectory, court: &CourtGeometry) -> Result<MacroIntentSequence> {
        match *self {
            Self::Window { window } => lf_window(traj, window, court),
            Self::Stationary { speed_threshold } => lf_stationary(traj, speed_threshold, court),
            Self::BoidsNeighbor { distance_threshold } => lf_boids(traj, distance_threshold),
        }
    }
}

fn backward_fill(
    traj: &Trajectory,
    court: &CourtGeometry,
    k: usize,
    mut relabel_at: impl FnMut(usize) -> bool,
) -> Vec<u16> {
    let t_len = traj.len();
    let mut g = vec![0u16; t_len];
    g[t_len - 1] = court.label_cell(traj.state(t_len - 1, k)) as u16;
    for t in (0..t_len - 1).rev() {
        g[t] = if relabel_at(t) { court.label_cell(traj.state(t, k)) as u16 } else { g[t + 1] };
    }
    g
}

/// Window labeling: the last cell each player occupies in every window of
/// `window` frames. With 1-indexed time `t`, frame `t` starts a new label
/// when `(t + 1) mod window == 0`; other frames copy the label of `t + 1`.
pub fn lf_window(traj: &Trajectory, window: usize, court: &CourtGeometry) -> Result<MacroIntentSequence> {
    LabelingFunctionSpec::Window { window }.validate()?;
    let per_agent: Vec<Vec<u16>> = (0..traj.agents())
        .map(|k| backward_fill(traj, court, k, |t| (t + 2) % window == 0))
        .collect();
    MacroIntentSequence::from_agent_major(court.cell_count(), &per_agent)
}

/// Stationary labeling: each frame is labeled with the cell where the
/// player next stops. A player is stationary at `t` when
/// `|x_{t+1} - x_t| < speed_threshold`; the last frame inherits the flag of
/// the one before it.
pub fn lf_stationary(traj: &Trajectory, speed_threshold: f64, court: &CourtGeometry) -> Result<MacroIntentSequence> {
    LabelingFunctionSpec::Stationary { speed_threshold }.validate()?;
    let t_len = traj.len();
    let per_agent: Vec<Vec<u16>> = (0..traj.agents())
        .map(|k| {
            let mut stationary: Vec<bool> = (0..t_len - 1).map(|t| traj.step_length(t, k) < speed_threshold).collect();
            stationary.push(stationary[t_len - 2]);
            backward_fill(traj, court, k, |t| stationary[t] && !stationary[t + 1])
        })
        .collect();
    MacroIntentSequence::from_agent_major(court.cell_count(), &per_agent)
}

/// Mean over frames of each agent's distance to its closest neighbor.
pub fn closest_neighbor_means(traj: &Trajectory) -> Result<Vec<f64>> {
    let k_n = traj.agents();
    if k_n < 2 {
        return Err(LabelError::TooFewAgents(k_n));
    }
    let mut sums = vec![0.0; k_n];
    for t in 0..traj.len() {
        for (i, sum) in sums.iter_mut().enumerate() {
            let a = traj.state(t, i);
            let mut best = f64::INFINITY;
            for j in (0..k_n).filter(|&j| j != i) {
                let b = traj.state(t, j);
                let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                best = best.min(d);
            }
            *sum += best;
        }
    }
    Ok(sums.into_iter().map(|s| s / traj.len() as f64).collect())
}

/// Boids labeling: friendly (1) when an agent's mean closest-neighbor
/// distance is below `distance_threshold`, unfriendly (0) otherwise. The
/// label is constant over time.
pub fn lf_boids(traj: &Trajectory, distance_threshold: f64) -> Result<MacroIntentSequence> {
    LabelingFunctionSpec::BoidsNeighbor { distance_threshold }.validate()?;
    let means = closest_neighbor_means(traj)?;
    let per_agent: Vec<Vec<u16>> = means
        .iter()
        .map(|&m| vec![u16::from(m < distance_threshold); traj.len()])
        .collect();
    MacroIntentSequence::from_agent_major(2, &per_agent)
}

/// Trajectory-level behavior from per-agent Boids labels: friendly when a
/// strict majority of agents is labeled friendly at the first frame.
pub fn trajectory_vote(labels: &MacroIntentSequence) -> bool {
    let friendly = (0..labels.agents()).filter(|&k| labels.get(0, k) == 1).count();
    2 * friendly > labels.agents()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoidsCalibration {
    pub threshold: f64,
    /// Fraction of trajectories whose majority vote matches the ground truth.
    pub accuracy: f64,
}

/// Sweeps `steps` log-spaced thresholds between the smallest and largest
/// per-agent statistic and keeps the one whose trajectory votes agree most
/// often with `friendly`.
pub fn calibrate_boids_threshold(trajs: &[Trajectory], friendly: &[bool], steps: usize) -> Result<BoidsCalibration> {
    if trajs.is_empty() || trajs.len() != friendly.len() {
        return Err(LabelError::ShapeMismatch(format!(
            "{} trajectories vs {} ground-truth labels",
            trajs.len(),
            friendly.len()
        )));
    }
    let stats: Vec<Vec<f64>> = trajs.iter().map(closest_neighbor_means).collect::<Result<_>>()?;
    let lo = stats.iter().flatten().copied().fold(f64::INFINITY, f64::min).max(1e-6);
    let hi = stats.iter().flatten().copied().fold(0.0, f64::max).max(lo * 1.0001);
    let steps = steps.max(2);
    let mut best = BoidsCalibration { threshold: DEFAULT_BOIDS_DISTANCE, accuracy: -1.0 };
    for i in 0..steps {
        let th = lo * (hi / lo).powf(i as f64 / (steps - 1) as f64);
        let hits = stats
            .iter()
            .zip(friendly)
            .filter(|(s, &f)| {
                let votes = s.iter().filter(|&&m| m < th).count();
                (2 * votes > s.len()) == f
            })
            .count();
        let acc = hits as f64 / trajs.len() as f64;
        if acc > best.accuracy {
            best = BoidsCalibration { threshold: th, accuracy: acc };
        }
    }
    Ok(best)
}
