use super::{EvalError, Result};
use crate::dataset::Trajectory;
use crate::labeling::closest_neighbor_means;
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle `[x_min, x_max] x [y_min, y_max]`, edges inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    /// Half court in feet.
    pub fn half_court() -> Self {
        Self { x_min: 0.0, x_max: 50.0, y_min: 0.0, y_max: 47.0 }
    }

    pub fn from_array(b: [f64; 4]) -> Self {
        Self { x_min: b[0], x_max: b[1], y_min: b[2], y_max: b[3] }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x_min, self.x_max, self.y_min, self.y_max].iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max;
        if ok {
            Ok(())
        } else {
            Err(EvalError::Invalid(format!("degenerate bounds {self:?}")))
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }
}

/// How out-of-bounds observations are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OobMode {
    /// Percentage of (frame, agent) pairs outside the bounds.
    #[default]
    AgentFrames,
    /// Percentage of frames with at least one agent outside.
    Frames,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    /// Mean step length over trajectories, agents and steps.
    pub avg_speed: f64,
    /// Mean over trajectories and agents of the summed step lengths.
    pub avg_distance: f64,
    pub oob_percent: f64,
}

/// Movement and out-of-bounds statistics on unnormalized 2-d positions.
/// All trajectories must share their length, which makes
/// `avg_distance = avg_speed * (T - 1)`.
pub fn domain_stats(trajs: &[Trajectory], bounds: &Bounds, mode: OobMode) -> Result<StatsSummary> {
    bounds.validate()?;
    let first = trajs.first().ok_or_else(|| EvalError::Invalid("no trajectories".into()))?;
    let (t_len, k, d) = first.shape();
    if d < 2 {
        return Err(EvalError::Invalid("domain statistics need 2-d positions".into()));
    }
    if trajs.iter().any(|t| t.shape() != (t_len, k, d)) {
        return Err(EvalError::Invalid("trajectories must share their shape".into()));
    }
    let mut path = 0.0;
    let (mut oob, mut observations) = (0usize, 0usize);
    for tr in trajs {
        for a in 0..k {
            for t in 1..t_len {
                path += tr.step_length(t - 1, a);
            }
        }
        for t in 0..t_len {
            let outside = (0..k).filter(|&a| !bounds.contains(tr.state(t, a))).count();
            match mode {
                OobMode::AgentFrames => {
                    oob += outside;
                    observations += k;
                }
                OobMode::Frames => {
                    oob += usize::from(outside > 0);
                    observations += 1;
                }
            }
        }
    }
    let paths = (trajs.len() * k) as f64;
    let avg_distance = path / paths;
    Ok(StatsSummary { avg_speed: avg_distance / (t_len - 1) as f64, avg_distance, oob_percent: 100.0 * oob as f64 / observations as f64 })
}

/// Per trajectory: mean over frames and agents of the distance to the
/// closest other agent.
pub fn closest_neighbor_scores(trajs: &[Trajectory]) -> Result<Vec<f64>> {
    trajs
        .iter()
        .map(|t| {
            let per_agent = closest_neighbor_means(t).map_err(|e| EvalError::Invalid(e.to_string()))?;
            Ok(per_agent.iter().sum::<f64>() / per_agent.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<f64>,
}

impl Histogram {
    pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
        if bins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(EvalError::Invalid("histogram needs at least one bin and lo < hi".into()));
        }
        Ok((0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect())
    }

    /// Counts `values` into the bins; values outside the edges land in the
    /// first or last bin, so the total equals the number of values.
    pub fn from_values(values: &[f64], edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(EvalError::Invalid("edges must be strictly increasing".into()));
        }
        let bins = edges.len() - 1;
        let mut counts = vec![0.0; bins];
        for &v in values {
            let i = edges[1..bins].partition_point(|&e| e <= v);
            counts[i] += 1.0;
        }
        Ok(Self { edges, counts })
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn normalized(&self) -> Vec<f64> {
        let t = self.total();
        self.counts.iter().map(|c| if t > 0.0 { c / t } else { 0.0 }).collect()
    }
}

pub fn closest_neighbor_histogram(trajs: &[Trajectory], edges: Vec<f64>) -> Result<Histogram> {
    Histogram::from_values(&closest_neighbor_scores(trajs)?, edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bimodality {
    pub mass_below: f64,
    pub mass_above: f64,
    pub separated: bool,
}

pub const BIMODALITY_MIN_MASS: f64 = 0.3;

/// Normalized mass of bins whose center lies below / at-or-above
/// `threshold`; separated iff both sides hold at least 30%.
pub fn bimodality_score(hist: &Histogram, threshold: f64) -> Bimodality {
    let p = hist.normalized();
    let mass_below: f64 = hist.centers().iter().zip(&p).filter(|(c, _)| **c < threshold).map(|(_, m)| m).sum();
    let mass_above: f64 = hist.centers().iter().zip(&p).filter(|(c, _)| **c >= threshold).map(|(_, m)| m).sum();
    Bimodality { mass_below, mass_above, separated: mass_below >= BIMODALITY_MIN_MASS && mass_above >= BIMODALITY_MIN_MASS }
}

/// L1 distance between the normalized versions of two histograms with
/// identical edges.
pub fn histogram_l1(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.edges != b.edges {
        return Err(EvalError::Invalid("histograms have different bins".into()));
    }
    Ok(a.normalized().iter().zip(b.normalized()).map(|(x, y)| (x - y).abs()).sum())
}
