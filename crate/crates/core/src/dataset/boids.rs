//! Simplified Boids schooling model used as the synthetic benchmark.
//!
//! Each agent's velocity is updated as
//! `v' = beta * v + beta * (c1 v_coh + c2 v_sep + c3 v_ali + c4 v_ori)`,
//! with the sign of `c1` drawn once per trajectory (positive: friendly
//! agents that group together, negative: unfriendly agents that spread out).

use super::{Dataset, DatasetError, Domain, NormStats, Result, Split, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoidsParams {
    /// `(c1, c2, c3, c4)`. Only the magnitude of `c1` is used by the
    /// generator; its sign is sampled per trajectory.
    pub coefficients: [f64; 4],
    pub cohesion_radius: f64,
    pub separation_radius: f64,
    pub beta_range: (f64, f64),
    /// Frames between refreshes of `beta`.
    pub beta_period: usize,
    pub agents: usize,
    pub frames: usize,
    /// Radius of the ring the agents start on.
    pub ring_radius: f64,
    /// Integration step for `x' = x + dt * v'`.
    pub dt: f64,
    /// Speed clamp applied after the velocity update; `None` disables it.
    pub max_speed: Option<f64>,
}

impl Default for BoidsParams {
    fn default() -> Self {
        Self {
            coefficients: [1.0, 0.1, 0.2, 1.0],
            cohesion_radius: 0.9,
            separation_radius: 0.2,
            beta_range: (0.8, 1.4),
            beta_period: 10,
            agents: 8,
            frames: 50,
            ring_radius: 0.25,
            dt: 0.1,
            max_speed: Some(1.0),
        }
    }
}

impl BoidsParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DatasetError::InvalidParams(msg.to_string()));
        if !(self.cohesion_radius > 0.0 && self.separation_radius > 0.0) {
            return bad("radii must be positive");
        }
        if !(self.beta_range.0 < self.beta_range.1) {
            return bad("beta range must satisfy low < high");
        }
        if self.coefficients[1..].iter().any(|&c| !(c > 0.0)) {
            return bad("c2, c3, c4 must be positive");
        }
        if self.coefficients[0].abs() != 1.0 {
            return bad("|c1| must be 1");
        }
        if self.beta_period == 0 {
            return bad("beta period must be at least one frame");
        }
        if self.agents == 0 || self.frames < 2 {
            return bad("need at least one agent and two frames");
        }
        if !(self.dt > 0.0) || !(self.ring_radius >= 0.0) {
            return bad("dt must be positive and the ring radius non-negative");
        }
        if let Some(s) = self.max_speed {
            if !(s > 0.0) {
                return bad("max speed must be positive");
            }
        }
        Ok(())
    }

    /// Fixed starting positions: agents evenly spaced on a ring around the
    /// origin.
    pub fn initial_positions(&self) -> Vec<[f64; 2]> {
        (0..self.agents)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / self.agents as f64;
                [self.ring_radius * a.cos(), self.ring_radius * a.sin()]
            })
            .collect()
    }
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n > 0.0 {
        [v[0] / n, v[1] / n]
    } else {
        [0.0, 0.0]
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// One synchronous update of all agents. `params.coefficients[0]` is used
/// with its sign. Empty neighborhoods and zero-length vectors contribute
/// zero vectors.
pub fn boids_step(
    positions: &[[f64; 2]],
    velocities: &[[f64; 2]],
    beta: f64,
    params: &BoidsParams,
) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let [c1, c2, c3, c4] = params.coefficients;
    let n = positions.len();
    let mut new_pos = Vec::with_capacity(n);
    let mut new_vel = Vec::with_capacity(n);
    for i in 0..n {
        let p = positions[i];
        let mut centroid = [0.0; 2];
        let mut align = [0.0; 2];
        let mut away = [0.0; 2];
        let (mut n_local, mut n_close) = (0usize, 0usize);
        for j in (0..n).filter(|&j| j != i) {
            let d = dist(p, positions[j]);
            if d < params.cohesion_radius {
                n_local += 1;
                centroid[0] += positions[j][0];
                centroid[1] += positions[j][1];
                align[0] += velocities[j][0];
                align[1] += velocities[j][1];
            }
            if d < params.separation_radius {
                n_close += 1;
                away[0] += p[0] - positions[j][0];
                away[1] += p[1] - positions[j][1];
            }
        }
        let (v_coh, v_ali) = if n_local > 0 {
            let m = n_local as f64;
            (
                unit([centroid[0] / m - p[0], centroid[1] / m - p[1]]),
                [align[0] / m, align[1] / m],
            )
        } else {
            ([0.0; 2], [0.0; 2])
        };
        let v_sep = if n_close > 0 { unit(away) } else { [0.0; 2] };
        let v_ori = unit([-p[0], -p[1]]);
        let v = velocities[i];
        let mut nv = [0.0; 2];
        for a in 0..2 {
            nv[a] = beta * v[a] + beta * (c1 * v_coh[a] + c2 * v_sep[a] + c3 * v_ali[a] + c4 * v_ori[a]);
        }
        if let Some(max) = params.max_speed {
            let speed = (nv[0] * nv[0] + nv[1] * nv[1]).sqrt();
            if speed > max {
                nv = [nv[0] * max / speed, nv[1] * max / speed];
            }
        }
        new_pos.push([p[0] + params.dt * nv[0], p[1] + params.dt * nv[1]]);
        new_vel.push(nv);
    }
    (new_pos, new_vel)
}

/// One simulated trajectory with its generating parameters.
#[derive(Debug, Clone)]
pub struct BoidsRun {
    pub trajectory: Trajectory,
    pub friendly: bool,
    /// `beta` used for the step from frame `t` to `t + 1`.
    pub betas: Vec<f64>,
}

/// Simulates one trajectory. Stored states are rounded to `f32` precision so
/// they survive the dataset file format unchanged.
pub fn simulate_boids(params: &BoidsParams, rng: &mut impl Rng) -> Result<BoidsRun> {
    params.validate()?;
    let friendly = rng.gen_bool(0.5);
    let mut p = params.clone();
    p.coefficients[0] = if friendly { 1.0 } else { -1.0 };

    let mut pos = p.initial_positions();
    let mut vel: Vec<[f64; 2]> = (0..p.agents)
        .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect();
    let mut states = Vec::with_capacity(p.frames * p.agents * 2);
    let push = |states: &mut Vec<f64>, pos: &[[f64; 2]]| {
        for q in pos {
            states.push(q[0] as f32 as f64);
            states.push(q[1] as f32 as f64);
        }
    };
    push(&mut states, &pos);
    let mut betas = Vec::with_capacity(p.frames - 1);
    let mut beta = 0.0;
    for t in 0..p.frames - 1 {
        if t % p.beta_period == 0 {
            beta = rng.gen_range(p.beta_range.0..p.beta_range.1);
        }
        betas.push(beta);
        (pos, vel) = boids_step(&pos, &vel, beta, &p);
        push(&mut states, &pos);
    }
    let trajectory = Trajectory::new(Domain::Boids, p.frames, p.agents, 2, states)?;
    Ok(BoidsRun { trajectory, friendly, betas })
}

/// Generated train/test splits plus the ground-truth behavior type of each
/// trajectory (`true` when `c1 > 0`).
#[derive(Debug, Clone)]
pub struct GeneratedBoids {
    pub train: Dataset,
    pub test: Dataset,
    pub train_friendly: Vec<bool>,
    pub test_friendly: Vec<bool>,
}

fn trajectory_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    rng.set_stream((tag << 40) | index as u64);
    rng
}

/// Generates both splits. Each trajectory draws from its own RNG stream
/// derived from `(seed, split, index)`, so the output is a pure function of
/// `(params, seed)` regardless of generation order.
pub fn generate_boids_dataset(params: &BoidsParams, n_train: usize, n_test: usize, seed: u64) -> Result<GeneratedBoids> {
    params.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(DatasetError::InvalidParams("split sizes must be positive".into()));
    }
    let run = |split: Split, n: usize| -> Result<(Vec<Trajectory>, Vec<bool>)> {
        let mut trajs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let r = simulate_boids(params, &mut trajectory_rng(seed, split, i))?;
            trajs.push(r.trajectory);
            labels.push(r.friendly);
        }
        Ok((trajs, labels))
    };
    let (train, train_friendly) = run(Split::Train, n_train)?;
    let (test, test_friendly) = run(Split::Test, n_test)?;
    let stats = NormStats::from_trajectories(&train)?;
    Ok(GeneratedBoids {
        train: Dataset::new(Domain::Boids, Split::Train, stats.clone(), train)?,
        test: Dataset::new(Domain::Boids, Split::Test, stats, test)?,
        train_friendly,
        test_friendly,
    })
}
