//! Burn-in rollouts with optional macro-intent grounding.
//!
//! All samples of one request run as a single batch driven by one
//! `ChaCha8Rng` seeded with the request seed. Per timestep the draws happen
//! in a fixed order (macro-intents, latents, states), so a request and its
//! seed fully determine the result.

use super::{EvalError, Result};
use crate::dataset::Trajectory;
use crate::models::{normal_noise, reparam_sample, GaussianParams, Model};
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_BURNIN: usize = 10;
pub const DEFAULT_HORIZON: usize = 40;

/// Fixes agent `agent`'s macro-intent to `category` on frames
/// `t_start..t_end` (half-open, counted from the first burn-in frame).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingSpan {
    pub t_start: usize,
    pub t_end: usize,
    pub agent: usize,
    pub category: u16,
}

/// Parses the compact form `t_start:t_end,agent,category`.
impl std::str::FromStr for GroundingSpan {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [span, agent, category] = parts[..] else {
            return Err(format!("expected \"t_start:t_end,agent,category\", got {s:?}"));
        };
        let (a, b) = span.split_once(':').ok_or_else(|| format!("span {span:?} is not of the form t_start:t_end"))?;
        let num = |v: &str, what: &str| v.trim().parse::<usize>().map_err(|_| format!("{what} {v:?} is not a non-negative integer"));
        let category = num(category, "category")?;
        Ok(Self {
            t_start: num(a, "t_start")?,
            t_end: num(b, "t_end")?,
            agent: num(agent, "agent")?,
            category: u16::try_from(category).map_err(|_| format!("category {category} is too large"))?,
        })
    }
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

fn default_samples() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRequest {
    /// Unnormalized burn-in states, frames x agents x dim.
    pub burnin: Vec<Vec<Vec<f64>>>,
    /// Observed macro-intents for the burn-in frames (frames x agents).
    /// Without them the macro-intent model samples during burn-in as well.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burnin_macro: Option<Vec<Vec<u16>>>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub grounding: Vec<GroundingSpan>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub seed: u64,
}

impl RolloutRequest {
    /// Request whose burn-in is the first `burnin` frames of `traj`.
    pub fn from_trajectory(traj: &Trajectory, burnin: usize, horizon: usize, samples: usize, seed: u64) -> Result<Self> {
        if burnin == 0 || burnin > traj.len() {
            return Err(EvalError::Invalid(format!("burn-in length {burnin} outside 1..={}", traj.len())));
        }
        Ok(Self { burnin: nested_frames(traj, burnin), burnin_macro: None, horizon, grounding: Vec::new(), samples, seed })
    }

    pub fn total_frames(&self) -> usize {
        self.burnin.len() + self.horizon
    }
}

/// The first `frames` frames of `traj` as frames x agents x dim.
pub fn nested_frames(traj: &Trajectory, frames: usize) -> Vec<Vec<Vec<f64>>> {
    (0..frames).map(|t| (0..traj.agents()).map(|k| traj.state(t, k).to_vec()).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub sample: usize,
    /// Unnormalized states, frames x agents x dim. The burn-in prefix is a
    /// copy of the request's values.
    pub trajectory: Vec<Vec<Vec<f64>>>,
    /// Output distribution of every frame in unnormalized units (burn-in
    /// frames use posterior latents).
    pub output_mean: Vec<Vec<Vec<f64>>>,
    pub output_log_var: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_intents: Option<Vec<Vec<u16>>>,
    /// Macro-intent model probabilities at every frame (frames x agents x C).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub macro_probs: Option<Vec<Vec<Vec<f64>>>>,
    /// Frames x agents; true where the macro-intent came from grounding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounded: Option<Vec<Vec<bool>>>,
    /// Trajectory latent of a vrae-mi rollout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<f64>>,
}

impl RolloutResult {
    pub fn to_trajectory(&self, domain: crate::dataset::Domain) -> Result<Trajectory> {
        let t_len = self.trajectory.len();
        let k = self.trajectory[0].len();
        let d = self.trajectory[0][0].len();
        let states = self.trajectory.iter().flatten().flatten().copied().collect();
        Trajectory::new(domain, t_len, k, d, states).map_err(|e| EvalError::Invalid(e.to_string()))
    }
}

fn field(pointer: impl Into<String>, message: impl Into<String>) -> EvalError {
    EvalError::Request { pointer: pointer.into(), message: message.into() }
}

/// Checks a request against a model configuration; errors carry a JSON
/// pointer to the offending field.
pub fn validate_request(model: &Model, req: &RolloutRequest) -> Result<()> {
    let cfg = &model.config;
    if req.burnin.is_empty() {
        return Err(field("/burnin", "at least one burn-in frame is required"));
    }
    for (t, frame) in req.burnin.iter().enumerate() {
        if frame.len() != cfg.agents {
            return Err(field(format!("/burnin/{t}"), format!("expected {} agents, got {}", cfg.agents, frame.len())));
        }
        for (k, s) in frame.iter().enumerate() {
            if s.len() != cfg.dim {
                return Err(field(format!("/burnin/{t}/{k}"), format!("expected {} coordinates, got {}", cfg.dim, s.len())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(field(format!("/burnin/{t}/{k}"), "coordinates must be finite"));
            }
        }
    }
    if req.horizon == 0 {
        return Err(field("/horizon", "horizon must be at least 1"));
    }
    if req.samples == 0 {
        return Err(field("/samples", "samples must be at least 1"));
    }
    let total = req.total_frames();
    if !cfg.is_hierarchical() {
        if !req.grounding.is_empty() {
            return Err(field("/grounding", format!("grounding needs a hierarchical model, this one is {}", cfg.variant)));
        }
        if req.burnin_macro.is_some() {
            return Err(field("/burnin_macro", format!("macro-intents need a hierarchical model, this one is {}", cfg.variant)));
        }
    }
    for (i, s) in req.grounding.iter().enumerate() {
        if s.agent >= cfg.agents {
            return Err(field(format!("/grounding/{i}/agent"), format!("agent {} outside 0..{}", s.agent, cfg.agents)));
        }
        if s.category as usize >= cfg.macro_categories {
            return Err(field(format!("/grounding/{i}/category"), format!("category {} outside 0..{}", s.category, cfg.macro_categories)));
        }
        if s.t_start >= s.t_end || s.t_end > total {
            return Err(field(format!("/grounding/{i}/t_end"), format!("span {}..{} must be non-empty and within 0..{total}", s.t_start, s.t_end)));
        }
    }
    if let Some(m) = &req.burnin_macro {
        if m.len() != req.burnin.len() {
            return Err(field("/burnin_macro", format!("expected {} frames, got {}", req.burnin.len(), m.len())));
        }
        for (t, row) in m.iter().enumerate() {
            if row.len() != cfg.agents {
                return Err(field(format!("/burnin_macro/{t}"), format!("expected {} agents", cfg.agents)));
            }
            if let Some(k) = row.iter().position(|&c| c as usize >= cfg.macro_categories) {
                return Err(field(format!("/burnin_macro/{t}/{k}"), format!("category outside 0..{}", cfg.macro_categories)));
            }
        }
    }
    Ok(())
}

fn sample_categorical(p: &[f64], u: f64) -> u16 {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i as u16;
        }
    }
    // rounding left u above the cumulative sum: take the last category with mass
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1) as u16
}

struct Recorder {
    n: usize,
    k: usize,
    d: usize,
    scale: Vec<f64>,
    shift: Vec<f64>,
    states: Vec<Vec<f64>>,
    mean: Vec<Vec<f64>>,
    log_var: Vec<Vec<f64>>,
}

impl Recorder {
    /// Appends one frame of `[n, K*d]` normalized values.
    fn push(&mut self, x: Option<&Tensor>, out: &GaussianParams, joint: impl Fn(&Tensor) -> candle_core::Result<Tensor>) -> Result<()> {
        let w = self.k * self.d;
        let m = joint(&out.mean)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let lv = joint(&out.log_var)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let xs = x.map(|x| x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()).transpose()?;
        for i in 0..self.n {
            for j in 0..w {
                let (s, c) = (self.scale[j % self.d], self.shift[j % self.d]);
                self.mean[i].push(m[i * w + j] * s + c);
                self.log_var[i].push(lv[i * w + j] + 2.0 * s.ln());
                if let Some(xs) = &xs {
                    self.states[i].push(xs[i * w + j] * s + c);
                }
            }
        }
        Ok(())
    }
}

fn nest(flat: &[f64], k: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    flat.chunks(k * d).map(|f| f.chunks(d).map(|s| s.to_vec()).collect()).collect()
}

/// Runs `req.samples` rollouts of `model`.
pub fn rollout(model: &Model, req: &RolloutRequest) -> Result<Vec<RolloutResult>> {
    validate_request(model, req)?;
    let cfg = &model.config;
    let (k, d, n) = (cfg.agents, cfg.dim, req.samples);
    let w = k * d;
    let b = req.burnin.len();
    let total = req.total_frames();
    let dtype = model.dtype();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);

    let burn: Vec<Tensor> = req
        .burnin
        .iter()
        .map(|frame| {
            let v: Vec<f64> = frame.iter().flat_map(|s| s.iter().enumerate().map(|(j, x)| (x - model.norm.mean[j]) / model.norm.scale[j])).collect();
            let row = Tensor::from_vec(v, (1, w), &Device::Cpu)?.to_dtype(dtype)?;
            row.broadcast_as((n, w))?.contiguous()
        })
        .collect::<candle_core::Result<_>>()?;

    let mut overrides = vec![vec![None::<u16>; k]; total];
    for s in &req.grounding {
        for row in overrides.iter_mut().take(s.t_end).skip(s.t_start) {
            row[s.agent] = Some(s.category);
        }
    }

    let mut rec = Recorder {
        n,
        k,
        d,
        scale: model.norm.scale.clone(),
        shift: model.norm.mean.clone(),
        states: vec![Vec::with_capacity(total * w); n],
        mean: vec![Vec::with_capacity(total * w); n],
        log_var: vec![Vec::with_capacity(total * w); n],
    };
    let mut macro_used = vec![Vec::with_capacity(total); n];
    let mut macro_probs = vec![Vec::with_capacity(total); n];
    let mut latent = None;

    if let Some(v) = model.vrae() {
        let z = v.sample_prior(n, &mut rng)?;
        latent = Some(z.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        let mut st = v.decoder_state(n)?;
        for t in 0..total {
            let out = v.decode_step(&st, &z)?;
            let x = if t < b {
                burn[t].clone()
            } else {
                v.joint_view(&reparam_sample(&out, &normal_noise(&mut rng, out.mean.dims(), dtype)?)?)?
            };
            rec.push(if t < b { None } else { Some(&x) }, &out, |t| v.joint_view(t))?;
            st = v.advance(&st, &x)?;
        }
    } else {
        let agent = model.agent().expect("agent model");
        let mm = model.macro_model();
        let c = cfg.macro_categories;
        let mut st = agent.zero_state(n)?;
        let mut ms = mm.map(|m| m.zero_state(n)).transpose()?;
        for t in 0..total {
            let g = match (mm, &ms) {
                (Some(m), Some(state)) => {
                    let probs = m.probs(state)?.to_dtype(DType::F64)?.to_vec3::<f64>()?;
                    let mut onehot = vec![0.0f64; n * k * c];
                    for i in 0..n {
                        let mut row = Vec::with_capacity(k);
                        for a in 0..k {
                            let label = match (overrides[t][a], &req.burnin_macro) {
                                (Some(gc), _) => gc,
                                (None, Some(bm)) if t < b => bm[t][a],
                                _ => sample_categorical(&probs[i][a], rng.gen::<f64>()),
                            };
                            onehot[(i * k + a) * c + label as usize] = 1.0;
                            row.push(label);
                        }
                        macro_used[i].push(row);
                        macro_probs[i].push(probs[i].clone());
                    }
                    Some(Tensor::from_vec(onehot, (n, k * c), &Device::Cpu)?.to_dtype(dtype)?)
                }
                _ => None,
            };
            let (z, out, x) = if t < b {
                let x = burn[t].clone();
                let z = match agent.encode(&x, &st)? {
                    Some(q) => Some(reparam_sample(&q, &normal_noise(&mut rng, &agent.latent_shape(n), dtype)?)?),
                    None => None,
                };
                let out = agent.decode(z.as_ref(), &st, g.as_ref())?;
                (z, out, x)
            } else {
                let z = match agent.prior(&st)? {
                    Some(p) => Some(reparam_sample(&p, &normal_noise(&mut rng, &agent.latent_shape(n), dtype)?)?),
                    None => None,
                };
                let out = agent.decode(z.as_ref(), &st, g.as_ref())?;
                let x = agent.joint_view(&reparam_sample(&out, &normal_noise(&mut rng, out.mean.dims(), dtype)?)?)?;
                (z, out, x)
            };
            rec.push(if t < b { None } else { Some(&x) }, &out, |t| agent.joint_view(t))?;
            st = agent.recurrence(&x, z.as_ref(), &st)?;
            if let (Some(m), Some(state), Some(g)) = (mm, &ms, &g) {
                ms = Some(m.advance(state, g, &x)?);
            }
        }
    }

    let hierarchical = cfg.is_hierarchical();
    let grounded: Vec<Vec<bool>> = overrides.iter().map(|row| row.iter().map(Option::is_some).collect()).collect();
    let mut results = Vec::with_capacity(n);
    for i in 0..n {
        let mut trajectory = req.burnin.clone();
        trajectory.extend(nest(&rec.states[i], k, d));
        for frame in &trajectory[b..] {
            if frame.iter().flatten().any(|v| !v.is_finite()) {
                return Err(EvalError::Model(crate::models::ModelError::NonFinite { step: b, quantity: "generated state" }));
            }
        }
        results.push(RolloutResult {
            sample: i,
            trajectory,
            output_mean: nest(&rec.mean[i], k, d),
            output_log_var: nest(&rec.log_var[i], k, d),
            macro_intents: hierarchical.then(|| macro_used[i].clone()),
            macro_probs: hierarchical.then(|| macro_probs[i].clone()),
            grounded: hierarchical.then(|| grounded.clone()),
            latent: latent.as_ref().map(|z| z[i].clone()),
        });
    }
    Ok(results)
}

fn add_macro_counts(counts: &mut [Vec<f64>], results: &[RolloutResult], from: usize) -> Result<()> {
    for r in results {
        let (used, grounded) = match (&r.macro_intents, &r.grounded) {
            (Some(u), Some(g)) => (u, g),
            _ => return Err(EvalError::Invalid("rollouts carry no macro-intents".into())),
        };
        for t in from..used.len() {
            for (a, row) in counts.iter_mut().enumerate() {
                if !grounded[t][a] {
                    row[used[t][a] as usize] += 1.0;
                }
            }
        }
    }
    Ok(())
}

fn normalize_rows(counts: &mut [Vec<f64>]) {
    for row in counts.iter_mut() {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// Per-agent frequencies of the macro-intents chosen at frames `from..`,
/// counting only entries that were not grounded.
pub fn count_generated_macros(results: &[RolloutResult], categories: usize, from: usize) -> Result<Vec<Vec<f64>>> {
    let first = results.first().ok_or_else(|| EvalError::Invalid("no rollouts".into()))?;
    let mut counts = vec![vec![0.0; categories]; first.trajectory[0].len()];
    add_macro_counts(&mut counts, results, from)?;
    normalize_rows(&mut counts);
    Ok(counts)
}

/// Runs each request and reports per-agent frequencies of the sampled
/// macro-intents over the generated frames.
pub fn macro_generation_distribution(model: &Model, requests: &[RolloutRequest]) -> Result<Vec<Vec<f64>>> {
    if !model.config.is_hierarchical() {
        return Err(EvalError::Invalid("macro-intent distribution needs a hierarchical model".into()));
    }
    if requests.is_empty() {
        return Err(EvalError::Invalid("no requests".into()));
    }
    let mut counts = vec![vec![0.0; model.config.macro_categories]; model.config.agents];
    for r in requests {
        add_macro_counts(&mut counts, &rollout(model, r)?, r.burnin.len())?;
    }
    normalize_rows(&mut counts);
    Ok(counts)
}
