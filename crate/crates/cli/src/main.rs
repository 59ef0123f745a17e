use anyhow::{bail, Context, Result};
use candle_core::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};
use mstraj_core::dataset::{
    generate_boids_dataset, load_dataset, load_sidecar_labels, save_dataset, save_sidecar_labels, BoidsParams, CourtGeometry, Dataset,
};
use mstraj_core::evaluation::{
    bimodality_score, closest_neighbor_scores, domain_stats, rollout, Bounds, GroundingSpan, Histogram, OobMode,
    RolloutRequest, RolloutResult, DEFAULT_BURNIN, DEFAULT_HORIZON,
};
use mstraj_core::labeling::{calibrate_boids_threshold, load_labels, save_labels, LabelingFunctionSpec, MacroIntentSequence};
use mstraj_core::models::ModelCheckpoint;
use mstraj_core::training::{train, EpochReport, TrainConfig, TrainData};
use mstraj_core::{Domain, Model, ModelConfig, Trajectory, Variant};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mstraj", version, about = "Multi-agent trajectory models with programmatic macro-intent labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate Boids train/test datasets with friendly/hostile sidecars.
    GenBoids(GenBoids),
    /// Apply a labeling function to every trajectory of a dataset.
    Label(Label),
    /// Pick the boids-neighbor threshold that best recovers the sidecar labels.
    CalibrateBoids(Calibrate),
    /// Train a model and write a checkpoint directory.
    Train(Box<TrainArgs>),
    /// Generate rollouts from a burn-in taken from a dataset.
    Rollout(RolloutArgs),
    /// Average speed, distance and out-of-bounds rate.
    EvalStats(EvalStats),
    /// Histogram of per-trajectory closest-neighbor distances.
    EvalHist(EvalHist),
    /// Run the HTTP inference service.
    Serve(Serve),
}

#[derive(Args)]
struct GenBoids {
    #[arg(long, default_value_t = 32768)]
    train: usize,
    #[arg(long, default_value_t = 4096)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum LfKind {
    Window,
    Stationary,
    BoidsNeighbor,
}

#[derive(Args)]
struct Label {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    kind: LfKind,
    #[arg(long, default_value_t = 25)]
    window: usize,
    /// Feet per frame.
    #[arg(long, default_value_t = 0.25)]
    speed_threshold: f64,
    #[arg(long)]
    distance_threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Calibrate {
    #[arg(long)]
    data: PathBuf,
    /// JSON array of 0/1 per trajectory.
    #[arg(long)]
    friendly: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Calibrate on the first frames only (the burn-in length).
    #[arg(long)]
    prefix: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    variant: Variant,
    #[arg(long)]
    data: PathBuf,
    /// Macro-intent labels; required by the hierarchical model.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total epochs, counting any already completed by `--resume`.
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long = "batch", alias = "batch-size", default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    #[arg(long)]
    rnn_width: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    mlp_width: Option<usize>,
    #[arg(long)]
    macro_width: Option<usize>,
    #[arg(long)]
    lambda_mi: Option<f64>,
}

#[derive(Args)]
struct RolloutArgs {
    /// Checkpoint directory.
    #[arg(long = "ckpt", alias = "model")]
    model: PathBuf,
    /// Dataset holding the burn-in trajectory.
    #[arg(long = "burnin-file", alias = "data")]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value_t = DEFAULT_BURNIN)]
    burnin: usize,
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    horizon: usize,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Macro-intent labels for the burn-in frames, taken from this file.
    #[arg(long)]
    burnin_labels: Option<PathBuf>,
    /// `t_start:t_end,agent,category`; may be repeated.
    #[arg(long = "ground")]
    ground: Vec<GroundingSpan>,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("input").required(true))]
struct EvalStats {
    #[arg(long, group = "input")]
    data: Option<PathBuf>,
    /// JSON written by `rollout`.
    #[arg(long, group = "input")]
    rollouts: Option<PathBuf>,
    /// `x_min,x_max,y_min,y_max`; defaults to the half court.
    #[arg(long, value_parser = parse_bounds, allow_hyphen_values = true)]
    bounds: Option<Bounds>,
    #[arg(long, value_enum, default_value = "agent-frames")]
    oob: Oob,
}

#[derive(Clone, Copy, ValueEnum)]
enum Oob {
    AgentFrames,
    Frames,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("inputs").required(true).multiple(true))]
struct EvalHist {
    /// Dataset files; may be repeated. All histograms share their bins.
    #[arg(long, group = "inputs")]
    data: Vec<PathBuf>,
    /// Rollout files; may be repeated.
    #[arg(long, group = "inputs")]
    rollouts: Vec<PathBuf>,
    #[arg(long, default_value_t = 30)]
    bins: usize,
    /// Upper edge; defaults to 1.5 x the largest value.
    #[arg(long)]
    max: Option<f64>,
    /// Report the mass on each side of this distance.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct Serve {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: std::net::SocketAddr,
    #[arg(long)]
    checkpoints: PathBuf,
    #[arg(long)]
    burnins: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    burnins_per_file: usize,
    #[arg(long, default_value_t = 4)]
    max_concurrent: usize,
    #[arg(long, default_value_t = 256)]
    cache: usize,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
}

fn parse_bounds(s: &str) -> Result<Bounds, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<Result<_, _>>()?;
    let arr: [f64; 4] = v.try_into().map_err(|_| "expected four comma-separated numbers".to_string())?;
    let b = Bounds::from_array(arr);
    b.validate().map_err(|e| e.to_string())?;
    Ok(b)
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn friendly_flags(path: &Path) -> Result<Vec<bool>> {
    Ok(load_sidecar_labels(path).with_context(|| format!("reading {}", path.display()))?.into_iter().map(|v| v != 0).collect())
}

fn gen_boids(a: GenBoids) -> Result<()> {
    let gen = generate_boids_dataset(&BoidsParams { frames: a.frames, ..BoidsParams::default() }, a.train, a.test, a.seed)?;
    std::fs::create_dir_all(&a.out_dir)?;
    for (name, ds, friendly) in [("train", &gen.train, &gen.train_friendly), ("test", &gen.test, &gen.test_friendly)] {
        save_dataset(ds, a.out_dir.join(format!("boids-{name}.mstraj")))?;
        let flags: Vec<u8> = friendly.iter().map(|&f| u8::from(f)).collect();
        save_sidecar_labels(&flags, a.out_dir.join(format!("boids-{name}.friendly.json")))?;
    }
    eprintln!("wrote {} train and {} test trajectories to {}", a.train, a.test, a.out_dir.display());
    Ok(())
}

fn label(a: Label) -> Result<()> {
    let ds = load(&a.data)?;
    let spec = match a.kind {
        LfKind::Window => LabelingFunctionSpec::Window { window: a.window },
        LfKind::Stationary => LabelingFunctionSpec::Stationary { speed_threshold: a.speed_threshold },
        LfKind::BoidsNeighbor => LabelingFunctionSpec::BoidsNeighbor {
            distance_threshold: a.distance_threshold.context("--distance-threshold is required (see calibrate-boids)")?,
        },
    };
    let court = CourtGeometry::default();
    let seqs = ds.trajectories().iter().map(|t| spec.apply(t, &court)).collect::<Result<Vec<_>, _>>()?;
    save_labels(&seqs, Some(serde_json::to_value(&spec)?), &a.out)?;
    eprintln!("labeled {} trajectories into {}", seqs.len(), a.out.display());
    Ok(())
}

fn calibrate(a: Calibrate) -> Result<()> {
    let ds = load(&a.data)?;
    let friendly = friendly_flags(&a.friendly)?;
    let trajs: Vec<Trajectory> = match a.prefix {
        Some(n) => ds.trajectories().iter().map(|t| t.prefix(n)).collect::<Result<_, _>>()?,
        None => ds.trajectories().to_vec(),
    };
    write_json(None, &calibrate_boids_threshold(&trajs, &friendly, a.steps)?)
}

fn load_label_file(path: &Option<PathBuf>) -> Result<Option<Vec<MacroIntentSequence>>> {
    path.as_ref().map(|p| load_labels(p).with_context(|| format!("reading labels {}", p.display()))).transpose()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let labels = load_label_file(&a.labels)?;
    let test = a.test_data.as_deref().map(load).transpose()?;
    let test_labels = load_label_file(&a.test_labels)?;
    let (mut model, resume) = match &a.resume {
        Some(dir) => {
            let ck = ModelCheckpoint::load(dir)?;
            (Model::from_checkpoint(&ck, DType::F32)?, ck.training)
        }
        None => {
            let (_, k, d) = ds.shape().context("empty dataset")?;
            let mut cfg = ModelConfig::new(a.variant, ds.domain);
            cfg.agents = k;
            cfg.dim = d;
            if let Some(seqs) = &labels {
                cfg.macro_categories = seqs.first().map_or(0, |s| s.categories());
            }
            cfg.rnn_width = a.rnn_width.unwrap_or(cfg.rnn_width);
            cfg.latent_dim = a.latent_dim.unwrap_or(cfg.latent_dim);
            cfg.mlp_width = a.mlp_width.unwrap_or(cfg.mlp_width);
            cfg.macro_width = a.macro_width.unwrap_or(cfg.macro_width);
            (Model::build(&cfg, ds.stats.clone(), a.seed, DType::F32)?, None)
        }
    };
    let tc = TrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        clip_norm: Some(a.clip_norm),
        seed: a.seed,
        eval_every: if test.is_some() { a.eval_every } else { 0 },
        lambda_mi: a.lambda_mi,
        ..TrainConfig::default()
    };
    let data = TrainData { train: &ds, train_labels: labels.as_deref(), test: test.as_ref(), test_labels: test_labels.as_deref() };
    let (ck, report) = train(&mut model, &data, &tc, resume.as_ref(), |e: &EpochReport| {
        eprintln!("{}", serde_json::to_string(e).expect("reports serialize"));
    })?;
    ck.save(&a.out)?;
    write_json(None, &report)
}

/// What `rollout` writes and `eval-*` read back.
#[derive(Serialize, Deserialize)]
struct RolloutFile {
    domain: Domain,
    request: RolloutRequest,
    results: Vec<RolloutResult>,
}

fn rollout_cmd(a: RolloutArgs) -> Result<()> {
    let model = Model::from_checkpoint(&ModelCheckpoint::load(&a.model)?, DType::F32)?;
    let ds = load(&a.data)?;
    let traj = ds.trajectories().get(a.index).with_context(|| format!("index {} outside the {} trajectories", a.index, ds.len()))?;
    let mut req = RolloutRequest::from_trajectory(traj, a.burnin, a.horizon, a.samples, a.seed)?;
    req.grounding = a.ground;
    if let Some(seqs) = load_label_file(&a.burnin_labels)? {
        let g = seqs.get(a.index).context("label file has fewer sequences than the dataset")?;
        if g.len() < a.burnin {
            bail!("labels cover {} frames, burn-in needs {}", g.len(), a.burnin);
        }
        req.burnin_macro = Some((0..a.burnin).map(|t| (0..g.agents()).map(|k| g.get(t, k)).collect()).collect());
    }
    let results = rollout(&model, &req)?;
    write_json(a.out.as_deref(), &RolloutFile { domain: model.config.domain, request: req, results })
}

/// The generated samples of a rollout file.
fn read_rollouts(path: &Path) -> Result<Vec<Trajectory>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: RolloutFile = serde_json::from_str(&text).with_context(|| format!("{} is not a rollout file", path.display()))?;
    Ok(file.results.iter().map(|r| r.to_trajectory(file.domain)).collect::<Result<_, _>>()?)
}

fn eval_stats(a: EvalStats) -> Result<()> {
    let trajs = match (&a.data, &a.rollouts) {
        (Some(d), _) => load(d)?.into_trajectories(),
        (None, Some(r)) => read_rollouts(r)?,
        (None, None) => unreachable!("clap requires one input"),
    };
    let mode = match a.oob {
        Oob::AgentFrames => OobMode::AgentFrames,
        Oob::Frames => OobMode::Frames,
    };
    write_json(None, &domain_stats(&trajs, &a.bounds.unwrap_or_else(Bounds::half_court), mode)?)
}

fn eval_hist(a: EvalHist) -> Result<()> {
    let mut inputs = Vec::new();
    let mut scores = Vec::new();
    for p in &a.data {
        scores.push(closest_neighbor_scores(load(p)?.trajectories())?);
        inputs.push(p);
    }
    for p in &a.rollouts {
        scores.push(closest_neighbor_scores(&read_rollouts(p)?)?);
        inputs.push(p);
    }
    let hi = a.max.unwrap_or_else(|| 1.5 * scores.iter().flatten().copied().fold(0.0, f64::max));
    let edges = Histogram::uniform_edges(0.0, hi, a.bins)?;
    let mut out = Vec::new();
    let mut hists = Vec::new();
    for (p, s) in inputs.iter().zip(&scores) {
        let h = Histogram::from_values(s, edges.clone())?;
        let mut entry = serde_json::json!({ "input": p, "histogram": h });
        if let Some(t) = a.threshold {
            entry["bimodality"] = serde_json::to_value(bimodality_score(&h, t))?;
        }
        out.push(entry);
        hists.push(h);
    }
    if let Some(svg) = &a.svg {
        std::fs::write(svg, render_svg(&hists, a.threshold))?;
    }
    write_json(None, &out)
}

/// Overlaid step outlines of normalized histograms.
fn render_svg(hists: &[Histogram], threshold: Option<f64>) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 30.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let edges = &hists[0].edges;
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    let top = hists.iter().flat_map(|h| h.normalized()).fold(1e-12, f64::max);
    let sx = |v: f64| PAD + (v - lo) / (hi - lo) * (W - 2.0 * PAD);
    let sy = |m: f64| H - PAD - m / top * (H - 2.0 * PAD);
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n");
    svg += &format!("<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n", H - PAD, W - PAD);
    for (i, h) in hists.iter().enumerate() {
        let mut pts = format!("{:.1},{:.1}", sx(lo), sy(0.0));
        for (w, m) in h.edges.windows(2).zip(h.normalized()) {
            pts += &format!(" {:.1},{:.1} {:.1},{:.1}", sx(w[0]), sy(m), sx(w[1]), sy(m));
        }
        pts += &format!(" {:.1},{:.1}", sx(hi), sy(0.0));
        svg += &format!("<polyline points=\"{pts}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n", COLORS[i % COLORS.len()]);
    }
    if let Some(t) = threshold {
        svg += &format!("<line x1=\"{0:.1}\" y1=\"{PAD}\" x2=\"{0:.1}\" y2=\"{1}\" stroke=\"gray\" stroke-dasharray=\"4\"/>\n", sx(t), H - PAD);
    }
    svg + "</svg>\n"
}

fn serve(a: Serve) -> Result<()> {
    let config = mstraj_service::ServiceConfig {
        listen: a.listen,
        checkpoint_dir: a.checkpoints,
        burnin_dir: a.burnins,
        burnins_per_file: a.burnins_per_file,
        max_concurrent_rollouts: a.max_concurrent,
        cache_capacity: a.cache,
        ..Default::default()
    };
    eprintln!("listening on {}", config.listen);
    tokio::runtime::Runtime::new()?.block_on(mstraj_service::serve(config))?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenBoids(a) => gen_boids(a),
        Command::Label(a) => label(a),
        Command::CalibrateBoids(a) => calibrate(a),
        Command::Train(a) => train_cmd(*a),
        Command::Rollout(a) => rollout_cmd(a),
        Command::EvalStats(a) => eval_stats(a),
        Command::EvalHist(a) => eval_hist(a),
        Command::Serve(a) => serve(a),
    }
}
