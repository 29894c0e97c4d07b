use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use qmvos::evalsynth::{evaluate, gen_synthetic, LabelMap, Scenario};
use qmvos::formats::{read_frames, read_label_dir, read_pgm, write_frames, write_labels, write_masks};
use qmvos::pipeline::{bench_overhead, segment_video, train_toy, Video};
use qmvos::{gradsuite, NetWeights, RunConfig};
use tensorlab::Tensor;

#[derive(Parser)]
#[command(name = "qmvos", version, about = "Toy video object segmentation with memory readout and object queries")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-shapes video with ground-truth masks.
    Synth(SynthArgs),
    /// Train a network on one or more video directories.
    Train(TrainArgs),
    /// Propagate a first-frame mask through a video.
    Segment(SegmentArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable block.
    Gradcheck(GradcheckArgs),
    /// Time per-frame inference and the share spent in the query module.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    objects: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// `S` for S×S or `HxW`; sides must be multiples of 16.
    #[arg(long, default_value = "64", value_parser = parse_size)]
    size: (usize, usize),
    #[arg(long, default_value = "similar")]
    scenario: Scenario,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Video directory with frames.txt and masks.txt; repeatable.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Start from these weights instead of a fresh initialization.
    #[arg(long)]
    init_weights: Option<PathBuf>,
    #[arg(long)]
    out_weights: PathBuf,
    /// Loss curve path; defaults to `<out-weights>.loss.txt`.
    #[arg(long)]
    loss_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    first_mask: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Boundary matching radius in pixels; defaults to 0.8% of the diagonal.
    #[arg(long)]
    tol: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    video: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// First-frame annotation; defaults to the video's first mask.
    #[arg(long)]
    first_mask: Option<PathBuf>,
    /// Disable the query module (memory readout with a static head).
    #[arg(long)]
    baseline: bool,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Report path; defaults to `bench.json` inside the video directory's parent.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let num = |p: &str| p.trim().parse::<usize>().map_err(|_| format!("`{p}` is not a size"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((num(h)?, num(w)?)),
        None => num(s).map(|n| (n, n)),
    }
}

fn sidecar(weights: &Path, ext: &str) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// Explicit `--config`, else the weights' `.cfg` sidecar, else defaults; then `--set`.
fn resolve_config(args: &ConfigArgs, weights: Option<&Path>) -> Result<RunConfig> {
    let path = args
        .config
        .clone()
        .or_else(|| weights.map(|w| sidecar(w, ".cfg")).filter(|p| p.exists()));
    let mut cfg = match &path {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        cfg.set(k.trim(), v.trim()).context("--set")?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_frames(dir: &Path) -> Result<Vec<Tensor>> {
    let frames = read_frames(dir).with_context(|| format!("video {}", dir.display()))?;
    Ok(frames.iter().map(|f| f.to_tensor()).collect())
}

fn load_weights(path: &Path, cfg: &RunConfig) -> Result<NetWeights> {
    NetWeights::load(path, cfg).with_context(|| format!("weights {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let (h, w) = a.size;
    let v = gen_synthetic(a.seed, a.objects, a.frames, h, w, a.scenario)?;
    write_frames(&a.out, &v.frames)?;
    write_masks(&a.out, &v.masks)?;
    info!("wrote {} frames to {}", a.frames, a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.config, None)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(l) = a.seq_len {
        cfg.seq_len = l;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut videos = Vec::with_capacity(a.data.len());
    for dir in &a.data {
        let masks = read_label_dir(dir).with_context(|| format!("masks {}", dir.display()))?;
        videos.push(Video::new(load_frames(dir)?, masks).with_context(|| format!("video {}", dir.display()))?);
    }
    let init = match &a.init_weights {
        Some(p) => load_weights(p, &cfg)?,
        None => NetWeights::init(&cfg, cfg.seed)?,
    };
    let out = train_toy(&videos, init, &cfg)?;
    out.weights.save(&a.out_weights)?;
    cfg.save(sidecar(&a.out_weights, ".cfg"))?;
    let curve: String = out.losses.iter().enumerate().map(|(i, l)| format!("{i} {l:?}\n")).collect();
    let loss_path = a.loss_out.unwrap_or_else(|| sidecar(&a.out_weights, ".loss.txt"));
    fs::write(&loss_path, curve).with_context(|| format!("loss curve {}", loss_path.display()))?;
    if let (Some(first), Some(last)) = (out.losses.first(), out.losses.last()) {
        println!("trained {} steps: loss {first:.5} -> {last:.5}", out.losses.len());
    }
    Ok(())
}

fn segment(a: SegmentArgs) -> Result<()> {
    let cfg = resolve_config(&a.config, Some(&a.weights))?;
    let w = load_weights(&a.weights, &cfg)?;
    let frames = load_frames(&a.video)?;
    let first = read_pgm(&a.first_mask).with_context(|| format!("first mask {}", a.first_mask.display()))?;
    let r = segment_video(&frames, &first, &w, &cfg)?;
    write_labels(&a.out, &r.labels)?;
    info!("wrote {} label maps to {}", r.labels.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = read_label_dir(&a.pred).with_context(|| format!("predictions {}", a.pred.display()))?;
    let gt = read_label_dir(&a.gt).with_context(|| format!("ground truth {}", a.gt.display()))?;
    let report = evaluate(&pred, &gt, a.tol)?;
    fs::write(&a.report, report.to_json()).with_context(|| format!("report {}", a.report.display()))?;
    println!("J {:.4}  F {:.4}  J&F {:.4}", report.j, report.f, report.j_and_f);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let results = gradsuite::run(a.instances, a.seed)?;
    let mut ok = true;
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<28} {:>3} instances  max rel err {:.3e}  {verdict}", r.block, r.instances, r.max_rel_error);
        ok &= r.passed();
    }
    Ok(ok)
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.config, Some(&a.weights))?;
    if a.baseline {
        cfg.query_modulation = false;
    }
    let w = load_weights(&a.weights, &cfg)?;
    let frames = load_frames(&a.video)?;
    let first: LabelMap = match &a.first_mask {
        Some(p) => read_pgm(p).with_context(|| format!("first mask {}", p.display()))?,
        None => read_label_dir(&a.video)
            .with_context(|| format!("masks {}", a.video.display()))?
            .swap_remove(0),
    };
    let report = bench_overhead(&frames, &first, &w, &cfg, a.warmup, a.reps)?;
    let path = a.report.unwrap_or_else(|| {
        a.video
            .parent()
            .unwrap_or(Path::new("."))
            .join(if a.baseline { "bench_baseline.json" } else { "bench.json" })
    });
    fs::write(&path, report.to_json()).with_context(|| format!("report {}", path.display()))?;
    println!(
        "{:.2} ms/frame, query module {:.3} ms ({:.2}%)",
        report.per_frame_ms,
        report.querymod_ms,
        report.query_share * 100.0
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => train(a),
        Cmd::Segment(a) => segment(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check above threshold {:e}", gradsuite::THRESHOLD);
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Cmd::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
