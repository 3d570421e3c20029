use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use p2b_core::annotations::{
    generate_points, load_dataset, save_dataset, save_pseudo_boxes, Dataset, RGParams,
};
use p2b_core::geometry::BBox;
use p2b_core::losses_optim::{predict, train_p2bnet_with, EpochRecord, TrainConfig};
use p2b_core::merging_metrics::{
    balance_histogram, histogram, histogram_csv, miou_prop, pseudo_ious, MetricsReport, ScoreSource,
};
use p2b_core::mil_model::ModelParams;
use p2b_core::parallel::{init_thread_pool, Parallelism};
use p2b_core::proposal_sampler::{cbp_bag, pbr_bag, ProposalBag};
use p2b_core::synthetic_scenes::{generate_dataset, read_scenes, write_scenes, SceneConfig};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(
    name = "p2b",
    version,
    about = "Point-supervised pseudo-box pipeline on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its scene-grid sidecar.
    Synth(SynthArgs),
    /// Sample one quasi-center point per object.
    GenPoints(GenPointsArgs),
    /// Dump proposal/gt IoU values of every bag as CSV.
    Stats(StatsArgs),
    /// Train the cascade and write pseudo boxes.
    Train(TrainArgs),
    /// Run a trained checkpoint on a dataset.
    Predict(PredictArgs),
    /// Compare pseudo boxes against ground truth.
    Eval(EvalArgs),
}

/// Optional JSON config file; flags override its values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    scene: SceneConfig,
    points: RGParams,
    train: TrainConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("--config {}", path.display()))?;
        serde_json::from_str(&text)
            .with_context(|| format!("--config {}: invalid config", path.display()))
    }

    /// Writes the effective config next to `out` as `<out>.config.json`.
    fn echo(&self, out: &Path) -> Result<()> {
        let path = sidecar(out, "config.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".");
    name.push(suffix);
    PathBuf::from(name)
}

#[derive(Args)]
struct ConfigArg {
    /// JSON config with optional `scene`, `points` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output annotation file.
    #[arg(long)]
    out: PathBuf,
    /// Output scene-grid sidecar (default: `<out>.grid`).
    #[arg(long)]
    out_scenes: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    num_images: Option<usize>,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    noise_radius: Option<usize>,
}

#[derive(Args)]
struct GenPointsArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    ann: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Annotations with points.
    #[arg(long)]
    ann: PathBuf,
    /// Pseudo boxes to sample one refinement bag around.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    /// Final score `S = S_ins * S_cls`.
    Bag,
    /// Classification stream only.
    Cls,
}

impl From<Source> for ScoreSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Bag => ScoreSource::Bag,
            Source::Cls => ScoreSource::Cls,
        }
    }
}

#[derive(Args)]
struct MergeArgs {
    /// Proposals merged per bag.
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long, value_enum)]
    score_source: Option<Source>,
    /// Run on one thread without rayon.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    ann: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    /// Refinement iterations `T`; 0 trains the coarse stage only.
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    merge: MergeArgs,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    out_pseudo: PathBuf,
    /// Per-epoch metrics CSV (default: `<out-pseudo>.metrics.csv`).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    ann: PathBuf,
    #[arg(long)]
    scenes: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Refinement iterations to run (default: all heads in the checkpoint).
    #[arg(long)]
    stages: Option<usize>,
    #[command(flatten)]
    merge: MergeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Write the 50-bin IoU histogram as CSV.
    #[arg(long)]
    dump_hist: Option<PathBuf>,
}

fn load_ann(path: &Path, flag: &str) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("{flag} {}", path.display()))
}

fn apply_merge(cfg: &mut TrainConfig, args: &MergeArgs) {
    if let Some(k) = args.topk {
        cfg.merge.k = k;
    }
    if let Some(s) = args.score_source {
        cfg.merge.score_source = s.into();
    }
    if args.sequential {
        cfg.parallelism = Parallelism::Sequential;
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut run = RunConfig::load(args.config.config.as_deref())?;
    let scene = &mut run.scene;
    scene.seed = args.seed;
    if let Some(n) = args.num_images {
        scene.num_images = n;
    }
    if let Some(k) = args.categories {
        scene.num_categories = k;
    }
    if let Some(s) = args.noise_std {
        scene.noise_std = s;
    }
    if let Some(r) = args.noise_radius {
        scene.noise_radius = r;
    }
    let (ds, scenes) = generate_dataset(scene).context("synth")?;
    let grid = args
        .out_scenes
        .unwrap_or_else(|| sidecar(&args.out, "grid"));
    save_dataset(&ds, &args.out).with_context(|| format!("--out {}", args.out.display()))?;
    write_scenes(&scenes, &grid).with_context(|| format!("--out-scenes {}", grid.display()))?;
    run.echo(&args.out)?;
    println!(
        "{} images, {} objects -> {}, {}",
        ds.images.len(),
        ds.objects.len(),
        args.out.display(),
        grid.display()
    );
    Ok(())
}

fn cmd_gen_points(args: GenPointsArgs) -> Result<()> {
    let mut run = RunConfig::load(args.config.config.as_deref())?;
    if let Some(s) = args.sigma {
        run.points.sigma = s;
    }
    if let Some(k) = args.kappa {
        run.points.kappa = k;
    }
    let ds = load_ann(&args.ann, "--ann")?;
    let out = generate_points(&ds, &run.points, args.seed).context("gen-points")?;
    save_dataset(&out, &args.out).with_context(|| format!("--out {}", args.out.display()))?;
    run.echo(&args.out)?;
    println!("{} points -> {}", out.objects.len(), args.out.display());
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let run = RunConfig::load(args.config.config.as_deref())?;
    let sampler = &run.train.sampler;
    let ds = load_ann(&args.ann, "--ann")?;
    let mut stages: Vec<(String, Vec<ProposalBag>)> = Vec::new();
    let mut bags = Vec::with_capacity(ds.objects.len());
    for o in &ds.objects {
        let p = o
            .point
            .as_ref()
            .with_context(|| format!("--ann: annotation {} has no point", o.object_id))?;
        let shape = ds.image(o.image_id).context("image")?.shape;
        bags.push(cbp_bag(o.object_id, p, shape, sampler)?);
    }
    stages.push(("cbp".into(), bags));
    if let Some(pred) = &args.pred {
        let pseudo = boxes_by_id(&load_ann(pred, "--pred")?);
        let mut bags = Vec::with_capacity(ds.objects.len());
        for o in &ds.objects {
            let b = pseudo
                .get(&o.object_id)
                .with_context(|| format!("--pred: no box for annotation {}", o.object_id))?;
            let shape = ds.image(o.image_id).context("image")?.shape;
            bags.push(pbr_bag(o.object_id, b, shape, sampler, 1)?);
        }
        stages.push(("pbr1".into(), bags));
    }
    let gt: HashMap<u64, &BBox> = ds
        .objects
        .iter()
        .map(|o| (o.object_id, &o.gt_box))
        .collect();
    let image_of: HashMap<u64, u64> = ds
        .objects
        .iter()
        .map(|o| (o.object_id, o.image_id))
        .collect();
    let file = File::create(&args.out).with_context(|| format!("--out {}", args.out.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "image_id,object_id,stage,proposal_index,iou")?;
    for (stage, bags) in &stages {
        for bag in bags {
            let g = gt[&bag.object_id];
            for (i, p) in bag.proposals.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{stage},{i},{:.6}",
                    image_of[&bag.object_id],
                    bag.object_id,
                    p.iou(g)
                )?;
            }
        }
        let q = miou_prop(bags, &ds)?;
        println!(
            "{stage}: mIoU_prop {:.4}, bag sizes {:?}",
            q.mean,
            balance_histogram(bags)
        );
    }
    w.flush()?;
    Ok(())
}

fn boxes_by_id(ds: &Dataset) -> HashMap<u64, BBox> {
    ds.objects.iter().map(|o| (o.object_id, o.gt_box)).collect()
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut run = RunConfig::load(args.config.config.as_deref())?;
    let cfg = &mut run.train;
    cfg.seed = args.seed;
    if let Some(t) = args.stages {
        cfg.loss.stages = t;
    }
    if let Some(e) = args.epochs {
        cfg.loss.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.loss.lr = lr;
    }
    if let Some(h) = args.hidden {
        cfg.hidden = h;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    apply_merge(cfg, &args.merge);
    cfg.validate().context("invalid training config")?;

    let ds = load_ann(&args.ann, "--ann")?;
    let scenes = read_scenes(&args.scenes, Some(&ds))
        .with_context(|| format!("--scenes {}", args.scenes.display()))?;
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| sidecar(&args.out_pseudo, "metrics.csv"));
    let file = File::create(&metrics_path)
        .with_context(|| format!("--metrics {}", metrics_path.display()))?;
    let mut metrics = BufWriter::new(file);
    writeln!(metrics, "{}", EpochRecord::csv_header(cfg.loss.stages))?;
    let start = Instant::now();
    let mut write_err = None;
    let out = train_p2bnet_with(&ds, &scenes, cfg, |r| {
        eprintln!("[{:7.1}s] {}", start.elapsed().as_secs_f64(), r.csv_row());
        if let Err(e) = writeln!(metrics, "{}", r.csv_row()) {
            write_err.get_or_insert(e);
        }
    })
    .with_context(|| format!("training on --ann {}", args.ann.display()))?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("--metrics {}", metrics_path.display()));
    }
    metrics.flush()?;
    out.params
        .save(&args.out_checkpoint)
        .with_context(|| format!("--out-checkpoint {}", args.out_checkpoint.display()))?;
    save_pseudo_boxes(&ds, out.final_pseudo(), &args.out_pseudo)
        .with_context(|| format!("--out-pseudo {}", args.out_pseudo.display()))?;
    run.echo(&args.out_pseudo)?;
    for (t, p) in out.pseudo.iter().enumerate() {
        let label = if t == 0 {
            "cbp".to_string()
        } else {
            format!("pbr{t}")
        };
        let m = MetricsReport::compute(p, &ds)?;
        println!("{label}: mIoU_pred {:.4}", m.miou_pred);
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let mut run = RunConfig::load(args.config.config.as_deref())?;
    apply_merge(&mut run.train, &args.merge);
    let cfg = &run.train;
    let params = ModelParams::load(&args.checkpoint)
        .with_context(|| format!("--checkpoint {}", args.checkpoint.display()))?;
    let stages = args.stages.unwrap_or(params.refinement_iters());
    let ds = load_ann(&args.ann, "--ann")?;
    let scenes = read_scenes(&args.scenes, Some(&ds))
        .with_context(|| format!("--scenes {}", args.scenes.display()))?;
    let pred = predict(
        &params,
        &ds,
        &scenes,
        stages,
        &cfg.sampler,
        &cfg.merge,
        cfg.pool,
        cfg.parallelism,
    )
    .with_context(|| {
        format!(
            "predicting --ann {} with --stages {stages}",
            args.ann.display()
        )
    })?;
    let last = pred.pseudo.last().context("no stages")?;
    save_pseudo_boxes(&ds, last, &args.out)
        .with_context(|| format!("--out {}", args.out.display()))?;
    run.echo(&args.out)?;
    println!("{} pseudo boxes -> {}", last.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let pred = load_ann(&args.pred, "--pred")?;
    let gt = load_ann(&args.gt, "--gt")?;
    let pseudo = boxes_by_id(&pred);
    let report = MetricsReport::compute(&pseudo, &gt).context("--pred does not cover --gt")?;
    println!("objects   {}", report.num_objects);
    println!("mIoU_pred {:.4}", report.miou_pred);
    for (tau, r) in &report.recall {
        println!("recall@{tau:<4} {r:.4}");
    }
    if let Some(path) = &args.dump_hist {
        let hist = histogram(&pseudo_ious(&pseudo, &gt)?);
        std::fs::write(path, histogram_csv(&hist))
            .with_context(|| format!("--dump-hist {}", path.display()))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_thread_pool();
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::GenPoints(a) => cmd_gen_points(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
    }
}
