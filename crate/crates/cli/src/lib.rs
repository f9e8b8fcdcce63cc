//! Command implementations behind the `occpose` binary. Each command takes
//! its parsed arguments, writes everything under `--out` and returns the
//! manifest it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use occpose::checkpoint::Checkpoint;
use occpose::data::{load_annotations, synth_generate, write_dataset, Dataset, SynthConfig};
use occpose::evaluation::{occlusion_stats, OcclusionStats};
use occpose::model::{Ablation, Model};
use occpose::pipeline::{couple_pairs, evaluate, predict, prepare_samples, EvalReport, Sample};
use occpose::training::{train, RunConfig, TrainOptions};
use occpose::Error;

pub mod render;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "occpose", version, about = "Occluded pose estimation with graph refinement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, a loss log and a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint, reporting initial and final pose metrics.
    Eval(EvalArgs),
    /// Print occlusion statistics of a dataset.
    Stats(StatsArgs),
    /// Generate a synthetic two-person dataset.
    Synth(SynthArgs),
    /// Draw ground truth and predicted poses over each image.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DeviceArg {
    /// Accelerator to use; only `none` (CPU) is supported.
    #[arg(long, default_value = "none")]
    pub device: String,
}

impl DeviceArg {
    fn check(&self) -> Result<()> {
        match self.device.as_str() {
            "none" | "cpu" => Ok(()),
            other => Err(Error::Config(format!("unsupported device {other:?}; only `none` is available")).into()),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also train the two-person refiner.
    #[arg(long)]
    pub couple_graph: bool,
    /// Component to switch off; repeatable.
    #[arg(long, value_name = "NAME")]
    pub ablation: Vec<String>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[command(flatten)]
    pub device: DeviceArg,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Refine annotated or overlapping pairs jointly.
    #[arg(long)]
    pub couple_graph: bool,
    /// Component to switch off on top of the checkpoint's layout; repeatable.
    #[arg(long, value_name = "NAME")]
    pub ablation: Vec<String>,
    #[command(flatten)]
    pub device: DeviceArg,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Also write `stats.json` and `stats.txt` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Generator configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub num_images: Option<usize>,
    #[arg(long)]
    pub occlusion_target: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub couple_graph: bool,
    /// Output pixels per image pixel.
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
    /// Poses to draw, from `gt`, `initial` and `final`.
    #[arg(long, value_delimiter = ',', default_value = "gt,initial,final")]
    pub layers: Vec<render::Layer>,
    #[command(flatten)]
    pub device: DeviceArg,
}

/// What a command did: its effective configuration, and every file it wrote.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest {
            command: command.into(),
            ..RunManifest::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text).map_err(|e| Error::json(path, e))?)
    }

    /// Writes `<out>/manifest.json`, refusing to reference missing files.
    fn write(&self, out: &Path) -> Result<PathBuf> {
        for p in self.checkpoints.iter().chain(&self.metrics).chain(&self.outputs) {
            anyhow::ensure!(p.exists(), "manifest references missing file {}", p.display());
        }
        let path = out.join(MANIFEST_FILE);
        write_text(&path, &serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric,
/// 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Checkpoint(_)) => 2,
        Some(
            Error::Data { .. }
            | Error::Io { .. }
            | Error::Json { .. }
            | Error::Image(_)
            | Error::Csv(_)
            | Error::DegenerateBox { .. }
            | Error::InvalidInput(_)
            | Error::Topology(_)
            | Error::Shape(_)
            | Error::FrameMismatch { .. },
        ) => 3,
        Some(Error::NonFinite { .. }) => 4,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let m = cmd_train(&a)?;
            println!("trained {} checkpoint(s); manifest in {}", m.checkpoints.len(), a.out.display());
        }
        Command::Eval(a) => {
            let (report, _) = cmd_eval(&a)?;
            print!("{}", report.to_text());
        }
        Command::Stats(a) => {
            let stats = cmd_stats(&a)?;
            println!("{stats}");
        }
        Command::Synth(a) => {
            let m = cmd_synth(&a)?;
            println!("wrote {} file(s) to {}", m.outputs.len(), a.out.display());
        }
        Command::Render(a) => {
            let m = cmd_render(&a)?;
            println!("rendered {} image(s) to {}", m.outputs.len(), a.out.display());
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(load_annotations(path)?)
}

fn ablation_from(base: Ablation, names: &[String]) -> Result<Ablation> {
    let mut a = base;
    for n in names {
        a.disable(n)?;
    }
    Ok(a)
}

/// Reads a run configuration, reporting every failure as a configuration error.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Config(_) => e.into(),
            other => Error::Config(format!("{}: {other}", p.display())).into(),
        }),
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunManifest> {
    args.device.check()?;
    let start = Instant::now();
    let mut cfg = load_run_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
    }
    if args.couple_graph {
        cfg.training.couple_graph_enabled = true;
    }
    if args.max_steps.is_some() {
        cfg.training.max_steps = args.max_steps;
    }
    cfg.training.ablation = ablation_from(cfg.training.ablation, &args.ablation)?;
    cfg.validate()?;

    let dataset = load_dataset(&args.dataset)?;
    let resume = args
        .resume
        .as_deref()
        .map(Checkpoint::load)
        .transpose()?;
    let mut model = match &resume {
        Some(ck) => {
            if ck.meta.model != cfg.model || ck.meta.ablation != cfg.training.ablation {
                return Err(Error::Config("checkpoint was trained with a different model layout".into()).into());
            }
            ck.to_model()?
        }
        None => Model::new(&cfg.model, cfg.training.ablation, cfg.training.seed)?,
    };
    let samples = prepare_samples(&dataset, cfg.model.backbone.in_channels, model.crop_size())?;
    let pairs = couple_pairs(&dataset, &samples);
    let loaded = start.elapsed().as_secs_f64();

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let config_path = args.out.join("config.json");
    write_text(&config_path, &serde_json::to_string_pretty(&cfg)?)?;
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        resume,
    };
    let report = train(&mut model, &samples, &pairs, &cfg.training, &opts)?;

    let mut m = RunManifest::new("train");
    m.config = serde_json::to_value(&cfg)?;
    m.seed = Some(cfg.training.seed);
    m.checkpoints = report.checkpoints;
    m.metrics = vec![args.out.join("loss.csv")];
    m.outputs = vec![config_path];
    m.timings.insert("load".into(), loaded);
    m.timings.insert("train".into(), start.elapsed().as_secs_f64() - loaded);
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    m.write(&args.out)?;
    Ok(m)
}

/// Loads a checkpoint's model with extra components switched off.
pub fn load_model(checkpoint: &Path, ablation: &[String]) -> Result<Model> {
    let ck = Checkpoint::load(checkpoint)?;
    let abl = ablation_from(ck.meta.ablation, ablation)?;
    Ok(ck.to_model_with(abl)?)
}

fn run_model(model: &Model, dataset: &Dataset, couple: bool) -> Result<(Vec<Sample>, Vec<occpose::pipeline::SamplePrediction>)> {
    let samples = prepare_samples(dataset, model.config.backbone.in_channels, model.crop_size())?;
    let pairs = couple.then(|| couple_pairs(dataset, &samples));
    let preds = predict(model, &samples, pairs.as_deref())?;
    Ok((samples, preds))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(EvalReport, RunManifest)> {
    args.device.check()?;
    let start = Instant::now();
    let model = load_model(&args.checkpoint, &args.ablation)?;
    let dataset = load_dataset(&args.dataset)?;
    let (samples, preds) = run_model(&model, &dataset, args.couple_graph)?;
    let report = evaluate(&dataset, &samples, &preds, &model.skeleton.oks_sigmas)?;

    let json = args.out.join("eval.json");
    let text = args.out.join("eval.txt");
    write_text(&json, &serde_json::to_string_pretty(&report)?)?;
    write_text(&text, &report.to_text())?;
    let mut m = RunManifest::new("eval");
    m.config = serde_json::json!({
        "checkpoint": args.checkpoint,
        "dataset": args.dataset,
        "couple_graph": args.couple_graph,
        "ablation": model.ablation,
    });
    m.checkpoints = vec![args.checkpoint.clone()];
    m.metrics = vec![json, text];
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    m.write(&args.out)?;
    Ok((report, m))
}

pub fn cmd_stats(args: &StatsArgs) -> Result<OcclusionStats> {
    let dataset = load_dataset(&args.dataset)?;
    let stats = occlusion_stats(&dataset.records);
    if let Some(out) = &args.out {
        let json = out.join("stats.json");
        let text = out.join("stats.txt");
        write_text(&json, &serde_json::to_string_pretty(&stats)?)?;
        write_text(&text, &format!("{stats}\n"))?;
        let mut m = RunManifest::new("stats");
        m.config = serde_json::json!({ "dataset": args.dataset });
        m.metrics = vec![json, text];
        m.write(out)?;
    }
    Ok(stats)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<RunManifest> {
    let start = Instant::now();
    let mut cfg = match &args.config {
        None => SynthConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.num_images {
        cfg.num_images = n;
    }
    if let Some(t) = args.occlusion_target {
        cfg.occlusion_target = t;
    }
    cfg.validate()?;
    let dataset = synth_generate(&cfg)?;
    let written = write_dataset(&args.out, &dataset)?;
    let mut m = RunManifest::new("synth");
    m.config = serde_json::to_value(&cfg)?;
    m.seed = Some(cfg.seed);
    m.outputs.push(args.out.join(occpose::data::ANNOTATION_FILE));
    for r in &written.records {
        if let occpose::data::ImageSource::File(p) = &r.image {
            m.outputs.push(p.clone());
        }
    }
    m.metrics.push(args.out.join("stats.txt"));
    write_text(&m.metrics[0], &format!("{}\n", occlusion_stats(&dataset.records)))?;
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    m.write(&args.out)?;
    Ok(m)
}

pub fn cmd_render(args: &RenderArgs) -> Result<RunManifest> {
    args.device.check()?;
    anyhow::ensure!(args.scale >= 1, Error::Config("scale must be at least 1".into()));
    let start = Instant::now();
    let model = load_model(&args.checkpoint, &[])?;
    let dataset = load_dataset(&args.dataset)?;
    let (samples, preds) = run_model(&model, &dataset, args.couple_graph)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut m = RunManifest::new("render");
    m.config = serde_json::json!({
        "checkpoint": args.checkpoint,
        "dataset": args.dataset,
        "couple_graph": args.couple_graph,
        "scale": args.scale,
        "layers": args.layers,
        "legend": render::legend(),
    });
    m.checkpoints = vec![args.checkpoint.clone()];
    for (ri, record) in dataset.records.iter().enumerate() {
        let people: Vec<render::Person> = samples
            .iter()
            .zip(&preds)
            .filter(|(s, _)| s.record == ri)
            .map(|(s, p)| render::Person {
                gt: &record.instances[s.instance].pose,
                initial: &p.initial_pixels,
                final_pose: &p.final_pixels,
            })
            .collect();
        let pixels = record
            .pixels(model.config.backbone.in_channels)
            .with_context(|| format!("image {}", record.image_id))?;
        let img = render::draw(&pixels, &people, &model.skeleton.edges, args.scale, &args.layers);
        let path = args.out.join(format!("{:06}.png", record.image_id));
        img.save(&path).map_err(Error::Image).with_context(|| format!("writing {}", path.display()))?;
        m.outputs.push(path);
    }
    m.timings.insert("total".into(), start.elapsed().as_secs_f64());
    m.write(&args.out)?;
    Ok(m)
}
