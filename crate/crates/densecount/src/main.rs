//! Command-line entry point: dataset synthesis, the two training stages,
//! single-image inference and split evaluation, all driven by one JSON run
//! configuration echoed into the output directory for reproducibility.

use anyhow::{bail, Context};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use densecount::config::RunConfig;
use densecount::data::{
    load_annotations, ExemplarBox, ImageSample, LoadOutcome, Split, SplitFile, MAX_EXEMPLARS,
};
use densecount::eval::evaluate_split;
use densecount::imgbuf::ImageBuf;
use densecount::inference::{predict_count, rescale_for_inference};
use densecount::model::{CountingModel, MaeModel};
use densecount::mosaic::{mosaic_type_a, mosaic_type_b, select_mosaic_type, MosaicResult, MosaicType};
use densecount::toy::{write_toy_dataset, ToyDataConfig};
use densecount::training::{finetune, pretrain, FinetuneOptions, PretrainOptions};
use densecount::viz::render_overlay;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "densecount", version, about = "Class-agnostic object counting toolkit")]
struct Cli {
    /// JSON run configuration; command-line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for artifacts and the resolved-config echo.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Log filter: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape-counting dataset.
    MakeToyData(MakeToyDataArgs),
    /// Synthesize mosaic training images from an ingested dataset.
    Synth(SynthArgs),
    /// Masked-autoencoder pre-training of the image encoder.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning of the counting model.
    Finetune(FinetuneArgs),
    /// Count objects in a single image.
    Infer(InferArgs),
    /// Evaluate a checkpoint over one dataset split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct MakeToyDataArgs {
    /// Total number of images across the three splits.
    #[arg(long, default_value_t = 20)]
    n: usize,
    /// Inclusive objects-per-image range as "lo,hi".
    #[arg(long, default_value = "4,10", value_parser = parse_range)]
    objects_range: (usize, usize),
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MosaicTypeArg {
    A,
    B,
    Auto,
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root (annotations.json, splits.json, images/).
    #[arg(long)]
    data_dir: PathBuf,
    /// Number of mosaics to synthesize.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Collage form; auto picks per source image by object count.
    #[arg(long = "type", value_enum, default_value = "auto")]
    mosaic_type: MosaicTypeArg,
    /// Override the type-selection object-count threshold.
    #[arg(long)]
    threshold: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset root.
    #[arg(long)]
    data_dir: PathBuf,
    /// Checkpoint output path; defaults to <out-dir>/mae.safetensors.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optimization steps; defaults to epochs x batches-per-epoch.
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from an existing pre-training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Use the small toy profile instead of the default configuration.
    #[arg(long)]
    toy: bool,
    /// Per-step JSONL log; defaults to <out-dir>/pretrain_log.jsonl.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Dataset root.
    #[arg(long)]
    data_dir: PathBuf,
    /// Checkpoint output path; defaults to <out-dir>/counting.safetensors.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Initialize the image encoder from a pre-training checkpoint.
    #[arg(long)]
    init_encoder: Option<PathBuf>,
    /// Continue from an existing counting checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Exemplars per sample during training; 0 trains the zero-shot token.
    #[arg(long, default_value_t = 3)]
    shots: usize,
    /// Optimization steps.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Use the small toy profile instead of the default configuration.
    #[arg(long)]
    toy: bool,
    /// Per-step JSONL log; defaults to <out-dir>/finetune_log.jsonl.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Counting checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image to count.
    #[arg(long)]
    image: PathBuf,
    /// Exemplar boxes "y1,x1,y2,x2;..." (0-3 of them).
    #[arg(long, default_value = "")]
    boxes: String,
    /// Exemplars to use; defaults to all provided boxes.
    #[arg(long)]
    shots: Option<usize>,
    /// Write a heatmap overlay PNG (at the working resolution).
    #[arg(long)]
    overlay: Option<PathBuf>,
    /// Write the prediction record as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    /// Counting checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    data_dir: PathBuf,
    /// Split to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Exemplars per image (0 = zero-shot).
    #[arg(long, default_value_t = 3)]
    shots: usize,
    /// File with one image id per line to exclude.
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Aggregate report path; defaults to <out-dir>/eval_report.json.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Optional per-image CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("expected \"lo,hi\", got \"{s}\""));
    }
    let lo = parts[0].parse().map_err(|e| format!("lo: {e}"))?;
    let hi = parts[1].parse().map_err(|e| format!("hi: {e}"))?;
    Ok((lo, hi))
}

fn parse_boxes(s: &str) -> anyhow::Result<Vec<ExemplarBox>> {
    let mut boxes = Vec::new();
    for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let nums: Vec<f64> = part
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .with_context(|| format!("box \"{part}\""))?;
        if nums.len() != 4 {
            bail!("box \"{part}\" needs four values y1,x1,y2,x2");
        }
        boxes.push(ExemplarBox::new(nums[0], nums[1], nums[2], nums[3])?);
    }
    if boxes.len() > MAX_EXEMPLARS {
        bail!("{} boxes given; at most {MAX_EXEMPLARS} exemplars are supported", boxes.len());
    }
    Ok(boxes)
}

/// Resolve the run configuration: file or profile base, then flag overrides.
fn resolve_config(cli: &Cli, toy: bool) -> anyhow::Result<RunConfig> {
    let mut cfg = match (&cli.config, toy) {
        (Some(_), true) => bail!("pass either --config or --toy, not both"),
        (Some(path), false) => {
            RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        (None, true) => RunConfig::toy(),
        (None, false) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Echo the fully-resolved configuration next to the artifacts.
fn echo_config(cfg: &RunConfig, out_dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    cfg.save(&out_dir.join("run_config.json"))?;
    Ok(())
}

/// Ingest a dataset; per-sample failures are reported but not fatal.
fn load_dataset(data_dir: &Path) -> anyhow::Result<LoadOutcome> {
    let splits = SplitFile::load(&data_dir.join("splits.json"))?;
    let outcome = load_annotations(
        &data_dir.join("annotations.json"),
        &data_dir.join("images"),
        &splits,
    )?;
    for e in &outcome.errors {
        log::warn!("sample \"{}\" not loaded: {}", e.id, e.reason);
    }
    log::info!(
        "loaded {} samples ({} failed)",
        outcome.samples.len(),
        outcome.errors.len()
    );
    Ok(outcome)
}

fn owned_split(outcome: &LoadOutcome, split: Split) -> Vec<ImageSample> {
    outcome.for_split(split).into_iter().cloned().collect()
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match &cli.command {
        Command::MakeToyData(args) => cmd_make_toy_data(&cli, args),
        Command::Synth(args) => cmd_synth(&cli, args),
        Command::Pretrain(args) => cmd_pretrain(&cli, args),
        Command::Finetune(args) => cmd_finetune(&cli, args),
        Command::Infer(args) => cmd_infer(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
    }
}

fn cmd_make_toy_data(cli: &Cli, args: &MakeToyDataArgs) -> anyhow::Result<()> {
    if args.n == 0 {
        bail!("--n must be at least 1");
    }
    let cfg = resolve_config(cli, false)?;
    echo_config(&cfg, &cli.out_dir)?;
    let held_out = args.n / 6;
    let toy_cfg = ToyDataConfig {
        image_size: args.image_size,
        train: args.n - 2 * held_out,
        val: held_out,
        test: held_out,
        objects: args.objects_range,
        seed: cfg.seed,
    };
    let n = write_toy_dataset(&toy_cfg, &cli.out_dir)?;
    println!(
        "wrote {n} images ({} train / {} val / {} test) to {}",
        toy_cfg.train,
        toy_cfg.val,
        toy_cfg.test,
        cli.out_dir.display()
    );
    Ok(())
}

/// Pick four samples of pairwise-distinct classes for a type-A mosaic; the
/// target goes first.
fn pick_type_a_sources<'a>(
    by_class: &BTreeMap<&'a str, Vec<&'a ImageSample>>,
    rng: &mut impl Rng,
) -> anyhow::Result<[ImageSample; 4]> {
    if by_class.len() < 4 {
        bail!("type A needs four distinct classes, dataset has {}", by_class.len());
    }
    let mut classes: Vec<&str> = by_class.keys().copied().collect();
    classes.shuffle(rng);
    let mut picked = Vec::with_capacity(4);
    for class in classes.iter().take(4) {
        let candidates = &by_class[class];
        picked.push((*candidates[rng.gen_range(0..candidates.len())]).clone());
    }
    Ok([
        picked[0].clone(),
        picked[1].clone(),
        picked[2].clone(),
        picked[3].clone(),
    ])
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> anyhow::Result<()> {
    let mut cfg = resolve_config(cli, false)?;
    if let Some(t) = args.threshold {
        cfg.mosaic.type_threshold = t;
    }
    echo_config(&cfg, &cli.out_dir)?;
    let outcome = load_dataset(&args.data_dir)?;
    let train = owned_split(&outcome, Split::Train);
    if train.is_empty() {
        bail!("no usable training samples in {}", args.data_dir.display());
    }
    let mut by_class: BTreeMap<&str, Vec<&ImageSample>> = BTreeMap::new();
    for s in &train {
        by_class.entry(s.class_label.as_str()).or_default().push(s);
    }

    let images_dir = cli.out_dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .with_context(|| format!("creating {}", images_dir.display()))?;
    let mut seed_rng = densecount::rng::substream(cfg.seed, "synth");
    let mut annotations = Map::new();
    let mut manifest = Map::new();
    let mut files = Vec::new();
    let (mut n_a, mut n_b, mut failures) = (0usize, 0usize, 0usize);
    for i in 0..args.count {
        let item_seed: u64 = seed_rng.gen();
        let mut item_cfg = cfg.mosaic.clone();
        item_cfg.rng_seed = item_seed;
        let result: densecount::Result<MosaicResult> = (|| {
            let source = &train[seed_rng.gen_range(0..train.len())];
            let form = match args.mosaic_type {
                MosaicTypeArg::A => MosaicType::A,
                MosaicTypeArg::B => MosaicType::B,
                MosaicTypeArg::Auto => {
                    select_mosaic_type(source.count(), item_cfg.type_threshold)
                }
            };
            match form {
                MosaicType::B => mosaic_type_b(source, &item_cfg),
                MosaicType::A => {
                    let sources = pick_type_a_sources(&by_class, &mut seed_rng)
                        .map_err(|e| densecount::Error::Mosaic(e.to_string()))?;
                    mosaic_type_a(&sources, 0, &item_cfg)
                }
            }
        })();
        match result {
            Ok(m) => {
                let file = format!("mosaic_{i:04}.png");
                m.sample.image.save_png(&images_dir.join(&file))?;
                let points: Vec<Value> =
                    m.sample.dots.iter().map(|d| json!([d.x, d.y])).collect();
                let boxes: Vec<Value> = m
                    .sample
                    .exemplars
                    .iter()
                    .map(|b| json!([b.y1, b.x1, b.y2, b.x2]))
                    .collect();
                annotations.insert(
                    file.clone(),
                    json!({"points": points, "boxes": boxes, "class": m.sample.class_label}),
                );
                manifest.insert(
                    file.clone(),
                    json!({
                        "type": match m.mosaic_type { MosaicType::A => "a", MosaicType::B => "b" },
                        "source_ids": m.source_ids,
                        "usable_shots": m.usable_shots.iter().collect::<Vec<_>>(),
                    }),
                );
                match m.mosaic_type {
                    MosaicType::A => n_a += 1,
                    MosaicType::B => n_b += 1,
                }
                files.push(file);
            }
            Err(e) => {
                log::warn!("mosaic {i}: {e}");
                failures += 1;
            }
        }
    }
    if files.is_empty() && args.count > 0 {
        bail!("all {} mosaic syntheses failed", args.count);
    }
    std::fs::write(
        cli.out_dir.join("annotations.json"),
        serde_json::to_string_pretty(&Value::Object(annotations))?,
    )?;
    std::fs::write(
        cli.out_dir.join("splits.json"),
        serde_json::to_string_pretty(&json!({"train": files, "val": [], "test": []}))?,
    )?;
    std::fs::write(
        cli.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&Value::Object(manifest))?,
    )?;
    println!(
        "wrote {} mosaics ({n_a} type A, {n_b} type B, {failures} failed) to {}",
        files.len(),
        cli.out_dir.display()
    );
    Ok(())
}

fn cmd_pretrain(cli: &Cli, args: &PretrainArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(cli, args.toy)?;
    echo_config(&cfg, &cli.out_dir)?;
    let outcome = load_dataset(&args.data_dir)?;
    let train = owned_split(&outcome, Split::Train);
    if train.is_empty() {
        bail!("no usable training samples in {}", args.data_dir.display());
    }
    // the autoencoder consumes square inputs at the model size
    let size = cfg.model.image_size;
    let images: Vec<ImageBuf> = train.iter().map(|s| s.image.resize(size, size)).collect();

    let model = match &args.resume {
        Some(path) => {
            log::info!("resuming from {}", path.display());
            MaeModel::load(path, &cfg.model, &cfg.pretrain, DType::F32, Device::Cpu)?
        }
        None => MaeModel::new(&cfg.model, &cfg.pretrain, cfg.seed, DType::F32, Device::Cpu)?,
    };
    let batches_per_epoch = images.len().div_ceil(cfg.pretrain.batch_size);
    let steps = args.steps.unwrap_or(cfg.pretrain.epochs * batches_per_epoch.max(1));
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| cli.out_dir.join("pretrain_log.jsonl"));
    let records = pretrain(
        &model,
        &images,
        &PretrainOptions {
            steps,
            seed: cfg.seed,
            log_path: Some(log_path.clone()),
        },
    )?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cli.out_dir.join("mae.safetensors"));
    model.save(&out)?;
    let last = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "pre-trained {steps} steps on {} images; final loss {last:.6}; checkpoint {}",
        images.len(),
        out.display()
    );
    log::info!("per-step log at {}", log_path.display());
    Ok(())
}

fn cmd_finetune(cli: &Cli, args: &FinetuneArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(cli, args.toy)?;
    echo_config(&cfg, &cli.out_dir)?;
    if args.resume.is_some() && args.init_encoder.is_some() {
        bail!("--resume already carries encoder weights; drop --init-encoder");
    }
    let outcome = load_dataset(&args.data_dir)?;
    let train = owned_split(&outcome, Split::Train);
    if train.is_empty() {
        bail!("no usable training samples in {}", args.data_dir.display());
    }
    let mut model = match &args.resume {
        Some(path) => {
            log::info!("resuming from {}", path.display());
            CountingModel::load(path, DType::F32, Device::Cpu)?
        }
        None => CountingModel::new(&cfg.model, cfg.seed, DType::F32, Device::Cpu)?,
    };
    if let Some(path) = &args.init_encoder {
        let n = model.init_encoder_from(path)?;
        log::info!("encoder initialized from {} ({n} tensors)", path.display());
    }
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| cli.out_dir.join("finetune_log.jsonl"));
    let records = finetune(
        &model,
        &train,
        &cfg.train,
        &FinetuneOptions {
            steps: args.steps,
            shots: args.shots,
            sigma: cfg.sigma,
            seed: cfg.seed,
            log_path: Some(log_path.clone()),
        },
    )?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cli.out_dir.join("counting.safetensors"));
    model.save(&out)?;
    let last = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "fine-tuned {} steps ({} shots) on {} images; final loss {last:.6}; checkpoint {}",
        args.steps,
        args.shots,
        train.len(),
        out.display()
    );
    log::info!("per-step log at {}", log_path.display());
    Ok(())
}

fn cmd_infer(cli: &Cli, args: &InferArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(cli, false)?;
    echo_config(&cfg, &cli.out_dir)?;
    let model = CountingModel::load(&args.checkpoint, DType::F32, Device::Cpu)?;
    let mut inference = cfg.inference.clone();
    if inference.window != model.cfg.image_size {
        log::info!(
            "window {} adjusted to the checkpoint's input size {}",
            inference.window,
            model.cfg.image_size
        );
        inference.window = model.cfg.image_size;
        inference.stride = inference.stride.min(inference.window);
        inference.resize_height = model.cfg.image_size;
    }
    let image = ImageBuf::load(&args.image)?;
    let boxes = parse_boxes(&args.boxes)?;
    let shots = match args.shots {
        Some(s) if s > boxes.len() => {
            bail!("--shots {s} but only {} boxes were given", boxes.len())
        }
        Some(s) => s,
        None => boxes.len(),
    };
    let sample = ImageSample {
        id: args
            .image
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into()),
        image,
        dots: vec![],
        exemplars: boxes,
        class_label: "unknown".into(),
        split: Split::Test,
    };
    let outcome = predict_count(&model, &sample, shots, &inference)?;
    println!("count: {:.3}", outcome.count);
    if outcome.ttnorm_applied {
        log::info!("count normalized by exemplar response {:?}", outcome.response);
    }
    if outcome.ttcrop_applied {
        log::info!("tiny exemplars: used the 3x3 crop-and-upscale path");
    }
    if let Some(path) = &args.json {
        let doc = json!({
            "count": outcome.count,
            "ttnorm_applied": outcome.ttnorm_applied,
            "ttcrop_applied": outcome.ttcrop_applied,
            "R": outcome.response,
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.overlay {
        let working = rescale_for_inference(&sample, &inference)?;
        render_overlay(&working.image, &outcome.density, path)?;
        log::info!("overlay written to {}", path.display());
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> anyhow::Result<()> {
    let cfg = resolve_config(cli, false)?;
    echo_config(&cfg, &cli.out_dir)?;
    let model = CountingModel::load(&args.checkpoint, DType::F32, Device::Cpu)?;
    let mut inference = cfg.inference.clone();
    if inference.window != model.cfg.image_size {
        log::info!(
            "window {} adjusted to the checkpoint's input size {}",
            inference.window,
            model.cfg.image_size
        );
        inference.window = model.cfg.image_size;
        inference.stride = inference.stride.min(inference.window);
        inference.resize_height = model.cfg.image_size;
    }
    let outcome = load_dataset(&args.data_dir)?;
    let split = match args.split {
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let samples = owned_split(&outcome, split);
    if samples.is_empty() {
        bail!("no usable {split:?} samples in {}", args.data_dir.display());
    }
    let exclude: Vec<String> = match &args.exclude {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect(),
        None => Vec::new(),
    };
    let result = evaluate_split(&model, &samples, args.shots, &inference, &exclude)?;
    println!(
        "{split:?} @ {} shots: MAE {:.3}, RMSE {:.3} over {} images ({} excluded, {} skipped)",
        args.shots,
        result.mae,
        result.rmse,
        result.n_images,
        result.excluded_ids.len(),
        result.skipped.len()
    );
    let report = args
        .report
        .clone()
        .unwrap_or_else(|| cli.out_dir.join("eval_report.json"));
    std::fs::write(&report, serde_json::to_string_pretty(&result)?)
        .with_context(|| format!("writing {}", report.display()))?;
    log::info!("report written to {}", report.display());
    if let Some(path) = &args.csv {
        std::fs::write(path, result.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
