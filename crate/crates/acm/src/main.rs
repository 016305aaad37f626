//! Command-line entry point: dataset generation, training, evaluation, and
//! the geometric-group ablation.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data/model mismatch,
//! 4 internal numerical failure.

use acm::augment::TransformGroup;
use acm::checkpoint::load_checkpoint;
use acm::datagen::{generate_synthetic_traverse, load_dataset, save_dataset, ConditionSpec, Dataset};
use acm::error::{AcmError, Result};
use acm::eval::{emit_report, evaluate, render_bar_chart, EvalSettings};
use acm::loss::DenominatorMode;
use acm::model::ModelConfig;
use acm::train::{train, TrainConfig, TrainOptions};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "acm", version, about = "Self-supervised place recognition on synthetic traverses")]
struct Cli {
    /// Worker threads for data-parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-condition traverse dataset.
    GenerateData(GenerateArgs),
    /// Train a model on a dataset's reference traverse.
    Train(TrainArgs),
    /// Evaluate a checkpoint: retrieval recall, pose buckets, measures.
    Eval(EvalArgs),
    /// Train and evaluate one model per geometric group (4 runs).
    AblateGeometry(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of places (frames per traverse).
    #[arg(long)]
    places: u32,
    /// Number of conditions, including the reference traverse.
    #[arg(long, default_value_t = 2)]
    conditions: usize,
    /// Square image edge length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

/// Configuration shared by train / eval / ablate. Precedence (low to high):
/// profile defaults, config file, ACM_SEED, command-line flags.
#[derive(Args)]
struct ConfigFlags {
    /// JSON run-config file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// "desk" (default) or "paper".
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    descriptor_dim: Option<usize>,
    /// Geometric group: c4-rotations, rotations-2d, affine-2d, projective-2d.
    #[arg(long)]
    group: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigFlags,
    /// Dataset directory (from generate-data).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Disable the appearance-contrastive branch.
    #[arg(long)]
    no_appearance: bool,
    /// Disable the geometry-predictive branch.
    #[arg(long)]
    no_geometry: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report JSON output path.
    #[arg(long)]
    out: PathBuf,
    /// Tolerance window radius in frames.
    #[arg(long, default_value_t = 2)]
    window: u32,
    /// Optional recall bar-chart PNG path.
    #[arg(long)]
    chart: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigFlags,
    #[arg(long)]
    data: PathBuf,
    /// Output directory: per-group checkpoints, ablation.json, ablation.png.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    window: u32,
    #[arg(long)]
    force: bool,
}

/// On-disk run configuration; every field optional, unknown keys rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    profile: Option<String>,
    image_size: Option<usize>,
    encoder_channels: Option<Vec<usize>>,
    feature_dim: Option<usize>,
    descriptor_dim: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    epochs: Option<usize>,
    temperature: Option<f64>,
    lambda: Option<f64>,
    denominator_mode: Option<DenominatorMode>,
    seed: Option<u64>,
    geometry_group: Option<String>,
    window_radius: Option<u32>,
    recall_ns: Option<Vec<usize>>,
    invariance_samples: Option<usize>,
}

struct Resolved {
    model: ModelConfig,
    train: TrainConfig,
    eval: EvalSettings,
}

fn parse_group(name: &str) -> Result<TransformGroup> {
    TransformGroup::all()
        .into_iter()
        .find(|g| g.name() == name)
        .ok_or_else(|| {
            AcmError::parameter(format!(
                "unknown group '{name}', expected one of: c4-rotations, rotations-2d, affine-2d, projective-2d"
            ))
        })
}

fn resolve(flags: &ConfigFlags) -> Result<Resolved> {
    let file: RunConfig = match &flags.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| AcmError::Load {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            serde_json::from_slice(&bytes)
                .map_err(|e| AcmError::parameter(format!("bad config file {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };

    let profile = flags
        .profile
        .clone()
        .or_else(|| file.profile.clone())
        .unwrap_or_else(|| "desk".to_string());
    let (mut model, mut train) = match profile.as_str() {
        "desk" => (ModelConfig::default(), TrainConfig::desk()),
        "paper" => (
            ModelConfig { descriptor_dim: 1024, ..ModelConfig::default() },
            TrainConfig::paper(),
        ),
        other => return Err(AcmError::parameter(format!("unknown profile '{other}'"))),
    };
    let mut eval = EvalSettings::default();

    // config-file overrides
    if let Some(v) = file.image_size {
        model.image_size = v;
    }
    if let Some(v) = file.encoder_channels.clone() {
        if let Some(&last) = v.last() {
            model.feature_dim = last;
        }
        model.encoder_channels = v;
    }
    if let Some(v) = file.feature_dim {
        model.feature_dim = v;
    }
    if let Some(v) = file.descriptor_dim {
        model.descriptor_dim = v;
    }
    if let Some(v) = file.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = file.learning_rate {
        train.learning_rate = v;
    }
    if let Some(v) = file.epochs {
        train.epochs = v;
    }
    if let Some(v) = file.temperature {
        train.temperature = v;
    }
    if let Some(v) = file.lambda {
        train.lambda = v;
    }
    if let Some(v) = file.denominator_mode {
        train.denominator_mode = v;
    }
    if let Some(v) = file.seed {
        train.global_seed = v;
    }
    if let Some(name) = &file.geometry_group {
        train.geometry_group = parse_group(name)?;
    }
    if let Some(v) = file.window_radius {
        eval.window_radius = v;
    }
    if let Some(v) = file.recall_ns.clone() {
        eval.recall_ns = v;
    }
    if let Some(v) = file.invariance_samples {
        eval.invariance_samples = v;
    }

    // environment override
    if let Ok(raw) = std::env::var("ACM_SEED") {
        train.global_seed = raw
            .parse()
            .map_err(|_| AcmError::parameter(format!("ACM_SEED must be an integer, got '{raw}'")))?;
    }

    // flag overrides win over everything
    if let Some(v) = flags.seed {
        train.global_seed = v;
    }
    if let Some(v) = flags.epochs {
        train.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        train.batch_size = v;
    }
    if let Some(v) = flags.learning_rate {
        train.learning_rate = v;
    }
    if let Some(v) = flags.temperature {
        train.temperature = v;
    }
    if let Some(v) = flags.lambda {
        train.lambda = v;
    }
    if let Some(v) = flags.descriptor_dim {
        model.descriptor_dim = v;
    }
    if let Some(name) = &flags.group {
        train.geometry_group = parse_group(name)?;
    }

    model.init_seed = train.global_seed;
    model.validate()?;
    train.validate()?;
    Ok(Resolved { model, train, eval })
}

/// Refuse to clobber an existing output unless --force; with --force the
/// previous contents are removed so reruns produce identical trees.
fn prepare_out_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let occupied = path.read_dir().map(|mut d| d.next().is_some()).unwrap_or(true);
        if occupied && !force {
            return Err(AcmError::parameter(format!(
                "output directory {} exists and is not empty (use --force to overwrite)",
                path.display()
            )));
        }
        if occupied {
            std::fs::remove_dir_all(path)?;
        }
    }
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn prepare_out_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(AcmError::parameter(format!(
            "output file {} exists (use --force to overwrite)",
            path.display()
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn load_dataset_checked(dir: &Path) -> Result<Dataset> {
    if !dir.exists() {
        return Err(AcmError::parameter(format!("dataset directory {} not found", dir.display())));
    }
    load_dataset(dir)
}

fn check_image_size(dataset: &Dataset, model: &ModelConfig) -> Result<()> {
    let frame = &dataset.reference_sequence().frames[0];
    let (_, h, w) = frame.image.dim();
    if h != model.image_size || w != model.image_size {
        return Err(AcmError::Format(format!(
            "dataset images are {h}x{w} but the model expects {0}x{0}",
            model.image_size
        )));
    }
    Ok(())
}

fn run_generate(args: &GenerateArgs) -> Result<()> {
    if args.places == 0 {
        return Err(AcmError::parameter("--places must be at least 1"));
    }
    if args.conditions == 0 {
        return Err(AcmError::parameter("--conditions must be at least 1"));
    }
    let mut conditions = vec![ConditionSpec::reference()];
    for i in 1..args.conditions {
        conditions.push(ConditionSpec::variant(i - 1));
    }
    let dataset =
        generate_synthetic_traverse(args.places as usize, &conditions, args.size, args.seed)?;
    prepare_out_dir(&args.out, args.force)?;
    save_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} images across {} conditions to {}",
        dataset.num_images(),
        args.conditions,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut resolved = resolve(&args.config)?;
    if args.no_appearance {
        resolved.train.enable_appearance_module = false;
    }
    if args.no_geometry {
        resolved.train.enable_geometry_module = false;
    }
    if !resolved.train.enable_appearance_module && !resolved.train.enable_geometry_module {
        return Err(AcmError::parameter("both training branches are disabled"));
    }
    let dataset = load_dataset_checked(&args.data)?;
    check_image_size(&dataset, &resolved.model)?;
    let resume = match &args.resume {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    prepare_out_dir(&args.out, args.force)?;
    let log_file = std::fs::File::create(args.out.join("train_log.ndjson"))?;
    let mut log_writer = BufWriter::new(log_file);
    let (_, log) = train(
        &dataset,
        &resolved.model,
        &resolved.train,
        TrainOptions {
            checkpoint_dir: Some(&args.out),
            log_writer: Some(&mut log_writer),
            resume,
        },
    )?;
    drop(log_writer);
    let last = log.last();
    println!(
        "trained {} steps; final L_total = {}; checkpoint at {}",
        log.len(),
        last.map(|r| r.l_total).unwrap_or(f64::NAN),
        args.out.join("final.ckpt").display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset_checked(&args.data)?;
    check_image_size(&dataset, &ckpt.params.config)?;
    prepare_out_file(&args.out, args.force)?;
    let settings = EvalSettings { window_radius: args.window, ..EvalSettings::default() };
    let config_echo = serde_json::json!({
        "checkpoint": args.checkpoint.display().to_string(),
        "model": ckpt.params.config,
        "window_radius": settings.window_radius,
        "recall_ns": settings.recall_ns,
        "invariance_samples": settings.invariance_samples,
    });
    let report = evaluate(&ckpt.params, &dataset, &settings, config_echo)?;
    emit_report(&report, &args.out)?;
    if let Some(chart) = &args.chart {
        prepare_out_file(chart, args.force)?;
        let entries: Vec<(String, f64)> =
            report.recall.iter().map(|(n, r)| (format!("r{n}"), *r)).collect();
        render_bar_chart(&entries, "recall", chart)?;
    }
    for (n, r) in &report.recall {
        println!("recall@{n} = {r:.4}");
    }
    println!(
        "invariance = {:.4}, equivariance = {:.4}; report at {}",
        report.invariance,
        report.equivariance,
        args.out.display()
    );
    Ok(())
}

fn run_ablate(args: &AblateArgs) -> Result<()> {
    let resolved = resolve(&args.config)?;
    let dataset = load_dataset_checked(&args.data)?;
    check_image_size(&dataset, &resolved.model)?;
    prepare_out_dir(&args.out, args.force)?;
    let settings = EvalSettings {
        recall_ns: vec![1, 5, 10],
        window_radius: args.window,
        ..resolved.eval.clone()
    };
    let mut table = Vec::new();
    let mut bars = Vec::new();
    for group in TransformGroup::all() {
        // identical seeds and budgets; only the geometry branch differs
        let train_config = TrainConfig { geometry_group: group, ..resolved.train.clone() };
        let group_dir = args.out.join(group.name());
        std::fs::create_dir_all(&group_dir)?;
        let log_file = std::fs::File::create(group_dir.join("train_log.ndjson"))?;
        let mut log_writer = BufWriter::new(log_file);
        let (params, _) = train(
            &dataset,
            &resolved.model,
            &train_config,
            TrainOptions {
                checkpoint_dir: Some(&group_dir),
                log_writer: Some(&mut log_writer),
                resume: None,
            },
        )?;
        drop(log_writer);
        let config_echo = serde_json::json!({"group": group.name(), "model": resolved.model});
        let report = evaluate(&params, &dataset, &settings, config_echo)?;
        let r10 = report.recall[&10];
        println!(
            "{}: recall@10 = {r10:.4}, equivariance = {:.4}",
            group.name(),
            report.equivariance
        );
        table.push(serde_json::json!({
            "group": group.name(),
            "recall_at_10": r10,
            "equivariance": report.equivariance,
            "invariance": report.invariance,
        }));
        bars.push((group.name().to_string(), r10));
    }
    let mut json = serde_json::to_vec_pretty(&table)?;
    json.push(b'\n');
    std::fs::write(args.out.join("ablation.json"), json)?;
    render_bar_chart(&bars, "recall at 10 by group", &args.out.join("ablation.png"))?;
    println!("ablation table and chart written to {}", args.out.display());
    Ok(())
}

fn exit_code_for(err: &AcmError) -> ExitCode {
    match err {
        AcmError::Parameter(_) | AcmError::Json(_) => ExitCode::from(2),
        AcmError::Load { .. } | AcmError::Format(_) | AcmError::Io(_) | AcmError::Image(_) => {
            ExitCode::from(3)
        }
        AcmError::Domain(_) => ExitCode::from(4),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    #[cfg(feature = "parallel")]
    if let Some(jobs) = cli.jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = cli.jobs;
    let result = match &cli.command {
        Command::GenerateData(args) => run_generate(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::AblateGeometry(args) => run_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
