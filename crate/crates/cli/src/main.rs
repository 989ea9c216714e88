//! `cxr`: generate data, train, evaluate, predict, ensemble, and inspect
//! the chest X-ray classification pipeline from the command line.
//!
//! Exit codes: 0 on success, 2 for configuration and usage errors, 3 for
//! data errors, 4 for numeric failures, 5 for checkpoint errors.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use cxr_core::augment::{train_preview, AugmentPolicy};
use cxr_core::checkpoint::{Checkpoint, CheckpointError};
use cxr_core::data::{generate_synthetic, DataError, Manifest};
use cxr_core::ensemble::{
    self, load_prediction_csv, save_prediction_csv, weighted_average, EnsembleError,
    PredictionRecord,
};
use cxr_core::fsio::write_atomic;
use cxr_core::image::{decode_pnm, encode_ppm, ImageError};
use cxr_core::rng::Stream;
use cxr_core::swin::{SwinConfig, SwinModel};
use cxr_core::tensor::{gradcheck_leaves, label_smoothed_ce, Tensor};
use cxr_core::tnt::{TntConfig, TntModel};
use cxr_core::trainer::{self, AnyModel, RunConfig, TrainerError};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("gradient check: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_)
            | CliError::Ensemble(_)
            | CliError::Image { .. }
            | CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Checkpoint(_) => 5,
            CliError::Trainer(e) => trainer_exit_code(e),
        }
    }
}

fn trainer_exit_code(e: &TrainerError) -> u8 {
    match e {
        // Model construction failures are config-shaped: a bad dimension in
        // the run file, not bad data on disk.
        TrainerError::Config(_) | TrainerError::Swin(_) | TrainerError::Tnt(_) => 2,
        TrainerError::Data(_) | TrainerError::Ensemble(_) | TrainerError::Io { .. } => 3,
        TrainerError::Optim(_) | TrainerError::Tensor(_) | TrainerError::NonFiniteLoss { .. } => 4,
        TrainerError::Checkpoint(_) | TrainerError::CheckpointMismatch(_) => 5,
    }
}

#[derive(Parser)]
#[command(
    name = "cxr",
    version,
    about = "Chest X-ray classification: training, inference, and ensembling",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run config
    Train(TrainArgs),
    /// Evaluate a checkpoint against a labeled manifest
    Eval(EvalArgs),
    /// Write per-image class probabilities for a manifest
    Predict(PredictArgs),
    /// Combine prediction CSVs by weighted average and score the result
    Ensemble(EnsembleArgs),
    /// Score each member solo, then the ensemble across a weight grid
    Sweep(SweepArgs),
    /// Verify analytic gradients against central differences in 64-bit
    Gradcheck(GradcheckArgs),
    /// Write augmented copies of one image for visual inspection
    AugmentPreview(AugmentPreviewArgs),
    /// Render a small synthetic three-class dataset
    MakeSynthetic(MakeSyntheticArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the configured epoch count
    #[arg(long)]
    epochs: Option<u64>,
    /// Override the configured batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the configured peak learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Override the configured label smoothing factor
    #[arg(long)]
    label_smoothing: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled manifest to evaluate against
    #[arg(long)]
    manifest: PathBuf,
    /// Run config supplying the augment policy (defaults sized to the model)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
    /// Also write the metric report to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint to predict with
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled manifest naming the images
    #[arg(long)]
    manifest: PathBuf,
    /// Prediction CSV to write
    #[arg(long)]
    out: PathBuf,
    /// Run config supplying the augment policy (defaults sized to the model)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Member prediction CSVs (repeatable)
    #[arg(long = "member", required = true, num_args = 1..)]
    members: Vec<PathBuf>,
    /// Member weights, e.g. "2:1" or "2,1"
    #[arg(long)]
    weights: String,
    /// Labeled manifest with the true classes
    #[arg(long)]
    truth: PathBuf,
    /// Metric report to write
    #[arg(long)]
    out: PathBuf,
    /// Also write the combined prediction CSV here
    #[arg(long)]
    records_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Member prediction CSVs (repeatable)
    #[arg(long = "member", required = true, num_args = 1..)]
    members: Vec<PathBuf>,
    /// Comma-separated display names, defaulting to the file stems
    #[arg(long)]
    names: Option<String>,
    /// Labeled manifest with the true classes
    #[arg(long)]
    truth: PathBuf,
    /// Weight vector to sweep, e.g. "2:1" (repeatable)
    #[arg(long = "weights", required = true)]
    weight_grid: Vec<String>,
    /// Sweep table CSV to write
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Which model to check
    #[arg(long, default_value = "all", value_parser = ["swin", "tnt", "all"])]
    model: String,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Maximum acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
}

#[derive(Args)]
struct AugmentPreviewArgs {
    /// Source image (PGM or PPM)
    #[arg(long)]
    image: PathBuf,
    /// Directory receiving the previews
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of previews to draw
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..=64))]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target size of the augmented output
    #[arg(long, default_value_t = 224, value_parser = clap::value_parser!(u64).range(16..=1024))]
    size: u64,
}

#[derive(Args)]
struct MakeSyntheticArgs {
    /// Directory receiving images/ and manifest.csv
    #[arg(long)]
    out: PathBuf,
    /// Images per class
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..=100_000))]
    n: u64,
    /// Image side length in pixels
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(16..=4096))]
    size: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    // Restore default SIGPIPE handling so `cxr ... | head` exits quietly
    // instead of panicking on a closed stdout.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ensemble(a) => cmd_ensemble(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::AugmentPreview(a) => cmd_augment_preview(a),
        Command::MakeSynthetic(a) => cmd_make_synthetic(a),
    }
}

// ── train ────────────────────────────────────────────────────────────

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.out_dir {
        cfg.out_dir = v;
    }
    if let Some(v) = args.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = args.label_smoothing {
        cfg.label_smoothing = v;
    }
    let outcome = trainer::train_run(&cfg)?;
    let last = outcome.reports.last().expect("training runs at least one epoch");
    println!(
        "trained {} model for {} epochs; final train loss {:.6}",
        cfg.model.kind(),
        outcome.reports.len(),
        last.train_loss
    );
    println!(
        "best epoch {} with validation accuracy {:.4}",
        outcome.best_epoch, outcome.best_val_accuracy
    );
    println!("checkpoint: {}", outcome.best_checkpoint.display());
    println!("epoch log:  {}", outcome.epochs_csv.display());
    Ok(())
}

// ── eval / predict ───────────────────────────────────────────────────

/// Restore the model from a checkpoint and pick the evaluation policy:
/// the one from `--config` if given, else defaults sized to the model.
fn load_model(
    checkpoint: &Path,
    config: Option<&Path>,
) -> Result<(AnyModel, AugmentPolicy), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (spec, model) = trainer::restore_model(&ckpt)?;
    let policy = match config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            let policy = cfg.resolved_policy();
            policy
                .validate()
                .map_err(|e| CliError::Usage(format!("augment policy: {e}")))?;
            if policy.target_size != spec.input_size() {
                return Err(CliError::Usage(format!(
                    "policy target size {} does not match the checkpoint's input size {}",
                    policy.target_size,
                    spec.input_size()
                )));
            }
            policy
        }
        None => AugmentPolicy::for_size(spec.input_size()),
    };
    Ok((model, policy))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (model, policy) = load_model(&args.checkpoint, args.config.as_deref())?;
    let manifest = Manifest::load(&args.manifest)?;
    let outcome = trainer::evaluate(&model, &manifest, &policy, args.batch_size as usize)?;
    let text = outcome.report.render();
    if let Some(path) = &args.out {
        write_atomic(path, text.as_bytes()).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
    }
    print!("{text}");
    for s in &outcome.skipped {
        eprintln!("skipped {}: {}", s.image_id, s.reason);
    }
    println!(
        "evaluated {} images ({} skipped)",
        outcome.records.len(),
        outcome.skipped.len()
    );
    Ok(())
}

/// Sidecar CSV next to the prediction file listing unreadable images.
fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("predictions");
    out.with_file_name(format!("{stem}.errors.csv"))
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let (model, policy) = load_model(&args.checkpoint, args.config.as_deref())?;
    let manifest = Manifest::load(&args.manifest)?;
    let outcome = trainer::evaluate(&model, &manifest, &policy, args.batch_size as usize)?;
    save_prediction_csv(&args.out, &outcome.records)?;
    println!(
        "wrote {} prediction rows to {}",
        outcome.records.len(),
        args.out.display()
    );
    if !outcome.skipped.is_empty() {
        let sidecar = sidecar_path(&args.out);
        let mut text = String::from("image_id,reason\n");
        for s in &outcome.skipped {
            text.push_str(&format!(
                "{},\"{}\"\n",
                s.image_id,
                s.reason.replace('"', "\"\"")
            ));
        }
        write_atomic(&sidecar, text.as_bytes()).map_err(|source| CliError::Io {
            path: sidecar.clone(),
            source,
        })?;
        eprintln!(
            "skipped {} unreadable images; reasons in {}",
            outcome.skipped.len(),
            sidecar.display()
        );
    }
    Ok(())
}

// ── ensemble / sweep ─────────────────────────────────────────────────

/// Parse "2:1" or "2,1" into positive finite weights, one per member.
fn parse_weights(s: &str, expected: usize) -> Result<Vec<f64>, CliError> {
    let mut out = Vec::new();
    for part in s.split([',', ':']) {
        let w: f64 = part.trim().parse().map_err(|_| {
            CliError::Usage(format!("weight '{part}' is not a number (expected e.g. 2:1)"))
        })?;
        if !w.is_finite() || w <= 0.0 {
            return Err(CliError::Usage(format!(
                "weight {w} must be finite and positive"
            )));
        }
        out.push(w);
    }
    if out.len() != expected {
        return Err(CliError::Usage(format!(
            "{} weights given for {} members",
            out.len(),
            expected
        )));
    }
    Ok(out)
}

fn load_members(paths: &[PathBuf]) -> Result<Vec<Vec<PredictionRecord>>, CliError> {
    let mut members = Vec::with_capacity(paths.len());
    for path in paths {
        members.push(load_prediction_csv(path)?);
    }
    Ok(members)
}

fn cmd_ensemble(args: EnsembleArgs) -> Result<(), CliError> {
    let weights = parse_weights(&args.weights, args.members.len())?;
    let members = load_members(&args.members)?;
    let combined = weighted_average(&members, &weights)?;
    let manifest = Manifest::load(&args.truth)?;
    let truth = ensemble::truth_map(&manifest);
    let report = ensemble::evaluate_records(&combined, &truth)?;
    let text = report.render();
    write_atomic(&args.out, text.as_bytes()).map_err(|source| CliError::Io {
        path: args.out.clone(),
        source,
    })?;
    if let Some(path) = &args.records_out {
        save_prediction_csv(path, &combined)?;
        println!("combined records: {}", path.display());
    }
    print!("{text}");
    println!("report: {}", args.out.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let names: Vec<String> = match &args.names {
        Some(s) => s.split(',').map(|p| p.trim().to_string()).collect(),
        None => args
            .members
            .iter()
            .map(|p| {
                p.file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("member")
                    .to_string()
            })
            .collect(),
    };
    if names.len() != args.members.len() {
        return Err(CliError::Usage(format!(
            "{} names given for {} members",
            names.len(),
            args.members.len()
        )));
    }
    let members = load_members(&args.members)?;
    let grid: Vec<Vec<f64>> = args
        .weight_grid
        .iter()
        .map(|s| parse_weights(s, members.len()))
        .collect::<Result<_, _>>()?;
    let manifest = Manifest::load(&args.truth)?;
    let truth = ensemble::truth_map(&manifest);
    let rows = ensemble::ensemble_sweep(&names, &members, &truth, &grid)?;
    let csv = ensemble::sweep_csv(&rows);
    if let Some(path) = &args.out {
        write_atomic(path, csv.as_bytes()).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        println!("table: {}", path.display());
    }
    print!("{csv}");
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────

fn random_input(size: usize, seed: u64) -> Tensor<f64> {
    let n = 3 * size * size;
    let mut rng = Stream::derived(seed, &[9]);
    let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-0.5, 0.5)).collect();
    Tensor::from_vec(data, &[1, 3, size, size]).expect("shape matches the data length")
}

fn report_check(name: &str, err: f64, threshold: f64, failures: &mut Vec<String>) {
    let verdict = if err < threshold { "pass" } else { "FAIL" };
    println!("{name:<28} max rel err {err:9.3e}  [{verdict}]");
    if err >= threshold {
        failures.push(format!("{name}: {err:e}"));
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    if !(1e-6..=1e-3).contains(&args.eps) {
        return Err(CliError::Usage(format!(
            "eps {:e} outside [1e-6, 1e-3]",
            args.eps
        )));
    }
    if !(args.threshold > 0.0) {
        return Err(CliError::Usage("threshold must be positive".into()));
    }
    println!(
        "checking analytic gradients against central differences (f64, eps {:.1e})",
        args.eps
    );
    let mut failures = Vec::new();
    if args.model == "all" || args.model == "swin" {
        let model =
            SwinModel::<f64>::new(SwinConfig::toy(), 31).expect("builtin toy config is valid");
        let x = random_input(SwinConfig::toy().img_size, 60).requires_grad();
        let mut leaves = vec![x.clone()];
        leaves.extend(model.named_params().into_iter().map(|(_, t)| t));
        let err = gradcheck_leaves(
            || {
                let logits = model.forward(&x).expect("toy config accepts this input");
                label_smoothed_ce(&logits, &[1], 0.1)
            },
            &leaves,
            args.eps,
        )
        .map_err(|e| CliError::Numeric(e.to_string()))?;
        report_check("swin toy (full model)", err, args.threshold, &mut failures);
    }
    if args.model == "all" || args.model == "tnt" {
        let model =
            TntModel::<f64>::new(TntConfig::toy(), 47).expect("builtin toy config is valid");
        let x = random_input(TntConfig::toy().img_size, 61).requires_grad();
        let mut leaves = vec![x.clone()];
        leaves.extend(model.named_params().into_iter().map(|(_, t)| t));
        let err = gradcheck_leaves(
            || {
                let logits = model.forward(&x).expect("toy config accepts this input");
                label_smoothed_ce(&logits, &[1], 0.1)
            },
            &leaves,
            args.eps,
        )
        .map_err(|e| CliError::Numeric(e.to_string()))?;
        report_check("tnt toy (full model)", err, args.threshold, &mut failures);
    }
    if failures.is_empty() {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "{} check(s) exceeded {:e}: {}",
            failures.len(),
            args.threshold,
            failures.join("; ")
        )))
    }
}

// ── augment preview ──────────────────────────────────────────────────

fn cmd_augment_preview(args: AugmentPreviewArgs) -> Result<(), CliError> {
    let bytes = fs::read(&args.image).map_err(|source| CliError::Io {
        path: args.image.clone(),
        source,
    })?;
    let img = decode_pnm(&bytes).map_err(|source| CliError::Image {
        path: args.image.clone(),
        source,
    })?;
    let policy = AugmentPolicy::for_size(args.size as usize);
    policy
        .validate()
        .map_err(|e| CliError::Usage(format!("augment policy: {e}")))?;
    fs::create_dir_all(&args.out_dir).map_err(|source| CliError::Io {
        path: args.out_dir.clone(),
        source,
    })?;
    for i in 0..args.count {
        let mut rng = Stream::derived(args.seed, &[i]);
        let out = train_preview(&img, &policy, &mut rng);
        let name = format!("preview_{i:02}.ppm");
        let path = args.out_dir.join(&name);
        write_atomic(&path, &encode_ppm(&out.image)).map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
        let stages: Vec<&str> = out.trace.iter().map(|s| s.name()).collect();
        println!("{name}: {}", stages.join(" -> "));
    }
    println!("wrote {} previews to {}", args.count, args.out_dir.display());
    Ok(())
}

// ── make-synthetic ───────────────────────────────────────────────────

fn cmd_make_synthetic(args: MakeSyntheticArgs) -> Result<(), CliError> {
    let manifest = generate_synthetic(
        &args.out,
        args.n as usize,
        args.size as usize,
        args.seed,
    )?;
    println!(
        "wrote {} images per class ({} total) at {}x{}",
        args.n,
        args.n * 3,
        args.size,
        args.size
    );
    println!("manifest: {}", manifest.display());
    Ok(())
}
