//! Training orchestration: seeded epochs of augmented mini-batches, a
//! validation pass per epoch, best-checkpoint retention, and the evaluation
//! path that emits prediction records for ensembling.
//!
//! Every random draw comes from a stream derived from the run seed and a
//! purpose tag: model init, per-epoch shuffling, per-(epoch, sample)
//! augmentation, per-(epoch, batch) stochastic depth. Sample augmentation
//! keys on the dataset index rather than the batch position, so prefetch or
//! batching changes cannot alter results; a fixed `(config, seed)` pair
//! determines every reported number.

use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{eval_pipeline, train_pipeline, AugmentPolicy, StageKind};
use crate::checkpoint::{Blob, Checkpoint, CheckpointError, CheckpointMeta};
use crate::data::{DataError, Manifest};
use crate::ensemble::{self, EnsembleError, MetricReport, PredictionRecord};
use crate::image::ImageTensor;
use crate::nn::NamedParams;
use crate::optim::{adamw_step, AdamWHyper, OptState, OptimError, Schedule};
use crate::rng::{derive_seed, Stream};
use crate::swin::{SwinConfig, SwinError, SwinModel};
use crate::tensor::{label_smoothed_ce, Tensor, TensorError};
use crate::tnt::{TntConfig, TntError, TntModel};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const AUG_STREAM: u64 = 3;
const DROP_STREAM: u64 = 4;

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,val_acc,val_sens,val_spec,lr,seconds";

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Swin(#[from] SwinError),
    #[error(transparent)]
    Tnt(#[from] TntError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("non-finite loss at epoch {epoch}, step {step}; aborting with the last good checkpoint preserved")]
    NonFiniteLoss { epoch: u64, step: u64 },
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Which architecture to train, tagged for config files and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Swin(SwinConfig),
    Tnt(TntConfig),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Swin(_) => "swin",
            ModelSpec::Tnt(_) => "tnt",
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            ModelSpec::Swin(c) => c.img_size,
            ModelSpec::Tnt(c) => c.img_size,
        }
    }
}

/// A built classifier of either architecture, trained in 32-bit.
pub enum AnyModel {
    Swin(SwinModel<f32>),
    Tnt(TntModel<f32>),
}

impl AnyModel {
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self, TrainerError> {
        Ok(match spec {
            ModelSpec::Swin(cfg) => AnyModel::Swin(SwinModel::new(cfg.clone(), seed)?),
            ModelSpec::Tnt(cfg) => AnyModel::Tnt(TntModel::new(cfg.clone(), seed)?),
        })
    }

    /// Deterministic forward pass (no stochastic depth); the evaluation path.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, TrainerError> {
        Ok(match self {
            AnyModel::Swin(m) => m.forward(x)?,
            AnyModel::Tnt(m) => m.forward(x)?,
        })
    }

    /// Training forward pass. Swin consumes the stream for stochastic depth;
    /// TNT has no sample-time randomness.
    pub fn forward_train(
        &self,
        x: &Tensor<f32>,
        rng: &mut Stream,
    ) -> Result<Tensor<f32>, TrainerError> {
        Ok(match self {
            AnyModel::Swin(m) => m.forward_train(x, rng)?,
            AnyModel::Tnt(m) => m.forward(x)?,
        })
    }

    pub fn named_params(&self) -> NamedParams<f32> {
        match self {
            AnyModel::Swin(m) => m.named_params(),
            AnyModel::Tnt(m) => m.named_params(),
        }
    }
}

/// Optional schedule overrides. Anything unset is derived from the run:
/// total steps from the epoch budget, warmup of one epoch, peak rate from
/// the optimizer's `lr`, floor at a thousandth of the peak.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleOverrides {
    pub warmup_steps: Option<u64>,
    pub total_steps: Option<u64>,
    pub base_lr: Option<f64>,
    pub min_lr: Option<f64>,
    pub warmup_start_lr: Option<f64>,
}

fn default_batch_size() -> usize {
    64
}

fn default_label_smoothing() -> f64 {
    0.1
}

/// One training run, fully described. Loaded from a TOML file; unknown keys
/// are rejected so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub out_dir: PathBuf,
    pub epochs: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_label_smoothing")]
    pub label_smoothing: f64,
    /// Defaults to the standard policy resized for the model input.
    #[serde(default)]
    pub augment: Option<AugmentPolicy>,
    #[serde(default)]
    pub optimizer: AdamWHyper,
    #[serde(default)]
    pub schedule: ScheduleOverrides,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, TrainerError> {
        // An unreadable config file is a configuration problem, not a data
        // problem: keep the whole load under the Config variant.
        let text = fs::read_to_string(path)
            .map_err(|e| TrainerError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| TrainerError::Config(format!("{}: {e}", path.display())))
    }

    /// The augmentation policy in force: the configured one, or defaults
    /// sized to the model input.
    pub fn resolved_policy(&self) -> AugmentPolicy {
        self.augment
            .clone()
            .unwrap_or_else(|| AugmentPolicy::for_size(self.model.input_size()))
    }

    pub fn validate(&self) -> Result<(), TrainerError> {
        if self.batch_size < 1 {
            return Err(TrainerError::Config("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(TrainerError::Config("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(TrainerError::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        self.optimizer
            .validate()
            .map_err(|e| TrainerError::Config(format!("optimizer: {e}")))?;
        let policy = self.resolved_policy();
        policy
            .validate()
            .map_err(|e| TrainerError::Config(format!("augment: {e}")))?;
        if policy.target_size != self.model.input_size() {
            return Err(TrainerError::Config(format!(
                "augment.target_size {} does not match the model input size {}",
                policy.target_size,
                self.model.input_size()
            )));
        }
        Ok(())
    }

    /// Concretize the schedule for a run of `steps_per_epoch` optimizer
    /// steps per epoch.
    pub fn resolve_schedule(&self, steps_per_epoch: u64) -> Result<Schedule, TrainerError> {
        let total_steps = self
            .schedule
            .total_steps
            .unwrap_or_else(|| (self.epochs * steps_per_epoch).max(1));
        let warmup_steps = self
            .schedule
            .warmup_steps
            .unwrap_or_else(|| steps_per_epoch.min(total_steps.saturating_sub(1)));
        let base_lr = self.schedule.base_lr.unwrap_or(self.optimizer.lr);
        let min_lr = self.schedule.min_lr.unwrap_or(base_lr * 1e-3);
        let warmup_start_lr = self.schedule.warmup_start_lr.unwrap_or(min_lr);
        let schedule = Schedule {
            warmup_steps,
            total_steps,
            base_lr,
            min_lr,
            warmup_start_lr,
        };
        schedule
            .validate()
            .map_err(|e| TrainerError::Config(format!("schedule: {e}")))?;
        Ok(schedule)
    }
}

/// Per-epoch training and validation summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_acc: f64,
    /// Macro-averaged over classes with support.
    pub val_sens: f64,
    pub val_spec: f64,
    /// Schedule position after the epoch's steps.
    pub lr: f64,
    pub seconds: f64,
}

impl EpochReport {
    /// CSV row matching [`EPOCH_CSV_HEADER`]. `seconds` is wall time and the
    /// one column that varies between otherwise identical runs.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.8},{:.3}",
            self.epoch,
            self.train_loss,
            self.val_acc,
            self.val_sens,
            self.val_spec,
            self.lr,
            self.seconds
        )
    }
}

/// Result of a completed run. The best checkpoint (highest validation
/// accuracy, earliest epoch on ties) is already on disk.
#[derive(Debug)]
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    pub best_epoch: u64,
    pub best_val_accuracy: f64,
    pub best_checkpoint: PathBuf,
    pub epochs_csv: PathBuf,
}

/// An image skipped during evaluation, with the decode failure.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedImage {
    pub image_id: String,
    pub reason: String,
}

/// Evaluation result: metrics, one record per readable image in manifest
/// order, and the skipped-image sidecar.
#[derive(Debug)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub records: Vec<PredictionRecord>,
    pub skipped: Vec<SkippedImage>,
}

fn stack_batch(images: &[ImageTensor], size: usize) -> Result<Tensor<f32>, TrainerError> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::from_vec(data, &[images.len(), 3, size, size])?)
}

fn load_train_batch(
    manifest: &Manifest,
    batch: &[usize],
    policy: &AugmentPolicy,
    seed: u64,
    epoch: u64,
) -> Result<(Tensor<f32>, Vec<usize>), TrainerError> {
    let mut images = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for &idx in batch {
        let img = manifest.load_image(idx)?;
        let mut rng = Stream::derived(seed, &[AUG_STREAM, epoch, idx as u64]);
        let out = train_pipeline(&img, policy, &mut rng);
        debug_assert_eq!(out.trace.len(), 5, "train pipeline must run all stages");
        images.push(out.image);
        labels.push(manifest.entries()[idx].label.index());
    }
    Ok((stack_batch(&images, policy.target_size)?, labels))
}

/// Capture the current parameters and optimizer state as a checkpoint.
pub fn snapshot(
    spec: &ModelSpec,
    params: &NamedParams<f32>,
    state: &OptState<f32>,
    epoch: u64,
    val_accuracy: f64,
    base_seed: u64,
) -> Result<Checkpoint, TrainerError> {
    let model = serde_json::to_value(spec)
        .map_err(|e| TrainerError::Config(format!("model spec encode: {e}")))?;
    let meta = CheckpointMeta {
        model,
        epoch,
        val_accuracy,
        opt_step: state.step_count(),
        base_seed,
    };
    let blobs = params
        .iter()
        .map(|(name, p)| Blob {
            name: name.clone(),
            values: p.to_vec(),
        })
        .collect();
    let mut opt_m = Vec::new();
    let mut opt_v = Vec::new();
    for (name, m, v) in state.entries() {
        opt_m.push(Blob {
            name: name.to_string(),
            values: m.to_vec(),
        });
        opt_v.push(Blob {
            name: name.to_string(),
            values: v.to_vec(),
        });
    }
    Ok(Checkpoint {
        meta,
        params: blobs,
        opt_m,
        opt_v,
    })
}

/// Rebuild the model a checkpoint was saved from and load its weights.
/// Blob names and sizes must match the freshly built model exactly.
pub fn restore_model(ckpt: &Checkpoint) -> Result<(ModelSpec, AnyModel), TrainerError> {
    let spec: ModelSpec = serde_json::from_value(ckpt.meta.model.clone())
        .map_err(|e| TrainerError::CheckpointMismatch(format!("unrecognized model spec: {e}")))?;
    let model = AnyModel::build(&spec, ckpt.meta.base_seed)?;
    let params = model.named_params();
    if params.len() != ckpt.params.len() {
        return Err(TrainerError::CheckpointMismatch(format!(
            "{} parameter blobs for a model with {} parameters",
            ckpt.params.len(),
            params.len()
        )));
    }
    for ((name, p), blob) in params.iter().zip(&ckpt.params) {
        if *name != blob.name {
            return Err(TrainerError::CheckpointMismatch(format!(
                "expected blob {name:?}, found {:?}",
                blob.name
            )));
        }
        if p.numel() != blob.values.len() {
            return Err(TrainerError::CheckpointMismatch(format!(
                "blob {name:?} holds {} values for a parameter of {}",
                blob.values.len(),
                p.numel()
            )));
        }
        p.set_data(&blob.values);
    }
    Ok((spec, model))
}

/// Rebuild optimizer state from a checkpoint, if it carries one.
pub fn restore_opt_state(ckpt: &Checkpoint) -> Option<OptState<f32>> {
    if ckpt.opt_m.is_empty() {
        return None;
    }
    let entries = ckpt
        .opt_m
        .iter()
        .zip(&ckpt.opt_v)
        .map(|(m, v)| (m.name.clone(), m.values.clone(), v.values.clone()))
        .collect();
    Some(OptState::from_entries(ckpt.meta.opt_step, entries))
}

/// Score `model` on every readable image in the manifest using the
/// deterministic evaluation pipeline. Unreadable images are skipped and
/// listed in the sidecar; everything else becomes one prediction record, in
/// manifest order.
pub fn evaluate(
    model: &AnyModel,
    manifest: &Manifest,
    policy: &AugmentPolicy,
    batch_size: usize,
) -> Result<EvalOutcome, TrainerError> {
    if batch_size < 1 {
        return Err(TrainerError::Config("batch_size must be >= 1".into()));
    }
    let size = policy.target_size;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut pending: Vec<(usize, ImageTensor)> = Vec::new();

    fn flush(
        model: &AnyModel,
        manifest: &Manifest,
        pending: &mut Vec<(usize, ImageTensor)>,
        size: usize,
        records: &mut Vec<PredictionRecord>,
    ) -> Result<(), TrainerError> {
        if pending.is_empty() {
            return Ok(());
        }
        let images: Vec<ImageTensor> = pending.iter().map(|(_, img)| img.clone()).collect();
        let x = stack_batch(&images, size)?;
        let logits = model.forward(&x)?;
        let probs = logits.softmax(1)?;
        let flat = probs.to_vec();
        for (row, (idx, _)) in pending.iter().enumerate() {
            let p = [
                flat[row * 3] as f64,
                flat[row * 3 + 1] as f64,
                flat[row * 3 + 2] as f64,
            ];
            records.push(PredictionRecord::new(
                manifest.entries()[*idx].path.clone(),
                p,
            ));
        }
        pending.clear();
        Ok(())
    }

    for idx in 0..manifest.len() {
        match manifest.load_image(idx) {
            Ok(img) => {
                let out = eval_pipeline(&img, policy);
                assert_eq!(
                    out.trace,
                    vec![StageKind::Resize, StageKind::Normalize],
                    "evaluation must not run random stages"
                );
                pending.push((idx, out.image));
                if pending.len() == batch_size {
                    flush(model, manifest, &mut pending, size, &mut records)?;
                }
            }
            Err(e) => skipped.push(SkippedImage {
                image_id: manifest.entries()[idx].path.clone(),
                reason: e.to_string(),
            }),
        }
    }
    flush(model, manifest, &mut pending, size, &mut records)?;

    let truth = ensemble::truth_map(manifest);
    let report = ensemble::evaluate_records(&records, &truth)?;
    Ok(EvalOutcome {
        report,
        records,
        skipped,
    })
}

/// Run the full training loop. Per epoch: a seeded shuffle into mini-batches,
/// the train pipeline per sample, forward, label-smoothed cross-entropy,
/// backward, one AdamW step at the scheduled rate; then a validation pass.
/// The checkpoint with the highest validation accuracy so far (earliest epoch
/// on ties) is kept at `out_dir/best.ckpt`, and `out_dir/epochs.csv` receives
/// one appended row per epoch. A non-finite loss or gradient aborts the run;
/// the best checkpoint written so far stays on disk.
pub fn train_run(cfg: &RunConfig) -> Result<TrainOutcome, TrainerError> {
    cfg.validate()?;
    let train = Manifest::load(&cfg.train_manifest)?;
    let val = Manifest::load(&cfg.val_manifest)?;
    let policy = cfg.resolved_policy();

    let model = AnyModel::build(&cfg.model, derive_seed(cfg.seed, &[INIT_STREAM]))?;
    let params = model.named_params();
    let mut state = OptState::new(&params);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let schedule = cfg.resolve_schedule(steps_per_epoch)?;

    fs::create_dir_all(&cfg.out_dir).map_err(|source| TrainerError::Io {
        path: cfg.out_dir.clone(),
        source,
    })?;
    let epochs_csv = cfg.out_dir.join("epochs.csv");
    let best_path = cfg.out_dir.join("best.ckpt");
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| TrainerError::Io {
            path: path.clone(),
            source,
        }
    };
    fs::write(&epochs_csv, format!("{EPOCH_CSV_HEADER}\n")).map_err(io_err(&epochs_csv))?;

    let mut reports: Vec<EpochReport> = Vec::with_capacity(cfg.epochs as usize);
    let mut best: Option<(u64, f64)> = None;
    let mut global_step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        Stream::derived(cfg.seed, &[SHUFFLE_STREAM, epoch]).shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = load_train_batch(&train, batch, &policy, cfg.seed, epoch)?;
            let mut drop_rng =
                Stream::derived(cfg.seed, &[DROP_STREAM, epoch, batch_no as u64]);
            let logits = model.forward_train(&x, &mut drop_rng)?;
            let loss = label_smoothed_ce(&logits, &labels, cfg.label_smoothing)?;
            let loss_val = loss.item() as f64;
            if !loss_val.is_finite() {
                return Err(TrainerError::NonFiniteLoss {
                    epoch,
                    step: global_step,
                });
            }
            for (_, p) in &params {
                p.zero_grad();
            }
            loss.backward()?;
            adamw_step(&params, &mut state, &cfg.optimizer, schedule.lr_at(global_step))?;
            global_step += 1;
            loss_sum += loss_val * batch.len() as f64;
            seen += batch.len();
        }

        let eval = evaluate(&model, &val, &policy, cfg.batch_size)?;
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_acc: eval.report.accuracy,
            val_sens: eval.report.macro_sensitivity,
            val_spec: eval.report.macro_specificity,
            lr: schedule.lr_at(global_step),
            seconds: started.elapsed().as_secs_f64(),
        };
        let mut file = fs::OpenOptions::new()
            .append(true)
            .open(&epochs_csv)
            .map_err(io_err(&epochs_csv))?;
        writeln!(file, "{}", report.csv_row()).map_err(io_err(&epochs_csv))?;

        if best.is_none_or(|(_, acc)| report.val_acc > acc) {
            best = Some((epoch, report.val_acc));
            let ckpt = snapshot(
                &cfg.model,
                &params,
                &state,
                epoch,
                report.val_acc,
                cfg.seed,
            )?;
            ckpt.save(&best_path)?;
        }
        reports.push(report);
    }

    let (best_epoch, best_val_accuracy) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        reports,
        best_epoch,
        best_val_accuracy,
        best_checkpoint: best_path,
        epochs_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ClassLabel};

    fn toy_tnt() -> ModelSpec {
        ModelSpec::Tnt(TntConfig::toy())
    }

    fn run_config(dir: &Path, epochs: u64, seed: u64) -> RunConfig {
        let train_manifest = generate_synthetic(&dir.join("train"), 4, 16, 100 + seed).unwrap();
        let val_manifest = generate_synthetic(&dir.join("val"), 2, 16, 200 + seed).unwrap();
        RunConfig {
            model: toy_tnt(),
            train_manifest,
            val_manifest,
            out_dir: dir.join("run"),
            epochs,
            batch_size: 6,
            seed,
            label_smoothing: 0.1,
            augment: None,
            optimizer: AdamWHyper::default(),
            schedule: ScheduleOverrides::default(),
        }
    }

    #[test]
    fn toml_config_parses_with_defaults() {
        let text = r#"
            epochs = 3
            seed = 9
            train_manifest = "data/train.csv"
            val_manifest = "data/val.csv"
            out_dir = "runs/demo"

            [model]
            kind = "tnt"
            img_size = 16
            sentence_patch = 8
            word_patch = 4
            outer_dim = 16
            inner_dim = 8
            depth = 2
            outer_heads = 2
            inner_heads = 2
            mlp_ratio = 2.0
            num_classes = 3
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.label_smoothing, 0.1);
        assert_eq!(cfg.optimizer, AdamWHyper::default());
        assert_eq!(cfg.schedule, ScheduleOverrides::default());
        assert_eq!(cfg.model, toy_tnt());
        assert_eq!(cfg.model.input_size(), 16);
        assert!(cfg.augment.is_none());
        assert_eq!(cfg.resolved_policy().target_size, 16);

        let with_typo = text.replace("epochs = 3", "epochs = 3\nbatch_sise = 3");
        assert!(
            toml::from_str::<RunConfig>(&with_typo).is_err(),
            "top-level typos must be rejected"
        );
        let with_model_typo = format!("{text}\nimg_sise = 16\n");
        assert!(
            toml::from_str::<RunConfig>(&with_model_typo).is_err(),
            "model-table typos must be rejected"
        );
    }

    #[test]
    fn config_validation_rejects_degenerate_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = run_config(dir.path(), 1, 0);
        cfg.batch_size = 0;
        assert!(matches!(cfg.validate(), Err(TrainerError::Config(_))));
        let mut cfg = run_config(dir.path(), 1, 0);
        cfg.epochs = 0;
        assert!(matches!(cfg.validate(), Err(TrainerError::Config(_))));
        let mut cfg = run_config(dir.path(), 1, 0);
        cfg.label_smoothing = 1.0;
        assert!(matches!(cfg.validate(), Err(TrainerError::Config(_))));
        let mut cfg = run_config(dir.path(), 1, 0);
        cfg.augment = Some(AugmentPolicy::for_size(32));
        assert!(matches!(cfg.validate(), Err(TrainerError::Config(_))));
        let mut cfg = run_config(dir.path(), 1, 0);
        cfg.train_manifest = dir.path().join("missing.csv");
        assert!(matches!(train_run(&cfg), Err(TrainerError::Data(_))));
    }

    #[test]
    fn schedule_resolution_uses_the_epoch_budget() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = run_config(dir.path(), 3, 0);
        // 12 train images, batch 6 -> 2 steps per epoch
        let s = cfg.resolve_schedule(2).unwrap();
        assert_eq!(s.total_steps, 6);
        assert_eq!(s.warmup_steps, 2);
        assert_eq!(s.base_lr, cfg.optimizer.lr);
        assert_eq!(s.min_lr, cfg.optimizer.lr * 1e-3);
        assert_eq!(s.warmup_start_lr, s.min_lr);

        let mut with_overrides = cfg;
        with_overrides.schedule = ScheduleOverrides {
            warmup_steps: Some(0),
            total_steps: Some(10),
            base_lr: Some(0.01),
            min_lr: Some(0.001),
            warmup_start_lr: Some(0.0),
        };
        let s = with_overrides.resolve_schedule(2).unwrap();
        assert_eq!((s.warmup_steps, s.total_steps), (0, 10));
        assert_eq!((s.base_lr, s.min_lr, s.warmup_start_lr), (0.01, 0.001, 0.0));
    }

    #[test]
    fn training_smoke_run_reports_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = run_config(dir.path(), 4, 5);
        let outcome = train_run(&cfg).unwrap();

        assert_eq!(outcome.reports.len(), 4);
        let ln3 = 3.0f64.ln();
        assert!(
            (outcome.reports[0].train_loss - ln3).abs() < 0.2,
            "first-epoch loss {} should start near ln 3 = {ln3:.4}",
            outcome.reports[0].train_loss
        );
        for r in &outcome.reports {
            assert!(r.train_loss.is_finite());
            for metric in [r.val_acc, r.val_sens, r.val_spec] {
                assert!((0.0..=1.0).contains(&metric));
            }
        }
        let max_acc = outcome
            .reports
            .iter()
            .map(|r| r.val_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(outcome.best_val_accuracy, max_acc);
        let first_best = outcome
            .reports
            .iter()
            .find(|r| r.val_acc == max_acc)
            .unwrap()
            .epoch;
        assert_eq!(outcome.best_epoch, first_best, "ties must keep the earlier epoch");

        let csv = fs::read_to_string(&outcome.epochs_csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], EPOCH_CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("1,"));

        let ckpt = Checkpoint::load(&outcome.best_checkpoint).unwrap();
        assert_eq!(ckpt.meta.epoch, outcome.best_epoch);
        assert_eq!(ckpt.meta.val_accuracy, outcome.best_val_accuracy);
        assert_eq!(ckpt.meta.base_seed, cfg.seed);
        let (spec, _model) = restore_model(&ckpt).unwrap();
        assert_eq!(spec, cfg.model);
        let state = restore_opt_state(&ckpt).unwrap();
        assert!(state.step_count() > 0);
    }

    #[test]
    fn zero_lr_schedule_keeps_parameters_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = run_config(dir.path(), 1, 3);
        cfg.schedule = ScheduleOverrides {
            warmup_steps: Some(0),
            total_steps: None,
            base_lr: Some(0.0),
            min_lr: Some(0.0),
            warmup_start_lr: Some(0.0),
        };
        let outcome = train_run(&cfg).unwrap();
        let ckpt = Checkpoint::load(&outcome.best_checkpoint).unwrap();

        let init = AnyModel::build(&cfg.model, derive_seed(cfg.seed, &[INIT_STREAM])).unwrap();
        for ((name, p), blob) in init.named_params().iter().zip(&ckpt.params) {
            assert_eq!(*name, blob.name);
            let init_bits: Vec<u32> = p.to_vec().iter().map(|v| v.to_bits()).collect();
            let saved_bits: Vec<u32> = blob.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(init_bits, saved_bits, "parameter {name} moved under lr 0");
        }
        // the optimizer still advanced
        assert_eq!(ckpt.meta.opt_step, 2);
    }

    #[test]
    fn reruns_are_deterministic_apart_from_wall_time() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = run_config(dir.path(), 2, 11);
        a.out_dir = dir.path().join("run-a");
        let mut b = a.clone();
        b.out_dir = dir.path().join("run-b");

        let out_a = train_run(&a).unwrap();
        let out_b = train_run(&b).unwrap();

        for (ra, rb) in out_a.reports.iter().zip(&out_b.reports) {
            assert_eq!(ra.epoch, rb.epoch);
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.val_acc.to_bits(), rb.val_acc.to_bits());
            assert_eq!(ra.val_sens.to_bits(), rb.val_sens.to_bits());
            assert_eq!(ra.val_spec.to_bits(), rb.val_spec.to_bits());
            assert_eq!(ra.lr.to_bits(), rb.lr.to_bits());
        }
        let strip_seconds = |text: &str| -> String {
            text.lines()
                .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap())
                .collect::<Vec<_>>()
                .join("\n")
        };
        let csv_a = fs::read_to_string(&out_a.epochs_csv).unwrap();
        let csv_b = fs::read_to_string(&out_b.epochs_csv).unwrap();
        assert_eq!(strip_seconds(&csv_a), strip_seconds(&csv_b));
        assert_eq!(
            fs::read(&out_a.best_checkpoint).unwrap(),
            fs::read(&out_b.best_checkpoint).unwrap(),
            "best checkpoints must be byte-identical"
        );
    }

    fn constant_covid_model() -> AnyModel {
        // zeroed parameters silence every path; the head bias then fixes the
        // logits at (1, 0, 0) for any input
        let model = AnyModel::build(&toy_tnt(), 1).unwrap();
        for (name, p) in model.named_params() {
            if name == "head.bias" {
                p.set_data(&[1.0, 0.0, 0.0]);
            } else {
                p.set_data(&vec![0.0; p.numel()]);
            }
        }
        model
    }

    #[test]
    fn evaluate_constant_model_on_all_covid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let full = generate_synthetic(dir.path(), 3, 16, 21).unwrap();
        let all = Manifest::load(&full).unwrap();
        // manifest restricted to the COVID-19 rows
        let rows: String = all
            .entries()
            .iter()
            .filter(|e| e.label == ClassLabel::Covid19)
            .map(|e| format!("{},{}\n", e.path, e.label.name()))
            .collect();
        let covid_path = dir.path().join("covid_only.csv");
        fs::write(&covid_path, format!("path,label\n{rows}")).unwrap();
        let covid = Manifest::load(&covid_path).unwrap();

        let model = constant_covid_model();
        let policy = AugmentPolicy::for_size(16);
        let out = evaluate(&model, &covid, &policy, 2).unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.skipped.is_empty());
        assert_eq!(out.report.accuracy, 1.0);
        for r in &out.records {
            assert_eq!(r.pred_label, 0);
            let sum: f64 = r.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn evaluate_skips_unreadable_images_into_the_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = generate_synthetic(dir.path(), 2, 16, 33).unwrap();
        fs::write(dir.path().join("images/broken.pgm"), b"not a pnm file").unwrap();
        let mut body = fs::read_to_string(&manifest_path).unwrap();
        body.push_str("images/broken.pgm,Normal\n");
        body.push_str("images/absent.pgm,Pneumonia\n");
        fs::write(&manifest_path, body).unwrap();

        let manifest = Manifest::load(&manifest_path).unwrap();
        assert_eq!(manifest.len(), 8);
        let model = constant_covid_model();
        let out = evaluate(&model, &manifest, &AugmentPolicy::for_size(16), 4).unwrap();
        assert_eq!(out.records.len(), manifest.len() - out.skipped.len());
        assert_eq!(out.skipped.len(), 2);
        let ids: Vec<&str> = out.skipped.iter().map(|s| s.image_id.as_str()).collect();
        assert_eq!(ids, vec!["images/broken.pgm", "images/absent.pgm"]);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_evaluation_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = run_config(dir.path(), 1, 17);
        let outcome = train_run(&cfg).unwrap();
        let ckpt = Checkpoint::load(&outcome.best_checkpoint).unwrap();
        let (_, restored) = restore_model(&ckpt).unwrap();

        let val = Manifest::load(&cfg.val_manifest).unwrap();
        let policy = cfg.resolved_policy();
        let a = evaluate(&restored, &val, &policy, cfg.batch_size).unwrap();
        let b = evaluate(&restored, &val, &policy, cfg.batch_size).unwrap();
        for (ra, rb) in a.records.iter().zip(&b.records) {
            for k in 0..3 {
                assert_eq!(ra.probs[k].to_bits(), rb.probs[k].to_bits());
            }
        }
        // a fresh roundtrip of the restored weights is bit-identical
        let params = restored.named_params();
        let state = restore_opt_state(&ckpt).unwrap();
        let again = snapshot(&cfg.model, &params, &state, ckpt.meta.epoch, ckpt.meta.val_accuracy, cfg.seed)
            .unwrap();
        assert_eq!(again.to_bytes().unwrap(), ckpt.to_bytes().unwrap());
    }

    #[test]
    fn restore_rejects_mismatched_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = run_config(dir.path(), 1, 23);
        let outcome = train_run(&cfg).unwrap();
        let mut ckpt = Checkpoint::load(&outcome.best_checkpoint).unwrap();
        ckpt.meta.model = serde_json::json!({"kind": "nope"});
        assert!(matches!(
            restore_model(&ckpt),
            Err(TrainerError::CheckpointMismatch(_))
        ));

        let mut truncated = Checkpoint::load(&outcome.best_checkpoint).unwrap();
        truncated.params[0].values.pop();
        truncated.opt_m[0].values.pop();
        truncated.opt_v[0].values.pop();
        assert!(matches!(
            restore_model(&truncated),
            Err(TrainerError::CheckpointMismatch(_))
        ));
    }
}
