//! Seeded training loop, early stopping and multi-seed experiments.
//!
//! A run writes into its output directory:
//!
//! * `model.ckpt`, the parameters of the best validation epoch
//! * `scores.csv`, one row per epoch: `epoch,val_f1,val_iou,train_loss`
//! * `record.json`, the [`RunRecord`], written last so its presence marks a
//!   completed run

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, derive_seed, hide_optical, load_dataset, random_crop, worker_rng, Dataset, Sample};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions};
use crate::losses::{batch_loss, sample_loss_grad, LossConfig, LossReport};
use crate::models::{build_model, save_checkpoint, BackboneConfig, ModelBundle, Variant};
use crate::nn::{AdamW, AdamWConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SCORES_FILE: &str = "scores.csv";
pub const RECORD_FILE: &str = "record.json";
pub const SUMMARY_FILE: &str = "summary.json";

const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub num_runs: usize,
    /// Probability of hiding the optical image of a multi-modal training sample.
    pub dropout_rate_train: f64,
    /// Binarisation threshold for validation scores.
    pub threshold: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Proposed,
            backbone: BackboneConfig::default(),
            loss: LossConfig::default(),
            learning_rate: 1e-5,
            weight_decay: 0.01,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            patch_size: 64,
            seed: 0,
            num_runs: 5,
            dropout_rate_train: 0.1,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        self.backbone.check_patch(self.patch_size)?;
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return fail(format!(
                "need 0 < patience < max_epochs, got patience {} and max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if self.num_runs == 0 {
            return fail("num_runs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.dropout_rate_train) {
            return fail(format!("dropout_rate_train {} outside [0, 1]", self.dropout_rate_train));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        EvalOptions {
            threshold: self.threshold,
            ..Default::default()
        }
        .validate()
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate as f32,
            weight_decay: self.weight_decay as f32,
            ..Default::default()
        }
    }
}

/// Patience counter over a score that should increase. Only strict
/// improvements reset the counter.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the score of `epoch`; returns whether it is a new best.
    pub fn update(&mut self, epoch: usize, score: f64) -> bool {
        if self.best.map_or(true, |b| score > b) {
            self.best = Some(score);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochScore {
    pub epoch: usize,
    pub val_f1: f64,
    pub val_iou: f64,
    /// Mean per-sample loss over the epoch.
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub epochs_run: usize,
    pub checkpoint: PathBuf,
    pub scores: Vec<EpochScore>,
    pub wall_clock_seconds: f64,
}

/// Training samples of one epoch, in batch order: shuffled with an
/// epoch-derived seed, cropped, augmented and, with probability
/// `dropout_rate_train`, stripped of their optical image.
pub fn prepare_epoch(train: &Dataset, config: &TrainConfig, epoch: usize) -> Result<Vec<Sample>> {
    let mut rng = worker_rng(config.seed, 0, epoch as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|i| {
            let s = &train.samples()[i];
            let s = random_crop(s, config.patch_size, &mut rng)?;
            let s = augment(&s, &mut rng)?;
            Ok(hide_optical(s, config.dropout_rate_train, &mut rng))
        })
        .collect()
}

/// One optimiser step on a mini-batch; returns the summed loss and the
/// per-sample reports.
pub fn train_step(
    bundle: &mut ModelBundle,
    optimizer: &mut AdamW,
    batch: &[Sample],
    loss: &LossConfig,
) -> Result<(f64, Vec<LossReport>)> {
    let pass = bundle.forward_train(batch)?;
    let mut reports = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    for (out, s) in pass.outputs.iter().zip(batch) {
        let (r, g) = sample_loss_grad(out, &s.label, loss)?;
        reports.push(r);
        grads.push(g);
    }
    let total = batch_loss(&reports)?;
    if !total.is_finite() {
        return Err(Error::Internal("non-finite batch loss".into()));
    }
    bundle.backward(pass, &grads)?;
    optimizer.step(&mut bundle.params());
    Ok((total, reports))
}

/// Initial parameters of a run.
pub fn init_model(config: &TrainConfig) -> Result<ModelBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, INIT_STREAM]));
    let mut bundle = build_model(config.variant, &config.backbone, &mut rng)?;
    bundle.seed = config.seed;
    Ok(bundle)
}

fn write_scores(path: &Path, scores: &[EpochScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    w.write_record(["epoch", "val_f1", "val_iou", "train_loss"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for s in scores {
        w.write_record([
            s.epoch.to_string(),
            s.val_f1.to_string(),
            s.val_iou.to_string(),
            s.train_loss.to_string(),
        ])
        .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains one model on in-memory splits and writes the run files into `out`.
pub fn train_on(config: &TrainConfig, train: &Dataset, val: &Dataset, out: &Path) -> Result<RunRecord> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty train and validation splits (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let started = Instant::now();
    let checkpoint = out.join(CHECKPOINT_FILE);
    let mut bundle = init_model(config)?;
    let mut optimizer = AdamW::new(config.optimizer());
    let mut stopper = EarlyStopping::new(config.patience);
    let eval = EvalOptions {
        threshold: config.threshold,
        ..Default::default()
    };
    let mut scores = Vec::new();

    for epoch in 1..=config.max_epochs {
        let samples = prepare_epoch(train, config, epoch)?;
        let mut loss_sum = 0.0;
        for (b, batch) in samples.chunks(config.batch_size).enumerate() {
            let (loss, _) = train_step(&mut bundle, &mut optimizer, batch, &config.loss).map_err(|e| match e {
                Error::Internal(m) if m == "non-finite batch loss" => Error::NonFiniteLoss { epoch, batch: b + 1 },
                other => other,
            })?;
            loss_sum += loss;
        }
        let metrics = evaluate(&bundle, val, &eval)?;
        let all = metrics.all.expect("validation split is not empty");
        let score = EpochScore {
            epoch,
            val_f1: all.f1,
            val_iou: all.iou,
            train_loss: loss_sum / samples.len() as f64,
        };
        scores.push(score);
        let improved = stopper.update(epoch, all.f1);
        if improved {
            save_checkpoint(&bundle, Some(epoch), Some(all.f1), &checkpoint)?;
        }
        info!(
            "{} seed {} epoch {epoch}: loss {:.4} val F1 {:.4}{}",
            config.variant,
            config.seed,
            score.train_loss,
            all.f1,
            if improved { " *" } else { "" }
        );
        if stopper.should_stop() {
            debug!("early stop after epoch {epoch}");
            break;
        }
    }
    write_scores(&out.join(SCORES_FILE), &scores)?;
    let record = RunRecord {
        variant: config.variant,
        seed: config.seed,
        best_epoch: stopper.best_epoch(),
        best_val_f1: stopper.best().expect("at least one epoch ran"),
        epochs_run: scores.len(),
        checkpoint,
        scores,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join(RECORD_FILE), &record)?;
    Ok(record)
}

/// Loads the `train` and `val` splits from `data_root` and trains one model.
pub fn train(config: &TrainConfig, data_root: &Path, out: &Path) -> Result<RunRecord> {
    config.validate()?;
    let train = load_dataset(data_root, "train")?;
    let val = load_dataset(data_root, "val")?;
    train_on(config, &train, &val, out)
}

/// Run summary without timing, so identical runs give identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub epochs_run: usize,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: TrainConfig,
    pub runs: Vec<RunSummary>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn completed_run(dir: &Path) -> Option<RunRecord> {
    if !dir.join(CHECKPOINT_FILE).is_file() {
        return None;
    }
    let text = fs::read_to_string(dir.join(RECORD_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// Trains `num_runs` models with seeds `seed, seed + 1, ...` into
/// `out/seed_<N>/` and writes `out/summary.json`. With `resume`, seeds whose
/// run files are complete are loaded instead of retrained.
pub fn run_experiment_on(
    config: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    out: &Path,
    resume: bool,
) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let mut records = Vec::with_capacity(config.num_runs);
    for k in 0..config.num_runs as u64 {
        let seed = config.seed + k;
        let dir = seed_dir(out, seed);
        if resume {
            if let Some(r) = completed_run(&dir).filter(|r| r.seed == seed && r.variant == config.variant) {
                info!("{} seed {seed}: complete, skipping", config.variant);
                records.push(r);
                continue;
            }
        }
        let run_config = TrainConfig { seed, ..*config };
        let record = train_on(&run_config, train, val, &dir).map_err(|e| Error::Run {
            seed,
            source: Box::new(e),
        })?;
        records.push(record);
    }
    let summary = ExperimentSummary {
        config: *config,
        runs: records
            .iter()
            .map(|r| RunSummary {
                seed: r.seed,
                best_epoch: r.best_epoch,
                best_val_f1: r.best_val_f1,
                epochs_run: r.epochs_run,
                checkpoint: r.checkpoint.strip_prefix(out).unwrap_or(&r.checkpoint).to_path_buf(),
            })
            .collect(),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(records)
}

pub fn run_experiment(config: &TrainConfig, data_root: &Path, out: &Path, resume: bool) -> Result<Vec<RunRecord>> {
    config.validate()?;
    let train = load_dataset(data_root, "train")?;
    let val = load_dataset(data_root, "val")?;
    run_experiment_on(config, &train, &val, out, resume)
}
