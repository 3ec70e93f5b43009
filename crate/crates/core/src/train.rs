//! Mini-batch Adam training with validation tracking and resumable checkpoints.
//!
//! Epoch `e` visits the training set in the order of a Fisher–Yates shuffle
//! seeded with `seed + e`. The last, partial batch is kept. Because the
//! order depends only on the epoch, a run resumed from a checkpoint's Adam
//! step replays exactly the batches an uninterrupted run would have seen.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ecn_tensor::{adam_step, AdamConfig, AdamState, Checkpoint, CheckpointError, Real, Tape, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::features::{ModelInput, Vocab};
use crate::metrics::auc;
use crate::model::{bce_loss, Model, ModelConfig, ModelError};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("optimizer failed at step {step}: {source}")]
    Optimizer { step: u64, source: TensorError },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("{inputs} inputs but {labels} labels")]
    LabelCount { inputs: usize, labels: usize },
    #[error("invalid train config `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("model vocabulary {model:?} does not match the data {data:?}")]
    VocabMismatch { model: Vocab, data: Vocab },
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Validate every this many steps; `None` validates at each epoch end.
    pub validate_every: Option<u64>,
    /// Stop after this many validations without a new best AUC.
    pub patience: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            epochs: 5,
            learning_rate: 0.001,
            seed: 0,
            validate_every: None,
            patience: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, reason: &str| {
            Err(TrainError::Config {
                field,
                reason: reason.to_string(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        if self.validate_every == Some(0) {
            return bad("validate_every", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Stored as JSON in every checkpoint's metadata field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub best_val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epoch_seconds: Vec<f64>,
    pub best: Option<(u64, f64)>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,val_auc\n");
        for r in &self.steps {
            let auc = r.val_auc.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", r.step, r.loss, auc);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Inputs with their labels.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a> {
    pub inputs: &'a [ModelInput],
    pub labels: &'a [u8],
}

impl<'a> Labeled<'a> {
    pub fn new(inputs: &'a [ModelInput], labels: &'a [u8]) -> Result<Self, TrainError> {
        if inputs.len() != labels.len() {
            return Err(TrainError::LabelCount {
                inputs: inputs.len(),
                labels: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }
}

pub fn check_vocab(model: &ModelConfig, data: Vocab) -> Result<(), TrainError> {
    if model.vocab != data {
        return Err(TrainError::VocabMismatch {
            model: model.vocab,
            data,
        });
    }
    Ok(())
}

/// Where checkpoints go and when to stop early.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once the Adam step counter reaches this value.
    pub stop_at_step: Option<u64>,
}

pub struct Trainer<T: Real> {
    model: Model<T>,
    adam: AdamState<T>,
    config: TrainConfig,
    best_val_auc: Option<f64>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let adam = AdamState::new(model.params(), config.adam());
        Ok(Self {
            model,
            adam,
            config,
            best_val_auc: None,
        })
    }

    /// Restores model, optimizer and training config from a checkpoint.
    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self, TrainError> {
        let meta: CheckpointMeta = serde_json::from_str(&ckpt.metadata)?;
        meta.train.validate()?;
        let model = Model::from_params(meta.model, ckpt.params)?;
        Ok(Self {
            model,
            adam: ckpt.adam,
            config: meta.train,
            best_val_auc: meta.best_val_auc,
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn into_model(self) -> Model<T> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn adam(&self) -> &AdamState<T> {
        &self.adam
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.adam.step()
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<T>, TrainError> {
        let meta = CheckpointMeta {
            model: self.model.config().clone(),
            train: self.config.clone(),
            best_val_auc: self.best_val_auc,
        };
        Ok(Checkpoint {
            params: self.model.params().clone(),
            adam: self.adam.clone(),
            metadata: serde_json::to_string(&meta)?,
        })
    }

    /// One forward/backward/update on a batch. Returns the batch loss.
    pub fn train_step(&mut self, batch: &[&ModelInput], labels: &[u8]) -> Result<f64, TrainError> {
        let step = self.adam.step() + 1;
        let (loss, grads) = {
            let mut tape = Tape::with_params(self.model.params());
            let out = self.model.forward(&mut tape, batch)?;
            let loss = bce_loss(&mut tape, out.scores, labels)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    what: "loss".into(),
                    step,
                });
            }
            let grads = tape.backward(loss).map_err(ModelError::from)?.into_params();
            (value, grads)
        };
        adam_step(self.model.params_mut(), &grads, &mut self.adam, self.config.learning_rate).map_err(|e| match e {
            TensorError::NonFiniteGradient(name) => TrainError::NonFinite {
                what: format!("gradient of `{name}`"),
                step,
            },
            source => TrainError::Optimizer { step, source },
        })?;
        Ok(loss)
    }

    /// Validation AUC, or `None` when the set is empty or single-class.
    pub fn evaluate(&self, data: Labeled<'_>) -> Result<Option<f64>, TrainError> {
        if data.inputs.is_empty() {
            return Ok(None);
        }
        let scores = self.model.predict(data.inputs, self.config.batch_size)?;
        Ok(auc(&scores, data.labels).ok())
    }

    fn batches_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    fn save(&self, dir: &Option<PathBuf>, name: &str) -> Result<(), TrainError> {
        if let Some(dir) = dir {
            std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                path: dir.clone(),
                source,
            })?;
            self.checkpoint()?.save(&dir.join(name))?;
        }
        Ok(())
    }

    /// Trains from the current step to the end of the last epoch (or
    /// `opts.stop_at_step`). Saves the best-validation and final
    /// checkpoints plus `history.csv` when a directory is given.
    pub fn run(
        &mut self,
        train: Labeled<'_>,
        validation: Option<Labeled<'_>>,
        opts: &RunOptions,
    ) -> Result<TrainHistory, TrainError> {
        if train.inputs.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        let per_epoch = self.batches_per_epoch(train.inputs.len());
        let total = per_epoch * self.config.epochs as u64;
        let stop = opts.stop_at_step.map_or(total, |s| s.min(total));
        let mut history = TrainHistory::default();
        let mut since_best = 0usize;
        let bs = self.config.batch_size;
        'epochs: while self.step() < stop {
            let epoch = (self.step() / per_epoch) as usize;
            let started = Instant::now();
            let mut order: Vec<usize> = (0..train.inputs.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64)));
            let first = (self.step() % per_epoch) as usize;
            for (b, chunk) in order.chunks(bs).enumerate().skip(first) {
                let batch: Vec<&ModelInput> = chunk.iter().map(|&i| &train.inputs[i]).collect();
                let labels: Vec<u8> = chunk.iter().map(|&i| train.labels[i]).collect();
                let loss = self.train_step(&batch, &labels)?;
                let step = self.step();
                let epoch_end = b + 1 == per_epoch as usize;
                let due = match self.config.validate_every {
                    Some(k) => step % k == 0,
                    None => epoch_end,
                };
                let mut val_auc = None;
                if due {
                    if let Some(v) = validation {
                        val_auc = self.evaluate(v)?;
                    }
                }
                history.steps.push(StepRecord {
                    step,
                    epoch,
                    loss,
                    val_auc,
                });
                if let Some(a) = val_auc {
                    if self.best_val_auc.is_none_or(|best| a > best) {
                        self.best_val_auc = Some(a);
                        history.best = Some((step, a));
                        since_best = 0;
                        self.save(&opts.checkpoint_dir, BEST_CHECKPOINT)?;
                    } else {
                        since_best += 1;
                    }
                }
                if self.config.patience.is_some_and(|p| since_best >= p) || step >= stop {
                    history.epoch_seconds.push(started.elapsed().as_secs_f64());
                    break 'epochs;
                }
            }
            history.epoch_seconds.push(started.elapsed().as_secs_f64());
        }
        self.save(&opts.checkpoint_dir, FINAL_CHECKPOINT)?;
        if let Some(dir) = &opts.checkpoint_dir {
            history.write_csv(&dir.join(HISTORY_FILE))?;
        }
        Ok(history)
    }
}
