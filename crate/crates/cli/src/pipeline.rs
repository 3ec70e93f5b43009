//! Shared steps: split and featurize a corpus, train, score.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use ecn_core::dataset::{split_by_day, Corpus, ModelInput, SamplerConfig, SplitConfig, Vocab};
use ecn_core::metrics::auc;
use ecn_core::model::{Model, ModelConfig};
use ecn_core::records::Sample;
use ecn_core::train::{check_vocab, Labeled, RunOptions, TrainConfig, TrainHistory, Trainer};
use ecn_tensor::Real;
use serde::Serialize;

/// One split part, featurized.
pub struct Part {
    pub samples: Vec<Sample>,
    pub inputs: Vec<ModelInput>,
    pub labels: Vec<u8>,
}

impl Part {
    pub fn new(corpus: &Corpus, samples: Vec<Sample>, sampler: SamplerConfig) -> anyhow::Result<Self> {
        let inputs = corpus.model_inputs(&samples, sampler)?;
        let labels = samples.iter().map(|s| s.label).collect();
        Ok(Self {
            samples,
            inputs,
            labels,
        })
    }

    pub fn labeled(&self) -> Labeled<'_> {
        Labeled {
            inputs: &self.inputs,
            labels: &self.labels,
        }
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

pub struct Prepared {
    pub train: Part,
    pub validation: Part,
    pub test: Part,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Validation,
    Test,
    All,
}

pub fn sampler(cfg: &ModelConfig) -> SamplerConfig {
    SamplerConfig {
        seq_len: cfg.seq_len,
        k_paths: cfg.k_paths,
    }
}

pub fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

pub fn prepare(corpus: &Corpus, split: &SplitConfig, sampler: SamplerConfig) -> anyhow::Result<Prepared> {
    let s = split_by_day(&corpus.samples, split)?;
    Ok(Prepared {
        train: Part::new(corpus, s.train, sampler)?,
        validation: Part::new(corpus, s.validation, sampler)?,
        test: Part::new(corpus, s.test, sampler)?,
    })
}

/// Samples of one subset, in corpus order for `All`.
pub fn subset(corpus: &Corpus, split: &SplitConfig, which: Subset) -> anyhow::Result<Vec<Sample>> {
    if which == Subset::All {
        return Ok(corpus.samples.clone());
    }
    let s = split_by_day(&corpus.samples, split)?;
    Ok(match which {
        Subset::Train => s.train,
        Subset::Validation => s.validation,
        _ => s.test,
    })
}

pub struct Trained<T: Real> {
    pub model: Model<T>,
    pub history: TrainHistory,
    pub seconds: f64,
}

pub fn train<T: Real>(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data: &Prepared,
    vocab: Vocab,
    checkpoint_dir: Option<PathBuf>,
) -> anyhow::Result<Trained<T>> {
    check_vocab(&model_cfg, vocab)?;
    if data.train.inputs.is_empty() {
        bail!("the training split is empty");
    }
    let started = Instant::now();
    let model = Model::<T>::new(model_cfg, train_cfg.seed)?;
    let mut trainer = Trainer::new(model, train_cfg)?;
    let validation = (!data.validation.inputs.is_empty()).then(|| data.validation.labeled());
    let opts = RunOptions {
        checkpoint_dir,
        stop_at_step: None,
    };
    let history = trainer.run(data.train.labeled(), validation, &opts)?;
    Ok(Trained {
        model: trainer.into_model(),
        history,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// AUC of `model` on a part, or `None` when it holds a single class.
pub fn part_auc<T: Real>(model: &Model<T>, part: &Part, chunk: usize) -> anyhow::Result<Option<f64>> {
    if part.inputs.is_empty() {
        return Ok(None);
    }
    let scores = model.predict(&part.inputs, chunk)?;
    Ok(auc(&scores, &part.labels).ok())
}
