//! Mini-batch training, evaluation and prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AblationVariant, TrainConfig};
use crate::data::{DatasetSplit, EmbeddingArchive, Label, PostRecord, SplitPart};
use crate::error::{Error, Result};
use crate::metrics::{Confusion, Metrics};
use crate::model::{backward, forward, ModelParams};
use crate::nn::Parameters;
use crate::objective::LossBreakdown;
use crate::optim::Adam;
use crate::tensor::{lit, Scalar};

/// Parameter initialization and batch shuffling draw from separate streams of
/// the same seed.
const INIT_STREAM: u64 = 0;

pub fn init_params(config: &TrainConfig, text_dim: usize, region_dim: usize) -> ModelParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(INIT_STREAM);
    ModelParams::init(&mut rng, text_dim, region_dim, &config.dims)
}

/// Visiting order of training indices for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's training records.
    pub train_loss: LossBreakdown,
    pub eval_split: SplitPart,
    pub metrics: Metrics,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    beta: f64,
    params: ModelParams<f32>,
    adam: Adam<f32>,
    epoch: usize,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, text_dim: usize, region_dim: usize) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, text_dim, region_dim);
        Ok(Self::from_params(config, params))
    }

    pub fn from_params(config: TrainConfig, params: ModelParams<f32>) -> Self {
        Self {
            beta: config.effective_beta(),
            adam: Adam::new(config.lr, config.weight_decay),
            config,
            params,
            epoch: 0,
            step: 0,
        }
    }

    /// Replaces the partition-loss weight. Unlike the configured `beta`, zero
    /// is accepted here.
    pub fn with_effective_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn effective_beta(&self) -> f64 {
        self.beta
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<f32> {
        self.params
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimizer update on the mean loss of `batch`.
    pub fn step(&mut self, batch: &[&PostRecord]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let mut grads = self.params.zeros_like();
        let (mut l_d, mut l_p) = (0.0f64, 0.0f64);
        for post in batch {
            let trace = forward(post, &self.params, self.config.lambda, self.config.variant)?;
            let (d, p) = trace.losses();
            l_d += d as f64;
            l_p += p as f64;
            backward(&trace, &self.params, self.beta, &mut grads);
        }
        let n = batch.len() as f64;
        let loss = LossBreakdown::new(l_d / n, l_p / n, self.beta);
        if !loss.total.is_finite() {
            return Err(self.diverged(format!("loss is {}", loss.total)));
        }
        let inv: f32 = lit(1.0 / n);
        grads.visit_mut("", &mut |_, g| g.iter_mut().for_each(|x| *x *= inv));
        if !grads.all_finite() {
            return Err(self.diverged("non-finite gradient".into()));
        }
        self.adam.step(&mut self.params, &grads)?;
        if !self.params.all_finite() {
            return Err(self.diverged("non-finite parameters after update".into()));
        }
        self.step += 1;
        Ok(loss)
    }

    fn diverged(&self, detail: String) -> Error {
        Error::Divergence {
            epoch: self.epoch,
            step: self.step,
            detail,
        }
    }

    /// Runs one shuffled pass over `records`, calling `on_step` after every
    /// update. Returns the record-weighted mean loss.
    pub fn run_epoch(
        &mut self,
        records: &[&PostRecord],
        mut on_step: impl FnMut(usize, &LossBreakdown),
    ) -> Result<LossBreakdown> {
        if records.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        let order = epoch_order(self.config.seed, self.epoch, records.len());
        let (mut l_d, mut l_p) = (0.0, 0.0);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&PostRecord> = chunk.iter().map(|&i| records[i]).collect();
            let loss = self.step(&batch)?;
            l_d += loss.l_d * batch.len() as f64;
            l_p += loss.l_p * batch.len() as f64;
            on_step(self.step, &loss);
        }
        self.epoch += 1;
        let n = records.len() as f64;
        Ok(LossBreakdown::new(l_d / n, l_p / n, self.beta))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
}

fn lookup<'a>(archive: &'a EmbeddingArchive, ids: &[String]) -> Result<Vec<&'a PostRecord>> {
    ids.iter().map(|id| archive.get(id)).collect()
}

/// Trains for `config.epochs` epochs, stopping early once `stop` returns true
/// for an epoch record.
pub fn train_with(
    archive: &EmbeddingArchive,
    split: &DatasetSplit,
    config: &TrainConfig,
    mut stop: impl FnMut(&EpochRecord, &ModelParams<f32>) -> bool,
) -> Result<TrainOutcome> {
    let header = archive.header();
    let mut trainer = Trainer::new(config.clone(), header.text_dim, header.region_dim)?;
    let train_set = lookup(archive, &split.train)?;
    let (eval_split, eval_ids) = if split.val.is_empty() {
        (SplitPart::Train, &split.train)
    } else {
        (SplitPart::Val, &split.val)
    };
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let train_loss = trainer.run_epoch(&train_set, |_, _| {})?;
        let metrics = evaluate(
            trainer.params(),
            archive,
            eval_ids,
            config.lambda,
            config.variant,
        )?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            eval_split,
            metrics,
        });
        if stop(history.last().expect("just pushed"), trainer.params()) {
            break;
        }
    }
    Ok(TrainOutcome {
        params: trainer.into_params(),
        history,
    })
}

pub fn train(
    archive: &EmbeddingArchive,
    split: &DatasetSplit,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(archive, split, config, |_, _| false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub post_id: String,
    pub label: Label,
    pub predicted: Label,
    pub prob_fake: f64,
}

pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    post: &PostRecord,
    lambda: f64,
    variant: AblationVariant,
) -> Result<Prediction> {
    let trace = forward(post, params, lambda, variant)?;
    Ok(Prediction {
        post_id: post.post_id().to_string(),
        label: post.label(),
        predicted: trace.predicted(),
        prob_fake: trace.prob_fake().to_f64().unwrap_or(f64::NAN),
    })
}

pub fn predict_all<T: Scalar>(
    params: &ModelParams<T>,
    archive: &EmbeddingArchive,
    ids: &[String],
    lambda: f64,
    variant: AblationVariant,
) -> Result<Vec<Prediction>> {
    ids.iter()
        .map(|id| predict(params, archive.get(id)?, lambda, variant))
        .collect()
}

/// Metrics over `ids` at the 0.5 decision threshold.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    archive: &EmbeddingArchive,
    ids: &[String],
    lambda: f64,
    variant: AblationVariant,
) -> Result<Metrics> {
    if ids.is_empty() {
        return Err(Error::Empty("evaluation id list".into()));
    }
    let preds = predict_all(params, archive, ids, lambda, variant)?;
    let confusion = Confusion::from_pairs(preds.iter().map(|p| (p.label, p.predicted)));
    Ok(Metrics::from_confusion(confusion))
}
