//! Training loop, evaluation and run records.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::batchformer::BatchFormerModel;
use crate::config::LabConfig;
use crate::data::{make_batches, LongTailDataset};
use crate::error::{LabError, Result};
use crate::graph::Graph;
use crate::loss::{Loss, LossKind};
use crate::metrics::{split_accuracy, GroupRule, Metrics};
use crate::nn::{Frame, Mode};
use crate::optim::{sgd_step, GroupLr, LrSchedule, SgdState};
use crate::rng::{substream, Stream};
use crate::tensor::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Step,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub bf_lr_mult: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: ScheduleKind,
    /// Used by the step schedule only.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub loss: LossKind,
    pub batchformer: bool,
    pub encoder_layers: usize,
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: 0.05,
            bf_lr_mult: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: ScheduleKind::Step,
            lr_milestones: vec![24],
            lr_gamma: 0.1,
            loss: LossKind::BalancedSoftmax,
            batchformer: true,
            encoder_layers: 1,
            seed: 0,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(LabError::config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if !(self.bf_lr_mult >= 0.0 && self.bf_lr_mult.is_finite()) {
            return Err(LabError::config("bf_lr_mult must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LabError::config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(LabError::config("weight_decay must be non-negative"));
        }
        if self.batch_size < 2 {
            return Err(LabError::config("batch_size must be at least 2"));
        }
        if self.eval_batch_size == 0 {
            return Err(LabError::config("eval_batch_size must be positive"));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return Err(LabError::config("lr_gamma must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        match self.lr_schedule {
            ScheduleKind::Constant => LrSchedule::Constant,
            ScheduleKind::Cosine => LrSchedule::Cosine,
            ScheduleKind::Step => LrSchedule::Step {
                milestones: self.lr_milestones.clone(),
                gamma: self.lr_gamma,
            },
        }
    }

    pub fn group_lr(&self, epoch: usize) -> GroupLr {
        GroupLr {
            base: self.base_lr * self.schedule().factor(epoch, self.epochs),
            bf_mult: self.bf_lr_mult,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-batch training losses.
    pub train_loss: f64,
    pub metrics: Metrics,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: LabConfig,
    pub initial_metrics: Metrics,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
    pub wall_time_s: f64,
}

impl RunRecord {
    /// Metrics after the last epoch, or the initial evaluation.
    pub fn final_metrics(&self) -> &Metrics {
        self.epochs
            .last()
            .map_or(&self.initial_metrics, |e| &e.metrics)
    }
}

/// The step at which the loss stopped being finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub message: String,
    pub partial: RunRecord,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Lab(#[from] LabError),
    #[error("training diverged at epoch {} step {}: {}", .0.epoch, .0.step, .0.message)]
    Diverged(Box<Divergence>),
}

pub struct TrainOutcome {
    pub model: BatchFormerModel,
    pub record: RunRecord,
}

/// Argmax of [`BatchFormerModel::inference_forward`] over the test set in
/// chunks of `batch_size`, scored per group.
pub fn evaluate(
    model: &BatchFormerModel,
    ds: &LongTailDataset,
    rule: GroupRule,
    batch_size: usize,
) -> Result<Metrics> {
    if batch_size == 0 {
        return Err(LabError::contract("evaluation batch size must be positive"));
    }
    let mut preds = Vec::with_capacity(ds.test_len());
    let idx: Vec<usize> = (0..ds.test_len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, _) = ds.test_batch(chunk)?;
        let logits = model.inference_forward(&x)?;
        preds.extend(logits.rows().map(argmax));
    }
    split_accuracy(&preds, &ds.test_y, &ds.counts, rule)
}

/// Full training run. Deterministic for a fixed config.
pub fn train(config: &LabConfig, ds: &LongTailDataset) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let tc = &config.train;
    if ds.num_classes() != config.model.classes || ds.input_dim() != config.model.input_dim {
        return Err(LabError::contract(format!(
            "dataset has {} classes of dim {}, model expects {} of dim {}",
            ds.num_classes(),
            ds.input_dim(),
            config.model.classes,
            config.model.input_dim
        ))
        .into());
    }
    let started = Instant::now();
    let mut model = BatchFormerModel::init(config.model.clone(), tc.seed)?;
    let trainable = model.trainable_ids(tc.batchformer);
    let loss = Loss::new(tc.loss, &ds.counts);
    let mut shuffle_rng = substream(tc.seed, Stream::Shuffle);
    let mut dropout_rng = substream(tc.seed, Stream::Dropout);
    let mut state = SgdState::new();

    let mut record = RunRecord {
        config: config.clone(),
        initial_metrics: evaluate(&model, ds, config.group_rule, tc.eval_batch_size)?,
        epochs: Vec::with_capacity(tc.epochs),
        checkpoint: None,
        wall_time_s: 0.0,
    };

    for epoch in 0..tc.epochs {
        let epoch_start = Instant::now();
        let lr = tc.group_lr(epoch);
        let mut losses = Vec::new();
        for (step, batch) in make_batches(ds, tc.batch_size, &mut shuffle_rng)?
            .iter()
            .enumerate()
        {
            let (x, y) = ds.train_batch(batch)?;
            let mut graph = Graph::new();
            let mut frame = Frame::new(&mut graph, &model.store);
            let outcome = model
                .training_loss(
                    &mut frame,
                    &x,
                    &y,
                    &loss,
                    tc.batchformer,
                    Mode::Train(&mut dropout_rng),
                )
                .and_then(|l| Ok((l, frame.graph.value(l).item()?)));
            let (loss_var, value) = match outcome {
                Ok((l, v)) if v.is_finite() => (l, v),
                Ok((_, v)) => {
                    return Err(diverged(
                        &record,
                        started,
                        epoch,
                        step,
                        v,
                        lr.base,
                        "non-finite loss".into(),
                    ))
                }
                Err(LabError::NonFinite { op }) => {
                    return Err(diverged(
                        &record,
                        started,
                        epoch,
                        step,
                        f64::NAN,
                        lr.base,
                        format!("non-finite values in {op}"),
                    ))
                }
                Err(e) => return Err(e.into()),
            };
            let grads = frame.graph.backward(loss_var)?;
            let param_grads = frame.param_grads(&grads);
            sgd_step(
                &mut model.store,
                &param_grads,
                &trainable,
                lr,
                tc.momentum,
                tc.weight_decay,
                &mut state,
            )?;
            losses.push(value);
        }
        let metrics = evaluate(&model, ds, config.group_rule, tc.eval_batch_size)?;
        record.epochs.push(EpochRecord {
            epoch,
            lr: lr.base,
            train_loss: if losses.is_empty() {
                0.0
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            },
            metrics,
            wall_time_s: epoch_start.elapsed().as_secs_f64(),
        });
    }
    record.wall_time_s = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { model, record })
}

fn diverged(
    record: &RunRecord,
    started: Instant,
    epoch: usize,
    step: usize,
    loss: f64,
    lr: f64,
    message: String,
) -> TrainError {
    let mut partial = record.clone();
    partial.wall_time_s = started.elapsed().as_secs_f64();
    TrainError::Diverged(Box::new(Divergence {
        epoch,
        step,
        loss,
        lr,
        message,
        partial,
    }))
}
