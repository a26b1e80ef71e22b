//! Training-based lifelong strategies and the sequential task driver.
//!
//! Every trainer consumes only a task's train split. Within one call two
//! deterministic RNG streams are derived from the seed: stream 0 orders the
//! slides of each epoch, stream 1 drives buffer draws.

mod buffer;
mod buro;
mod derpp;
mod ewc;

pub use buffer::{
    decode_buffer, encode_buffer, load_buffer, write_buffer, BufferSnapshot, RegionBufferItem, ReplayBuffer,
    ReplayItemDer, Slot, BUFFER_MAGIC,
};
pub use buro::{buro_sample, buro_store, train_buro};
pub use derpp::{derpp_loss, derpp_loss_with, train_derpp, DerppWeights};
pub use ewc::{
    estimate_fisher_diag, ewc_loss_and_grad, ewc_penalty, ewc_penalty_grad, train_ewc, EwcAnchor, EwcState,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aggregator::{self, grow_head, AggregatorKind, AggregatorParams, ModelError};
use crate::datagen::{DataError, SlideBag, TaskDataset};
use crate::eval::{evaluate_row, AccuracyMatrix, ConfidenceRecord, EvalError, TrainedClassifier};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("diverged at epoch {epoch}, step {step} (slide {slide_id}): {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        slide_id: String,
        detail: String,
    },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("EWC state does not fit the model: {0}")]
    State(String),
    #[error("buffer sampling failed: buffer is empty")]
    EmptyBuffer,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Epoch count, step size and seed shared by every trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-step objective of each epoch, measured before each update.
    pub step_losses: Vec<f64>,
    /// Mean cross-entropy over the train split after each epoch.
    pub epoch_losses: Vec<f64>,
}

const STREAM_ORDER: u64 = 0;
const STREAM_REPLAY: u64 = 1;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Mean cross-entropy of `params` over `bags`.
pub fn mean_cross_entropy(params: &AggregatorParams, bags: &[SlideBag]) -> Result<f64, ModelError> {
    if bags.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for bag in bags {
        let trace = aggregator::forward(bag, params)?;
        total += aggregator::cross_entropy_grad(&trace.logits, bag.label.global_id)?.0;
    }
    Ok(total / bags.len() as f64)
}

/// One update on `bag`: returns the objective measured before the update.
pub(crate) type StepFn<'a> =
    dyn FnMut(&mut AggregatorParams, &SlideBag, &mut ChaCha8Rng) -> Result<f64, TrainError> + 'a;

/// Shuffled per-slide passes over `train`, calling `step` once per slide.
pub(crate) fn run_epochs(
    params: &mut AggregatorParams,
    train: &[SlideBag],
    schedule: &Schedule,
    step: &mut StepFn<'_>,
) -> Result<(TrainReport, ChaCha8Rng), TrainError> {
    let mut order_rng = stream(schedule.seed, STREAM_ORDER);
    let mut replay_rng = stream(schedule.seed, STREAM_REPLAY);
    let mut report = TrainReport::default();
    if schedule.epochs == 0 {
        return Ok((report, replay_rng));
    }
    if train.is_empty() {
        return Err(TrainError::Empty("train split"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        for (step_index, &i) in order.iter().enumerate() {
            let bag = &train[i];
            let diverged = |detail: String| TrainError::Divergence {
                epoch,
                step: step_index,
                slide_id: bag.slide_id.clone(),
                detail,
            };
            let loss = match step(params, bag, &mut replay_rng) {
                Ok(l) => l,
                Err(TrainError::Model(ModelError::Divergence(d))) => return Err(diverged(d)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}")));
            }
            sum += loss;
        }
        report.step_losses.push(sum / train.len() as f64);
        report.epoch_losses.push(mean_cross_entropy(params, train)?);
    }
    Ok((report, replay_rng))
}

/// Plain per-slide SGD on cross-entropy.
pub fn train_finetune(
    params: &mut AggregatorParams,
    train: &[SlideBag],
    schedule: &Schedule,
) -> Result<TrainReport, TrainError> {
    let lr = schedule.learning_rate;
    let mut step = |p: &mut AggregatorParams, bag: &SlideBag, _: &mut ChaCha8Rng| {
        let (loss, grads, _) = aggregator::loss_and_grad(bag, &bag.label, p)?;
        aggregator::sgd_step(p, &grads, lr)?;
        Ok(loss)
    };
    Ok(run_epochs(params, train, schedule, &mut step)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Finetune,
    Ewc { lambda: f64 },
    Derpp { capacity: usize, weights: DerppWeights },
    Buro { capacity: usize, replay_weight: f64, regions_per_bag: usize },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Finetune => "finetune",
            Strategy::Ewc { .. } => "ewc",
            Strategy::Derpp { .. } => "derpp",
            Strategy::Buro { .. } => "buro",
        }
    }

    pub fn capacity(&self) -> Option<usize> {
        match *self {
            Strategy::Derpp { capacity, .. } | Strategy::Buro { capacity, .. } => Some(capacity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceConfig {
    pub kind: AggregatorKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Trainer state that outlives one task.
#[derive(Debug, Clone, PartialEq)]
pub enum Memory {
    None,
    Ewc(EwcState),
    Der(ReplayBuffer<ReplayItemDer>),
    Regions(ReplayBuffer<RegionBufferItem>),
}

#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub class_il: AccuracyMatrix,
    pub task_il: AccuracyMatrix,
    pub records: Vec<ConfidenceRecord>,
    pub params: AggregatorParams,
    pub memory: Memory,
    pub reports: Vec<TrainReport>,
}

/// Seed for task `t` of a run seeded with `seed`.
pub fn task_seed(seed: u64, task: usize) -> u64 {
    seed ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Learns `tasks` in order, evaluating every seen task's test split after each.
pub fn run_sequence(
    tasks: &[TaskDataset],
    strategy: &Strategy,
    config: &SequenceConfig,
) -> Result<SequenceRun, TrainError> {
    let dim = tasks
        .iter()
        .flat_map(TaskDataset::all_slides)
        .next()
        .map(SlideBag::dim)
        .ok_or(TrainError::Empty("task sequence"))?;
    let mut params = AggregatorParams::init(config.kind, dim, config.seed);
    let mut memory = match *strategy {
        Strategy::Finetune => Memory::None,
        Strategy::Ewc { lambda } => Memory::Ewc(EwcState::new(lambda)),
        Strategy::Derpp { capacity, .. } => Memory::Der(ReplayBuffer::new(capacity)),
        Strategy::Buro { capacity, .. } => Memory::Regions(ReplayBuffer::new(capacity)),
    };
    let mut class_il = AccuracyMatrix::new();
    let mut task_il = AccuracyMatrix::new();
    let mut records = Vec::new();
    let mut reports = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        grow_head(&mut params, task.class_count);
        let schedule = Schedule {
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            seed: task_seed(config.seed, t),
        };
        let report = match (strategy, &mut memory) {
            (Strategy::Finetune, _) => train_finetune(&mut params, &task.train, &schedule)?,
            (Strategy::Ewc { .. }, Memory::Ewc(state)) => train_ewc(&mut params, &task.train, state, &schedule)?,
            (Strategy::Derpp { weights, .. }, Memory::Der(buf)) => {
                train_derpp(&mut params, &task.train, buf, *weights, &schedule)?
            }
            (
                Strategy::Buro {
                    replay_weight,
                    regions_per_bag,
                    ..
                },
                Memory::Regions(buf),
            ) => train_buro(&mut params, &task.train, buf, *replay_weight, *regions_per_bag, &schedule)?,
            _ => unreachable!("memory is built from the strategy"),
        };
        reports.push(report);
        let seen = &tasks[..=t];
        let classifier = TrainedClassifier::new(&params, seen)?;
        let row = evaluate_row(&classifier, seen, t)?;
        class_il.push_row(row.ci)?;
        task_il.push_row(row.ti)?;
        records.extend(row.records);
    }
    Ok(SequenceRun {
        class_il,
        task_il,
        records,
        params,
        memory,
        reports,
    })
}
