//! DER++: cross-entropy on the current slide, logit distillation on one
//! replayed slide and cross-entropy on another.

use rand_chacha::ChaCha8Rng;

use super::buffer::{ReplayBuffer, ReplayItemDer};
use super::{run_epochs, Schedule, TrainError, TrainReport};
use crate::aggregator::{self, AggregatorParams, Gradients};
use crate::datagen::SlideBag;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerppWeights {
    /// Weight of the logit-matching term.
    pub alpha: f64,
    /// Weight of the replayed-label term.
    pub beta: f64,
}

/// Composite loss for explicit replay items; absent items contribute nothing.
/// The logit term is the mean squared error over the stored logit length.
pub fn derpp_loss_with(
    params: &AggregatorParams,
    current: &SlideBag,
    distill: Option<&ReplayItemDer>,
    labeled: Option<&SlideBag>,
    weights: DerppWeights,
) -> Result<(f64, Gradients, Vec<f64>), TrainError> {
    let (mut loss, mut grads, trace) = aggregator::loss_and_grad(current, &current.label, params)?;
    if let Some(item) = distill.filter(|_| weights.alpha != 0.0) {
        let replay = aggregator::forward(&item.bag, params)?;
        let n = item.stored_logits.len().min(replay.logits.len());
        if n > 0 {
            let mut dz = vec![0.0; replay.logits.len()];
            let mut mse = 0.0;
            for j in 0..n {
                let diff = replay.logits[j] - item.stored_logits[j];
                mse += diff * diff;
                dz[j] = weights.alpha * 2.0 * diff / n as f64;
            }
            loss += weights.alpha * mse / n as f64;
            grads.add_scaled(&aggregator::backward_from_logits(&replay, &dz, params), 1.0);
        }
    }
    if let Some(bag) = labeled.filter(|_| weights.beta != 0.0) {
        let (ce, g, _) = aggregator::loss_and_grad(bag, &bag.label, params)?;
        loss += weights.beta * ce;
        grads.add_scaled(&g, weights.beta);
    }
    Ok((loss, grads, trace.logits))
}

/// Composite loss drawing one distillation item and one labeled item
/// uniformly from `buffer`. Draws are skipped for zero weights or an empty
/// buffer, leaving `rng` untouched. Also returns the current slide's logits.
pub fn derpp_loss(
    params: &AggregatorParams,
    current: &SlideBag,
    buffer: &ReplayBuffer<ReplayItemDer>,
    weights: DerppWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients, Vec<f64>), TrainError> {
    let distill = if weights.alpha != 0.0 { buffer.sample(rng) } else { None };
    let labeled = if weights.beta != 0.0 { buffer.sample(rng).map(|i| &i.bag) } else { None };
    derpp_loss_with(params, current, distill, labeled, weights)
}

/// Each step updates on the composite loss, then offers the current slide
/// to the reservoir with the logits computed in that step's forward pass.
pub fn train_derpp(
    params: &mut AggregatorParams,
    train: &[SlideBag],
    buffer: &mut ReplayBuffer<ReplayItemDer>,
    weights: DerppWeights,
    schedule: &Schedule,
) -> Result<TrainReport, TrainError> {
    let lr = schedule.learning_rate;
    let mut step = |p: &mut AggregatorParams, bag: &SlideBag, rng: &mut ChaCha8Rng| {
        let (loss, grads, logits) = derpp_loss(p, bag, buffer, weights, rng)?;
        aggregator::sgd_step(p, &grads, lr)?;
        buffer.reservoir_insert_with(rng, || ReplayItemDer {
            bag: bag.clone(),
            stored_logits: logits,
        });
        Ok(loss)
    };
    Ok(run_epochs(params, train, schedule, &mut step)?.0)
}
