//! Region rehearsal: finished slides are broken into regions, and replay
//! bags are assembled from random same-class regions.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::buffer::{RegionBufferItem, ReplayBuffer};
use super::{run_epochs, Schedule, TrainError, TrainReport};
use crate::aggregator::{self, AggregatorParams};
use crate::datagen::SlideBag;

/// Offers every region of `bag` to the reservoir as its own item.
pub fn buro_store(buffer: &mut ReplayBuffer<RegionBufferItem>, bag: &SlideBag, rng: &mut impl Rng) {
    for region in &bag.regions {
        buffer.reservoir_insert_with(rng, || RegionBufferItem {
            region: region.clone(),
            label: bag.label,
            source_slide: bag.slide_id.clone(),
        });
    }
}

/// Picks a stored class uniformly, then `regions_per_bag` of its regions
/// with replacement.
pub fn buro_sample(
    buffer: &ReplayBuffer<RegionBufferItem>,
    regions_per_bag: usize,
    rng: &mut impl Rng,
) -> Result<SlideBag, TrainError> {
    let classes: BTreeSet<usize> = buffer.items().iter().map(|i| i.label.global_id).collect();
    if classes.is_empty() || regions_per_bag == 0 {
        return Err(TrainError::EmptyBuffer);
    }
    let class = *classes
        .iter()
        .nth(rng.random_range(0..classes.len()))
        .expect("index below class count");
    let pool: Vec<&RegionBufferItem> = buffer.items().iter().filter(|i| i.label.global_id == class).collect();
    let regions = (0..regions_per_bag)
        .map(|_| pool[rng.random_range(0..pool.len())].region.clone())
        .collect();
    Ok(SlideBag {
        slide_id: format!("replay-{class}"),
        label: pool[0].label,
        regions,
    })
}

/// Cross-entropy on the current slide plus `replay_weight` times the
/// cross-entropy of one recombined bag; the task's train slides are stored
/// once training on it ends.
pub fn train_buro(
    params: &mut AggregatorParams,
    train: &[SlideBag],
    buffer: &mut ReplayBuffer<RegionBufferItem>,
    replay_weight: f64,
    regions_per_bag: usize,
    schedule: &Schedule,
) -> Result<TrainReport, TrainError> {
    let lr = schedule.learning_rate;
    let replaying = replay_weight != 0.0 && !buffer.is_empty() && regions_per_bag > 0;
    let store: &ReplayBuffer<RegionBufferItem> = buffer;
    let mut step = |p: &mut AggregatorParams, bag: &SlideBag, rng: &mut ChaCha8Rng| {
        let (mut loss, mut grads, _) = aggregator::loss_and_grad(bag, &bag.label, p)?;
        if replaying {
            let replay = buro_sample(store, regions_per_bag, rng)?;
            let (ce, g, _) = aggregator::loss_and_grad(&replay, &replay.label, p)?;
            loss += replay_weight * ce;
            grads.add_scaled(&g, replay_weight);
        }
        aggregator::sgd_step(p, &grads, lr)?;
        Ok(loss)
    };
    let (report, mut rng) = run_epochs(params, train, schedule, &mut step)?;
    for bag in train {
        buro_store(buffer, bag, &mut rng);
    }
    Ok(report)
}
