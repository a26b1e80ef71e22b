//! Elastic weight consolidation with an empirical diagonal Fisher.
//!
//! The anchor holds the parameters and Fisher diagonal from the end of the
//! previous task. Head rows added after the anchor was taken are not
//! penalized; since rows are appended, the anchored part of every segment is
//! a prefix.

use rand_chacha::ChaCha8Rng;

use super::{run_epochs, Schedule, TrainError, TrainReport};
use crate::aggregator::{self, AggregatorParams, Gradients};
use crate::datagen::SlideBag;

#[derive(Debug, Clone, PartialEq)]
pub struct EwcAnchor {
    pub params: AggregatorParams,
    pub fisher: Gradients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EwcState {
    pub lambda: f64,
    pub anchor: Option<EwcAnchor>,
}

impl EwcState {
    pub fn new(lambda: f64) -> Self {
        Self { lambda, anchor: None }
    }
}

/// Mean over `train` of the squared log-likelihood gradient of the true label.
pub fn estimate_fisher_diag(params: &AggregatorParams, train: &[SlideBag]) -> Result<Gradients, TrainError> {
    if train.is_empty() {
        return Err(TrainError::Empty("train split for the Fisher estimate"));
    }
    let mut fisher = Gradients::zeros_like(params);
    for bag in train {
        let grads = aggregator::backward(bag, &bag.label, params)?;
        for (f, g) in fisher.segments_mut().into_iter().zip(grads.segments()) {
            for (fi, gi) in f.iter_mut().zip(g) {
                *fi += gi * gi;
            }
        }
    }
    let n = train.len() as f64;
    for f in fisher.segments_mut() {
        for fi in f.iter_mut() {
            *fi /= n;
        }
    }
    Ok(fisher)
}

fn check_anchor(params: &AggregatorParams, anchor: &EwcAnchor) -> Result<(), TrainError> {
    if params.kind != anchor.params.kind || params.dim != anchor.params.dim {
        return Err(TrainError::State(format!(
            "anchor is {:?}/dim {}, model is {:?}/dim {}",
            anchor.params.kind, anchor.params.dim, params.kind, params.dim
        )));
    }
    let current = params.segments();
    for ((a, f), p) in anchor.params.segments().iter().zip(anchor.fisher.segments()).zip(current) {
        if a.len() != f.len() || a.len() > p.len() {
            return Err(TrainError::State(format!(
                "anchored segment of {} entries against {} parameters",
                a.len(),
                p.len()
            )));
        }
    }
    Ok(())
}

/// `(lambda / 2) Σ F (θ − θ*)²` over anchored entries.
pub fn ewc_penalty(params: &AggregatorParams, state: &EwcState) -> Result<f64, TrainError> {
    let Some(anchor) = &state.anchor else {
        return Ok(0.0);
    };
    check_anchor(params, anchor)?;
    let mut sum = 0.0;
    for ((theta, star), fisher) in params
        .segments()
        .into_iter()
        .zip(anchor.params.segments())
        .zip(anchor.fisher.segments())
    {
        for ((t, s), f) in theta.iter().zip(star).zip(fisher) {
            sum += f * (t - s) * (t - s);
        }
    }
    Ok(0.5 * state.lambda * sum)
}

/// `lambda F (θ − θ*)` on anchored entries, zero elsewhere.
pub fn ewc_penalty_grad(params: &AggregatorParams, state: &EwcState) -> Result<Gradients, TrainError> {
    let mut grads = Gradients::zeros_like(params);
    let Some(anchor) = &state.anchor else {
        return Ok(grads);
    };
    check_anchor(params, anchor)?;
    for (((g, theta), star), fisher) in grads
        .segments_mut()
        .into_iter()
        .zip(params.segments())
        .zip(anchor.params.segments())
        .zip(anchor.fisher.segments())
    {
        for (((gi, t), s), f) in g.iter_mut().zip(theta).zip(star).zip(fisher) {
            *gi = state.lambda * f * (t - s);
        }
    }
    Ok(grads)
}

/// Cross-entropy plus penalty, with the exact gradient of the sum.
pub fn ewc_loss_and_grad(
    bag: &SlideBag,
    params: &AggregatorParams,
    state: &EwcState,
) -> Result<(f64, Gradients), TrainError> {
    let (ce, mut grads, _) = aggregator::loss_and_grad(bag, &bag.label, params)?;
    let penalty = ewc_penalty(params, state)?;
    grads.add_scaled(&ewc_penalty_grad(params, state)?, 1.0);
    Ok((ce + penalty, grads))
}

/// Exact minimizer of `‖θ − θ'‖² / (2 lr) + penalty` over anchored entries.
fn proximal_pull(params: &mut AggregatorParams, anchor: &EwcAnchor, lambda: f64, lr: f64) {
    for ((theta, star), fisher) in params
        .segments_mut()
        .into_iter()
        .zip(anchor.params.segments())
        .zip(anchor.fisher.segments())
    {
        for ((t, s), f) in theta.iter_mut().zip(star).zip(fisher) {
            let k = lr * lambda * f;
            *t = (*t + k * s) / (1.0 + k);
        }
    }
}

/// SGD on cross-entropy with the penalty applied as an implicit step, so
/// large `lambda · F` pins anchored entries instead of overshooting. Then
/// re-anchors on the result and this task's Fisher.
pub fn train_ewc(
    params: &mut AggregatorParams,
    train: &[SlideBag],
    state: &mut EwcState,
    schedule: &Schedule,
) -> Result<TrainReport, TrainError> {
    if let Some(anchor) = &state.anchor {
        check_anchor(params, anchor)?;
    }
    let lr = schedule.learning_rate;
    let lambda = state.lambda;
    let anchor = state.anchor.as_ref();
    let mut step = |p: &mut AggregatorParams, bag: &SlideBag, _: &mut ChaCha8Rng| {
        let (ce, grads, _) = aggregator::loss_and_grad(bag, &bag.label, p)?;
        let penalty = ewc_penalty(p, state)?;
        aggregator::sgd_step(p, &grads, lr)?;
        if let Some(anchor) = anchor {
            proximal_pull(p, anchor, lambda, lr);
        }
        Ok(ce + penalty)
    };
    let (report, _) = run_epochs(params, train, schedule, &mut step)?;
    let fisher = estimate_fisher_diag(params, train)?;
    state.anchor = Some(EwcAnchor {
        params: params.clone(),
        fisher,
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::gradcheck::{max_error, random_bag, random_params};
    use crate::aggregator::{grow_head, AggregatorKind};
    use crate::datagen::{generate_task_sequence, Region, SyntheticConfig, TaskDataset};
    use crate::primitives::GlobalLabel;
    use crate::trainers::train_finetune;
    use rand::{Rng, SeedableRng};

    fn label(g: usize) -> GlobalLabel {
        GlobalLabel {
            task_index: 0,
            local_class: g,
            global_id: g,
        }
    }

    fn flat(dim: usize, classes: usize, values: &[f64]) -> AggregatorParams {
        let mut p = AggregatorParams::zeros(AggregatorKind::Mean, dim);
        grow_head(&mut p, classes);
        p.head_weights = values[..dim * classes].to_vec();
        p.head_bias = values[dim * classes..].to_vec();
        p
    }

    fn state_with(anchor: AggregatorParams, fisher: Gradients, lambda: f64) -> EwcState {
        EwcState {
            lambda,
            anchor: Some(EwcAnchor { params: anchor, fisher }),
        }
    }

    #[test]
    fn penalty_examples() {
        // Two anchored head weights with F = [1, 2].
        let star = flat(1, 2, &[0.0, 0.0, 0.0, 0.0]);
        let mut fisher = Gradients::zeros_like(&star);
        fisher.head_weights = vec![1.0, 2.0];
        let theta = flat(1, 2, &[1.0, 1.0, 0.0, 0.0]);
        let state = state_with(star.clone(), fisher.clone(), 1.0);
        assert!((ewc_penalty(&theta, &state).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(ewc_penalty(&star, &state).unwrap(), 0.0);
        let zero = state_with(star, fisher, 0.0);
        assert_eq!(ewc_penalty(&theta, &zero).unwrap(), 0.0);
        assert_eq!(ewc_penalty(&theta, &EwcState::new(5.0)).unwrap(), 0.0);
    }

    #[test]
    fn rows_added_after_the_anchor_are_free() {
        let star = flat(1, 1, &[0.0, 0.0]);
        let mut fisher = Gradients::zeros_like(&star);
        fisher.head_weights = vec![1.0];
        let state = state_with(star, fisher, 2.0);
        let mut theta = flat(1, 2, &[0.0, 7.0, 0.0, 3.0]);
        assert_eq!(ewc_penalty(&theta, &state).unwrap(), 0.0);
        theta.head_weights[0] = 1.0;
        assert!((ewc_penalty(&theta, &state).unwrap() - 1.0).abs() < 1e-15);
        let g = ewc_penalty_grad(&theta, &state).unwrap();
        assert_eq!(g.head_weights, vec![2.0, 0.0]);
    }

    #[test]
    fn incongruent_anchor_is_a_state_error() {
        let star = flat(1, 3, &[0.0; 6]);
        let fisher = Gradients::zeros_like(&star);
        let state = state_with(star, fisher, 1.0);
        let theta = flat(1, 2, &[0.0; 4]);
        assert!(matches!(ewc_penalty(&theta, &state), Err(TrainError::State(_))));
    }

    fn region(v: &[f32]) -> Region {
        Region {
            embedding: v.to_vec(),
            patches: Vec::new(),
        }
    }

    fn bag(regions: Vec<Region>, y: usize) -> SlideBag {
        SlideBag {
            slide_id: format!("toy-{y}"),
            label: label(y),
            regions,
        }
    }

    #[test]
    fn fisher_matches_hand_gradients() {
        // Mean pooling, dim 3, two classes, two slides.
        let params = flat(3, 2, &[0.5, -0.25, 1.0, -0.5, 0.75, 0.0, 0.1, -0.2]);
        let slides = vec![
            bag(vec![region(&[1.0, 0.0, 2.0]), region(&[0.0, 2.0, 0.0])], 0),
            bag(vec![region(&[-1.0, 1.0, 1.0])], 1),
        ];
        let fisher = estimate_fisher_diag(&params, &slides).unwrap();

        // d(-log p_y)/dz_k = p_k - [k = y]; dW_k = that times the pooled embedding.
        let mut expected_w = [0.0f64; 6];
        let mut expected_b = [0.0f64; 2];
        for (s, y) in [([0.5f64, 1.0, 1.0], 0usize), ([-1.0, 1.0, 1.0], 1)] {
            let z0 = 0.5 * s[0] - 0.25 * s[1] + 1.0 * s[2] + 0.1;
            let z1 = -0.5 * s[0] + 0.75 * s[1] + 0.0 * s[2] - 0.2;
            let p0 = 1.0 / (1.0 + (z1 - z0).exp());
            let dz = [p0 - (y == 0) as u8 as f64, (1.0 - p0) - (y == 1) as u8 as f64];
            for k in 0..2 {
                expected_b[k] += dz[k] * dz[k] / 2.0;
                for d in 0..3 {
                    expected_w[k * 3 + d] += (dz[k] * s[d]).powi(2) / 2.0;
                }
            }
        }
        for (a, e) in fisher.head_weights.iter().zip(expected_w) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        for (a, e) in fisher.head_bias.iter().zip(expected_b) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!(fisher.attention_v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn confident_model_has_zero_fisher() {
        let params = flat(2, 2, &[0.0, 0.0, 0.0, 0.0, 1000.0, -1000.0]);
        let slides = vec![bag(vec![region(&[0.3, -0.7])], 0), bag(vec![region(&[1.0, 1.0])], 0)];
        let fisher = estimate_fisher_diag(&params, &slides).unwrap();
        assert!(fisher.segments().iter().all(|s| s.iter().all(|&x| x == 0.0)));
        assert!(matches!(estimate_fisher_diag(&params, &[]), Err(TrainError::Empty(_))));
    }

    #[test]
    fn fisher_is_nonnegative() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let p = random_params(&mut rng, 4, 3);
            let slides: Vec<_> = (0..3)
                .map(|i| random_bag(&mut rng, 4, 2, label(i % 3)))
                .collect();
            let f = estimate_fisher_diag(&p, &slides).unwrap();
            assert!(f.segments().iter().all(|s| s.iter().all(|&x| x >= 0.0)));
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let dim = rng.random_range(2..=8);
            let classes = rng.random_range(2..=4);
            let regions = rng.random_range(1..=4);
            let anchored_classes = rng.random_range(1..=classes);
            let params = random_params(&mut rng, dim, classes);
            let mut star = random_params(&mut rng, dim, anchored_classes);
            star.kind = params.kind;
            let mut fisher = Gradients::zeros_like(&star);
            for s in fisher.segments_mut() {
                for x in s.iter_mut() {
                    *x = rng.random_range(0.0..2.0);
                }
            }
            let state = state_with(star, fisher, rng.random_range(0.0..5.0));
            let y = label(rng.random_range(0..classes));
            let b = random_bag(&mut rng, dim, regions, y);
            let (_, grads) = ewc_loss_and_grad(&b, &params, &state).unwrap();
            let err = max_error(&params, &grads, 1e-5, |p| ewc_loss_and_grad(&b, p, &state).unwrap().0);
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    fn two_tasks() -> Vec<TaskDataset> {
        let mut config = SyntheticConfig::with_class_counts(&[2, 2], 10);
        config.dim = 8;
        config.regions_per_slide = 3;
        config.patches_per_region = 2;
        config.class_separation = 0.3;
        generate_task_sequence(&config).unwrap().tasks
    }

    fn schedule(seed: u64) -> Schedule {
        Schedule {
            epochs: 5,
            learning_rate: 0.05,
            seed,
        }
    }

    #[test]
    fn first_task_matches_finetune_bitwise() {
        let tasks = two_tasks();
        let mut init = AggregatorParams::init(AggregatorKind::GatedAttention, 8, 2);
        grow_head(&mut init, 2);
        let mut a = init.clone();
        let mut b = init;
        let mut state = EwcState::new(100.0);
        train_ewc(&mut a, &tasks[0].train, &mut state, &schedule(3)).unwrap();
        train_finetune(&mut b, &tasks[0].train, &schedule(3)).unwrap();
        assert_eq!(a, b);
        assert!(state.anchor.is_some());
    }

    pub(crate) fn anchored_drift(params: &AggregatorParams, anchor: &AggregatorParams) -> f64 {
        params
            .segments()
            .iter()
            .zip(anchor.segments())
            .flat_map(|(p, a)| p.iter().zip(a).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }

    fn drift_for(lambda: f64) -> f64 {
        let (p, anchor) = train_two(AggregatorKind::GatedAttention, lambda);
        anchored_drift(&p, &anchor)
    }

    /// Model after both tasks and the anchor taken after the first.
    fn train_two(kind: AggregatorKind, lambda: f64) -> (AggregatorParams, AggregatorParams) {
        let tasks = two_tasks();
        let mut p = AggregatorParams::init(kind, 8, 2);
        grow_head(&mut p, 2);
        let mut state = EwcState::new(lambda);
        train_ewc(&mut p, &tasks[0].train, &mut state, &schedule(3)).unwrap();
        let anchor = state.anchor.clone().unwrap().params;
        grow_head(&mut p, 2);
        train_ewc(&mut p, &tasks[1].train, &mut state, &schedule(4)).unwrap();
        (p, anchor)
    }

    #[test]
    fn drift_shrinks_as_lambda_grows() {
        let drifts: Vec<f64> = [0.0, 1.0, 10.0, 100.0, 1000.0].map(drift_for).to_vec();
        for w in drifts.windows(2) {
            assert!(w[1] <= w[0], "{drifts:?}");
        }
    }

    #[test]
    fn huge_lambda_pins_anchored_parameters() {
        let (p, anchor) = train_two(AggregatorKind::Mean, 1e6);
        let drift = anchored_drift(&p, &anchor);
        assert!(drift < 1e-3, "drift {drift}");

        // Attention vectors collect almost no Fisher mass, so only the head is pinned.
        let (mut p, mut anchor) = train_two(AggregatorKind::GatedAttention, 1e6);
        for m in [&mut p, &mut anchor] {
            m.attention_v.fill(0.0);
            m.attention_u.fill(0.0);
        }
        let drift = anchored_drift(&p, &anchor);
        assert!(drift < 1e-3, "head drift {drift}");
    }
}
