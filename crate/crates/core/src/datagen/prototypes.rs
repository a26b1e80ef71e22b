use rand_distr::{Distribution, StandardNormal};

use super::synth::{rng_for, STREAM_PROTOTYPES};
use super::{DataError, SyntheticConfig};
use crate::primitives::{l2_normalize, to_f64, Normalized};

/// Per-class prompt-variant embeddings of one task: `variants[class][variant]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrototypeSpec {
    pub task_index: usize,
    pub variants: Vec<Vec<Vec<f32>>>,
}

impl TaskPrototypeSpec {
    pub fn class_count(&self) -> usize {
        self.variants.len()
    }
}

/// Emulates text-encoder output: each variant is the class mean plus
/// isotropic Gaussian noise, L2-normalized.
pub fn synthesize_prototypes(
    class_means: &[Vec<Vec<f64>>],
    config: &SyntheticConfig,
) -> Result<Vec<TaskPrototypeSpec>, DataError> {
    config.validate()?;
    let mut rng = rng_for(config.seed, STREAM_PROTOTYPES);
    let sigma = config.prototype_noise_sigma;
    Ok(class_means
        .iter()
        .enumerate()
        .map(|(t, means)| TaskPrototypeSpec {
            task_index: t,
            variants: means
                .iter()
                .map(|mean| {
                    (0..config.prototype_variants)
                        .map(|_| {
                            let noisy: Vec<f64> = mean
                                .iter()
                                .map(|m| {
                                    let z: f64 = StandardNormal.sample(&mut rng);
                                    m + sigma * z
                                })
                                .collect();
                            l2_normalize(&noisy).values.iter().map(|&x| x as f32).collect()
                        })
                        .collect()
                })
                .collect(),
        })
        .collect())
}

/// One prototype per class: mean over variants, then L2-normalized. A mean
/// that cancels to zero comes back flagged as degenerate.
pub fn average_variants(spec: &TaskPrototypeSpec) -> Result<Vec<Normalized>, DataError> {
    spec.variants
        .iter()
        .enumerate()
        .map(|(c, variants)| {
            let first = variants.first().ok_or(DataError::EmptyVariants {
                task: spec.task_index,
                class: c,
            })?;
            let dim = first.len();
            let mut mean = vec![0.0f64; dim];
            for v in variants {
                if v.len() != dim {
                    return Err(DataError::Consistency(format!(
                        "task {} class {c}: variant dims {} and {}",
                        spec.task_index,
                        dim,
                        v.len()
                    )));
                }
                for (m, x) in mean.iter_mut().zip(to_f64(v)) {
                    *m += x;
                }
            }
            let n = variants.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            Ok(l2_normalize(&mean))
        })
        .collect()
}
