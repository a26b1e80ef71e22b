use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Region, SlideBag, TaskDataset};
use crate::primitives::{cosine_similarity, l2_normalize, LabelSpace};

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

/// RNG stream ids derived from one seed.
pub(crate) const STREAM_SLIDES: u64 = 0;
pub(crate) const STREAM_PROTOTYPES: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub task_index: usize,
    pub class_names: Vec<String>,
    pub slides_per_class: usize,
}

impl TaskSpec {
    pub fn new(task_index: usize, class_names: &[&str], slides_per_class: usize) -> Self {
        Self {
            task_index,
            class_names: class_names.iter().map(|s| s.to_string()).collect(),
            slides_per_class,
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub tasks: Vec<TaskSpec>,
    pub regions_per_slide: usize,
    pub patches_per_region: usize,
    /// Class means satisfy pairwise cosine <= 1 - class_separation.
    pub class_separation: f64,
    pub patch_noise_sigma: f64,
    pub prototype_noise_sigma: f64,
    pub prototype_variants: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// Six organ-like tasks with 2-3 subtypes each, at desk scale.
    fn default() -> Self {
        let spc = 40;
        Self {
            dim: 64,
            tasks: vec![
                TaskSpec::new(0, &["BRCA-IDC", "BRCA-ILC"], spc),
                TaskSpec::new(1, &["RCC-CCRCC", "RCC-PRCC", "RCC-CHRCC"], spc),
                TaskSpec::new(2, &["NSCLC-LUAD", "NSCLC-LUSC"], spc),
                TaskSpec::new(3, &["ESCA-ADENO", "ESCA-SQUAMOUS"], spc),
                TaskSpec::new(4, &["TGCT-SEMINOMA", "TGCT-NONSEMINOMA"], spc),
                TaskSpec::new(5, &["CESC-SQUAMOUS", "CESC-ADENO"], spc),
            ],
            regions_per_slide: 8,
            patches_per_region: 16,
            class_separation: 0.3,
            patch_noise_sigma: 0.5,
            prototype_noise_sigma: 0.35,
            prototype_variants: 4,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    /// Same shape for every task: `class_counts[t]` classes with generic names.
    pub fn with_class_counts(class_counts: &[usize], slides_per_class: usize) -> Self {
        let tasks = class_counts
            .iter()
            .enumerate()
            .map(|(t, &m)| TaskSpec {
                task_index: t,
                class_names: (0..m).map(|c| format!("task{t}-class{c}")).collect(),
                slides_per_class,
            })
            .collect();
        Self {
            tasks,
            ..Self::default()
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(TaskSpec::class_count).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Config(msg));
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.task_index != i {
                return bad(format!("task {i} has task_index {}", t.task_index));
            }
            if t.class_count() < 2 {
                return bad(format!("task {i} needs >= 2 classes"));
            }
            if t.slides_per_class < 4 {
                return bad(format!("task {i} needs >= 4 slides per class"));
            }
        }
        if self.regions_per_slide == 0 || self.patches_per_region == 0 {
            return bad("regions_per_slide and patches_per_region must be >= 1".into());
        }
        for (name, s) in [
            ("patch_noise_sigma", self.patch_noise_sigma),
            ("prototype_noise_sigma", self.prototype_noise_sigma),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {s}"));
            }
        }
        if !(self.class_separation.is_finite() && self.class_separation <= 2.0) {
            return bad(format!(
                "class_separation must be finite and <= 2, got {}",
                self.class_separation
            ));
        }
        if self.prototype_variants == 0 {
            return bad("prototype_variants must be >= 1".into());
        }
        Ok(())
    }
}

/// Generated tasks plus the unit-norm class means they were drawn around
/// (`class_means[task][class]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub tasks: Vec<TaskDataset>,
    pub class_means: Vec<Vec<Vec<f64>>>,
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn place_class_means(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, DataError> {
    let total: usize = config.class_counts().iter().sum();
    let max_cosine = 1.0 - config.class_separation;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(total);
    for class in 0..total {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let candidate = l2_normalize(&gaussian_vec(rng, config.dim));
            if candidate.degenerate {
                continue;
            }
            let ok = means.iter().all(|m| {
                cosine_similarity(m, &candidate.values).expect("equal dims") <= max_cosine
            });
            if ok {
                means.push(candidate.values);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DataError::Infeasible {
                class,
                total,
                dim: config.dim,
                max_cosine,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }
    Ok(means)
}

fn draw_region(mean: &[f64], config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Region {
    let dim = config.dim;
    let mut patches = Vec::with_capacity(dim * config.patches_per_region);
    let mut sum = vec![0.0f64; dim];
    for _ in 0..config.patches_per_region {
        for (d, m) in mean.iter().enumerate() {
            let noise: f64 = StandardNormal.sample(rng);
            let x = (m + config.patch_noise_sigma * noise) as f32;
            sum[d] += x as f64;
            patches.push(x);
        }
    }
    let n = config.patches_per_region as f64;
    Region {
        embedding: sum.iter().map(|s| (s / n) as f32).collect(),
        patches,
    }
}

/// Draws class means on the unit sphere with a global pairwise-cosine cap,
/// then slides around them. Output is a pure function of `config`.
pub fn generate_task_sequence(config: &SyntheticConfig) -> Result<SyntheticSequence, DataError> {
    config.validate()?;
    let mut rng = rng_for(config.seed, STREAM_SLIDES);
    let flat_means = place_class_means(config, &mut rng)?;
    let space = LabelSpace::new(&config.class_counts());

    let mut tasks = Vec::with_capacity(config.tasks.len());
    let mut class_means = Vec::with_capacity(config.tasks.len());
    for spec in &config.tasks {
        let t = spec.task_index;
        let mut ds = TaskDataset {
            task_index: t,
            class_count: spec.class_count(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        let mut means = Vec::with_capacity(spec.class_count());
        for c in 0..spec.class_count() {
            let label = space.label(t, c).expect("label in range");
            let mean = &flat_means[label.global_id];
            let n = spec.slides_per_class;
            let n_test = ((n as f64 * 0.2).round() as usize).max(1);
            let n_val = n_test;
            for s in 0..n {
                let bag = SlideBag {
                    slide_id: format!("t{t}-c{c}-{s:04}"),
                    label,
                    regions: (0..config.regions_per_slide)
                        .map(|_| draw_region(mean, config, &mut rng))
                        .collect(),
                };
                if s < n_test {
                    ds.test.push(bag);
                } else if s < n_test + n_val {
                    ds.val.push(bag);
                } else {
                    ds.train.push(bag);
                }
            }
            means.push(mean.clone());
        }
        tasks.push(ds);
        class_means.push(means);
    }
    Ok(SyntheticSequence { tasks, class_means })
}
