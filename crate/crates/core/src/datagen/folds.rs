use rand::seq::SliceRandom;

use super::synth::rng_for;
use super::{DataError, SlideBag, TaskDataset};

/// Stratified k-fold split. Fold `f` tests on chunk `f` of every class,
/// validates on chunk `f + 1` (only when `n_folds >= 3`) and trains on the rest.
/// The slide pool is the union of the task's current splits.
pub fn split_folds(task: &TaskDataset, n_folds: usize, seed: u64) -> Result<Vec<TaskDataset>, DataError> {
    if n_folds < 2 {
        return Err(DataError::Config(format!("n_folds must be >= 2, got {n_folds}")));
    }
    let mut by_class: Vec<Vec<&SlideBag>> = vec![Vec::new(); task.class_count];
    for bag in task.all_slides() {
        let c = bag.label.local_class;
        if c >= task.class_count {
            return Err(DataError::Consistency(format!(
                "slide {} has local class {c} but task {} has {} classes",
                bag.slide_id, task.task_index, task.class_count
            )));
        }
        by_class[c].push(bag);
    }

    let mut rng = rng_for(seed, 0x464f4c44 ^ task.task_index as u64);
    let mut chunks: Vec<Vec<Vec<&SlideBag>>> = Vec::with_capacity(task.class_count);
    for (c, slides) in by_class.iter_mut().enumerate() {
        if slides.len() < n_folds {
            return Err(DataError::Stratification {
                task: task.task_index,
                class: c,
                slides: slides.len(),
                folds: n_folds,
            });
        }
        // Sorting first makes the result independent of how the pool was split before.
        slides.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
        slides.shuffle(&mut rng);
        let n = slides.len();
        chunks.push(
            (0..n_folds)
                .map(|j| slides[j * n / n_folds..(j + 1) * n / n_folds].to_vec())
                .collect(),
        );
    }

    let folds = (0..n_folds)
        .map(|f| {
            let val_chunk = (n_folds >= 3).then_some((f + 1) % n_folds);
            let mut fold = TaskDataset {
                task_index: task.task_index,
                class_count: task.class_count,
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            };
            for class_chunks in &chunks {
                for (j, chunk) in class_chunks.iter().enumerate() {
                    let dst = if j == f {
                        &mut fold.test
                    } else if Some(j) == val_chunk {
                        &mut fold.val
                    } else {
                        &mut fold.train
                    };
                    dst.extend(chunk.iter().map(|&b| b.clone()));
                }
            }
            fold
        })
        .collect();
    Ok(folds)
}
