//! Synthetic multi-task slide datasets, fold splitting, prototype variants,
//! and the binary embedding/prototype file formats.

mod folds;
pub mod format;
mod prototypes;
mod synth;

pub use folds::split_folds;
pub use format::{
    decode_embeddings, decode_prototypes, encode_embeddings, encode_prototypes, load_embedding_file,
    load_prototype_file, write_embedding_file, write_prototype_file,
};
pub use prototypes::{average_variants, synthesize_prototypes, TaskPrototypeSpec};
pub use synth::{generate_task_sequence, SyntheticConfig, SyntheticSequence, TaskSpec};

use crate::primitives::{GlobalLabel, LabelSpace};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(
        "cannot place class {class} of {total} with pairwise cosine <= {max_cosine} in dim {dim} after {attempts} attempts"
    )]
    Infeasible {
        class: usize,
        total: usize,
        dim: usize,
        max_cosine: f64,
        attempts: usize,
    },
    #[error("task {task} class {class} has {slides} slides, fewer than {folds} folds")]
    Stratification {
        task: usize,
        class: usize,
        slides: usize,
        folds: usize,
    },
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("truncated record at byte {offset}: task {task}, {split} slide {slide}")]
    Truncated {
        offset: usize,
        task: usize,
        split: &'static str,
        slide: usize,
    },
    #[error("inconsistent data: {0}")]
    Consistency(String),
    #[error("task {task} class {class} has no prototype variants")]
    EmptyVariants { task: usize, class: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A region of a slide: its own embedding plus the patch embeddings cropped
/// from it, stored row-major (`patch_count × dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub embedding: Vec<f32>,
    pub patches: Vec<f32>,
}

impl Region {
    pub fn dim(&self) -> usize {
        self.embedding.len()
    }

    pub fn patch_count(&self) -> usize {
        if self.embedding.is_empty() {
            0
        } else {
            self.patches.len() / self.embedding.len()
        }
    }

    pub fn patches(&self) -> impl Iterator<Item = &[f32]> {
        self.patches.chunks(self.dim().max(1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub slide_id: String,
    pub label: GlobalLabel,
    pub regions: Vec<Region>,
}

impl SlideBag {
    pub fn dim(&self) -> usize {
        self.regions.first().map_or(0, Region::dim)
    }
}

/// One task of the sequence with its three disjoint splits.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_index: usize,
    pub class_count: usize,
    pub train: Vec<SlideBag>,
    pub val: Vec<SlideBag>,
    pub test: Vec<SlideBag>,
}

impl TaskDataset {
    pub fn all_slides(&self) -> impl Iterator<Item = &SlideBag> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

pub fn label_space(tasks: &[TaskDataset]) -> LabelSpace {
    LabelSpace::new(&tasks.iter().map(|t| t.class_count).collect::<Vec<_>>())
}
