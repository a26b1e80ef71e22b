//! Lifelong-learning benchmark harness for bagged slide embeddings.
//!
//! Training-based continual learners (fine-tuning, EWC, DER++, BuRo region
//! rehearsal) are compared against a training-free prototype-bank
//! classifier under class-incremental and task-incremental evaluation.

pub mod aggregator;
pub mod cli;
pub mod datagen;
pub mod eval;
pub mod primitives;
pub mod trainers;
pub mod zeroslide;
