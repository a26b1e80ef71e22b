//! Training-free lifelong learning: every task adds its class prototypes to
//! a bank, and slides are classified by their most similar prototype.
//!
//! CLASS-IL compares a slide against the whole bank; TASK-IL only against
//! the prototypes of the slide's own task.

use thiserror::Error;

use crate::aggregator::{FrozenAggregator, ModelError};
use crate::datagen::{average_variants, DataError, SlideBag, TaskDataset, TaskPrototypeSpec};
use crate::eval::{evaluate_row, AccuracyMatrix, ConfidenceRecord, EvalError, LifelongClassifier, ScoreKind};
use crate::primitives::{argmax_tiebreak, cosine_similarity, dot, GlobalLabel, MathError, ScoreVector, Similarity};

#[derive(Debug, Error)]
pub enum ZeroSlideError {
    #[error("prototype bank is empty")]
    EmptyBank,
    #[error("task {found} cannot follow {expected} tasks already in the bank")]
    TaskOrder { expected: usize, found: usize },
    #[error("task {0} is not in the bank")]
    UnknownTask(usize),
    #[error("prototype dim {found} differs from bank dim {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("prototypes cover {found} classes of task {task}, dataset has {expected}")]
    Coverage { task: usize, expected: usize, found: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// One prototype per local class of a task, L2-normalized unless flagged degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrototypes {
    pub task_index: usize,
    pub prototypes: Vec<Vec<f64>>,
    pub degenerate: Vec<bool>,
}

impl TaskPrototypes {
    /// Averages each class's variants into its prototype.
    pub fn from_spec(spec: &TaskPrototypeSpec) -> Result<Self, DataError> {
        let averaged = average_variants(spec)?;
        Ok(Self {
            task_index: spec.task_index,
            degenerate: averaged.iter().map(|n| n.degenerate).collect(),
            prototypes: averaged.into_iter().map(|n| n.values).collect(),
        })
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.len()
    }
}

/// Append-only set of prototypes across tasks, in global label order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    entries: Vec<TaskPrototypes>,
    labels: Vec<GlobalLabel>,
    similarity: Similarity,
}

impl Default for PrototypeBank {
    fn default() -> Self {
        Self::new(Similarity::Cosine)
    }
}

impl PrototypeBank {
    pub fn new(similarity: Similarity) -> Self {
        Self {
            entries: Vec::new(),
            labels: Vec::new(),
            similarity,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn task_count(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[TaskPrototypes] {
        &self.entries
    }

    pub fn labels(&self) -> &[GlobalLabel] {
        &self.labels
    }

    pub fn similarity(&self) -> Similarity {
        self.similarity
    }

    fn dim(&self) -> Option<usize> {
        self.entries.iter().flat_map(|e| &e.prototypes).next().map(Vec::len)
    }

    /// Adds the next task's prototypes. Tasks must arrive in order 0, 1, 2, ...
    pub fn extend_bank(&mut self, task: TaskPrototypes) -> Result<(), ZeroSlideError> {
        if task.task_index != self.entries.len() {
            return Err(ZeroSlideError::TaskOrder {
                expected: self.entries.len(),
                found: task.task_index,
            });
        }
        if let Some(dim) = self.dim() {
            if let Some(p) = task.prototypes.iter().find(|p| p.len() != dim) {
                return Err(ZeroSlideError::Dimension {
                    expected: dim,
                    found: p.len(),
                });
            }
        }
        let offset = self.labels.len();
        self.labels.extend((0..task.class_count()).map(|c| GlobalLabel {
            task_index: task.task_index,
            local_class: c,
            global_id: offset + c,
        }));
        self.entries.push(task);
        Ok(())
    }

    fn score(&self, s: &[f64], prototype: &[f64]) -> Result<f64, ZeroSlideError> {
        if s.len() != prototype.len() {
            return Err(ZeroSlideError::Dimension {
                expected: prototype.len(),
                found: s.len(),
            });
        }
        Ok(match self.similarity {
            Similarity::Cosine => cosine_similarity(s, prototype)?,
            Similarity::Dot => dot(s, prototype),
        })
    }

    /// Similarity of `s` to every prototype, in bank order.
    pub fn scores(&self, s: &[f64]) -> Result<ScoreVector, ZeroSlideError> {
        if self.is_empty() {
            return Err(ZeroSlideError::EmptyBank);
        }
        let scores = self
            .entries
            .iter()
            .flat_map(|e| &e.prototypes)
            .map(|p| self.score(s, p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ScoreVector::new(scores, self.labels.clone())?)
    }

    pub fn task_scores(&self, s: &[f64], task: usize) -> Result<ScoreVector, ZeroSlideError> {
        let entry = self.entries.get(task).ok_or(ZeroSlideError::UnknownTask(task))?;
        let scores = entry
            .prototypes
            .iter()
            .map(|p| self.score(s, p))
            .collect::<Result<Vec<_>, _>>()?;
        let labels = self.labels.iter().filter(|l| l.task_index == task).copied().collect();
        Ok(ScoreVector::new(scores, labels)?)
    }
}

pub fn predict_class_il(s: &[f64], bank: &PrototypeBank) -> Result<(GlobalLabel, ScoreVector), ZeroSlideError> {
    let scores = bank.scores(s)?;
    Ok((argmax_tiebreak(&scores)?, scores))
}

pub fn predict_task_il(
    s: &[f64],
    bank: &PrototypeBank,
    task_index: usize,
) -> Result<(GlobalLabel, ScoreVector), ZeroSlideError> {
    let scores = bank.task_scores(s, task_index)?;
    Ok((argmax_tiebreak(&scores)?, scores))
}

/// A bank snapshot plus the frozen aggregator, as seen by the evaluator.
pub struct BankClassifier<'a> {
    pub bank: &'a PrototypeBank,
    pub aggregator: &'a FrozenAggregator,
}

fn eval_err(e: ZeroSlideError) -> EvalError {
    match e {
        ZeroSlideError::Math(m) => EvalError::Math(m),
        ZeroSlideError::Model(m) => EvalError::Model(m),
        ZeroSlideError::Eval(e) => e,
        other => EvalError::Matrix(other.to_string()),
    }
}

impl LifelongClassifier for BankClassifier<'_> {
    fn score_kind(&self) -> ScoreKind {
        match self.bank.similarity() {
            Similarity::Cosine => ScoreKind::Cosine,
            Similarity::Dot => ScoreKind::Dot,
        }
    }

    fn class_il_scores(&self, bag: &SlideBag) -> Result<ScoreVector, EvalError> {
        let s = self.aggregator.aggregate(bag)?;
        self.bank.scores(&s).map_err(eval_err)
    }

    fn task_il_scores(&self, bag: &SlideBag, task: usize) -> Result<ScoreVector, EvalError> {
        let s = self.aggregator.aggregate(bag)?;
        self.bank.task_scores(&s, task).map_err(eval_err)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroSlideRun {
    pub class_il: AccuracyMatrix,
    pub task_il: AccuracyMatrix,
    pub records: Vec<ConfidenceRecord>,
    pub bank: PrototypeBank,
}

/// Processes tasks in arrival order: extend the bank with task `i`, then
/// evaluate the test splits of tasks `0..=i` in both scenarios.
pub fn run_zeroslide(
    sequence: &[TaskDataset],
    prototype_specs: &[TaskPrototypeSpec],
    frozen: &FrozenAggregator,
    similarity: Similarity,
) -> Result<ZeroSlideRun, ZeroSlideError> {
    let mut bank = PrototypeBank::new(similarity);
    let mut run = ZeroSlideRun {
        class_il: AccuracyMatrix::new(),
        task_il: AccuracyMatrix::new(),
        records: Vec::new(),
        bank: PrototypeBank::new(similarity),
    };
    for (i, task) in sequence.iter().enumerate() {
        let spec = prototype_specs.get(i).ok_or(ZeroSlideError::Coverage {
            task: i,
            expected: task.class_count,
            found: 0,
        })?;
        let prototypes = TaskPrototypes::from_spec(spec)?;
        if prototypes.class_count() != task.class_count {
            return Err(ZeroSlideError::Coverage {
                task: i,
                expected: task.class_count,
                found: prototypes.class_count(),
            });
        }
        let dim = task.all_slides().next().map(SlideBag::dim);
        if let (Some(d), Some(p)) = (dim, prototypes.prototypes.first()) {
            if d != p.len() {
                return Err(ZeroSlideError::Dimension {
                    expected: p.len(),
                    found: d,
                });
            }
        }
        bank.extend_bank(prototypes)?;
        let classifier = BankClassifier {
            bank: &bank,
            aggregator: frozen,
        };
        let row = evaluate_row(&classifier, &sequence[..=i], i)?;
        run.class_il.push_row(row.ci)?;
        run.task_il.push_row(row.ti)?;
        run.records.extend(row.records);
    }
    run.bank = bank;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_task_sequence, synthesize_prototypes, SyntheticConfig};
    use crate::eval::compute_metrics;
    use crate::primitives::l2_normalize;

    fn basis(dim: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        v
    }

    fn task(task_index: usize, prototypes: Vec<Vec<f64>>) -> TaskPrototypes {
        TaskPrototypes {
            task_index,
            degenerate: vec![false; prototypes.len()],
            prototypes,
        }
    }

    fn e1_to_e4_bank() -> PrototypeBank {
        let mut bank = PrototypeBank::default();
        bank.extend_bank(task(0, vec![basis(4, 0), basis(4, 1)])).unwrap();
        bank.extend_bank(task(1, vec![basis(4, 2), basis(4, 3)])).unwrap();
        bank
    }

    #[test]
    fn bank_growth_counts() {
        let mut bank = PrototypeBank::default();
        bank.extend_bank(task(0, vec![basis(3, 0), basis(3, 1)])).unwrap();
        assert_eq!(bank.len(), 2);
        let before = bank.entries()[0].clone();
        bank.extend_bank(task(1, vec![basis(3, 2)])).unwrap();
        assert_eq!(bank.entries()[0], before);
        assert!(matches!(
            bank.extend_bank(task(1, vec![basis(3, 0)])),
            Err(ZeroSlideError::TaskOrder { .. })
        ));
        assert!(matches!(
            bank.extend_bank(task(2, vec![basis(5, 0)])),
            Err(ZeroSlideError::Dimension { .. })
        ));

        let mut bank = PrototypeBank::default();
        for (t, m) in [2, 3, 2, 2, 2, 2].into_iter().enumerate() {
            bank.extend_bank(task(t, (0..m).map(|k| basis(16, k)).collect())).unwrap();
        }
        assert_eq!(bank.len(), 13);
        assert_eq!(bank.labels()[12].global_id, 12);
        assert_eq!(bank.labels()[12].task_index, 5);
    }

    #[test]
    fn class_il_examples() {
        let mut single = PrototypeBank::default();
        single.extend_bank(task(0, vec![basis(3, 1)])).unwrap();
        assert_eq!(predict_class_il(&[5.0, -1.0, 0.0], &single).unwrap().0.global_id, 0);

        let bank = e1_to_e4_bank();
        let (label, scores) = predict_class_il(&basis(4, 2), &bank).unwrap();
        assert_eq!(label.global_id, 2);
        assert_eq!(scores.scores[2], 1.0);

        let s = l2_normalize(&[0.9, 0.0, 0.1, 0.0]).values;
        let (label, scores) = predict_class_il(&s, &bank).unwrap();
        assert_eq!(label.global_id, 0);
        assert_eq!(scores.len(), 4);
        assert!((scores.scores[0] - 0.9 / 0.82f64.sqrt()).abs() < 1e-12);

        assert!(matches!(
            predict_class_il(&s, &PrototypeBank::default()),
            Err(ZeroSlideError::EmptyBank)
        ));
    }

    #[test]
    fn task_il_examples() {
        let bank = e1_to_e4_bank();
        let s = l2_normalize(&[0.9, 0.0, 0.1, 0.0]).values;
        let (label, scores) = predict_task_il(&s, &bank, 1).unwrap();
        assert_eq!((label.task_index, label.local_class, label.global_id), (1, 0, 2));
        assert_eq!(scores.len(), 2);
        assert!(matches!(predict_task_il(&s, &bank, 2), Err(ZeroSlideError::UnknownTask(2))));

        let mut single = e1_to_e4_bank();
        single.extend_bank(task(2, vec![basis(4, 0)])).unwrap();
        assert_eq!(predict_task_il(&s, &single, 2).unwrap().0.global_id, 4);
    }

    #[test]
    fn class_il_winner_wins_its_task() {
        let bank = e1_to_e4_bank();
        for seed in 0..200u64 {
            let s: Vec<f64> = (0..4).map(|d| ((seed * 31 + d * 17) % 23) as f64 - 11.0).collect();
            let (ci, _) = predict_class_il(&s, &bank).unwrap();
            let (ti, _) = predict_task_il(&s, &bank, ci.task_index).unwrap();
            assert_eq!(ci, ti);
        }
    }

    #[test]
    fn degenerate_prototype_scores_zero() {
        let mut bank = PrototypeBank::default();
        bank.extend_bank(TaskPrototypes {
            task_index: 0,
            prototypes: vec![vec![0.0, 0.0], vec![-1.0, 0.0]],
            degenerate: vec![true, false],
        })
        .unwrap();
        let (label, scores) = predict_class_il(&[1.0, 0.0], &bank).unwrap();
        assert_eq!(scores.scores, vec![0.0, -1.0]);
        assert_eq!(label.global_id, 0);
    }

    fn easy_config() -> SyntheticConfig {
        SyntheticConfig {
            dim: 16,
            regions_per_slide: 4,
            patches_per_region: 4,
            patch_noise_sigma: 0.05,
            class_separation: 0.5,
            prototype_noise_sigma: 0.0,
            ..SyntheticConfig::with_class_counts(&[2, 3, 2], 10)
        }
    }

    #[test]
    fn run_is_training_free_and_task_il_is_column_constant() {
        let config = SyntheticConfig {
            patch_noise_sigma: 0.6,
            prototype_noise_sigma: 0.4,
            class_separation: 0.2,
            ..easy_config()
        };
        let seq = generate_task_sequence(&config).unwrap();
        let protos = synthesize_prototypes(&seq.class_means, &config).unwrap();
        let frozen = FrozenAggregator::MeanOfRegions;
        let run = run_zeroslide(&seq.tasks, &protos, &frozen, Similarity::Cosine).unwrap();
        assert_eq!(frozen, FrozenAggregator::MeanOfRegions);
        assert_eq!(run.bank.len(), 7);
        for i in 0..3 {
            for k in i..3 {
                assert_eq!(run.task_il.get(k, i), run.task_il.get(i, i));
                assert!(run.task_il.get(k, i) >= run.class_il.get(k, i));
            }
        }
        assert_eq!(run.task_il.forgetting(), Some(0.0));
        let report = compute_metrics(&run.class_il, &run.task_il).unwrap();
        assert!(report.masked_acc >= report.acc);
        if run.class_il.never_exceeds_just_learned() {
            assert!((report.forgetting.unwrap() + report.bwt.unwrap()).abs() < 1e-12);
        }
        let slides: usize = seq.tasks.iter().enumerate().map(|(i, t)| t.test.len() * (3 - i)).sum();
        assert_eq!(run.records.len(), slides);
        assert!(run.records.iter().all(|r| r.score_kind == ScoreKind::Cosine && (-1.0..=1.0).contains(&r.score)));
    }

    #[test]
    fn clean_prototypes_classify_clean_data() {
        let config = easy_config();
        let seq = generate_task_sequence(&config).unwrap();
        let protos = synthesize_prototypes(&seq.class_means, &config).unwrap();
        let run = run_zeroslide(&seq.tasks, &protos, &FrozenAggregator::MeanOfRegions, Similarity::Cosine).unwrap();
        assert!(run.class_il.final_row().unwrap().iter().all(|&a| a >= 0.99));
    }

    #[test]
    fn coverage_errors() {
        let config = easy_config();
        let seq = generate_task_sequence(&config).unwrap();
        let mut protos = synthesize_prototypes(&seq.class_means, &config).unwrap();
        protos[1].variants.pop();
        assert!(matches!(
            run_zeroslide(&seq.tasks, &protos, &FrozenAggregator::MeanOfRegions, Similarity::Cosine),
            Err(ZeroSlideError::Coverage { task: 1, .. })
        ));
        assert!(matches!(
            run_zeroslide(&seq.tasks, &protos[..1], &FrozenAggregator::MeanOfRegions, Similarity::Cosine),
            Err(ZeroSlideError::Coverage { task: 1, found: 0, .. })
        ));
    }
}
