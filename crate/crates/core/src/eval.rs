//! Accuracy matrices, the five lifelong-learning metrics, and the
//! true-label confidence study.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{self, AggregatorParams, ModelError};
use crate::datagen::{label_space, SlideBag, TaskDataset};
use crate::primitives::{argmax_tiebreak, softmax, GlobalLabel, MathError, ScoreVector};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task {0} has an empty test split")]
    MissingTestSplit(usize),
    #[error("accuracy matrix: {0}")]
    Matrix(String),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Lower-triangular table: `a[k][i]` is the accuracy on task `i` after
/// finishing task `k`, for `i <= k`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        let mut m = Self::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<(), EvalError> {
        let k = self.rows.len();
        if row.len() != k + 1 {
            return Err(EvalError::Matrix(format!(
                "row {k} needs {} entries, got {}",
                k + 1,
                row.len()
            )));
        }
        if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(EvalError::Matrix(format!("entry {x} outside [0, 1] in row {k}")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.rows[k][i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    /// `(1/(n-1)) Σ_{i<n-1} (a[n-1][i] - a[i][i])`; absent for fewer than two tasks.
    pub fn backward_transfer(&self) -> Option<f64> {
        let n = self.n_tasks();
        if n < 2 {
            return None;
        }
        let last = &self.rows[n - 1];
        let sum: f64 = (0..n - 1).map(|i| last[i] - self.rows[i][i]).sum();
        Some(sum / (n - 1) as f64)
    }

    /// `(1/(n-1)) Σ_{i<n-1} (max_{k>=i} a[k][i] - a[n-1][i])`; absent for fewer than two tasks.
    pub fn forgetting(&self) -> Option<f64> {
        let n = self.n_tasks();
        if n < 2 {
            return None;
        }
        let last = &self.rows[n - 1];
        let sum: f64 = (0..n - 1)
            .map(|i| {
                let best = (i..n).map(|k| self.rows[k][i]).fold(f64::NEG_INFINITY, f64::max);
                best - last[i]
            })
            .sum();
        Some(sum / (n - 1) as f64)
    }

    /// Mean over stages of the mean accuracy on the tasks seen at that stage.
    pub fn running_mean_accuracy(&self) -> f64 {
        let stage_means: f64 = self
            .rows
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .sum();
        stage_means / self.rows.len() as f64
    }

    /// True when no task's accuracy ever rises above its value at the stage it was learned.
    pub fn never_exceeds_just_learned(&self) -> bool {
        (0..self.n_tasks()).all(|i| (i + 1..self.n_tasks()).all(|k| self.rows[k][i] <= self.rows[i][i]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub masked_acc: f64,
    pub macc: f64,
    pub bwt: Option<f64>,
    pub forgetting: Option<f64>,
    pub final_accuracies: Vec<f64>,
}

pub fn compute_metrics(ci: &AccuracyMatrix, ti: &AccuracyMatrix) -> Result<MetricsReport, EvalError> {
    let n = ci.n_tasks();
    if n == 0 || ti.n_tasks() != n {
        return Err(EvalError::Matrix(format!(
            "need two complete matrices of equal size, got {n} and {} rows",
            ti.n_tasks()
        )));
    }
    let mean = |row: &[f64]| row.iter().sum::<f64>() / row.len() as f64;
    let last = ci.final_row().expect("n > 0");
    Ok(MetricsReport {
        acc: mean(last),
        masked_acc: mean(ti.final_row().expect("n > 0")),
        macc: ci.running_mean_accuracy(),
        bwt: ci.backward_transfer(),
        forgetting: ci.forgetting(),
        final_accuracies: last.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Cosine,
    SoftmaxProb,
    /// Raw dot products, when the bank is configured without normalization.
    Dot,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Cosine => "cosine",
            ScoreKind::SoftmaxProb => "softmax_prob",
            ScoreKind::Dot => "dot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(ScoreKind::Cosine),
            "softmax_prob" => Some(ScoreKind::SoftmaxProb),
            "dot" => Some(ScoreKind::Dot),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRecord {
    pub eval_task: usize,
    pub train_stage: usize,
    pub slide_id: String,
    pub true_label: GlobalLabel,
    pub score: f64,
    pub score_kind: ScoreKind,
}

/// Anything that scores a bag against every class accumulated so far.
pub trait LifelongClassifier {
    fn score_kind(&self) -> ScoreKind;

    /// Scores over all accumulated classes.
    fn class_il_scores(&self, bag: &SlideBag) -> Result<ScoreVector, EvalError>;

    /// Scores restricted to the classes of `task`.
    fn task_il_scores(&self, bag: &SlideBag, task: usize) -> Result<ScoreVector, EvalError> {
        Ok(self.class_il_scores(bag)?.restrict_to_task(task))
    }

    /// Confidence in the true label, given the CLASS-IL scores.
    fn confidence(&self, scores: &ScoreVector, truth: &GlobalLabel) -> Result<f64, EvalError> {
        let source = match self.score_kind() {
            ScoreKind::Cosine | ScoreKind::Dot => scores.clone(),
            ScoreKind::SoftmaxProb => softmax(scores, 1.0)?,
        };
        Ok(source.score_of(truth).unwrap_or(0.0))
    }
}

/// A trained aggregator + head; CLASS-IL scores are its logits.
pub struct TrainedClassifier<'a> {
    params: &'a AggregatorParams,
    labels: Vec<GlobalLabel>,
}

impl<'a> TrainedClassifier<'a> {
    /// `tasks` must cover every class the head knows about.
    pub fn new(params: &'a AggregatorParams, tasks: &[TaskDataset]) -> Result<Self, EvalError> {
        let space = label_space(tasks);
        let labels: Vec<GlobalLabel> = (0..params.class_count())
            .map(|g| space.from_global(g))
            .collect::<Option<_>>()
            .ok_or_else(|| {
                EvalError::Matrix(format!(
                    "head has {} classes but the tasks define {}",
                    params.class_count(),
                    space.total()
                ))
            })?;
        Ok(Self { params, labels })
    }
}

impl LifelongClassifier for TrainedClassifier<'_> {
    fn score_kind(&self) -> ScoreKind {
        ScoreKind::SoftmaxProb
    }

    fn class_il_scores(&self, bag: &SlideBag) -> Result<ScoreVector, EvalError> {
        let s = aggregator::aggregate(bag, self.params)?;
        Ok(aggregator::forward_logits(&s, self.params, &self.labels)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowEvaluation {
    pub ci: Vec<f64>,
    pub ti: Vec<f64>,
    pub records: Vec<ConfidenceRecord>,
}

/// Evaluates the test split of every task in `tasks_seen` after stage `stage`.
pub fn evaluate_row(
    classifier: &dyn LifelongClassifier,
    tasks_seen: &[TaskDataset],
    stage: usize,
) -> Result<RowEvaluation, EvalError> {
    let mut out = RowEvaluation {
        ci: Vec::with_capacity(tasks_seen.len()),
        ti: Vec::with_capacity(tasks_seen.len()),
        records: Vec::new(),
    };
    for task in tasks_seen {
        if task.test.is_empty() {
            return Err(EvalError::MissingTestSplit(task.task_index));
        }
        let (mut ci_hits, mut ti_hits) = (0usize, 0usize);
        for bag in &task.test {
            let scores = classifier.class_il_scores(bag)?;
            if argmax_tiebreak(&scores)? == bag.label {
                ci_hits += 1;
            }
            let restricted = classifier.task_il_scores(bag, task.task_index)?;
            if argmax_tiebreak(&restricted)? == bag.label {
                ti_hits += 1;
            }
            out.records.push(ConfidenceRecord {
                eval_task: task.task_index,
                train_stage: stage,
                slide_id: bag.slide_id.clone(),
                true_label: bag.label,
                score: classifier.confidence(&scores, &bag.label)?,
                score_kind: classifier.score_kind(),
            });
        }
        let n = task.test.len() as f64;
        out.ci.push(ci_hits as f64 / n);
        out.ti.push(ti_hits as f64 / n);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSummary {
    pub eval_task: usize,
    pub score_kind: ScoreKind,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Inclusive linear-interpolation quantile (`h = (n-1)p`) by selection.
fn quantile(values: &mut [f64], p: f64) -> f64 {
    let n = values.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let cmp = |a: &f64, b: &f64| a.total_cmp(b);
    let (_, &mut x_lo, upper) = values.select_nth_unstable_by(lo, cmp);
    if lo + 1 >= n || h == lo as f64 {
        return x_lo;
    }
    let x_hi = upper.iter().cloned().fold(f64::INFINITY, f64::min);
    x_lo + (h - lo as f64) * (x_hi - x_lo)
}

pub fn summarize_scores(values: &[f64]) -> Option<[f64; 6]> {
    if values.is_empty() {
        return None;
    }
    let mut buf = values.to_vec();
    let min = buf.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = buf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = buf.iter().sum::<f64>() / buf.len() as f64;
    let q1 = quantile(&mut buf, 0.25);
    let median = quantile(&mut buf, 0.5);
    let q3 = quantile(&mut buf, 0.75);
    Some([min, q1, median, q3, max, mean])
}

/// Order statistics per `(eval_task, score_kind)`, ordered by task.
pub fn confidence_summary(records: &[ConfidenceRecord]) -> Vec<ConfidenceSummary> {
    let mut groups: BTreeMap<(usize, ScoreKind), Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry((r.eval_task, r.score_kind)).or_default().push(r.score);
    }
    groups
        .into_iter()
        .map(|((eval_task, score_kind), values)| {
            let [min, q1, median, q3, max, mean] = summarize_scores(&values).expect("nonempty group");
            ConfidenceSummary {
                eval_task,
                score_kind,
                count: values.len(),
                min,
                q1,
                median,
                q3,
                max,
                mean,
            }
        })
        .collect()
}
