//! Vector math and prediction primitives shared by every other module.
//!
//! Embeddings are kept in storage precision (`f32`) inside slide bags; every
//! reduction here accumulates in `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("score at position {0} is NaN")]
    InvalidScore(usize),
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("score vector has {scores} scores but {candidates} candidates")]
    Shape { scores: usize, candidates: usize },
}

/// Position of a class in the accumulated label space of a task sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GlobalLabel {
    pub task_index: usize,
    pub local_class: usize,
    pub global_id: usize,
}

/// Maps `(task, local class)` pairs to global ids: a task's classes follow
/// all classes of the tasks before it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    offsets: Vec<usize>,
    counts: Vec<usize>,
}

impl LabelSpace {
    pub fn new(class_counts: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(class_counts.len());
        let mut acc = 0;
        for &m in class_counts {
            offsets.push(acc);
            acc += m;
        }
        Self {
            offsets,
            counts: class_counts.to_vec(),
        }
    }

    pub fn task_count(&self) -> usize {
        self.counts.len()
    }

    pub fn class_count(&self, task: usize) -> usize {
        self.counts[task]
    }

    /// Number of classes in tasks `0..=task`.
    pub fn classes_through(&self, task: usize) -> usize {
        self.offsets[task] + self.counts[task]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn label(&self, task: usize, local_class: usize) -> Option<GlobalLabel> {
        if task >= self.counts.len() || local_class >= self.counts[task] {
            return None;
        }
        Some(GlobalLabel {
            task_index: task,
            local_class,
            global_id: self.offsets[task] + local_class,
        })
    }

    pub fn from_global(&self, global_id: usize) -> Option<GlobalLabel> {
        let task = self
            .offsets
            .iter()
            .zip(&self.counts)
            .position(|(&o, &c)| global_id >= o && global_id < o + c)?;
        self.label(task, global_id - self.offsets[task])
    }

    /// All labels of one task, in local order.
    pub fn task_labels(&self, task: usize) -> Vec<GlobalLabel> {
        (0..self.counts[task])
            .filter_map(|c| self.label(task, c))
            .collect()
    }

    /// All labels of tasks `0..=task`, in global order.
    pub fn labels_through(&self, task: usize) -> Vec<GlobalLabel> {
        (0..=task).flat_map(|t| self.task_labels(t)).collect()
    }
}

/// Scores over an explicit candidate set of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub candidates: Vec<GlobalLabel>,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>, candidates: Vec<GlobalLabel>) -> Result<Self, MathError> {
        if scores.len() != candidates.len() {
            return Err(MathError::Shape {
                scores: scores.len(),
                candidates: candidates.len(),
            });
        }
        Ok(Self { scores, candidates })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn score_of(&self, label: &GlobalLabel) -> Option<f64> {
        self.candidates
            .iter()
            .position(|c| c.global_id == label.global_id)
            .map(|i| self.scores[i])
    }

    /// Keeps only the candidates belonging to `task`.
    pub fn restrict_to_task(&self, task: usize) -> ScoreVector {
        let (scores, candidates) = self
            .scores
            .iter()
            .zip(&self.candidates)
            .filter(|(_, c)| c.task_index == task)
            .map(|(&s, &c)| (s, c))
            .unzip();
        ScoreVector { scores, candidates }
    }
}

/// How a slide embedding is compared against a prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Both sides L2-normalized.
    #[default]
    Cosine,
    /// Raw dot product against the stored prototype.
    Dot,
}

/// Output of [`l2_normalize`]. `degenerate` is set when the input had zero
/// norm, in which case `values` is the input unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub degenerate: bool,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn l2_normalize(v: &[f64]) -> Normalized {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Normalized {
            values: v.to_vec(),
            degenerate: true,
        };
    }
    Normalized {
        values: v.iter().map(|x| x / n).collect(),
        degenerate: false,
    }
}

/// Cosine similarity. A zero vector on either side yields 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MathError> {
    if a.len() != b.len() {
        return Err(MathError::Dimension {
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn softmax(logits: &ScoreVector, temperature: f64) -> Result<ScoreVector, MathError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(MathError::Temperature(temperature));
    }
    if logits.is_empty() {
        return Err(MathError::Empty("softmax"));
    }
    let probs = softmax_slice(&logits.scores, temperature);
    Ok(ScoreVector {
        scores: probs,
        candidates: logits.candidates.clone(),
    })
}

/// Max-shifted softmax on a nonempty slice.
pub(crate) fn softmax_slice(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln Σ exp(z)`, max-shifted.
pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

/// Candidate with the largest score; exact ties go to the smallest global id.
pub fn argmax_tiebreak(scores: &ScoreVector) -> Result<GlobalLabel, MathError> {
    if scores.is_empty() {
        return Err(MathError::Empty("argmax"));
    }
    if let Some(i) = scores.scores.iter().position(|s| s.is_nan()) {
        return Err(MathError::InvalidScore(i));
    }
    let mut best = 0;
    for i in 1..scores.len() {
        let (s, b) = (scores.scores[i], scores.scores[best]);
        if s > b || (s == b && scores.candidates[i].global_id < scores.candidates[best].global_id)
        {
            best = i;
        }
    }
    Ok(scores.candidates[best])
}

pub(crate) fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(ids: &[usize]) -> Vec<GlobalLabel> {
        ids.iter()
            .map(|&g| GlobalLabel {
                task_index: 0,
                local_class: g,
                global_id: g,
            })
            .collect()
    }

    fn sv(scores: &[f64], g: &[usize]) -> ScoreVector {
        ScoreVector::new(scores.to_vec(), ids(g)).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&[3.0, 4.0]);
        assert!(!n.degenerate);
        assert!((n.values[0] - 0.6).abs() < 1e-15 && (n.values[1] - 0.8).abs() < 1e-15);
        assert_eq!(l2_normalize(&[1.0, 0.0, 0.0]).values, vec![1.0, 0.0, 0.0]);
        let z = l2_normalize(&[0.0, 0.0]);
        assert!(z.degenerate);
        assert_eq!(z.values, vec![0.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -2.0, 5.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(MathError::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&sv(&[2.0, 2.0, 2.0], &[0, 1, 2]), 1.0).unwrap();
        for x in &p.scores {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax(&sv(&[1e6, 0.0], &[0, 1]), 1.0).unwrap();
        assert!((p.scores[0] - 1.0).abs() < 1e-12 && p.scores[1] >= 0.0 && p.scores[1] < 1e-12);
        let p = softmax(&sv(&[2f64.ln(), 0.0], &[0, 1]), 1.0).unwrap();
        assert!((p.scores[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.scores[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(softmax(&sv(&[], &[]), 1.0).is_err());
        assert!(softmax(&sv(&[1.0], &[0]), 0.0).is_err());
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_tiebreak(&sv(&[0.1, 0.9, 0.3], &[0, 1, 2])).unwrap().global_id, 1);
        assert_eq!(argmax_tiebreak(&sv(&[0.5, 0.5], &[3, 7])).unwrap().global_id, 3);
        assert_eq!(argmax_tiebreak(&sv(&[0.5, 0.5], &[7, 3])).unwrap().global_id, 3);
        assert_eq!(
            argmax_tiebreak(&sv(&[-1.0, -1.0, -0.5], &[0, 1, 2])).unwrap().global_id,
            2
        );
        assert_eq!(argmax_tiebreak(&sv(&[], &[])), Err(MathError::Empty("argmax")));
        assert_eq!(
            argmax_tiebreak(&sv(&[0.1, f64::NAN], &[0, 1])),
            Err(MathError::InvalidScore(1))
        );
    }

    #[test]
    fn label_space_is_bijective() {
        let space = LabelSpace::new(&[2, 3, 2, 2, 2, 2]);
        assert_eq!(space.total(), 13);
        for g in 0..13 {
            let l = space.from_global(g).unwrap();
            assert_eq!(space.label(l.task_index, l.local_class).unwrap().global_id, g);
        }
        assert_eq!(space.label(1, 0).unwrap().global_id, 2);
        assert_eq!(space.classes_through(1), 5);
        assert!(space.label(1, 3).is_none());
        assert!(space.from_global(13).is_none());
    }

    fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, n)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_bounded((a, b) in (1usize..12).prop_flat_map(|n| (finite_vec(n), finite_vec(n)))) {
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn cosine_scale_invariant(a in finite_vec(6), k in 1e-3f64..1e3) {
            prop_assume!(norm(&a) > 1e-6);
            let scaled: Vec<f64> = a.iter().map(|x| x * k).collect();
            prop_assert!((cosine_similarity(&a, &scaled).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn normalized_has_unit_norm(a in finite_vec(8)) {
            prop_assume!(norm(&a) > 1e-9);
            let n = l2_normalize(&a);
            prop_assert!((norm(&n.values) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn argmax_invariant_under_increasing_affine(s in finite_vec(7), slope in 1e-3f64..50.0, shift in -50.0f64..50.0) {
            let g: Vec<usize> = (0..7).collect();
            let base = argmax_tiebreak(&sv(&s, &g)).unwrap();
            let t: Vec<f64> = s.iter().map(|x| slope * x + shift).collect();
            // Affine maps can merge near-ties through rounding, so only compare when the max is clear.
            let mut sorted = s.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(argmax_tiebreak(&sv(&t, &g)).unwrap(), base);
        }

        #[test]
        fn softmax_shift_invariant(s in finite_vec(5), c in -1e3f64..1e3) {
            let g: Vec<usize> = (0..5).collect();
            let p = softmax(&sv(&s, &g), 1.0).unwrap();
            let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
            let q = softmax(&sv(&shifted, &g), 1.0).unwrap();
            let total: f64 = p.scores.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for (x, y) in p.scores.iter().zip(&q.scores) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
