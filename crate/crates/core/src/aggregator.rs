//! Slide-level aggregation over region embeddings plus a growable linear
//! head, with hand-derived gradients.
//!
//! Gated attention: for region embedding `e_r`,
//! `a = softmax_r(tanh(e_r·v) · sigmoid(e_r·u))` and the slide embedding is
//! `Σ a_r e_r`. Logits are `W s + b` over every class registered so far.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::datagen::format::{check_header, put_f64s, put_u32, Reader};
use crate::datagen::{DataError, SlideBag};
use crate::primitives::{log_sum_exp, softmax_slice, to_f64, GlobalLabel, ScoreVector};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ZSLM";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: model dim {expected}, input dim {found}")]
    Dimension { expected: usize, found: usize },
    #[error("slide {0} has no regions")]
    EmptyBag(String),
    #[error("classification head has no classes")]
    UninitializedHead,
    #[error("label {global_id} outside the {class_count} registered classes")]
    Label { global_id: usize, class_count: usize },
    #[error("parameter shapes differ: {0}")]
    Shape(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Mean,
    #[default]
    GatedAttention,
}

impl AggregatorKind {
    fn code(self) -> u8 {
        match self {
            AggregatorKind::Mean => 0,
            AggregatorKind::GatedAttention => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AggregatorKind::Mean),
            1 => Some(AggregatorKind::GatedAttention),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    pub kind: AggregatorKind,
    pub dim: usize,
    pub attention_v: Vec<f64>,
    pub attention_u: Vec<f64>,
    /// Row-major `class_count × dim`.
    pub head_weights: Vec<f64>,
    pub head_bias: Vec<f64>,
}

/// Tangent values with the same layout as [`AggregatorParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub attention_v: Vec<f64>,
    pub attention_u: Vec<f64>,
    pub head_weights: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl AggregatorParams {
    /// All-zero parameters with an empty head.
    pub fn zeros(kind: AggregatorKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            attention_v: vec![0.0; dim],
            attention_u: vec![0.0; dim],
            head_weights: Vec::new(),
            head_bias: Vec::new(),
        }
    }

    /// Attention vectors drawn from N(0, 1/dim); empty head.
    pub fn init(kind: AggregatorKind, dim: usize, seed: u64) -> Self {
        let mut params = Self::zeros(kind, dim);
        if kind == AggregatorKind::GatedAttention {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
            for x in params.attention_v.iter_mut().chain(params.attention_u.iter_mut()) {
                *x = normal.sample(&mut rng);
            }
        }
        params
    }

    pub fn class_count(&self) -> usize {
        self.head_bias.len()
    }

    pub fn head_row(&self, class: usize) -> &[f64] {
        &self.head_weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn segments(&self) -> [&[f64]; 4] {
        [
            &self.attention_v,
            &self.attention_u,
            &self.head_weights,
            &self.head_bias,
        ]
    }

    pub fn segments_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.attention_v,
            &mut self.attention_u,
            &mut self.head_weights,
            &mut self.head_bias,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.segments().iter().map(|s| s.len()).sum()
    }
}

impl Gradients {
    pub fn zeros_like(params: &AggregatorParams) -> Self {
        Self {
            attention_v: vec![0.0; params.attention_v.len()],
            attention_u: vec![0.0; params.attention_u.len()],
            head_weights: vec![0.0; params.head_weights.len()],
            head_bias: vec![0.0; params.head_bias.len()],
        }
    }

    pub fn segments(&self) -> [&[f64]; 4] {
        [
            &self.attention_v,
            &self.attention_u,
            &self.head_weights,
            &self.head_bias,
        ]
    }

    pub fn segments_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.attention_v,
            &mut self.attention_u,
            &mut self.head_weights,
            &mut self.head_bias,
        ]
    }

    /// `self += k · other`, over the common prefix of every segment.
    pub fn add_scaled(&mut self, other: &Gradients, k: f64) {
        for (dst, src) in self.segments_mut().into_iter().zip(other.segments()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.segments().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    fn shape(&self) -> [usize; 4] {
        self.segments().map(<[f64]>::len)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub regions: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    tanh_gate: Vec<f64>,
    sigmoid_gate: Vec<f64>,
    pub slide: Vec<f64>,
    pub logits: Vec<f64>,
}

fn check_bag(bag: &SlideBag, dim: usize) -> Result<(), ModelError> {
    if bag.regions.is_empty() {
        return Err(ModelError::EmptyBag(bag.slide_id.clone()));
    }
    for r in &bag.regions {
        if r.dim() != dim {
            return Err(ModelError::Dimension {
                expected: dim,
                found: r.dim(),
            });
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn pool(regions: &[Vec<f64>], weights: &[f64], dim: usize) -> Vec<f64> {
    let mut s = vec![0.0; dim];
    for (r, &a) in regions.iter().zip(weights) {
        for (acc, x) in s.iter_mut().zip(r) {
            *acc += a * x;
        }
    }
    s
}

fn head_logits(s: &[f64], params: &AggregatorParams) -> Vec<f64> {
    (0..params.class_count())
        .map(|k| dot(params.head_row(k), s) + params.head_bias[k])
        .collect()
}

fn forward_pool(bag: &SlideBag, params: &AggregatorParams) -> Result<ForwardTrace, ModelError> {
    check_bag(bag, params.dim)?;
    let regions: Vec<Vec<f64>> = bag.regions.iter().map(|r| to_f64(&r.embedding)).collect();
    let n = regions.len();
    let (weights, tanh_gate, sigmoid_gate) = match params.kind {
        AggregatorKind::Mean => (vec![1.0 / n as f64; n], Vec::new(), Vec::new()),
        AggregatorKind::GatedAttention => {
            let t: Vec<f64> = regions.iter().map(|e| dot(e, &params.attention_v).tanh()).collect();
            let g: Vec<f64> = regions
                .iter()
                .map(|e| sigmoid(dot(e, &params.attention_u)))
                .collect();
            let scores: Vec<f64> = t.iter().zip(&g).map(|(a, b)| a * b).collect();
            (softmax_slice(&scores, 1.0), t, g)
        }
    };
    let slide = pool(&regions, &weights, params.dim);
    Ok(ForwardTrace {
        regions,
        weights,
        tanh_gate,
        sigmoid_gate,
        slide,
        logits: Vec::new(),
    })
}

/// Slide embedding of `bag`.
pub fn aggregate(bag: &SlideBag, params: &AggregatorParams) -> Result<Vec<f64>, ModelError> {
    Ok(forward_pool(bag, params)?.slide)
}

pub fn attention_weights(bag: &SlideBag, params: &AggregatorParams) -> Result<Vec<f64>, ModelError> {
    Ok(forward_pool(bag, params)?.weights)
}

/// Raw logits `W s + b`.
pub fn logits(s: &[f64], params: &AggregatorParams) -> Result<Vec<f64>, ModelError> {
    if params.class_count() == 0 {
        return Err(ModelError::UninitializedHead);
    }
    if s.len() != params.dim {
        return Err(ModelError::Dimension {
            expected: params.dim,
            found: s.len(),
        });
    }
    Ok(head_logits(s, params))
}

/// Logits labeled with the registered classes; `labels` lists them in global order.
pub fn forward_logits(
    s: &[f64],
    params: &AggregatorParams,
    labels: &[GlobalLabel],
) -> Result<ScoreVector, ModelError> {
    let z = logits(s, params)?;
    ScoreVector::new(z, labels.to_vec()).map_err(|e| ModelError::Shape(e.to_string()))
}

pub fn forward(bag: &SlideBag, params: &AggregatorParams) -> Result<ForwardTrace, ModelError> {
    if params.class_count() == 0 {
        return Err(ModelError::UninitializedHead);
    }
    let mut trace = forward_pool(bag, params)?;
    trace.logits = head_logits(&trace.slide, params);
    Ok(trace)
}

/// `-log softmax(logits)[y]`.
pub fn cross_entropy(logits: &ScoreVector, y: &GlobalLabel) -> Result<f64, ModelError> {
    let i = logits
        .candidates
        .iter()
        .position(|c| c.global_id == y.global_id)
        .ok_or(ModelError::Label {
            global_id: y.global_id,
            class_count: logits.len(),
        })?;
    Ok(log_sum_exp(&logits.scores) - logits.scores[i])
}

/// Cross-entropy against class index `y` and its gradient in the logits.
pub fn cross_entropy_grad(logits: &[f64], y: usize) -> Result<(f64, Vec<f64>), ModelError> {
    if y >= logits.len() {
        return Err(ModelError::Label {
            global_id: y,
            class_count: logits.len(),
        });
    }
    let loss = log_sum_exp(logits) - logits[y];
    let mut grad = softmax_slice(logits, 1.0);
    grad[y] -= 1.0;
    Ok((loss, grad))
}

/// Chain rule from a logit gradient back to every parameter.
pub fn backward_from_logits(trace: &ForwardTrace, dlogits: &[f64], params: &AggregatorParams) -> Gradients {
    let dim = params.dim;
    let mut grads = Gradients::zeros_like(params);
    let mut dslide = vec![0.0; dim];
    for (k, &dz) in dlogits.iter().enumerate() {
        grads.head_bias[k] = dz;
        let row = &mut grads.head_weights[k * dim..(k + 1) * dim];
        for (g, s) in row.iter_mut().zip(&trace.slide) {
            *g = dz * s;
        }
        for (ds, w) in dslide.iter_mut().zip(params.head_row(k)) {
            *ds += dz * w;
        }
    }
    if params.kind == AggregatorKind::GatedAttention {
        // d loss / d a_r, then through the softmax over attention scores.
        let da: Vec<f64> = trace.regions.iter().map(|e| dot(e, &dslide)).collect();
        let mean_da = dot(&trace.weights, &da);
        for (r, e) in trace.regions.iter().enumerate() {
            let dscore = trace.weights[r] * (da[r] - mean_da);
            let t = trace.tanh_gate[r];
            let g = trace.sigmoid_gate[r];
            let dh = dscore * g * (1.0 - t * t);
            let dk = dscore * t * g * (1.0 - g);
            for d in 0..dim {
                grads.attention_v[d] += dh * e[d];
                grads.attention_u[d] += dk * e[d];
            }
        }
    }
    grads
}

/// Cross-entropy loss of one labeled bag with exact gradients.
pub fn loss_and_grad(
    bag: &SlideBag,
    y: &GlobalLabel,
    params: &AggregatorParams,
) -> Result<(f64, Gradients, ForwardTrace), ModelError> {
    let trace = forward(bag, params)?;
    let (loss, dz) = cross_entropy_grad(&trace.logits, y.global_id)?;
    let grads = backward_from_logits(&trace, &dz, params);
    Ok((loss, grads, trace))
}

pub fn backward(bag: &SlideBag, y: &GlobalLabel, params: &AggregatorParams) -> Result<Gradients, ModelError> {
    Ok(loss_and_grad(bag, y, params)?.1)
}

pub fn sgd_step(params: &mut AggregatorParams, grads: &Gradients, learning_rate: f64) -> Result<(), ModelError> {
    let expected = params.segments().map(<[f64]>::len);
    if grads.shape() != expected {
        return Err(ModelError::Shape(format!(
            "gradients {:?} vs parameters {expected:?}",
            grads.shape()
        )));
    }
    if !grads.is_finite() {
        return Err(ModelError::Divergence("non-finite gradient entry".into()));
    }
    for (p, g) in params.segments_mut().into_iter().zip(grads.segments()) {
        for (x, d) in p.iter_mut().zip(g) {
            *x -= learning_rate * d;
        }
    }
    Ok(())
}

/// Appends `new_class_count` zero rows and zero biases.
pub fn grow_head(params: &mut AggregatorParams, new_class_count: usize) {
    params
        .head_weights
        .resize(params.head_weights.len() + new_class_count * params.dim, 0.0);
    params
        .head_bias
        .resize(params.head_bias.len() + new_class_count, 0.0);
}

/// Parameter-free aggregation used by the training-free path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FrozenAggregator {
    #[default]
    MeanOfRegions,
}

impl FrozenAggregator {
    pub fn aggregate(&self, bag: &SlideBag) -> Result<Vec<f64>, ModelError> {
        match self {
            FrozenAggregator::MeanOfRegions => {
                let dim = bag.dim();
                check_bag(bag, dim)?;
                let regions: Vec<Vec<f64>> = bag.regions.iter().map(|r| to_f64(&r.embedding)).collect();
                let n = regions.len();
                Ok(pool(&regions, &vec![1.0 / n as f64; n], dim))
            }
        }
    }
}

/// `magic "ZSLM" | version u32 | kind u8 | dim u32 | class_count u32 | v | u | W | b` (f64 LE).
pub fn encode_checkpoint(params: &AggregatorParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(17 + 8 * params.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, crate::datagen::format::FORMAT_VERSION);
    out.push(params.kind.code());
    put_u32(&mut out, params.dim as u32);
    put_u32(&mut out, params.class_count() as u32);
    for seg in params.segments() {
        put_f64s(&mut out, seg);
    }
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<AggregatorParams, ModelError> {
    let mut r = Reader::new(buf);
    check_header(&mut r, CHECKPOINT_MAGIC)?;
    let short = |s: crate::datagen::format::Short| DataError::Format {
        offset: s.offset,
        reason: "truncated checkpoint".into(),
    };
    let at = r.offset();
    let kind = AggregatorKind::from_code(r.u8().map_err(short)?).ok_or(DataError::Format {
        offset: at,
        reason: "unknown aggregator kind".into(),
    })?;
    let dim = r.u32().map_err(short)? as usize;
    let classes = r.u32().map_err(short)? as usize;
    let params = AggregatorParams {
        kind,
        dim,
        attention_v: r.f64s(dim).map_err(short)?,
        attention_u: r.f64s(dim).map_err(short)?,
        head_weights: r.f64s(classes.saturating_mul(dim)).map_err(short)?,
        head_bias: r.f64s(classes).map_err(short)?,
    };
    if r.remaining() != 0 {
        return Err(DataError::Format {
            offset: r.offset(),
            reason: "trailing bytes".into(),
        }
        .into());
    }
    Ok(params)
}

pub fn write_checkpoint(params: &AggregatorParams, path: impl AsRef<Path>) -> Result<(), ModelError> {
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AggregatorParams, ModelError> {
    decode_checkpoint(&std::fs::read(path)?)
}
