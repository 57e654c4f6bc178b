//! Hallucination-aware contrastive objective.
//!
//! For a batch of B images with their positive captions and K enhanced
//! negatives per image (captions of the same image with objects inserted,
//! removed or altered):
//!
//! ```text
//! l_i2t = mean_i  -log( e^{p_ii} / (Σ_j e^{p_ij} + Σ_k e^{n_ik}) )
//! l_t2i = mean_j  -log( e^{p_jj} /  Σ_i e^{p_ij} )
//! l1    = mean    max(0, tau1 - p_ii + s),  s ∈ {p_ij : j≠i} ∪ {n_ik}
//! l2    = mean    max(0, tau2 - n_ik + p_ij), j≠i
//! total = ½(l_i2t + l_t2i) + lambda1·l1 + lambda2·l2
//! ```
//!
//! `p` are scaled image-vs-positive scores, `n` scaled image-vs-own-negative
//! scores. `l1` keeps the positive ahead of every negative by `tau1`; `l2`
//! keeps enhanced negatives (partially correct captions) at least `tau2` above
//! unrelated in-batch captions.

mod train;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use train::{
    data_volume_sweep, train, train_with, EpochLog, StepObserver, SweepPoint, TrainLog,
};

/// Image-vs-text scores of one batch: `pos` is `[B × B]` (image i vs the
/// positive caption of image j), `neg` is `[B × K]` (image i vs its own
/// enhanced negatives). Also used for gradients of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    b: usize,
    k: usize,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl BatchScores {
    pub fn zeros(b: usize, k: usize) -> Self {
        Self {
            b,
            k,
            pos: vec![0.0; b * b],
            neg: vec![0.0; b * k],
        }
    }

    pub fn from_rows(pos: &[Vec<f64>], neg: &[Vec<f64>]) -> Result<Self> {
        let b = pos.len();
        if pos.iter().any(|r| r.len() != b) {
            return Err(Error::validation("positive score matrix is not square"));
        }
        if neg.len() != b && !(neg.is_empty()) {
            return Err(Error::validation("negative score rows do not match batch size"));
        }
        let k = neg.first().map_or(0, Vec::len);
        if neg.iter().any(|r| r.len() != k) {
            return Err(Error::validation("ragged negative score matrix"));
        }
        let mut neg_flat: Vec<f64> = neg.iter().flatten().copied().collect();
        if neg.is_empty() {
            neg_flat.clear();
        }
        Ok(Self {
            b,
            k,
            pos: pos.iter().flatten().copied().collect(),
            neg: neg_flat,
        })
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pos(&self, i: usize, j: usize) -> f64 {
        self.pos[i * self.b + j]
    }

    pub fn neg(&self, i: usize, k: usize) -> f64 {
        self.neg[i * self.k + k]
    }

    pub fn set_pos(&mut self, i: usize, j: usize, v: f64) {
        self.pos[i * self.b + j] = v;
    }

    pub fn set_neg(&mut self, i: usize, k: usize, v: f64) {
        self.neg[i * self.k + k] = v;
    }

    fn add_pos(&mut self, i: usize, j: usize, v: f64) {
        self.pos[i * self.b + j] += v;
    }

    fn add_neg(&mut self, i: usize, k: usize, v: f64) {
        self.neg[i * self.k + k] += v;
    }

    fn neg_row(&self, i: usize) -> &[f64] {
        &self.neg[i * self.k..(i + 1) * self.k]
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(v) = self.pos.iter().chain(&self.neg).find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score {v}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginAggregation {
    #[default]
    Mean,
    Sum,
    Max,
}

/// How many enhanced negatives per image enter a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NegativesPerImage {
    #[default]
    All,
    Count(usize),
}

impl Serialize for NegativesPerImage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            NegativesPerImage::All => s.serialize_str("all"),
            NegativesPerImage::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for NegativesPerImage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => Ok(NegativesPerImage::Count(n as usize)),
            Raw::Word(w) if w == "all" => Ok(NegativesPerImage::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "negatives_per_image must be a count or \"all\", got {w:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub negatives_per_image: NegativesPerImage,
    pub learn_logit_scale: bool,
    pub margin_aggregation: MarginAggregation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau1: 2.0,
            tau2: 2.0,
            lambda1: 0.1,
            lambda2: 0.1,
            negatives_per_image: NegativesPerImage::All,
            learn_logit_scale: true,
            margin_aggregation: MarginAggregation::Mean,
            epochs: 10,
            batch_size: 56,
            learning_rate: 1e-6,
            seed: 0,
            max_steps: None,
        }
    }
}

impl LossConfig {
    /// Defaults with a learning rate and batch size suited to the toy
    /// encoder, which starts from random tables rather than a pretrained
    /// checkpoint.
    pub fn toy() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("tau1", self.tau1),
            ("tau2", self.tau2),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("learning_rate", self.learning_rate),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if let NegativesPerImage::Count(n) = self.negatives_per_image {
            if n > crate::corpus::NEGATIVES_PER_SAMPLE {
                return Err(Error::validation(format!(
                    "negatives_per_image {n} exceeds {}",
                    crate::corpus::NEGATIVES_PER_SAMPLE
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(l_i2t: f64, l_t2i: f64, l1: f64, l2: f64, cfg: &LossConfig) -> Self {
        Self {
            l_i2t,
            l_t2i,
            l1,
            l2,
            total: 0.5 * (l_i2t + l_t2i) + cfg.lambda1 * l1 + cfg.lambda2 * l2,
        }
    }
}

/// Parameter update rule. `slot` identifies the tensor so stateful
/// optimizers can keep per-tensor buffers.
pub trait Optimizer {
    fn step(&mut self, slot: usize, params: &mut [f64], grads: &[f64]);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, _slot: usize, params: &mut [f64], grads: &[f64]) {
        if self.learning_rate == 0.0 {
            return;
        }
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= self.learning_rate * g;
        }
    }
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// "Accumulate" callback receiving (scale, weight) for gradient bookkeeping;
/// `None` when only values are needed.
type GradSink<'a> = Option<&'a mut BatchScores>;

fn i2t(batch: &BatchScores, weight: f64, mut grad: GradSink<'_>) -> f64 {
    let b = batch.b;
    if b == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..b {
        let row = (0..b).map(|j| batch.pos(i, j)).chain(batch.neg_row(i).iter().copied());
        let lse = logsumexp(row);
        sum += lse - batch.pos(i, i);
        if let Some(g) = grad.as_deref_mut() {
            let w = weight / b as f64;
            for j in 0..b {
                g.add_pos(i, j, w * (batch.pos(i, j) - lse).exp());
            }
            for k in 0..batch.k {
                g.add_neg(i, k, w * (batch.neg(i, k) - lse).exp());
            }
            g.add_pos(i, i, -w);
        }
    }
    sum / b as f64
}

fn t2i(batch: &BatchScores, weight: f64, mut grad: GradSink<'_>) -> f64 {
    let b = batch.b;
    if b == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for j in 0..b {
        let lse = logsumexp((0..b).map(|i| batch.pos(i, j)));
        sum += lse - batch.pos(j, j);
        if let Some(g) = grad.as_deref_mut() {
            let w = weight / b as f64;
            for i in 0..b {
                g.add_pos(i, j, w * (batch.pos(i, j) - lse).exp());
            }
            g.add_pos(j, j, -w);
        }
    }
    sum / b as f64
}

/// A hinge term `max(0, margin + plus - minus)` with the score cells that
/// appear with + and − sign.
#[derive(Clone, Copy)]
enum Cell {
    Pos(usize, usize),
    Neg(usize, usize),
}

fn cell_value(batch: &BatchScores, c: Cell) -> f64 {
    match c {
        Cell::Pos(i, j) => batch.pos(i, j),
        Cell::Neg(i, k) => batch.neg(i, k),
    }
}

fn add_cell(g: &mut BatchScores, c: Cell, v: f64) {
    match c {
        Cell::Pos(i, j) => g.add_pos(i, j, v),
        Cell::Neg(i, k) => g.add_neg(i, k, v),
    }
}

fn aggregate_hinges(
    batch: &BatchScores,
    margin: f64,
    terms: &[(Cell, Cell)],
    agg: MarginAggregation,
    weight: f64,
    grad: GradSink<'_>,
) -> f64 {
    if terms.is_empty() {
        return 0.0;
    }
    let values: Vec<f64> = terms
        .iter()
        .map(|&(minus, plus)| (margin - cell_value(batch, minus) + cell_value(batch, plus)).max(0.0))
        .collect();
    let (value, coeffs): (f64, Vec<f64>) = match agg {
        MarginAggregation::Mean => {
            let n = terms.len() as f64;
            (values.iter().sum::<f64>() / n, vec![1.0 / n; terms.len()])
        }
        MarginAggregation::Sum => (values.iter().sum(), vec![1.0; terms.len()]),
        MarginAggregation::Max => {
            let (arg, &best) = values
                .iter()
                .enumerate()
                .fold((0, &values[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            let mut c = vec![0.0; terms.len()];
            c[arg] = 1.0;
            (best, c)
        }
    };
    if let Some(g) = grad {
        for ((&(minus, plus), &v), &c) in terms.iter().zip(&values).zip(&coeffs) {
            if v > 0.0 && c != 0.0 {
                add_cell(g, minus, -weight * c);
                add_cell(g, plus, weight * c);
            }
        }
    }
    value
}

fn positive_margin_terms(batch: &BatchScores) -> Vec<(Cell, Cell)> {
    let mut terms = Vec::with_capacity(batch.b * (batch.b + batch.k));
    for i in 0..batch.b {
        for j in (0..batch.b).filter(|&j| j != i) {
            terms.push((Cell::Pos(i, i), Cell::Pos(i, j)));
        }
        for k in 0..batch.k {
            terms.push((Cell::Pos(i, i), Cell::Neg(i, k)));
        }
    }
    terms
}

fn enhanced_margin_terms(batch: &BatchScores) -> Vec<(Cell, Cell)> {
    let mut terms = Vec::with_capacity(batch.b * batch.k * batch.b);
    for i in 0..batch.b {
        for k in 0..batch.k {
            for j in (0..batch.b).filter(|&j| j != i) {
                terms.push((Cell::Neg(i, k), Cell::Pos(i, j)));
            }
        }
    }
    terms
}

/// Image-to-text contrastive loss over in-batch and enhanced negatives.
/// With K = 0 this is the vanilla CLIP image-to-text term.
pub fn loss_i2t(batch: &BatchScores) -> Result<f64> {
    batch.check_finite()?;
    Ok(i2t(batch, 1.0, None))
}

/// Text-to-image contrastive loss; enhanced negatives have no image and do
/// not enter.
pub fn loss_t2i(batch: &BatchScores) -> Result<f64> {
    batch.check_finite()?;
    Ok(t2i(batch, 1.0, None))
}

/// Mean hinge keeping each positive `tau1` ahead of every negative.
pub fn margin_positive(batch: &BatchScores, tau1: f64) -> Result<f64> {
    margin_positive_with(batch, tau1, MarginAggregation::Mean)
}

pub fn margin_positive_with(batch: &BatchScores, tau1: f64, agg: MarginAggregation) -> Result<f64> {
    batch.check_finite()?;
    Ok(aggregate_hinges(batch, tau1, &positive_margin_terms(batch), agg, 1.0, None))
}

/// Mean hinge keeping each enhanced negative `tau2` above the in-batch
/// negatives of the same image. Zero when K = 0 or B < 2.
pub fn margin_enhanced(batch: &BatchScores, tau2: f64) -> Result<f64> {
    margin_enhanced_with(batch, tau2, MarginAggregation::Mean)
}

pub fn margin_enhanced_with(batch: &BatchScores, tau2: f64, agg: MarginAggregation) -> Result<f64> {
    batch.check_finite()?;
    Ok(aggregate_hinges(batch, tau2, &enhanced_margin_terms(batch), agg, 1.0, None))
}

pub fn total_loss(batch: &BatchScores, cfg: &LossConfig) -> Result<LossBreakdown> {
    batch.check_finite()?;
    let agg = cfg.margin_aggregation;
    Ok(LossBreakdown::combine(
        i2t(batch, 1.0, None),
        t2i(batch, 1.0, None),
        aggregate_hinges(batch, cfg.tau1, &positive_margin_terms(batch), agg, 1.0, None),
        aggregate_hinges(batch, cfg.tau2, &enhanced_margin_terms(batch), agg, 1.0, None),
        cfg,
    ))
}

/// [`total_loss`] plus dTotal/dScores. Hinges at exactly zero get a zero
/// subgradient.
pub fn total_loss_with_grad(batch: &BatchScores, cfg: &LossConfig) -> Result<(LossBreakdown, BatchScores)> {
    batch.check_finite()?;
    let mut g = BatchScores::zeros(batch.b, batch.k);
    let agg = cfg.margin_aggregation;
    let l_i2t = i2t(batch, 0.5, Some(&mut g));
    let l_t2i = t2i(batch, 0.5, Some(&mut g));
    let l1 = aggregate_hinges(batch, cfg.tau1, &positive_margin_terms(batch), agg, cfg.lambda1, Some(&mut g));
    let l2 = aggregate_hinges(batch, cfg.tau2, &enhanced_margin_terms(batch), agg, cfg.lambda2, Some(&mut g));
    Ok((LossBreakdown::combine(l_i2t, l_t2i, l1, l2, cfg), g))
}
