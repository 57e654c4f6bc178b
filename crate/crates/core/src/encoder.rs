//! Dual-encoder contract and a trainable hashed bag-of-tokens toy encoder.
//!
//! Any type implementing [`DualEncoder`] can be scored on a benchmark; types
//! that also implement [`TrainableEncoder`] can be fine-tuned with the
//! objective in [`crate::objective`]. Real checkpoints plug in through the
//! same traits.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::ImageRecord;
use crate::hashing::fnv1a64;
use crate::objective::{BatchScores, Optimizer};
use crate::{Error, Result};

/// Upper clamp of the logit scale (inverse temperature).
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Initial logit scale, 1/0.07.
pub const INIT_LOG_LOGIT_SCALE: f64 = 2.659_260_036_932_778;

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// L2-normalize `values`.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2(&values);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Numeric(format!("cannot normalize vector with norm {norm}")));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Scaled image-text similarities, row-major `[n_images × n_texts]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub n_images: usize,
    pub n_texts: usize,
    pub logit_scale: f64,
    scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn get(&self, image: usize, text: usize) -> f64 {
        self.scores[image * self.n_texts + text]
    }

    pub fn row(&self, image: usize) -> &[f64] {
        &self.scores[image * self.n_texts..(image + 1) * self.n_texts]
    }
}

pub fn score(images: &[Embedding], texts: &[Embedding], logit_scale: f64) -> Result<ScoreMatrix> {
    if !(logit_scale.is_finite() && logit_scale > 0.0) {
        return Err(Error::validation(format!("logit scale must be positive, got {logit_scale}")));
    }
    let dim = images.first().or(texts.first()).map(Embedding::dim);
    if let Some(d) = dim {
        if let Some(bad) = images.iter().chain(texts).find(|e| e.dim() != d) {
            return Err(Error::validation(format!(
                "embedding dimension mismatch: {} vs {d}",
                bad.dim()
            )));
        }
    }
    let mut scores = Vec::with_capacity(images.len() * texts.len());
    for img in images {
        for txt in texts {
            scores.push(logit_scale * img.dot(txt));
        }
    }
    Ok(ScoreMatrix {
        n_images: images.len(),
        n_texts: texts.len(),
        logit_scale,
        scores,
    })
}

/// Anything that embeds images and texts into a shared unit sphere.
pub trait DualEncoder {
    fn encode_images(&self, images: &[&ImageRecord]) -> Result<Vec<Embedding>>;
    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Embedding>>;
    fn logit_scale(&self) -> f64;
}

/// One training batch: `negatives[i]` are image i's enhanced negatives and
/// every row has the same length K.
#[derive(Debug, Clone)]
pub struct BatchInput<'a> {
    pub images: Vec<&'a ImageRecord>,
    pub positives: Vec<&'a str>,
    pub negatives: Vec<Vec<&'a str>>,
}

impl BatchInput<'_> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn negatives_per_image(&self) -> usize {
        self.negatives.first().map_or(0, Vec::len)
    }

    pub fn check(&self) -> Result<()> {
        let b = self.images.len();
        if self.positives.len() != b || self.negatives.len() != b {
            return Err(Error::validation("batch parts have different lengths"));
        }
        let k = self.negatives_per_image();
        if self.negatives.iter().any(|n| n.len() != k) {
            return Err(Error::validation("ragged enhanced negatives in batch"));
        }
        Ok(())
    }
}

/// An encoder whose parameters can be updated from score gradients.
pub trait TrainableEncoder: DualEncoder {
    type Tape;
    type Grad;

    fn forward(&self, batch: &BatchInput<'_>) -> Result<(BatchScores, Self::Tape)>;

    /// Parameter gradient given dLoss/dScores for the batch behind `tape`.
    fn backward(&self, tape: &Self::Tape, d_scores: &BatchScores) -> Self::Grad;

    fn apply(&mut self, grad: &Self::Grad, optimizer: &mut dyn Optimizer, learn_logit_scale: bool);
}

/// Parameters of the hashed bag-of-tokens encoder.
///
/// An image is the normalized sum of `image_table` rows of its annotated
/// object labels; a text is the normalized sum of `text_table` rows of its
/// tokens. Tables are row-major `[vocab_hash_size × embed_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoderParams {
    pub vocab_hash_size: usize,
    pub embed_dim: usize,
    pub image_table: Vec<f64>,
    pub text_table: Vec<f64>,
    pub log_logit_scale: f64,
}

pub const DEFAULT_VOCAB_HASH_SIZE: usize = 4096;
pub const DEFAULT_EMBED_DIM: usize = 32;
/// Init scale used by the toy presets; small enough that the initial
/// embeddings are close to random directions.
pub const TOY_INIT_STD: f64 = 0.1;

/// Lowercase, split on whitespace, strip punctuation at token edges.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone)]
struct Encoded {
    buckets: Vec<usize>,
    norm: f64,
    unit: Vec<f64>,
}

/// Cached activations of one toy forward pass.
#[derive(Debug, Clone)]
pub struct ToyTape {
    images: Vec<Encoded>,
    positives: Vec<Encoded>,
    negatives: Vec<Vec<Encoded>>,
    scores: BatchScores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyGradients {
    pub image_table: Vec<f64>,
    pub text_table: Vec<f64>,
    pub log_logit_scale: f64,
}

impl ToyEncoderParams {
    /// Uniform init with the given standard deviation.
    pub fn random(vocab_hash_size: usize, embed_dim: usize, init_std: f64, seed: u64) -> Result<Self> {
        if vocab_hash_size == 0 || embed_dim == 0 {
            return Err(Error::validation("toy encoder needs nonzero vocab and dimension"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let half_width = init_std * 3f64.sqrt();
        let mut table = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-half_width..=half_width)).collect()
        };
        let image_table = table(vocab_hash_size * embed_dim);
        let text_table = table(vocab_hash_size * embed_dim);
        Ok(Self {
            vocab_hash_size,
            embed_dim,
            image_table,
            text_table,
            log_logit_scale: INIT_LOG_LOGIT_SCALE,
        })
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.vocab_hash_size as u64) as usize
    }

    pub fn zero_grad(&self) -> ToyGradients {
        ToyGradients {
            image_table: vec![0.0; self.image_table.len()],
            text_table: vec![0.0; self.text_table.len()],
            log_logit_scale: 0.0,
        }
    }

    fn scale_clamped(&self) -> bool {
        self.log_logit_scale.exp() > MAX_LOGIT_SCALE
    }

    fn encode_buckets(&self, table: &[f64], buckets: Vec<usize>) -> Result<Encoded> {
        let d = self.embed_dim;
        let mut raw = vec![0.0; d];
        for &b in &buckets {
            for (acc, v) in raw.iter_mut().zip(&table[b * d..(b + 1) * d]) {
                *acc += v;
            }
        }
        let norm = l2(&raw);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Numeric(format!("degenerate embedding (norm {norm})")));
        }
        let unit = raw.into_iter().map(|v| v / norm).collect();
        Ok(Encoded { buckets, norm, unit })
    }

    fn encode_text_one(&self, text: &str) -> Result<Encoded> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::validation(format!("cannot encode empty text {text:?}")));
        }
        let buckets = tokens.iter().map(|t| self.bucket(t)).collect();
        self.encode_buckets(&self.text_table, buckets)
    }

    fn encode_image_one(&self, record: &ImageRecord) -> Result<Encoded> {
        if record.objects.is_empty() {
            return Err(Error::validation(format!(
                "{}: toy encoder needs at least one annotated object",
                record.image_id
            )));
        }
        let buckets = record.object_names().map(|o| self.bucket(o)).collect();
        self.encode_buckets(&self.image_table, buckets)
    }

    /// Accumulate dLoss/d(unit) of one embedding into its table rows.
    fn backprop_into(&self, enc: &Encoded, d_unit: &[f64], table_grad: &mut [f64]) {
        let d = self.embed_dim;
        let proj = dot(&enc.unit, d_unit);
        let d_raw: Vec<f64> = d_unit
            .iter()
            .zip(&enc.unit)
            .map(|(g, u)| (g - u * proj) / enc.norm)
            .collect();
        for &b in &enc.buckets {
            for (acc, g) in table_grad[b * d..(b + 1) * d].iter_mut().zip(&d_raw) {
                *acc += g;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.log_logit_scale.is_finite()
            && self.image_table.iter().chain(&self.text_table).all(|v| v.is_finite())
    }

    /// Binary checkpoint: magic, `u32` vocab size and dimension, `f64` log
    /// logit scale, then both tables row-major as little-endian `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * (self.image_table.len() + self.text_table.len()));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.vocab_hash_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.embed_dim as u32).to_le_bytes());
        out.extend_from_slice(&self.log_logit_scale.to_le_bytes());
        for v in self.image_table.iter().chain(&self.text_table) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = CHECKPOINT_MAGIC.len() + 16;
        if bytes.len() < header || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::validation("not a toy encoder checkpoint"));
        }
        let m = CHECKPOINT_MAGIC.len();
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let vocab = u32_at(m);
        let dim = u32_at(m + 4);
        let log_scale = f64::from_le_bytes(bytes[m + 8..m + 16].try_into().unwrap());
        if vocab == 0 || dim == 0 {
            return Err(Error::validation("checkpoint has an empty shape"));
        }
        let cells = vocab
            .checked_mul(dim)
            .ok_or_else(|| Error::validation("checkpoint shape overflows"))?;
        let expected = header + 16 * cells;
        if bytes.len() != expected {
            return Err(Error::validation(format!(
                "checkpoint shape {vocab}x{dim} needs {expected} bytes, file has {}",
                bytes.len()
            )));
        }
        let mut values = bytes[header..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let image_table: Vec<f64> = values.by_ref().take(cells).collect();
        let text_table: Vec<f64> = values.collect();
        let params = Self {
            vocab_hash_size: vocab,
            embed_dim: dim,
            image_table,
            text_table,
            log_logit_scale: log_scale,
        };
        if !params.all_finite() {
            return Err(Error::validation("checkpoint contains non-finite values"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"OHDTOY01";

impl DualEncoder for ToyEncoderParams {
    fn encode_images(&self, images: &[&ImageRecord]) -> Result<Vec<Embedding>> {
        images
            .iter()
            .map(|r| self.encode_image_one(r).map(|e| Embedding(e.unit)))
            .collect()
    }

    fn encode_texts(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        texts
            .iter()
            .map(|t| self.encode_text_one(t).map(|e| Embedding(e.unit)))
            .collect()
    }

    fn logit_scale(&self) -> f64 {
        self.log_logit_scale.exp().min(MAX_LOGIT_SCALE)
    }
}

impl TrainableEncoder for ToyEncoderParams {
    type Tape = ToyTape;
    type Grad = ToyGradients;

    fn forward(&self, batch: &BatchInput<'_>) -> Result<(BatchScores, ToyTape)> {
        batch.check()?;
        let s = self.logit_scale();
        let images = batch
            .images
            .iter()
            .map(|r| self.encode_image_one(r))
            .collect::<Result<Vec<_>>>()?;
        let positives = batch
            .positives
            .iter()
            .map(|t| self.encode_text_one(t))
            .collect::<Result<Vec<_>>>()?;
        let negatives = batch
            .negatives
            .iter()
            .map(|row| row.iter().map(|t| self.encode_text_one(t)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let b = images.len();
        let k = batch.negatives_per_image();
        let mut scores = BatchScores::zeros(b, k);
        for (i, img) in images.iter().enumerate() {
            for (j, txt) in positives.iter().enumerate() {
                scores.set_pos(i, j, s * dot(&img.unit, &txt.unit));
            }
            for (kk, txt) in negatives[i].iter().enumerate() {
                scores.set_neg(i, kk, s * dot(&img.unit, &txt.unit));
            }
        }
        let tape = ToyTape {
            images,
            positives,
            negatives,
            scores: scores.clone(),
        };
        Ok((scores, tape))
    }

    #[allow(clippy::needless_range_loop)] // index form mirrors the chain rule
    fn backward(&self, tape: &ToyTape, d_scores: &BatchScores) -> ToyGradients {
        let s = self.logit_scale();
        let d = self.embed_dim;
        let b = tape.images.len();
        let k = tape.scores.k();
        let mut grad = self.zero_grad();

        let mut d_img = vec![vec![0.0; d]; b];
        let mut d_pos = vec![vec![0.0; d]; b];
        let mut d_log_scale = 0.0;
        for i in 0..b {
            for j in 0..b {
                let g = d_scores.pos(i, j);
                if g == 0.0 {
                    continue;
                }
                d_log_scale += g * tape.scores.pos(i, j);
                for c in 0..d {
                    d_img[i][c] += s * g * tape.positives[j].unit[c];
                    d_pos[j][c] += s * g * tape.images[i].unit[c];
                }
            }
            for kk in 0..k {
                let g = d_scores.neg(i, kk);
                if g == 0.0 {
                    continue;
                }
                d_log_scale += g * tape.scores.neg(i, kk);
                let neg = &tape.negatives[i][kk];
                let d_neg: Vec<f64> = tape.images[i].unit.iter().map(|u| s * g * u).collect();
                for c in 0..d {
                    d_img[i][c] += s * g * neg.unit[c];
                }
                self.backprop_into(neg, &d_neg, &mut grad.text_table);
            }
        }
        for i in 0..b {
            self.backprop_into(&tape.images[i], &d_img[i], &mut grad.image_table);
            self.backprop_into(&tape.positives[i], &d_pos[i], &mut grad.text_table);
        }
        grad.log_logit_scale = if self.scale_clamped() { 0.0 } else { d_log_scale };
        grad
    }

    fn apply(&mut self, grad: &ToyGradients, optimizer: &mut dyn Optimizer, learn_logit_scale: bool) {
        optimizer.step(0, &mut self.image_table, &grad.image_table);
        optimizer.step(1, &mut self.text_table, &grad.text_table);
        if learn_logit_scale {
            optimizer.step(2, std::slice::from_mut(&mut self.log_logit_scale), &[grad.log_logit_scale]);
        }
    }
}
