//! Fine-tuning loop and data-volume sweep.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{total_loss_with_grad, LossBreakdown, LossConfig, NegativesPerImage, Optimizer, Sgd};
use crate::corpus::{BenchmarkSample, ImageIndex};
use crate::encoder::{BatchInput, TrainableEncoder};
use crate::evalhall::{benchmark_accuracy, EncoderScorer};
use crate::hashing::derive_seed;
use crate::{Error, Result};

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub selection_accuracy_dev: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }
}

/// Called after every optimizer step with the 1-based step number, the
/// batch loss and the updated encoder.
pub type StepObserver<'o, E> = &'o mut dyn FnMut(usize, &LossBreakdown, &E);

/// Fine-tune with plain SGD at `cfg.learning_rate`.
pub fn train<E: TrainableEncoder>(
    encoder: &mut E,
    samples: &[BenchmarkSample],
    images: &ImageIndex<'_>,
    cfg: &LossConfig,
    dev: Option<&[BenchmarkSample]>,
    observer: Option<StepObserver<'_, E>>,
) -> Result<TrainLog> {
    let mut sgd = Sgd {
        learning_rate: cfg.learning_rate,
    };
    train_with(encoder, samples, images, cfg, &mut sgd, dev, observer)
}

/// Fine-tune with an arbitrary optimizer. Batches are drawn from a seeded
/// shuffle each epoch, so a run is a pure function of (encoder, data, cfg).
pub fn train_with<E: TrainableEncoder>(
    encoder: &mut E,
    samples: &[BenchmarkSample],
    images: &ImageIndex<'_>,
    cfg: &LossConfig,
    optimizer: &mut dyn Optimizer,
    dev: Option<&[BenchmarkSample]>,
    mut observer: Option<StepObserver<'_, E>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::validation("no training samples"));
    }
    // Resolve every image up front so a missing record fails before any update.
    let records = samples
        .iter()
        .map(|s| images.get(&s.image_id))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = TrainLog::default();
    let budget = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.epochs {
        if log.steps() >= budget {
            break;
        }
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if log.steps() >= budget {
                finish_epoch(&mut log, epoch, epoch_steps, sum, encoder, dev, images)?;
                break 'epochs;
            }
            let batch = BatchInput {
                images: chunk.iter().map(|&i| records[i]).collect(),
                positives: chunk.iter().map(|&i| samples[i].positive.as_str()).collect(),
                negatives: chunk
                    .iter()
                    .map(|&i| pick_negatives(&samples[i], cfg.negatives_per_image, &mut rng))
                    .collect(),
            };
            let (scores, tape) = encoder.forward(&batch)?;
            let (loss, d_scores) = total_loss_with_grad(&scores, cfg).map_err(|e| {
                batch_error(epoch, log.steps() + 1, chunk, samples, &e.to_string())
            })?;
            if !loss.total.is_finite() {
                return Err(batch_error(epoch, log.steps() + 1, chunk, samples, "non-finite loss"));
            }
            let grad = encoder.backward(&tape, &d_scores);
            encoder.apply(&grad, optimizer, cfg.learn_logit_scale);

            log.step_losses.push(loss.total);
            epoch_steps += 1;
            sum.l_i2t += loss.l_i2t;
            sum.l_t2i += loss.l_t2i;
            sum.l1 += loss.l1;
            sum.l2 += loss.l2;
            sum.total += loss.total;
            if let Some(obs) = observer.as_mut() {
                obs(log.steps(), &loss, encoder);
            }
        }
        finish_epoch(&mut log, epoch, epoch_steps, sum, encoder, dev, images)?;
    }
    Ok(log)
}

fn finish_epoch<E: TrainableEncoder>(
    log: &mut TrainLog,
    epoch: usize,
    steps: usize,
    sum: LossBreakdown,
    encoder: &E,
    dev: Option<&[BenchmarkSample]>,
    images: &ImageIndex<'_>,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    let n = steps as f64;
    let selection_accuracy_dev = match dev {
        Some(dev) if !dev.is_empty() => {
            Some(benchmark_accuracy(dev, Some(images), &mut EncoderScorer(encoder))?.accuracy)
        }
        _ => None,
    };
    log.epochs.push(EpochLog {
        epoch,
        steps,
        l_i2t: sum.l_i2t / n,
        l_t2i: sum.l_t2i / n,
        l1: sum.l1 / n,
        l2: sum.l2 / n,
        total: sum.total / n,
        selection_accuracy_dev,
    });
    Ok(())
}

fn batch_error(epoch: usize, step: usize, chunk: &[usize], samples: &[BenchmarkSample], what: &str) -> Error {
    let ids: Vec<&str> = chunk.iter().map(|&i| samples[i].image_id.as_str()).collect();
    Error::Numeric(format!("epoch {epoch} step {step}: {what} in batch [{}]", ids.join(", ")))
}

fn pick_negatives<'a>(sample: &'a BenchmarkSample, per_image: NegativesPerImage, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    let all = &sample.negatives;
    match per_image {
        NegativesPerImage::Count(m) if m < all.len() => {
            let mut picked = index::sample(rng, all.len(), m).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| all[i].text.as_str()).collect()
        }
        _ => all.iter().map(|n| n.text.as_str()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub seed: u64,
    pub n_train: usize,
    pub accuracy: f64,
}

/// Train a copy of `init` on growing fractions of `train_samples` and score
/// each result on `dev`. For a given seed the subsets are nested prefixes of
/// one shuffle.
pub fn data_volume_sweep<E: TrainableEncoder + Clone>(
    init: &E,
    train_samples: &[BenchmarkSample],
    dev: &[BenchmarkSample],
    images: &ImageIndex<'_>,
    fractions: &[f64],
    seeds: &[u64],
    cfg: &LossConfig,
) -> Result<Vec<SweepPoint>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::validation(format!("sweep fraction {f} outside (0, 1]")));
    }
    let mut points = Vec::with_capacity(fractions.len() * seeds.len());
    for &seed in seeds {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5eed])));
        for &fraction in fractions {
            let n = ((fraction * train_samples.len() as f64).round() as usize).clamp(1, train_samples.len());
            let subset: Vec<BenchmarkSample> = order[..n].iter().map(|&i| train_samples[i].clone()).collect();
            let mut encoder = init.clone();
            let run_cfg = LossConfig {
                seed: derive_seed(cfg.seed, &[seed]),
                ..cfg.clone()
            };
            train(&mut encoder, &subset, images, &run_cfg, None, None)?;
            let accuracy = benchmark_accuracy(dev, Some(images), &mut EncoderScorer(&encoder))?.accuracy;
            points.push(SweepPoint {
                fraction,
                seed,
                n_train: n,
                accuracy,
            });
        }
    }
    Ok(points)
}
