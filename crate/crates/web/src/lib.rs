//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes and returns JSON strings. The `*_json` functions hold
//! the logic and are plain Rust so they can be tested natively.

use ohd_core::corpus::{BenchmarkSample, ImageIndex, ImageRecord};
use ohd_core::countergen::{generate_benchmark, generate_sample, BuildOptions, CorpusStats, GenerationOptions};
use ohd_core::encoder::{ToyEncoderParams, TOY_INIT_STD};
use ohd_core::evalhall::{benchmark_accuracy, EncoderScorer};
use ohd_core::hashing::item_seed;
use ohd_core::objective::{total_loss, total_loss_with_grad, train, BatchScores, LossBreakdown, LossConfig};
use ohd_core::synth::{synthetic_corpus, SynthConfig};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Images in the corpus that supplies popular and co-occurring objects.
const STATS_CORPUS_IMAGES: usize = 500;
const DEMO_VOCAB: usize = 1024;
const DEMO_DIM: usize = 16;
const MAX_TRAIN_IMAGES: u32 = 400;
const MAX_TRAIN_STEPS: u32 = 1000;
const MAX_CURVE_POINTS: u32 = 1000;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// The 27 negatives of `caption`, with `objects` a comma-separated list of
/// the objects in the image.
pub fn negatives_json(caption: &str, objects: &str, seed: u64) -> Result<String, String> {
    let names: Vec<&str> = objects.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err("list at least one object".into());
    }
    let caption = caption.trim();
    let record = ImageRecord::from_names("demo", &names, &[caption]).map_err(err)?;
    let mut corpus = synthetic_corpus(&SynthConfig {
        images: STATS_CORPUS_IMAGES,
        ..SynthConfig::default()
    });
    corpus.push(record.clone());
    let stats = CorpusStats::from_records(&corpus);
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, &record.image_id));
    let sample = generate_sample(&record, caption, &stats, None, &GenerationOptions::default(), &mut rng).map_err(err)?;
    let negatives: Vec<_> = sample
        .negatives
        .iter()
        .map(|n| json!({ "kind": n.spec.kind, "objects": n.spec.objects, "text": n.text }))
        .collect();
    Ok(json!({ "positive": sample.positive, "negatives": negatives }).to_string())
}

/// Scaled scores of one batch: `pos[i][j]` image i vs. caption j, `neg[i][k]`
/// image i vs. its k-th enhanced negative.
#[derive(Debug, Deserialize)]
struct ScoresIn {
    pos: Vec<Vec<f64>>,
    #[serde(default)]
    neg: Vec<Vec<f64>>,
}

fn parse_inputs(scores: &str, config: &str) -> Result<(BatchScores, LossConfig), String> {
    let s: ScoresIn = serde_json::from_str(scores).map_err(|e| format!("scores: {e}"))?;
    let cfg: LossConfig = if config.trim().is_empty() {
        LossConfig::default()
    } else {
        serde_json::from_str(config).map_err(|e| format!("config: {e}"))?
    };
    cfg.validate().map_err(err)?;
    Ok((BatchScores::from_rows(&s.pos, &s.neg).map_err(err)?, cfg))
}

/// Loss components and dLoss/dScores for a score batch. `config` is a
/// partial loss config; missing keys take the defaults.
pub fn loss_json(scores: &str, config: &str) -> Result<String, String> {
    let (batch, cfg) = parse_inputs(scores, config)?;
    let (loss, grad) = total_loss_with_grad(&batch, &cfg).map_err(err)?;
    let (b, k) = (grad.b(), grad.k());
    let grad_pos: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| grad.pos(i, j)).collect()).collect();
    let grad_neg: Vec<Vec<f64>> = (0..b).map(|i| (0..k).map(|kk| grad.neg(i, kk)).collect()).collect();
    Ok(json!({ "loss": loss, "grad_pos": grad_pos, "grad_neg": grad_neg }).to_string())
}

#[derive(Serialize)]
struct CurvePoint {
    x: f64,
    #[serde(flatten)]
    loss: LossBreakdown,
}

/// The loss as `neg[row][col]` moves from `from` to `to`.
pub fn loss_curve_json(
    scores: &str,
    config: &str,
    row: usize,
    col: usize,
    from: f64,
    to: f64,
    points: u32,
) -> Result<String, String> {
    let (mut batch, cfg) = parse_inputs(scores, config)?;
    if row >= batch.b() || col >= batch.k() {
        return Err(format!("no enhanced negative at ({row}, {col})"));
    }
    if !(2..=MAX_CURVE_POINTS).contains(&points) || !from.is_finite() || !to.is_finite() {
        return Err(format!("need 2 to {MAX_CURVE_POINTS} points over a finite range"));
    }
    let mut out = Vec::with_capacity(points as usize);
    for i in 0..points {
        let x = from + (to - from) * f64::from(i) / f64::from(points - 1);
        batch.set_neg(row, col, x);
        out.push(CurvePoint {
            x,
            loss: total_loss(&batch, &cfg).map_err(err)?,
        });
    }
    serde_json::to_string(&out).map_err(err)
}

fn accuracy(enc: &ToyEncoderParams, samples: &[BenchmarkSample], index: &ImageIndex<'_>) -> Result<f64, String> {
    Ok(benchmark_accuracy(samples, Some(index), &mut EncoderScorer(enc)).map_err(err)?.accuracy)
}

/// Fine-tune a fresh toy encoder on a synthetic benchmark and report the
/// loss of every step and the in-sample selection accuracy every
/// `eval_every` steps.
pub fn train_json(images: u32, steps: u32, lambda2: f64, seed: u64, eval_every: u32) -> Result<String, String> {
    if !(1..=MAX_TRAIN_IMAGES).contains(&images) || !(1..=MAX_TRAIN_STEPS).contains(&steps) {
        return Err(format!("images must be 1..={MAX_TRAIN_IMAGES} and steps 1..={MAX_TRAIN_STEPS}"));
    }
    let records = synthetic_corpus(&SynthConfig {
        images: images as usize,
        seed,
        ..SynthConfig::default()
    });
    let stats = CorpusStats::from_records(&records);
    let opts = BuildOptions {
        seed,
        ..BuildOptions::default()
    };
    let samples = generate_benchmark(&records, &stats, None, &opts).map_err(err)?.set.samples;
    let index = ImageIndex::new(&records);
    let mut enc = ToyEncoderParams::random(DEMO_VOCAB, DEMO_DIM, TOY_INIT_STD, seed).map_err(err)?;
    let base = LossConfig::toy();
    let per_epoch = samples.len().div_ceil(base.batch_size);
    let cfg = LossConfig {
        lambda2,
        seed,
        max_steps: Some(steps as usize),
        epochs: (steps as usize).div_ceil(per_epoch),
        ..base
    };
    cfg.validate().map_err(err)?;

    let every = eval_every.max(1) as usize;
    let mut curve = vec![json!({ "step": 0, "accuracy": accuracy(&enc, &samples, &index)? })];
    let mut eval_error = None;
    let mut observe = |step: usize, _: &LossBreakdown, e: &ToyEncoderParams| {
        if step.is_multiple_of(every) || step == steps as usize {
            match accuracy(e, &samples, &index) {
                Ok(a) => curve.push(json!({ "step": step, "accuracy": a })),
                Err(m) => eval_error = Some(m),
            }
        }
    };
    let log = train(&mut enc, &samples, &index, &cfg, None, Some(&mut observe)).map_err(err)?;
    if let Some(m) = eval_error {
        return Err(m);
    }
    Ok(json!({ "losses": log.step_losses, "accuracy": curve }).to_string())
}

#[wasm_bindgen(js_name = generateNegatives)]
pub fn generate_negatives(caption: &str, objects: &str, seed: u32) -> Result<String, JsError> {
    negatives_json(caption, objects, u64::from(seed)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = lossBreakdown)]
pub fn loss_breakdown(scores: &str, config: &str) -> Result<String, JsError> {
    loss_json(scores, config).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = lossCurve)]
pub fn loss_curve(
    scores: &str,
    config: &str,
    row: usize,
    col: usize,
    from: f64,
    to: f64,
    points: u32,
) -> Result<String, JsError> {
    loss_curve_json(scores, config, row, col, from, to, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = trainToy)]
pub fn train_toy(images: u32, steps: u32, lambda2: f64, seed: u32, eval_every: u32) -> Result<String, JsError> {
    train_json(images, steps, lambda2, u64::from(seed), eval_every).map_err(|e| JsError::new(&e))
}
