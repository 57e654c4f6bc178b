use std::collections::HashSet;

use crate::corpus::ImageRecord;
use crate::encoder::DualEncoder;
use crate::{Error, Result};

pub const DEFAULT_PROMPT_PATTERN: &str = "a photo of a {}";

/// Classify each image as the label whose rendered prompt scores highest
/// (first label on ties) and return accuracy against the gold labels.
pub fn zero_shot_classify<E: DualEncoder + ?Sized>(
    labels: &[&str],
    prompt_pattern: &str,
    images: &[(&ImageRecord, &str)],
    encoder: &E,
) -> Result<f64> {
    if labels.len() < 2 {
        return Err(Error::validation(format!("zero-shot needs at least 2 labels, got {}", labels.len())));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = labels.iter().find(|l| !seen.insert(**l)) {
        return Err(Error::validation(format!("duplicate class label {dup:?}")));
    }
    if !prompt_pattern.contains("{}") {
        return Err(Error::validation(format!("prompt pattern {prompt_pattern:?} has no {{}} slot")));
    }
    if images.is_empty() {
        return Err(Error::validation("no images to classify"));
    }
    let prompts: Vec<String> = labels.iter().map(|l| prompt_pattern.replacen("{}", l, 1)).collect();
    let prompt_refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let text_emb = encoder.encode_texts(&prompt_refs)?;
    let records: Vec<&ImageRecord> = images.iter().map(|(r, _)| *r).collect();
    let image_emb = encoder.encode_images(&records)?;

    let mut correct = 0;
    for ((record, gold), emb) in images.iter().zip(&image_emb) {
        if !labels.contains(gold) {
            return Err(Error::validation(format!("{}: gold label {gold:?} is not a class", record.image_id)));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (i, t) in text_emb.iter().enumerate() {
            let s = emb.dot(t);
            if s > best.1 {
                best = (i, s);
            }
        }
        if labels[best.0] == *gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}
