use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CooccurrenceTable, FrequencyTable, ImageRecord};
use crate::countergen::{select_hallucination_objects, NegativeKind};
use crate::{Error, Result};

pub const POPE_TEMPLATE: &str = "Is there a {object} in the image?";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopeLabel {
    Yes,
    No,
}

impl FromStr for PopeLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Ok(PopeLabel::Yes),
            "no" => Ok(PopeLabel::No),
            other => Err(Error::validation(format!("answer must be yes or no, got {other:?}"))),
        }
    }
}

impl fmt::Display for PopeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PopeLabel::Yes => "yes",
            PopeLabel::No => "no",
        })
    }
}

/// Strategy for drawing the absent objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopeSampler {
    Random,
    Popular,
    Adversarial,
}

impl PopeSampler {
    fn as_kind(self) -> NegativeKind {
        match self {
            PopeSampler::Random => NegativeKind::InsertRandom,
            PopeSampler::Popular => NegativeKind::InsertPopular,
            PopeSampler::Adversarial => NegativeKind::InsertAdversarial,
        }
    }
}

impl FromStr for PopeSampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(PopeSampler::Random),
            "popular" => Ok(PopeSampler::Popular),
            "adversarial" => Ok(PopeSampler::Adversarial),
            other => Err(Error::validation(format!(
                "unknown sampler {other:?} (random|popular|adversarial)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopeQuestion {
    pub image_id: String,
    pub object: String,
    pub label: PopeLabel,
}

impl PopeQuestion {
    pub fn text(&self) -> String {
        POPE_TEMPLATE.replace("{object}", &self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PopeQuestionSet {
    pub questions: Vec<PopeQuestion>,
    /// Images left out for lack of present or absent objects.
    pub skipped: usize,
}

/// Per image: `per_image / 2` annotated objects (uniform) labelled yes, then
/// `per_image / 2` absent objects from `sampler` labelled no.
pub fn build_pope_questions<R: Rng + ?Sized>(
    records: &[ImageRecord],
    per_image: usize,
    sampler: PopeSampler,
    freq: &FrequencyTable,
    cooc: &CooccurrenceTable,
    rng: &mut R,
) -> Result<PopeQuestionSet> {
    if per_image == 0 || !per_image.is_multiple_of(2) {
        return Err(Error::validation(format!("per_image must be even and positive, got {per_image}")));
    }
    let half = per_image / 2;
    let mut out = PopeQuestionSet::default();
    for record in records {
        if record.objects.len() < half {
            out.skipped += 1;
            continue;
        }
        let present = index::sample(rng, record.objects.len(), half);
        let absent = match select_hallucination_objects(record, freq, cooc, sampler.as_kind(), half, rng) {
            Ok(a) => a,
            Err(Error::Generation(_)) => {
                out.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let question = |object: &str, label| PopeQuestion {
            image_id: record.image_id.clone(),
            object: object.to_owned(),
            label,
        };
        out.questions
            .extend(present.iter().map(|i| question(&record.objects[i].name, PopeLabel::Yes)));
        out.questions
            .extend(absent.iter().map(|o| question(o, PopeLabel::No)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
    pub n: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
}

/// Binary metrics with "yes" as the positive class.
pub fn pope_metrics(questions: &[PopeQuestion], answers: &[PopeLabel]) -> Result<PopeReport> {
    if questions.len() != answers.len() {
        return Err(Error::validation(format!(
            "{} questions but {} answers",
            questions.len(),
            answers.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (q, a) in questions.iter().zip(answers) {
        match (q.label, a) {
            (PopeLabel::Yes, PopeLabel::Yes) => tp += 1,
            (PopeLabel::No, PopeLabel::Yes) => fp += 1,
            (PopeLabel::No, PopeLabel::No) => tn += 1,
            (PopeLabel::Yes, PopeLabel::No) => fneg += 1,
        }
    }
    let n = questions.len();
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = div(tp, tp + fp);
    let recall = div(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(PopeReport {
        accuracy: div(tp + tn, n),
        precision,
        recall,
        f1,
        yes_ratio: div(tp + fp, n),
        n,
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fneg,
    })
}
