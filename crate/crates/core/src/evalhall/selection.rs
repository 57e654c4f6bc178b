use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BenchmarkSample, ImageIndex, ImageRecord, NEGATIVES_PER_SAMPLE};
use crate::countergen::NegativeKind;
use crate::encoder::DualEncoder;
use crate::{Error, Result};

/// One positive plus the negatives.
pub const CANDIDATES_PER_SAMPLE: usize = NEGATIVES_PER_SAMPLE + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Win,
    /// The positive shares the top score with a negative. Counted as a miss.
    Tie,
    /// `winner` is the candidate index of the best-scoring negative
    /// (lowest index among equals).
    Loss { winner: usize },
}

impl Selection {
    pub fn is_win(self) -> bool {
        self == Selection::Win
    }
}

pub fn select_caption(scores: &[f64], positive_index: usize) -> Result<Selection> {
    if scores.len() != CANDIDATES_PER_SAMPLE {
        return Err(Error::validation(format!(
            "expected {CANDIDATES_PER_SAMPLE} candidate scores, got {}",
            scores.len()
        )));
    }
    if positive_index >= scores.len() {
        return Err(Error::validation(format!("positive index {positive_index} out of range")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::validation(format!("non-finite candidate score {bad}")));
    }
    let p = scores[positive_index];
    let (winner, best) = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != positive_index)
        .fold((usize::MAX, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
    Ok(if p > best {
        Selection::Win
    } else if p == best {
        Selection::Tie
    } else {
        Selection::Loss { winner }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub accuracy: f64,
    pub n: usize,
    pub wins: usize,
    pub ties: usize,
    /// Kind of the negative that beat the positive.
    pub confusion: BTreeMap<NegativeKind, usize>,
}

impl SelectionReport {
    /// Combine reports over disjoint sample chunks.
    pub fn merge(parts: &[SelectionReport]) -> SelectionReport {
        let mut confusion: BTreeMap<NegativeKind, usize> = NegativeKind::ALL.iter().map(|&k| (k, 0)).collect();
        let (mut n, mut wins, mut ties) = (0, 0, 0);
        for p in parts {
            n += p.n;
            wins += p.wins;
            ties += p.ties;
            for (k, c) in &p.confusion {
                *confusion.entry(*k).or_insert(0) += c;
            }
        }
        SelectionReport {
            accuracy: if n == 0 { 0.0 } else { wins as f64 / n as f64 },
            n,
            wins,
            ties,
            confusion,
        }
    }
}

/// Anything that scores an image against candidate captions.
pub trait CaptionScorer {
    /// `record` is the annotation record when one was supplied.
    fn score_candidates(
        &mut self,
        image_id: &str,
        record: Option<&ImageRecord>,
        candidates: &[&str],
    ) -> Result<Vec<f64>>;
}

/// Cosine similarity under a [`DualEncoder`].
pub struct EncoderScorer<'a, E: ?Sized>(pub &'a E);

impl<E: DualEncoder + ?Sized> CaptionScorer for EncoderScorer<'_, E> {
    fn score_candidates(
        &mut self,
        image_id: &str,
        record: Option<&ImageRecord>,
        candidates: &[&str],
    ) -> Result<Vec<f64>> {
        let record = record.ok_or_else(|| Error::validation(format!("no annotation record for image {image_id}")))?;
        let image = self.0.encode_images(&[record])?;
        let texts = self.0.encode_texts(candidates)?;
        Ok(texts.iter().map(|t| image[0].dot(t)).collect())
    }
}

/// Independent uniform scores; the chance baseline.
pub struct RandomScorer(ChaCha8Rng);

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl CaptionScorer for RandomScorer {
    fn score_candidates(&mut self, _: &str, _: Option<&ImageRecord>, candidates: &[&str]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|_| self.0.gen::<f64>()).collect())
    }
}

/// Scores supplied by an external model, keyed by image id, in candidate
/// order (positive first).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrecomputedScores(pub HashMap<String, Vec<f64>>);

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreLine {
    image_id: String,
    scores: Vec<f64>,
}

impl PrecomputedScores {
    /// One `{"image_id": .., "scores": [..]}` object per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ScoreLine = serde_json::from_str(line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            if map.insert(parsed.image_id.clone(), parsed.scores).is_some() {
                return Err(Error::parse(path, i + 1, format!("duplicate image_id {}", parsed.image_id)));
            }
        }
        Ok(Self(map))
    }
}

impl CaptionScorer for PrecomputedScores {
    fn score_candidates(&mut self, image_id: &str, _: Option<&ImageRecord>, candidates: &[&str]) -> Result<Vec<f64>> {
        let scores = self
            .0
            .get(image_id)
            .ok_or_else(|| Error::validation(format!("no scores for image {image_id}")))?;
        if scores.len() != candidates.len() {
            return Err(Error::validation(format!(
                "image {image_id}: {} scores for {} candidates",
                scores.len(),
                candidates.len()
            )));
        }
        Ok(scores.clone())
    }
}

/// 28-way selection accuracy over `samples`. Records are looked up in
/// `images` when given; scorers that need them fail without.
pub fn benchmark_accuracy<S: CaptionScorer + ?Sized>(
    samples: &[BenchmarkSample],
    images: Option<&ImageIndex<'_>>,
    scorer: &mut S,
) -> Result<SelectionReport> {
    let mut confusion: BTreeMap<NegativeKind, usize> = NegativeKind::ALL.iter().map(|&k| (k, 0)).collect();
    let (mut wins, mut ties) = (0, 0);
    for sample in samples {
        let annotate = |e| with_image(&sample.image_id, e);
        let record = images.map(|ix| ix.get(&sample.image_id)).transpose()?;
        let candidates = sample.candidates();
        let scores = scorer
            .score_candidates(&sample.image_id, record, &candidates)
            .map_err(annotate)?;
        match select_caption(&scores, 0).map_err(annotate)? {
            Selection::Win => wins += 1,
            Selection::Tie => ties += 1,
            Selection::Loss { winner } => *confusion.entry(sample.negatives[winner - 1].spec.kind).or_insert(0) += 1,
        }
    }
    let n = samples.len();
    Ok(SelectionReport {
        accuracy: if n == 0 { 0.0 } else { wins as f64 / n as f64 },
        n,
        wins,
        ties,
        confusion,
    })
}

fn with_image(image_id: &str, e: Error) -> Error {
    let tag = |m: String| format!("image {image_id}: {m}");
    match e {
        Error::Validation(m) => Error::Validation(tag(m)),
        Error::Numeric(m) => Error::Numeric(tag(m)),
        Error::Generation(m) => Error::Generation(tag(m)),
        Error::Llm(m) => Error::Llm(tag(m)),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores_with(positive: f64, negatives: f64) -> Vec<f64> {
        let mut s = vec![negatives; CANDIDATES_PER_SAMPLE];
        s[0] = positive;
        s
    }

    #[test]
    fn strict_max_wins() {
        assert_eq!(select_caption(&scores_with(0.9, 0.5), 0).unwrap(), Selection::Win);
    }

    #[test]
    fn tie_is_not_a_win() {
        let mut s = scores_with(0.9, 0.1);
        s[7] = 0.9;
        assert_eq!(select_caption(&s, 0).unwrap(), Selection::Tie);
    }

    #[test]
    fn loss_names_best_negative() {
        let mut s = scores_with(0.5, 0.1);
        s[3] = 0.8;
        s[9] = 0.8;
        assert_eq!(select_caption(&s, 0).unwrap(), Selection::Loss { winner: 3 });
    }

    #[test]
    fn length_and_finiteness_checked() {
        assert!(select_caption(&[1.0, 0.0], 0).is_err());
        let mut s = scores_with(1.0, 0.0);
        s[2] = f64::NAN;
        assert!(select_caption(&s, 0).is_err());
    }

    #[test]
    fn merged_chunks_equal_whole() {
        let mk = |wins, ties, lost: usize| {
            let mut confusion: BTreeMap<NegativeKind, usize> = NegativeKind::ALL.iter().map(|&k| (k, 0)).collect();
            confusion.insert(NegativeKind::Remove, lost);
            SelectionReport {
                accuracy: 0.0,
                n: wins + ties + lost,
                wins,
                ties,
                confusion,
            }
        };
        let m = SelectionReport::merge(&[mk(3, 1, 0), mk(1, 0, 3)]);
        assert_eq!((m.n, m.wins, m.ties, m.confusion[&NegativeKind::Remove]), (8, 4, 1, 3));
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(SelectionReport::merge(&[]).accuracy, 0.0);
    }
}
