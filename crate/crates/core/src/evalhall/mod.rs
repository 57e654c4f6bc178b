//! Hallucination and generalization metrics.
//!
//! * caption selection: does the encoder rank the true caption above all 27
//!   counterfactual negatives of an image
//! * zero-shot classification through a prompt pattern
//! * CHAIR and Cover over free-form captions, with lexicon-based mention
//!   extraction
//! * POPE-style balanced yes/no probing
//!
//! CHAIR naming follows the displayed formulas used here: `c_s` is the share
//! of mentioned objects that are hallucinated and `c_i` the share of captions
//! with at least one hallucination. The original CHAIR definitions attach the
//! sentence/instance labels the other way round.

mod chair;
mod pope;
mod selection;
mod zeroshot;

pub use chair::{chair, gold_sets, load_captions, ChairReport, CoverFormula, Lexicon};
pub use pope::{
    build_pope_questions, pope_metrics, PopeLabel, PopeQuestion, PopeQuestionSet, PopeReport, PopeSampler,
    POPE_TEMPLATE,
};
pub use selection::{
    benchmark_accuracy, select_caption, CaptionScorer, EncoderScorer, PrecomputedScores, RandomScorer,
    Selection, SelectionReport, CANDIDATES_PER_SAMPLE,
};
pub use zeroshot::{zero_shot_classify, DEFAULT_PROMPT_PATTERN};
