//! Counterfactual negative captions.
//!
//! Every benchmark image gets 27 negatives: for each of three insertion
//! strategies (random, popular and adversarial objects) the 7 nonempty
//! subsets of three selected objects are inserted into the caption, and 6
//! more negatives remove one or two annotated objects. Images with fewer than
//! three annotated objects fill the missing removal slots with alterations.
//!
//! Rewriting goes through an [`LlmClient`] when one is configured and falls
//! back to a small deterministic grammar ([`template`]) otherwise.

mod generate;
mod llm;
mod prompt;
mod rewrite;
mod select;
pub mod template;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use generate::{
    generate_benchmark, generate_sample, BuildOptions, BuildOutcome, CorpusStats, GenerationOptions,
};
pub use llm::{LlmClient, LlmConfig, LlmFailure, RetryPolicy, API_KEY_ENV};
pub use prompt::{render_prompt, PromptRequest, PromptTemplate};
pub use rewrite::{rewrite_caption, Rewrite};
pub use select::{enumerate_insertion_subsets, enumerate_removal_subsets, select_hallucination_objects};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    InsertRandom,
    InsertPopular,
    InsertAdversarial,
    Remove,
    Alter,
}

impl NegativeKind {
    pub const ALL: [NegativeKind; 5] = [
        NegativeKind::InsertRandom,
        NegativeKind::InsertPopular,
        NegativeKind::InsertAdversarial,
        NegativeKind::Remove,
        NegativeKind::Alter,
    ];

    pub const INSERTIONS: [NegativeKind; 3] = [
        NegativeKind::InsertRandom,
        NegativeKind::InsertPopular,
        NegativeKind::InsertAdversarial,
    ];

    pub fn is_insertion(self) -> bool {
        matches!(
            self,
            NegativeKind::InsertRandom | NegativeKind::InsertPopular | NegativeKind::InsertAdversarial
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NegativeKind::InsertRandom => "insert_random",
            NegativeKind::InsertPopular => "insert_popular",
            NegativeKind::InsertAdversarial => "insert_adversarial",
            NegativeKind::Remove => "remove",
            NegativeKind::Alter => "alter",
        }
    }

    /// Allowed number of objects a negative of this kind names.
    fn object_range(self) -> std::ops::RangeInclusive<usize> {
        match self {
            k if k.is_insertion() => 1..=3,
            NegativeKind::Remove => 1..=2,
            _ => 0..=0,
        }
    }
}

impl fmt::Display for NegativeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for NegativeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NegativeKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown negative kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeSpec {
    pub kind: NegativeKind,
    pub objects: Vec<String>,
    /// Ordinal of this negative among the sample's negatives of the same kind.
    pub combo_index: usize,
}

impl NegativeSpec {
    /// Checks the object-count and distinctness rules that do not need the
    /// source image.
    pub fn validate_shape(&self) -> Result<()> {
        if !self.kind.object_range().contains(&self.objects.len()) {
            return Err(Error::validation(format!(
                "{} negative names {} objects (allowed {:?})",
                self.kind,
                self.objects.len(),
                self.kind.object_range()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if self.objects[..i].contains(o) {
                return Err(Error::validation(format!(
                    "{} negative repeats object {o:?}",
                    self.kind
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Llm,
    Template,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeCaption {
    pub text: String,
    pub spec: NegativeSpec,
    pub provenance: Provenance,
    pub model_id: Option<String>,
}
