//! Synthetic entity-relation world and compositional QA examples.
//!
//! The generator builds a small world of entities with relation facts, then
//! composes two-hop questions over it: bridge questions chain two facts
//! through an intermediate entity, comparison questions compare a shared
//! numeric attribute of two entities. Every example ships with its two
//! single-hop sub-questions, per-sentence supporting labels, and a pool of
//! distractor paragraphs that share surface vocabulary with the question at a
//! configurable rate.

mod io;
mod synth;
mod world;

pub use io::{load_corpus, load_examples, save_corpus, save_examples, CorpusManifest};
pub use synth::{
    derive_singlehop_dataset, generate_corpus, inject_adversarial, synthesize_bridge,
    synthesize_comparison, ComparisonVariant,
};
pub use world::{generate_world, World};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Reasoning type of a multi-hop question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QType {
    #[serde(rename = "bridge")]
    Bridge,
    #[serde(rename = "comparison-yn")]
    ComparisonYn,
    #[serde(rename = "comparison-span")]
    ComparisonSpan,
}

impl QType {
    pub fn as_str(&self) -> &'static str {
        match self {
            QType::Bridge => "bridge",
            QType::ComparisonYn => "comparison-yn",
            QType::ComparisonSpan => "comparison-span",
        }
    }

    /// Coarse label used by the question classifier (the yn/span split is an
    /// evaluation grouping, not a classifier label).
    pub fn reasoning_type(&self) -> ReasoningType {
        match self {
            QType::Bridge => ReasoningType::Bridge,
            QType::ComparisonYn | QType::ComparisonSpan => ReasoningType::Comparison,
        }
    }
}

/// Classifier / prompt key. Ordering is the deterministic tie-break:
/// bridge < comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReasoningType {
    #[serde(rename = "bridge")]
    Bridge,
    #[serde(rename = "comparison")]
    Comparison,
}

impl ReasoningType {
    pub const ALL: [ReasoningType; 2] = [ReasoningType::Bridge, ReasoningType::Comparison];

    pub fn as_str(&self) -> &'static str {
        match self {
            ReasoningType::Bridge => "bridge",
            ReasoningType::Comparison => "comparison",
        }
    }

    pub fn index(&self) -> usize {
        match self {
            ReasoningType::Bridge => 0,
            ReasoningType::Comparison => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Span(String),
    Yes,
    No,
}

impl Answer {
    pub fn as_text(&self) -> &str {
        match self {
            Answer::Span(s) => s,
            Answer::Yes => "yes",
            Answer::No => "no",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub title: String,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuestion {
    pub question: String,
    pub answer: String,
    pub gold_paragraph_index: usize,
}

/// One multi-hop question with its candidate paragraphs and gold labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub qtype: QType,
    pub paragraphs: Vec<Paragraph>,
    /// Hop-ordered pair: for bridge questions the first entry is the
    /// first-hop paragraph; for comparison questions the order is canonical
    /// (ascending index).
    pub gold_paragraph_indices: [usize; 2],
    /// Sorted set of (paragraph index, sentence index) supporting facts.
    pub supporting: Vec<(usize, usize)>,
    pub answer: Answer,
    pub sub_questions: Vec<SubQuestion>,
    /// Index of the distractor paragraph that received an injected
    /// shortcut-contradicting sentence, when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversarial_paragraph_index: Option<usize>,
}

impl QAExample {
    /// Structural invariants every generated example must satisfy.
    pub fn validate(&self) -> Result<()> {
        let [g1, g2] = self.gold_paragraph_indices;
        if g1 == g2 || g1 >= self.paragraphs.len() || g2 >= self.paragraphs.len() {
            return Err(Error::Corpus(format!(
                "{}: gold paragraph indices invalid: {:?}",
                self.id, self.gold_paragraph_indices
            )));
        }
        if self.sub_questions.len() != 2 {
            return Err(Error::Corpus(format!(
                "{}: expected 2 sub-questions, got {}",
                self.id,
                self.sub_questions.len()
            )));
        }
        for (p, s) in &self.supporting {
            if *p >= self.paragraphs.len() || *s >= self.paragraphs[*p].sentences.len() {
                return Err(Error::Corpus(format!(
                    "{}: supporting index ({p},{s}) out of range",
                    self.id
                )));
            }
        }
        if let Answer::Span(text) = &self.answer {
            let hits = self
                .supporting
                .iter()
                .filter(|(p, s)| contains_word(&self.paragraphs[*p].sentences[*s], text))
                .count();
            if hits != 1 {
                return Err(Error::Corpus(format!(
                    "{}: span answer {text:?} found in {hits} supporting sentences, want 1",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Whole-word containment (the corpus is whitespace-tokenized).
pub fn contains_word(sentence: &str, word: &str) -> bool {
    sentence.split_whitespace().any(|t| t == word)
}

/// Generation settings for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_candidate_paragraphs: usize,
    pub distractor_overlap_rate: f64,
    pub seed: u64,
    /// Question-type mixture; normalized fractions of bridge,
    /// comparison-yn, and comparison-span examples.
    pub mix_bridge: f64,
    pub mix_comparison_yn: f64,
    pub mix_comparison_span: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_entities: 64,
            n_relations: 8,
            n_train: 2000,
            n_dev: 400,
            n_candidate_paragraphs: 10,
            distractor_overlap_rate: 0.5,
            seed: 7,
            mix_bridge: 0.5,
            mix_comparison_yn: 0.25,
            mix_comparison_span: 0.25,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities < 2 {
            return Err(Error::Corpus(format!(
                "world too small: need at least 2 entities, got {}",
                self.n_entities
            )));
        }
        if self.n_relations < 1 {
            return Err(Error::Corpus(
                "world too small: need at least 1 relation to form a 2-hop chain".into(),
            ));
        }
        if self.n_candidate_paragraphs < 2 {
            return Err(Error::Corpus(
                "n_candidate_paragraphs must be at least 2".into(),
            ));
        }
        if self.n_entities < self.n_candidate_paragraphs {
            return Err(Error::Corpus(format!(
                "need at least {} entities for {} candidate paragraphs",
                self.n_candidate_paragraphs, self.n_candidate_paragraphs
            )));
        }
        if self.n_train == 0 || self.n_dev == 0 {
            return Err(Error::Corpus("n_train and n_dev must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_overlap_rate) {
            return Err(Error::Corpus(
                "distractor_overlap_rate must lie in [0, 1]".into(),
            ));
        }
        let mix = self.mix_bridge + self.mix_comparison_yn + self.mix_comparison_span;
        if mix <= 0.0 || self.mix_bridge < 0.0 || self.mix_comparison_yn < 0.0 || self.mix_comparison_span < 0.0 {
            return Err(Error::Corpus("question-type mixture must be non-negative and sum > 0".into()));
        }
        if (self.mix_comparison_yn > 0.0 || self.mix_comparison_span > 0.0) && self.n_relations < 2 {
            return Err(Error::Corpus(
                "comparison questions need a numeric attribute; set n_relations >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// A generated corpus split plus the world it came from.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub world: World,
    pub train: Vec<QAExample>,
    pub dev: Vec<QAExample>,
    /// Bridge dev examples with an injected adversarial sentence.
    pub dev_adversarial: Vec<QAExample>,
}

/// A single-hop item derived from one sub-question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleHopExample {
    pub id: String,
    pub question: String,
    pub paragraphs: Vec<Paragraph>,
    pub gold_paragraph_index: usize,
    pub supporting: (usize, usize),
    pub answer: String,
}
