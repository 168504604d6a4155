//! Whitespace word-level vocabulary and input-sequence construction.
//!
//! The reader consumes one flat token sequence per example:
//!
//! ```text
//! [CLS] Q [SEP] yes no [SEP] [SE] s1 [SEP] [SE] s2 [SEP] ... [SE] sn [SEP]
//! ```
//!
//! Each sentence is announced by a `[SE]` marker whose encoder state feeds
//! the supporting-evidence head; the literal `yes` / `no` tokens give yes/no
//! answers a start/end position to compete at. For multi-hop inputs the
//! sentences are grouped per selected paragraph, in retrieval order.

use crate::corpus::{Paragraph, QAExample};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const SE: usize = 4;
pub const YES: usize = 5;
pub const NO: usize = 6;

/// Reserved header, in id order. `yes` / `no` are ordinary words that get
/// pinned ids because the input format prepends them.
pub const RESERVED: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[SE]", "yes", "no"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from raw texts: lowercase, whitespace-split, sorted for
    /// determinism, reserved header first.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for tok in text.split_whitespace() {
                let tok = tok.to_lowercase();
                if !RESERVED.contains(&tok.as_str()) {
                    words.insert(tok);
                }
            }
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Vocabulary over every surface string in a corpus, plus the reasoning
    /// type words used for prompt initialization.
    pub fn from_examples<'a>(examples: impl Iterator<Item = &'a QAExample>) -> Self {
        let mut texts: Vec<String> = vec!["bridge comparison".to_string()];
        for e in examples {
            texts.push(e.question.clone());
            for p in &e.paragraphs {
                texts.push(p.title.clone());
                texts.extend(p.sentences.iter().cloned());
            }
            for s in &e.sub_questions {
                texts.push(s.question.clone());
                texts.push(s.answer.clone());
            }
            texts.push(e.answer.as_text().to_string());
        }
        Self::build(texts.iter().map(|s| s.as_str()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| match self.index.get(t) {
                Some(&id) => id,
                None => self.id(&t.to_lowercase()),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < RESERVED.len() {
            return Err(Error::Tokenizer(format!(
                "vocab file {} too short for reserved header",
                path.display()
            )));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Tokenizer(format!(
                    "vocab reserved header mismatch at id {i}: got {:?}, want {want:?}",
                    tokens[i]
                )));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self { tokens, index })
    }

    /// Hash of the serialized vocabulary, recorded in checkpoints.
    pub fn sha256(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        let mut hex = String::with_capacity(64);
        for b in hasher.finalize() {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }
}

/// Row-index bookkeeping carried from the input sequence through prompt
/// prepending to answer decoding. All positions are absolute row indices;
/// `offset` rows of soft prompt sit in front of the tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMaps {
    pub offset: usize,
    pub n_rows: usize,
    /// Half-open row range of the question tokens.
    pub question_span: (usize, usize),
    pub yes_position: usize,
    pub no_position: usize,
    /// Row of each [SE] marker, strictly increasing.
    pub se_positions: Vec<usize>,
    /// (original paragraph index, sentence index) per [SE].
    pub se_sentence: Vec<(usize, usize)>,
    /// Half-open row range of each sentence's content tokens.
    pub sentence_ranges: Vec<(usize, usize)>,
}

impl SequenceMaps {
    /// Shift every position by `m` prompt rows.
    pub fn shifted(&self, m: usize) -> SequenceMaps {
        SequenceMaps {
            offset: self.offset + m,
            n_rows: self.n_rows + m,
            question_span: (self.question_span.0 + m, self.question_span.1 + m),
            yes_position: self.yes_position + m,
            no_position: self.no_position + m,
            se_positions: self.se_positions.iter().map(|p| p + m).collect(),
            se_sentence: self.se_sentence.clone(),
            sentence_ranges: self
                .sentence_ranges
                .iter()
                .map(|&(a, b)| (a + m, b + m))
                .collect(),
        }
    }
}

/// A tokenized reader input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    pub ids: Vec<usize>,
    /// Segment id per token: 0 for the question block, 1 for context.
    pub segments: Vec<usize>,
    /// Attention mask; false marks padding.
    pub mask: Vec<bool>,
    pub maps: SequenceMaps,
    pub truncated: bool,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Extend with [PAD] up to `len` (mask false). Used to exercise masking.
    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.segments.push(0);
            self.mask.push(false);
        }
    }
}

/// Build the reader input over a question and paragraph-grouped sentences.
///
/// `paragraphs` carries the original candidate index of each paragraph so the
/// supporting-evidence map points back into the example. Sentences that would
/// overflow `n_max` are dropped from the tail and the result is flagged
/// truncated; at least one sentence must survive.
pub fn build_input_sequence(
    vocab: &Vocab,
    question: &str,
    paragraphs: &[(usize, &Paragraph)],
    n_max: usize,
) -> Result<InputSequence> {
    let q_ids = vocab.tokenize(question);
    if q_ids.is_empty() {
        return Err(Error::Tokenizer("empty question".into()));
    }
    let n_sentences: usize = paragraphs.iter().map(|(_, p)| p.sentences.len()).sum();
    if n_sentences == 0 {
        return Err(Error::Tokenizer("no sentences to encode".into()));
    }

    let mut ids = Vec::with_capacity(n_max.min(256));
    ids.push(CLS);
    let q_start = ids.len();
    ids.extend_from_slice(&q_ids);
    let q_end = ids.len();
    ids.push(SEP);
    let yes_position = ids.len();
    ids.push(YES);
    let no_position = ids.len();
    ids.push(NO);
    ids.push(SEP);

    let mut se_positions = Vec::new();
    let mut se_sentence = Vec::new();
    let mut sentence_ranges = Vec::new();
    let mut truncated = false;

    'outer: for (orig_idx, paragraph) in paragraphs {
        for (sent_idx, sentence) in paragraph.sentences.iter().enumerate() {
            let s_ids = vocab.tokenize(sentence);
            // [SE] + tokens + [SEP]
            if ids.len() + s_ids.len() + 2 > n_max {
                truncated = true;
                break 'outer;
            }
            se_positions.push(ids.len());
            ids.push(SE);
            let start = ids.len();
            ids.extend_from_slice(&s_ids);
            sentence_ranges.push((start, ids.len()));
            ids.push(SEP);
            se_sentence.push((*orig_idx, sent_idx));
        }
    }

    if se_positions.is_empty() {
        return Err(Error::Tokenizer(format!(
            "no sentence fits within n_max = {n_max}"
        )));
    }

    let n = ids.len();
    let question_block = se_positions[0];
    let segments = (0..n).map(|i| usize::from(i >= question_block)).collect();
    Ok(InputSequence {
        segments,
        mask: vec![true; n],
        maps: SequenceMaps {
            offset: 0,
            n_rows: n,
            question_span: (q_start, q_end),
            yes_position,
            no_position,
            se_positions,
            se_sentence,
            sentence_ranges,
        },
        ids,
        truncated,
    })
}

/// `[CLS] a [SEP] b [SEP]` pair input for the classifier and retriever, with
/// segment 0 over the first text and segment 1 over the second. Trailing
/// tokens are dropped if the pair overflows `n_max`.
pub fn build_pair_sequence(
    vocab: &Vocab,
    a: &str,
    b: Option<&str>,
    n_max: usize,
) -> (Vec<usize>, Vec<usize>) {
    let mut ids = vec![CLS];
    ids.extend(vocab.tokenize(a));
    ids.truncate(n_max.saturating_sub(1));
    ids.push(SEP);
    let first_len = ids.len();
    if let Some(b) = b {
        ids.extend(vocab.tokenize(b));
        ids.truncate(n_max.saturating_sub(1));
        ids.push(SEP);
    }
    let segments = (0..ids.len()).map(|i| usize::from(i >= first_len)).collect();
    (ids, segments)
}

/// Render the text of a paragraph for retrieval scoring: title plus sentences.
pub fn paragraph_text(p: &Paragraph) -> String {
    let mut s = p.title.clone();
    for sentence in &p.sentences {
        s.push(' ');
        s.push_str(sentence);
    }
    s
}
