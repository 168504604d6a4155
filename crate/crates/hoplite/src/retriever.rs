//! Iterative paragraph selection.
//!
//! One scoring model (encoder + [CLS]-pooled sigmoid head) ranks paragraphs
//! against a query. Step 1 queries with the question alone; each later step
//! appends the previously selected paragraph's text to the query, so the
//! chain probability factorizes as the product of per-step scores. Training
//! uses teacher forcing: the step-2 query carries the true first-hop gold
//! paragraph, positives are the gold paragraph for that step, negatives are
//! sampled from the remaining candidates.

use crate::corpus::QAExample;
use crate::encoder::{ids_to_input, Encoder, EncoderConfig, PooledHead};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::ParameterStore;
use crate::tokenizer::{build_pair_sequence, paragraph_text, Vocab};
use crate::trainer::{LinearSchedule, OptimizerState, TrainConfig};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Ordered selection with per-step scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalState {
    pub selected: Vec<usize>,
    pub step_scores: Vec<f64>,
    pub chain_probability: f64,
}

impl RetrievalState {
    /// `|log(chain) - sum(log(step))|`, the factorization defect.
    pub fn log_factorization_defect(&self) -> f64 {
        let log_sum: f64 = self.step_scores.iter().map(|s| s.ln()).sum();
        (self.chain_probability.ln() - log_sum).abs()
    }
}

pub struct Retriever {
    pub encoder: Encoder,
    pub head: PooledHead,
}

impl Retriever {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        config: &EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(store, "encoder", config, vocab_size, rng)?;
        let head = PooledHead::new(store, "head", config.dim, 1, rng);
        Ok(Self { encoder, head })
    }

    pub fn from_store<F: Scalar>(store: &ParameterStore<F>, config: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::from_store(store, "encoder", config)?,
            head: PooledHead::from_store(store, "head")?,
        })
    }

    /// Relevance probability of a paragraph for a query, in (0, 1).
    pub fn score_paragraph<F: Scalar>(
        &self,
        store: &ParameterStore<F>,
        vocab: &Vocab,
        query: &str,
        paragraph: &str,
    ) -> Result<f64> {
        if query.trim().is_empty() || paragraph.trim().is_empty() {
            return Err(Error::Model("empty retrieval query or paragraph".into()));
        }
        let (ids, segments) =
            build_pair_sequence(vocab, query, Some(paragraph), self.encoder.config.n_max);
        let input = ids_to_input(ids, segments);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (rep, _) = self.encoder.forward(store, &input, false, &mut rng)?;
        let (scores, _) = self.head.forward(store, &rep.hidden);
        Ok(sigmoid(scores[0].to_f64()))
    }

    /// Iterative selection without replacement. The step-1 query is the
    /// question alone; step t appends the step t-1 selection's text.
    pub fn select_iterative<F: Scalar>(
        &self,
        store: &ParameterStore<F>,
        vocab: &Vocab,
        question: &str,
        paragraphs: &[crate::corpus::Paragraph],
        hops: usize,
    ) -> Result<RetrievalState> {
        if hops > paragraphs.len() {
            return Err(Error::Model(format!(
                "cannot select {hops} hops from {} paragraphs",
                paragraphs.len()
            )));
        }
        let mut query = question.to_string();
        let mut remaining: Vec<usize> = (0..paragraphs.len()).collect();
        let mut selected = Vec::with_capacity(hops);
        let mut step_scores = Vec::with_capacity(hops);
        let mut chain_probability = 1.0;
        for _ in 0..hops {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for &idx in &remaining {
                let score =
                    self.score_paragraph(store, vocab, &query, &paragraph_text(&paragraphs[idx]))?;
                if score > best.0 {
                    best = (score, idx);
                }
            }
            let (score, idx) = best;
            remaining.retain(|&i| i != idx);
            selected.push(idx);
            step_scores.push(score);
            chain_probability *= score;
            query = format!("{question} [SEP] {}", paragraph_text(&paragraphs[idx]));
        }
        Ok(RetrievalState {
            selected,
            step_scores,
            chain_probability,
        })
    }

    /// Ablation: rank every paragraph against the question independently and
    /// take the top `hops`, ignoring conditioning.
    pub fn select_independent<F: Scalar>(
        &self,
        store: &ParameterStore<F>,
        vocab: &Vocab,
        question: &str,
        paragraphs: &[crate::corpus::Paragraph],
        hops: usize,
    ) -> Result<RetrievalState> {
        if hops > paragraphs.len() {
            return Err(Error::Model(format!(
                "cannot select {hops} hops from {} paragraphs",
                paragraphs.len()
            )));
        }
        let mut scored: Vec<(f64, usize)> = Vec::with_capacity(paragraphs.len());
        for (idx, p) in paragraphs.iter().enumerate() {
            let s = self.score_paragraph(store, vocab, question, &paragraph_text(p))?;
            scored.push((s, idx));
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
        let top = &scored[..hops];
        Ok(RetrievalState {
            selected: top.iter().map(|(_, i)| *i).collect(),
            step_scores: top.iter().map(|(s, _)| *s).collect(),
            chain_probability: top.iter().map(|(s, _)| *s).product(),
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One training pair: query text, paragraph index, binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalPair {
    pub query: String,
    pub paragraph: usize,
    pub example: usize,
    pub positive: bool,
}

/// Teacher-forced training pairs for one example: step-1 positives/negatives
/// query with the question; step-2 queries carry the gold first-hop text.
pub fn build_training_pairs(
    example: &QAExample,
    example_index: usize,
    negatives_per_step: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<RetrievalPair> {
    let [g1, g2] = example.gold_paragraph_indices;
    let q = example.question.clone();
    let step2_query = format!(
        "{q} [SEP] {}",
        paragraph_text(&example.paragraphs[g1])
    );
    let mut non_gold: Vec<usize> = (0..example.paragraphs.len())
        .filter(|i| *i != g1 && *i != g2)
        .collect();
    let mut pairs = vec![
        RetrievalPair {
            query: q.clone(),
            paragraph: g1,
            example: example_index,
            positive: true,
        },
        RetrievalPair {
            query: step2_query.clone(),
            paragraph: g2,
            example: example_index,
            positive: true,
        },
    ];
    non_gold.shuffle(rng);
    for &neg in non_gold.iter().take(negatives_per_step) {
        pairs.push(RetrievalPair {
            query: q.clone(),
            paragraph: neg,
            example: example_index,
            positive: false,
        });
    }
    non_gold.shuffle(rng);
    for &neg in non_gold.iter().take(negatives_per_step) {
        pairs.push(RetrievalPair {
            query: step2_query.clone(),
            paragraph: neg,
            example: example_index,
            positive: false,
        });
    }
    pairs
}

pub struct RetrieverOutput {
    pub store: ParameterStore<f32>,
    pub model: Retriever,
    pub losses_per_epoch: Vec<f64>,
    /// Per-batch loss curve of the first epoch, for training-sanity checks.
    pub first_epoch_curve: Vec<f64>,
    /// Fraction of dev examples whose two gold paragraphs are exactly the
    /// two selected.
    pub dev_recall_at_2: f64,
}

pub fn train_retriever(
    train: &[QAExample],
    dev: &[QAExample],
    vocab: &Vocab,
    enc_config: &EncoderConfig,
    config: &TrainConfig,
    negatives_per_step: usize,
) -> Result<RetrieverOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParameterStore::<f32>::new();
    let model = Retriever::new(&mut store, enc_config, vocab.len(), &mut rng)?;
    train_retriever_from(
        store,
        model,
        train,
        dev,
        vocab,
        enc_config,
        config,
        negatives_per_step,
    )
}

/// Train starting from an existing store/model (fresh or warm-started).
#[allow(clippy::too_many_arguments)]
pub fn train_retriever_from(
    mut store: ParameterStore<f32>,
    model: Retriever,
    train: &[QAExample],
    dev: &[QAExample],
    vocab: &Vocab,
    enc_config: &EncoderConfig,
    config: &TrainConfig,
    negatives_per_step: usize,
) -> Result<RetrieverOutput> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Corpus("empty retrieval training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let mut pairs = Vec::new();
    for (i, e) in train.iter().enumerate() {
        pairs.extend(build_training_pairs(e, i, negatives_per_step, &mut rng));
    }
    let inputs: Vec<crate::tokenizer::InputSequence> = pairs
        .iter()
        .map(|p| {
            {
                let (ids, segments) = build_pair_sequence(
                    vocab,
                    &p.query,
                    Some(&paragraph_text(&train[p.example].paragraphs[p.paragraph])),
                    enc_config.n_max,
                );
                ids_to_input(ids, segments)
            }
        })
        .collect();

    let steps_per_epoch = pairs.len().div_ceil(config.batch_size) as u64;
    let schedule = LinearSchedule::new(
        config.lr,
        config.warmup_frac,
        steps_per_epoch * config.epochs as u64,
    );
    let mut optimizer = OptimizerState::new(&store, config.weight_decay);

    let mut losses_per_epoch = Vec::with_capacity(config.epochs);
    let mut first_epoch_curve = Vec::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            store.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (rep, enc_cache) = model.encoder.forward(&store, &inputs[idx], true, &mut rng)?;
                let (scores, head_cache) = model.head.forward(&store, &rep.hidden);
                let z = scores[0];
                let y = if pairs[idx].positive { 1.0f32 } else { 0.0 };
                // Stable BCE with logits.
                let loss = z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
                batch_loss += loss as f64;
                let dz = 1.0 / (1.0 + (-z).exp()) - y;
                let d_scores = Array1::from_vec(vec![dz]);
                let d_rep = model.head.backward(&mut store, &head_cache, &d_scores);
                model.encoder.backward(&mut store, &enc_cache, &d_rep);
            }
            store.scale_grads(1.0 / batch.len() as f32);
            let lr = schedule.lr(optimizer.step);
            optimizer.step(&mut store, lr);
            if epoch == 0 {
                first_epoch_curve.push(batch_loss / batch.len() as f64);
            }
            epoch_loss += batch_loss;
        }
        losses_per_epoch.push(epoch_loss / pairs.len() as f64);
    }

    let mut hits = 0usize;
    for e in dev {
        let state = model.select_iterative(&store, vocab, &e.question, &e.paragraphs, 2)?;
        let mut sel = state.selected.clone();
        sel.sort_unstable();
        let mut gold = e.gold_paragraph_indices.to_vec();
        gold.sort_unstable();
        if sel == gold {
            hits += 1;
        }
    }
    let dev_recall_at_2 = hits as f64 / dev.len().max(1) as f64;

    Ok(RetrieverOutput {
        store,
        model,
        losses_per_epoch,
        first_epoch_curve,
        dev_recall_at_2,
    })
}
