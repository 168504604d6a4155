//! Question classifier: predict the reasoning type (bridge vs comparison)
//! from the question text alone, selecting the soft prompt at inference.
//!
//! Reuses the encoder architecture with a [CLS]-pooled two-way head, trained
//! from scratch with its own weights.

use crate::corpus::{QAExample, ReasoningType};
use crate::encoder::{ids_to_input, Encoder, EncoderConfig, PooledHead};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::ParameterStore;
use crate::tokenizer::{build_pair_sequence, Vocab};
use crate::trainer::{LinearSchedule, OptimizerState, TrainConfig};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TypePrediction {
    /// Score per registered type, in fixed type order.
    pub scores: Vec<(ReasoningType, f64)>,
    pub selected: ReasoningType,
}

pub struct QClassifier {
    pub encoder: Encoder,
    pub head: PooledHead,
}

impl QClassifier {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        config: &EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(store, "encoder", config, vocab_size, rng)?;
        let head = PooledHead::new(store, "head", config.dim, ReasoningType::ALL.len(), rng);
        Ok(Self { encoder, head })
    }

    pub fn from_store<F: Scalar>(store: &ParameterStore<F>, config: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::from_store(store, "encoder", config)?,
            head: PooledHead::from_store(store, "head")?,
        })
    }

    /// Classify a question. Normalization (trim, lowercase) happens during
    /// tokenization, so trailing whitespace and casing cannot change the
    /// result. Exact score ties select the earlier type in the fixed order
    /// (bridge before comparison).
    pub fn classify<F: Scalar>(
        &self,
        store: &ParameterStore<F>,
        vocab: &Vocab,
        question: &str,
    ) -> Result<TypePrediction> {
        if question.trim().is_empty() {
            return Err(Error::Model("cannot classify an empty question".into()));
        }
        let (ids, segments) =
            build_pair_sequence(vocab, question.trim(), None, self.encoder.config.n_max);
        let input = ids_to_input(ids, segments);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (rep, _) = self.encoder.forward(store, &input, false, &mut rng)?;
        let (scores, _) = self.head.forward(store, &rep.hidden);
        Ok(Self::prediction_from_scores(&scores))
    }

    fn prediction_from_scores<F: Scalar>(scores: &Array1<F>) -> TypePrediction {
        let pairs: Vec<(ReasoningType, f64)> = ReasoningType::ALL
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, scores[i].to_f64()))
            .collect();
        // Strict > keeps the earliest type on ties.
        let mut selected = pairs[0].0;
        let mut best = pairs[0].1;
        for &(t, s) in &pairs[1..] {
            if s > best {
                best = s;
                selected = t;
            }
        }
        TypePrediction {
            scores: pairs,
            selected,
        }
    }
}

pub struct ClassifierOutput {
    pub store: ParameterStore<f32>,
    pub model: QClassifier,
    pub dev_accuracy: f64,
    pub losses_per_epoch: Vec<f64>,
}

/// Train the classifier on (question, reasoning type) pairs from the corpus.
pub fn train_classifier(
    train: &[QAExample],
    dev: &[QAExample],
    vocab: &Vocab,
    enc_config: &EncoderConfig,
    config: &TrainConfig,
) -> Result<ClassifierOutput> {
    config.validate()?;
    let labels: Vec<usize> = train
        .iter()
        .map(|e| e.qtype.reasoning_type().index())
        .collect();
    let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Corpus(
            "classifier training needs at least two classes in the corpus".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParameterStore::<f32>::new();
    let model = QClassifier::new(&mut store, enc_config, vocab.len(), &mut rng)?;

    let inputs: Vec<crate::tokenizer::InputSequence> = train
        .iter()
        .map(|e| {
            let (ids, segments) = build_pair_sequence(vocab, &e.question, None, enc_config.n_max);
            ids_to_input(ids, segments)
        })
        .collect();

    let steps_per_epoch = inputs.len().div_ceil(config.batch_size) as u64;
    let schedule = LinearSchedule::new(
        config.lr,
        config.warmup_frac,
        steps_per_epoch * config.epochs as u64,
    );
    let mut optimizer = OptimizerState::new(&store, config.weight_decay);

    let mut losses_per_epoch = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            store.zero_grads();
            for &idx in batch {
                let (rep, enc_cache) = model.encoder.forward(&store, &inputs[idx], true, &mut rng)?;
                let (scores, head_cache) = model.head.forward(&store, &rep.hidden);
                let (loss, d_scores) = softmax_ce(&scores, labels[idx]);
                epoch_loss += loss;
                let d_rep = model.head.backward(&mut store, &head_cache, &d_scores);
                model.encoder.backward(&mut store, &enc_cache, &d_rep);
            }
            store.scale_grads(1.0 / batch.len() as f32);
            let lr = schedule.lr(optimizer.step);
            optimizer.step(&mut store, lr);
        }
        losses_per_epoch.push(epoch_loss / inputs.len() as f64);
    }

    let mut correct = 0usize;
    for e in dev {
        let pred = model.classify(&store, vocab, &e.question)?;
        if pred.selected == e.qtype.reasoning_type() {
            correct += 1;
        }
    }
    let dev_accuracy = correct as f64 / dev.len().max(1) as f64;
    Ok(ClassifierOutput {
        store,
        model,
        dev_accuracy,
        losses_per_epoch,
    })
}

/// Softmax cross-entropy over a score vector; returns loss and d_scores.
fn softmax_ce(scores: &Array1<f32>, gold: usize) -> (f64, Array1<f32>) {
    let max = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Array1<f32> = scores.mapv(|s| (s - max).exp());
    let sum: f32 = exps.sum();
    let loss = -((exps[gold] / sum).ln() as f64);
    let mut d = exps.mapv(|e| e / sum);
    d[gold] -= 1.0;
    (loss, d)
}
