//! Optimizer, checkpointing, and the three-stage training pipeline.
//!
//! Stage 1 trains encoder + reader jointly on single-hop items derived from
//! sub-questions. Stage 2 trains the question classifier and the iterative
//! retriever (separate models). Stage 3 freezes the encoder, expands it with
//! the lateral column and soft prompts, and trains on multi-hop examples with
//! teacher-forced gold paragraphs and gold-type prompts; conservation is
//! verified at every epoch end.

use crate::conservation::{
    freeze, verify_conservation, LateralAdapterConfig, MultiHopModel, MultiHopVariant, PromptSpec,
};
use crate::corpus::{QAExample, SingleHopExample};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::reader::{build_gold_labels, joint_loss, GoldLabels, SingleHopModel};
use crate::scalar::Scalar;
use crate::store::{ParameterStore, Partition};
use crate::tokenizer::{build_input_sequence, InputSequence, Vocab};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the supporting-evidence loss term.
    pub lambda_se: f64,
    pub lr: f64,
    pub lr_stage3: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_answer_len: usize,
    pub support_threshold: f64,
    /// Distractor paragraphs per derived single-hop item.
    pub singlehop_distractors: usize,
    /// Stage 3 trains on gold paragraphs (teacher forcing) when true.
    pub teacher_forcing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_se: 2.0,
            lr: 2e-5,
            lr_stage3: 3e-5,
            batch_size: 12,
            epochs: 5,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            seed: 7,
            max_answer_len: 10,
            support_threshold: 0.5,
            singlehop_distractors: 4,
            teacher_forcing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_se <= 0.0 {
            return Err(Error::Config("lambda_se must be positive".into()));
        }
        if self.lr <= 0.0 || self.lr_stage3 <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam with decoupled weight decay and a linear warmup/decay schedule
// ---------------------------------------------------------------------------

/// Linear warmup from zero over the first `warmup_steps`, then linear decay
/// to zero at `total_steps`.
#[derive(Debug, Clone, Copy)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LinearSchedule {
    pub fn new(base_lr: f64, warmup_frac: f64, total_steps: u64) -> Self {
        Self {
            base_lr,
            warmup_steps: (warmup_frac * total_steps as f64).round() as u64,
            total_steps: total_steps.max(1),
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        self.base_lr * (remaining / span).clamp(0.0, 1.0)
    }
}

struct Moment<F: Scalar> {
    m: ArrayD<F>,
    v: ArrayD<F>,
}

/// Per-array first/second moment estimates. No state is allocated for frozen
/// arrays and the update loop never visits them.
pub struct OptimizerState<F: Scalar> {
    moments: Vec<Option<Moment<F>>>,
    pub step: u64,
    pub weight_decay: f64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(store: &ParameterStore<F>, weight_decay: f64) -> Self {
        let moments = store
            .params()
            .map(|(_, p)| {
                if p.partition == Partition::Frozen {
                    None
                } else {
                    Some(Moment {
                        m: ArrayD::zeros(p.value.raw_dim()),
                        v: ArrayD::zeros(p.value.raw_dim()),
                    })
                }
            })
            .collect();
        Self {
            moments,
            step: 0,
            weight_decay,
        }
    }

    pub fn has_state_for_frozen(&self, store: &ParameterStore<F>) -> bool {
        store
            .params()
            .zip(self.moments.iter())
            .any(|((_, p), m)| p.partition == Partition::Frozen && m.is_some())
    }

    /// One Adam step over all non-frozen arrays. Non-finite gradients skip
    /// the update (the step counter still advances so the schedule moves on).
    pub fn step(&mut self, store: &mut ParameterStore<F>, lr: f64) {
        self.step += 1;
        if !store.grads_finite() {
            eprintln!(
                "warning: non-finite gradient at optimizer step {}; skipping update",
                self.step
            );
            return;
        }
        let t = self.step as i32;
        let b1 = F::from_f64(ADAM_BETA1);
        let b2 = F::from_f64(ADAM_BETA2);
        let eps = F::from_f64(ADAM_EPS);
        let lr_f = F::from_f64(lr);
        let wd = F::from_f64(self.weight_decay);
        let bc1 = F::one() - F::from_f64(ADAM_BETA1.powi(t));
        let bc2 = F::one() - F::from_f64(ADAM_BETA2.powi(t));
        for ((_, p), slot) in store.params_mut().zip(self.moments.iter_mut()) {
            let Some(moment) = slot else { continue };
            debug_assert!(p.partition != Partition::Frozen);
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut moment.m)
                .and(&mut moment.v)
                .for_each(|theta, &g, m, v| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *theta = *theta - lr_f * (m_hat / (v_hat.sqrt() + eps) + wd * *theta);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + one .bin per array (row-major f32 LE)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub partition: Partition,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub stage: u8,
    pub config: BTreeMap<String, String>,
    pub vocab_sha256: String,
    pub arrays: Vec<ArrayEntry>,
    pub frozen_checksums: BTreeMap<String, String>,
}

fn array_file_name(index: usize, name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{index:04}_{safe}.bin")
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParameterStore<f32>,
    stage: u8,
    config: BTreeMap<String, String>,
    vocab_sha256: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut arrays = Vec::with_capacity(store.len());
    let mut frozen_checksums = BTreeMap::new();
    for (i, (_, p)) in store.params().enumerate() {
        let file = array_file_name(i, &p.name);
        let mut bytes = Vec::with_capacity(p.value.len() * 4);
        for &v in p.value.as_standard_layout().iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(&file), &bytes)?;
        arrays.push(ArrayEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            partition: p.partition,
            file,
        });
        if let Some(sum) = &p.frozen_checksum {
            frozen_checksums.insert(p.name.clone(), sum.clone());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        stage,
        config,
        vocab_sha256: vocab_sha256.to_string(),
        arrays,
        frozen_checksums,
    };
    let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParameterStore<f32>, CheckpointManifest)> {
    let manifest_path = dir.join("manifest.json");
    let mut text = String::new();
    File::open(&manifest_path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", manifest_path.display())))?
        .read_to_string(&mut text)?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    let mut store = ParameterStore::new();
    for entry in &manifest.arrays {
        let bytes = std::fs::read(dir.join(&entry.file))?;
        let expected: usize = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "array {} payload is {} bytes, manifest shape wants {expected}",
                entry.name,
                bytes.len()
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let value = ArrayD::from_shape_vec(entry.shape.clone(), values)
            .map_err(|e| Error::Checkpoint(format!("array {}: {e}", entry.name)))?;
        let id = store.insert(&entry.name, value, entry.partition);
        if let Some(sum) = manifest.frozen_checksums.get(&entry.name) {
            store.param_mut(id).frozen_checksum = Some(sum.clone());
        }
    }
    Ok((store, manifest))
}

// ---------------------------------------------------------------------------
// Stage 1: single-hop reader
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageMetrics {
    pub final_loss: f64,
    pub dev: MetricReport,
    pub losses_per_epoch: Vec<f64>,
}

pub struct Stage1Output {
    pub store: ParameterStore<f32>,
    pub model: SingleHopModel,
    pub metrics: StageMetrics,
}

/// Prepared (input, gold) pair; building these once outside the epoch loop
/// dominates tokenization cost.
pub fn prepare_singlehop_item(
    vocab: &Vocab,
    item: &SingleHopExample,
    n_max: usize,
) -> Result<(InputSequence, GoldLabels)> {
    let paragraphs: Vec<(usize, &crate::corpus::Paragraph)> =
        item.paragraphs.iter().enumerate().collect();
    let input = build_input_sequence(vocab, &item.question, &paragraphs, n_max)?;
    let gold = build_gold_labels(
        vocab,
        &input,
        &input.maps,
        &crate::corpus::Answer::Span(item.answer.clone()),
        &[item.supporting],
    )?;
    Ok((input, gold))
}

pub fn stage1_train(
    train_items: &[SingleHopExample],
    dev_items: &[SingleHopExample],
    vocab: &Vocab,
    enc_config: &EncoderConfig,
    config: &TrainConfig,
) -> Result<Stage1Output> {
    config.validate()?;
    if train_items.is_empty() {
        return Err(Error::Corpus("empty single-hop training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParameterStore::<f32>::new();
    let model = SingleHopModel::new(&mut store, enc_config, vocab.len(), &mut rng)?;

    let prepared: Vec<(InputSequence, GoldLabels)> = train_items
        .iter()
        .map(|item| prepare_singlehop_item(vocab, item, enc_config.n_max))
        .collect::<Result<_>>()?;

    let steps_per_epoch = prepared.len().div_ceil(config.batch_size) as u64;
    let schedule = LinearSchedule::new(
        config.lr,
        config.warmup_frac,
        steps_per_epoch * config.epochs as u64,
    );
    let mut optimizer = OptimizerState::new(&store, config.weight_decay);

    let mut losses_per_epoch = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            store.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (input, gold) = &prepared[idx];
                let (output, cache) = model.forward(&store, input, true, &mut rng)?;
                let (parts, grads) = joint_loss(&output, gold, config.lambda_se, &input.mask)?;
                batch_loss += parts.total as f64;
                model.backward(&mut store, &cache, &grads);
            }
            store.scale_grads(1.0 / batch.len() as f32);
            let lr = schedule.lr(optimizer.step);
            optimizer.step(&mut store, lr);
            epoch_loss += batch_loss;
        }
        losses_per_epoch.push(epoch_loss / prepared.len() as f64);
    }

    let dev = crate::eval::evaluate_singlehop(&store, &model, vocab, dev_items, config)?;
    Ok(Stage1Output {
        store,
        model,
        metrics: StageMetrics {
            final_loss: losses_per_epoch.last().copied().unwrap_or(f64::NAN),
            dev,
            losses_per_epoch,
        },
    })
}

// ---------------------------------------------------------------------------
// Stage 3: conservation-trained multi-hop reader
// ---------------------------------------------------------------------------

pub struct Stage3Output {
    pub store: ParameterStore<f32>,
    pub model: MultiHopModel,
    pub metrics: StageMetrics,
}

/// Multi-hop training input: the two gold paragraphs in hop order
/// (teacher forcing).
pub fn prepare_multihop_item(
    vocab: &Vocab,
    example: &QAExample,
    n_max: usize,
    prompt_rows: usize,
) -> Result<(InputSequence, GoldLabels)> {
    let [g1, g2] = example.gold_paragraph_indices;
    let paragraphs = vec![
        (g1, &example.paragraphs[g1]),
        (g2, &example.paragraphs[g2]),
    ];
    let input = build_input_sequence(vocab, &example.question, &paragraphs, n_max)?;
    let shifted = input.maps.shifted(prompt_rows);
    let gold = build_gold_labels(vocab, &input, &shifted, &example.answer, &example.supporting)?;
    Ok((input, gold))
}

#[allow(clippy::too_many_arguments)]
pub fn stage3_train(
    mut store: ParameterStore<f32>,
    train: &[QAExample],
    dev: &[QAExample],
    vocab: &Vocab,
    enc_config: &EncoderConfig,
    adapter_config: &LateralAdapterConfig,
    prompt_spec: &PromptSpec,
    variant: MultiHopVariant,
    config: &TrainConfig,
) -> Result<Stage3Output> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Corpus("empty multi-hop training set".into()));
    }
    if !config.teacher_forcing {
        return Err(Error::Config(
            "stage 3 training currently supports teacher-forced gold contexts only".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    if variant.use_cl {
        freeze(&mut store, "encoder.*")?;
    }
    let model = MultiHopModel::expand(
        &mut store,
        enc_config,
        variant,
        adapter_config,
        prompt_spec,
        &mut rng,
    )?;
    let prompt_rows = model.prompts.as_ref().map(|t| t.rows).unwrap_or(0);

    let prepared: Vec<(InputSequence, GoldLabels, crate::corpus::ReasoningType)> = train
        .iter()
        .map(|e| {
            prepare_multihop_item(vocab, e, enc_config.n_max, prompt_rows)
                .map(|(i, g)| (i, g, e.qtype.reasoning_type()))
        })
        .collect::<Result<_>>()?;

    let steps_per_epoch = prepared.len().div_ceil(config.batch_size) as u64;
    let schedule = LinearSchedule::new(
        config.lr_stage3,
        config.warmup_frac,
        steps_per_epoch * config.epochs as u64,
    );
    let mut optimizer = OptimizerState::new(&store, config.weight_decay);

    let mut losses_per_epoch = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            store.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let (input, gold, rtype) = &prepared[idx];
                // Gold-type prompts during training (teacher forcing).
                let (fwd, cache) = model.forward(&store, input, *rtype, true, &mut rng)?;
                let (parts, grads) = joint_loss(&fwd.output, gold, config.lambda_se, &fwd.valid)?;
                batch_loss += parts.total as f64;
                model.backward(&mut store, &cache, &grads);
            }
            store.scale_grads(1.0 / batch.len() as f32);
            let lr = schedule.lr(optimizer.step);
            optimizer.step(&mut store, lr);
            epoch_loss += batch_loss;
        }
        losses_per_epoch.push(epoch_loss / prepared.len() as f64);
        if variant.use_cl {
            let report = verify_conservation(&store)?;
            if !report.ok {
                return Err(Error::Conservation(
                    report.violations.len(),
                    report.violations.into_iter().map(|v| v.name).collect(),
                ));
            }
        }
    }

    let dev_report =
        crate::eval::evaluate_multihop_gold_context(&store, &model, vocab, dev, config)?;
    Ok(Stage3Output {
        store,
        model,
        metrics: StageMetrics {
            final_loss: losses_per_epoch.last().copied().unwrap_or(f64::NAN),
            dev: dev_report,
            losses_per_epoch,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_warms_up_from_zero_linearly() {
        let s = LinearSchedule::new(1.0, 0.1, 100);
        assert_eq!(s.warmup_steps, 10);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(5) - 0.5).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        // Linear decay afterwards, reaching zero at the end.
        assert!(s.lr(55) < 1.0);
        assert!((s.lr(100) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn adam_scalar_step_matches_hand_computation() {
        // g=1, m=v=0, lr=0.1, no weight decay. Independent arithmetic:
        // m' = 0.1, v' = 0.001, m_hat = 1, v_hat = 1,
        // update = -0.1 * 1/(sqrt(1)+1e-8).
        let mut store = ParameterStore::<f64>::new();
        let id = store.insert1("w", array![0.5f64], Partition::Trainable);
        store.add_grad1(id, &array![1.0f64]);
        let mut opt = OptimizerState::new(&store, 0.0);
        opt.step(&mut store, 0.1);
        let expected = 0.5 - 0.1 * (1.0 / (1.0f64.sqrt() + 1e-8));
        let got = store.get1(id)[0];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_fixed_point() {
        let mut store = ParameterStore::<f32>::new();
        let id = store.insert1("w", array![1.5f32, -2.0], Partition::Trainable);
        let mut opt = OptimizerState::new(&store, 0.0);
        opt.step(&mut store, 0.5);
        assert_eq!(store.get1(id), array![1.5f32, -2.0]);
    }

    #[test]
    fn frozen_arrays_get_no_state_and_never_change() {
        let mut store = ParameterStore::<f32>::new();
        store.insert1("encoder.w", array![1.0f32, 2.0], Partition::Trainable);
        store.insert1("reader.w", array![3.0f32], Partition::Trainable);
        freeze(&mut store, "encoder.*").unwrap();
        let frozen_before = store.snapshot(store.id("encoder.w").unwrap());

        let mut opt = OptimizerState::new(&store, 0.01);
        assert!(!opt.has_state_for_frozen(&store));
        // Put gradients everywhere (the backward pass never writes frozen
        // grads, but even if they were set the optimizer must skip them).
        for (_, p) in store.params_mut() {
            p.grad.fill(1.0);
        }
        opt.step(&mut store, 0.1);
        let frozen_after = store.snapshot(store.id("encoder.w").unwrap());
        assert_eq!(frozen_before, frozen_after);
        let reader = store.get1(store.id("reader.w").unwrap())[0];
        assert_ne!(reader, 3.0);
        assert!(verify_conservation(&store).unwrap().ok);
    }

    #[test]
    fn non_finite_gradient_skips_update() {
        let mut store = ParameterStore::<f32>::new();
        let id = store.insert1("w", array![1.0f32], Partition::Trainable);
        store.add_grad1(id, &array![f32::NAN]);
        let mut opt = OptimizerState::new(&store, 0.0);
        opt.step(&mut store, 0.1);
        assert_eq!(store.get1(id)[0], 1.0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut store = ParameterStore::<f32>::new();
        store.insert1("a.w", array![1.0f32, -2.5, 3.25], Partition::Trainable);
        store.insert2(
            "b.w",
            array![[0.5f32, 0.125], [9.0, -0.0]],
            Partition::Prompt,
        );
        freeze(&mut store, "a.*").unwrap();

        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("ck1");
        let d2 = dir.path().join("ck2");
        let mut config = BTreeMap::new();
        config.insert("model.d".to_string(), "8".to_string());
        save_checkpoint(&d1, &store, 1, config.clone(), "vhash").unwrap();
        let (loaded, manifest) = load_checkpoint(&d1).unwrap();
        assert_eq!(manifest.stage, 1);
        save_checkpoint(&d2, &loaded, 1, config, "vhash").unwrap();

        for entry in std::fs::read_dir(&d1).unwrap() {
            let name = entry.unwrap().file_name();
            let b1 = std::fs::read(d1.join(&name)).unwrap();
            let b2 = std::fs::read(d2.join(&name)).unwrap();
            assert_eq!(b1, b2, "file {name:?} differs after round trip");
        }
        // Partition labels and checksums survive.
        let id = loaded.id("a.w").unwrap();
        assert_eq!(loaded.param(id).partition, Partition::Frozen);
        assert!(loaded.param(id).frozen_checksum.is_some());
        assert!(verify_conservation(&loaded).unwrap().ok);
    }

    #[test]
    fn truncated_checkpoint_payload_errors() {
        let mut store = ParameterStore::<f32>::new();
        store.insert1("w", array![1.0f32, 2.0], Partition::Trainable);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &store, 1, BTreeMap::new(), "v").unwrap();
        // Truncate the payload.
        let bin = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().is_some_and(|e| e == "bin"))
            .unwrap();
        std::fs::write(&bin, [0u8; 4]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
