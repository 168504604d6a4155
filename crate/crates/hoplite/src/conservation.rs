//! Freeze-and-expand conservation training.
//!
//! Stage 3 freezes the stage-1 encoder (bit-exactly, enforced by checksums
//! and optimizer masking), snapshots the stage-1 reader under
//! `stage1_reader.*` so the original single-hop path stays reconstructible,
//! and allocates a laterally connected trainable column: one `(W, U, b)`
//! triple per tapped frozen layer plus a zero-initialized output gate. With
//! the gate at zero the expanded model computes exactly what the frozen model
//! computed, so training starts from the conserved behavior.

use crate::encoder::{ContextRepresentation, Encoder, EncoderCache, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad};
use crate::prompt::{prepend, PromptInit, PromptTable};
use crate::reader::{
    BiAttention, BiAttentionCache, Heads, HeadsCache, LossGrads, ReaderOutput, SingleHopModel,
};
use crate::scalar::Scalar;
use crate::store::{ParamId, ParameterStore, Partition};
use crate::tokenizer::{InputSequence, SequenceMaps};
use crate::corpus::ReasoningType;
use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use crate::store::freeze;

// ---------------------------------------------------------------------------
// Conservation verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConservationViolation {
    pub name: String,
    pub recorded: String,
    pub actual: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConservationReport {
    pub ok: bool,
    pub n_frozen: usize,
    pub violations: Vec<ConservationViolation>,
}

/// Re-hash every frozen array and compare against the checksum recorded at
/// freeze time. A frozen array without a recorded checksum is an error.
pub fn verify_conservation<F: Scalar>(store: &ParameterStore<F>) -> Result<ConservationReport> {
    let mut n_frozen = 0;
    let mut violations = Vec::new();
    for (id, p) in store.params() {
        if p.partition != Partition::Frozen {
            continue;
        }
        n_frozen += 1;
        let recorded = p.frozen_checksum.as_ref().ok_or_else(|| {
            Error::Model(format!("frozen array {} has no recorded checksum", p.name))
        })?;
        let actual = store.checksum(id);
        if actual != *recorded {
            violations.push(ConservationViolation {
                name: p.name.clone(),
                recorded: recorded.clone(),
                actual,
            });
        }
    }
    if n_frozen == 0 {
        return Err(Error::Model(
            "no frozen arrays: nothing to verify (model trained without conservation?)".into(),
        ));
    }
    Ok(ConservationReport {
        ok: violations.is_empty(),
        n_frozen,
        violations,
    })
}

// ---------------------------------------------------------------------------
// Lateral adapter column
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Gelu,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }

    fn apply<F: Scalar>(&self, x: F) -> F {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Gelu => gelu(x),
        }
    }

    fn grad<F: Scalar>(&self, x: F) -> F {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                F::one() - t * t
            }
            Activation::Gelu => gelu_grad(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralAdapterConfig {
    /// Width of the new column.
    pub width: usize,
    /// Indices of frozen blocks whose outputs are tapped, in depth order.
    pub tapped: Vec<usize>,
    pub activation: Activation,
}

impl LateralAdapterConfig {
    pub fn for_encoder(width: usize, encoder: &EncoderConfig) -> Self {
        Self {
            width,
            tapped: (0..encoder.layers).collect(),
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("adapter width must be >= 1".into()));
        }
        if self.tapped.is_empty() {
            return Err(Error::Config("adapter must tap at least one layer".into()));
        }
        for &t in &self.tapped {
            if t >= encoder.layers {
                return Err(Error::Config(format!(
                    "tapped layer {t} does not exist in a {}-layer encoder",
                    encoder.layers
                )));
            }
        }
        Ok(())
    }
}

struct AdapterLayer {
    w: ParamId,
    u: ParamId,
    b: ParamId,
    tap: usize,
}

/// The new-column computation: per tapped frozen layer,
/// `a_k = act(a_{k-1} W_k + pad(h_tap) U_k + b_k)`, with the final state fed
/// through a zero-initialized gate matrix and added to the representation.
/// Prompt rows enter through `a_0` (the prompt-prepended representation); the
/// lateral inputs are zero-padded over prompt rows.
pub struct LateralAdapter {
    pub config: LateralAdapterConfig,
    layers: Vec<AdapterLayer>,
    gate: ParamId,
    dim: usize,
}

pub struct AdapterCache<F: Scalar> {
    inputs: Vec<Array2<F>>,
    laterals: Vec<Array2<F>>,
    zs: Vec<Array2<F>>,
    final_state: Array2<F>,
}

impl LateralAdapter {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        config: &LateralAdapterConfig,
        encoder: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(encoder)?;
        let d = encoder.dim;
        let da = config.width;
        let mut layers = Vec::with_capacity(config.tapped.len());
        for (k, &tap) in config.tapped.iter().enumerate() {
            let in_dim = if k == 0 { d } else { da };
            let w = store.init_normal2(&format!("adapter.layer{k}.w"), (in_dim, da), 0.02, rng);
            let u = store.init_normal2(&format!("adapter.layer{k}.u"), (d, da), 0.02, rng);
            let b = store.init_zeros1(&format!("adapter.layer{k}.b"), da);
            layers.push(AdapterLayer { w, u, b, tap });
        }
        // Zero init: the expanded model starts exactly at the frozen model.
        let gate = store.init_zeros2("adapter.gate", (da, d));
        Ok(Self {
            config: config.clone(),
            layers,
            gate,
            dim: d,
        })
    }

    pub fn from_store<F: Scalar>(
        store: &ParameterStore<F>,
        config: &LateralAdapterConfig,
        encoder: &EncoderConfig,
    ) -> Result<Self> {
        config.validate(encoder)?;
        let need = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
        };
        let mut layers = Vec::with_capacity(config.tapped.len());
        for (k, &tap) in config.tapped.iter().enumerate() {
            layers.push(AdapterLayer {
                w: need(format!("adapter.layer{k}.w"))?,
                u: need(format!("adapter.layer{k}.u"))?,
                b: need(format!("adapter.layer{k}.b"))?,
                tap,
            });
        }
        Ok(Self {
            config: config.clone(),
            layers,
            gate: need("adapter.gate".into())?,
            dim: encoder.dim,
        })
    }

    /// Number of arrays the adapter allocates: (W, U, b) per tapped layer
    /// plus the gate.
    pub fn expected_array_count(config: &LateralAdapterConfig) -> usize {
        3 * config.tapped.len() + 1
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParameterStore<F>,
        c_prime: &Array2<F>,
        block_outputs: &[Array2<F>],
        prompt_rows: usize,
    ) -> (Array2<F>, AdapterCache<F>) {
        let rows = c_prime.nrows();
        let act = self.config.activation;
        let mut a = c_prime.clone();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut laterals = Vec::with_capacity(self.layers.len());
        let mut zs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let tap = &block_outputs[layer.tap];
            let mut lateral = Array2::zeros((rows, self.dim));
            lateral
                .slice_mut(s![prompt_rows.., ..])
                .assign(tap);
            let z =
                a.dot(&store.get2(layer.w)) + lateral.dot(&store.get2(layer.u)) + &store.get1(layer.b);
            inputs.push(a);
            laterals.push(lateral);
            a = z.mapv(|v| act.apply(v));
            zs.push(z);
        }
        let rep = c_prime + &a.dot(&store.get2(self.gate));
        (
            rep,
            AdapterCache {
                inputs,
                laterals,
                zs,
                final_state: a,
            },
        )
    }

    /// Accumulates adapter gradients; gradients toward the frozen lateral
    /// inputs are discarded. Returns the gradient w.r.t. `c_prime`.
    pub fn backward<F: Scalar>(
        &self,
        store: &mut ParameterStore<F>,
        cache: &AdapterCache<F>,
        d_rep: &Array2<F>,
    ) -> Array2<F> {
        let act = self.config.activation;
        let mut d_c_prime = d_rep.clone();
        let d_gate = cache.final_state.t().dot(d_rep);
        let mut d_a = d_rep.dot(&store.get2(self.gate).t());
        store.add_grad2(self.gate, &d_gate);

        for (k, layer) in self.layers.iter().enumerate().rev() {
            let dz = &d_a * &cache.zs[k].mapv(|v| act.grad(v));
            let dw = cache.inputs[k].t().dot(&dz);
            let du = cache.laterals[k].t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            d_a = dz.dot(&store.get2(layer.w).t());
            store.add_grad2(layer.w, &dw);
            store.add_grad2(layer.u, &du);
            store.add_grad1(layer.b, &db);
        }
        // a_0 was c_prime itself.
        d_c_prime += &d_a;
        d_c_prime
    }
}

// ---------------------------------------------------------------------------
// Multi-hop model (four ablation variants)
// ---------------------------------------------------------------------------

/// Which pieces of the full method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHopVariant {
    pub use_prompt: bool,
    pub use_cl: bool,
}

impl MultiHopVariant {
    pub const FULL: Self = Self {
        use_prompt: true,
        use_cl: true,
    };
    pub const NO_PROMPT: Self = Self {
        use_prompt: false,
        use_cl: true,
    };
    pub const NO_CL: Self = Self {
        use_prompt: true,
        use_cl: false,
    };
    pub const PLAIN: Self = Self {
        use_prompt: false,
        use_cl: false,
    };

    pub fn label(&self) -> &'static str {
        match (self.use_prompt, self.use_cl) {
            (true, true) => "full",
            (false, true) => "no-prompt",
            (true, false) => "no-cl",
            (false, false) => "plain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::FULL),
            "no-prompt" => Ok(Self::NO_PROMPT),
            "no-cl" => Ok(Self::NO_CL),
            "plain" => Ok(Self::PLAIN),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

pub struct MultiHopModel {
    pub encoder: Encoder,
    pub adapter: Option<LateralAdapter>,
    pub prompts: Option<PromptTable>,
    pub bi_attention: BiAttention,
    pub heads: Heads,
    pub variant: MultiHopVariant,
}

pub struct MultiHopCache<F: Scalar> {
    encoder: EncoderCache<F>,
    prompt: Option<(ParamId, usize)>,
    adapter: Option<AdapterCache<F>>,
    bi: BiAttentionCache<F>,
    heads: HeadsCache<F>,
}

pub struct MultiHopForward<F: Scalar> {
    pub output: ReaderOutput<F>,
    pub maps: SequenceMaps,
    /// Row validity (prompt rows valid, padding invalid); the loss mask.
    pub valid: Vec<bool>,
}

/// Settings for the prompt table allocated at expansion time.
#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub rows: usize,
    pub init: PromptInit,
    pub seed: u64,
}

impl MultiHopModel {
    /// Expand a stage-1 store into the multi-hop model for `variant`.
    ///
    /// With conservation active the encoder must already be frozen (else
    /// error); the stage-1 reader arrays are snapshotted under
    /// `stage1_reader.*` and frozen so the single-hop path remains
    /// reconstructible bit-for-bit.
    pub fn expand<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        enc_config: &EncoderConfig,
        variant: MultiHopVariant,
        adapter_config: &LateralAdapterConfig,
        prompt_spec: &PromptSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::from_store(store, "encoder", enc_config)?;
        let adapter = if variant.use_cl {
            let unfrozen: Vec<String> = store
                .select("encoder.*")
                .into_iter()
                .filter(|&id| store.param(id).partition != Partition::Frozen)
                .map(|id| store.param(id).name.clone())
                .collect();
            if !unfrozen.is_empty() {
                return Err(Error::Model(format!(
                    "cannot expand an unfrozen model; {} encoder arrays are not frozen",
                    unfrozen.len()
                )));
            }
            snapshot_stage1_reader(store)?;
            Some(LateralAdapter::new(store, adapter_config, enc_config, rng)?)
        } else {
            None
        };
        let prompts = if variant.use_prompt {
            Some(crate::prompt::init_prompts(
                store,
                &ReasoningType::ALL,
                prompt_spec.rows,
                enc_config.dim,
                &prompt_spec.init,
                prompt_spec.seed,
            )?)
        } else {
            None
        };
        Ok(Self {
            encoder,
            adapter,
            prompts,
            bi_attention: BiAttention::from_store(store, "reader.biattn", enc_config.dim)?,
            heads: Heads::from_store(store, "reader.heads")?,
            variant,
        })
    }

    /// Rebuild from a stage-3 checkpoint store.
    pub fn from_store<F: Scalar>(
        store: &ParameterStore<F>,
        enc_config: &EncoderConfig,
        variant: MultiHopVariant,
        adapter_config: &LateralAdapterConfig,
    ) -> Result<Self> {
        let adapter = if variant.use_cl {
            Some(LateralAdapter::from_store(store, adapter_config, enc_config)?)
        } else {
            None
        };
        let prompts = if variant.use_prompt {
            Some(PromptTable::from_store(store, &ReasoningType::ALL)?)
        } else {
            None
        };
        Ok(Self {
            encoder: Encoder::from_store(store, "encoder", enc_config)?,
            adapter,
            prompts,
            bi_attention: BiAttention::from_store(store, "reader.biattn", enc_config.dim)?,
            heads: Heads::from_store(store, "reader.heads")?,
            variant,
        })
    }

    /// Forward through frozen encoder, optional prompt prepend, optional
    /// lateral column, then the reader. The frozen encoder always runs in
    /// evaluation mode; dropout applies only to trainable parts.
    pub fn forward<F: Scalar, R: Rng>(
        &self,
        store: &ParameterStore<F>,
        input: &InputSequence,
        rtype: ReasoningType,
        train: bool,
        rng: &mut R,
    ) -> Result<(MultiHopForward<F>, MultiHopCache<F>)> {
        let enc_train = train && !self.variant.use_cl;
        let (rep, enc_cache) = self.encoder.forward(store, input, enc_train, rng)?;
        let (rep, prompt_info) = match &self.prompts {
            Some(table) => {
                let p = table.select(rtype)?;
                (prepend(store, p, &rep)?, Some((p.param, p.rows)))
            }
            None => (rep, None),
        };
        let ContextRepresentation { hidden, maps, mask } = rep;
        let (rep_final, adapter_cache) = match &self.adapter {
            Some(adapter) => {
                let m = prompt_info.map(|(_, rows)| rows).unwrap_or(0);
                let (r, c) = adapter.forward(store, &hidden, &enc_cache.block_outputs, m);
                (r, Some(c))
            }
            None => (hidden, None),
        };
        let (updated, bi) = self
            .bi_attention
            .forward(store, &rep_final, maps.question_span)?;
        let (output, heads) = self.heads.forward(store, &updated, &maps.se_positions);
        let mut valid = vec![true; maps.offset];
        valid.extend_from_slice(&mask[maps.offset..]);
        Ok((
            MultiHopForward {
                output,
                maps,
                valid,
            },
            MultiHopCache {
                encoder: enc_cache,
                prompt: prompt_info,
                adapter: adapter_cache,
                bi,
                heads,
            },
        ))
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &mut ParameterStore<F>,
        cache: &MultiHopCache<F>,
        grads: &LossGrads<F>,
    ) {
        let d_rep = self.heads.backward(store, &cache.heads, grads);
        let d_final = self.bi_attention.backward(store, &cache.bi, &d_rep);
        let d_c_prime = match (&self.adapter, &cache.adapter) {
            (Some(adapter), Some(ac)) => adapter.backward(store, ac, &d_final),
            _ => d_final,
        };
        let d_c = match cache.prompt {
            Some((param, rows)) => {
                let d_prompt = d_c_prime.slice(s![0..rows, ..]).to_owned();
                store.add_grad2(param, &d_prompt);
                d_c_prime.slice(s![rows.., ..]).to_owned()
            }
            None => d_c_prime,
        };
        if !self.variant.use_cl {
            self.encoder.backward(store, &cache.encoder, &d_c);
        }
    }
}

/// Copy `reader.*` into frozen `stage1_reader.*` snapshots.
fn snapshot_stage1_reader<F: Scalar>(store: &mut ParameterStore<F>) -> Result<()> {
    let ids = store.select("reader.*");
    if ids.is_empty() {
        return Err(Error::Model("no stage-1 reader arrays to snapshot".into()));
    }
    for id in ids {
        let name = store.param(id).name.clone();
        let value = store.snapshot(id);
        let snap_name = format!("stage1_reader.{}", name.strip_prefix("reader.").expect("prefix"));
        if store.id(&snap_name).is_none() {
            store.insert(&snap_name, value, Partition::Trainable);
        }
    }
    crate::store::freeze(store, "stage1_reader.*")?;
    Ok(())
}

/// The conserved single-hop path of a stage-3 store: frozen encoder plus the
/// frozen stage-1 reader snapshot, bypassing adapter and prompts entirely.
pub fn frozen_path_model<F: Scalar>(
    store: &ParameterStore<F>,
    enc_config: &EncoderConfig,
) -> Result<SingleHopModel> {
    SingleHopModel::from_store(store, enc_config, "stage1_reader")
}

/// Session wrapper enforcing forward-before-backward.
pub struct MultiHopSession<F: Scalar> {
    cache: Option<MultiHopCache<F>>,
}

impl<F: Scalar> Default for MultiHopSession<F> {
    fn default() -> Self {
        Self { cache: None }
    }
}

impl<F: Scalar> MultiHopSession<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<R: Rng>(
        &mut self,
        model: &MultiHopModel,
        store: &ParameterStore<F>,
        input: &InputSequence,
        rtype: ReasoningType,
        train: bool,
        rng: &mut R,
    ) -> Result<MultiHopForward<F>> {
        let (fwd, cache) = model.forward(store, input, rtype, train, rng)?;
        self.cache = Some(cache);
        Ok(fwd)
    }

    pub fn backward(
        &mut self,
        model: &MultiHopModel,
        store: &mut ParameterStore<F>,
        grads: &LossGrads<F>,
    ) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Model("backward without a prior forward pass".into()))?;
        model.backward(store, &cache, grads);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Answer, Paragraph};
    use crate::prompt::GAUSSIAN_STD;
    use crate::reader::{build_gold_labels, joint_loss};
    use crate::tokenizer::{build_input_sequence, Vocab};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::build(["who is a b c d e f"].into_iter())
    }

    fn input(vocab: &Vocab) -> InputSequence {
        let p = Paragraph {
            title: "t".into(),
            sentences: vec!["a b c".into(), "d e f".into()],
        };
        build_input_sequence(vocab, "who is d", &[(0, &p)], 64).unwrap()
    }

    fn enc_config() -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            ffn: 16,
            n_max: 64,
            dropout: 0.0,
        }
    }

    fn prompt_spec() -> PromptSpec {
        PromptSpec {
            rows: 2,
            init: PromptInit::Gaussian { std: GAUSSIAN_STD },
            seed: 5,
        }
    }

    fn stage1_store<F: Scalar>(seed: u64) -> (ParameterStore<F>, SingleHopModel) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SingleHopModel::new(&mut store, &enc_config(), vocab().len(), &mut rng).unwrap();
        (store, model)
    }

    #[test]
    fn expand_allocates_declared_arrays_only() {
        let (mut store, _) = stage1_store::<f32>(0);
        freeze(&mut store, "encoder.*").unwrap();
        let n_before = store.len();
        let n_reader = store.select("reader.*").len();
        let cfg = LateralAdapterConfig::for_encoder(6, &enc_config());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = MultiHopModel::expand(
            &mut store,
            &enc_config(),
            MultiHopVariant::FULL,
            &cfg,
            &prompt_spec(),
            &mut rng,
        )
        .unwrap();
        assert!(model.adapter.is_some());
        // New arrays: stage-1 reader snapshot + (W,U,b) per tapped layer +
        // gate + one prompt per reasoning type.
        let expected = n_reader + LateralAdapter::expected_array_count(&cfg) + 2;
        assert_eq!(store.len(), n_before + expected);
        // 2 tapped layers -> exactly 2 (W,U) pairs.
        assert_eq!(store.select("adapter.*").len(), 3 * 2 + 1);
    }

    #[test]
    fn expanding_unfrozen_model_errors() {
        let (mut store, _) = stage1_store::<f32>(0);
        let cfg = LateralAdapterConfig::for_encoder(6, &enc_config());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = MultiHopModel::expand(
            &mut store,
            &enc_config(),
            MultiHopVariant::FULL,
            &cfg,
            &prompt_spec(),
            &mut rng,
        );
        assert!(err.is_err());
    }

    #[test]
    fn zero_gate_expansion_reproduces_frozen_output() {
        // Without a prompt, the freshly expanded model must produce the exact
        // logits of the stage-1 model (gate is zero-initialized).
        let v = vocab();
        let inp = input(&v);
        let (mut store, stage1) = stage1_store::<f32>(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (base, _) = stage1.forward(&store, &inp, false, &mut rng).unwrap();

        freeze(&mut store, "encoder.*").unwrap();
        let cfg = LateralAdapterConfig::for_encoder(6, &enc_config());
        let model = MultiHopModel::expand(
            &mut store,
            &enc_config(),
            MultiHopVariant::NO_PROMPT,
            &cfg,
            &prompt_spec(),
            &mut rng,
        )
        .unwrap();
        let (fwd, _) = model
            .forward(&store, &inp, ReasoningType::Bridge, false, &mut rng)
            .unwrap();
        assert_eq!(base.start_logits, fwd.output.start_logits);
        assert_eq!(base.end_logits, fwd.output.end_logits);
        assert_eq!(base.se_logits, fwd.output.se_logits);
    }

    #[test]
    fn gradients_flow_to_new_parts_not_frozen_encoder() {
        let v = vocab();
        let inp = input(&v);
        let (mut store, _) = stage1_store::<f64>(4);
        freeze(&mut store, "encoder.*").unwrap();
        let cfg = LateralAdapterConfig::for_encoder(6, &enc_config());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = MultiHopModel::expand(
            &mut store,
            &enc_config(),
            MultiHopVariant::FULL,
            &cfg,
            &prompt_spec(),
            &mut rng,
        )
        .unwrap();
        // Make the gate nonzero so gradients reach the whole column.
        let gate = store.id("adapter.gate").unwrap();
        store.param_mut(gate).value.mapv_inplace(|_| 0.01);

        let (fwd, cache) = model
            .forward(&store, &inp, ReasoningType::Bridge, false, &mut rng)
            .unwrap();
        let gold = build_gold_labels(&v, &inp, &fwd.maps, &Answer::Span("b".into()), &[(0, 0)])
            .unwrap();
        let (_, grads) = joint_loss(&fwd.output, &gold, 2.0, &fwd.valid).unwrap();
        model.backward(&mut store, &cache, &grads);

        let grad_norm = |prefix: &str| -> f64 {
            store
                .select(prefix)
                .into_iter()
                .map(|id| store.param(id).grad.iter().map(|g| g.abs()).sum::<f64>())
                .sum()
        };
        assert!(grad_norm("adapter.*") > 0.0);
        assert!(grad_norm("prompt.*") > 0.0);
        assert!(grad_norm("reader.*") > 0.0);
        assert_eq!(grad_norm("encoder.*"), 0.0);
        assert_eq!(grad_norm("stage1_reader.*"), 0.0);
    }

    #[test]
    fn adapter_and_prompt_gradients_match_finite_differences() {
        let v = vocab();
        let inp = input(&v);
        let (mut store, _) = stage1_store::<f64>(6);
        freeze(&mut store, "encoder.*").unwrap();
        let cfg = LateralAdapterConfig {
            width: 5,
            tapped: vec![0, 1],
            activation: Activation::Tanh,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = MultiHopModel::expand(
            &mut store,
            &enc_config(),
            MultiHopVariant::FULL,
            &cfg,
            &prompt_spec(),
            &mut rng,
        )
        .unwrap();
        let gate = store.id("adapter.gate").unwrap();
        let mut g = ChaCha8Rng::seed_from_u64(8);
        store
            .param_mut(gate)
            .value
            .mapv_inplace(|_| (g.random::<f64>() - 0.5) * 0.1);

        let (fwd, cache) = model
            .forward(&store, &inp, ReasoningType::Comparison, false, &mut rng)
            .unwrap();
        let gold = build_gold_labels(&v, &inp, &fwd.maps, &Answer::Yes, &[(0, 1)]).unwrap();
        let (_, grads) = joint_loss(&fwd.output, &gold, 2.0, &fwd.valid).unwrap();
        model.backward(&mut store, &cache, &grads);

        let ids: Vec<_> = store
            .params()
            .filter(|(_, p)| p.partition != Partition::Frozen)
            .map(|(id, _)| id)
            .collect();
        let inp2 = inp.clone();
        let report = crate::gradcheck::check_gradients(&mut store, &ids, 1e-5, 10, 3, move |s| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let (fwd, _) = model
                .forward(s, &inp2, ReasoningType::Comparison, false, &mut r)
                .unwrap();
            let (parts, _) = joint_loss(&fwd.output, &gold, 2.0, &fwd.valid).unwrap();
            parts.total.to_f64()
        });
        assert!(
            report.ok(1e-4),
            "worst {}: {}",
            report.worst_param,
            report.max_rel_err
        );
    }

    #[test]
    fn verify_reports_ok_then_names_perturbed_array() {
        let (mut store, _) = stage1_store::<f32>(10);
        freeze(&mut store, "encoder.*").unwrap();
        let report = verify_conservation(&store).unwrap();
        assert!(report.ok);
        assert!(report.n_frozen > 0);

        let id = store.id("encoder.tok_emb").unwrap();
        store.param_mut(id).value[[0, 0]] += 1e-7;
        let report = verify_conservation(&store).unwrap();
        assert!(!report.ok);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].name, "encoder.tok_emb");
    }

    #[test]
    fn verify_without_frozen_arrays_errors() {
        let (store, _) = stage1_store::<f32>(11);
        assert!(verify_conservation(&store).is_err());
    }

    #[test]
    fn frozen_path_is_bit_identical_after_new_parts_move() {
        // Simulate stage-3 training by perturbing every trainable/prompt
        // array, then check the conserved path still reproduces stage-1
        // logits exactly.
        let v = vocab();
        let inp = input(&v);
        let (mut store, stage1) = stage1_store::<f32>(12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (base, _) = stage1.forward(&store, &inp, false, &mut rng).unwrap();

        freeze(&mut store, "encoder.*").unwrap();
        let cfg = LateralAdapterConfig::for_encoder(6, &enc_config());
        let _model = MultiHopModel::expand(
            &mut store,
            &enc_config(),
            MultiHopVariant::FULL,
            &cfg,
            &prompt_spec(),
            &mut rng,
        )
        .unwrap();
        for (_, p) in store.params_mut() {
            if p.partition != Partition::Frozen {
                p.value.mapv_inplace(|x| x + 0.05);
            }
        }

        let frozen = frozen_path_model(&store, &enc_config()).unwrap();
        let (after, _) = frozen.forward(&store, &inp, false, &mut rng).unwrap();
        assert_eq!(base.start_logits, after.start_logits);
        assert_eq!(base.end_logits, after.end_logits);
        assert_eq!(base.se_logits, after.se_logits);
        assert!(verify_conservation(&store).unwrap().ok);
    }

    #[test]
    fn no_cl_variant_trains_encoder() {
        let v = vocab();
        let inp = input(&v);
        let (mut store, _) = stage1_store::<f64>(13);
        let cfg = LateralAdapterConfig::for_encoder(6, &enc_config());
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let model = MultiHopModel::expand(
            &mut store,
            &enc_config(),
            MultiHopVariant::NO_CL,
            &cfg,
            &prompt_spec(),
            &mut rng,
        )
        .unwrap();
        assert!(model.adapter.is_none());
        let (fwd, cache) = model
            .forward(&store, &inp, ReasoningType::Bridge, false, &mut rng)
            .unwrap();
        let gold = build_gold_labels(&v, &inp, &fwd.maps, &Answer::Span("b".into()), &[(0, 0)])
            .unwrap();
        let (_, grads) = joint_loss(&fwd.output, &gold, 2.0, &fwd.valid).unwrap();
        model.backward(&mut store, &cache, &grads);
        let enc_grad: f64 = store
            .select("encoder.*")
            .into_iter()
            .map(|id| store.param(id).grad.iter().map(|g| g.abs()).sum::<f64>())
            .sum();
        assert!(enc_grad > 0.0);
    }

    #[test]
    fn session_backward_without_forward_errors() {
        let (mut store, _) = stage1_store::<f32>(15);
        freeze(&mut store, "encoder.*").unwrap();
        let cfg = LateralAdapterConfig::for_encoder(4, &enc_config());
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let model = MultiHopModel::expand(
            &mut store,
            &enc_config(),
            MultiHopVariant::NO_PROMPT,
            &cfg,
            &prompt_spec(),
            &mut rng,
        )
        .unwrap();
        let mut session = MultiHopSession::<f32>::new();
        let grads = LossGrads {
            d_start: ndarray::Array1::zeros(4),
            d_end: ndarray::Array1::zeros(4),
            d_se: ndarray::Array1::zeros(1),
        };
        assert!(session.backward(&model, &mut store, &grads).is_err());
    }
}
