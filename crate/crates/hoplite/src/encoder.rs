//! Miniature trainable transformer encoder.
//!
//! Learned token + absolute positional embeddings feed a stack of pre-norm
//! blocks (self-attention, then feed-forward) with a final layer norm. The
//! per-block hidden states are kept in the forward cache because the
//! conservation column taps them laterally.

use crate::error::{Error, Result};
use crate::nn::{
    dropout_backward, dropout_forward, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache,
    MultiHeadAttention, AttentionCache,
};
use crate::scalar::Scalar;
use crate::store::{ParamId, ParameterStore, Partition};
use crate::tokenizer::{InputSequence, SequenceMaps};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn: usize,
    pub n_max: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            dim: 128,
            ffn: 256,
            n_max: 256,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.layers == 0 || self.ffn == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Contextual token states plus the index maps carried from the input.
#[derive(Debug, Clone)]
pub struct ContextRepresentation<F: Scalar> {
    pub hidden: Array2<F>,
    pub maps: SequenceMaps,
    /// Per-row attention mask aligned with `hidden` (prompt rows are valid).
    pub mask: Vec<bool>,
}

struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

pub struct BlockCache<F: Scalar> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    drop1: Option<Array2<F>>,
    ln2: LayerNormCache<F>,
    ffn: FeedForwardCache<F>,
    drop2: Option<Array2<F>>,
}

pub struct EncoderCache<F: Scalar> {
    ids: Vec<usize>,
    segments: Vec<usize>,
    emb_drop: Option<Array2<F>>,
    blocks: Vec<BlockCache<F>>,
    lnf: LayerNormCache<F>,
    /// Hidden state after each block, before the final layer norm.
    pub block_outputs: Vec<Array2<F>>,
}

pub struct Encoder {
    pub config: EncoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub seg_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    vocab_size: usize,
}

impl Encoder {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        prefix: &str,
        config: &EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let tok_emb =
            store.init_normal2(&format!("{prefix}.tok_emb"), (vocab_size, config.dim), 0.02, rng);
        let pos_emb =
            store.init_normal2(&format!("{prefix}.pos_emb"), (config.n_max, config.dim), 0.02, rng);
        let seg_emb = store.init_normal2(&format!("{prefix}.seg_emb"), (2, config.dim), 0.02, rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for layer in 0..config.layers {
            let p = format!("{prefix}.block{layer}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), config.dim),
                attn: MultiHeadAttention::new(
                    store,
                    &format!("{p}.attn"),
                    config.dim,
                    config.heads,
                    rng,
                ),
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), config.dim),
                ffn: FeedForward::new(store, &format!("{p}.ffn"), config.dim, config.ffn, rng),
            });
        }
        let ln_f = LayerNorm::new(store, &format!("{prefix}.ln_f"), config.dim);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            seg_emb,
            blocks,
            ln_f,
            vocab_size,
        })
    }

    /// Rebuild the layer wiring against a store that already holds the
    /// parameter arrays (checkpoint load).
    pub fn from_store<F: Scalar>(
        store: &ParameterStore<F>,
        prefix: &str,
        config: &EncoderConfig,
    ) -> Result<Self> {
        config.validate()?;
        let need = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
        };
        let tok_emb = need(format!("{prefix}.tok_emb"))?;
        let pos_emb = need(format!("{prefix}.pos_emb"))?;
        let seg_emb = need(format!("{prefix}.seg_emb"))?;
        let vocab_size = store.get2(tok_emb).nrows();
        let mut blocks = Vec::with_capacity(config.layers);
        for layer in 0..config.layers {
            let p = format!("{prefix}.block{layer}");
            blocks.push(Block {
                ln1: LayerNorm {
                    gamma: need(format!("{p}.ln1.gamma"))?,
                    beta: need(format!("{p}.ln1.beta"))?,
                    eps: 1e-5,
                },
                attn: MultiHeadAttention {
                    wq: linear_from(store, &format!("{p}.attn.wq"))?,
                    wk: linear_from(store, &format!("{p}.attn.wk"))?,
                    wv: linear_from(store, &format!("{p}.attn.wv"))?,
                    wo: linear_from(store, &format!("{p}.attn.wo"))?,
                    heads: config.heads,
                },
                ln2: LayerNorm {
                    gamma: need(format!("{p}.ln2.gamma"))?,
                    beta: need(format!("{p}.ln2.beta"))?,
                    eps: 1e-5,
                },
                ffn: FeedForward {
                    w1: linear_from(store, &format!("{p}.ffn.w1"))?,
                    w2: linear_from(store, &format!("{p}.ffn.w2"))?,
                },
            });
        }
        let ln_f = LayerNorm {
            gamma: need(format!("{prefix}.ln_f.gamma"))?,
            beta: need(format!("{prefix}.ln_f.beta"))?,
            eps: 1e-5,
        };
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            seg_emb,
            blocks,
            ln_f,
            vocab_size,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Encode an input sequence into the context representation.
    pub fn forward<F: Scalar, R: Rng>(
        &self,
        store: &ParameterStore<F>,
        input: &InputSequence,
        train: bool,
        rng: &mut R,
    ) -> Result<(ContextRepresentation<F>, EncoderCache<F>)> {
        let n = input.ids.len();
        if n == 0 {
            return Err(Error::Model("empty input sequence".into()));
        }
        if n > self.config.n_max {
            return Err(Error::Model(format!(
                "sequence length {n} exceeds n_max {}",
                self.config.n_max
            )));
        }
        for &id in &input.ids {
            if id >= self.vocab_size {
                return Err(Error::Model(format!(
                    "token id {id} out of range (vocab size {})",
                    self.vocab_size
                )));
            }
        }

        let tok = store.get2(self.tok_emb);
        let pos = store.get2(self.pos_emb);
        let seg = store.get2(self.seg_emb);
        let mut x = Array2::zeros((n, self.config.dim));
        for (i, &id) in input.ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&tok.row(id));
            row += &pos.row(i);
            row += &seg.row(input.segments[i].min(1));
        }
        let (mut x, emb_drop) = dropout_forward(&x, self.config.dropout, train, rng);

        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (x1, ln1) = block.ln1.forward(store, &x);
            let (a, attn) = block.attn.forward(store, &x1, &input.mask);
            let (a, drop1) = dropout_forward(&a, self.config.dropout, train, rng);
            let x2 = &x + &a;
            let (x3, ln2) = block.ln2.forward(store, &x2);
            let (f, ffn) = block.ffn.forward(store, &x3);
            let (f, drop2) = dropout_forward(&f, self.config.dropout, train, rng);
            x = &x2 + &f;
            block_outputs.push(x.clone());
            blocks.push(BlockCache {
                ln1,
                attn,
                drop1,
                ln2,
                ffn,
                drop2,
            });
        }

        let (hidden, lnf) = self.ln_f.forward(store, &x);
        Ok((
            ContextRepresentation {
                hidden,
                maps: input.maps.clone(),
                mask: input.mask.clone(),
            },
            EncoderCache {
                ids: input.ids.clone(),
                segments: input.segments.clone(),
                emb_drop,
                blocks,
                lnf,
                block_outputs,
            },
        ))
    }

    /// Accumulate gradients for a cached forward pass.
    pub fn backward<F: Scalar>(
        &self,
        store: &mut ParameterStore<F>,
        cache: &EncoderCache<F>,
        d_hidden: &Array2<F>,
    ) {
        let mut dx = self.ln_f.backward(store, &cache.lnf, d_hidden);
        for (block, bc) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            // y = x2 + drop(ffn(ln2(x2)))
            let df = dropout_backward(&dx, &bc.drop2);
            let dx3 = block.ffn.backward(store, &bc.ffn, &df);
            let mut dx2 = block.ln2.backward(store, &bc.ln2, &dx3);
            dx2 += &dx;
            // x2 = x + drop(attn(ln1(x)))
            let da = dropout_backward(&dx2, &bc.drop1);
            let dx1 = block.attn.backward(store, &bc.attn, &da);
            let mut dprev = block.ln1.backward(store, &bc.ln1, &dx1);
            dprev += &dx2;
            dx = dprev;
        }
        let d_emb = dropout_backward(&dx, &cache.emb_drop);

        let mut d_tok = Array2::<F>::zeros(store.get2(self.tok_emb).raw_dim());
        let mut d_pos = Array2::<F>::zeros(store.get2(self.pos_emb).raw_dim());
        let mut d_seg = Array2::<F>::zeros(store.get2(self.seg_emb).raw_dim());
        for (i, &id) in cache.ids.iter().enumerate() {
            let mut trow = d_tok.row_mut(id);
            trow += &d_emb.row(i);
            let mut prow = d_pos.row_mut(i);
            prow += &d_emb.row(i);
            let mut srow = d_seg.row_mut(cache.segments[i].min(1));
            srow += &d_emb.row(i);
        }
        store.add_grad2(self.tok_emb, &d_tok);
        store.add_grad2(self.pos_emb, &d_pos);
        store.add_grad2(self.seg_emb, &d_seg);
    }
}

fn linear_from<F: Scalar>(store: &ParameterStore<F>, prefix: &str) -> Result<crate::nn::Linear> {
    let need = |name: String| {
        store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    };
    Ok(crate::nn::Linear {
        w: need(format!("{prefix}.w"))?,
        b: need(format!("{prefix}.b"))?,
    })
}

/// Fresh store + encoder in one call (classifier and retriever use this).
pub fn build_encoder<F: Scalar, R: Rng>(
    config: &EncoderConfig,
    vocab_size: usize,
    prefix: &str,
    rng: &mut R,
) -> Result<(ParameterStore<F>, Encoder)> {
    let mut store = ParameterStore::new();
    let encoder = Encoder::new(&mut store, prefix, config, vocab_size, rng)?;
    Ok((store, encoder))
}

/// Pooled scoring head over the [CLS] row, used by the classifier and the
/// retriever.
pub struct PooledHead {
    pub proj: crate::nn::Linear,
}

pub struct PooledHeadCache<F: Scalar> {
    cache: crate::nn::LinearCache<F>,
    n_rows: usize,
}

impl PooledHead {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        prefix: &str,
        dim: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: crate::nn::Linear::new_readout(store, prefix, (dim, outputs), rng),
        }
    }

    pub fn from_store<F: Scalar>(store: &ParameterStore<F>, prefix: &str) -> Result<Self> {
        Ok(Self {
            proj: linear_from(store, prefix)?,
        })
    }

    /// Scores from the first (CLS) row of the representation.
    pub fn forward<F: Scalar>(
        &self,
        store: &ParameterStore<F>,
        rep: &Array2<F>,
    ) -> (ndarray::Array1<F>, PooledHeadCache<F>) {
        let cls = rep.row(0).insert_axis(ndarray::Axis(0)).to_owned();
        let (scores, cache) = self.proj.forward(store, &cls);
        (
            scores.row(0).to_owned(),
            PooledHeadCache {
                cache,
                n_rows: rep.nrows(),
            },
        )
    }

    /// Returns the gradient w.r.t. the full representation (zero outside the
    /// CLS row).
    pub fn backward<F: Scalar>(
        &self,
        store: &mut ParameterStore<F>,
        cache: &PooledHeadCache<F>,
        d_scores: &ndarray::Array1<F>,
    ) -> Array2<F> {
        let d_out = d_scores.clone().insert_axis(ndarray::Axis(0));
        let d_cls = self.proj.backward(store, &cache.cache, &d_out);
        let mut d_rep = Array2::zeros((cache.n_rows, d_cls.ncols()));
        d_rep.row_mut(0).assign(&d_cls.row(0));
        d_rep
    }
}

/// Plain input sequence over raw ids (no maps), for pair scoring models.
pub fn ids_to_input(ids: Vec<usize>, segments: Vec<usize>) -> InputSequence {
    let n = ids.len();
    InputSequence {
        segments,
        mask: vec![true; n],
        maps: SequenceMaps {
            offset: 0,
            n_rows: n,
            question_span: (0, n.max(1)),
            yes_position: 0,
            no_position: 0,
            se_positions: Vec::new(),
            se_sentence: Vec::new(),
            sentence_ranges: Vec::new(),
        },
        ids,
        truncated: false,
    }
}

/// Mark every parameter in the store as prompt/trainable/frozen counts.
pub fn partition_counts<F: Scalar>(store: &ParameterStore<F>) -> (usize, usize, usize) {
    let mut counts = (0, 0, 0);
    for (_, p) in store.params() {
        match p.partition {
            Partition::Trainable => counts.0 += 1,
            Partition::Frozen => counts.1 += 1,
            Partition::Prompt => counts.2 += 1,
        }
    }
    counts
}
