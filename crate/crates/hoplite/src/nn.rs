//! Layer primitives with explicit forward/backward passes.
//!
//! Layers hold [`ParamId`] handles into a [`ParameterStore`]; forward passes
//! return a cache of the activations backward needs. Gradients accumulate
//! into the store so batches can sum over examples before an optimizer step.

use crate::scalar::Scalar;
use crate::store::{ParamId, ParameterStore, Partition};
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

/// Additive mask value for disallowed attention targets. Large enough that
/// exp underflows to zero after max subtraction.
pub const NEG_INF: f64 = -1e9;

pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64(0.797_884_560_802_865_4);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Row-wise stable softmax, in place.
pub fn softmax_rows<F: Scalar>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Gradient through a row-wise softmax: `dx = p * (dp - rowsum(dp * p))`.
pub fn softmax_rows_backward<F: Scalar>(probs: &Array2<F>, d_probs: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((mut o, p), dp) in out
        .rows_mut()
        .into_iter()
        .zip(probs.rows())
        .zip(d_probs.rows())
    {
        let dot = p
            .iter()
            .zip(dp.iter())
            .fold(F::zero(), |acc, (&pi, &di)| acc + pi * di);
        for ((oi, &pi), &di) in o.iter_mut().zip(p.iter()).zip(dp.iter()) {
            *oi = pi * (di - dot);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// `y = x @ w + b` with `w: (in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

pub struct LinearCache<F: Scalar> {
    x: Array2<F>,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        prefix: &str,
        dims: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let w = store.init_normal2(&format!("{prefix}.w"), dims, 0.02, rng);
        let b = store.init_zeros1(&format!("{prefix}.b"), dims.1);
        Self { w, b }
    }

    /// Readout layers (loss heads) use 1/sqrt(fan_in) init; the small
    /// in-stream init would scale every upstream gradient down with it and
    /// stall early training of the models trained from scratch here.
    pub fn new_readout<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        prefix: &str,
        dims: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (dims.0 as f64).sqrt();
        let w = store.init_normal2(&format!("{prefix}.w"), dims, std, rng);
        let b = store.init_zeros1(&format!("{prefix}.b"), dims.1);
        Self { w, b }
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParameterStore<F>,
        x: &Array2<F>,
    ) -> (Array2<F>, LinearCache<F>) {
        let y = x.dot(&store.get2(self.w)) + &store.get1(self.b);
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &mut ParameterStore<F>,
        cache: &LinearCache<F>,
        d_out: &Array2<F>,
    ) -> Array2<F> {
        let dw = cache.x.t().dot(d_out);
        let db = d_out.sum_axis(Axis(0));
        let dx = d_out.dot(&store.get2(self.w).t());
        store.add_grad2(self.w, &dw);
        store.add_grad1(self.b, &db);
        dx
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

pub struct LayerNormCache<F: Scalar> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParameterStore<F>, prefix: &str, dim: usize) -> Self {
        let gamma = store.init_ones1(&format!("{prefix}.gamma"), dim);
        let beta = store.init_zeros1(&format!("{prefix}.beta"), dim);
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParameterStore<F>,
        x: &Array2<F>,
    ) -> (Array2<F>, LayerNormCache<F>) {
        let d = F::from_f64(x.ncols() as f64);
        let eps = F::from_f64(self.eps);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) / d;
            let var = row
                .iter()
                .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
                / d;
            let istd = F::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * istd;
            }
            *inv = istd;
        }
        let gamma = store.get1(self.gamma);
        let beta = store.get1(self.beta);
        let y = &xhat * &gamma + &beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &mut ParameterStore<F>,
        cache: &LayerNormCache<F>,
        d_out: &Array2<F>,
    ) -> Array2<F> {
        let d = F::from_f64(d_out.ncols() as f64);
        let d_gamma = (d_out * &cache.xhat).sum_axis(Axis(0));
        let d_beta = d_out.sum_axis(Axis(0));
        let d_xhat = d_out * &store.get1(self.gamma);

        let mut dx = Array2::zeros(d_out.raw_dim());
        for ((mut dxr, dxh), (xh, &istd)) in dx
            .rows_mut()
            .into_iter()
            .zip(d_xhat.rows())
            .zip(cache.xhat.rows().into_iter().zip(cache.inv_std.iter()))
        {
            let mean_dxh = dxh.iter().fold(F::zero(), |a, &v| a + v) / d;
            let mean_dxh_xh = dxh
                .iter()
                .zip(xh.iter())
                .fold(F::zero(), |a, (&g, &h)| a + g * h)
                / d;
            for ((o, &g), &h) in dxr.iter_mut().zip(dxh.iter()).zip(xh.iter()) {
                *o = istd * (g - mean_dxh - h * mean_dxh_xh);
            }
        }
        store.add_grad1(self.gamma, &d_gamma);
        store.add_grad1(self.beta, &d_beta);
        dx
    }
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

pub struct AttentionCache<F: Scalar> {
    q_cache: LinearCache<F>,
    k_cache: LinearCache<F>,
    v_cache: LinearCache<F>,
    o_cache: LinearCache<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Per-head post-softmax attention probabilities.
    probs: Vec<Array2<F>>,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(dim % heads == 0, "model dim must be divisible by heads");
        let wq = Linear::new(store, &format!("{prefix}.wq"), (dim, dim), rng);
        // Matched query/key init: with tied token embeddings this seeds
        // same-token attention at step 0, which the matching-style heads
        // these models rely on would otherwise take many steps to form.
        let wk_value = store.get2(wq.w).to_owned();
        let wk = Linear {
            w: store.insert2(&format!("{prefix}.wk.w"), wk_value, Partition::Trainable),
            b: store.init_zeros1(&format!("{prefix}.wk.b"), dim),
        };
        Self {
            wq,
            wk,
            wv: Linear::new(store, &format!("{prefix}.wv"), (dim, dim), rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), (dim, dim), rng),
            heads,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParameterStore<F>,
        x: &Array2<F>,
        mask: &[bool],
    ) -> (Array2<F>, AttentionCache<F>) {
        let (n, d) = (x.nrows(), x.ncols());
        let dh = d / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let neg = F::from_f64(NEG_INF);

        let (q, q_cache) = self.wq.forward(store, x);
        let (k, k_cache) = self.wk.forward(store, x);
        let (v, v_cache) = self.wv.forward(store, x);

        let mut concat = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t()) * scale;
            for (j, &keep) in mask.iter().enumerate() {
                if !keep {
                    scores.column_mut(j).fill(neg);
                }
            }
            softmax_rows(&mut scores);
            let oh = scores.dot(&vh);
            concat.slice_mut(cols).assign(&oh);
            probs.push(scores);
        }

        let (out, o_cache) = self.wo.forward(store, &concat);
        (
            out,
            AttentionCache {
                q_cache,
                k_cache,
                v_cache,
                o_cache,
                q,
                k,
                v,
                probs,
            },
        )
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &mut ParameterStore<F>,
        cache: &AttentionCache<F>,
        d_out: &Array2<F>,
    ) -> Array2<F> {
        let (n, d) = (cache.q.nrows(), cache.q.ncols());
        let dh = d / self.heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());

        let d_concat = self.wo.backward(store, &cache.o_cache, d_out);

        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_oh = d_concat.slice(cols);
            let probs = &cache.probs[h];
            let vh = cache.v.slice(cols);
            let d_probs = d_oh.dot(&vh.t());
            let d_vh = probs.t().dot(&d_oh);
            let d_scores = softmax_rows_backward(probs, &d_probs) * scale;
            let qh = cache.q.slice(cols);
            let kh = cache.k.slice(cols);
            let d_qh = d_scores.dot(&kh);
            let d_kh = d_scores.t().dot(&qh);
            dq.slice_mut(cols).assign(&d_qh);
            dk.slice_mut(cols).assign(&d_kh);
            dv.slice_mut(cols).assign(&d_vh);
        }

        let mut dx = self.wq.backward(store, &cache.q_cache, &dq);
        dx += &self.wk.backward(store, &cache.k_cache, &dk);
        dx += &self.wv.backward(store, &cache.v_cache, &dv);
        dx
    }
}

// ---------------------------------------------------------------------------
// Feed-forward (GELU)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

pub struct FeedForwardCache<F: Scalar> {
    c1: LinearCache<F>,
    z1: Array2<F>,
    c2: LinearCache<F>,
}

impl FeedForward {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParameterStore<F>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w1: Linear::new(store, &format!("{prefix}.w1"), (dim, hidden), rng),
            w2: Linear::new(store, &format!("{prefix}.w2"), (hidden, dim), rng),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParameterStore<F>,
        x: &Array2<F>,
    ) -> (Array2<F>, FeedForwardCache<F>) {
        let (z1, c1) = self.w1.forward(store, x);
        let h = z1.mapv(gelu);
        let (y, c2) = self.w2.forward(store, &h);
        (y, FeedForwardCache { c1, z1, c2 })
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &mut ParameterStore<F>,
        cache: &FeedForwardCache<F>,
        d_out: &Array2<F>,
    ) -> Array2<F> {
        let dh = self.w2.backward(store, &cache.c2, d_out);
        let dz1 = dh * cache.z1.mapv(gelu_grad);
        self.w1.backward(store, &cache.c1, &dz1)
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout. Returns the output and the mask to reuse in backward;
/// `None` means identity (eval mode or rate 0).
pub fn dropout_forward<F: Scalar, R: Rng>(
    x: &Array2<F>,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> (Array2<F>, Option<Array2<F>>) {
    if !train || rate <= 0.0 {
        return (x.clone(), None);
    }
    let keep = F::from_f64(1.0 / (1.0 - rate));
    let mask = Array2::from_shape_fn(x.raw_dim(), |_| {
        if rng.random::<f64>() < rate {
            F::zero()
        } else {
            keep
        }
    });
    (x * &mask, Some(mask))
}

pub fn dropout_backward<F: Scalar>(d_out: &Array2<F>, mask: &Option<Array2<F>>) -> Array2<F> {
    match mask {
        Some(m) => d_out * m,
        None => d_out.clone(),
    }
}
