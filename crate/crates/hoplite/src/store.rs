//! Named parameter arrays with partition labels and byte-level checksums.
//!
//! Every learnable array lives in a [`ParameterStore`] under a dotted name
//! (`encoder.block0.attn.wq`, `prompt.bridge`, ...). Arrays carry a
//! [`Partition`] label; the optimizer updates only `Trainable` and `Prompt`
//! arrays, and frozen arrays keep a checksum recorded at freeze time so any
//! later mutation is detectable bit-for-bit.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Ix1, Ix2};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt::Write as _;

/// Handle to one array in a store. Cheap to copy; only valid for the store
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Trainable,
    Frozen,
    Prompt,
}

#[derive(Debug, Clone)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub partition: Partition,
    /// Checksum of `value` recorded when the array was frozen.
    pub frozen_checksum: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore<F: Scalar> {
    params: Vec<Param<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<F>, partition: Partition) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let grad = ArrayD::zeros(value.raw_dim());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            partition,
            frozen_checksum: None,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn insert2(&mut self, name: &str, value: Array2<F>, partition: Partition) -> ParamId {
        self.insert(name, value.into_dyn(), partition)
    }

    pub fn insert1(&mut self, name: &str, value: Array1<F>, partition: Partition) -> ParamId {
        self.insert(name, value.into_dyn(), partition)
    }

    /// Gaussian-initialized matrix, `Trainable`.
    pub fn init_normal2<R: Rng>(
        &mut self,
        name: &str,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Array2::from_shape_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            F::from_f64(z * std)
        });
        self.insert2(name, value, Partition::Trainable)
    }

    pub fn init_zeros2(&mut self, name: &str, shape: (usize, usize)) -> ParamId {
        self.insert2(name, Array2::zeros(shape), Partition::Trainable)
    }

    pub fn init_zeros1(&mut self, name: &str, len: usize) -> ParamId {
        self.insert1(name, Array1::zeros(len), Partition::Trainable)
    }

    pub fn init_ones1(&mut self, name: &str, len: usize) -> ParamId {
        self.insert1(name, Array1::ones(len), Partition::Trainable)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<F>)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn get2(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.params[id.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("rank-2 parameter")
    }

    pub fn get1(&self, id: ParamId) -> ArrayView1<'_, F> {
        self.params[id.0]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("rank-1 parameter")
    }

    pub fn add_grad2(&mut self, id: ParamId, delta: &Array2<F>) {
        let mut g = self.params[id.0]
            .grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("rank-2 gradient");
        g += delta;
    }

    pub fn add_grad1(&mut self, id: ParamId, delta: &Array1<F>) {
        let mut g = self.params[id.0]
            .grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("rank-1 gradient");
        g += delta;
    }

    pub fn grad2(&self, id: ParamId) -> ArrayView2<'_, F> {
        self.params[id.0]
            .grad
            .view()
            .into_dimensionality::<Ix2>()
            .expect("rank-2 gradient")
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Scale all gradients, e.g. to average over a batch.
    pub fn scale_grads(&mut self, factor: F) {
        for p in &mut self.params {
            p.grad.mapv_inplace(|g| g * factor);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params
            .iter()
            .filter(|p| p.partition != Partition::Frozen)
            .all(|p| p.grad.iter().all(|g| g.is_finite()))
    }

    /// Names matching a selector: `"prefix.*"` matches `prefix.`-dotted names,
    /// anything else must match exactly.
    pub fn select(&self, selector: &str) -> Vec<ParamId> {
        match selector.strip_suffix(".*") {
            Some(prefix) => {
                let dotted = format!("{prefix}.");
                self.params()
                    .filter(|(_, p)| p.name.starts_with(&dotted))
                    .map(|(id, _)| id)
                    .collect()
            }
            None => self.id(selector).into_iter().collect(),
        }
    }

    /// Checksum of one array's raw little-endian byte representation.
    pub fn checksum(&self, id: ParamId) -> String {
        checksum_array(&self.params[id.0].value)
    }

    /// Copy an array's contents out of the store.
    pub fn snapshot(&self, id: ParamId) -> ArrayD<F> {
        self.params[id.0].value.clone()
    }

    /// Total number of scalar entries across all arrays.
    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

pub fn checksum_array<F: Scalar>(value: &ArrayD<F>) -> String {
    let mut bytes = Vec::with_capacity(value.len() * F::BYTES);
    for &v in value.as_standard_layout().iter() {
        v.write_le(&mut bytes);
    }
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

/// Relabel matching arrays as frozen and record their checksums.
///
/// Errors if the selector matches nothing. Idempotent: re-freezing an already
/// frozen array re-records the same checksum.
pub fn freeze<F: Scalar>(store: &mut ParameterStore<F>, selector: &str) -> Result<Vec<String>> {
    let ids = store.select(selector);
    if ids.is_empty() {
        return Err(Error::Model(format!(
            "freeze selector {selector:?} matched no arrays"
        )));
    }
    let mut names = Vec::with_capacity(ids.len());
    for id in ids {
        let sum = store.checksum(id);
        let p = store.param_mut(id);
        p.partition = Partition::Frozen;
        p.frozen_checksum = Some(sum);
        names.push(p.name.clone());
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn select_prefix_and_exact() {
        let mut store = ParameterStore::<f32>::new();
        store.init_zeros1("encoder.tok", 4);
        store.init_zeros1("encoder.pos", 4);
        store.init_zeros1("reader.start", 4);
        assert_eq!(store.select("encoder.*").len(), 2);
        assert_eq!(store.select("reader.start").len(), 1);
        assert_eq!(store.select("nothing.*").len(), 0);
    }

    #[test]
    fn freeze_records_checksums_and_is_idempotent() {
        let mut store = ParameterStore::<f32>::new();
        store.insert1("encoder.w", array![1.0f32, 2.0], Partition::Trainable);
        store.init_zeros1("reader.w", 2);
        let frozen = freeze(&mut store, "encoder.*").unwrap();
        assert_eq!(frozen, vec!["encoder.w".to_string()]);
        let id = store.id("encoder.w").unwrap();
        let first = store.param(id).frozen_checksum.clone().unwrap();
        freeze(&mut store, "encoder.*").unwrap();
        assert_eq!(store.param(id).frozen_checksum.as_deref(), Some(&first[..]));
        assert_eq!(store.param(id).partition, Partition::Frozen);
        let reader = store.id("reader.w").unwrap();
        assert_eq!(store.param(reader).partition, Partition::Trainable);
    }

    #[test]
    fn freeze_empty_selector_errors() {
        let mut store = ParameterStore::<f32>::new();
        store.init_zeros1("a", 1);
        assert!(freeze(&mut store, "b.*").is_err());
    }

    #[test]
    fn checksum_changes_with_content() {
        let mut store = ParameterStore::<f32>::new();
        let id = store.insert1("w", array![1.0f32, 2.0], Partition::Trainable);
        let before = store.checksum(id);
        store.param_mut(id).value[[0]] = 1.0000001;
        assert_ne!(before, store.checksum(id));
    }
}
