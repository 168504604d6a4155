//! Per-reasoning-type soft prompts.
//!
//! A soft prompt is a trainable m x d matrix keyed by reasoning type. At
//! stage 3 the prompt selected for the question's type is prepended onto the
//! frozen context representation; prompt rows live in the `Prompt` partition
//! so the optimizer trains them while the encoder stays frozen.

use crate::corpus::ReasoningType;
use crate::encoder::ContextRepresentation;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::{ParamId, ParameterStore, Partition};
use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

pub const DEFAULT_PROMPT_LEN: usize = 2;
pub const GAUSSIAN_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct SoftPrompt {
    pub rtype: ReasoningType,
    pub param: ParamId,
    pub rows: usize,
}

/// Exactly one prompt per registered reasoning type.
pub struct PromptTable {
    prompts: Vec<SoftPrompt>,
    pub rows: usize,
    pub dim: usize,
}

/// Prompt initialization scheme.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptInit {
    /// Zero-mean Gaussian entries.
    Gaussian { std: f64 },
    /// Every prompt row copies the token embedding of the type's word
    /// ("bridge" / "comparison"). Rows are supplied by the caller.
    FromTypeWord(Vec<Array1<f64>>),
}

pub fn init_prompts<F: Scalar>(
    store: &mut ParameterStore<F>,
    types: &[ReasoningType],
    rows: usize,
    dim: usize,
    init: &PromptInit,
    seed: u64,
) -> Result<PromptTable> {
    if rows == 0 || dim == 0 {
        return Err(Error::Model("prompt length and dim must be >= 1".into()));
    }
    let mut seen = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompts = Vec::with_capacity(types.len());
    for (k, &rtype) in types.iter().enumerate() {
        if seen.contains(&rtype) {
            return Err(Error::Model(format!(
                "duplicate reasoning type {}",
                rtype.as_str()
            )));
        }
        seen.push(rtype);
        let value = match init {
            PromptInit::Gaussian { std } => {
                let normal = rand_distr::Normal::new(0.0, *std).expect("valid std");
                Array2::from_shape_fn((rows, dim), |_| F::from_f64(normal.sample(&mut rng)))
            }
            PromptInit::FromTypeWord(word_rows) => {
                let row = word_rows.get(k).ok_or_else(|| {
                    Error::Model("missing type-word embedding row for prompt init".into())
                })?;
                if row.len() != dim {
                    return Err(Error::Model("type-word embedding dim mismatch".into()));
                }
                Array2::from_shape_fn((rows, dim), |(_, j)| F::from_f64(row[j]))
            }
        };
        let param = store.insert2(
            &format!("prompt.{}", rtype.as_str()),
            value,
            Partition::Prompt,
        );
        prompts.push(SoftPrompt { rtype, param, rows });
    }
    Ok(PromptTable { prompts, rows, dim })
}

impl PromptTable {
    /// Rebuild the table against a store holding `prompt.*` arrays.
    pub fn from_store<F: Scalar>(
        store: &ParameterStore<F>,
        types: &[ReasoningType],
    ) -> Result<Self> {
        let mut prompts = Vec::with_capacity(types.len());
        let mut rows = 0;
        let mut dim = 0;
        for &rtype in types {
            let name = format!("prompt.{}", rtype.as_str());
            let param = store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            let shape = store.get2(param).dim();
            rows = shape.0;
            dim = shape.1;
            prompts.push(SoftPrompt { rtype, param, rows });
        }
        Ok(Self { prompts, rows, dim })
    }

    pub fn types(&self) -> impl Iterator<Item = ReasoningType> + '_ {
        self.prompts.iter().map(|p| p.rtype)
    }

    /// The prompt for a predicted reasoning type; unregistered types error.
    pub fn select(&self, rtype: ReasoningType) -> Result<&SoftPrompt> {
        self.prompts
            .iter()
            .find(|p| p.rtype == rtype)
            .ok_or_else(|| Error::Model(format!("unregistered reasoning type {}", rtype.as_str())))
    }
}

/// Prepend prompt rows onto a context representation: `C' = [p; C]` with all
/// index maps shifted by the prompt length. Prompt rows count as valid
/// attention targets.
pub fn prepend<F: Scalar>(
    store: &ParameterStore<F>,
    prompt: &SoftPrompt,
    rep: &ContextRepresentation<F>,
) -> Result<ContextRepresentation<F>> {
    let p = store.get2(prompt.param);
    if p.ncols() != rep.hidden.ncols() {
        return Err(Error::Shape(format!(
            "prompt dim {} does not match representation dim {}",
            p.ncols(),
            rep.hidden.ncols()
        )));
    }
    let m = p.nrows();
    let n = rep.hidden.nrows();
    let mut hidden = Array2::zeros((m + n, rep.hidden.ncols()));
    hidden.slice_mut(s![0..m, ..]).assign(&p);
    hidden.slice_mut(s![m.., ..]).assign(&rep.hidden);
    let mut mask = vec![true; m];
    mask.extend_from_slice(&rep.mask);
    Ok(ContextRepresentation {
        hidden,
        maps: rep.maps.shifted(m),
        mask,
    })
}
