//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only re-runs the forward pass, so it stays independent of
//! the hand-written backward code it checks. Always run in f64 and in
//! evaluation mode (no dropout).

use crate::scalar::Scalar;
use crate::store::{ParamId, ParameterStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_entry: usize,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn ok(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Symmetric relative error with a floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients already accumulated in `store` against central
/// finite differences of `loss`.
///
/// For each listed parameter, up to `max_entries` randomly chosen entries are
/// perturbed by `±eps`. `loss` must be a pure function of the store.
pub fn check_gradients<L>(
    store: &mut ParameterStore<f64>,
    ids: &[ParamId],
    eps: f64,
    max_entries: usize,
    seed: u64,
    mut loss: L,
) -> GradCheckReport
where
    L: FnMut(&ParameterStore<f64>) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_entry: 0,
        entries_checked: 0,
    };
    for &id in ids {
        let len = store.param(id).value.len();
        let picks: Vec<usize> = if len <= max_entries {
            (0..len).collect()
        } else {
            (0..max_entries).map(|_| rng.random_range(0..len)).collect()
        };
        for flat in picks {
            let original = store.param(id).value.as_slice().expect("standard layout")[flat];
            set_flat(store, id, flat, original + eps);
            let plus = loss(store);
            set_flat(store, id, flat, original - eps);
            let minus = loss(store);
            set_flat(store, id, flat, original);
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = store.param(id).grad.as_slice().expect("standard layout")[flat];
            let err = rel_err(analytic, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = store.param(id).name.clone();
                report.worst_entry = flat;
            }
        }
    }
    report
}

fn set_flat(store: &mut ParameterStore<f64>, id: ParamId, flat: usize, v: f64) {
    store
        .param_mut(id)
        .value
        .as_slice_mut()
        .expect("standard layout")[flat] = v;
}

/// Random dense matrix in f64, for building check inputs.
pub fn random_matrix<F: Scalar>(
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> ndarray::Array2<F> {
    ndarray::Array2::from_shape_fn((rows, cols), |_| {
        F::from_f64((rng.random::<f64>() * 2.0 - 1.0) * scale)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::Array2;

    #[test]
    fn linear_layer_gradients_match_finite_differences() {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lin = Linear::new(&mut store, "l", (4, 3), &mut rng);
        let x = random_matrix::<f64>(5, 4, 1.0, &mut rng);

        // Loss = sum of squares of outputs.
        let (y, cache) = lin.forward(&store, &x);
        let d_out = y.mapv(|v| 2.0 * v);
        lin.backward(&mut store, &cache, &d_out);

        let ids: Vec<_> = store.params().map(|(id, _)| id).collect();
        let x2 = x.clone();
        let report = check_gradients(&mut store, &ids, 1e-5, 64, 0, move |s| {
            let (y, _) = lin.forward(s, &x2);
            y.iter().map(|v| v * v).sum()
        });
        assert!(report.ok(1e-6), "max rel err {}", report.max_rel_err);
        let _ = Array2::<f64>::zeros((1, 1));
    }

    #[test]
    fn check_catches_a_wrong_gradient() {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lin = Linear::new(&mut store, "l", (3, 2), &mut rng);
        let x = random_matrix::<f64>(4, 3, 1.0, &mut rng);
        let (y, cache) = lin.forward(&store, &x);
        let d_out = y.mapv(|v| 2.0 * v);
        lin.backward(&mut store, &cache, &d_out);
        // Corrupt one gradient entry.
        store.param_mut(lin.w).grad[[0, 0]] += 1.0;
        let ids = vec![lin.w];
        let x2 = x.clone();
        let report = check_gradients(&mut store, &ids, 1e-5, 64, 0, move |s| {
            let (y, _) = lin.forward(s, &x2);
            y.iter().map(|v| v * v).sum()
        });
        assert!(!report.ok(1e-4));
    }
}
