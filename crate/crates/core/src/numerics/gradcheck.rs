//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Gradients, ParamStore};
use super::tensor::Tensor2;
use crate::error::{CprError, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_FD_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_FD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step: f64,
    pub threshold: f64,
    /// Denominator floor for the relative error, so that two near-zero
    /// gradients are compared absolutely.
    pub floor: f64,
    /// When set, check this many randomly chosen coordinates per tensor
    /// instead of every coordinate.
    pub sample: Option<(usize, u64)>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_FD_STEP,
            threshold: DEFAULT_FD_THRESHOLD,
            floor: DEFAULT_FD_FLOOR,
            sample: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub threshold: f64,
    pub step: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn worst(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against central differences of `loss_fn` for every
/// trainable tensor in `store`.
pub fn finite_diff_check<F>(
    loss_fn: F,
    store: &ParamStore,
    analytic: &Gradients,
    opts: FdOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if !(opts.step > 0.0) {
        return Err(CprError::config(format!(
            "finite-difference step must be positive, got {}",
            opts.step
        )));
    }
    let first = loss_fn(store)?;
    let second = loss_fn(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(CprError::NonDeterministic { first, second });
    }

    let mut work = store.clone();
    let mut rng = opts.sample.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut tensors = Vec::new();
    for id in store.trainable_ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match (&mut rng, opts.sample) {
            (Some(rng), Some((k, _))) if k < n => {
                let mut c = sample(rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let grad = analytic.get(id);
        let mut max_rel: f64 = 0.0;
        for &c in &coords {
            let orig = work.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + opts.step;
            let plus = loss_fn(&work)?;
            work.get_mut(id).data_mut()[c] = orig - opts.step;
            let minus = loss_fn(&work)?;
            work.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            max_rel = max_rel.max(relative_error(grad.data()[c], numeric, opts.floor));
        }
        tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            coords_checked: coords.len(),
            max_rel_error: max_rel,
            max_abs_grad: grad.max_abs(),
            passed: max_rel <= opts.threshold,
        });
    }
    Ok(GradCheckReport {
        threshold: opts.threshold,
        step: opts.step,
        tensors,
    })
}

/// Adds `N(0, std^2)` noise to every trainable tensor so that zero-initialized
/// layers do not make whole gradient blocks vanish.
pub fn perturb_trainable(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let noise = Tensor2::randn(t.rows(), t.cols(), std, &mut rng);
        t.add_assign(&noise);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;
    use std::cell::Cell;

    fn quadratic_store() -> ParamStore {
        let mut store = ParamStore::new();
        store.add(
            "a",
            Tensor2::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap(),
            true,
        );
        store.add("dead", Tensor2::filled(1, 2, 0.4), true);
        store
    }

    fn quadratic_loss(store: &ParamStore) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let a = g.param(store, store.find("a").unwrap());
        let _dead = g.param(store, store.find("dead").unwrap());
        let sq = g.row_dot(a, a)?;
        let loss = g.mean(sq)?;
        let grads = g.backward(loss, store)?;
        Ok((g.scalar(loss), grads))
    }

    #[test]
    fn quadratic_passes_tightly() {
        let store = quadratic_store();
        let (_, grads) = quadratic_loss(&store).unwrap();
        let report = finite_diff_check(
            |s| quadratic_loss(s).map(|(l, _)| l),
            &store,
            &grads,
            FdOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.tensors[0].max_rel_error < 1e-8);
        // analytic 0 vs numeric 0
        assert_eq!(report.tensors[1].max_rel_error, 0.0);
        assert!(report.tensors[1].passed);
    }

    #[test]
    fn nondeterministic_loss_detected() {
        let store = quadratic_store();
        let (_, grads) = quadratic_loss(&store).unwrap();
        let counter = Cell::new(0.0);
        let err = finite_diff_check(
            |_| {
                counter.set(counter.get() + 1.0);
                Ok(counter.get())
            },
            &store,
            &grads,
            FdOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CprError::NonDeterministic { .. }));
    }

    #[test]
    fn wrong_gradient_fails() {
        let store = quadratic_store();
        let (_, mut grads) = quadratic_loss(&store).unwrap();
        grads.scale(1.01);
        let report = finite_diff_check(
            |s| quadratic_loss(s).map(|(l, _)| l),
            &store,
            &grads,
            FdOptions::default(),
        )
        .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn non_positive_step_rejected() {
        let store = quadratic_store();
        let (_, grads) = quadratic_loss(&store).unwrap();
        let opts = FdOptions {
            step: 0.0,
            ..FdOptions::default()
        };
        assert!(finite_diff_check(|s| quadratic_loss(s).map(|(l, _)| l), &store, &grads, opts).is_err());
    }
}
