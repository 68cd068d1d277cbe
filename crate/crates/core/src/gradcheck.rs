//! Central finite differences over a [`ParamStore`], for checking the
//! hand-written backward passes.

use crate::params::{Grads, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps tiny gradients from
/// producing huge relative errors out of rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares `grads` against central differences of `loss` for every entry
/// of the listed parameters. Returns the worst relative error and all
/// entries exceeding `tol`.
pub fn check<F>(
    store: &ParamStore,
    grads: &Grads,
    params: &[ParamId],
    step: f64,
    tol: f64,
    mut loss: F,
) -> (f64, Vec<GradMismatch>)
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    let mut probe = store.clone();
    for &id in params {
        let (rows, cols) = store.get(id).dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = store.get(id)[[i, j]];
                probe.get_mut(id)[[i, j]] = orig + step;
                let up = loss(&probe);
                probe.get_mut(id)[[i, j]] = orig - step;
                let down = loss(&probe);
                probe.get_mut(id)[[i, j]] = orig;
                let numeric = (up - down) / (2.0 * step);
                let analytic = grads.get(id).map_or(0.0, |g| g[[i, j]]);
                let err = relative_error(analytic, numeric);
                worst = worst.max(err);
                if err > tol {
                    bad.push(GradMismatch {
                        param: store.name(id).to_string(),
                        index: (i, j),
                        analytic,
                        numeric,
                        rel_error: err,
                    });
                }
            }
        }
    }
    (worst, bad)
}
