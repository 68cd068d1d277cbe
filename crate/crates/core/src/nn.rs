//! Scalar activations, RMSNorm and the dropout→linear→SiLU→RMSNorm block
//! shared by the input projectors and the prediction heads, each with its
//! hand-written backward pass.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::params::{Grads, ParamId, ParamStore};

pub const RMS_EPS: f64 = 1e-6;
/// Below this raw RMS the norm is skipped and the input passes through.
pub const RMS_ZERO_GUARD: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: ArrayView1<f64>) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: ArrayView1<f64>) -> Array1<f64> {
    let lse = log_sum_exp(xs);
    xs.mapv(|x| (x - lse).exp())
}

/// State kept by [`rms_norm`] for the backward pass.
#[derive(Clone, Debug)]
pub struct RmsCache {
    input: Array1<f64>,
    /// `None` when the zero guard fired.
    inv_rms: Option<f64>,
}

/// `gain * a / sqrt(mean(a^2) + eps)`, or `a` unchanged when `a` is
/// numerically zero.
pub fn rms_norm(a: ArrayView1<f64>, gain: ArrayView1<f64>) -> (Array1<f64>, RmsCache) {
    let ms = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
    if ms.sqrt() < RMS_ZERO_GUARD {
        return (
            a.to_owned(),
            RmsCache {
                input: a.to_owned(),
                inv_rms: None,
            },
        );
    }
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    let y = &a * &gain * inv;
    (
        y,
        RmsCache {
            input: a.to_owned(),
            inv_rms: Some(inv),
        },
    )
}

/// Returns `(d_input, d_gain)`.
pub fn rms_norm_backward(
    cache: &RmsCache,
    gain: ArrayView1<f64>,
    dy: ArrayView1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let a = &cache.input;
    match cache.inv_rms {
        None => (dy.to_owned(), Array1::zeros(a.len())),
        Some(s) => {
            let n = a.len() as f64;
            let dgain = &dy * a * s;
            let gdy = &dy * &gain;
            let dot = gdy.dot(a);
            let da = &gdy * s - a * (s * s * s * dot / n);
            (da, dgain)
        }
    }
}

/// Inverted-dropout mask; `None` when dropout is inactive.
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, train: bool, rng: &mut R) -> Option<Array1<f64>> {
    if !train || rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    Some(Array1::from_shape_fn(len, |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    }))
}

/// `RMSNorm(SiLU(W · Dropout(x)))` with `W` stored `out x in`, no bias.
#[derive(Clone, Copy, Debug)]
pub struct DenseBlock {
    pub weight: ParamId,
    pub gain: ParamId,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct DenseCache {
    x_dropped: Array1<f64>,
    mask: Option<Array1<f64>>,
    pre: Array1<f64>,
    norm: RmsCache,
}

impl DenseBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_gaussian(
            format!("{name}.weight"),
            output,
            input,
            1.0 / (input as f64).sqrt(),
            rng,
        );
        let gain = store.add_filled(format!("{name}.gain"), 1, output, 1.0);
        Self {
            weight,
            gain,
            dropout,
        }
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).ncols()
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).nrows()
    }

    pub fn forward<R: Rng>(
        &self,
        store: &ParamStore,
        x: ArrayView1<f64>,
        train: bool,
        rng: &mut R,
    ) -> (Array1<f64>, DenseCache) {
        let w = store.get(self.weight);
        debug_assert_eq!(x.len(), w.ncols());
        let mask = dropout_mask(x.len(), self.dropout, train, rng);
        let x_dropped = match &mask {
            Some(m) => &x * m,
            None => x.to_owned(),
        };
        let pre = w.dot(&x_dropped);
        let act = pre.mapv(silu);
        let (y, norm) = rms_norm(act.view(), store.vector(self.gain));
        (
            y,
            DenseCache {
                x_dropped,
                mask,
                pre,
                norm,
            },
        )
    }

    /// Accumulates weight/gain gradients; returns the gradient w.r.t. `x`.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &DenseCache,
        dy: ArrayView1<f64>,
    ) -> Array1<f64> {
        let (dact, dgain) = rms_norm_backward(&cache.norm, store.vector(self.gain), dy);
        if let Some(g) = grads.get_mut(self.gain) {
            g.row_mut(0).scaled_add(1.0, &dgain);
        }
        let dpre = &dact * &cache.pre.mapv(silu_grad);
        if let Some(g) = grads.get_mut(self.weight) {
            outer_add(g, dpre.view(), cache.x_dropped.view());
        }
        let dx = store.get(self.weight).t().dot(&dpre);
        match &cache.mask {
            Some(m) => dx * m,
            None => dx,
        }
    }
}

/// `g += a ⊗ b`.
pub fn outer_add(g: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            g.row_mut(i).scaled_add(ai, &b);
        }
    }
}

/// `g += a^T b` for row-stacked matrices.
pub fn matmul_tn_add(g: &mut Array2<f64>, a: ArrayView2<f64>, b: ArrayView2<f64>) {
    ndarray::linalg::general_mat_mul(1.0, &a.t(), &b, 1.0, g);
}
