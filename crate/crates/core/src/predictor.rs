//! Dual-view prediction over the full entity set.
//!
//! The last hidden state goes through one head per modality; each head's
//! output is scored against every entity with a frozen base matrix plus a
//! low-rank correction `A·B` (B starts at zero, so the first scores equal the
//! base scores). The two logit vectors are weighted by `lambda_t`,
//! `lambda_s` and averaged.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KgtError, Result};
use crate::kg_store::EntityId;
use crate::nn::{log_sum_exp, outer_add, softmax, DenseBlock, DenseCache};
use crate::params::{Grads, ParamId, ParamStore};
use crate::specialized_embedding::Modality;

/// `RMSNorm(SiLU(Dropout(h) · W'))`; the same block as the input projector.
pub type HeadMlp = DenseBlock;

pub fn head_project<R: Rng>(
    store: &ParamStore,
    head: &HeadMlp,
    h: ArrayView1<f64>,
    train: bool,
    rng: &mut R,
) -> Result<(Array1<f64>, DenseCache)> {
    let expected = head.input_dim(store);
    if h.len() != expected {
        return Err(KgtError::Dimension {
            what: "head input".into(),
            expected,
            got: h.len(),
        });
    }
    Ok(head.forward(store, h, train, rng))
}

/// Full-entity scorer `h · (W_base + A·B)^T`.
#[derive(Clone, Copy, Debug)]
pub struct LoraScorer {
    /// `|E| x d_m`, never trainable.
    pub base: ParamId,
    /// `|E| x r`.
    pub a: ParamId,
    /// `r x d_m`, zero at init.
    pub b: ParamId,
}

impl LoraScorer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, base: Array2<f64>, rank: usize, rng: &mut R) -> Self {
        let (n, dm) = base.dim();
        let base = store.add(format!("{name}.base"), base);
        store.set_trainable(base, false);
        let a = store.add_gaussian(format!("{name}.lora_a"), n, rank, 1.0 / (rank as f64).sqrt(), rng);
        let b = store.add_filled(format!("{name}.lora_b"), rank, dm, 0.0);
        Self { base, a, b }
    }

    pub fn rank(&self, store: &ParamStore) -> usize {
        store.get(self.b).nrows()
    }
}

pub fn lora_score(store: &ParamStore, scorer: &LoraScorer, h: ArrayView1<f64>) -> Array1<f64> {
    let low = store.get(scorer.b).dot(&h);
    store.get(scorer.base).dot(&h) + store.get(scorer.a).dot(&low)
}

/// Gradient of `lora_score` w.r.t. `A`, `B` and `h`.
pub fn lora_score_backward(
    store: &ParamStore,
    scorer: &LoraScorer,
    grads: &mut Grads,
    h: ArrayView1<f64>,
    dp: ArrayView1<f64>,
) -> Array1<f64> {
    let b = store.get(scorer.b);
    let a = store.get(scorer.a);
    let low = b.dot(&h);
    if let Some(g) = grads.get_mut(scorer.a) {
        outer_add(g, dp, low.view());
    }
    let dlow = a.t().dot(&dp);
    if let Some(g) = grads.get_mut(scorer.b) {
        outer_add(g, dlow.view(), h);
    }
    let mut dh = store.get(scorer.base).t().dot(&dp);
    dh += &b.t().dot(&dlow);
    dh
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ScalerMode {
    /// Both weights trained from 1.0.
    Learnable,
    /// `lambda_s = 1`, `lambda_t = gamma`, both frozen.
    FixedRatio { gamma: f64 },
}

impl Default for ScalerMode {
    fn default() -> Self {
        ScalerMode::Learnable
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LogitScalers {
    pub lambda_t: ParamId,
    pub lambda_s: ParamId,
    pub mode: ScalerMode,
}

impl LogitScalers {
    pub fn new(store: &mut ParamStore, mode: ScalerMode) -> Self {
        let lambda_t = store.add_filled("predictor.lambda_text", 1, 1, 1.0);
        let lambda_s = store.add_filled("predictor.lambda_struct", 1, 1, 1.0);
        let s = Self {
            lambda_t,
            lambda_s,
            mode,
        };
        s.set_mode(store, mode);
        s
    }

    /// Applies `mode` to the stored scalars.
    pub fn set_mode(self, store: &mut ParamStore, mode: ScalerMode) -> Self {
        match mode {
            ScalerMode::Learnable => {
                store.set_trainable(self.lambda_t, true);
                store.set_trainable(self.lambda_s, true);
            }
            ScalerMode::FixedRatio { gamma } => {
                store.get_mut(self.lambda_t).fill(gamma);
                store.get_mut(self.lambda_s).fill(1.0);
                store.set_trainable(self.lambda_t, false);
                store.set_trainable(self.lambda_s, false);
            }
        }
        Self { mode, ..self }
    }

    pub fn values(&self, store: &ParamStore) -> (f64, f64) {
        (store.scalar(self.lambda_t), store.scalar(self.lambda_s))
    }
}

/// `½(λ_t p_t + λ_s p_s)`.
pub fn fuse_logits(p_t: ArrayView1<f64>, p_s: ArrayView1<f64>, lambdas: (f64, f64)) -> Result<Array1<f64>> {
    if p_t.len() != p_s.len() {
        return Err(KgtError::Dimension {
            what: "structural logits".into(),
            expected: p_t.len(),
            got: p_s.len(),
        });
    }
    Ok((&p_t * lambdas.0 + &p_s * lambdas.1) * 0.5)
}

/// `log Σ exp(p) - p[target]`.
pub fn ce_loss(p: ArrayView1<f64>, target: EntityId) -> f64 {
    log_sum_exp(p) - p[target.index()]
}

/// `softmax(p) - onehot(target)`.
pub fn ce_loss_grad(p: ArrayView1<f64>, target: EntityId) -> Array1<f64> {
    let mut g = softmax(p);
    g[target.index()] -= 1.0;
    g
}

#[derive(Clone, Copy, Debug)]
pub struct View {
    pub head: HeadMlp,
    pub scorer: LoraScorer,
}

#[derive(Clone, Copy, Debug)]
pub struct Predictor {
    pub text: Option<View>,
    pub structure: Option<View>,
    pub scalers: LogitScalers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionLogits {
    pub text: Option<Array1<f64>>,
    pub structure: Option<Array1<f64>>,
    pub fused: Array1<f64>,
}

pub struct PredictorCache {
    text: Option<(Array1<f64>, DenseCache)>,
    structure: Option<(Array1<f64>, DenseCache)>,
    logits: PredictionLogits,
}

impl Predictor {
    /// `text_base` and `struct_base` are the `|E| x d_m` base matrices.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        hidden: usize,
        text_base: Array2<f64>,
        struct_base: Array2<f64>,
        rank: usize,
        text_dropout: f64,
        struct_dropout: f64,
        mode: ScalerMode,
        rng: &mut R,
    ) -> Self {
        let td = text_base.ncols();
        let sd = struct_base.ncols();
        let text = View {
            head: DenseBlock::new(store, "predictor.text_head", hidden, td, text_dropout, rng),
            scorer: LoraScorer::new(store, "predictor.text_scorer", text_base, rank, rng),
        };
        let structure = View {
            head: DenseBlock::new(store, "predictor.struct_head", hidden, sd, struct_dropout, rng),
            scorer: LoraScorer::new(store, "predictor.struct_scorer", struct_base, rank, rng),
        };
        Self {
            text: Some(text),
            structure: Some(structure),
            scalers: LogitScalers::new(store, mode),
        }
    }

    pub fn view(&self, m: Modality) -> Option<&View> {
        match m {
            Modality::Text => self.text.as_ref(),
            Modality::Struct => self.structure.as_ref(),
        }
    }

    /// Removes one view and freezes its parameters.
    pub fn drop_view(&mut self, store: &mut ParamStore, m: Modality) {
        let slot = match m {
            Modality::Text => &mut self.text,
            Modality::Struct => &mut self.structure,
        };
        if let Some(v) = slot.take() {
            for id in [v.head.weight, v.head.gain, v.scorer.a, v.scorer.b] {
                store.set_trainable(id, false);
            }
        }
    }

    pub fn num_entities(&self, store: &ParamStore) -> usize {
        self.text
            .or(self.structure)
            .map_or(0, |v| store.get(v.scorer.base).nrows())
    }

    fn run_view<R: Rng>(
        store: &ParamStore,
        view: Option<&View>,
        h: ArrayView1<f64>,
        train: bool,
        rng: &mut R,
    ) -> Result<Option<(Array1<f64>, DenseCache, Array1<f64>)>> {
        view.map(|v| {
            let (hp, c) = head_project(store, &v.head, h, train, rng)?;
            let p = lora_score(store, &v.scorer, hp.view());
            Ok((hp, c, p))
        })
        .transpose()
    }

    /// With a single view the fused logits are that view's `λ`-scaled logits.
    pub fn forward<R: Rng>(
        &self,
        store: &ParamStore,
        h: ArrayView1<f64>,
        train: bool,
        rng: &mut R,
    ) -> Result<(PredictionLogits, PredictorCache)> {
        let text = Self::run_view(store, self.text.as_ref(), h, train, rng)?;
        let structure = Self::run_view(store, self.structure.as_ref(), h, train, rng)?;
        let (lt, ls) = self.scalers.values(store);
        let fused = match (&text, &structure) {
            (Some((_, _, pt)), Some((_, _, ps))) => fuse_logits(pt.view(), ps.view(), (lt, ls))?,
            (Some((_, _, pt)), None) => pt * lt,
            (None, Some((_, _, ps))) => ps * ls,
            (None, None) => return Err(KgtError::Conflict("both prediction views are disabled".into())),
        };
        let (text, text_p) = split3(text);
        let (structure, struct_p) = split3(structure);
        let logits = PredictionLogits {
            text: text_p,
            structure: struct_p,
            fused,
        };
        Ok((
            logits.clone(),
            PredictorCache {
                text,
                structure,
                logits,
            },
        ))
    }

    /// Backpropagates `d_fused`; returns the gradient w.r.t. the hidden state.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &PredictorCache,
        d_fused: ArrayView1<f64>,
        hidden: usize,
    ) -> Array1<f64> {
        let (lt, ls) = self.scalers.values(store);
        let both = self.text.is_some() && self.structure.is_some();
        let half = if both { 0.5 } else { 1.0 };
        let mut dh = Array1::zeros(hidden);
        let views = [
            (self.text.as_ref(), cache.text.as_ref(), cache.logits.text.as_ref(), lt, self.scalers.lambda_t),
            (
                self.structure.as_ref(),
                cache.structure.as_ref(),
                cache.logits.structure.as_ref(),
                ls,
                self.scalers.lambda_s,
            ),
        ];
        for (view, vc, p, lambda, lambda_id) in views {
            let (Some(view), Some((hp, dc)), Some(p)) = (view, vc, p) else {
                continue;
            };
            grads.add_scalar(lambda_id, half * d_fused.dot(p));
            let dp = &d_fused * (half * lambda);
            let dhp = lora_score_backward(store, &view.scorer, grads, hp.view(), dp.view());
            dh += &view.head.backward(store, grads, dc, dhp.view());
        }
        dh
    }
}

fn split3(
    v: Option<(Array1<f64>, DenseCache, Array1<f64>)>,
) -> (Option<(Array1<f64>, DenseCache)>, Option<Array1<f64>>) {
    match v {
        Some((a, b, c)) => (Some((a, b)), Some(c)),
        None => (None, None),
    }
}
