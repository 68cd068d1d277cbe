//! Dual-stream embeddings for entity and relation tokens.
//!
//! Each special token owns a raw textual row and a raw structural row. Both
//! are projected into the backbone width by `RMSNorm(SiLU(W · Dropout(x)))`
//! and mixed by a two-way softmax gate:
//!
//! ```text
//! z_m = (U_m·e'_m / sqrt(d) + delta_m) / sigmoid(eps_r)
//! delta_m ~ N(0, softplus(U'_m·e'_m) / sqrt(d))      (training only)
//! (g_t, g_s) = softmax(z_t, z_s);  t = g_t e'_t + g_s e'_s
//! ```
//!
//! `eps_r` is one learnable scalar per (augmented) relation. Entity tokens are
//! gated with the query relation, relation tokens with their own relation.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{KgtError, Result};
use crate::feature_bank::FeatureBank;
use crate::kg_store::{EntityId, RelationId};
use crate::nn::{sigmoid, softplus, DenseBlock, DenseCache};
use crate::params::{Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Struct,
}

/// A graph element addressed as one indivisible token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpecialToken {
    Entity(EntityId),
    Relation(RelationId),
}

/// The raw feature bank widened to `f64`.
#[derive(Clone, Debug)]
pub struct DualFeatures {
    pub entity_text: Array2<f64>,
    pub entity_struct: Array2<f64>,
    pub relation_text: Array2<f64>,
    pub relation_struct: Array2<f64>,
}

impl DualFeatures {
    pub fn from_bank(bank: &FeatureBank) -> Self {
        Self {
            entity_text: bank.entity_text.to_array(),
            entity_struct: bank.entity_struct.to_array(),
            relation_text: bank.relation_text.to_array(),
            relation_struct: bank.relation_struct.to_array(),
        }
    }

    pub fn text_dim(&self) -> usize {
        self.entity_text.ncols()
    }

    pub fn struct_dim(&self) -> usize {
        self.entity_struct.ncols()
    }

    pub fn num_entities(&self) -> usize {
        self.entity_text.nrows()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_text.nrows()
    }

    pub fn rows(&self, token: SpecialToken) -> Result<(ArrayView1<'_, f64>, ArrayView1<'_, f64>)> {
        let (t, s, i) = match token {
            SpecialToken::Entity(e) => (&self.entity_text, &self.entity_struct, e.index()),
            SpecialToken::Relation(r) => (&self.relation_text, &self.relation_struct, r.index()),
        };
        if i >= t.nrows() || i >= s.nrows() {
            return Err(KgtError::Invalid(format!("{token:?} has no feature rows")));
        }
        Ok((t.row(i), s.row(i)))
    }
}

/// Which parts of the fusion are active; flipped by ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSwitches {
    pub text_input: bool,
    pub struct_input: bool,
    pub noise: bool,
    pub relation_temperature: bool,
}

impl Default for FusionSwitches {
    fn default() -> Self {
        Self {
            text_input: true,
            struct_input: true,
            noise: true,
            relation_temperature: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    /// `U_t`, `U_s`: `1 x d` each.
    pub logit: [ParamId; 2],
    /// `U'_t`, `U'_s`: `1 x d` each.
    pub noise: [ParamId; 2],
    /// `eps_r`: `1 x |R_aug|`.
    pub temperature: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SpecializedEmbedding {
    pub text_proj: DenseBlock,
    pub struct_proj: DenseBlock,
    pub gate: GateParams,
    pub hidden: usize,
}

impl SpecializedEmbedding {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        text_dim: usize,
        struct_dim: usize,
        hidden: usize,
        num_relations: usize,
        text_dropout: f64,
        struct_dropout: f64,
        rng: &mut R,
    ) -> Self {
        let text_proj = DenseBlock::new(store, "embed.text_proj", text_dim, hidden, text_dropout, rng);
        let struct_proj =
            DenseBlock::new(store, "embed.struct_proj", struct_dim, hidden, struct_dropout, rng);
        let std = 1.0 / (hidden as f64).sqrt();
        let logit = [
            store.add_gaussian("embed.gate.logit_text", 1, hidden, std, rng),
            store.add_gaussian("embed.gate.logit_struct", 1, hidden, std, rng),
        ];
        let noise = [
            store.add_filled("embed.gate.noise_text", 1, hidden, 0.0),
            store.add_filled("embed.gate.noise_struct", 1, hidden, 0.0),
        ];
        let temperature = store.add_filled("embed.gate.temperature", 1, num_relations, 0.0);
        Self {
            text_proj,
            struct_proj,
            gate: GateParams {
                logit,
                noise,
                temperature,
            },
            hidden,
        }
    }

    pub fn projector(&self, m: Modality) -> &DenseBlock {
        match m {
            Modality::Text => &self.text_proj,
            Modality::Struct => &self.struct_proj,
        }
    }

    /// Parameters belonging to one input stream (projector + its gate maps).
    pub fn stream_params(&self, m: Modality) -> Vec<ParamId> {
        let k = modality_slot(m);
        let p = self.projector(m);
        vec![p.weight, p.gain, self.gate.logit[k], self.gate.noise[k]]
    }
}

fn modality_slot(m: Modality) -> usize {
    match m {
        Modality::Text => 0,
        Modality::Struct => 1,
    }
}

/// `RMSNorm(SiLU(W · Dropout(raw)))`.
pub fn project<R: Rng>(
    store: &ParamStore,
    proj: &DenseBlock,
    raw: ArrayView1<f64>,
    train: bool,
    rng: &mut R,
) -> Result<(Array1<f64>, DenseCache)> {
    let expected = proj.input_dim(store);
    if raw.len() != expected {
        return Err(KgtError::Dimension {
            what: "projector input".into(),
            expected,
            got: raw.len(),
        });
    }
    Ok(proj.forward(store, raw, train, rng))
}

#[derive(Clone, Debug)]
pub struct GateCache {
    inputs: [Array1<f64>; 2],
    z: [f64; 2],
    gates: [f64; 2],
    /// `(standard normal draw, variance, pre-softplus value)` when noise was drawn.
    noise: [Option<(f64, f64, f64)>; 2],
    tau: f64,
    relation: RelationId,
    use_temperature: bool,
}

impl GateCache {
    pub fn gates(&self) -> (f64, f64) {
        (self.gates[0], self.gates[1])
    }

    pub fn logits(&self) -> (f64, f64) {
        (self.z[0], self.z[1])
    }
}

/// The relation-guided gate; returns `(g_t, g_s)`.
#[allow(clippy::too_many_arguments)]
pub fn gate<R: Rng>(
    store: &ParamStore,
    params: &GateParams,
    e_text: ArrayView1<f64>,
    e_struct: ArrayView1<f64>,
    relation: RelationId,
    switches: FusionSwitches,
    train: bool,
    rng: &mut R,
) -> ((f64, f64), GateCache) {
    let d = e_text.len() as f64;
    let sqrt_d = d.sqrt();
    let tau = if switches.relation_temperature {
        sigmoid(store.get(params.temperature)[[0, relation.index()]])
    } else {
        1.0
    };
    let inputs = [e_text.to_owned(), e_struct.to_owned()];
    let mut z = [0.0; 2];
    let mut noise = [None, None];
    for k in 0..2 {
        let a = store.vector(params.logit[k]).dot(&inputs[k]);
        let mut num = a / sqrt_d;
        if train && switches.noise {
            let pre = store.vector(params.noise[k]).dot(&inputs[k]);
            let var = softplus(pre) / sqrt_d;
            let xi: f64 = StandardNormal.sample(rng);
            num += xi * var.sqrt();
            noise[k] = Some((xi, var, pre));
        }
        z[k] = num / tau;
    }
    let m = z[0].max(z[1]);
    let (et, es) = ((z[0] - m).exp(), (z[1] - m).exp());
    let gates = [et / (et + es), es / (et + es)];
    (
        (gates[0], gates[1]),
        GateCache {
            inputs,
            z,
            gates,
            noise,
            tau,
            relation,
            use_temperature: switches.relation_temperature,
        },
    )
}

/// Returns gradients w.r.t. `(e'_t, e'_s)`; parameter gradients accumulate
/// into `grads`.
pub fn gate_backward(
    store: &ParamStore,
    params: &GateParams,
    grads: &mut Grads,
    cache: &GateCache,
    dgates: (f64, f64),
) -> [Array1<f64>; 2] {
    let g = cache.gates;
    let dg = [dgates.0, dgates.1];
    let inner = g[0] * dg[0] + g[1] * dg[1];
    let dz = [g[0] * (dg[0] - inner), g[1] * (dg[1] - inner)];
    let d = cache.inputs[0].len() as f64;
    let sqrt_d = d.sqrt();
    let tau = cache.tau;

    if cache.use_temperature {
        let dtau = -(dz[0] * cache.z[0] + dz[1] * cache.z[1]) / tau;
        if let Some(gt) = grads.get_mut(params.temperature) {
            gt[[0, cache.relation.index()]] += dtau * tau * (1.0 - tau);
        }
    }

    let mut out = [Array1::zeros(cache.inputs[0].len()), Array1::zeros(cache.inputs[1].len())];
    for k in 0..2 {
        let dnum = dz[k] / tau;
        let da = dnum / sqrt_d;
        if let Some(gu) = grads.get_mut(params.logit[k]) {
            gu.row_mut(0).scaled_add(da, &cache.inputs[k]);
        }
        out[k].scaled_add(da, &store.vector(params.logit[k]));
        if let Some((xi, var, pre)) = cache.noise[k] {
            // delta = xi * sqrt(var), var = softplus(pre) / sqrt(d)
            let dvar = if var > 0.0 { dnum * xi / (2.0 * var.sqrt()) } else { 0.0 };
            let dpre = dvar * sigmoid(pre) / sqrt_d;
            if let Some(gn) = grads.get_mut(params.noise[k]) {
                gn.row_mut(0).scaled_add(dpre, &cache.inputs[k]);
            }
            out[k].scaled_add(dpre, &store.vector(params.noise[k]));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding {
    pub vector: Array1<f64>,
    pub gates: (f64, f64),
}

/// `t = g_t e'_t + g_s e'_s`.
pub fn fuse(e_text: ArrayView1<f64>, e_struct: ArrayView1<f64>, gates: (f64, f64)) -> FusedEmbedding {
    FusedEmbedding {
        vector: &e_text * gates.0 + &e_struct * gates.1,
        gates,
    }
}

/// Everything needed to backpropagate one special-token embedding.
#[derive(Clone, Debug)]
pub struct TokenCache {
    text: Option<(Array1<f64>, DenseCache)>,
    structure: Option<(Array1<f64>, DenseCache)>,
    gate: Option<GateCache>,
    gates: (f64, f64),
}

impl TokenCache {
    pub fn gates(&self) -> (f64, f64) {
        self.gates
    }
}

/// The relation whose temperature gates `token` in a query on `query_relation`.
pub fn gating_relation(token: SpecialToken, query_relation: RelationId) -> RelationId {
    match token {
        SpecialToken::Entity(_) => query_relation,
        SpecialToken::Relation(r) => r,
    }
}

/// Projects, gates and fuses one special token. With one input stream
/// switched off the surviving projection is returned with gates fixed at
/// `(1, 0)` or `(0, 1)`.
#[allow(clippy::too_many_arguments)]
pub fn embed_special_token<R: Rng>(
    token: SpecialToken,
    query_relation: RelationId,
    features: &DualFeatures,
    store: &ParamStore,
    module: &SpecializedEmbedding,
    switches: FusionSwitches,
    train: bool,
    rng: &mut R,
) -> Result<(FusedEmbedding, TokenCache)> {
    let (raw_t, raw_s) = features.rows(token)?;
    let text = if switches.text_input {
        Some(project(store, &module.text_proj, raw_t, train, rng)?)
    } else {
        None
    };
    let structure = if switches.struct_input {
        Some(project(store, &module.struct_proj, raw_s, train, rng)?)
    } else {
        None
    };
    let (fused, gate_cache) = match (&text, &structure) {
        (Some((et, _)), Some((es, _))) => {
            let rel = gating_relation(token, query_relation);
            let (g, c) = gate(store, &module.gate, et.view(), es.view(), rel, switches, train, rng);
            (fuse(et.view(), es.view(), g), Some(c))
        }
        (Some((et, _)), None) => (
            FusedEmbedding {
                vector: et.clone(),
                gates: (1.0, 0.0),
            },
            None,
        ),
        (None, Some((es, _))) => (
            FusedEmbedding {
                vector: es.clone(),
                gates: (0.0, 1.0),
            },
            None,
        ),
        (None, None) => {
            return Err(KgtError::Conflict(
                "both textual and structural inputs are disabled".into(),
            ))
        }
    };
    let gates = fused.gates;
    Ok((
        fused,
        TokenCache {
            text,
            structure,
            gate: gate_cache,
            gates,
        },
    ))
}

/// Backpropagates `d_out` (gradient w.r.t. the fused vector).
pub fn embed_special_token_backward(
    store: &ParamStore,
    module: &SpecializedEmbedding,
    grads: &mut Grads,
    cache: &TokenCache,
    d_out: ArrayView1<f64>,
) {
    let (gt, gs) = cache.gates;
    let mut d_text = cache.text.as_ref().map(|_| &d_out * gt);
    let mut d_struct = cache.structure.as_ref().map(|_| &d_out * gs);
    if let (Some(gc), Some((et, _)), Some((es, _))) = (&cache.gate, &cache.text, &cache.structure) {
        let dgates = (d_out.dot(et), d_out.dot(es));
        let [dt, ds] = gate_backward(store, &module.gate, grads, gc, dgates);
        if let Some(x) = d_text.as_mut() {
            *x += &dt;
        }
        if let Some(x) = d_struct.as_mut() {
            *x += &ds;
        }
    }
    if let (Some((_, c)), Some(dy)) = (&cache.text, &d_text) {
        module.text_proj.backward(store, grads, c, dy.view());
    }
    if let (Some((_, c)), Some(dy)) = (&cache.structure, &d_struct) {
        module.struct_proj.backward(store, grads, c, dy.view());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_bank::FeatureMatrix;
    use crate::gradcheck;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn silu_oracle(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    #[test]
    fn project_identity_hand_case() {
        let mut store = ParamStore::new();
        let p = DenseBlock::new(&mut store, "p", 2, 2, 0.0, &mut rng(0));
        store.get_mut(p.weight).assign(&array![[1.0, 0.0], [0.0, 1.0]]);
        let (y, _) = project(&store, &p, array![1.0, -1.0].view(), false, &mut rng(0)).unwrap();
        let a = [silu_oracle(1.0), silu_oracle(-1.0)];
        assert!((a[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((a[1] + 0.268_941_421_369_995_1).abs() < 1e-12);
        let rms = ((a[0] * a[0] + a[1] * a[1]) / 2.0 + 1e-6).sqrt();
        assert!((y[0] - a[0] / rms).abs() < 1e-12);
        assert!((y[1] - a[1] / rms).abs() < 1e-12);
    }

    #[test]
    fn project_zero_and_mismatch() {
        let mut store = ParamStore::new();
        let p = DenseBlock::new(&mut store, "p", 3, 4, 0.0, &mut rng(1));
        let (y, _) = project(&store, &p, Array1::zeros(3).view(), false, &mut rng(0)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(matches!(
            project(&store, &p, Array1::zeros(2).view(), false, &mut rng(0)),
            Err(KgtError::Dimension { .. })
        ));
    }

    #[test]
    fn project_eval_is_pure() {
        let mut store = ParamStore::new();
        let p = DenseBlock::new(&mut store, "p", 3, 4, 0.5, &mut rng(1));
        let x = array![0.2, -0.4, 0.9];
        let a = project(&store, &p, x.view(), false, &mut rng(1)).unwrap().0;
        let b = project(&store, &p, x.view(), false, &mut rng(2)).unwrap().0;
        assert_eq!(a, b);
    }

    fn module(store: &mut ParamStore, dt: usize, ds: usize, d: usize, nr: usize) -> SpecializedEmbedding {
        SpecializedEmbedding::new(store, dt, ds, d, nr, 0.0, 0.0, &mut rng(3))
    }

    #[test]
    fn equal_logits_give_even_gates() {
        let mut store = ParamStore::new();
        let m = module(&mut store, 2, 2, 4, 1);
        let zero = Array1::zeros(4);
        let ((gt, gs), _) = gate(
            &store,
            &m.gate,
            zero.view(),
            zero.view(),
            RelationId(0),
            FusionSwitches::default(),
            false,
            &mut rng(0),
        );
        assert_eq!((gt, gs), (0.5, 0.5));
    }

    #[test]
    fn gate_matches_scalar_softmax() {
        let mut store = ParamStore::new();
        let m = module(&mut store, 2, 2, 4, 2);
        store.get_mut(m.gate.temperature)[[0, 1]] = 0.8;
        let et = array![0.3, -0.1, 0.5, 0.2];
        let es = array![-0.4, 0.6, 0.1, 0.0];
        let ((gt, gs), _) = gate(
            &store,
            &m.gate,
            et.view(),
            es.view(),
            RelationId(1),
            FusionSwitches::default(),
            false,
            &mut rng(0),
        );
        let raw_t = store.vector(m.gate.logit[0]).dot(&et) / 2.0;
        let raw_s = store.vector(m.gate.logit[1]).dot(&es) / 2.0;
        let tau = 1.0 / (1.0 + (-0.8f64).exp());
        let gap = (raw_t - raw_s) / tau;
        assert!((gt - 1.0 / (1.0 + (-gap).exp())).abs() < 1e-12);
        assert!((gt + gs - 1.0).abs() < 1e-15);
    }

    #[test]
    fn colder_temperature_sharpens_gates() {
        let mut store = ParamStore::new();
        let m = module(&mut store, 2, 2, 4, 1);
        let et = array![1.0, 0.5, -0.2, 0.3];
        let es = array![-0.3, 0.1, 0.2, -0.6];
        let mut last = 0.0;
        for eps in [3.0, 1.0, 0.0, -1.0, -3.0] {
            store.get_mut(m.gate.temperature)[[0, 0]] = eps;
            let ((gt, gs), _) = gate(
                &store,
                &m.gate,
                et.view(),
                es.view(),
                RelationId(0),
                FusionSwitches::default(),
                false,
                &mut rng(0),
            );
            let mx = gt.max(gs);
            assert!(mx > last);
            last = mx;
        }
    }

    #[test]
    fn fuse_examples() {
        let a = array![1.0, 0.0];
        let b = array![0.0, 1.0];
        assert_eq!(fuse(a.view(), b.view(), (1.0, 0.0)).vector, a);
        let f = fuse(a.view(), b.view(), (0.3, 0.7));
        assert!((f.vector[0] - 0.3).abs() < 1e-15 && (f.vector[1] - 0.7).abs() < 1e-15);
        let c = array![0.4, -2.0];
        let neg = -&c;
        assert!(fuse(c.view(), neg.view(), (0.5, 0.5)).vector.iter().all(|&v| v == 0.0));
    }

    fn features(ne: usize, nr: usize, dt: usize, ds: usize, seed: u64) -> DualFeatures {
        let mut r = rng(seed);
        let mk = |rows: usize, cols: usize, r: &mut ChaCha8Rng| {
            FeatureMatrix::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0f32..1.0)).collect())
                .unwrap()
        };
        DualFeatures::from_bank(&FeatureBank {
            entity_text: mk(ne, dt, &mut r),
            entity_struct: mk(ne, ds, &mut r),
            relation_text: mk(nr, dt, &mut r),
            relation_struct: mk(nr, ds, &mut r),
        })
    }

    #[test]
    fn identical_streams_reproduce_either_projection() {
        let mut store = ParamStore::new();
        let m = module(&mut store, 3, 3, 4, 2);
        let w = store.get(m.text_proj.weight).clone();
        store.get_mut(m.struct_proj.weight).assign(&w);
        let u = store.get(m.gate.logit[0]).clone();
        store.get_mut(m.gate.logit[1]).assign(&u);
        let mut f = features(2, 2, 3, 3, 4);
        f.entity_struct = f.entity_text.clone();
        let (out, _) = embed_special_token(
            SpecialToken::Entity(EntityId(1)),
            RelationId(0),
            &f,
            &store,
            &m,
            FusionSwitches::default(),
            false,
            &mut rng(0),
        )
        .unwrap();
        let (proj, _) = project(&store, &m.text_proj, f.entity_text.row(1), false, &mut rng(0)).unwrap();
        assert_eq!(out.gates, (0.5, 0.5));
        for (a, b) in out.vector.iter().zip(proj.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn query_relation_only_acts_through_temperature() {
        let mut store = ParamStore::new();
        let m = module(&mut store, 3, 2, 4, 3);
        store.get_mut(m.gate.temperature).assign(&array![[0.5, -1.5, 2.0]]);
        let f = features(2, 3, 3, 2, 5);
        let tok = SpecialToken::Entity(EntityId(0));
        let run = |s: &ParamStore, r: u32| {
            embed_special_token(tok, RelationId(r), &f, s, &m, FusionSwitches::default(), false, &mut rng(0))
                .unwrap()
                .0
        };
        let a = run(&store, 0);
        let b = run(&store, 1);
        assert_ne!(a.vector, b.vector);
        let mut swapped = store.clone();
        swapped.get_mut(m.gate.temperature).assign(&array![[-1.5, 0.5, 2.0]]);
        assert_eq!(run(&swapped, 1), a);
        assert_eq!(run(&swapped, 0), b);
    }

    #[test]
    fn relation_tokens_use_their_own_temperature() {
        let tok = SpecialToken::Relation(RelationId(2));
        assert_eq!(gating_relation(tok, RelationId(0)), RelationId(2));
        assert_eq!(gating_relation(SpecialToken::Entity(EntityId(4)), RelationId(1)), RelationId(1));
    }

    #[test]
    fn seeded_training_forward_is_repeatable() {
        let mut store = ParamStore::new();
        let m = SpecializedEmbedding::new(&mut store, 3, 2, 4, 2, 0.3, 0.3, &mut rng(3));
        let f = features(2, 2, 3, 2, 6);
        let run = || {
            embed_special_token(
                SpecialToken::Entity(EntityId(1)),
                RelationId(1),
                &f,
                &store,
                &m,
                FusionSwitches::default(),
                true,
                &mut rng(77),
            )
            .unwrap()
            .0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_rows_error() {
        let mut store = ParamStore::new();
        let m = module(&mut store, 3, 2, 4, 2);
        let f = features(2, 2, 3, 2, 6);
        assert!(embed_special_token(
            SpecialToken::Entity(EntityId(9)),
            RelationId(0),
            &f,
            &store,
            &m,
            FusionSwitches::default(),
            false,
            &mut rng(0)
        )
        .is_err());
    }

    #[test]
    fn gradients_match_finite_differences_with_noise() {
        // noise on, but the draw is replayed from the same seed each call
        let mut store = ParamStore::new();
        let m = module(&mut store, 3, 4, 5, 2);
        store.get_mut(m.gate.noise[0]).fill(0.3);
        store.get_mut(m.gate.noise[1]).fill(-0.2);
        store.get_mut(m.gate.temperature).assign(&array![[0.4, -0.7]]);
        let f = features(3, 2, 3, 4, 8);
        let probe = array![0.7, -1.1, 0.4, 0.9, -0.3];
        let tok = SpecialToken::Entity(EntityId(2));
        let loss = |s: &ParamStore| {
            let (o, _) =
                embed_special_token(tok, RelationId(1), &f, s, &m, FusionSwitches::default(), true, &mut rng(5))
                    .unwrap();
            o.vector.dot(&probe)
        };
        let (_, cache) =
            embed_special_token(tok, RelationId(1), &f, &store, &m, FusionSwitches::default(), true, &mut rng(5))
                .unwrap();
        let mut g = Grads::zeros_like(&store);
        embed_special_token_backward(&store, &m, &mut g, &cache, probe.view());
        let ids: Vec<_> = store.ids().collect();
        let (worst, bad) = gradcheck::check(&store, &g, &ids, 1e-6, 1e-5, loss);
        assert!(bad.is_empty(), "worst {worst}: {bad:?}");
    }
}
