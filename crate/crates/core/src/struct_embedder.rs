//! Structural feature pre-training: TuckER (primary) and TransE.
//!
//! TuckER scores `(h, r, t)` as the trilinear contraction
//! `sum_ijk W[i,j,k] e_h[i] w_r[j] e_t[k]` and is trained with 1-N softmax
//! cross-entropy over all tails of each `(h, r)` query. TransE scores
//! `-||e_h + w_r - e_t||` and is trained with a margin loss against
//! uniformly corrupted tails. Inverse relations get their own embeddings.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KgtError, Result};
use crate::feature_bank::{load_features, save_features, write_atomic, FeatureMatrix};
use crate::kg_store::{EntityId, KnowledgeGraph, RelationId, Split, Triple};
use crate::nn::{log_sum_exp, outer_add, softmax};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KgeKind {
    Tucker,
    Transe,
}

impl std::str::FromStr for KgeKind {
    type Err = KgtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tucker" => Ok(KgeKind::Tucker),
            "transe" => Ok(KgeKind::Transe),
            other => Err(KgtError::Config(format!(
                "unknown kge kind `{other}` (expected tucker or transe)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KgeConfig {
    pub kind: KgeKind,
    pub dim: usize,
    pub negatives_per_positive: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// TransE margin.
    pub margin: f64,
}

impl Default for KgeConfig {
    fn default() -> Self {
        Self {
            kind: KgeKind::Tucker,
            dim: 256,
            negatives_per_positive: 1,
            epochs: 100,
            batch_size: 128,
            learning_rate: 5e-3,
            seed: 0,
            margin: 1.0,
        }
    }
}

impl KgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(KgtError::Config("kge dim must be positive".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(KgtError::Config("negatives_per_positive must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(KgtError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct KgeModel {
    pub kind: KgeKind,
    dim: usize,
    store: ParamStore,
    entity: ParamId,
    relation: ParamId,
    /// `dim x (dim * dim)`; `core[i, j * dim + k] = W[i, j, k]`.
    core: Option<ParamId>,
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct KgeLog {
    pub epoch_loss: Vec<f64>,
}

impl KgeModel {
    /// Gaussian initialization with std `1/sqrt(dim)` for every tensor.
    pub fn init(kind: KgeKind, num_entities: usize, num_relations: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (dim as f64).sqrt();
        let mut store = ParamStore::new();
        let entity = store.add_gaussian("entity", num_entities, dim, std, &mut rng);
        let relation = store.add_gaussian("relation", num_relations, dim, std, &mut rng);
        let core = (kind == KgeKind::Tucker)
            .then(|| store.add_gaussian("core", dim, dim * dim, std, &mut rng));
        Self {
            kind,
            dim,
            store,
            entity,
            relation,
            core,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entity_emb(&self) -> &Array2<f64> {
        self.store.get(self.entity)
    }

    pub fn relation_emb(&self) -> &Array2<f64> {
        self.store.get(self.relation)
    }

    pub fn entity_emb_mut(&mut self) -> &mut Array2<f64> {
        self.store.get_mut(self.entity)
    }

    pub fn relation_emb_mut(&mut self) -> &mut Array2<f64> {
        self.store.get_mut(self.relation)
    }

    /// Core tensor value `W[i, j, k]` (TuckER only).
    pub fn core(&self, i: usize, j: usize, k: usize) -> f64 {
        let c = self.store.get(self.core.expect("core tensor only exists for TuckER"));
        c[[i, j * self.dim + k]]
    }

    pub fn core_mut(&mut self) -> Option<&mut Array2<f64>> {
        self.core.map(|c| self.store.get_mut(c))
    }

    /// `M[i, k] = sum_j w[j] W[i, j, k]`.
    fn relation_matrix(&self, w: ArrayView1<f64>) -> Array2<f64> {
        let d = self.dim;
        let core = self.store.get(self.core.unwrap());
        let mut m = Array2::zeros((d, d));
        for (j, &wj) in w.iter().enumerate() {
            if wj != 0.0 {
                m.scaled_add(wj, &core.slice(ndarray::s![.., j * d..(j + 1) * d]));
            }
        }
        m
    }

    pub fn score(&self, h: EntityId, r: RelationId, t: EntityId) -> f64 {
        let e = self.entity_emb();
        let w = self.relation_emb().row(r.index());
        match self.kind {
            KgeKind::Tucker => {
                let m = self.relation_matrix(w);
                e.row(h.index()).dot(&m).dot(&e.row(t.index()))
            }
            KgeKind::Transe => {
                let v = &e.row(h.index()) + &w - e.row(t.index());
                -v.dot(&v).sqrt()
            }
        }
    }

    /// Scores of `(h, r, e)` for every entity `e`.
    pub fn score_all_tails(&self, h: EntityId, r: RelationId) -> Array1<f64> {
        let e = self.entity_emb();
        let w = self.relation_emb().row(r.index());
        match self.kind {
            KgeKind::Tucker => {
                let x = e.row(h.index()).dot(&self.relation_matrix(w));
                e.dot(&x)
            }
            KgeKind::Transe => {
                let q = &e.row(h.index()) + &w;
                Array1::from_iter(e.rows().into_iter().map(|row| {
                    let v = &q - &row;
                    -v.dot(&v).sqrt()
                }))
            }
        }
    }

    /// Raw entity and relation tables, unnormalized.
    pub fn export_structural_features(&self) -> Result<(FeatureMatrix, FeatureMatrix)> {
        Ok((
            FeatureMatrix::from_array(self.entity_emb())?,
            FeatureMatrix::from_array(self.relation_emb())?,
        ))
    }

    /// Writes `entity.kgtf`, `relation.kgtf`, `core.kgtf` (TuckER) and
    /// `kge_meta.json`.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (e, r) = self.export_structural_features()?;
        save_features(&e, &dir.join("entity.kgtf"))?;
        save_features(&r, &dir.join("relation.kgtf"))?;
        if let Some(c) = self.core {
            save_features(&FeatureMatrix::from_array(self.store.get(c))?, &dir.join("core.kgtf"))?;
        }
        let meta = KgeMeta {
            kind: self.kind,
            dim: self.dim,
            num_entities: e.rows(),
            num_relations: r.rows(),
            seed,
        };
        write_atomic(&dir.join("kge_meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: KgeMeta = serde_json::from_slice(&std::fs::read(dir.join("kge_meta.json"))?)?;
        let mut m = Self::init(meta.kind, meta.num_entities, meta.num_relations, meta.dim, 0);
        let e = load_features(&dir.join("entity.kgtf"))?.to_array();
        let r = load_features(&dir.join("relation.kgtf"))?.to_array();
        if e.dim() != m.entity_emb().dim() || r.dim() != m.relation_emb().dim() {
            return Err(KgtError::Format("kge tables disagree with kge_meta.json".into()));
        }
        *m.entity_emb_mut() = e;
        *m.relation_emb_mut() = r;
        if let Some(c) = m.core {
            let core = load_features(&dir.join("core.kgtf"))?.to_array();
            if core.dim() != m.store.get(c).dim() {
                return Err(KgtError::Format("core tensor shape mismatch".into()));
            }
            *m.store.get_mut(c) = core;
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KgeMeta {
    pub kind: KgeKind,
    pub dim: usize,
    pub num_entities: usize,
    pub num_relations: usize,
    pub seed: u64,
}

pub fn kge_score(model: &KgeModel, h: EntityId, r: RelationId, t: EntityId) -> f64 {
    model.score(h, r, t)
}

/// Trains on the (augmented) train split only.
pub fn train_kge(kg: &KnowledgeGraph, config: &KgeConfig) -> Result<(KgeModel, KgeLog)> {
    config.validate()?;
    if !kg.is_augmented() {
        return Err(KgtError::NotAugmented);
    }
    let mut model = KgeModel::init(
        config.kind,
        kg.num_entities(),
        kg.num_relations(),
        config.dim,
        config.seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.learning_rate,
            ..Default::default()
        },
        &model.store,
    );
    let mut grads = Grads::zeros_like(&model.store);
    let mut log = KgeLog::default();
    let train = kg.split(Split::Train);

    match config.kind {
        KgeKind::Tucker => {
            let mut groups: BTreeMap<(EntityId, RelationId), Vec<EntityId>> = BTreeMap::new();
            for t in train {
                groups.entry((t.head, t.relation)).or_default().push(t.tail);
            }
            let mut queries: Vec<_> = groups.into_iter().collect();
            let per_batch = (config.batch_size / 4).max(1);
            for epoch in 0..config.epochs {
                queries.shuffle(&mut rng);
                let mut total = 0.0;
                for batch in queries.chunks(per_batch) {
                    grads.zero();
                    let n: usize = batch.iter().map(|(_, t)| t.len()).sum();
                    let mut loss = 0.0;
                    for ((h, r), tails) in batch {
                        loss += model.tucker_query_backward(*h, *r, tails, 1.0 / n as f64, &mut grads);
                    }
                    if !loss.is_finite() {
                        return Err(KgtError::NonFinite(format!(
                            "TuckER loss at epoch {epoch}, first query {:?}",
                            batch[0].0
                        )));
                    }
                    total += loss;
                    adam.step(&mut model.store, &grads);
                }
                log.epoch_loss.push(total / train.len() as f64);
            }
        }
        KgeKind::Transe => {
            let mut triples: Vec<Triple> = train.to_vec();
            let ne = kg.num_entities();
            for epoch in 0..config.epochs {
                triples.shuffle(&mut rng);
                let mut total = 0.0;
                for batch in triples.chunks(config.batch_size) {
                    grads.zero();
                    let scale = 1.0 / (batch.len() * config.negatives_per_positive) as f64;
                    let mut loss = 0.0;
                    for t in batch {
                        for _ in 0..config.negatives_per_positive {
                            let mut neg = EntityId(rng.gen_range(0..ne) as u32);
                            if ne > 1 {
                                while neg == t.tail {
                                    neg = EntityId(rng.gen_range(0..ne) as u32);
                                }
                            }
                            loss += model.transe_pair_backward(*t, neg, config.margin, scale, &mut grads);
                        }
                    }
                    if !loss.is_finite() {
                        return Err(KgtError::NonFinite(format!(
                            "TransE loss at epoch {epoch}, first triple {:?}",
                            batch[0]
                        )));
                    }
                    total += loss;
                    adam.step(&mut model.store, &grads);
                }
                log.epoch_loss.push(total / train.len() as f64);
            }
        }
    }
    if let Err(name) = model.store.all_finite() {
        return Err(KgtError::NonFinite(format!("kge parameter `{name}`")));
    }
    Ok((model, log))
}

/// Rank AUC of train triples against one tail corruption each. Corruptions
/// are drawn uniformly from entities not known as a train tail of the
/// query; ties count one half.
pub fn corruption_auc(model: &KgeModel, kg: &KnowledgeGraph, seed: u64) -> Result<f64> {
    let train = kg.split(Split::Train);
    if train.is_empty() {
        return Err(KgtError::EmptySplit("train"));
    }
    let mut known: BTreeMap<(EntityId, RelationId), Vec<EntityId>> = BTreeMap::new();
    for t in train {
        known.entry((t.head, t.relation)).or_default().push(t.tail);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ne = kg.num_entities();
    let mut scored: Vec<(f64, bool)> = Vec::with_capacity(2 * train.len());
    for t in train {
        let tails = &known[&(t.head, t.relation)];
        if tails.len() >= ne {
            continue;
        }
        let neg = loop {
            let e = EntityId(rng.gen_range(0..ne) as u32);
            if !tails.contains(&e) {
                break e;
            }
        };
        scored.push((model.score(t.head, t.relation, t.tail), true));
        scored.push((model.score(t.head, t.relation, neg), false));
    }
    if scored.is_empty() {
        return Err(KgtError::Invalid("no query has a possible corruption".into()));
    }
    if scored.iter().any(|(s, _)| !s.is_finite()) {
        return Err(KgtError::NonFinite("kge score".into()));
    }
    // Mann-Whitney U with midranks for ties
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j + 1 < scored.len() && scored[j + 1].0 == scored[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        pos_rank_sum += mid * scored[i..=j].iter().filter(|s| s.1).count() as f64;
        i = j + 1;
    }
    let n = (scored.len() / 2) as f64;
    Ok((pos_rank_sum - n * (n + 1.0) / 2.0) / (n * n))
}

impl KgeModel {
    /// Sum of per-tail softmax cross-entropies for one `(h, r)` query;
    /// gradients are accumulated with weight `scale`. Returns the unscaled sum.
    fn tucker_query_backward(
        &self,
        h: EntityId,
        r: RelationId,
        tails: &[EntityId],
        scale: f64,
        grads: &mut Grads,
    ) -> f64 {
        let d = self.dim;
        let e = self.entity_emb();
        let w = self.relation_emb().row(r.index());
        let eh = e.row(h.index());
        let m = self.relation_matrix(w);
        let x = eh.dot(&m);
        let scores = e.dot(&x);
        let p = softmax(scores.view());
        let lse = log_sum_exp(scores.view());
        let mut loss = 0.0;
        let mut dscore = &p * (tails.len() as f64);
        for t in tails {
            loss += lse - scores[t.index()];
            dscore[t.index()] -= 1.0;
        }
        dscore *= scale;

        let dx = e.t().dot(&dscore);
        let dh = m.dot(&dx);
        let mut dm = Array2::zeros((d, d));
        outer_add(&mut dm, eh, dx.view());

        let core_id = self.core.unwrap();
        let core = self.store.get(core_id);
        let mut dw = Array1::zeros(d);
        for j in 0..d {
            dw[j] = (&core.slice(ndarray::s![.., j * d..(j + 1) * d]) * &dm).sum();
        }
        if let Some(g) = grads.get_mut(core_id) {
            for (j, &wj) in w.iter().enumerate() {
                g.slice_mut(ndarray::s![.., j * d..(j + 1) * d]).scaled_add(wj, &dm);
            }
        }
        if let Some(g) = grads.get_mut(self.entity) {
            outer_add(g, dscore.view(), x.view());
            g.row_mut(h.index()).scaled_add(1.0, &dh);
        }
        if let Some(g) = grads.get_mut(self.relation) {
            g.row_mut(r.index()).scaled_add(1.0, &dw);
        }
        loss
    }

    fn transe_pair_backward(&self, t: Triple, neg: EntityId, margin: f64, scale: f64, grads: &mut Grads) -> f64 {
        let e = self.entity_emb();
        let q = &e.row(t.head.index()) + &self.relation_emb().row(t.relation.index());
        let vp = &q - &e.row(t.tail.index());
        let vn = &q - &e.row(neg.index());
        let dp = vp.dot(&vp).sqrt();
        let dn = vn.dot(&vn).sqrt();
        let loss = (margin + dp - dn).max(0.0);
        if loss <= 0.0 {
            return 0.0;
        }
        let gp = if dp > 0.0 { &vp / dp } else { Array1::zeros(vp.len()) };
        let gn = if dn > 0.0 { &vn / dn } else { Array1::zeros(vn.len()) };
        let dq = &gp - &gn;
        if let Some(g) = grads.get_mut(self.entity) {
            g.row_mut(t.head.index()).scaled_add(scale, &dq);
            g.row_mut(t.tail.index()).scaled_add(-scale, &gp);
            g.row_mut(neg.index()).scaled_add(scale, &gn);
        }
        if let Some(g) = grads.get_mut(self.relation) {
            g.row_mut(t.relation.index()).scaled_add(scale, &dq);
        }
        loss
    }
}
