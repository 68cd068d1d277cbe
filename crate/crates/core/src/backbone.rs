//! Extended vocabulary, prompt construction and a small decoder-only
//! transformer (pre-RMSNorm, rotary causal attention, SiLU-gated FFN).
//!
//! Token ids `0..base` are ordinary words; entity `k` is token `base + k` and
//! relation `r` is token `base + |E| + r`.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KgtError, Result};
use crate::kg_store::{EntityId, KnowledgeGraph, RelationId};
use crate::nn::{dropout_mask, matmul_tn_add, rms_norm, rms_norm_backward, silu, silu_grad, RmsCache};
use crate::params::{Grads, ParamId, ParamStore};
use crate::specialized_embedding::SpecialToken;

pub const BOS: &str = "<bos>";
pub const QUERY: &str = "<query>";
pub const UNK: &str = "<unk>";

const PUNCT: &[char] = &['.', ',', ':', ';', '?', '!', '(', ')', '"'];

/// Lowercased words with punctuation split off as separate tokens.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut cur = String::new();
        for c in raw.chars() {
            if PUNCT.contains(&c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.extend(c.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

const SCAFFOLD_INTRO: &str = "Suppose that you are an excellent linguist studying a new three-word language for knowledge graph. Given the following dictionary: Input Type Description";
const SCAFFOLD_HEAD: &str = "Head entity";
const SCAFFOLD_RELATION: &str = "Relation";
const SCAFFOLD_ASK: &str = "Please complete the last word (?) of the sentence:";

/// Marker tokens, the prompt scaffold, and every word used in entity
/// descriptions or relation names, in first-seen order.
pub fn default_base_tokens(kg: &KnowledgeGraph) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    let mut push = |w: String, out: &mut Vec<String>| {
        if seen.insert(w.clone()) {
            out.push(w);
        }
    };
    for m in [BOS, QUERY, UNK] {
        push(m.to_string(), &mut out);
    }
    for text in [SCAFFOLD_INTRO, SCAFFOLD_HEAD, SCAFFOLD_RELATION, SCAFFOLD_ASK] {
        for w in words(text) {
            push(w, &mut out);
        }
    }
    for t in kg.entity_texts().chain(kg.relation_texts()) {
        for w in words(t) {
            push(w, &mut out);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    base: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    num_entities: usize,
    num_relations: usize,
}

/// What a token id refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Base(u32),
    Special(SpecialToken),
}

impl Vocabulary {
    pub fn extend(kg: &KnowledgeGraph, base: Vec<String>) -> Result<Self> {
        Self::from_parts(base, kg.num_entities(), kg.num_relations())
    }

    pub fn from_parts(base: Vec<String>, num_entities: usize, num_relations: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(base.len());
        for (i, w) in base.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(KgtError::Invalid(format!("duplicate base token `{w}`")));
            }
        }
        for marker in [BOS, QUERY] {
            if !index.contains_key(marker) {
                return Err(KgtError::Invalid(format!("base vocabulary lacks `{marker}`")));
            }
        }
        Ok(Self {
            base,
            index,
            num_entities,
            num_relations,
        })
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Self::from_parts(self.base, self.num_entities, self.num_relations)
    }

    pub fn base_len(&self) -> usize {
        self.base.len()
    }

    pub fn base_tokens(&self) -> &[String] {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.num_entities + self.num_relations
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entity_token(&self, e: EntityId) -> u32 {
        (self.base.len() + e.index()) as u32
    }

    pub fn relation_token(&self, r: RelationId) -> u32 {
        (self.base.len() + self.num_entities + r.index()) as u32
    }

    pub fn word(&self, w: &str) -> u32 {
        self.index
            .get(w)
            .or_else(|| self.index.get(UNK))
            .copied()
            .unwrap_or(0)
    }

    pub fn slot(&self, id: u32) -> Result<Slot> {
        let id_us = id as usize;
        let b = self.base.len();
        if id_us < b {
            Ok(Slot::Base(id))
        } else if id_us < b + self.num_entities {
            Ok(Slot::Special(SpecialToken::Entity(EntityId((id_us - b) as u32))))
        } else if id_us < self.len() {
            Ok(Slot::Special(SpecialToken::Relation(RelationId(
                (id_us - b - self.num_entities) as u32,
            ))))
        } else {
            Err(KgtError::Invalid(format!("token id {id} outside vocabulary of {}", self.len())))
        }
    }

    pub fn route(&self, tokens: &[u32]) -> Result<Vec<Slot>> {
        tokens.iter().map(|&t| self.slot(t)).collect()
    }
}

pub fn extend_vocabulary(kg: &KnowledgeGraph, base: Vec<String>) -> Result<Vocabulary> {
    Vocabulary::extend(kg, base)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    #[default]
    Minimal,
    Templated,
}

impl std::str::FromStr for PromptMode {
    type Err = KgtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minimal" => Ok(PromptMode::Minimal),
            "templated" => Ok(PromptMode::Templated),
            other => Err(KgtError::Config(format!(
                "unknown prompt mode `{other}` (expected minimal or templated)"
            ))),
        }
    }
}

/// Token ids for the query `(h, r, ?)`; the last token is always `<query>`.
pub fn build_prompt(
    vocab: &Vocabulary,
    kg: &KnowledgeGraph,
    h: EntityId,
    r: RelationId,
    mode: PromptMode,
    max_seq_len: usize,
) -> Result<Vec<u32>> {
    if h.index() >= kg.num_entities() || r.index() >= kg.num_relations() {
        return Err(KgtError::Invalid(format!("query ({h:?}, {r:?}) out of range")));
    }
    let th = vocab.entity_token(h);
    let tr = vocab.relation_token(r);
    let mut seq = vec![vocab.word(BOS)];
    match mode {
        PromptMode::Minimal => seq.extend([th, tr]),
        PromptMode::Templated => {
            let text = |t: &str, seq: &mut Vec<u32>| seq.extend(words(t).iter().map(|w| vocab.word(w)));
            text(SCAFFOLD_INTRO, &mut seq);
            seq.push(th);
            text(SCAFFOLD_HEAD, &mut seq);
            text(kg.entity_text(h), &mut seq);
            seq.push(tr);
            text(SCAFFOLD_RELATION, &mut seq);
            text(kg.relation_name(r), &mut seq);
            text(SCAFFOLD_ASK, &mut seq);
            seq.extend([th, tr, vocab.word("?")]);
        }
    }
    seq.push(vocab.word(QUERY));
    if seq.len() > max_seq_len {
        return Err(KgtError::Invalid(format!(
            "prompt has {} tokens, max_seq_len is {max_seq_len}",
            seq.len()
        )));
    }
    Ok(seq)
}

/// Looks up base rows in the embedding table and asks `special` for the
/// rest.
pub fn embed_sequence<F>(store: &ParamStore, table: ParamId, slots: &[Slot], mut special: F) -> Result<Array2<f64>>
where
    F: FnMut(SpecialToken) -> Result<Array1<f64>>,
{
    let t = store.get(table);
    let d = t.ncols();
    let mut x = Array2::zeros((slots.len(), d));
    for (i, slot) in slots.iter().enumerate() {
        match *slot {
            Slot::Base(id) => {
                if id as usize >= t.nrows() {
                    return Err(KgtError::Invalid(format!("base token {id} has no embedding row")));
                }
                x.row_mut(i).assign(&t.row(id as usize));
            }
            Slot::Special(tok) => {
                let v = special(tok)?;
                if v.len() != d {
                    return Err(KgtError::Dimension {
                        what: format!("embedding of {tok:?}"),
                        expected: d,
                        got: v.len(),
                    });
                }
                x.row_mut(i).assign(&v);
            }
        }
    }
    Ok(x)
}

/// Sends base-row gradients to the table and returns the special-token ones.
pub fn embed_sequence_backward(
    grads: &mut Grads,
    table: ParamId,
    slots: &[Slot],
    dx: ArrayView2<f64>,
) -> Vec<(SpecialToken, Array1<f64>)> {
    let mut out = Vec::new();
    for (i, slot) in slots.iter().enumerate() {
        match *slot {
            Slot::Base(id) => {
                if let Some(g) = grads.get_mut(table) {
                    g.row_mut(id as usize).scaled_add(1.0, &dx.row(i));
                }
            }
            Slot::Special(tok) => out.push((tok, dx.row(i).to_owned())),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Transformer

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionLora {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for AttentionLora {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    /// Freeze the backbone and adapt query/value projections with LoRA.
    pub attention_lora: Option<AttentionLora>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            heads: 4,
            ffn_mult: 2,
            max_seq_len: 256,
            rope_base: 10_000.0,
            attention_lora: None,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(KgtError::Config(format!(
                "hidden ({}) must be a positive multiple of heads ({})",
                self.hidden, self.heads
            )));
        }
        if (self.hidden / self.heads) % 2 != 0 {
            return Err(KgtError::Config("rotary positions need an even head dimension".into()));
        }
        if self.max_seq_len == 0 {
            return Err(KgtError::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoraPair {
    /// `rank x d`.
    pub a: ParamId,
    /// `d x rank`, zero-initialized.
    pub b: ParamId,
    pub scale: f64,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerParams {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
    pub lora_q: Option<LoraPair>,
    pub lora_v: Option<LoraPair>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: TransformerConfig,
    pub token_table: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_norm: ParamId,
}

struct LoraCache {
    x_dropped: Array2<f64>,
    mask: Option<Array2<f64>>,
    down: Array2<f64>,
}

struct LayerCache {
    norm1: Vec<RmsCache>,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    norm2: Vec<RmsCache>,
    b: Array2<f64>,
    gate_pre: Array2<f64>,
    up: Array2<f64>,
    hidden: Array2<f64>,
    lora_q: Option<LoraCache>,
    lora_v: Option<LoraCache>,
}

pub struct BackboneCache {
    layers: Vec<LayerCache>,
    final_norm: RmsCache,
    seq_len: usize,
}

impl BackboneCache {
    /// Attention probabilities of layer `l`, head `h` (`n x n`).
    pub fn attention(&self, l: usize, h: usize) -> &Array2<f64> {
        &self.layers[l].probs[h]
    }
}

fn rows_norm(x: ArrayView2<f64>, gain: ArrayView1<f64>) -> (Array2<f64>, Vec<RmsCache>) {
    let mut out = Array2::zeros(x.raw_dim());
    let mut caches = Vec::with_capacity(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let (y, c) = rms_norm(row, gain);
        out.row_mut(i).assign(&y);
        caches.push(c);
    }
    (out, caches)
}

fn rows_norm_backward(
    caches: &[RmsCache],
    gain: ArrayView1<f64>,
    dy: ArrayView2<f64>,
    dgain: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    let mut dx = Array2::zeros(dy.raw_dim());
    let mut acc = Array1::zeros(gain.len());
    for (i, c) in caches.iter().enumerate() {
        let (d, g) = rms_norm_backward(c, gain, dy.row(i));
        dx.row_mut(i).assign(&d);
        acc += &g;
    }
    if let Some(dg) = dgain {
        dg.row_mut(0).scaled_add(1.0, &acc);
    }
    dx
}

/// Rotates consecutive pairs within each head; `inverse` applies the
/// transpose rotation (used for gradients).
fn apply_rope(x: &mut Array2<f64>, heads: usize, base: f64, inverse: bool) {
    let hd = x.ncols() / heads;
    for (pos, mut row) in x.rows_mut().into_iter().enumerate() {
        for h in 0..heads {
            for i in 0..hd / 2 {
                let theta = pos as f64 * base.powf(-(2.0 * i as f64) / hd as f64);
                let (sin, cos) = theta.sin_cos();
                let sin = if inverse { -sin } else { sin };
                let j = h * hd + 2 * i;
                let (x0, x1) = (row[j], row[j + 1]);
                row[j] = x0 * cos - x1 * sin;
                row[j + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

impl Backbone {
    pub fn new<R: Rng>(store: &mut ParamStore, config: TransformerConfig, base_vocab: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let f = config.hidden * config.ffn_mult;
        let std_d = 1.0 / (d as f64).sqrt();
        let std_f = 1.0 / (f as f64).sqrt();
        let token_table = store.add_gaussian("backbone.tokens", base_vocab, d, std_d, rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |n: &str| format!("backbone.layer{l}.{n}");
            let attn_norm = store.add_filled(p("attn_norm"), 1, d, 1.0);
            let wq = store.add_gaussian(p("wq"), d, d, std_d, rng);
            let wk = store.add_gaussian(p("wk"), d, d, std_d, rng);
            let wv = store.add_gaussian(p("wv"), d, d, std_d, rng);
            let wo = store.add_gaussian(p("wo"), d, d, std_d, rng);
            let ffn_norm = store.add_filled(p("ffn_norm"), 1, d, 1.0);
            let w_gate = store.add_gaussian(p("w_gate"), f, d, std_d, rng);
            let w_up = store.add_gaussian(p("w_up"), f, d, std_d, rng);
            let w_down = store.add_gaussian(p("w_down"), d, f, std_f, rng);
            let (lora_q, lora_v) = match config.attention_lora {
                Some(lc) => {
                    let pair = |n: &str, store: &mut ParamStore, rng: &mut R| LoraPair {
                        a: store.add_gaussian(p(&format!("{n}.lora_a")), lc.rank, d, 1.0 / (lc.rank as f64).sqrt(), rng),
                        b: store.add_filled(p(&format!("{n}.lora_b")), d, lc.rank, 0.0),
                        scale: lc.alpha / lc.rank as f64,
                        dropout: lc.dropout,
                    };
                    (Some(pair("wq", store, rng)), Some(pair("wv", store, rng)))
                }
                None => (None, None),
            };
            layers.push(LayerParams {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                w_gate,
                w_up,
                w_down,
                lora_q,
                lora_v,
            });
        }
        let final_norm = store.add_filled("backbone.final_norm", 1, d, 1.0);
        let bb = Self {
            config,
            token_table,
            layers,
            final_norm,
        };
        if config.attention_lora.is_some() {
            for id in bb.frozen_under_lora() {
                store.set_trainable(id, false);
            }
        }
        Ok(bb)
    }

    /// Backbone tensors that stay fixed when attention-LoRA is on.
    pub fn frozen_under_lora(&self) -> Vec<ParamId> {
        let mut v = vec![self.token_table, self.final_norm];
        for l in &self.layers {
            v.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.ffn_norm, l.w_gate, l.w_up, l.w_down]);
        }
        v
    }

    fn project_with_lora<R: Rng>(
        store: &ParamStore,
        a: &Array2<f64>,
        w: ParamId,
        lora: Option<LoraPair>,
        train: bool,
        rng: &mut R,
    ) -> (Array2<f64>, Option<LoraCache>) {
        let mut y = a.dot(&store.get(w).t());
        let cache = lora.map(|lp| {
            let mask = dropout_mask(a.len(), lp.dropout, train, rng)
                .map(|m| m.into_shape_with_order(a.raw_dim()).expect("mask shape"));
            let x_dropped = match &mask {
                Some(m) => a * m,
                None => a.clone(),
            };
            let down = x_dropped.dot(&store.get(lp.a).t());
            y.scaled_add(lp.scale, &down.dot(&store.get(lp.b).t()));
            LoraCache {
                x_dropped,
                mask,
                down,
            }
        });
        (y, cache)
    }

    /// Runs the stack; returns the final-normed hidden state of the last
    /// position.
    pub fn forward<R: Rng>(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Array1<f64>, BackboneCache)> {
        let (h, cache) = self.run(store, x, train, rng)?;
        let last = h.nrows() - 1;
        let (y, final_norm) = rms_norm(h.row(last), store.vector(self.final_norm));
        Ok((
            y,
            BackboneCache {
                layers: cache,
                final_norm,
                seq_len: h.nrows(),
            },
        ))
    }

    /// Final-normed hidden states at every position (eval only).
    pub fn hidden_states<R: Rng>(&self, store: &ParamStore, x: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        let (h, _) = self.run(store, x, false, rng)?;
        Ok(rows_norm(h.view(), store.vector(self.final_norm)).0)
    }

    fn run<R: Rng>(
        &self,
        store: &ParamStore,
        x: ArrayView2<f64>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Array2<f64>, Vec<LayerCache>)> {
        let n = x.nrows();
        if n == 0 {
            return Err(KgtError::Invalid("empty input sequence".into()));
        }
        if x.ncols() != self.config.hidden {
            return Err(KgtError::Dimension {
                what: "backbone input width".into(),
                expected: self.config.hidden,
                got: x.ncols(),
            });
        }
        let heads = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (li, lp) in self.layers.iter().enumerate() {
            let (a, norm1) = rows_norm(h.view(), store.vector(lp.attn_norm));
            let (mut q, lora_q) = Self::project_with_lora(store, &a, lp.wq, lp.lora_q, train, rng);
            let mut k = a.dot(&store.get(lp.wk).t());
            let (v, lora_v) = Self::project_with_lora(store, &a, lp.wv, lp.lora_v, train, rng);
            apply_rope(&mut q, heads, self.config.rope_base, false);
            apply_rope(&mut k, heads, self.config.rope_base, false);
            let mut attn = Array2::zeros((n, self.config.hidden));
            let mut probs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let cols = s![.., hh * hd..(hh + 1) * hd];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                let mut p = qh.dot(&kh.t()) * scale;
                for i in 0..n {
                    let mut row = p.row_mut(i);
                    let m = row.slice(s![..=i]).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let mut z = 0.0;
                    for j in 0..n {
                        if j <= i {
                            row[j] = (row[j] - m).exp();
                            z += row[j];
                        } else {
                            row[j] = 0.0;
                        }
                    }
                    row /= z;
                }
                attn.slice_mut(cols).assign(&p.dot(&vh));
                probs.push(p);
            }
            let out = attn.dot(&store.get(lp.wo).t());
            let h_mid = &h + &out;
            let (b, norm2) = rows_norm(h_mid.view(), store.vector(lp.ffn_norm));
            let gate_pre = b.dot(&store.get(lp.w_gate).t());
            let up = b.dot(&store.get(lp.w_up).t());
            let hidden = gate_pre.mapv(silu) * &up;
            let ffn = hidden.dot(&store.get(lp.w_down).t());
            h = &h_mid + &ffn;
            if h.iter().any(|v| !v.is_finite()) {
                return Err(KgtError::NonFinite(format!("backbone layer {li}")));
            }
            caches.push(LayerCache {
                norm1,
                a,
                q,
                k,
                v,
                probs,
                attn,
                norm2,
                b,
                gate_pre,
                up,
                hidden,
                lora_q,
                lora_v,
            });
        }
        Ok((h, caches))
    }

    fn lora_backward(
        store: &ParamStore,
        grads: &mut Grads,
        lp: LoraPair,
        cache: &LoraCache,
        dy: &Array2<f64>,
        da: &mut Array2<f64>,
    ) {
        // y += scale * (x_drop A^T) B^T
        if let Some(g) = grads.get_mut(lp.b) {
            matmul_tn_add(g, (dy * lp.scale).view(), cache.down.view());
        }
        let ddown = dy.dot(store.get(lp.b)) * lp.scale;
        if let Some(g) = grads.get_mut(lp.a) {
            matmul_tn_add(g, ddown.view(), cache.x_dropped.view());
        }
        let mut dx = ddown.dot(store.get(lp.a));
        if let Some(m) = &cache.mask {
            dx *= m;
        }
        *da += &dx;
    }

    /// Backpropagates the gradient of the returned last hidden state to the
    /// input embeddings.
    pub fn backward(
        &self,
        store: &ParamStore,
        grads: &mut Grads,
        cache: &BackboneCache,
        dy: ArrayView1<f64>,
    ) -> Array2<f64> {
        let n = cache.seq_len;
        let d = self.config.hidden;
        let heads = self.config.heads;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let (dlast, dgain) = rms_norm_backward(&cache.final_norm, store.vector(self.final_norm), dy);
        if let Some(g) = grads.get_mut(self.final_norm) {
            g.row_mut(0).scaled_add(1.0, &dgain);
        }
        let mut dh = Array2::zeros((n, d));
        dh.row_mut(n - 1).assign(&dlast);

        for (lp, c) in self.layers.iter().zip(&cache.layers).rev() {
            // feed-forward
            if let Some(g) = grads.get_mut(lp.w_down) {
                matmul_tn_add(g, dh.view(), c.hidden.view());
            }
            let dhidden = dh.dot(store.get(lp.w_down));
            let dgate = &dhidden * &c.up * c.gate_pre.mapv(silu_grad);
            let dup = &dhidden * &c.gate_pre.mapv(silu);
            if let Some(g) = grads.get_mut(lp.w_gate) {
                matmul_tn_add(g, dgate.view(), c.b.view());
            }
            if let Some(g) = grads.get_mut(lp.w_up) {
                matmul_tn_add(g, dup.view(), c.b.view());
            }
            let db = dgate.dot(store.get(lp.w_gate)) + dup.dot(store.get(lp.w_up));
            let dmid = rows_norm_backward(&c.norm2, store.vector(lp.ffn_norm), db.view(), grads.get_mut(lp.ffn_norm));
            let dh_mid = &dh + &dmid;

            // attention
            if let Some(g) = grads.get_mut(lp.wo) {
                matmul_tn_add(g, dh_mid.view(), c.attn.view());
            }
            let dattn = dh_mid.dot(store.get(lp.wo));
            let mut dq = Array2::zeros((n, d));
            let mut dk = Array2::zeros((n, d));
            let mut dv = Array2::zeros((n, d));
            for hh in 0..heads {
                let cols = s![.., hh * hd..(hh + 1) * hd];
                let p = &c.probs[hh];
                let do_h = dattn.slice(cols);
                let dp = do_h.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&p.t().dot(&do_h));
                let row_dot = (&dp * p).sum_axis(Axis(1));
                let mut dsc = (&dp - &row_dot.insert_axis(Axis(1))) * p;
                dsc *= scale;
                dq.slice_mut(cols).assign(&dsc.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&dsc.t().dot(&c.q.slice(cols)));
            }
            apply_rope(&mut dq, heads, self.config.rope_base, true);
            apply_rope(&mut dk, heads, self.config.rope_base, true);
            for (w, dw) in [(lp.wq, &dq), (lp.wk, &dk), (lp.wv, &dv)] {
                if let Some(g) = grads.get_mut(w) {
                    matmul_tn_add(g, dw.view(), c.a.view());
                }
            }
            let mut da = dq.dot(store.get(lp.wq)) + dk.dot(store.get(lp.wk)) + dv.dot(store.get(lp.wv));
            if let (Some(l), Some(lc)) = (lp.lora_q, &c.lora_q) {
                Self::lora_backward(store, grads, l, lc, &dq, &mut da);
            }
            if let (Some(l), Some(lc)) = (lp.lora_v, &c.lora_v) {
                Self::lora_backward(store, grads, l, lc, &dv, &mut da);
            }
            let dx = rows_norm_backward(&c.norm1, store.vector(lp.attn_norm), da.view(), grads.get_mut(lp.attn_norm));
            dh = dh_mid + dx;
        }
        dh
    }
}
