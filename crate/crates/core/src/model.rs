//! The assembled model: specialized token embeddings feeding the backbone,
//! whose last hidden state drives the dual-view predictor.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    build_prompt, default_base_tokens, embed_sequence, embed_sequence_backward, Backbone, PromptMode, Slot,
    TransformerConfig, Vocabulary,
};
use crate::error::{KgtError, Result};
use crate::feature_bank::FeatureBank;
use crate::kg_store::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::params::{Grads, ParamId, ParamStore};
use crate::predictor::{ce_loss, ce_loss_grad, PredictionLogits, Predictor, ScalerMode};
use crate::specialized_embedding::{
    embed_special_token, embed_special_token_backward, gating_relation, DualFeatures, FusedEmbedding,
    FusionSwitches, Modality, SpecialToken, SpecializedEmbedding, TokenCache,
};

/// One row of the ablation table, or the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSetting {
    #[default]
    Full,
    StructOnly,
    TextOnly,
    NoStructInput,
    NoTextInput,
    NoStructPred,
    NoTextPred,
    NoNoise,
    NoRelTemp,
    NoLls,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 10] = [
        AblationSetting::Full,
        AblationSetting::StructOnly,
        AblationSetting::TextOnly,
        AblationSetting::NoStructInput,
        AblationSetting::NoTextInput,
        AblationSetting::NoStructPred,
        AblationSetting::NoTextPred,
        AblationSetting::NoNoise,
        AblationSetting::NoRelTemp,
        AblationSetting::NoLls,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSetting::Full => "full",
            AblationSetting::StructOnly => "struct_only",
            AblationSetting::TextOnly => "text_only",
            AblationSetting::NoStructInput => "no_struct_input",
            AblationSetting::NoTextInput => "no_text_input",
            AblationSetting::NoStructPred => "no_struct_pred",
            AblationSetting::NoTextPred => "no_text_pred",
            AblationSetting::NoNoise => "no_noise",
            AblationSetting::NoRelTemp => "no_rel_temp",
            AblationSetting::NoLls => "no_lls",
        }
    }

    /// Row label in the ablation table (`-` for the full model).
    pub fn row_id(self) -> &'static str {
        match self {
            AblationSetting::Full => "-",
            AblationSetting::StructOnly => "1.1",
            AblationSetting::TextOnly => "1.2",
            AblationSetting::NoStructInput => "2.1",
            AblationSetting::NoTextInput => "2.2",
            AblationSetting::NoStructPred => "2.3",
            AblationSetting::NoTextPred => "2.4",
            AblationSetting::NoNoise => "2.5",
            AblationSetting::NoRelTemp => "2.6",
            AblationSetting::NoLls => "2.7",
        }
    }

    fn input_streams(self) -> (bool, bool) {
        match self {
            AblationSetting::StructOnly | AblationSetting::NoTextInput => (false, true),
            AblationSetting::TextOnly | AblationSetting::NoStructInput => (true, false),
            _ => (true, true),
        }
    }

    fn prediction_views(self) -> (bool, bool) {
        match self {
            AblationSetting::StructOnly | AblationSetting::NoTextPred => (false, true),
            AblationSetting::TextOnly | AblationSetting::NoStructPred => (true, false),
            _ => (true, true),
        }
    }
}

impl fmt::Display for AblationSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationSetting {
    type Err = KgtError;

    fn from_str(s: &str) -> Result<Self> {
        AblationSetting::ALL
            .into_iter()
            .find(|a| a.name() == s || a.row_id() == s)
            .ok_or_else(|| {
                let names: Vec<_> = AblationSetting::ALL.iter().map(|a| a.name()).collect();
                KgtError::Config(format!("unknown ablation `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    pub prompt_mode: PromptMode,
    pub lora_rank: usize,
    /// Dropout on the textual projector and textual head.
    pub text_dropout: f64,
    /// Dropout on the structural projector and structural head.
    pub struct_dropout: f64,
    pub scalers: ScalerMode,
    pub ablation: AblationSetting,
    /// Manual override of the gate noise; must agree with `ablation`.
    pub noise: Option<bool>,
    /// Manual override of the per-relation temperature; must agree with
    /// `ablation`.
    pub relation_temperature: Option<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            prompt_mode: PromptMode::Minimal,
            lora_rank: 8,
            text_dropout: 0.2,
            struct_dropout: 0.4,
            scalers: ScalerMode::Learnable,
            ablation: AblationSetting::Full,
            noise: None,
            relation_temperature: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.lora_rank == 0 {
            return Err(KgtError::Config("lora_rank must be positive".into()));
        }
        for (name, p) in [("text_dropout", self.text_dropout), ("struct_dropout", self.struct_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(KgtError::Config(format!("{name} must be in [0, 1), got {p}")));
            }
        }
        Ok(())
    }
}

/// Active switches after reconciling the ablation with manual overrides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedAblation {
    pub switches: FusionSwitches,
    pub views: (bool, bool),
    pub scalers: ScalerMode,
}

pub fn resolve_ablation(config: &ModelConfig) -> Result<ResolvedAblation> {
    let a = config.ablation;
    let conflict = |what: &str| {
        Err(KgtError::Conflict(format!(
            "ablation `{a}` contradicts the manual `{what}` override"
        )))
    };
    let noise = match (a, config.noise) {
        (AblationSetting::NoNoise, Some(true)) => return conflict("noise"),
        (AblationSetting::NoNoise, _) => false,
        (_, v) => v.unwrap_or(true),
    };
    let temperature = match (a, config.relation_temperature) {
        (AblationSetting::NoRelTemp, Some(true)) => return conflict("relation_temperature"),
        (AblationSetting::NoRelTemp, _) => false,
        (_, v) => v.unwrap_or(true),
    };
    let scalers = match (a, config.scalers) {
        (AblationSetting::NoLls, ScalerMode::FixedRatio { gamma }) if gamma != 1.0 => return conflict("scalers"),
        (AblationSetting::NoLls, _) => ScalerMode::FixedRatio { gamma: 1.0 },
        (_, s) => s,
    };
    let (text_input, struct_input) = a.input_streams();
    Ok(ResolvedAblation {
        switches: FusionSwitches {
            text_input,
            struct_input,
            noise,
            relation_temperature: temperature,
        },
        views: a.prediction_views(),
        scalers,
    })
}

/// Per-batch table of fused special-token embeddings keyed by
/// `(token, gating relation)`.
pub type EmbeddingCache = HashMap<(SpecialToken, RelationId), (FusedEmbedding, TokenCache)>;

pub struct KgtModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub features: DualFeatures,
    pub store: ParamStore,
    pub embed: SpecializedEmbedding,
    pub backbone: Backbone,
    pub predictor: Predictor,
    pub switches: FusionSwitches,
}

/// Outcome of one batch: mean loss and gradients of that mean.
pub struct BatchResult {
    pub loss: f64,
    pub grads: Grads,
    pub losses: Vec<f64>,
}

impl KgtModel {
    /// A freshly initialized model over `kg`'s vocabulary.
    pub fn new(kg: &KnowledgeGraph, bank: &FeatureBank, config: ModelConfig, seed: u64) -> Result<Self> {
        bank.validate(kg)?;
        let vocab = Vocabulary::extend(kg, default_base_tokens(kg))?;
        Self::from_parts(config, vocab, bank, seed)
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, bank: &FeatureBank, seed: u64) -> Result<Self> {
        config.validate()?;
        let resolved = resolve_ablation(&config)?;
        let features = DualFeatures::from_bank(bank);
        if features.num_entities() + features.num_relations() + vocab.base_len() != vocab.len() {
            return Err(KgtError::Dimension {
                what: "feature rows vs. vocabulary special tokens".into(),
                expected: vocab.len() - vocab.base_len(),
                got: features.num_entities() + features.num_relations(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.transformer.hidden;
        let embed = SpecializedEmbedding::new(
            &mut store,
            features.text_dim(),
            features.struct_dim(),
            d,
            features.num_relations(),
            config.text_dropout,
            config.struct_dropout,
            &mut rng,
        );
        let backbone = Backbone::new(&mut store, config.transformer, vocab.base_len(), &mut rng)?;
        let predictor = Predictor::new(
            &mut store,
            d,
            features.entity_text.clone(),
            features.entity_struct.clone(),
            config.lora_rank,
            config.text_dropout,
            config.struct_dropout,
            resolved.scalers,
            &mut rng,
        );
        let mut model = Self {
            config,
            vocab,
            features,
            store,
            embed,
            backbone,
            predictor,
            switches: resolved.switches,
        };
        model.apply(resolved);
        Ok(model)
    }

    fn apply(&mut self, r: ResolvedAblation) {
        let store = &mut self.store;
        let gate = self.embed.gate;
        let both_inputs = r.switches.text_input && r.switches.struct_input;
        if !r.switches.text_input {
            for id in self.embed.stream_params(Modality::Text) {
                store.set_trainable(id, false);
            }
        }
        if !r.switches.struct_input {
            for id in self.embed.stream_params(Modality::Struct) {
                store.set_trainable(id, false);
            }
        }
        if !both_inputs {
            for id in gate.logit.iter().chain(&gate.noise).chain([&gate.temperature]) {
                store.set_trainable(*id, false);
            }
        }
        if !r.switches.noise {
            for id in gate.noise {
                store.set_trainable(id, false);
            }
        }
        if !r.switches.relation_temperature {
            store.set_trainable(gate.temperature, false);
        }
        if !r.views.0 {
            self.predictor.drop_view(store, Modality::Text);
        }
        if !r.views.1 {
            self.predictor.drop_view(store, Modality::Struct);
        }
        // a single surviving view has no partner to be weighed against
        if !(r.views.0 && r.views.1) {
            if let ScalerMode::Learnable = r.scalers {
                let unused = if r.views.0 {
                    self.predictor.scalers.lambda_s
                } else {
                    self.predictor.scalers.lambda_t
                };
                store.set_trainable(unused, false);
            }
        }
    }

    pub fn num_entities(&self) -> usize {
        self.features.num_entities()
    }

    pub fn hidden(&self) -> usize {
        self.config.transformer.hidden
    }

    pub fn prompt(&self, kg: &KnowledgeGraph, head: EntityId, relation: RelationId) -> Result<Vec<u32>> {
        build_prompt(
            &self.vocab,
            kg,
            head,
            relation,
            self.config.prompt_mode,
            self.config.transformer.max_seq_len,
        )
    }

    /// Fused embedding of one special token in a query on `relation`.
    pub fn embed_token<R: rand::Rng>(
        &self,
        token: SpecialToken,
        relation: RelationId,
        train: bool,
        rng: &mut R,
    ) -> Result<(FusedEmbedding, TokenCache)> {
        embed_special_token(
            token,
            relation,
            &self.features,
            &self.store,
            &self.embed,
            self.switches,
            train,
            rng,
        )
    }

    /// Eval-mode logits for `(head, relation, ?)`.
    pub fn predict(&self, kg: &KnowledgeGraph, head: EntityId, relation: RelationId) -> Result<PredictionLogits> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let slots = self.vocab.route(&self.prompt(kg, head, relation)?)?;
        let x = embed_sequence(&self.store, self.backbone.token_table, &slots, |tok| {
            Ok(self.embed_token(tok, relation, false, &mut ChaCha8Rng::seed_from_u64(0))?.0.vector)
        })?;
        let (h, _) = self.backbone.forward(&self.store, x.view(), false, &mut rng)?;
        Ok(self.predictor.forward(&self.store, h.view(), false, &mut rng)?.0)
    }

    /// Mean cross-entropy over `batch` and its gradient. Special-token
    /// embeddings are computed once per `(token, gating relation)` pair;
    /// `seed` drives every dropout mask and noise draw.
    pub fn batch_gradients(&self, kg: &KnowledgeGraph, batch: &[Triple], train: bool, seed: u64) -> Result<BatchResult> {
        if batch.is_empty() {
            return Err(KgtError::Invalid("empty batch".into()));
        }
        let mut embed_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cache: EmbeddingCache = HashMap::new();
        let mut order = Vec::new();
        let mut routed = Vec::with_capacity(batch.len());
        for t in batch {
            let slots = self.vocab.route(&self.prompt(kg, t.head, t.relation)?)?;
            for slot in &slots {
                if let Slot::Special(tok) = *slot {
                    let key = (tok, gating_relation(tok, t.relation));
                    if !cache.contains_key(&key) {
                        let v = self.embed_token(tok, t.relation, train, &mut embed_rng)?;
                        cache.insert(key, v);
                        order.push(key);
                    }
                }
            }
            routed.push(slots);
        }

        let per_query: Vec<Result<(f64, Grads, Vec<((SpecialToken, RelationId), Array1<f64>)>)>> = batch
            .par_iter()
            .zip(&routed)
            .enumerate()
            .map(|(i, (t, slots))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                let x = embed_sequence(&self.store, self.backbone.token_table, slots, |tok| {
                    Ok(cache[&(tok, gating_relation(tok, t.relation))].0.vector.clone())
                })?;
                let (h, bcache) = self.backbone.forward(&self.store, x.view(), train, &mut rng)?;
                let (logits, pcache) = self.predictor.forward(&self.store, h.view(), train, &mut rng)?;
                let loss = ce_loss(logits.fused.view(), t.tail);
                let mut grads = Grads::zeros_like(&self.store);
                let dp = ce_loss_grad(logits.fused.view(), t.tail);
                let dh = self.predictor.backward(&self.store, &mut grads, &pcache, dp.view(), self.hidden());
                let dx = self.backbone.backward(&self.store, &mut grads, &bcache, dh.view());
                let special = embed_sequence_backward(&mut grads, self.backbone.token_table, slots, dx.view())
                    .into_iter()
                    .map(|(tok, g)| ((tok, gating_relation(tok, t.relation)), g))
                    .collect();
                Ok((loss, grads, special))
            })
            .collect();

        let mut total = Grads::zeros_like(&self.store);
        let mut special: HashMap<(SpecialToken, RelationId), Array1<f64>> = HashMap::new();
        let mut losses = Vec::with_capacity(batch.len());
        for r in per_query {
            let (loss, g, sp) = r?;
            losses.push(loss);
            total.accumulate(&g);
            for (key, v) in sp {
                *special.entry(key).or_insert_with(|| Array1::zeros(v.len())) += &v;
            }
        }
        for key in &order {
            if let Some(d) = special.get(key) {
                let (_, tc) = &cache[key];
                embed_special_token_backward(&self.store, &self.embed, &mut total, tc, d.view());
            }
        }
        let n = batch.len() as f64;
        total.scale(1.0 / n);
        let loss = losses.iter().sum::<f64>() / n;
        Ok(BatchResult {
            loss,
            grads: total,
            losses,
        })
    }

    /// Parameters the optimizer may touch.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&i| self.store.is_trainable(i)).collect()
    }
}
