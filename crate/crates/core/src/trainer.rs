//! Training loop, ablation runs and retraining sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::error::{KgtError, Result};
use crate::evaluator::{evaluate, GammaPoint, RankReport, RankSummary};
use crate::feature_bank::{write_atomic, FeatureBank};
use crate::kg_store::{FilterIndex, FilterPolicy, KnowledgeGraph, Split};
use crate::model::KgtModel;
pub use crate::model::{resolve_ablation, AblationSetting, ModelConfig};
use crate::optim::{Adam, AdamConfig};
use crate::predictor::ScalerMode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Evaluate on valid after every epoch (skipped when valid is empty).
    pub validate: bool,
    pub filter_policy: FilterPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seed: 0,
            grad_clip_norm: 1.0,
            validate: true,
            filter_policy: FilterPolicy::AllSplits,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(KgtError::Config("batch_size must be positive".into()));
        }
        if !(self.optimizer.lr >= 0.0) {
            return Err(KgtError::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub valid_mrr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Summary of the last validation run.
    pub last_valid: Option<RankSummary>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,valid_mrr\n");
        for e in &self.epochs {
            let mrr = e.valid_mrr.map_or(String::new(), |m| format!("{m:.6}"));
            let _ = writeln!(out, "{},{:.8},{}", e.epoch, e.loss, mrr);
        }
        out
    }
}

/// Where per-epoch checkpoints go.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub features_dir: PathBuf,
}

pub const TRAIN_LOG_FILE: &str = "train_log.csv";

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains `model` on the augmented train split. Every epoch ends with an
/// optional validation pass and, when `sink` is set, a checkpoint plus the
/// CSV log.
pub fn train(
    model: &mut KgtModel,
    kg: &KnowledgeGraph,
    config: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainLog> {
    config.validate()?;
    if !kg.is_augmented() {
        return Err(KgtError::NotAugmented);
    }
    if model.num_entities() != kg.num_entities() || model.features.num_relations() != kg.num_relations() {
        return Err(KgtError::Dimension {
            what: "model vocabulary vs. graph entities".into(),
            expected: kg.num_entities(),
            got: model.num_entities(),
        });
    }
    let train_set = kg.split(Split::Train).to_vec();
    let filter = FilterIndex::build(kg, config.filter_policy)?;
    let do_valid = config.validate && !kg.split(Split::Valid).is_empty();
    let mut adam = Adam::new(config.optimizer, &model.store);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<_> = chunk.iter().map(|&i| train_set[i]).collect();
            let seed = mix(config.seed, epoch as u64, bi as u64 + 1);
            let mut res = model.batch_gradients(kg, &batch, true, seed)?;
            if !res.loss.is_finite() || !res.grads.all_finite() {
                return Err(KgtError::NonFinite(format!(
                    "loss at epoch {epoch}, batch {bi}; train triple indices {chunk:?}"
                )));
            }
            if config.grad_clip_norm > 0.0 {
                res.grads.clip_global_norm(config.grad_clip_norm);
            }
            adam.step(&mut model.store, &res.grads);
            loss_sum += res.loss * batch.len() as f64;
        }
        let loss = loss_sum / train_set.len() as f64;
        let valid = if do_valid {
            Some(evaluate(model, kg, Split::Valid, &filter)?.summary)
        } else {
            None
        };
        log.epochs.push(EpochRecord {
            epoch,
            loss,
            valid_mrr: valid.as_ref().map(|s| s.fused.mrr),
        });
        if let Some(s) = sink {
            save_checkpoint(model, &s.dir, &s.features_dir, epoch, valid.clone())?;
            write_atomic(&s.dir.join(TRAIN_LOG_FILE), log.to_csv().as_bytes())?;
        }
        log.last_valid = valid;
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub summary: RankSummary,
    pub final_loss: f64,
}

/// Trains one model per setting under identical budgets and evaluates each
/// on `split`. With `out`, every run gets `<out>/<setting>/` holding its
/// checkpoint, log and rank report.
#[allow(clippy::too_many_arguments)]
pub fn run_ablations(
    kg: &KnowledgeGraph,
    bank: &FeatureBank,
    base: &ModelConfig,
    train_config: &TrainConfig,
    settings: &[AblationSetting],
    split: Split,
    out: Option<(&Path, &Path)>,
) -> Result<Vec<AblationRow>> {
    let filter = FilterIndex::build(kg, train_config.filter_policy)?;
    let mut rows = Vec::with_capacity(settings.len());
    for &setting in settings {
        let config = ModelConfig {
            ablation: setting,
            ..base.clone()
        };
        let mut model = KgtModel::new(kg, bank, config, train_config.seed)?;
        let sink = out.map(|(dir, features)| CheckpointSink {
            dir: dir.join(setting.name()),
            features_dir: features.to_path_buf(),
        });
        let log = train(&mut model, kg, train_config, sink.as_ref())?;
        let report = evaluate(&model, kg, split, &filter)?;
        if let Some(s) = &sink {
            report.save(kg, &s.dir, &format!("ranks_{}", split.name()))?;
        }
        rows.push(AblationRow {
            setting,
            summary: report.summary,
            final_loss: log.epochs.last().map_or(f64::NAN, |e| e.loss),
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("row,setting,mrr,hits1,hits3,hits10,text_mrr,struct_mrr,final_loss\n");
    let opt = |m: Option<crate::evaluator::Metrics>| m.map_or(String::new(), |m| format!("{:.6}", m.mrr));
    for r in rows {
        let m = r.summary.fused;
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{},{},{:.6}",
            r.setting.row_id(),
            r.setting.name(),
            m.mrr,
            m.hits1,
            m.hits3,
            m.hits10,
            opt(r.summary.text),
            opt(r.summary.structure),
            r.final_loss
        );
    }
    out
}

/// Retrains with fixed `λ_t = γ`, `λ_s = 1` for each γ.
pub fn sweep_gamma_retrain(
    kg: &KnowledgeGraph,
    bank: &FeatureBank,
    base: &ModelConfig,
    train_config: &TrainConfig,
    split: Split,
    gammas: &[f64],
) -> Result<Vec<GammaPoint>> {
    if gammas.is_empty() {
        return Err(KgtError::Invalid("empty gamma list".into()));
    }
    let filter = FilterIndex::build(kg, train_config.filter_policy)?;
    gammas
        .iter()
        .map(|&gamma| {
            let config = ModelConfig {
                scalers: ScalerMode::FixedRatio { gamma },
                ..base.clone()
            };
            let mut model = KgtModel::new(kg, bank, config, train_config.seed)?;
            train(&mut model, kg, train_config, None)?;
            let report: RankReport = evaluate(&model, kg, split, &filter)?;
            Ok(GammaPoint {
                gamma,
                summary: report.summary,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::TransformerConfig;
    use crate::feature_bank::{encode_text_deterministic, graph_texts, FeatureMatrix};
    use crate::kg_store::GraphBuilder;
    use crate::predictor::ce_loss;
    use rand::Rng;

    fn toy() -> (KnowledgeGraph, FeatureBank) {
        let mut b = GraphBuilder::new();
        for (h, r, t) in [("a", "r", "b"), ("b", "r", "c"), ("c", "s", "a"), ("d", "s", "b"), ("e", "r", "a")] {
            b.push(Split::Train, h, r, t);
        }
        b.push(Split::Valid, "a", "s", "d");
        b.push(Split::Test, "e", "s", "c");
        let kg = b.build().unwrap().augment_inverses().unwrap();
        let (et, rt) = graph_texts(&kg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rand_matrix = |rows, cols| {
            let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            FeatureMatrix::new(rows, cols, data).unwrap()
        };
        let bank = FeatureBank {
            entity_text: encode_text_deterministic(&et, 8, 1).unwrap(),
            entity_struct: rand_matrix(kg.num_entities(), 4),
            relation_text: encode_text_deterministic(&rt, 8, 1).unwrap(),
            relation_struct: rand_matrix(kg.num_relations(), 4),
        };
        (kg, bank)
    }

    fn cfg(ablation: AblationSetting, dropout: f64) -> ModelConfig {
        ModelConfig {
            transformer: TransformerConfig {
                hidden: 8,
                layers: 1,
                heads: 2,
                ffn_mult: 2,
                max_seq_len: 8,
                ..Default::default()
            },
            lora_rank: 2,
            text_dropout: dropout,
            struct_dropout: dropout,
            ablation,
            ..Default::default()
        }
    }

    fn mean_loss(model: &KgtModel, kg: &KnowledgeGraph) -> f64 {
        let t = kg.split(Split::Train);
        t.iter()
            .map(|q| ce_loss(model.predict(kg, q.head, q.relation).unwrap().fused.view(), q.tail))
            .sum::<f64>()
            / t.len() as f64
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (kg, bank) = toy();
        let mut model = KgtModel::new(&kg, &bank, cfg(AblationSetting::NoNoise, 0.0), 1).unwrap();
        let before = model.store.clone();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 4,
            optimizer: AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let log = train(&mut model, &kg, &tc, None).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        let l0 = log.epochs[0].loss;
        for e in &log.epochs {
            assert!((e.loss - l0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_curve() {
        let (kg, bank) = toy();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 3,
            optimizer: AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        };
        let run = || {
            let mut m = KgtModel::new(&kg, &bank, cfg(AblationSetting::Full, 0.2), 5).unwrap();
            train(&mut m, &kg, &tc, None).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn repeated_batch_descends() {
        let (kg, bank) = toy();
        let mut model = KgtModel::new(&kg, &bank, cfg(AblationSetting::NoNoise, 0.0), 2).unwrap();
        let batch = kg.split(Split::Train).to_vec();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 1e-4,
                ..Default::default()
            },
            &model.store,
        );
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let res = model.batch_gradients(&kg, &batch, true, 0).unwrap();
            assert!(res.loss < prev, "{} !< {prev}", res.loss);
            prev = res.loss;
            adam.step(&mut model.store, &res.grads);
        }
    }

    #[test]
    fn frozen_tensors_survive_training_bit_identical() {
        let (kg, bank) = toy();
        let mut c = cfg(AblationSetting::Full, 0.1);
        c.transformer.attention_lora = Some(crate::backbone::AttentionLora {
            rank: 2,
            alpha: 4.0,
            dropout: 0.0,
        });
        let mut model = KgtModel::new(&kg, &bank, c, 3).unwrap();
        let frozen: Vec<_> = model.store.ids().filter(|&i| !model.store.is_trainable(i)).collect();
        assert!(frozen.iter().any(|&i| model.store.name(i).ends_with("text_scorer.base")));
        assert!(frozen.iter().any(|&i| model.store.name(i) == "backbone.layer0.wq"));
        let before: Vec<_> = frozen.iter().map(|&i| model.store.get(i).clone()).collect();
        let tc = TrainConfig {
            epochs: 2,
            optimizer: AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        };
        train(&mut model, &kg, &tc, None).unwrap();
        for (i, b) in frozen.iter().zip(before) {
            assert_eq!(model.store.get(*i), &b);
        }
    }

    #[test]
    fn training_reduces_loss_on_toy_graph() {
        let (kg, bank) = toy();
        let mut model = KgtModel::new(&kg, &bank, cfg(AblationSetting::Full, 0.0), 3).unwrap();
        let before = mean_loss(&model, &kg);
        let tc = TrainConfig {
            epochs: 30,
            batch_size: 4,
            optimizer: AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        };
        let log = train(&mut model, &kg, &tc, None).unwrap();
        assert!(mean_loss(&model, &kg) < 0.5 * before);
        assert!(log.epochs.iter().all(|e| e.valid_mrr.is_some()));
    }

    #[test]
    fn unaugmented_graph_rejected() {
        let mut b = GraphBuilder::new();
        b.push(Split::Train, "a", "r", "b");
        let plain = b.build().unwrap();
        let (kg, bank) = toy();
        let mut model = KgtModel::new(&kg, &bank, cfg(AblationSetting::Full, 0.0), 0).unwrap();
        assert!(matches!(
            train(&mut model, &plain, &TrainConfig::default(), None),
            Err(KgtError::NotAugmented)
        ));
    }
}
