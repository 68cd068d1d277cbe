use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use kgt_core::backbone::{Backbone, TransformerConfig};
use kgt_core::evaluator::filtered_rank;
use kgt_core::feature_bank::{encode_text_deterministic, graph_texts, FeatureBank};
use kgt_core::kg_store::{EntityId, FilterIndex, FilterPolicy, KnowledgeGraph, Split};
use kgt_core::model::{KgtModel, ModelConfig};
use kgt_core::params::ParamStore;
use kgt_core::predictor::{lora_score, LoraScorer};
use kgt_core::struct_embedder::{train_kge, KgeConfig};
use kgt_core::synthetic::{synthetic_kg, SyntheticConfig};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (KnowledgeGraph, FeatureBank) {
    let kg = synthetic_kg(&SyntheticConfig::default()).unwrap().augment_inverses().unwrap();
    let (et, rt) = graph_texts(&kg);
    let (kge, _) = train_kge(
        &kg,
        &KgeConfig {
            dim: 32,
            epochs: 5,
            ..Default::default()
        },
    )
    .unwrap();
    let (es, rs) = kge.export_structural_features().unwrap();
    let bank = FeatureBank {
        entity_text: encode_text_deterministic(&et, 64, 0).unwrap(),
        entity_struct: es,
        relation_text: encode_text_deterministic(&rt, 64, 0).unwrap(),
        relation_struct: rs,
    };
    (kg, bank)
}

fn model_config() -> ModelConfig {
    ModelConfig {
        transformer: TransformerConfig {
            hidden: 32,
            layers: 2,
            heads: 4,
            max_seq_len: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn backbone(c: &mut Criterion) {
    let mut group = c.benchmark_group("backbone_forward");
    for hidden in [32usize, 128] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = TransformerConfig {
            hidden,
            layers: 2,
            heads: 4,
            ..Default::default()
        };
        let bb = Backbone::new(&mut store, cfg, 16, &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((8, hidden), || rng.gen_range(-1.0..1.0));
        group.bench_with_input(BenchmarkId::from_parameter(hidden), &hidden, |b, _| {
            b.iter(|| bb.forward(&store, black_box(x.view()), false, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn scorer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let base = Array2::from_shape_simple_fn((2000, 64), || rng.gen_range(-1.0..1.0));
    let s = LoraScorer::new(&mut store, "bench", base, 8, &mut rng);
    let h = Array1::from_shape_simple_fn(64, || rng.gen_range(-1.0..1.0));
    c.bench_function("lora_score_2000x64", |b| b.iter(|| lora_score(&store, &s, black_box(h.view()))));
}

fn ranking(c: &mut Criterion) {
    let (kg, _) = setup();
    let filter = FilterIndex::build(&kg, FilterPolicy::AllSplits).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = Array1::from_shape_simple_fn(kg.num_entities(), || rng.gen_range(-1.0..1.0));
    let t = kg.split(Split::Test)[0];
    c.bench_function("filtered_rank_64", |b| {
        b.iter(|| filtered_rank(black_box(logits.view()), t.head, t.relation, EntityId(3), &filter).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let (kg, bank) = setup();
    let model = KgtModel::new(&kg, &bank, model_config(), 0).unwrap();
    let batch: Vec<_> = kg.split(Split::Train)[..32].to_vec();
    let t = kg.split(Split::Test)[0];
    c.bench_function("predict_one_query", |b| b.iter(|| model.predict(&kg, t.head, t.relation).unwrap()));
    c.bench_function("batch_gradients_32", |b| {
        b.iter(|| model.batch_gradients(&kg, black_box(&batch), true, 7).unwrap())
    });
}

criterion_group!(benches, backbone, scorer, ranking, model);
criterion_main!(benches);
