//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs as a plain binary so the lines are always shown.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use kgt_core::backbone::{Backbone, TransformerConfig};
use kgt_core::checkpoint::{load_checkpoint, read_manifest};
use kgt_core::evaluator::{evaluate, filtered_rank};
use kgt_core::feature_bank::{
    encode_text_deterministic, graph_texts, load_features, save_features, FeatureBank, FeatureMatrix,
};
use kgt_core::gradcheck;
use kgt_core::kg_store::{EntityId, FilterIndex, FilterPolicy, GraphBuilder, KnowledgeGraph, RelationId, Split};
use kgt_core::model::{AblationSetting, KgtModel, ModelConfig};
use kgt_core::params::{Grads, ParamStore};
use kgt_core::predictor::{ce_loss, ce_loss_grad, lora_score, Predictor, ScalerMode};
use kgt_core::specialized_embedding::{
    embed_special_token, embed_special_token_backward, gate, DualFeatures, FusionSwitches, SpecialToken,
    SpecializedEmbedding,
};
use kgt_core::struct_embedder::{corruption_auc, train_kge, KgeConfig, KgeKind, KgeModel};
use kgt_core::synthetic::{synthetic_kg, SyntheticConfig};
use kgt_core::trainer::{train, CheckpointSink, TrainConfig};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.gen_range(-1.0..1.0))
}

fn random_bank(r: &mut ChaCha8Rng, ne: usize, nr: usize, dt: usize, ds: usize) -> FeatureBank {
    let mut mk = |rows: usize, cols: usize| {
        FeatureMatrix::new(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap()
    };
    FeatureBank {
        entity_text: mk(ne, dt),
        entity_struct: mk(ne, ds),
        relation_text: mk(nr, dt),
        relation_struct: mk(nr, ds),
    }
}

// ---------------------------------------------------------------------------

fn gating_normalization() -> Outcome {
    let start = Instant::now();
    let (d, nr) = (16, 8);
    let mut store = ParamStore::new();
    let m = SpecializedEmbedding::new(&mut store, 4, 4, d, nr, 0.0, 0.0, &mut rng(1));
    let mut r = rng(2);
    for id in [m.gate.noise[0], m.gate.noise[1], m.gate.temperature] {
        let (rows, cols) = store.get(id).dim();
        *store.get_mut(id) = random_matrix(&mut r, rows, cols);
    }
    let mut worst = 0.0f64;
    let mut in_range = true;
    for i in 0..10_000 {
        let et = Array1::from_shape_fn(d, |_| r.gen_range(-3.0..3.0));
        let es = Array1::from_shape_fn(d, |_| r.gen_range(-3.0..3.0));
        let rel = RelationId(r.gen_range(0..nr) as u32);
        let train = i % 2 == 0;
        let ((gt, gs), _) = gate(&store, &m.gate, et.view(), es.view(), rel, FusionSwitches::default(), train, &mut r);
        worst = worst.max((gt + gs - 1.0).abs());
        in_range &= gt > 0.0 && gt < 1.0 && gs > 0.0 && gs < 1.0;
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-6 && in_range && t < Duration::from_secs(5),
        format!("10000 draws, max |g_t + g_s - 1| = {worst:.1e}, gates in (0,1): {in_range}, {}", secs(t)),
    )
}

fn lora_warm_start() -> Outcome {
    let start = Instant::now();
    let mut r = rng(3);
    let (ne, h, dt, ds) = (12, 8, 6, 5);
    let mut store = ParamStore::new();
    let pred = Predictor::new(
        &mut store,
        h,
        random_matrix(&mut r, ne, dt),
        random_matrix(&mut r, ne, ds),
        4,
        0.0,
        0.0,
        ScalerMode::Learnable,
        &mut r,
    );
    let mut worst = 0.0f64;
    for _ in 0..100 {
        for view in [pred.text.unwrap(), pred.structure.unwrap()] {
            let base = store.get(view.scorer.base);
            let x = Array1::from_shape_fn(base.ncols(), |_| r.gen_range(-2.0..2.0));
            let got = lora_score(&store, &view.scorer, x.view());
            for e in 0..ne {
                let direct: f64 = (0..base.ncols()).map(|k| base[[e, k]] * x[k]).sum();
                worst = worst.max((got[e] - direct).abs());
            }
        }
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-6 && t < Duration::from_secs(5),
        format!("100 states x 2 views, max deviation {worst:.1e}, {}", secs(t)),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let tol = 1e-4;
    let mut r = rng(4);

    // (a) projection, gate and fusion for one entity token, noise on
    let (a_worst, a_bad) = {
        let mut store = ParamStore::new();
        let m = SpecializedEmbedding::new(&mut store, 5, 4, 6, 3, 0.0, 0.0, &mut rng(5));
        for id in [m.gate.noise[0], m.gate.noise[1], m.gate.temperature] {
            let (rows, cols) = store.get(id).dim();
            *store.get_mut(id) = random_matrix(&mut r, rows, cols) * 0.5;
        }
        let f = DualFeatures::from_bank(&random_bank(&mut r, 4, 3, 5, 4));
        let probe = Array1::from_shape_fn(6, |_| r.gen_range(-1.0..1.0));
        let tok = SpecialToken::Entity(EntityId(1));
        let sw = FusionSwitches::default();
        let (_, cache) = embed_special_token(tok, RelationId(2), &f, &store, &m, sw, true, &mut rng(6)).unwrap();
        let mut g = Grads::zeros_like(&store);
        embed_special_token_backward(&store, &m, &mut g, &cache, probe.view());
        let ids: Vec<_> = store.ids().collect();
        let (w, bad) = gradcheck::check(&store, &g, &ids, 1e-6, tol, |s| {
            embed_special_token(tok, RelationId(2), &f, s, &m, sw, true, &mut rng(6)).unwrap().0.vector.dot(&probe)
        });
        (w, bad.len())
    };

    // (b) heads, low-rank scorers and logit scalers under cross-entropy
    let (b_worst, b_bad) = {
        let mut store = ParamStore::new();
        let pred = Predictor::new(
            &mut store,
            6,
            random_matrix(&mut r, 7, 5),
            random_matrix(&mut r, 7, 4),
            3,
            0.0,
            0.0,
            ScalerMode::Learnable,
            &mut r,
        );
        for v in [pred.text.unwrap(), pred.structure.unwrap()] {
            let (rows, cols) = store.get(v.scorer.b).dim();
            *store.get_mut(v.scorer.b) = random_matrix(&mut r, rows, cols) * 0.3;
        }
        store.get_mut(pred.scalers.lambda_t).fill(1.4);
        store.get_mut(pred.scalers.lambda_s).fill(0.8);
        let h = Array1::from_shape_fn(6, |_| r.gen_range(-1.0..1.0));
        let target = EntityId(3);
        let (logits, cache) = pred.forward(&store, h.view(), false, &mut rng(0)).unwrap();
        let mut g = Grads::zeros_like(&store);
        pred.backward(&store, &mut g, &cache, ce_loss_grad(logits.fused.view(), target).view(), 6);
        let ids: Vec<_> = store.ids().filter(|&i| store.is_trainable(i)).collect();
        let (w, bad) = gradcheck::check(&store, &g, &ids, 1e-6, tol, |s| {
            ce_loss(pred.forward(s, h.view(), false, &mut rng(0)).unwrap().0.fused.view(), target)
        });
        (w, bad.len())
    };

    // (c) one decoder layer
    let (c_worst, c_bad) = {
        let mut store = ParamStore::new();
        let cfg = TransformerConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 1,
            max_seq_len: 8,
            ..Default::default()
        };
        let bb = Backbone::new(&mut store, cfg, 3, &mut rng(7)).unwrap();
        let x = random_matrix(&mut r, 4, 8);
        let probe = Array1::from_shape_fn(8, |_| r.gen_range(-1.0..1.0));
        let (_, cache) = bb.forward(&store, x.view(), false, &mut rng(0)).unwrap();
        let mut g = Grads::zeros_like(&store);
        bb.backward(&store, &mut g, &cache, probe.view());
        let ids: Vec<_> = store.ids().filter(|&i| store.is_trainable(i)).collect();
        let (w, bad) = gradcheck::check(&store, &g, &ids, 1e-6, tol, |s| {
            bb.forward(s, x.view(), false, &mut rng(0)).unwrap().0.dot(&probe)
        });
        (w, bad.len())
    };

    let t = start.elapsed();
    outcome(
        a_bad + b_bad + c_bad == 0 && t < Duration::from_secs(60),
        format!(
            "worst relative error (a) {a_worst:.1e}, (b) {b_worst:.1e}, (c) {c_worst:.1e}; {} entries over 1e-4, {}",
            a_bad + b_bad + c_bad,
            secs(t)
        ),
    )
}

fn lse_oracle(p: &[f64]) -> f64 {
    let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + p.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn loss_correctness() -> Outcome {
    let mut r = rng(8);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(1..20);
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(-20.0..20.0)).collect();
        let t = r.gen_range(0..n);
        let got = ce_loss(Array1::from(p.clone()).view(), EntityId(t as u32));
        worst = worst.max((got - (lse_oracle(&p) - p[t])).abs());
    }
    let mut uniform_worst = 0.0f64;
    for n in [1usize, 2, 7, 64, 1000] {
        let p = Array1::from_elem(n, 0.37);
        uniform_worst = uniform_worst.max((ce_loss(p.view(), EntityId(0)) - (n as f64).ln()).abs());
    }
    outcome(
        worst <= 1e-10 && uniform_worst <= 1e-9,
        format!("1000 vectors, max |ce - oracle| = {worst:.1e}; uniform logits max |ce - ln|E|| = {uniform_worst:.1e}"),
    )
}

fn filtered_rank_oracle() -> Outcome {
    let mut r = rng(9);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let ne = r.gen_range(2..=50);
        let head = r.gen_range(0..ne);
        let target = r.gen_range(0..ne);
        let mut b = GraphBuilder::new();
        for e in 0..ne {
            b.entity(&format!("e{e}"));
        }
        b.relation("q");
        // keeps train non-empty without touching the ranked query
        b.push(Split::Train, "e0", "pad", "e1");
        let mut known = Vec::new();
        for e in 0..ne {
            if e != target && r.gen_bool(0.3) {
                known.push(e);
                b.push(Split::Train, &format!("e{head}"), "q", &format!("e{e}"));
            }
        }
        b.push(Split::Test, &format!("e{head}"), "q", &format!("e{target}"));
        let kg = b.build().unwrap().augment_inverses().unwrap();
        let filter = FilterIndex::build(&kg, FilterPolicy::AllSplits).unwrap();
        // small integer scores force ties
        let scores: Vec<f64> = (0..ne).map(|_| r.gen_range(0..6) as f64).collect();
        let got = filtered_rank(
            Array1::from(scores.clone()).view(),
            EntityId(head as u32),
            RelationId(0),
            EntityId(target as u32),
            &filter,
        )
        .unwrap();
        // oracle: sort surviving candidates, ties placed ahead of the target
        let mut list: Vec<(f64, bool)> = (0..ne)
            .filter(|e| *e == target || !known.contains(e))
            .map(|e| (scores[e], e == target))
            .collect();
        list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let expect = list.iter().position(|x| x.1).unwrap() + 1;
        if got != expect {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 instances, {mismatches} mismatches"))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[derive(serde::Deserialize)]
struct PresetKge {
    kge: KgeConfig,
}

fn brute_tucker(m: &KgeModel, h: usize, r: usize, t: usize) -> f64 {
    let d = m.dim();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                s += m.core(i, j, k) * m.entity_emb()[[h, i]] * m.relation_emb()[[r, j]] * m.entity_emb()[[t, k]];
            }
        }
    }
    s
}

fn structural_pretrainer() -> Outcome {
    let start = Instant::now();
    let text = fs::read_to_string(workspace_root().join("configs/synthetic.toml")).unwrap();
    let preset: PresetKge = toml::from_str(&text).unwrap();
    let kg = synthetic_kg(&SyntheticConfig::default()).unwrap().augment_inverses().unwrap();
    let (model, _) = train_kge(&kg, &preset.kge).unwrap();
    let auc = corruption_auc(&model, &kg, 0).unwrap();

    let mut brute = 0.0f64;
    for d in 1..=4 {
        let m = KgeModel::init(KgeKind::Tucker, 6, 4, d, d as u64 + 10);
        for h in 0..6 {
            for rel in 0..4 {
                for t in 0..6 {
                    let fast = m.score(EntityId(h as u32), RelationId(rel as u32), EntityId(t as u32));
                    brute = brute.max((fast - brute_tucker(&m, h, rel, t)).abs());
                }
            }
        }
    }
    let t = start.elapsed();
    outcome(
        preset.kge.kind == KgeKind::Tucker
            && preset.kge.epochs <= 200
            && auc >= 0.95
            && brute <= 1e-10
            && t < Duration::from_secs(180),
        format!(
            "{} entities / {} relations, {} epochs, train AUC {auc:.4}; brute-force deviation {brute:.1e} at dims 1-4; {}",
            kg.num_entities(),
            kg.num_base_relations(),
            preset.kge.epochs,
            secs(t)
        ),
    )
}

fn kgt(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_kgt")).args(args).output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("kgt {args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn ablation_rows(path: &Path) -> Vec<(String, f64)> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[1].to_string(), rec[2].parse().unwrap())
        })
        .collect()
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();
    let cfg = workspace_root().join("configs/synthetic.toml");
    let cfg_s = cfg.to_str().unwrap();
    let steps: [&[&str]; 4] = [
        &["prepare", "--synthetic"],
        &["train-kge"],
        &["embed-text", "--offline"],
        &["ablate", "--settings", "full,text_only,struct_only"],
    ];
    for step in steps {
        let mut args = step.to_vec();
        args.extend(["--out", run_s, "--config", cfg_s]);
        if let Err(e) = kgt(&args) {
            return outcome(false, e);
        }
    }
    let t = start.elapsed();
    let epochs: usize = {
        #[derive(serde::Deserialize)]
        struct Train {
            epochs: usize,
        }
        #[derive(serde::Deserialize)]
        struct Preset {
            train: Train,
        }
        toml::from_str::<Preset>(&fs::read_to_string(&cfg).unwrap()).unwrap().train.epochs
    };
    let rows = ablation_rows(&run.join("ablation/ablation.csv"));
    let mrr = |name: &str| rows.iter().find(|r| r.0 == name).map_or(f64::NAN, |r| r.1);
    let (full, text, structure) = (mrr("full"), mrr("text_only"), mrr("struct_only"));
    let uniform = (1..=64).map(|k| 1.0 / k as f64).sum::<f64>() / 64.0;
    outcome(
        full >= 0.60 && full > text && text > structure && epochs <= 200 && t < Duration::from_secs(600),
        format!(
            "test MRR full {full:.4}, text_only {text:.4}, struct_only {structure:.4} (uniform baseline {uniform:.4}); {epochs} epochs, {}",
            secs(t)
        ),
    )
}

fn synthetic_bank(kg: &KnowledgeGraph, text_dim: usize, struct_dim: usize) -> FeatureBank {
    let (et, rt) = graph_texts(kg);
    let (kge, _) = train_kge(
        kg,
        &KgeConfig {
            dim: struct_dim,
            epochs: 10,
            ..Default::default()
        },
    )
    .unwrap();
    let (es, rs) = kge.export_structural_features().unwrap();
    FeatureBank {
        entity_text: encode_text_deterministic(&et, text_dim, 0).unwrap(),
        entity_struct: es,
        relation_text: encode_text_deterministic(&rt, text_dim, 0).unwrap(),
        relation_struct: rs,
    }
}

fn tiny_model_config(ablation: AblationSetting) -> ModelConfig {
    ModelConfig {
        transformer: TransformerConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 1,
            max_seq_len: 8,
            ..Default::default()
        },
        lora_rank: 2,
        text_dropout: 0.0,
        struct_dropout: 0.0,
        ablation,
        ..Default::default()
    }
}

fn ablation_harness() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(
        &cfg,
        "[model]\nlora_rank = 2\n[model.transformer]\nhidden = 8\nlayers = 1\nheads = 2\nmax_seq_len = 8\n\
         [train]\nepochs = 1\nbatch_size = 128\nvalidate = false\n[kge]\ndim = 4\nepochs = 2\n[text]\ndim = 8\n",
    )
    .unwrap();
    let cfg_s = cfg.to_str().unwrap();
    for step in [
        vec!["prepare", "--synthetic"],
        vec!["train-kge"],
        vec!["embed-text", "--offline"],
        vec!["ablate", "--settings", "all"],
    ] {
        let mut args = step;
        args.extend(["--out", run_s, "--config", cfg_s]);
        if let Err(e) = kgt(&args) {
            return outcome(false, e);
        }
    }
    let rows = ablation_rows(&run.join("ablation/ablation.csv"));
    let dirs = AblationSetting::ALL
        .iter()
        .filter(|a| run.join("ablation").join(a.name()).join("manifest.json").exists())
        .count();
    let names_ok = AblationSetting::ALL.iter().all(|a| rows.iter().any(|r| r.0 == a.name()));

    // gate noise off: train-mode loss independent of the seed and equal to
    // eval mode (dropout zero so noise is the only randomness)
    let kg = synthetic_kg(&SyntheticConfig::default()).unwrap().augment_inverses().unwrap();
    let bank = synthetic_bank(&kg, 8, 4);
    let batch: Vec<_> = kg.split(Split::Train)[..16].to_vec();
    let quiet = KgtModel::new(&kg, &bank, tiny_model_config(AblationSetting::NoNoise), 1).unwrap();
    let l1 = quiet.batch_gradients(&kg, &batch, true, 11).unwrap().loss;
    let l2 = quiet.batch_gradients(&kg, &batch, true, 22).unwrap().loss;
    let le = quiet.batch_gradients(&kg, &batch, false, 33).unwrap().loss;
    let deterministic = l1.to_bits() == l2.to_bits() && l1.to_bits() == le.to_bits();
    let noisy = KgtModel::new(&kg, &bank, tiny_model_config(AblationSetting::Full), 1).unwrap();
    let n1 = noisy.batch_gradients(&kg, &batch, true, 11).unwrap().loss;
    let n2 = noisy.batch_gradients(&kg, &batch, true, 22).unwrap().loss;
    let noise_visible = n1 != n2;

    // fixed scalers: no gradient slot, values untouched by training
    let mut fixed = KgtModel::new(&kg, &bank, tiny_model_config(AblationSetting::NoLls), 1).unwrap();
    let lam = [fixed.predictor.scalers.lambda_t, fixed.predictor.scalers.lambda_s];
    let res = fixed.batch_gradients(&kg, &batch, true, 5).unwrap();
    let zero_grad = lam.iter().all(|&id| res.grads.get(id).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    let before: Vec<f64> = lam.iter().map(|&id| fixed.store.get(id)[[0, 0]]).collect();
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 64,
        validate: false,
        ..Default::default()
    };
    train(&mut fixed, &kg, &tc, None).unwrap();
    let after: Vec<f64> = lam.iter().map(|&id| fixed.store.get(id)[[0, 0]]).collect();
    let frozen = before == after && lam.iter().all(|&id| !fixed.store.is_trainable(id));

    let t = start.elapsed();
    outcome(
        rows.len() == 10 && dirs == 10 && names_ok && deterministic && noise_visible && zero_grad && frozen,
        format!(
            "{} report rows, {dirs} run dirs; no_noise train loss seed-independent and equal to eval: {deterministic} \
             (full differs: {noise_visible}); no_lls zero lambda gradient: {zero_grad}, unchanged after training: {frozen}; {}",
            rows.len(),
            secs(t)
        ),
    )
}

fn persistence() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut r = rng(12);

    // feature files
    let m = FeatureMatrix::new(
        7,
        5,
        (0..35).map(|i| if i == 3 { f32::MIN_POSITIVE } else { r.gen_range(-1e3f32..1e3) }).collect(),
    )
    .unwrap();
    let fp = tmp.path().join("m.kgtf");
    save_features(&m, &fp).unwrap();
    let back = load_features(&fp).unwrap();
    let features_exact = m.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        && m.rows() == back.rows()
        && m.cols() == back.cols();

    // checkpoint
    let kg = synthetic_kg(&SyntheticConfig::default()).unwrap().augment_inverses().unwrap();
    let bank = synthetic_bank(&kg, 8, 4);
    let fdir = tmp.path().join("features");
    fs::create_dir_all(&fdir).unwrap();
    bank.save_dir(&fdir).unwrap();
    // reload so the model sees exactly what is on disk
    let bank = FeatureBank::load_dir(&fdir).unwrap();
    let mut model = KgtModel::new(&kg, &bank, tiny_model_config(AblationSetting::Full), 3).unwrap();
    let sink = CheckpointSink {
        dir: tmp.path().join("ckpt"),
        features_dir: fdir.clone(),
    };
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 64,
        validate: true,
        ..Default::default()
    };
    train(&mut model, &kg, &tc, Some(&sink)).unwrap();
    let (loaded, manifest) = load_checkpoint(&sink.dir, None).unwrap();
    let tensors_exact = model.store.iter().all(|(id, p)| {
        let q = loaded.store.get(loaded.store.id(&p.name).unwrap());
        q.dim() == p.value.dim()
            && q.iter().zip(p.value.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
            && loaded.store.is_trainable(loaded.store.id(&p.name).unwrap()) == model.store.is_trainable(id)
    });
    let filter = FilterIndex::build(&kg, tc.filter_policy).unwrap();
    let again = evaluate(&loaded, &kg, Split::Valid, &filter).unwrap().summary;
    let stored = read_manifest(&sink.dir).unwrap().metrics;
    let metrics_exact = stored.as_ref() == Some(&again) && manifest.metrics == stored;

    let t = start.elapsed();
    outcome(
        features_exact && tensors_exact && metrics_exact,
        format!(
            "feature file bit-exact: {features_exact}; {} checkpoint tensors bit-exact: {tensors_exact}; \
             reloaded valid MRR {:.6} equals stored: {metrics_exact}; {}",
            manifest.tensors.len(),
            again.fused.mrr,
            secs(t)
        ),
    )
}

fn main() {
    println!("acceptance suite");
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gating normalization", gating_normalization),
        ("lora warm start", lora_warm_start),
        ("gradient checks", gradient_checks),
        ("loss correctness", loss_correctness),
        ("filtered-rank oracle", filtered_rank_oracle),
        ("structural pre-trainer", structural_pretrainer),
        ("end-to-end convergence", end_to_end),
        ("ablation harness", ablation_harness),
        ("persistence", persistence),
    ];
    println!(
        "N/A   full-scale results: not reproducible at desk scale (needs a 7B backbone and full datasets); \
         the criteria below substitute"
    );
    let mut failed = 0;
    for (name, f) in criteria {
        let o = f();
        if !o.pass {
            failed += 1;
        }
        println!("{}  {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
