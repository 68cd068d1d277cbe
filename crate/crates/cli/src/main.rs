//! `kgt`: dataset preparation, structural and textual feature extraction,
//! training, evaluation, ablations, logit-ratio sweeps and reports.
//!
//! Every command reads and writes inside one run directory (`--out`) and
//! leaves `manifests/<command>.json` behind. Exit codes: 0 success,
//! 2 usage or config error, 3 data error, 4 numeric failure.

mod config;
mod manifest;
mod report;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use kgt_core::checkpoint::read_manifest;
use kgt_core::evaluator::{gamma_table_csv, sweep_gamma_rescore, GammaPoint};
use kgt_core::feature_bank::{
    encode_text_deterministic, encode_text_remote, graph_texts, save_features, write_atomic, EmbeddingEndpoint,
    ENTITY_STRUCT_FILE, ENTITY_TEXT_FILE, RELATION_STRUCT_FILE, RELATION_TEXT_FILE,
};
use kgt_core::kg_store::write_dataset;
use kgt_core::struct_embedder::corruption_auc;
use kgt_core::synthetic::{synthetic_kg, SyntheticConfig};
use kgt_core::trainer::{ablation_csv, run_ablations, sweep_gamma_retrain, CheckpointSink, TRAIN_LOG_FILE};
use kgt_core::{
    backbone::default_base_tokens, evaluate, load_checkpoint, load_dataset, train, train_kge, AblationSetting,
    DatasetLayout, FeatureBank, FilterIndex, FilterPolicy, KgtError, KgtModel, KnowledgeGraph, PromptMode,
    RankSummary, Split, Vocabulary,
};
use serde::{Deserialize, Serialize};

use config::{ConfigError, RunConfig};
use manifest::{git_describe, hash_artifacts, now, RunManifest};

const PREPARED_DIR: &str = "prepared";
const DATASET_INFO: &str = "dataset.json";
const VOCAB_FILE: &str = "vocab.json";
const FILTER_FILE: &str = "filter_index.tsv";
const KGE_DIR: &str = "kge";
const FEATURES_DIR: &str = "features";
const CHECKPOINT_DIR: &str = "checkpoint";
const EVAL_DIR: &str = "eval";
const ABLATION_DIR: &str = "ablation";
const SWEEP_DIR: &str = "sweep";

#[derive(Parser, Debug)]
#[command(name = "kgt", version, about = "Knowledge-graph completion with dual-stream entity tokens")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run directory holding every artifact.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Dataset directory (train.tsv, valid.tsv, test.tsv, entity2text.tsv).
    /// Later commands default to the one recorded by `prepare`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// TOML config with optional [model], [train], [kge] and [text] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Filter policy for ranking.
    #[arg(long)]
    policy: Option<FilterPolicy>,
}

#[derive(Args, Debug, Clone)]
struct ModelOverrides {
    /// Prompt layout.
    #[arg(long)]
    mode: Option<PromptMode>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Load and augment a dataset; write the vocabulary and filter index.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Generate the built-in 64-entity synthetic graph into the dataset
        /// directory (default `<out>/dataset`) first.
        #[arg(long)]
        synthetic: bool,
    },
    /// Pre-train the structural embedder and export structural features.
    TrainKge {
        #[command(flatten)]
        common: Common,
    },
    /// Encode entity descriptions and relation names into text features.
    EmbedText {
        #[command(flatten)]
        common: Common,
        /// Use the deterministic offline encoder even if an endpoint is set.
        #[arg(long)]
        offline: bool,
    },
    /// Train the model, checkpointing every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelOverrides,
        /// Ablation setting by name or row id (e.g. `no_noise` or `2.5`).
        #[arg(long)]
        ablation: Option<AblationSetting>,
    },
    /// Rank a split with the stored checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train and evaluate every requested ablation under one budget.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelOverrides,
        /// `all` or a comma-separated list of names / row ids.
        #[arg(long, default_value = "all")]
        settings: String,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Fused MRR as a function of the text/struct logit ratio.
    SweepGamma {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelOverrides,
        /// Comma-separated ratios.
        #[arg(long, default_value = "0.25,0.5,1,2,4")]
        gammas: String,
        /// Retrain one model per ratio instead of rescoring the checkpoint.
        #[arg(long)]
        retrain: bool,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Render the stored CSV reports as aligned tables.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

/// A required file is absent; the message names the command producing it.
#[derive(Debug)]
struct MissingArtifact {
    path: PathBuf,
    producer: &'static str,
}

impl std::fmt::Display for MissingArtifact {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} is missing; run `kgt {}` first", self.path.display(), self.producer)
    }
}

impl std::error::Error for MissingArtifact {}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn require(path: PathBuf, producer: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(MissingArtifact { path, producer }.into())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetInfo {
    dataset: PathBuf,
    policy: FilterPolicy,
    entities: usize,
    relations: usize,
    train: usize,
    valid: usize,
    test: usize,
}

struct Ctx {
    common: Common,
    config: RunConfig,
    started: u64,
}

impl Ctx {
    fn new(common: Common) -> Result<Self> {
        let mut config = RunConfig::load(common.config.as_deref())?;
        if let Some(s) = common.seed {
            config.reseed(s);
        }
        if let Some(p) = common.policy {
            config.train.filter_policy = p;
        }
        std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        Ok(Self {
            common,
            config,
            started: now(),
        })
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.common.out.join(rel)
    }

    fn dataset_info(&self) -> Result<DatasetInfo> {
        let p = require(self.out(PREPARED_DIR).join(DATASET_INFO), "prepare")?;
        Ok(serde_json::from_slice(&std::fs::read(p)?)?)
    }

    /// The prepared dataset, reloaded and augmented.
    fn graph(&self) -> Result<(KnowledgeGraph, PathBuf)> {
        let info = self.dataset_info()?;
        let root = self.common.dataset.clone().unwrap_or(info.dataset);
        let kg = load_dataset(&root, &DatasetLayout::default())
            .with_context(|| format!("loading dataset {}", root.display()))?
            .augment_inverses()?;
        if kg.num_entities() != info.entities || kg.num_relations() != info.relations {
            bail!(KgtError::Invalid(format!(
                "dataset {} no longer matches the prepared one ({} entities / {} relations, prepared {} / {}); rerun `kgt prepare`",
                root.display(),
                kg.num_entities(),
                kg.num_relations(),
                info.entities,
                info.relations
            )));
        }
        Ok((kg, root))
    }

    fn features(&self) -> Result<FeatureBank> {
        let dir = self.out(FEATURES_DIR);
        for (f, producer) in [
            (ENTITY_TEXT_FILE, "embed-text"),
            (RELATION_TEXT_FILE, "embed-text"),
            (ENTITY_STRUCT_FILE, "train-kge"),
            (RELATION_STRUCT_FILE, "train-kge"),
        ] {
            require(dir.join(f), producer)?;
        }
        Ok(FeatureBank::load_dir(&dir)?)
    }

    fn apply_mode(&mut self, m: &ModelOverrides) {
        if let Some(mode) = m.mode {
            self.config.model.prompt_mode = mode;
        }
    }

    fn finish(&self, command: &str, dataset: Option<PathBuf>) -> Result<()> {
        let m = RunManifest {
            command: command.to_string(),
            dataset,
            config: self.common.config.clone(),
            seed: self.config.train.seed,
            git_describe: git_describe(),
            started: self.started,
            finished: now(),
            out: self.common.out.clone(),
            artifacts: hash_artifacts(&self.common.out)?,
        };
        m.write()?;
        Ok(())
    }
}

fn summary_table(s: &RankSummary) -> String {
    let headers: Vec<String> = ["view", "mrr", "hits1", "hits3", "hits10", "queries"]
        .iter()
        .map(|h| h.to_string())
        .collect();
    let mut rows = Vec::new();
    for (name, m) in [("fused", Some(s.fused)), ("text", s.text), ("struct", s.structure)] {
        if let Some(m) = m {
            rows.push(vec![
                name.to_string(),
                format!("{:.4}", m.mrr),
                format!("{:.4}", m.hits1),
                format!("{:.4}", m.hits3),
                format!("{:.4}", m.hits10),
                m.queries.to_string(),
            ]);
        }
    }
    report::render_table(&headers, &rows)
}

fn parse_settings(s: &str) -> Result<Vec<AblationSetting>> {
    if s.trim() == "all" {
        return Ok(AblationSetting::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let a: AblationSetting = part.parse().map_err(|e: KgtError| UsageError(e.to_string()))?;
        if !out.contains(&a) {
            out.push(a);
        }
    }
    if out.is_empty() {
        bail!(UsageError("--settings is empty".into()));
    }
    Ok(out)
}

fn parse_gammas(s: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let g: f64 = part
            .parse()
            .map_err(|_| UsageError(format!("gamma `{part}` is not a number")))?;
        if !(g.is_finite() && g > 0.0) {
            bail!(UsageError(format!("gamma must be positive and finite, got {part}")));
        }
        out.push(g);
    }
    if out.is_empty() {
        bail!(UsageError("--gammas is empty".into()));
    }
    Ok(out)
}

fn prepare(common: Common, synthetic: bool) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let root = ctx.common.dataset.clone().unwrap_or_else(|| ctx.out("dataset"));
    if synthetic {
        let kg = synthetic_kg(&SyntheticConfig::default())?;
        write_dataset(&kg, &root, &DatasetLayout::default())?;
    } else if ctx.common.dataset.is_none() {
        bail!(UsageError("prepare needs --dataset (or --synthetic)".into()));
    }
    let kg = load_dataset(&root, &DatasetLayout::default())
        .with_context(|| format!("loading dataset {}", root.display()))?
        .augment_inverses()?;
    let policy = ctx.config.train.filter_policy;
    let filter = FilterIndex::build(&kg, policy)?;
    let vocab = Vocabulary::extend(&kg, default_base_tokens(&kg))?;

    let dir = ctx.out(PREPARED_DIR);
    std::fs::create_dir_all(&dir)?;
    let info = DatasetInfo {
        dataset: std::fs::canonicalize(&root)?,
        policy,
        entities: kg.num_entities(),
        relations: kg.num_relations(),
        train: kg.split(Split::Train).len(),
        valid: kg.split(Split::Valid).len(),
        test: kg.split(Split::Test).len(),
    };
    write_atomic(&dir.join(DATASET_INFO), serde_json::to_string_pretty(&info)?.as_bytes())?;
    write_atomic(&dir.join(VOCAB_FILE), serde_json::to_string_pretty(&vocab)?.as_bytes())?;
    let mut tsv = String::new();
    for t in filter.entries() {
        let (h, r, t) = kg.surface(t);
        let _ = writeln!(tsv, "{h}\t{r}\t{t}");
    }
    write_atomic(&dir.join(FILTER_FILE), tsv.as_bytes())?;
    println!(
        "prepared {}: {} entities, {} relations (with inverses), {} / {} / {} queries, vocabulary {} tokens",
        root.display(),
        info.entities,
        info.relations,
        info.train,
        info.valid,
        info.test,
        vocab.len()
    );
    ctx.finish("prepare", Some(info.dataset))
}

#[derive(Serialize)]
struct KgeReport<'a> {
    epoch_loss: &'a [f64],
    train_auc: f64,
}

fn train_kge_cmd(common: Common) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let (kg, root) = ctx.graph()?;
    let (model, log) = train_kge(&kg, &ctx.config.kge)?;
    let dir = ctx.out(KGE_DIR);
    model.save(&dir, ctx.config.kge.seed)?;
    let auc = corruption_auc(&model, &kg, ctx.config.kge.seed)?;
    let report = KgeReport {
        epoch_loss: &log.epoch_loss,
        train_auc: auc,
    };
    write_atomic(&dir.join("kge_log.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    let (e, r) = model.export_structural_features()?;
    let fdir = ctx.out(FEATURES_DIR);
    std::fs::create_dir_all(&fdir)?;
    save_features(&e, &fdir.join(ENTITY_STRUCT_FILE))?;
    save_features(&r, &fdir.join(RELATION_STRUCT_FILE))?;
    println!(
        "{:?} dim {}: final loss {:.4}, train AUC {:.4}",
        model.kind,
        model.dim(),
        log.epoch_loss.last().copied().unwrap_or(f64::NAN),
        auc
    );
    ctx.finish("train-kge", Some(root))
}

fn embed_text(common: Common, offline: bool) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let (kg, root) = ctx.graph()?;
    let (et, rt) = graph_texts(&kg);
    let endpoint = if offline {
        None
    } else {
        let e = EmbeddingEndpoint::from_env(ctx.config.text.dim);
        if e.is_none() {
            eprintln!("KGT_EMBED_URL is not set; using the offline encoder");
        }
        e
    };
    let (ent, rel) = match &endpoint {
        None => (
            encode_text_deterministic(&et, ctx.config.text.dim, ctx.config.text.seed)?,
            encode_text_deterministic(&rt, ctx.config.text.dim, ctx.config.text.seed)?,
        ),
        Some(e) => {
            let cache = ctx.out("text_cache");
            (encode_text_remote(&et, e, &cache)?, encode_text_remote(&rt, e, &cache)?)
        }
    };
    let fdir = ctx.out(FEATURES_DIR);
    std::fs::create_dir_all(&fdir)?;
    save_features(&ent, &fdir.join(ENTITY_TEXT_FILE))?;
    save_features(&rel, &fdir.join(RELATION_TEXT_FILE))?;
    println!(
        "{} text features: {} entities, {} relations, dim {}",
        if endpoint.is_some() { "remote" } else { "offline" },
        ent.rows(),
        rel.rows(),
        ent.cols()
    );
    ctx.finish("embed-text", Some(root))
}

fn train_cmd(common: Common, m: ModelOverrides, ablation: Option<AblationSetting>) -> Result<()> {
    let mut ctx = Ctx::new(common)?;
    ctx.apply_mode(&m);
    if let Some(a) = ablation {
        ctx.config.model.ablation = a;
    }
    let (kg, root) = ctx.graph()?;
    let bank = ctx.features()?;
    let mut model = KgtModel::new(&kg, &bank, ctx.config.model.clone(), ctx.config.train.seed)?;
    let sink = CheckpointSink {
        dir: ctx.out(CHECKPOINT_DIR),
        features_dir: ctx.out(FEATURES_DIR),
    };
    let log = train(&mut model, &kg, &ctx.config.train, Some(&sink))?;
    print!("{}", report::render_csv(&sink.dir.join(TRAIN_LOG_FILE))?);
    if let Some(s) = &log.last_valid {
        print!("\nvalid\n{}", summary_table(s));
    }
    ctx.finish("train", Some(root))
}

fn eval_cmd(common: Common, split: Split) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let (kg, root) = ctx.graph()?;
    let ckpt = require(ctx.out(CHECKPOINT_DIR), "train")?;
    require(ckpt.join(kgt_core::checkpoint::MANIFEST_FILE), "train")?;
    let (model, _) = load_checkpoint(&ckpt, Some(&ctx.out(FEATURES_DIR)))?;
    let filter = FilterIndex::build(&kg, ctx.config.train.filter_policy)?;
    let rep = evaluate(&model, &kg, split, &filter)?;
    let dir = ctx.out(EVAL_DIR);
    std::fs::create_dir_all(&dir)?;
    rep.save(&kg, &dir, &format!("ranks_{}", split.name()))?;
    print!("{}", summary_table(&rep.summary));
    ctx.finish("eval", Some(root))
}

fn ablate_cmd(common: Common, m: ModelOverrides, settings: &str, split: Split) -> Result<()> {
    let settings = parse_settings(settings)?;
    let mut ctx = Ctx::new(common)?;
    ctx.apply_mode(&m);
    let (kg, root) = ctx.graph()?;
    let bank = ctx.features()?;
    let dir = ctx.out(ABLATION_DIR);
    let features = ctx.out(FEATURES_DIR);
    let rows = run_ablations(
        &kg,
        &bank,
        &ctx.config.model,
        &ctx.config.train,
        &settings,
        split,
        Some((&dir, &features)),
    )?;
    let path = dir.join("ablation.csv");
    write_atomic(&path, ablation_csv(&rows).as_bytes())?;
    print!("{}", report::render_csv(&path)?);
    ctx.finish("ablate", Some(root))
}

fn sweep_cmd(common: Common, m: ModelOverrides, gammas: &str, retrain: bool, split: Split) -> Result<()> {
    let gammas = parse_gammas(gammas)?;
    let mut ctx = Ctx::new(common)?;
    ctx.apply_mode(&m);
    let (kg, root) = ctx.graph()?;
    let points: Vec<GammaPoint> = if retrain {
        let bank = ctx.features()?;
        sweep_gamma_retrain(&kg, &bank, &ctx.config.model, &ctx.config.train, split, &gammas)?
    } else {
        let ckpt = require(ctx.out(CHECKPOINT_DIR), "train")?;
        let (model, _) = load_checkpoint(&ckpt, Some(&ctx.out(FEATURES_DIR)))?;
        let filter = FilterIndex::build(&kg, ctx.config.train.filter_policy)?;
        sweep_gamma_rescore(&model, &kg, split, &filter, &gammas)?
    };
    let dir = ctx.out(SWEEP_DIR);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("gamma.csv");
    write_atomic(&path, gamma_table_csv(&points).as_bytes())?;
    write_atomic(&dir.join("gamma.json"), serde_json::to_string_pretty(&points)?.as_bytes())?;
    print!("{}", report::render_csv(&path)?);
    ctx.finish("sweep-gamma", Some(root))
}

fn report_cmd(common: Common) -> Result<()> {
    let ctx = Ctx::new(common)?;
    let mut out = String::new();
    let mut section = |title: &str, body: String| {
        let _ = write!(out, "== {title} ==\n{body}\n");
    };
    let log = ctx.out(CHECKPOINT_DIR).join(TRAIN_LOG_FILE);
    if log.exists() {
        section("training log", report::render_csv(&log)?);
    }
    let ckpt = ctx.out(CHECKPOINT_DIR);
    if ckpt.join(kgt_core::checkpoint::MANIFEST_FILE).exists() {
        if let Some(s) = read_manifest(&ckpt)?.metrics {
            section("checkpoint metrics (valid)", summary_table(&s));
        }
    }
    for split in [Split::Valid, Split::Test] {
        let p = ctx.out(EVAL_DIR).join(format!("ranks_{}.json", split.name()));
        if p.exists() {
            let s: RankSummary = serde_json::from_slice(&std::fs::read(&p)?)?;
            section(&format!("evaluation ({})", split.name()), summary_table(&s));
        }
    }
    let abl = ctx.out(ABLATION_DIR).join("ablation.csv");
    if abl.exists() {
        section("ablations", report::render_csv(&abl)?);
    }
    let gam = ctx.out(SWEEP_DIR).join("gamma.csv");
    if gam.exists() {
        section("logit ratio sweep", report::render_csv(&gam)?);
    }
    if out.is_empty() {
        return Err(MissingArtifact {
            path: ctx.out(CHECKPOINT_DIR).join(TRAIN_LOG_FILE),
            producer: "train",
        }
        .into());
    }
    write_atomic(&ctx.out("report.txt"), out.as_bytes())?;
    print!("{out}");
    ctx.finish("report", None)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Prepare { common, synthetic } => prepare(common, synthetic),
        Cmd::TrainKge { common } => train_kge_cmd(common),
        Cmd::EmbedText { common, offline } => embed_text(common, offline),
        Cmd::Train { common, model, ablation } => train_cmd(common, model, ablation),
        Cmd::Eval { common, split } => eval_cmd(common, split),
        Cmd::Ablate {
            common,
            model,
            settings,
            split,
        } => ablate_cmd(common, model, &settings, split),
        Cmd::SweepGamma {
            common,
            model,
            gammas,
            retrain,
            split,
        } => sweep_cmd(common, model, &gammas, retrain, split),
        Cmd::Report { common } => report_cmd(common),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(k) = cause.downcast_ref::<KgtError>() {
            return match k {
                _ if k.is_numeric() => 4,
                KgtError::Config(_) | KgtError::Conflict(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
