//! Command-line surface: corpus generation, statistics, training, inference,
//! scoring, normalization records, and repeated seeded runs with
//! significance tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use radspan::baseline::{predict_multi, train_multi};
use radspan::checkpoint::{self, CheckpointHeader};
use radspan::corpus::{corpus_stats, load_corpus_dir, split_corpus, write_standoff, Document};
use radspan::digest::{digest_named, fnv1a, hex};
use radspan::eval::{aggregate_runs, evaluate, welch_ttest, DocPrediction, MatchCriterion};
use radspan::normalizer::{accuracy, micro_f1, predict_all, train_norm, NormContext};
use radspan::records::{
    parse_predictions, render_report_json, render_report_text, write_norm_records,
    write_predictions, ArtifactHeader, System,
};
use radspan::schema::LabelSchema;
use radspan::spanmodel::{predict_spert, train_spert, ModelConfig, TrainConfig};
use radspan::synth::{generate, GrammarConfig};

#[derive(Parser)]
#[command(
    name = "radspan",
    version,
    about = "Span-based extraction of findings and normalized anatomy"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SystemArg {
    Spert,
    BertMulti,
    NormPhrase,
    NormSentence,
}

impl SystemArg {
    fn system(self) -> System {
        match self {
            SystemArg::Spert => System::Spert,
            SystemArg::BertMulti => System::BertMulti,
            SystemArg::NormPhrase => System::NormPhrase,
            SystemArg::NormSentence => System::NormSentence,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CriterionArg {
    Exact,
    Overlap,
}

impl CriterionArg {
    fn criterion(self) -> MatchCriterion {
        match self {
            CriterionArg::Exact => MatchCriterion::Exact,
            CriterionArg::Overlap => MatchCriterion::AnyOverlap,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ContextArg {
    Phrase,
    Sentence,
}

#[derive(Args)]
struct DataArgs {
    /// Directory of <id>.txt / <id>.ann standoff pairs
    #[arg(long)]
    data: PathBuf,
    /// Label schema config; the bundled full schema when omitted
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic annotated corpus
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Grammar config (JSON); the built-in default when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Override the config's document count
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Corpus statistics
    Stats {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train a system and write a checkpoint plus training log
    Train {
        #[arg(long, value_enum)]
        system: SystemArg,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Training/model overrides (JSON, partial)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 13)]
        split_seed: u64,
    },
    /// Run inference with a checkpoint and write prediction records
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Score prediction records against gold
    Score {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum)]
        criterion: CriterionArg,
        #[arg(long)]
        out: PathBuf,
        /// Also write the report as JSON
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 13)]
        split_seed: u64,
        /// Pool recall-by-length bins above this length
        #[arg(long, default_value_t = 10)]
        max_bin: usize,
    },
    /// Predict subtypes for gold anatomy phrases and write records
    Normalize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        context: ContextArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// K seeded train+score cycles with mean, SD, and pairwise Welch tests
    Repeat {
        #[arg(long, default_value_t = 10)]
        runs: usize,
        /// Comma-separated systems to compare
        #[arg(long, value_delimiter = ',')]
        systems: Vec<SystemArg>,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 13)]
        split_seed: u64,
    },
}

/// Partial overrides merged over per-system defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ConfigOverrides {
    negative_entity_count: Option<usize>,
    negative_relation_count: Option<usize>,
    max_span_width: Option<usize>,
    max_span_pairs: Option<usize>,
    dropout: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    warmup_fraction: Option<f64>,
    weight_decay: Option<f64>,
    max_grad_norm: Option<f64>,
    d_model: Option<usize>,
    n_layers: Option<usize>,
    n_heads: Option<usize>,
    d_ff: Option<usize>,
    max_len: Option<usize>,
    width_dim: Option<usize>,
    vocab_max: Option<usize>,
}

impl ConfigOverrides {
    fn load(path: Option<&Path>) -> Result<ConfigOverrides> {
        match path {
            None => Ok(ConfigOverrides::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }

    fn apply(&self, train: &mut TrainConfig, model: &mut ModelConfig) {
        macro_rules! set {
            ($target:expr, $field:ident) => {
                if let Some(v) = self.$field {
                    $target.$field = v;
                }
            };
        }
        set!(train, negative_entity_count);
        set!(train, negative_relation_count);
        set!(train, max_span_width);
        set!(train, max_span_pairs);
        set!(train, dropout);
        set!(train, batch_size);
        set!(train, epochs);
        set!(train, learning_rate);
        set!(train, warmup_fraction);
        set!(train, weight_decay);
        set!(train, max_grad_norm);
        set!(model, d_model);
        set!(model, n_layers);
        set!(model, n_heads);
        set!(model, d_ff);
        set!(model, max_len);
        set!(model, width_dim);
        set!(model, vocab_max);
    }
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Gen {
            out,
            config,
            seed,
            docs,
            schema,
        } => cmd_gen(&out, config.as_deref(), seed, docs, schema.as_deref()),
        Command::Stats { data } => cmd_stats(&data),
        Command::Train {
            system,
            data,
            out,
            config,
            seed,
            split_seed,
        } => cmd_train(system, &data, &out, config.as_deref(), seed, split_seed),
        Command::Predict {
            checkpoint,
            data,
            out,
            split,
        } => cmd_predict(&checkpoint, &data, &out, split),
        Command::Score {
            data,
            pred,
            criterion,
            out,
            json,
            split,
            split_seed,
            max_bin,
        } => cmd_score(
            &data,
            &pred,
            criterion,
            &out,
            json.as_deref(),
            split,
            split_seed,
            max_bin,
        ),
        Command::Normalize {
            checkpoint,
            data,
            context,
            out,
            split,
        } => cmd_normalize(&checkpoint, &data, context, &out, split),
        Command::Repeat {
            runs,
            systems,
            data,
            out,
            config,
            seed,
            split_seed,
        } => cmd_repeat(
            runs,
            &systems,
            &data,
            &out,
            config.as_deref(),
            seed,
            split_seed,
        ),
    }
}

fn load_schema(path: Option<&Path>) -> Result<LabelSchema> {
    match path {
        None => Ok(LabelSchema::full()),
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading schema {}", p.display()))?;
            Ok(LabelSchema::parse(&text)?)
        }
    }
}

fn corpus_digest(dir: &Path) -> Result<String> {
    let mut items: Vec<(String, Vec<u8>)> = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext == "txt" || ext == "ann" {
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            items.push((name, fs::read(&path)?));
        }
    }
    Ok(hex(digest_named(
        items.iter().map(|(n, b)| (n.as_str(), b.as_slice())),
    )))
}

fn load_split(
    data: &DataArgs,
    split: SplitArg,
    split_seed: u64,
) -> Result<(Vec<Document>, LabelSchema, String)> {
    let schema = load_schema(data.schema.as_deref())?;
    let digest = corpus_digest(&data.data)?;
    let docs = load_corpus_dir(&data.data, &schema)?;
    let docs = match split {
        SplitArg::All => docs,
        _ => {
            let (train, dev, test) = split_corpus(docs, (0.7, 0.1, 0.2), split_seed)?;
            match split {
                SplitArg::Train => train,
                SplitArg::Dev => dev,
                SplitArg::Test => test,
                SplitArg::All => unreachable!(),
            }
        }
    };
    Ok((docs, schema, digest))
}

fn cmd_gen(
    out: &Path,
    config: Option<&Path>,
    seed: u64,
    docs: Option<usize>,
    schema_path: Option<&Path>,
) -> Result<()> {
    let schema = load_schema(schema_path)?;
    let mut grammar = match config {
        None => GrammarConfig::default_config(seed),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<GrammarConfig>(&text)
                .with_context(|| format!("parsing {}", p.display()))?
        }
    };
    if config.is_some() {
        grammar.seed = seed;
    }
    let n = docs.unwrap_or(grammar.n_documents);
    let (documents, manifest) = generate(&grammar, n, &schema)?;
    fs::create_dir_all(out)?;
    for doc in &documents {
        write_standoff(doc, out, &schema)?;
    }
    let config_digest = hex(fnv1a(serde_json::to_string(&grammar)?.as_bytes()));
    let manifest_json = serde_json::json!({
        "header": {
            "tool_version": radspan::VERSION,
            "seed": grammar.seed,
            "config_digest": config_digest,
        },
        "manifest": manifest,
    });
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest_json)?,
    )?;
    println!(
        "wrote {} documents ({} sentences, {} relations) to {}",
        manifest.documents,
        manifest.sentences,
        manifest.relations,
        out.display()
    );
    Ok(())
}

fn cmd_stats(data: &DataArgs) -> Result<()> {
    let schema = load_schema(data.schema.as_deref())?;
    let docs = load_corpus_dir(&data.data, &schema)?;
    let stats = corpus_stats(&docs, &schema);
    println!(
        "documents {}  sentences {}  tokens {}",
        stats.documents, stats.sentences, stats.tokens
    );
    println!(
        "entities {}  relations {}",
        stats.entities_total, stats.relations
    );
    println!("{:<22} {:>7} {:>9}", "label", "gold", "unique");
    for (idx, name) in schema.span_labels().iter().enumerate() {
        let count = stats.entities_per_label[idx];
        if count > 0 {
            println!(
                "{:<22} {:>7} {:>9}",
                name, count, stats.unique_spans_per_label[idx]
            );
        }
    }
    Ok(())
}

fn effective_configs(
    system: System,
    seed: u64,
    overrides: &ConfigOverrides,
) -> (TrainConfig, ModelConfig) {
    let mut train = match system {
        System::Spert => TrainConfig::spert(seed),
        System::BertMulti => TrainConfig::bert_multi(seed),
        System::NormPhrase | System::NormSentence => TrainConfig::normalization(seed),
    };
    let mut model = ModelConfig::default();
    overrides.apply(&mut train, &mut model);
    (train, model)
}

struct TrainedSystem {
    store: radspan::params::ParamStore,
    kind: TrainedKind,
    vocab: radspan::encoder::Vocab,
    log: Vec<radspan::spanmodel::EpochLog>,
}

enum TrainedKind {
    Spert(radspan::spanmodel::SpertModel),
    Multi(radspan::baseline::MultiModel),
    Norm(radspan::normalizer::NormModel),
}

fn train_system(
    system: System,
    train_docs: &[Document],
    dev_docs: &[Document],
    schema: &LabelSchema,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<TrainedSystem> {
    Ok(match system {
        System::Spert => {
            let t = train_spert(train_docs, dev_docs, schema, cfg, model_cfg)?;
            TrainedSystem {
                store: t.store,
                kind: TrainedKind::Spert(t.model),
                vocab: t.vocab,
                log: t.log,
            }
        }
        System::BertMulti => {
            let t = train_multi(train_docs, dev_docs, schema, cfg, model_cfg)?;
            TrainedSystem {
                store: t.store,
                kind: TrainedKind::Multi(t.model),
                vocab: t.vocab,
                log: t.log,
            }
        }
        System::NormPhrase | System::NormSentence => {
            let context = if system == System::NormPhrase {
                NormContext::Phrase
            } else {
                NormContext::Sentence
            };
            let t = train_norm(train_docs, dev_docs, schema, cfg, model_cfg, context)?;
            TrainedSystem {
                store: t.store,
                kind: TrainedKind::Norm(t.model),
                vocab: t.vocab,
                log: t.log,
            }
        }
    })
}

fn cmd_train(
    system_arg: SystemArg,
    data: &DataArgs,
    out: &Path,
    config: Option<&Path>,
    seed: u64,
    split_seed: u64,
) -> Result<()> {
    let system = system_arg.system();
    let overrides = ConfigOverrides::load(config)?;
    let (cfg, model_cfg) = effective_configs(system, seed, &overrides);
    cfg.validate().map_err(|e| anyhow::anyhow!(e))?;

    let schema = load_schema(data.schema.as_deref())?;
    let data_digest = corpus_digest(&data.data)?;
    let docs = load_corpus_dir(&data.data, &schema)?;
    let (train_docs, dev_docs, _test) = split_corpus(docs, (0.7, 0.1, 0.2), split_seed)?;
    println!(
        "training {} on {} train / {} dev documents (seed {seed})",
        system.name(),
        train_docs.len(),
        dev_docs.len()
    );

    let mut trained = train_system(system, &train_docs, &dev_docs, &schema, &cfg, &model_cfg)?;

    fs::create_dir_all(out)?;
    let header = CheckpointHeader {
        version: radspan::VERSION.to_string(),
        system,
        train_config: cfg.clone(),
        model_config: model_cfg.clone(),
        norm_context: match &trained.kind {
            TrainedKind::Norm(m) => Some(m.context),
            _ => None,
        },
        split_seed,
        data_digest: data_digest.clone(),
    };
    let ckpt_path = out.join("checkpoint.rsck");
    checkpoint::save(
        &ckpt_path,
        &header,
        &schema,
        &trained.vocab,
        &mut trained.store,
    )?;

    let config_digest = hex(fnv1a(serde_json::to_string(&cfg)?.as_bytes()));
    let mut log_text = ArtifactHeader::new(seed, &config_digest)
        .with_input("corpus", &data_digest)
        .with_extra("system", system.name())
        .with_extra("split_seed", &split_seed.to_string())
        .render();
    log_text.push_str("epoch\tmean_loss\tdev_finding_f1\tdev_micro_subtype_f1\tdev_relation_f1\n");
    for l in &trained.log {
        log_text.push_str(&format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\n",
            l.epoch, l.mean_loss, l.dev_finding_f1, l.dev_micro_subtype_f1, l.dev_relation_f1
        ));
    }
    fs::write(out.join("train_log.tsv"), log_text)?;
    if let Some(last) = trained.log.last() {
        println!(
            "done: loss {:.4}, dev finding F1 {:.3}, dev subtype F1 {:.3}, dev relation F1 {:.3}",
            last.mean_loss, last.dev_finding_f1, last.dev_micro_subtype_f1, last.dev_relation_f1
        );
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn cmd_predict(ckpt_path: &Path, data: &DataArgs, out: &Path, split: SplitArg) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let (docs, schema, data_digest) = load_split(data, split, ckpt.header.split_seed)?;
    if schema != ckpt.schema {
        bail!("schema mismatch between --schema and the checkpoint");
    }
    let system = ckpt.header.system;
    let cfg = ckpt.header.train_config.clone();
    let (preds, skipped) = match system {
        System::Spert => {
            let (store, model) = ckpt.restore_spert()?;
            let mut skipped = 0usize;
            let preds: Vec<DocPrediction> = docs
                .iter()
                .map(|d| {
                    let (p, diag) = predict_spert(&store, &model, &ckpt.vocab, &cfg, d);
                    skipped += diag.skipped_overlapping_pairs;
                    p
                })
                .collect();
            (preds, skipped)
        }
        System::BertMulti => {
            let (store, model) = ckpt.restore_multi()?;
            let preds: Vec<DocPrediction> = docs
                .iter()
                .map(|d| predict_multi(&store, &model, &ckpt.vocab, &schema, &cfg, d).0)
                .collect();
            (preds, 0)
        }
        other => bail!(
            "checkpoint is a {} model; use the normalize command",
            other.name()
        ),
    };
    let config_digest = hex(fnv1a(serde_json::to_string(&cfg)?.as_bytes()));
    let header = ArtifactHeader::new(cfg.seed, &config_digest)
        .with_input("corpus", &data_digest)
        .with_input("checkpoint", &hex(fnv1a(&fs::read(ckpt_path)?)))
        .with_extra("system", system.name())
        .with_extra("split", split_name(split))
        .with_extra("split_seed", &ckpt.header.split_seed.to_string());
    let text = write_predictions(&header, &preds, &docs, &schema, system);
    fs::write(out, text)?;
    let n_entities: usize = preds.iter().map(|p| p.entities.len()).sum();
    let n_relations: usize = preds.iter().map(|p| p.relations.len()).sum();
    println!(
        "predicted {n_entities} entities, {n_relations} relations over {} documents",
        docs.len()
    );
    if skipped > 0 {
        println!("skipped {skipped} overlapping candidate pairs");
    }
    Ok(())
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::Train => "train",
        SplitArg::Dev => "dev",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_score(
    data: &DataArgs,
    pred_path: &Path,
    criterion: CriterionArg,
    out: &Path,
    json: Option<&Path>,
    split: SplitArg,
    split_seed: u64,
    max_bin: usize,
) -> Result<()> {
    let (docs, schema, data_digest) = load_split(data, split, split_seed)?;
    let content = fs::read_to_string(pred_path)?;
    let preds = parse_predictions(&content, &schema)?;
    let report = evaluate(&docs, &preds, criterion.criterion(), &schema, max_bin);
    let header = ArtifactHeader::new(split_seed, &hex(fnv1a(content.as_bytes())))
        .with_input("corpus", &data_digest)
        .with_input("predictions", &hex(fnv1a(content.as_bytes())))
        .with_extra("criterion", report.criterion.name())
        .with_extra("split", split_name(split));
    let mut text = header.render();
    text.push_str(&render_report_text(&report));
    fs::write(out, &text)?;
    if let Some(json_path) = json {
        fs::write(json_path, render_report_json(&header, &report)?)?;
    }
    println!(
        "[{}] finding F1 {:.4} | anatomy F1 {:.4} | subtype micro F1 {:.4} | relation F1 {:.4}",
        report.criterion.name(),
        report.finding.f1,
        report.anatomy.f1,
        report.micro_subtype.f1,
        report.relation_subtype.f1
    );
    Ok(())
}

fn cmd_normalize(
    ckpt_path: &Path,
    data: &DataArgs,
    context: ContextArg,
    out: &Path,
    split: SplitArg,
) -> Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let wanted = match context {
        ContextArg::Phrase => System::NormPhrase,
        ContextArg::Sentence => System::NormSentence,
    };
    if ckpt.header.system != wanted {
        bail!(
            "checkpoint was trained as {}, but --context asks for {}",
            ckpt.header.system.name(),
            wanted.name()
        );
    }
    let (docs, schema, data_digest) = load_split(data, split, ckpt.header.split_seed)?;
    if schema != ckpt.schema {
        bail!("schema mismatch between --schema and the checkpoint");
    }
    let (store, model) = ckpt.restore_norm()?;
    let preds = predict_all(&store, &model, &ckpt.vocab, &schema, &docs);
    let cfg = &ckpt.header.train_config;
    let config_digest = hex(fnv1a(serde_json::to_string(cfg)?.as_bytes()));
    let header = ArtifactHeader::new(cfg.seed, &config_digest)
        .with_input("corpus", &data_digest)
        .with_input("checkpoint", &hex(fnv1a(&fs::read(ckpt_path)?)))
        .with_extra("system", wanted.name())
        .with_extra("split", split_name(split));
    fs::write(out, write_norm_records(&header, &preds, &schema, wanted))?;
    println!(
        "normalized {} phrases: accuracy {:.4}, micro F1 {:.4}",
        preds.len(),
        accuracy(&preds),
        micro_f1(&preds, &schema)
    );
    Ok(())
}

/// Metric columns collected per run for the repeat command.
fn run_metrics(
    system: System,
    trained: &TrainedSystem,
    test: &[Document],
    schema: &LabelSchema,
    cfg: &TrainConfig,
) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    match &trained.kind {
        TrainedKind::Spert(model) => {
            let preds: Vec<DocPrediction> = test
                .iter()
                .map(|d| predict_spert(&trained.store, model, &trained.vocab, cfg, d).0)
                .collect();
            extraction_metrics(&mut m, test, &preds, schema, cfg.max_span_width);
        }
        TrainedKind::Multi(model) => {
            let preds: Vec<DocPrediction> = test
                .iter()
                .map(|d| predict_multi(&trained.store, model, &trained.vocab, schema, cfg, d).0)
                .collect();
            extraction_metrics(&mut m, test, &preds, schema, cfg.max_span_width);
        }
        TrainedKind::Norm(model) => {
            let preds = predict_all(&trained.store, model, &trained.vocab, schema, test);
            m.insert("norm_accuracy".into(), accuracy(&preds));
            m.insert("norm_micro_f1".into(), micro_f1(&preds, schema));
        }
    }
    let _ = system;
    m
}

fn extraction_metrics(
    m: &mut BTreeMap<String, f64>,
    test: &[Document],
    preds: &[DocPrediction],
    schema: &LabelSchema,
    max_bin: usize,
) {
    for criterion in [MatchCriterion::Exact, MatchCriterion::AnyOverlap] {
        let r = evaluate(test, preds, criterion, schema, max_bin);
        let c = criterion.name();
        m.insert(format!("{c}_finding_f1"), r.finding.f1);
        m.insert(format!("{c}_anatomy_f1"), r.anatomy.f1);
        m.insert(format!("{c}_subtype_micro_f1"), r.micro_subtype.f1);
        m.insert(format!("{c}_relation_subtype_f1"), r.relation_subtype.f1);
        m.insert(format!("{c}_relation_anatomy_f1"), r.relation_anatomy.f1);
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_repeat(
    runs: usize,
    systems: &[SystemArg],
    data: &DataArgs,
    out: &Path,
    config: Option<&Path>,
    seed: u64,
    split_seed: u64,
) -> Result<()> {
    if runs == 0 || systems.is_empty() {
        bail!("repeat needs --runs >= 1 and at least one --systems entry");
    }
    let overrides = ConfigOverrides::load(config)?;
    let schema = load_schema(data.schema.as_deref())?;
    let data_digest = corpus_digest(&data.data)?;
    let docs = load_corpus_dir(&data.data, &schema)?;
    let (train_docs, dev_docs, test_docs) = split_corpus(docs, (0.7, 0.1, 0.2), split_seed)?;
    fs::create_dir_all(out)?;

    let mut results: BTreeMap<System, Vec<BTreeMap<String, f64>>> = BTreeMap::new();
    let mut order: Vec<System> = Vec::new();
    for arg in systems {
        let system = arg.system();
        if !order.contains(&system) {
            order.push(system);
        }
        for k in 0..runs {
            let run_seed = seed + k as u64;
            let (cfg, model_cfg) = effective_configs(system, run_seed, &overrides);
            println!(
                "[{} run {}/{}] seed {}",
                system.name(),
                k + 1,
                runs,
                run_seed
            );
            let trained = train_system(system, &train_docs, &dev_docs, &schema, &cfg, &model_cfg)?;
            let metrics = run_metrics(system, &trained, &test_docs, &schema, &cfg);
            results.entry(system).or_default().push(metrics);
        }
    }

    let config_digest = hex(fnv1a(format!("{overrides:?}").as_bytes()));
    let header = ArtifactHeader::new(seed, &config_digest)
        .with_input("corpus", &data_digest)
        .with_extra("runs", &runs.to_string())
        .with_extra("split_seed", &split_seed.to_string());

    // summary: one row per run, then mean +/- SD per system
    let mut summary = header.render();
    for system in &order {
        let rows = &results[system];
        let mut columns: Vec<&String> = rows[0].keys().collect();
        columns.sort();
        summary.push_str(&format!(
            "system\tseed\t{}\n",
            columns
                .iter()
                .map(|c| c.as_str())
                .collect::<Vec<_>>()
                .join("\t")
        ));
        for (k, row) in rows.iter().enumerate() {
            summary.push_str(&format!(
                "{}\t{}\t{}\n",
                system.name(),
                seed + k as u64,
                columns
                    .iter()
                    .map(|c| format!("{:.4}", row[*c]))
                    .collect::<Vec<_>>()
                    .join("\t")
            ));
        }
        summary.push_str(&format!("{}-mean±sd\t-", system.name()));
        for c in &columns {
            let values: Vec<f64> = rows.iter().map(|r| r[*c]).collect();
            let (mean, sd) = aggregate_runs(&values).expect("runs >= 1");
            summary.push_str(&format!("\t{mean:.4}±{sd:.4}"));
        }
        summary.push('\n');
    }

    // pairwise Welch tests over shared metric columns
    let mut welch = header.render();
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            let (a, b) = (order[i], order[j]);
            let rows_a = &results[&a];
            let rows_b = &results[&b];
            let shared: Vec<&String> = rows_a[0]
                .keys()
                .filter(|k| rows_b[0].contains_key(*k))
                .collect();
            for metric in shared {
                let va: Vec<f64> = rows_a.iter().map(|r| r[metric]).collect();
                let vb: Vec<f64> = rows_b.iter().map(|r| r[metric]).collect();
                match welch_ttest(&va, &vb) {
                    Ok((t, p)) => {
                        let sig = if p < 0.05 {
                            "significant"
                        } else {
                            "not significant"
                        };
                        welch.push_str(&format!(
                            "{} vs {} on {metric}: t={t:.4} p={p:.4} ({sig} at p<0.05)\n",
                            a.name(),
                            b.name()
                        ));
                    }
                    Err(e) => {
                        welch.push_str(&format!(
                            "{} vs {} on {metric}: not testable ({e})\n",
                            a.name(),
                            b.name()
                        ));
                    }
                }
            }
        }
    }
    fs::write(out.join("summary.tsv"), &summary)?;
    fs::write(out.join("welch.txt"), &welch)?;
    print!("{summary}");
    if order.len() > 1 {
        print!("{welch}");
    }
    Ok(())
}
