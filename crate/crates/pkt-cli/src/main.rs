//! `pkt`: command-line front end for the prefix-training pipeline.
//!
//! Every setting can come from a flag or from a flat key=value config
//! file (`--config`); flags win. The seed falls back to the `PKT_SEED`
//! environment variable. Exit codes: 0 success, 1 bad usage or
//! configuration, 2 data problems, 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use pkt_core::data::{
    build_manifest, generate_chatter, generate_synthetic, load_corpus, save_corpus, Corpus,
    SlotVocab, SplitManifest, SyntheticSpec, Turn, FEW_SHOT_THRESHOLD,
};
use pkt_core::decode::{generate_response, DEFAULT_BEAM, DEFAULT_MAX_NEW_TOKENS};
use pkt_core::eval::{
    evaluate_setting, judge_from_spec, param_accounting, EvalConfig, ParamAccounting,
    PrefixProvider,
};
use pkt_core::model::{pretrain_backbone, Backbone, BackboneConfig, PretrainConfig};
use pkt_core::pipeline::{
    finetune_backbone, persona_seed, source_strategy_by_name, train_personalized, EntryMeta,
    FinetuneConfig, MetaTrainConfig, PersonaTrainConfig, PrefixStore, SourceTrainConfig,
    TrainOutput, SOURCE_KEY,
};
use pkt_core::prefix::{DeployedPrefix, ReparamPrefix, DEFAULT_K_REPARAM, DEFAULT_PREFIX_LEN};
use pkt_core::{PktError, Result};

#[derive(Parser)]
#[command(
    name = "pkt",
    about = "Persona-prefix training over a frozen transformer",
    version
)]
struct Cli {
    /// Flat key=value file supplying defaults for any long flag
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trait-slot corpus and its slot vocabulary
    GenCorpus(GenCorpusArgs),
    /// Partition personas into parts A/B/C and split dialogues 8:1:1
    Split(SplitArgs),
    /// Train a fresh backbone on a corpus and write its checkpoint
    Pretrain(PretrainArgs),
    /// Fine-tune every backbone weight on a persona-agnostic pool
    Finetune(FinetuneArgs),
    /// Train the shared source prefix on part A
    TrainSource(TrainSourceArgs),
    /// Adapt a prefix to one persona (or every persona of a part)
    TrainPersona(TrainPersonaArgs),
    /// Decode one response for a dialogue history
    Generate(GenerateArgs),
    /// Decode and score a part's test turns, writing a report
    Evaluate(EvaluateArgs),
    /// Print trainable-parameter accounting for given dimensions
    Params(ParamsArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Corpus JSONL destination
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Slot-vocabulary JSON destination (for the keyword judge); persona style only
    #[arg(long, value_name = "FILE")]
    slots_out: Option<PathBuf>,
    /// "persona" (trait-consistent speakers) or "chatter" (persona-free
    /// pretraining text from the same templates)
    #[arg(long)]
    style: Option<String>,
    #[arg(long)]
    personas_regular: Option<usize>,
    #[arg(long)]
    personas_few_shot: Option<usize>,
    /// Dialogue-count range for regular personas
    #[arg(long)]
    dialogues_min: Option<usize>,
    #[arg(long)]
    dialogues_max: Option<usize>,
    #[arg(long)]
    few_shot_dialogues: Option<usize>,
    /// Total dialogue count (chatter style only)
    #[arg(long)]
    dialogues: Option<usize>,
    #[arg(long)]
    exchanges: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Manifest JSON destination
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Dialogue count below which a persona is few-shot (part C)
    #[arg(long)]
    threshold: Option<usize>,
    /// How many regular personas become personalization targets (part B)
    #[arg(long)]
    part_b_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Backbone checkpoint destination
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ffn: Option<usize>,
    #[arg(long)]
    max_context: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    backbone: Option<PathBuf>,
    /// Tuned checkpoint destination
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Comma-separated parts pooled for training
    #[arg(long)]
    parts: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainSourceArgs {
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    backbone: Option<PathBuf>,
    /// Prefix store directory (created if absent)
    #[arg(long, value_name = "DIR")]
    store: Option<PathBuf>,
    /// base | temperature | ppreptile
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    prefix_len: Option<usize>,
    #[arg(long)]
    k_reparam: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    k_inner: Option<usize>,
    #[arg(long)]
    n_personas: Option<usize>,
    #[arg(long)]
    b_in: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Inner-loop update rule for the meta strategy: sgd | adamw
    #[arg(long)]
    inner_optimizer: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainPersonaArgs {
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    backbone: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    store: Option<PathBuf>,
    /// Single persona id to adapt
    #[arg(long, conflicts_with = "all_part")]
    persona: Option<String>,
    /// Adapt every persona of this part (B or C)
    #[arg(long)]
    all_part: Option<String>,
    /// Initialization: source | random
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    prefix_len: Option<usize>,
    #[arg(long)]
    k_reparam: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_name = "FILE")]
    backbone: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    store: Option<PathBuf>,
    /// Persona whose prefix conditions the response (needs --store)
    #[arg(long)]
    persona: Option<String>,
    /// One speaker-1 utterance used as the whole history
    #[arg(long, conflicts_with = "history_file")]
    prompt: Option<String>,
    /// JSONL history, one {"speaker": 1|2, "text": "..."} per line
    #[arg(long, value_name = "FILE")]
    history_file: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    backbone: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    store: Option<PathBuf>,
    /// Part to evaluate: B or C
    #[arg(long)]
    part: Option<String>,
    /// Label recorded in the report
    #[arg(long)]
    setting: Option<String>,
    /// Prefix source: personalized | source | none
    #[arg(long)]
    prefixes: Option<String>,
    /// keyword | subprocess:<command>
    #[arg(long)]
    judge: Option<String>,
    /// Slot vocabulary JSON (required by the keyword judge)
    #[arg(long, value_name = "FILE")]
    slots: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Report destination; stdout when omitted
    #[arg(long, value_name = "FILE")]
    report_out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dmodel: Option<usize>,
    #[arg(long)]
    prefix_len: Option<usize>,
    #[arg(long)]
    backbone_params: Option<usize>,
}

/// Settings resolver: flag value, else config-file key (the long flag
/// name), else default. Paths have no defaults and must come from one of
/// the two.
struct Resolver {
    file: BTreeMap<String, String>,
}

impl Resolver {
    fn load(path: Option<&Path>) -> Result<Resolver> {
        let mut file = BTreeMap::new();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| {
                PktError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            for (ln, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    return Err(PktError::Config(format!(
                        "{} line {}: expected key=value, got '{raw}'",
                        p.display(),
                        ln + 1
                    )));
                };
                file.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Resolver { file })
    }

    fn parse_or<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.file.get(key) {
            Some(raw) => raw.parse().map_err(|_| {
                PktError::Config(format!("config key '{key}': cannot parse '{raw}'"))
            }),
            None => Ok(default),
        }
    }

    fn string_or(&self, key: &str, flag: Option<String>, default: &str) -> String {
        flag.or_else(|| self.file.get(key).cloned())
            .unwrap_or_else(|| default.to_string())
    }

    fn opt_string(&self, key: &str, flag: Option<String>) -> Option<String> {
        flag.or_else(|| self.file.get(key).cloned())
    }

    fn required_path(&self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        flag.or_else(|| self.file.get(key).map(PathBuf::from))
            .ok_or_else(|| PktError::Config(format!("missing required --{key}")))
    }

    fn opt_path(&self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        flag.or_else(|| self.file.get(key).map(PathBuf::from))
    }

    /// Seed precedence: flag, config key, PKT_SEED, then 0.
    fn seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Some(raw) = self.file.get("seed") {
            return raw.parse().map_err(|_| {
                PktError::Config(format!("config key 'seed': cannot parse '{raw}'"))
            });
        }
        match std::env::var("PKT_SEED") {
            Ok(raw) => raw
                .parse()
                .map_err(|_| PktError::Config(format!("PKT_SEED: cannot parse '{raw}'"))),
            Err(_) => Ok(0),
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                PktError::Config(_) => 1,
                PktError::Numeric(_) => 3,
                PktError::Shape { .. } | PktError::Data(_) | PktError::Io(_) => 2,
            };
            std::process::exit(code);
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let r = Resolver::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus(a) => cmd_gen_corpus(&r, a),
        Command::Split(a) => cmd_split(&r, a),
        Command::Pretrain(a) => cmd_pretrain(&r, a),
        Command::Finetune(a) => cmd_finetune(&r, a),
        Command::TrainSource(a) => cmd_train_source(&r, a),
        Command::TrainPersona(a) => cmd_train_persona(&r, a),
        Command::Generate(a) => cmd_generate(&r, a),
        Command::Evaluate(a) => cmd_evaluate(&r, a),
        Command::Params(a) => cmd_params(&r, a),
    }
}

fn load_backbone(path: &Path) -> Result<Backbone> {
    Backbone::load(path)
        .map_err(|e| match e {
            PktError::Io(io) => PktError::Data(format!("backbone {}: {io}", path.display())),
            other => other,
        })
}

fn load_corpus_named(path: &Path) -> Result<Corpus> {
    load_corpus(path).map_err(|e| match e {
        PktError::Io(io) => PktError::Data(format!("corpus {}: {io}", path.display())),
        other => other,
    })
}

fn load_manifest_named(path: &Path) -> Result<SplitManifest> {
    SplitManifest::load(path).map_err(|e| match e {
        PktError::Io(io) => PktError::Data(format!("manifest {}: {io}", path.display())),
        other => other,
    })
}

fn print_warnings(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn cmd_gen_corpus(r: &Resolver, a: GenCorpusArgs) -> Result<()> {
    let out = r.required_path("out", a.out)?;
    let style = r.string_or("style", a.style, "persona");
    let mut spec = SyntheticSpec::default();
    spec.personas_regular =
        r.parse_or("personas-regular", a.personas_regular, spec.personas_regular)?;
    spec.personas_few_shot =
        r.parse_or("personas-few-shot", a.personas_few_shot, spec.personas_few_shot)?;
    spec.regular_dialogues = (
        r.parse_or("dialogues-min", a.dialogues_min, spec.regular_dialogues.0)?,
        r.parse_or("dialogues-max", a.dialogues_max, spec.regular_dialogues.1)?,
    );
    spec.few_shot_dialogues =
        r.parse_or("few-shot-dialogues", a.few_shot_dialogues, spec.few_shot_dialogues)?;
    spec.exchanges_per_dialogue =
        r.parse_or("exchanges", a.exchanges, spec.exchanges_per_dialogue)?;
    spec.seed = r.seed(a.seed)?;
    match style.as_str() {
        "persona" => {
            let slots_out = r.required_path("slots-out", a.slots_out)?;
            let corpus = generate_synthetic(&spec)?;
            save_corpus(&corpus, &out)?;
            SlotVocab::from_spec(&spec).save(&slots_out)?;
            eprintln!(
                "wrote {} personas to {} (slots in {})",
                corpus.personas.len(),
                out.display(),
                slots_out.display()
            );
        }
        "chatter" => {
            let n_dialogues = r.parse_or("dialogues", a.dialogues, 256usize)?;
            let corpus = generate_chatter(&spec, n_dialogues, spec.seed)?;
            save_corpus(&corpus, &out)?;
            eprintln!("wrote {n_dialogues} chatter dialogues to {}", out.display());
        }
        other => {
            return Err(PktError::Config(format!(
                "unknown corpus style '{other}' (expected persona or chatter)"
            )));
        }
    }
    Ok(())
}

fn cmd_split(r: &Resolver, a: SplitArgs) -> Result<()> {
    let corpus_path = r.required_path("corpus", a.corpus)?;
    let out = r.required_path("out", a.out)?;
    let threshold = r.parse_or("threshold", a.threshold, FEW_SHOT_THRESHOLD)?;
    let part_b = r.parse_or("part-b-size", a.part_b_size, 10usize)?;
    let seed = r.seed(a.seed)?;
    let corpus = load_corpus_named(&corpus_path)?;
    let (manifest, warnings) = build_manifest(&corpus, threshold, part_b, seed)?;
    print_warnings(&warnings);
    manifest.save(&out)?;
    let count = |p: &str| manifest.personas_in_part(p).map(<[String]>::len).unwrap_or(0);
    eprintln!(
        "wrote {} (A: {}, B: {}, C: {})",
        out.display(),
        count("A"),
        count("B"),
        count("C")
    );
    Ok(())
}

fn cmd_pretrain(r: &Resolver, a: PretrainArgs) -> Result<()> {
    let corpus_path = r.required_path("corpus", a.corpus)?;
    let out = r.required_path("out", a.out)?;
    let desk = BackboneConfig::desk_default();
    let cfg = BackboneConfig {
        vocab_size: r.parse_or("vocab-size", a.vocab_size, desk.vocab_size)?,
        d_model: r.parse_or("d-model", a.d_model, desk.d_model)?,
        n_layers: r.parse_or("n-layers", a.n_layers, desk.n_layers)?,
        n_heads: r.parse_or("n-heads", a.n_heads, desk.n_heads)?,
        d_ffn: r.parse_or("d-ffn", a.d_ffn, desk.d_ffn)?,
        max_context: r.parse_or("max-context", a.max_context, desk.max_context)?,
    };
    let mut pcfg = PretrainConfig::new(
        r.parse_or("epochs", a.epochs, 10)?,
        r.seed(a.seed)?,
    );
    pcfg.lr = r.parse_or("lr", a.lr, pcfg.lr)?;
    pcfg.batch_size = r.parse_or("batch-size", a.batch_size, pcfg.batch_size)?;
    let corpus = load_corpus_named(&corpus_path)?;
    let (backbone, report) = pretrain_backbone(&corpus, &cfg, &pcfg)?;
    backbone.save(&out)?;
    eprintln!(
        "wrote {} ({} params, {} steps, held-out loss {:.4})",
        out.display(),
        backbone.weights.param_count(),
        report.steps,
        report.held_out_loss
    );
    Ok(())
}

fn parse_parts(raw: &str) -> Result<Vec<String>> {
    let parts: Vec<String> = raw
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if parts.is_empty() {
        return Err(PktError::Config(format!("no parts in '{raw}'")));
    }
    for p in &parts {
        if !matches!(p.as_str(), "A" | "B" | "C") {
            return Err(PktError::Config(format!("unknown part '{p}', expected A, B, or C")));
        }
    }
    Ok(parts)
}

fn cmd_finetune(r: &Resolver, a: FinetuneArgs) -> Result<()> {
    let corpus_path = r.required_path("corpus", a.corpus)?;
    let manifest_path = r.required_path("manifest", a.manifest)?;
    let backbone_path = r.required_path("backbone", a.backbone)?;
    let out = r.required_path("out", a.out)?;
    let parts_raw = r.string_or("parts", a.parts, "A,B,C");
    let parts = parse_parts(&parts_raw)?;
    let mut cfg = FinetuneConfig::new(r.seed(a.seed)?);
    cfg.lr = r.parse_or("lr", a.lr, cfg.lr)?;
    cfg.batch_size = r.parse_or("batch-size", a.batch_size, cfg.batch_size)?;
    cfg.max_epochs = r.parse_or("epochs", a.epochs, cfg.max_epochs)?;
    cfg.patience = r.parse_or("patience", a.patience, cfg.patience)?;

    let corpus = load_corpus_named(&corpus_path)?;
    let manifest = load_manifest_named(&manifest_path)?;
    let backbone = load_backbone(&backbone_path)?;
    let part_refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    let (tuned, log, warnings) =
        finetune_backbone(&backbone, &corpus, &manifest, &part_refs, &cfg)?;
    print_warnings(&warnings);
    tuned.save(&out)?;
    if let Some(last) = log.last() {
        eprintln!(
            "wrote {} (epoch {} train loss {:.4})",
            out.display(),
            last.epoch,
            last.train_loss
        );
    } else {
        eprintln!("wrote {} (no training epochs ran)", out.display());
    }
    Ok(())
}

fn config_echo(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

fn digest_hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn save_train_output(
    store: &PrefixStore,
    backbone: &Backbone,
    key: &str,
    out: &TrainOutput,
    strategy: &str,
    init: &str,
    seed: u64,
    config: BTreeMap<String, String>,
) -> Result<()> {
    let meta = EntryMeta {
        key: key.to_string(),
        strategy: strategy.to_string(),
        init: init.to_string(),
        seed,
        backbone_digest: digest_hex(&backbone.digest()),
        config,
        final_train_loss: out.log.last().map(|l| l.train_loss),
        best_valid_loss: out
            .log
            .iter()
            .filter_map(|l| l.valid_loss)
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.min(v)))
            }),
        epochs: out.log.len(),
    };
    store.save_entry(key, &out.prefix.deploy()?, Some(&out.prefix), &meta, &out.log)
}

fn cmd_train_source(r: &Resolver, a: TrainSourceArgs) -> Result<()> {
    let corpus_path = r.required_path("corpus", a.corpus)?;
    let manifest_path = r.required_path("manifest", a.manifest)?;
    let backbone_path = r.required_path("backbone", a.backbone)?;
    let store_path = r.required_path("store", a.store)?;
    let strategy_name = r.string_or("strategy", a.strategy, "base");
    let strategy = source_strategy_by_name(&strategy_name)?;
    let seed = r.seed(a.seed)?;
    let prefix_len = r.parse_or("prefix-len", a.prefix_len, DEFAULT_PREFIX_LEN)?;
    let k_reparam = r.parse_or("k-reparam", a.k_reparam, DEFAULT_K_REPARAM)?;

    let mut cfg = SourceTrainConfig::new(seed);
    cfg.lr = r.parse_or("lr", a.lr, cfg.lr)?;
    cfg.batch_size = r.parse_or("batch-size", a.batch_size, cfg.batch_size)?;
    cfg.max_epochs = r.parse_or("epochs", a.epochs, cfg.max_epochs)?;
    cfg.patience = r.parse_or("patience", a.patience, cfg.patience)?;
    cfg.temperature = r.parse_or("temperature", a.temperature, cfg.temperature)?;
    cfg.meta = MetaTrainConfig {
        alpha: r.parse_or("alpha", a.alpha, cfg.meta.alpha)?,
        beta: r.parse_or("beta", a.beta, cfg.meta.beta)?,
        k_inner: r.parse_or("k-inner", a.k_inner, cfg.meta.k_inner)?,
        n_personas: r.parse_or("n-personas", a.n_personas, cfg.meta.n_personas)?,
        b_in: r.parse_or("b-in", a.b_in, cfg.meta.b_in)?,
        inner_optimizer: r.string_or("inner-optimizer", a.inner_optimizer, "sgd"),
        iterations: r.parse_or("iterations", a.iterations, cfg.meta.iterations)?,
        seed,
    };

    let corpus = load_corpus_named(&corpus_path)?;
    let manifest = load_manifest_named(&manifest_path)?;
    let backbone = load_backbone(&backbone_path)?;
    let init = ReparamPrefix::init(
        backbone.config.n_layers,
        backbone.config.d_model,
        prefix_len,
        k_reparam,
        seed,
    )?;
    let out = strategy.train(&backbone, &corpus, &manifest, init, &cfg)?;
    print_warnings(&out.warnings);
    let store = PrefixStore::open(&store_path, &backbone)?;
    let echo = config_echo(&[
        ("lr", cfg.lr.to_string()),
        ("batch-size", cfg.batch_size.to_string()),
        ("epochs", cfg.max_epochs.to_string()),
        ("patience", cfg.patience.to_string()),
        ("temperature", cfg.temperature.to_string()),
        ("alpha", cfg.meta.alpha.to_string()),
        ("beta", cfg.meta.beta.to_string()),
        ("k-inner", cfg.meta.k_inner.to_string()),
        ("n-personas", cfg.meta.n_personas.to_string()),
        ("b-in", cfg.meta.b_in.to_string()),
        ("iterations", cfg.meta.iterations.to_string()),
        ("prefix-len", prefix_len.to_string()),
        ("k-reparam", k_reparam.to_string()),
    ]);
    save_train_output(
        &store,
        &backbone,
        SOURCE_KEY,
        &out,
        strategy.name(),
        "random",
        seed,
        echo,
    )?;
    eprintln!(
        "stored source prefix ({} epochs logged) in {}",
        out.log.len(),
        store_path.display()
    );
    Ok(())
}

fn cmd_train_persona(r: &Resolver, a: TrainPersonaArgs) -> Result<()> {
    let corpus_path = r.required_path("corpus", a.corpus)?;
    let manifest_path = r.required_path("manifest", a.manifest)?;
    let backbone_path = r.required_path("backbone", a.backbone)?;
    let store_path = r.required_path("store", a.store)?;
    let init_mode = r.string_or("init", a.init, "source");
    if !matches!(init_mode.as_str(), "source" | "random") {
        return Err(PktError::Config(format!(
            "unknown init '{init_mode}', expected source or random"
        )));
    }
    let base_seed = r.seed(a.seed)?;
    let prefix_len = r.parse_or("prefix-len", a.prefix_len, DEFAULT_PREFIX_LEN)?;
    let k_reparam = r.parse_or("k-reparam", a.k_reparam, DEFAULT_K_REPARAM)?;
    let jobs = r.parse_or("jobs", a.jobs, 1usize).map(|j| j.max(1))?;

    let mut cfg = PersonaTrainConfig::new(base_seed);
    cfg.lr = r.parse_or("lr", a.lr, cfg.lr)?;
    cfg.batch_size = r.parse_or("batch-size", a.batch_size, cfg.batch_size)?;
    cfg.max_epochs = r.parse_or("epochs", a.epochs, cfg.max_epochs)?;
    cfg.patience = r.parse_or("patience", a.patience, cfg.patience)?;

    let corpus = load_corpus_named(&corpus_path)?;
    let manifest = load_manifest_named(&manifest_path)?;
    let backbone = load_backbone(&backbone_path)?;
    let store = PrefixStore::open(&store_path, &backbone)?;

    let persona_flag = r.opt_string("persona", a.persona);
    let all_part = r.opt_string("all-part", a.all_part);
    let targets: Vec<String> = match (&persona_flag, &all_part) {
        (Some(pid), None) => vec![pid.clone()],
        (None, Some(part)) => {
            if !matches!(part.as_str(), "B" | "C") {
                return Err(PktError::Config(format!(
                    "--all-part takes B or C, got '{part}'"
                )));
            }
            manifest.personas_in_part(part)?.to_vec()
        }
        (None, None) => {
            return Err(PktError::Config(
                "need --persona <id> or --all-part B|C".into(),
            ))
        }
        (Some(_), Some(_)) => {
            return Err(PktError::Config(
                "--persona and --all-part are mutually exclusive".into(),
            ))
        }
    };

    let source_init = if init_mode == "source" {
        Some(store.load_reparam(SOURCE_KEY).map_err(|e| {
            PktError::Data(format!(
                "init 'source' needs a trained source prefix: {e}"
            ))
        })?)
    } else {
        None
    };

    let train_one = |pid: &str| -> Result<(String, usize)> {
        let rec = corpus
            .get(pid)
            .ok_or_else(|| PktError::Data(format!("persona '{pid}' not in corpus")))?;
        let splits = manifest
            .splits
            .get(pid)
            .ok_or_else(|| PktError::Data(format!("persona '{pid}' missing from manifest")))?;
        let seed = persona_seed(base_seed, pid);
        let init = match &source_init {
            Some(src) => src.clone(),
            None => ReparamPrefix::init(
                backbone.config.n_layers,
                backbone.config.d_model,
                prefix_len,
                k_reparam,
                seed,
            )?,
        };
        let mut pcfg = cfg.clone();
        pcfg.seed = seed;
        let out = train_personalized(&backbone, init, rec, splits, &pcfg)?;
        print_warnings(&out.warnings);
        let echo = config_echo(&[
            ("lr", pcfg.lr.to_string()),
            ("batch-size", pcfg.batch_size.to_string()),
            ("epochs", pcfg.max_epochs.to_string()),
            ("patience", pcfg.patience.to_string()),
        ]);
        save_train_output(
            &store,
            &backbone,
            pid,
            &out,
            "personalized",
            &init_mode,
            seed,
            echo,
        )?;
        Ok((pid.to_string(), out.log.len()))
    };

    let results: Vec<Result<(String, usize)>> = if jobs > 1 && targets.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| PktError::Config(format!("cannot build {jobs}-thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            targets.par_iter().map(|pid| train_one(pid)).collect()
        })
    } else {
        targets.iter().map(|pid| train_one(pid)).collect()
    };

    let mut trained = 0usize;
    let mut first_err = None;
    for res in results {
        match res {
            Ok((pid, epochs)) => {
                eprintln!("trained '{pid}' ({epochs} epochs logged)");
                trained += 1;
            }
            Err(e) => {
                eprintln!("error: {e}");
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => {
            eprintln!("stored {trained} personalized prefixes in {}", store_path.display());
            Ok(())
        }
    }
}

fn read_history(path: &Path) -> Result<Vec<Turn>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PktError::Data(format!("history {}: {e}", path.display())))?;
    let mut turns = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let turn: Turn = serde_json::from_str(line).map_err(|e| {
            PktError::Data(format!("history {} line {}: {e}", path.display(), ln + 1))
        })?;
        turns.push(turn);
    }
    if turns.is_empty() {
        return Err(PktError::Data(format!("history {} is empty", path.display())));
    }
    Ok(turns)
}

fn cmd_generate(r: &Resolver, a: GenerateArgs) -> Result<()> {
    let backbone_path = r.required_path("backbone", a.backbone)?;
    let backbone = load_backbone(&backbone_path)?;
    let beam = r.parse_or("beam", a.beam, DEFAULT_BEAM)?;
    let max_new = r.parse_or("max-new-tokens", a.max_new_tokens, DEFAULT_MAX_NEW_TOKENS)?;

    let prefix: Option<DeployedPrefix> = match r.opt_string("persona", a.persona) {
        Some(pid) => {
            let store_path = r.required_path("store", a.store)?;
            let store = PrefixStore::open(&store_path, &backbone)?;
            Some(store.load_deployed(&pid)?)
        }
        None => None,
    };

    let history: Vec<Turn> = match (a.prompt, r.opt_path("history-file", a.history_file)) {
        (Some(text), None) => vec![Turn { speaker: 1, text }],
        (None, Some(path)) => read_history(&path)?,
        (None, None) => {
            return Err(PktError::Config(
                "need --prompt <text> or --history-file <jsonl>".into(),
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    let mut ids = Vec::new();
    for turn in &history {
        ids.push(if turn.speaker == 1 {
            pkt_core::tokenizer::S1
        } else {
            pkt_core::tokenizer::S2
        });
        ids.extend(backbone.vocab.tokenize(&turn.text));
        ids.push(pkt_core::tokenizer::EOU);
    }
    let response = generate_response(&backbone, prefix.as_ref(), &ids, beam, max_new)?;
    println!("{response}");
    Ok(())
}

fn cmd_evaluate(r: &Resolver, a: EvaluateArgs) -> Result<()> {
    let corpus_path = r.required_path("corpus", a.corpus)?;
    let manifest_path = r.required_path("manifest", a.manifest)?;
    let backbone_path = r.required_path("backbone", a.backbone)?;
    let part = r.string_or("part", a.part, "B");
    if !matches!(part.as_str(), "B" | "C") {
        return Err(PktError::Config(format!("--part takes B or C, got '{part}'")));
    }
    let mode = r.string_or("prefixes", a.prefixes, "personalized");
    let judge_spec = r.string_or("judge", a.judge, "keyword");
    let beam = r.parse_or("beam", a.beam, DEFAULT_BEAM)?;
    let max_new = r.parse_or("max-new-tokens", a.max_new_tokens, DEFAULT_MAX_NEW_TOKENS)?;
    let jobs = r.parse_or("jobs", a.jobs, 0usize)?;

    let corpus = load_corpus_named(&corpus_path)?;
    let manifest = load_manifest_named(&manifest_path)?;
    let backbone = load_backbone(&backbone_path)?;

    let slots = match r.opt_path("slots", a.slots) {
        Some(p) => Some(SlotVocab::load(&p)?),
        None => None,
    };
    let mut judge = judge_from_spec(&judge_spec, slots.as_ref())?;

    // Load the prefixes first so the borrowing provider can point into
    // locals that outlive the evaluation call.
    let backbone_count = backbone.weights.param_count();
    let mut per_persona = BTreeMap::new();
    let mut shared = None;
    match mode.as_str() {
        "none" => {}
        "source" => {
            let store_path = r.required_path("store", a.store)?;
            let store = PrefixStore::open(&store_path, &backbone)?;
            shared = Some(store.load_deployed(SOURCE_KEY)?);
        }
        "personalized" => {
            let store_path = r.required_path("store", a.store)?;
            let store = PrefixStore::open(&store_path, &backbone)?;
            for pid in manifest.personas_in_part(&part)? {
                if let Ok(p) = store.load_deployed(pid) {
                    per_persona.insert(pid.clone(), p);
                }
            }
        }
        other => {
            return Err(PktError::Config(format!(
                "unknown --prefixes '{other}', expected personalized, source, or none"
            )))
        }
    }
    let accounting = |l: usize| {
        param_accounting(backbone.config.n_layers, backbone.config.d_model, l, backbone_count)
    };
    let (provider, params): (PrefixProvider<'_>, ParamAccounting) = match (&shared, mode.as_str())
    {
        (Some(p), _) => (PrefixProvider::Shared(p), accounting(p.l_prefix())),
        (None, "personalized") => {
            let l = per_persona.values().next().map_or(0, DeployedPrefix::l_prefix);
            (PrefixProvider::PerPersona(&per_persona), accounting(l))
        }
        // All backbone weights are the deployed weights when nothing is
        // prepended.
        (None, _) => (
            PrefixProvider::None,
            ParamAccounting {
                deployed: backbone_count,
                backbone: backbone_count,
                ratio: 1.0,
            },
        ),
    };

    let cfg = EvalConfig {
        setting: r.string_or("setting", a.setting, &format!("{mode}-{part}")),
        part: part.clone(),
        beam,
        max_new_tokens: max_new,
    };
    let run = || evaluate_setting(&backbone, &corpus, &manifest, provider, judge.as_mut(), params, &cfg);
    let report = if jobs > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| PktError::Config(format!("cannot build {jobs}-thread pool: {e}")))?;
        pool.install(run)
    } else {
        run()
    }?;

    let json = report.to_json()?;
    match r.opt_path("report-out", a.report_out) {
        Some(path) => {
            std::fs::write(&path, &json)?;
            eprintln!(
                "wrote {} ({} samples, {} skipped personas)",
                path.display(),
                report.samples,
                report.skipped_personas
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn cmd_params(r: &Resolver, a: ParamsArgs) -> Result<()> {
    let layers = r.parse_or("layers", a.layers, 0usize)?;
    let dmodel = r.parse_or("dmodel", a.dmodel, 0usize)?;
    let prefix_len = r.parse_or("prefix-len", a.prefix_len, DEFAULT_PREFIX_LEN)?;
    let backbone_params = r.parse_or("backbone-params", a.backbone_params, 0usize)?;
    if layers == 0 || dmodel == 0 {
        return Err(PktError::Config(
            "params needs --layers and --dmodel".into(),
        ));
    }
    if backbone_params == 0 {
        return Err(PktError::Config("params needs --backbone-params".into()));
    }
    let acc = param_accounting(layers, dmodel, prefix_len, backbone_params);
    let mut json = serde_json::to_string_pretty(&acc)?;
    json.push('\n');
    print!("{json}");
    Ok(())
}
