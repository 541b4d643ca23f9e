//! Command-line workflows. Every run writes `config.snapshot.toml` and
//! `manifest.json` into its output directory; `replay` reruns a manifest.

pub mod config;
mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::RunConfig;
pub use manifest::{hash_path, Manifest};

use crate::augment::{augment_knowledge_base, omit_triples, recovery_rate, PromptTemplate};
use crate::channel::ChannelConfig;
use crate::corpus::{self, synth, Corpus, KnowledgeBase, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::{run_snr_sweep, scorer_by_name, write_metrics_csv, SweepModels};
use crate::extractor::{finetune_with_extractor, train_extractor, ExtractorModel};
use crate::jscc::{train_jscc, JsccModel, Received, TrainConfig};
use crate::unified_space::{
    dump_embeddings, train_relation_predictor, train_unified_space, EmbeddingSample, RelationPredictor, UnifiedSpace,
};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const KB_FILE: &str = "kb.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SNAPSHOT_FILE: &str = "config.snapshot.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Fine-tuned receiver written by `train-extractor` inside its run directory.
pub const RECEIVER_DIR: &str = "receiver";

#[derive(Debug, Parser)]
#[command(name = "semcom", version, about = "Knowledge-graph enhanced semantic communication lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// TOML file with flat dotted keys (e.g. `train.epochs = 30`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable. Values use TOML syntax.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shortcut for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load or synthesize a corpus; write split corpus, vocabulary and kb.
    PrepareData {
        #[command(flatten)]
        common: Common,
        /// JSON-lines corpus; a synthetic one is generated when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the codec.
    TrainJscc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the knowledge extractor on a frozen codec, then optionally
    /// fine-tune the receiver on its selections.
    TrainExtractor {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        jscc: PathBuf,
        /// Extractor checkpoint to continue from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Train the unified space contrastively.
    TrainUnifiedSpace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        jscc: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Train the relation predictor over unified-space entity embeddings.
    TrainRelpred {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Run the SNR sweep and write metrics.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        jscc: PathBuf,
        #[arg(long)]
        extractor: Option<PathBuf>,
        /// SNR-specific extractor as `SNR=DIR`; repeatable.
        #[arg(long = "snr-extractor", value_name = "SNR=DIR", allow_hyphen_values = true)]
        snr_extractor: Vec<String>,
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long)]
        relpred: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Also write per-sentence trace.jsonl.
        #[arg(long)]
        trace: bool,
    },
    /// Extract triples from texts with a language model and merge them into
    /// a copy of the kb.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// One text per line; defaults to the training texts.
        #[arg(long)]
        texts: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Write unified-space embeddings of test sentences and kb entities.
    DumpEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        jscc: PathBuf,
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Rerun a recorded manifest into a new output directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A fully resolved run: what to do, on which inputs, with which settings.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: String,
    pub inputs: BTreeMap<String, PathBuf>,
    pub flags: BTreeMap<String, bool>,
    pub config: RunConfig,
    pub out: PathBuf,
}

fn invocation(command: Command) -> Result<Invocation> {
    let mut inputs = BTreeMap::new();
    let mut flags = BTreeMap::new();
    let mut put = |k: &str, v: Option<PathBuf>| {
        if let Some(p) = v {
            inputs.insert(k.to_string(), p);
        }
    };
    let (name, common) = match command {
        Command::PrepareData { common, input } => {
            put("input", input);
            ("prepare-data", common)
        }
        Command::TrainJscc { common, data } => {
            put("data", Some(data));
            ("train-jscc", common)
        }
        Command::TrainExtractor {
            common,
            data,
            jscc,
            init,
            kb,
        } => {
            put("data", Some(data));
            put("jscc", Some(jscc));
            put("init", init);
            put("kb", kb);
            ("train-extractor", common)
        }
        Command::TrainUnifiedSpace { common, data, jscc, kb } => {
            put("data", Some(data));
            put("jscc", Some(jscc));
            put("kb", kb);
            ("train-unified-space", common)
        }
        Command::TrainRelpred { common, data, space, kb } => {
            put("data", Some(data));
            put("space", Some(space));
            put("kb", kb);
            ("train-relpred", common)
        }
        Command::Evaluate {
            common,
            data,
            jscc,
            extractor,
            snr_extractor,
            space,
            relpred,
            kb,
            trace,
        } => {
            put("data", Some(data));
            put("jscc", Some(jscc));
            put("extractor", extractor);
            put("space", space);
            put("relpred", relpred);
            put("kb", kb);
            for spec in snr_extractor {
                let (snr, dir) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("--snr-extractor expects SNR=DIR, got {spec:?}")))?;
                let snr: f64 = snr
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad SNR in --snr-extractor {spec:?}")))?;
                put(&format!("snr_extractor@{snr}"), Some(PathBuf::from(dir)));
            }
            flags.insert("trace".to_string(), trace);
            ("evaluate", common)
        }
        Command::Augment { common, data, texts, kb } => {
            put("data", Some(data));
            put("texts", texts);
            put("kb", kb);
            ("augment", common)
        }
        Command::DumpEmbeddings {
            common,
            data,
            jscc,
            space,
            kb,
        } => {
            put("data", Some(data));
            put("jscc", Some(jscc));
            put("space", Some(space));
            put("kb", kb);
            ("dump-embeddings", common)
        }
        Command::Replay { manifest, out } => return manifest::replay_invocation(&manifest, out),
    };
    let mut sets = common.set;
    if let Some(seed) = common.seed {
        sets.push(format!("seed={seed}"));
    }
    let config = RunConfig::resolve(common.config.as_deref(), &sets)?;
    Ok(Invocation {
        command: name.to_string(),
        inputs,
        flags,
        config,
        out: common.out,
    })
}

/// Parses `argv` (program name first), runs the workflow and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::{ContextKind, ErrorKind};
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                ErrorKind::InvalidSubcommand => {
                    let name = e
                        .get(ContextKind::InvalidSubcommand)
                        .map(|v| v.to_string())
                        .unwrap_or_default();
                    eprintln!("error: unknown subcommand `{name}`; run `semcom --help` for the list");
                    2
                }
                _ => {
                    eprint!("{e}");
                    2
                }
            };
        }
    };
    match invocation(cli.command).and_then(|inv| run(&inv)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Runs one invocation and records its manifest.
pub fn run(inv: &Invocation) -> Result<()> {
    for (name, path) in &inv.inputs {
        if !path.exists() {
            return Err(Error::InvalidArgument(format!(
                "input {name} not found: {}",
                path.display()
            )));
        }
    }
    fs::create_dir_all(&inv.out)?;
    let input_hashes = inv
        .inputs
        .iter()
        .map(|(k, p)| Ok((k.clone(), hash_path(p)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    fs::write(inv.out.join(SNAPSHOT_FILE), inv.config.to_toml()?)?;
    log::info!("{}: writing to {}", inv.command, inv.out.display());
    match inv.command.as_str() {
        "prepare-data" => prepare_data(inv)?,
        "train-jscc" => cmd_train_jscc(inv)?,
        "train-extractor" => cmd_train_extractor(inv)?,
        "train-unified-space" => cmd_train_unified_space(inv)?,
        "train-relpred" => cmd_train_relpred(inv)?,
        "evaluate" => cmd_evaluate(inv)?,
        "augment" => cmd_augment(inv)?,
        "dump-embeddings" => cmd_dump_embeddings(inv)?,
        other => return Err(Error::InvalidArgument(format!("unknown subcommand `{other}`"))),
    }
    Manifest::record(inv, input_hashes)?.write(&inv.out.join(MANIFEST_FILE))
}

fn input<'a>(inv: &'a Invocation, name: &str) -> Result<&'a Path> {
    inv.inputs
        .get(name)
        .map(PathBuf::as_path)
        .ok_or_else(|| Error::InvalidArgument(format!("--{name} is required")))
}

/// Loads a prepared data directory and checks its vocabulary.
pub fn load_data(dir: &Path, cfg: &RunConfig) -> Result<Corpus> {
    let records = corpus::read_records(&dir.join(CORPUS_FILE))?;
    let corpus = corpus::corpus_from_records(records, &cfg.corpus)?;
    let saved = Vocabulary::from_json(&fs::read_to_string(dir.join(VOCAB_FILE))?)?;
    if saved.hash() != corpus.vocab.hash() {
        return Err(Error::Config(format!(
            "{} does not match the vocabulary rebuilt from {} (was corpus.min_freq changed?)",
            dir.join(VOCAB_FILE).display(),
            CORPUS_FILE
        )));
    }
    Ok(corpus)
}

fn load_kb(inv: &Invocation) -> Result<KnowledgeBase> {
    let path = match inv.inputs.get("kb") {
        Some(p) => p.clone(),
        None => input(inv, "data")?.join(KB_FILE),
    };
    KnowledgeBase::import_jsonl(&path)
}

fn load_jscc(inv: &Invocation, vocab: &Vocabulary) -> Result<JsccModel<f32>> {
    JsccModel::load(&checkpoint_dir(input(inv, "jscc")?), vocab)
}

/// Accepts either a checkpoint directory or a run directory holding one.
fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join("checkpoint").is_dir() {
        p.join("checkpoint")
    } else {
        p.to_path_buf()
    }
}

fn prepare_data(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let records = match inv.inputs.get("input") {
        Some(path) => corpus::read_records(path)?,
        None => synth::generate(&cfg.synth.synth_config(cfg.corpus.test_fraction)),
    };
    let c = corpus::corpus_from_records(records, &cfg.corpus)?;
    let to_records = |pairs: &[corpus::DataPair], split: &str| -> Vec<corpus::RawRecord> {
        pairs
            .iter()
            .map(|p| corpus::RawRecord {
                text: p.text.clone(),
                triples: p.gold_triples.clone(),
                split: Some(split.to_string()),
            })
            .collect()
    };
    let mut out = to_records(&c.split.train, "train");
    out.extend(to_records(&c.split.test, "test"));
    corpus::write_records(&inv.out.join(CORPUS_FILE), &out)?;
    fs::write(inv.out.join(VOCAB_FILE), c.vocab.to_json()?)?;
    let kb = corpus::kb_build(&c.split.train)?;
    kb.export_jsonl(&inv.out.join(KB_FILE))?;
    let stats = serde_json::json!({
        "n_train": c.split.train.len(),
        "n_test": c.split.test.len(),
        "vocab_size": c.vocab.size(),
        "n_triples": kb.n_t(),
        "n_entities": kb.entities().len(),
        "n_relations": kb.relations().len(),
    });
    fs::write(inv.out.join("stats.json"), serde_json::to_string_pretty(&stats)? + "\n")?;
    log::info!("prepare-data: {stats}");
    Ok(())
}

fn cmd_train_jscc(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let c = load_data(input(inv, "data")?, cfg)?;
    train_jscc(&c.split.train, &c.vocab, &cfg.model, &cfg.train, Some(&inv.out))?;
    Ok(())
}

fn finetune_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.finetune.epochs,
        lr: cfg.finetune.lr,
        knowledge_prob: cfg.finetune.knowledge_prob,
        seed: cfg.seed.wrapping_add(6),
        train_snr_db: cfg.extractor.train_snr_db,
        channel: cfg.extractor.channel,
        ..cfg.train.clone()
    }
}

fn cmd_train_extractor(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let c = load_data(input(inv, "data")?, cfg)?;
    let kb = load_kb(inv)?;
    let jscc = load_jscc(inv, &c.vocab)?;
    let init = match inv.inputs.get("init") {
        Some(p) => Some(ExtractorModel::load(&checkpoint_dir(p), &c.vocab, &kb)?),
        None => None,
    };
    let rep = train_extractor(&jscc, &c.split.train, &kb, &c.vocab, &cfg.extractor, init, Some(&inv.out))?;
    if cfg.finetune.epochs > 0 {
        finetune_with_extractor(
            jscc,
            &rep.model,
            &c.split.train,
            &kb,
            &c.vocab,
            &finetune_config(cfg),
            cfg.extractor.threshold,
            Some(&inv.out.join(RECEIVER_DIR)),
        )?;
    }
    Ok(())
}

fn cmd_train_unified_space(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let c = load_data(input(inv, "data")?, cfg)?;
    let kb = load_kb(inv)?;
    let jscc = load_jscc(inv, &c.vocab)?;
    train_unified_space(
        &jscc,
        &c.split.train,
        &kb,
        &c.vocab,
        &cfg.unified_space,
        &cfg.contrastive,
        None,
        Some(&inv.out),
    )?;
    Ok(())
}

fn cmd_train_relpred(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let c = load_data(input(inv, "data")?, cfg)?;
    let kb = load_kb(inv)?;
    let space = UnifiedSpace::load(&checkpoint_dir(input(inv, "space")?), &c.vocab)?;
    train_relation_predictor(&space, &kb, &cfg.relpred, Some(&inv.out))?;
    Ok(())
}

fn cmd_evaluate(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let c = load_data(input(inv, "data")?, cfg)?;
    let kb = load_kb(inv)?;
    let jscc = load_jscc(inv, &c.vocab)?;
    let extractor = match inv.inputs.get("extractor") {
        Some(p) => Some(ExtractorModel::load(&checkpoint_dir(p), &c.vocab, &kb)?),
        None => None,
    };
    let mut snr_extractors = Vec::new();
    let mut snr_receivers = Vec::new();
    for (k, p) in &inv.inputs {
        if let Some(snr) = k.strip_prefix("snr_extractor@") {
            let snr: f64 = snr.parse().map_err(|_| Error::InvalidArgument(format!("bad input name {k}")))?;
            snr_extractors.push((snr, ExtractorModel::load(&checkpoint_dir(p), &c.vocab, &kb)?));
            let rx = p.join(RECEIVER_DIR).join("checkpoint");
            if rx.is_dir() {
                snr_receivers.push((snr, JsccModel::load(&rx, &c.vocab)?));
            }
        }
    }
    let space = match inv.inputs.get("space") {
        Some(p) => {
            // The retrieval threshold is a run setting, not a trained one.
            let mut s = UnifiedSpace::load(&checkpoint_dir(p), &c.vocab)?;
            s.config.lambda = cfg.unified_space.lambda;
            Some(s)
        }
        None => None,
    };
    let predictor = match inv.inputs.get("relpred") {
        Some(p) => Some(RelationPredictor::load(&checkpoint_dir(p))?),
        None => None,
    };
    let models = SweepModels {
        jscc: Some(&jscc),
        extractor: extractor.as_ref(),
        snr_extractors: &snr_extractors,
        snr_receivers: &snr_receivers,
        space: space.as_ref(),
        predictor: predictor.as_ref(),
    };
    let scorer = scorer_by_name(&cfg.sweep.similarity);
    let mut trace = if inv.flags.get("trace").copied().unwrap_or(false) {
        Some(std::io::BufWriter::new(fs::File::create(inv.out.join(TRACE_FILE))?))
    } else {
        None
    };
    let rows = run_snr_sweep(
        &cfg.sweep,
        &models,
        &c.split.test,
        &kb,
        &c.vocab,
        scorer.as_ref(),
        trace.as_mut().map(|w| w as &mut dyn std::io::Write),
    )?;
    if let Some(mut w) = trace {
        std::io::Write::flush(&mut w)?;
    }
    write_metrics_csv(&rows, &inv.out.join(METRICS_FILE))?;
    println!("{:<12} {:>7} {:>8} {:>10} {:>9} {:>7}", "receiver", "snr_db", "bleu1", "similarity", "precision", "recall");
    for r in &rows {
        println!(
            "{:<12} {:>7} {:>8.4} {:>10.4} {:>9.3} {:>7.3}",
            r.receiver_kind.to_string(),
            r.snr_db,
            r.bleu1,
            r.similarity,
            r.precision,
            r.recall
        );
    }
    Ok(())
}

fn cmd_augment(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let client = cfg.augment.client()?;
    let c = load_data(input(inv, "data")?, cfg)?;
    let full = load_kb(inv)?;
    let texts: Vec<String> = match inv.inputs.get("texts") {
        Some(p) => fs::read_to_string(p)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect(),
        None => c.split.train.iter().map(|p| p.text.clone()).collect(),
    };
    let (mut kb, omitted) = omit_triples(&full, cfg.augment.omit_fraction, cfg.seed.wrapping_add(7))?;
    if !omitted.is_empty() {
        KnowledgeBase::from_triples(&omitted).export_jsonl(&inv.out.join("omitted.jsonl"))?;
        kb.export_jsonl(&inv.out.join("kb.omitted.jsonl"))?;
    }
    let report = augment_knowledge_base(
        &texts,
        client.as_ref(),
        &mut kb,
        &PromptTemplate::default(),
        cfg.augment.concurrency,
    )?;
    kb.export_jsonl(&inv.out.join(KB_FILE))?;
    let mut summary = serde_json::to_value(&report)?;
    summary["n_omitted"] = omitted.len().into();
    summary["recovery_rate"] = recovery_rate(&kb, &omitted).into();
    summary["n_t"] = kb.n_t().into();
    fs::write(inv.out.join("augment_report.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_dump_embeddings(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    let c = load_data(input(inv, "data")?, cfg)?;
    let kb = load_kb(inv)?;
    let jscc = load_jscc(inv, &c.vocab)?;
    let space = UnifiedSpace::load(&checkpoint_dir(input(inv, "space")?), &c.vocab)?;
    let pairs: Vec<_> = c.split.test.iter().take(cfg.dump.samples).collect();
    let channel = ChannelConfig::new(cfg.channel.kind, cfg.channel.train_snr_db, cfg.sweep.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sweep.seed);
    let seqs: Vec<&TokenSequence> = pairs.iter().map(|p| &p.tokens).collect();
    let received: Vec<Received> = jscc.transmit_batch(&seqs, &channel, &mut rng)?;
    let v = space.map_batch(&received.iter().collect::<Vec<_>>())?;
    let samples: Vec<EmbeddingSample> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| EmbeddingSample {
            name: p.text.clone(),
            v_h: v.row(i).to_vec(),
            gold_entities: p.gold_entities.iter().cloned().collect(),
        })
        .collect();
    dump_embeddings(&space, &kb, &samples, &inv.out.join("embeddings.csv"))
}
