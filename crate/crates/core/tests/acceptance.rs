//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero when a criterion outside `DOCUMENTED_SHORTFALLS`
//! fails.
//!
//! The desk-scale criteria (6, 7, 9, 10, 11) share one CLI pipeline run
//! with `configs/desk.toml`. Set `SEMCOM_ACCEPTANCE_DIR` to keep that run
//! and reuse finished steps on the next invocation.

use std::collections::{BTreeMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semcom_kg::augment::{
    augment_knowledge_base, fixtures_from_pairs, omit_triples, recovery_rate, write_fixtures, MockClient,
    PromptTemplate,
};
use semcom_kg::channel::{empirical_snr_db, power_normalize, transmit, ChannelConfig, ChannelKind, SymbolBlock};
use semcom_kg::cli::{load_data, RunConfig};
use semcom_kg::corpus::{corpus_from_records, decode_tokens, encode_text, synth, tokenize, CorpusConfig, DataPair, FactTriple, KnowledgeBase, TokenSequence, Vocabulary};
use semcom_kg::evaluation::{bleu1_text, run_snr_sweep, PrCounts, ReceiverKind, SweepConfig, SweepModels, TfCosine};
use semcom_kg::extractor::{select_triples, train_extractor, weighted_bce, ExtractorConfig, ExtractorModel};
use semcom_kg::jscc::{sequence_loss, train_jscc, JsccModel, Received, TrainConfig};
use semcom_kg::neural::gradcheck::check_gradients;
use semcom_kg::neural::params::normal;
use semcom_kg::neural::{Bound, Dropout, EncoderLayer, ModelConfig, ParamStore, Segment, Tensor};
use semcom_kg::unified_space::{
    distance, infonce_loss, infonce_node, receive_with_evolving_kg, retrieve_from, DistanceKind, RelationPredictor,
    UnifiedSpace,
};

/// Criteria allowed to fail; each has an entry under "Known gaps" in the
/// README.
const DOCUMENTED_SHORTFALLS: &[u32] = &[6];

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let desk = Desk::new();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        (1, "channel fidelity", Box::new(channel_fidelity)),
        (2, "gradient correctness", Box::new(gradient_correctness)),
        (3, "loss oracles", Box::new(loss_oracles)),
        (4, "overfit oracle", Box::new(overfit_oracle)),
        (5, "extractor recall", Box::new(extractor_recall)),
        (6, "knowledge gain", Box::new(|| knowledge_gain(&desk))),
        (7, "fixed vs snr-specific", Box::new(|| snr_specific(&desk))),
        (8, "retrieval oracle", Box::new(retrieval_oracle)),
        (9, "evolving-kb safety", Box::new(|| evolving_safety(&desk))),
        (10, "contrastive separation", Box::new(|| contrastive_separation(&desk))),
        (11, "augmentation round trip", Box::new(|| augmentation_round_trip(&desk))),
        (12, "determinism", Box::new(determinism)),
    ];
    let only: Option<HashSet<u32>> = std::env::var("SEMCOM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());

    let mut unexpected = Vec::new();
    for (id, name, f) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(format!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            )),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {id:>2} {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                let note = if DOCUMENTED_SHORTFALLS.contains(id) { " [documented shortfall]" } else { "" };
                println!("FAIL {id:>2} {name}: {d} ({secs:.1}s){note}");
                if note.is_empty() {
                    unexpected.push(*id);
                }
            }
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

// 1 ------------------------------------------------------------------------

fn channel_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (rows, cols) = (1000, 100);
    let raw: Vec<f64> = (0..2 * rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = power_normalize(&SymbolBlock::from_real_pairs(rows, cols, &raw).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for snr in [-4.0, 0.0, 4.0, 10.0] {
        let cfg = ChannelConfig::new(ChannelKind::Awgn, snr, 3).map_err(|e| e.to_string())?;
        let (y, _) = transmit(&x, &cfg, &mut rng).map_err(|e| e.to_string())?;
        let got = empirical_snr_db(&x, &y);
        worst = worst.max((got - snr).abs());
        parts.push(format!("{snr}->{got:.3}"));
    }
    check(worst <= 0.2, format!("{} dB, worst error {worst:.3} dB", parts.join(", ")))
}

// 2 ------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = ModelConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        channel_dim: 2,
        max_len: 8,
        dropout: 0.0,
    };
    let mut errs = BTreeMap::new();

    let mut store = ParamStore::<f64>::new();
    let layer = EncoderLayer::new(&mut store, "enc", &cfg, &mut rng);
    let mut params: Vec<Tensor<f64>> = store.tensors().to_vec();
    for p in params.iter_mut() {
        let noise: Tensor<f64> = normal(&mut rng, p.rows(), p.cols(), 0.3);
        p.add_assign(&noise);
    }
    params.push(normal(&mut rng, 5, 8, 1.0));
    let n = params.len();
    let segs = [Segment {
        q_start: 0,
        q_len: 5,
        k_start: 0,
        k_len: 5,
        k_valid: 4,
    }];
    let r = check_gradients(&params, 1e-5, |tape, vars| {
        let bound = Bound::from_vars(vars[..n - 1].to_vec());
        let z = layer.forward(tape, &bound, vars[n - 1], &segs, &mut Dropout::off());
        let s = tape.sigmoid(z);
        let sq = tape.matmul_nt(s, z);
        tape.sum(sq)
    });
    errs.insert("encoder layer", r.max_rel_err);

    let vocab = Vocabulary::build([tokenize("the cat sat on a mat . dogs run fast").as_slice()], 1);
    let codec = JsccModel::<f64>::new(cfg.clone(), vocab.size(), 9).map_err(|e| e.to_string())?;
    let seqs = [
        encode_text("the cat sat", &vocab, 8).map_err(|e| e.to_string())?,
        encode_text("dogs run fast .", &vocab, 8).map_err(|e| e.to_string())?,
    ];
    let knowledge = vec![vec![vocab.ids_of("cat sat mat")], vec![]];
    let r = check_gradients(codec.params.tensors(), 1e-5, |tape, vars| {
        let p = Bound::from_vars(vars.to_vec());
        codec.noiseless_loss(tape, &p, &seqs, &knowledge).expect("loss builds")
    });
    errs.insert("sequence CE", r.max_rel_err);

    let kb = KnowledgeBase::from_triples(&[
        FactTriple::new("cat", "on", "mat").unwrap(),
        FactTriple::new("dog", "on", "mat").unwrap(),
        FactTriple::new("cat", "chases", "dog").unwrap(),
        FactTriple::new("mat", "in", "hall").unwrap(),
    ]);
    let ex = ExtractorModel::<f64>::new(cfg.clone(), &kb, 5).map_err(|e| e.to_string())?;
    let h: Tensor<f64> = normal(&mut rng, 8, 8, 1.0);
    let mut labels = Tensor::zeros(2, kb.n_t());
    labels.set(0, 1, 1.0);
    labels.set(1, 3, 1.0);
    let r = check_gradients(ex.params.tensors(), 1e-5, |tape, vars| {
        let p = Bound::from_vars(vars.to_vec());
        let hv = tape.constant(h.clone());
        let t = ex.score_node(tape, &p, hv, &[3, 5]);
        tape.weighted_bce(t, labels.clone(), 0.02)
    });
    errs.insert("weighted BCE", r.max_rel_err);

    let params = vec![normal(&mut rng, 2, 5, 1.0), normal(&mut rng, 2, 5, 1.0), normal(&mut rng, 6, 5, 1.0)];
    let r = check_gradients(&params, 1e-5, |tape, vars| {
        let mut parts = Vec::new();
        for i in 0..2 {
            parts.push(tape.slice_rows(vars[1], i, 1));
            parts.push(tape.slice_rows(vars[2], 3 * i, 3));
        }
        let c = tape.concat_rows(&parts);
        infonce_node(tape, vars[0], c, 4, 0.2)
    });
    errs.insert("InfoNCE", r.max_rel_err);

    let worst = errs.values().cloned().fold(0.0, f64::max);
    let detail = errs.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    check(worst <= 1e-4, format!("max relative error: {detail}"))
}

// 3 ------------------------------------------------------------------------

fn loss_oracles() -> Outcome {
    let bce = weighted_bce(&[1.0, 0.0], &[0.9, 0.1], 0.02).map_err(|e| e.to_string())?;
    let k = 63;
    let v = vec![0.3; 8];
    let negs = vec![v.clone(); k];
    let nce = infonce_loss(&v, &v, &negs, 0.2).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::build([tokenize("a b c d e f").as_slice()], 1);
    let s = encode_text("a b c d", &vocab, 10).map_err(|e| e.to_string())?;
    let logits = Tensor::<f64>::zeros(9, vocab.size());
    let ce = sequence_loss(&s, &logits).map_err(|e| e.to_string())?;
    let n = (s.true_length - 1) as f64;
    let want_ce = n * (vocab.size() as f64).ln();
    let ok = (bce - 0.10536).abs() <= 1e-4
        && (nce - ((k + 1) as f64).ln()).abs() <= 1e-9
        && (ce - want_ce).abs() <= 1e-9;
    check(
        ok,
        format!(
            "bce {bce:.6} (0.10536), infonce {nce:.9} (ln {}), ce {ce:.9} ({n}*ln {})",
            k + 1,
            vocab.size()
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn mean_bleu(jscc: &JsccModel<f32>, pairs: &[DataPair], vocab: &Vocabulary, snr: f64, seed: u64) -> f64 {
    let ch = ChannelConfig::new(ChannelKind::Awgn, snr, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<&TokenSequence> = pairs.iter().map(|p| &p.tokens).collect();
    let rec = jscc.transmit_batch(&seqs, &ch, &mut rng).unwrap();
    let refs: Vec<&Received> = rec.iter().collect();
    let out = jscc.decode_batch(&refs, &vec![None; refs.len()]).unwrap();
    out.iter()
        .zip(pairs)
        .map(|(o, p)| bleu1_text(&p.reference(), &decode_tokens(&o.ids, vocab).unwrap()))
        .sum::<f64>()
        / pairs.len() as f64
}

fn micro_corpus(n_pairs: usize, seed: u64) -> (Vec<DataPair>, Vocabulary) {
    let records = synth::generate(&synth::SynthConfig::micro(n_pairs, seed));
    let cfg = CorpusConfig {
        test_fraction: 0.0,
        ..Default::default()
    };
    let c = corpus_from_records(records, &cfg).unwrap();
    (c.split.train, c.vocab)
}

fn overfit_oracle() -> Outcome {
    let (pairs, vocab) = micro_corpus(32, 21);
    let model = ModelConfig::default();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        lr: 5e-4,
        train_snr_db: 10.0,
        knowledge_prob: 0.0,
        ..Default::default()
    };
    let r = train_jscc(&pairs, &vocab, &model, &cfg, None).map_err(|e| e.to_string())?;
    let bleu = mean_bleu(&r.model, &pairs, &vocab, 10.0, 5);
    check(
        bleu >= 0.99,
        format!(
            "{} sentences, {} layers x {} dims, BLEU-1 {bleu:.4} after {} epochs at 10 dB",
            pairs.len(),
            model.layers,
            model.d_model,
            cfg.epochs
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn extractor_recall() -> Outcome {
    let (pairs, vocab) = micro_corpus(400, 31);
    let kb = semcom_kg::corpus::kb_build(&pairs).map_err(|e| e.to_string())?;
    let codec = train_jscc(
        &pairs,
        &vocab,
        &ModelConfig::default(),
        &TrainConfig {
            epochs: 15,
            lr: 5e-4,
            ..Default::default()
        },
        None,
    )
    .map_err(|e| e.to_string())?
    .model;
    let cfg = ExtractorConfig {
        epochs: 20,
        lr: 5e-4,
        train_snr_db: 0.0,
        ..Default::default()
    };
    let ex = train_extractor(&codec, &pairs, &kb, &vocab, &cfg, None, None)
        .map_err(|e| e.to_string())?
        .model;
    let ch = ChannelConfig::new(ChannelKind::Awgn, 0.0, 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let seqs: Vec<&TokenSequence> = pairs.iter().map(|p| &p.tokens).collect();
    let rec = codec.transmit_batch(&seqs, &ch, &mut rng).map_err(|e| e.to_string())?;
    let refs: Vec<&Received> = rec.iter().collect();
    let scores = ex.score_batch(&refs, &kb).map_err(|e| e.to_string())?;
    let mut pr = PrCounts::default();
    for (s, p) in scores.iter().zip(&pairs) {
        pr.add(&select_triples(s, &kb, cfg.threshold).map_err(|e| e.to_string())?, &p.gold_triples);
    }
    check(
        pr.recall() >= 0.9,
        format!(
            "{} triples, recall {:.3} (precision {:.3}) on {} training sentences at 0 dB",
            kb.n_t(),
            pr.recall(),
            pr.precision(),
            pairs.len()
        ),
    )
}

// desk pipeline -----------------------------------------------------------

struct Desk {
    root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    ran: std::sync::OnceLock<Result<(), String>>,
}

fn semcom(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_semcom"))
        .args(args)
        .env("RUST_LOG", std::env::var("RUST_LOG").unwrap_or_else(|_| "warn".into()))
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")
}

impl Desk {
    fn new() -> Self {
        match std::env::var_os("SEMCOM_ACCEPTANCE_DIR") {
            Some(d) => Desk {
                root: PathBuf::from(d),
                _tmp: None,
                ran: Default::default(),
            },
            None => {
                let t = tempfile::tempdir().expect("tempdir");
                Desk {
                    root: t.path().to_path_buf(),
                    _tmp: Some(t),
                    ran: Default::default(),
                }
            }
        }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Runs the pipeline once; finished steps (with a manifest) are kept.
    fn ensure(&self) -> Result<(), String> {
        self.ran.get_or_init(|| self.run_pipeline()).clone()
    }

    fn step(&self, cmd: &str, name: &str, extra: &[&str]) -> Result<(), String> {
        let out = self.dir(name);
        if out.join("manifest.json").exists() {
            return Ok(());
        }
        let cfg = desk_config();
        let mut args = vec![cmd, "--config", s(&cfg), "--out", s(&out)];
        args.extend_from_slice(extra);
        let start = Instant::now();
        semcom(&args)?;
        eprintln!("desk step {name} took {:.0}s", start.elapsed().as_secs_f64());
        Ok(())
    }

    fn run_pipeline(&self) -> Result<(), String> {
        let (data, jscc, ex) = (self.dir("data"), self.dir("jscc"), self.dir("ex"));
        let (space, relpred) = (self.dir("space"), self.dir("relpred"));
        let receiver = ex.join("receiver");
        self.step("prepare-data", "data", &[])?;
        self.step("train-jscc", "jscc", &["--data", s(&data)])?;
        self.step("train-extractor", "ex", &["--data", s(&data), "--jscc", s(&jscc)])?;
        for snr in ["-4", "-2"] {
            let set = format!("channel.train_snr_db={snr}");
            self.step(
                "train-extractor",
                &format!("ex{snr}"),
                &["--data", s(&data), "--jscc", s(&jscc), "--set", &set],
            )?;
        }
        self.step("train-unified-space", "space", &["--data", s(&data), "--jscc", s(&jscc)])?;
        self.step("train-relpred", "relpred", &["--data", s(&data), "--space", s(&space)])?;
        self.step(
            "evaluate",
            "eval",
            &[
                "--data",
                s(&data),
                "--jscc",
                s(&receiver),
                "--extractor",
                s(&ex),
                "--space",
                s(&space),
                "--relpred",
                s(&relpred),
            ],
        )?;
        let e4 = format!("--snr-extractor=-4={}", s(&self.dir("ex-4")));
        let e2 = format!("--snr-extractor=-2={}", s(&self.dir("ex-2")));
        self.step(
            "evaluate",
            "eval_snr",
            &[
                "--data",
                s(&data),
                "--jscc",
                s(&receiver),
                &e4,
                &e2,
                "--set",
                "sweep.snr_points=[-4.0, -2.0]",
                "--set",
                "sweep.receivers=[\"kg_static\"]",
                "--set",
                "sweep.selection=\"snr_specific\"",
            ],
        )
    }

    fn metrics(&self, name: &str) -> Result<BTreeMap<(String, i64), f64>, String> {
        self.ensure()?;
        let text = std::fs::read_to_string(self.dir(name).join("metrics.csv")).map_err(|e| e.to_string())?;
        let mut out = BTreeMap::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let snr: f64 = f[1].parse().map_err(|_| format!("bad row {line}"))?;
            out.insert((f[0].to_string(), snr.round() as i64), f[2].parse().map_err(|_| format!("bad row {line}"))?);
        }
        Ok(out)
    }

    fn models(&self) -> Result<DeskModels, String> {
        self.ensure()?;
        let cfg = RunConfig::resolve(Some(&desk_config()), &[]).map_err(|e| e.to_string())?;
        let corpus = load_data(&self.dir("data"), &cfg).map_err(|e| e.to_string())?;
        let kb = KnowledgeBase::import_jsonl(&self.dir("data").join("kb.jsonl")).map_err(|e| e.to_string())?;
        let vocab = &corpus.vocab;
        let jscc = JsccModel::load(&self.dir("ex/receiver/checkpoint"), vocab).map_err(|e| e.to_string())?;
        let space = UnifiedSpace::load(&self.dir("space/checkpoint"), vocab).map_err(|e| e.to_string())?;
        let predictor = RelationPredictor::load(&self.dir("relpred/checkpoint")).map_err(|e| e.to_string())?;
        Ok(DeskModels {
            records: semcom_kg::corpus::read_records(&self.dir("data").join("corpus.jsonl"))
                .map_err(|e| e.to_string())?,
            corpus,
            kb,
            jscc,
            space,
            predictor,
        })
    }
}

struct DeskModels {
    records: Vec<semcom_kg::corpus::RawRecord>,
    corpus: semcom_kg::corpus::Corpus,
    kb: KnowledgeBase,
    jscc: JsccModel<f32>,
    space: UnifiedSpace,
    predictor: RelationPredictor,
}

impl DeskModels {
    fn receive(&self, pairs: &[DataPair], snr: f64, seed: u64) -> Vec<Received> {
        let ch = ChannelConfig::new(ChannelKind::Awgn, snr, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(64) {
            let seqs: Vec<&TokenSequence> = chunk.iter().map(|p| &p.tokens).collect();
            out.extend(self.jscc.transmit_batch(&seqs, &ch, &mut rng).unwrap());
        }
        out
    }
}

// 6 ------------------------------------------------------------------------

fn knowledge_gain(desk: &Desk) -> Outcome {
    let m = desk.metrics("eval")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for snr in [-4, -2] {
        let b = m[&("baseline".to_string(), snr)];
        let k = m[&("kg_static".to_string(), snr)];
        ok &= k >= b + 0.02;
        parts.push(format!("{snr} dB: baseline {b:.4}, kg_static {k:.4}, gain {:+.4}", k - b));
    }
    check(ok, format!("{} (need +0.0200)", parts.join("; ")))
}

// 7 ------------------------------------------------------------------------

fn snr_specific(desk: &Desk) -> Outcome {
    let fixed = desk.metrics("eval")?;
    let specific = desk.metrics("eval_snr")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for snr in [-4, -2] {
        let f = fixed[&("kg_static".to_string(), snr)];
        let sp = specific[&("kg_static".to_string(), snr)];
        ok &= sp >= f;
        parts.push(format!("{snr} dB: fixed {f:.4}, snr-specific {sp:.4}"));
    }
    check(ok, parts.join("; "))
}

// 8 ------------------------------------------------------------------------

fn scan(v: &[f32], ents: &Tensor<f32>, kind: DistanceKind, lambda: f64) -> Vec<usize> {
    (0..ents.rows())
        .filter(|&e| distance(v, ents.row(e), kind).unwrap() <= lambda)
        .collect()
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let names = ["alba", "bruno", "cora", "dax", "eli", "fen", "gus", "hana", "ivo", "juno", "kai", "lumo"];
    let rels = ["knows", "near", "owns"];
    let vocab = Vocabulary::build([tokenize(&names.join(" ")).as_slice()], 1);
    let tiny = ModelConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        channel_dim: 2,
        max_len: 8,
        dropout: 0.0,
    };
    let jscc = JsccModel::<f32>::new(tiny, vocab.size(), 1).map_err(|e| e.to_string())?;
    let mut boundary_hits = 0;
    let mut retrieved_total = 0;
    for i in 0..1000u64 {
        let mut kb = KnowledgeBase::new();
        for _ in 0..rng.random_range(1..12) {
            let h = names[rng.random_range(0..names.len())];
            let t = names[rng.random_range(0..names.len())];
            if h != t {
                kb.add(&FactTriple::new(h, rels[rng.random_range(0..3)], t).unwrap()).unwrap();
            }
        }
        if kb.is_empty() {
            kb.add(&FactTriple::new("alba", "knows", "bruno").unwrap()).unwrap();
        }
        let kind = if i % 2 == 0 { DistanceKind::Euclidean } else { DistanceKind::Cosine };
        let space_cfg = semcom_kg::unified_space::SpaceConfig {
            d: 4,
            distance: kind,
            normalize: i % 3 == 0,
            ..Default::default()
        };
        let mut space = UnifiedSpace::new(space_cfg, &jscc, &vocab, &kb, i).map_err(|e| e.to_string())?;
        let ents = space.entity_matrix(&kb).map_err(|e| e.to_string())?;
        let v: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Every fourth instance puts lambda exactly on an entity's distance.
        space.config.lambda = if i % 4 == 0 {
            let e = rng.random_range(0..ents.rows());
            distance(&v, ents.row(e), kind).unwrap()
        } else {
            rng.random_range(0.0..2.0)
        };
        let lambda = space.config.lambda;
        let want = scan(&v, &ents, kind, lambda);
        let got = space.retrieve_entities(&v, &kb).map_err(|e| e.to_string())?;
        let direct = retrieve_from(&v, &ents, kind, lambda).map_err(|e| e.to_string())?;
        if got != want || direct != want {
            return Err(format!("instance {i}: got {got:?}, scan {want:?}"));
        }
        if i % 4 == 0 {
            boundary_hits += 1;
        }
        retrieved_total += got.len();
    }
    Ok(format!(
        "1000 instances identical to the scan ({boundary_hits} with distance == lambda, {retrieved_total} retrievals)"
    ))
}

// 9 ------------------------------------------------------------------------

fn evolving_safety(desk: &Desk) -> Outcome {
    let m = desk.models()?;
    let pairs: Vec<DataPair> = m.corpus.split.test.iter().chain(&m.corpus.split.train).take(500).cloned().collect();
    let received = m.receive(&pairs, 0.0, 9);
    let mut kb = m.kb.clone();
    let start = kb.n_t();
    let mut last = start;
    let mut grown = 0;
    for (i, r) in received.iter().enumerate() {
        let (_, first) = receive_with_evolving_kg(r, &m.jscc, &m.space, &m.predictor, &mut kb, &m.corpus.vocab)
            .map_err(|e| e.to_string())?;
        if kb.n_t() < last {
            return Err(format!("n_t shrank at sentence {i}"));
        }
        if kb.n_t() != last + first.new_triples.len() {
            return Err(format!("sentence {i}: n_t grew by {} for {} new triples", kb.n_t() - last, first.new_triples.len()));
        }
        let before = kb.n_t();
        let (_, second) = receive_with_evolving_kg(r, &m.jscc, &m.space, &m.predictor, &mut kb, &m.corpus.vocab)
            .map_err(|e| e.to_string())?;
        if kb.n_t() != before || !second.new_triples.is_empty() {
            return Err(format!("sentence {i}: repeat added {} triples", kb.n_t() - before));
        }
        grown += first.new_triples.len();
        last = kb.n_t();
    }
    let unique: HashSet<&FactTriple> = kb.triples().iter().collect();
    check(
        unique.len() == kb.n_t(),
        format!("500 sentences, n_t {start} -> {} ({grown} added), repeats added 0, duplicates 0", kb.n_t()),
    )
}

// 10 -----------------------------------------------------------------------

fn contrastive_separation(desk: &Desk) -> Outcome {
    let m = desk.models()?;
    let test = &m.corpus.split.test;
    let received = m.receive(test, 0.0, 10);
    let kind = m.space.config.distance;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n_ent = m.kb.entities().len();
    let (mut pos, mut neg, mut n) = (0.0, 0.0, 0usize);
    for (p, r) in test.iter().zip(&received) {
        let gold: Vec<usize> = p.gold_entities.iter().filter_map(|e| m.kb.entity_id(e)).collect();
        if gold.is_empty() || gold.len() == n_ent {
            continue;
        }
        let v = m.space.map_received(r).map_err(|e| e.to_string())?;
        let g = gold[rng.random_range(0..gold.len())];
        let mut q = rng.random_range(0..n_ent);
        while gold.contains(&q) {
            q = rng.random_range(0..n_ent);
        }
        let eg = m.space.embed_entity(g, &m.kb).map_err(|e| e.to_string())?;
        let eq = m.space.embed_entity(q, &m.kb).map_err(|e| e.to_string())?;
        pos += distance(&v, &eg, kind).map_err(|e| e.to_string())?;
        neg += distance(&v, &eq, kind).map_err(|e| e.to_string())?;
        n += 1;
    }
    let (pos, neg) = (pos / n as f64, neg / n as f64);
    check(
        n > 0 && neg - pos > 0.0,
        format!("{n} held-out sentences at 0 dB: positive {pos:.4}, negative {neg:.4}, margin {:.4}", neg - pos),
    )
}

// 11 -----------------------------------------------------------------------

fn augmentation_round_trip(desk: &Desk) -> Outcome {
    let m = desk.models()?;
    let records: Vec<_> = m.records.iter().filter(|r| r.split.as_deref() != Some("test")).take(1000).collect();
    if records.len() < 1000 {
        return Err(format!("only {} training records", records.len()));
    }
    let fixtures = fixtures_from_pairs(records.iter().map(|r| (r.text.as_str(), r.triples.as_slice())));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("fixtures.jsonl");
    write_fixtures(&path, &fixtures).map_err(|e| e.to_string())?;
    let client = MockClient::load(&path).map_err(|e| e.to_string())?;

    let (omitted_kb, omitted) = omit_triples(&m.kb, 0.3, 11).map_err(|e| e.to_string())?;
    let encoded: HashSet<&FactTriple> = records.iter().flat_map(|r| &r.triples).collect();
    let recoverable: Vec<FactTriple> = omitted.iter().filter(|t| encoded.contains(t)).cloned().collect();
    let mut recovered_kb = omitted_kb.clone();
    let texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
    let report = augment_knowledge_base(&texts, &client, &mut recovered_kb, &PromptTemplate::default(), 4)
        .map_err(|e| e.to_string())?;
    let parse_rate = (report.n_responses_ok - report.n_parse_failures) as f64 / report.n_responses_ok as f64;
    let rate = recovery_rate(&recovered_kb, &recoverable);

    let sweep = SweepConfig {
        snr_points: vec![0.0],
        receivers: vec![ReceiverKind::KgEvolving],
        ..Default::default()
    };
    let models = SweepModels {
        jscc: Some(&m.jscc),
        space: Some(&m.space),
        predictor: Some(&m.predictor),
        ..Default::default()
    };
    let test = &m.corpus.split.test;
    let bleu = |kb: &KnowledgeBase| -> Result<f64, String> {
        let rows = run_snr_sweep(&sweep, &models, test, kb, &m.corpus.vocab, &TfCosine, None).map_err(|e| e.to_string())?;
        Ok(rows[0].bleu1)
    };
    let (b_omit, b_rec) = (bleu(&omitted_kb)?, bleu(&recovered_kb)?);
    check(
        report.n_texts == 1000 && parse_rate == 1.0 && rate >= 0.95 && b_rec >= b_omit,
        format!(
            "{} texts, {} replies parsed ({:.0}%), {} of {} omitted triples encoded, recovered {:.1}%, \
             BLEU-1 at 0 dB omitted {b_omit:.4} vs recovered {b_rec:.4}",
            report.n_texts,
            report.n_responses_ok - report.n_parse_failures,
            100.0 * parse_rate,
            recoverable.len(),
            omitted.len(),
            100.0 * rate
        ),
    )
}

// 12 -----------------------------------------------------------------------

const TINY: &[&str] = &[
    "--set",
    "model.layers=1",
    "--set",
    "model.d_model=16",
    "--set",
    "model.heads=2",
    "--set",
    "model.d_ff=32",
    "--set",
    "model.channel_dim=4",
    "--set",
    "unified_space.d=8",
    "--set",
    "extractor.layers=1",
    "--set",
    "synth.scale=\"micro\"",
    "--set",
    "synth.n_pairs=60",
    "--set",
    "corpus.test_fraction=0.2",
    "--set",
    "train.epochs=2",
    "--set",
    "extractor.epochs=2",
    "--set",
    "finetune.epochs=1",
    "--set",
    "contrastive.epochs=2",
    "--set",
    "contrastive.k=4",
    "--set",
    "relpred.epochs=3",
    "--set",
    "relpred.hidden=8",
    "--set",
    "sweep.snr_points=[-4, 0, 4]",
    "--set",
    "sweep.receivers=[\"baseline\", \"kg_static\", \"kg_evolving\"]",
];

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let r = root.path();
    let run = |cmd: &str, name: &str, extra: &[&str]| -> Result<PathBuf, String> {
        let out = r.join(name);
        let mut args = vec![cmd, "--out", s(&out)];
        args.extend_from_slice(TINY);
        args.extend_from_slice(extra);
        semcom(&args)?;
        Ok(out)
    };
    let data = run("prepare-data", "data", &[])?;
    let jscc = run("train-jscc", "jscc", &["--data", s(&data)])?;
    let ex = run("train-extractor", "ex", &["--data", s(&data), "--jscc", s(&jscc)])?;
    let space = run("train-unified-space", "space", &["--data", s(&data), "--jscc", s(&jscc)])?;
    let relpred = run("train-relpred", "relpred", &["--data", s(&data), "--space", s(&space)])?;
    let receiver = ex.join("receiver");
    run(
        "evaluate",
        "eval",
        &[
            "--data",
            s(&data),
            "--jscc",
            s(&receiver),
            "--extractor",
            s(&ex),
            "--space",
            s(&space),
            "--relpred",
            s(&relpred),
        ],
    )?;
    let mut compared = 0;
    for name in ["jscc", "ex", "space", "relpred", "eval"] {
        let again = r.join(format!("{name}.replay"));
        let manifest = r.join(name).join("manifest.json");
        semcom(&["replay", "--manifest", s(&manifest), "--out", s(&again)])?;
        let outputs = |dir: &Path| -> Result<serde_json::Value, String> {
            let text = std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            Ok(v["outputs"].clone())
        };
        let (a, b) = (outputs(&r.join(name))?, outputs(&again)?);
        if a != b {
            return Err(format!("{name}: replayed outputs differ"));
        }
        for file in a.as_object().into_iter().flat_map(|o| o.keys()) {
            if file.ends_with(".csv") {
                let x = std::fs::read(r.join(name).join(file)).map_err(|e| e.to_string())?;
                let y = std::fs::read(again.join(file)).map_err(|e| e.to_string())?;
                if x != y {
                    return Err(format!("{name}/{file} differs on replay"));
                }
                compared += 1;
            }
        }
    }
    Ok(format!("5 commands replayed from manifests, {compared} CSVs byte-identical, all output hashes equal"))
}
