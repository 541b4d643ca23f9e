//! Static knowledge-graph receiver: a multi-label classifier over the
//! knowledge base, driven by the channel-decoded representation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, ChannelKind};
use crate::corpus::{labels_for, DataPair, FactTriple, KnowledgeBase, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::evaluation::metrics::PrCounts;
use crate::jscc::{finetune_receiver, JsccModel, Layout, Received, TrainConfig, TrainReport};
use crate::neural::checkpoint;
use crate::neural::{
    Adam, Bound, Dropout, EncoderLayer, Linear, ModelConfig, ParamStore, Scalar, Tape, Tensor, Var,
};

pub const CHECKPOINT_KIND: &str = "extractor";
pub const DEFAULT_W: f64 = 0.02;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    /// Encoder layers `L` over the channel-decoded rows.
    pub layers: usize,
    /// Positive/negative weighting of the BCE loss.
    pub w: f64,
    pub threshold: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_snr_db: f64,
    pub channel: ChannelKind,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            layers: 2,
            w: DEFAULT_W,
            threshold: DEFAULT_THRESHOLD,
            lr: 1e-4,
            epochs: 20,
            batch_size: 32,
            train_snr_db: 0.0,
            channel: ChannelKind::Awgn,
            seed: 2,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.w < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "extractor.w must be in (0, 1), got {}",
                self.w
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "extractor.threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.layers == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "extractor.layers, extractor.epochs and extractor.batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Net {
    encoder: Vec<EncoderLayer>,
    classifier: Linear,
}

/// Encoder stack, masked mean pooling and a sigmoid classifier with one
/// output per knowledge-base triple.
#[derive(Debug, Clone)]
pub struct ExtractorModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub n_t: usize,
    /// Hash of the knowledge base the output layout belongs to.
    pub kb_hash: String,
    pub params: ParamStore<T>,
    net: Net,
}

impl<T: Scalar> ExtractorModel<T> {
    pub fn new(config: ModelConfig, kb: &KnowledgeBase, seed: u64) -> Result<Self> {
        config.validate()?;
        if kb.is_empty() {
            return Err(Error::InvalidArgument("knowledge base is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let encoder = (0..config.layers)
            .map(|l| EncoderLayer::new(&mut p, &format!("encoder.{l}"), &config, &mut rng))
            .collect();
        let classifier = Linear::new(&mut p, "classifier", config.d_model, kb.n_t(), &mut rng);
        Ok(ExtractorModel {
            config,
            n_t: kb.n_t(),
            kb_hash: kb.hash(),
            params: p,
            net: Net { encoder, classifier },
        })
    }

    pub fn check_kb(&self, kb: &KnowledgeBase) -> Result<()> {
        let found = kb.hash();
        if found != self.kb_hash || kb.n_t() != self.n_t {
            return Err(Error::StaleKnowledgeBase {
                expected: self.kb_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn classifier_weights(&self) -> (&Tensor<T>, &Tensor<T>) {
        (
            self.params.get(self.net.classifier.w),
            self.params.get(self.net.classifier.b),
        )
    }

    /// Zeroes the classifier so every score is exactly 0.5.
    pub fn zero_classifier(&mut self) {
        let (w, b) = (self.net.classifier.w, self.net.classifier.b);
        let (r, c) = self.params.get(w).shape();
        *self.params.get_mut(w) = Tensor::zeros(r, c);
        *self.params.get_mut(b) = Tensor::zeros(1, c);
    }

    /// Differentiable scores for stacked received rows, `lens[i]` rows per
    /// sentence, without dropout.
    pub fn score_node(&self, tape: &mut Tape<'_, T>, p: &Bound, h_hat: Var, lens: &[usize]) -> Var {
        self.score_rows(tape, p, h_hat, &Layout::new(lens.iter().copied()), &mut Dropout::off())
    }

    /// Scores for stacked received rows: one output row per sentence.
    pub(crate) fn score_rows(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        h_hat: Var,
        layout: &Layout,
        drop: &mut Dropout<'_>,
    ) -> Var {
        let mut z = h_hat;
        let segs = layout.squares();
        for layer in &self.net.encoder {
            z = layer.forward(tape, p, z, &segs, drop);
        }
        let pooled = tape.segment_mean(z, &layout.ranges());
        let logits = self.net.classifier.forward(tape, p, pooled);
        tape.sigmoid(logits)
    }
}

impl ExtractorModel<f32> {
    /// Indicator vectors `t` for a batch of received sentences.
    pub fn score_batch(&self, received: &[&Received], kb: &KnowledgeBase) -> Result<Vec<Vec<f32>>> {
        self.check_kb(kb)?;
        let d = self.config.d_model;
        let layout = Layout::new(received.iter().map(|r| r.valid_len()));
        let mut rows = Vec::with_capacity(layout.total * d);
        for r in received {
            if r.h_hat.cols() != d {
                return Err(Error::Shape(format!(
                    "received width {} != extractor width {d}",
                    r.h_hat.cols()
                )));
            }
            rows.extend_from_slice(r.h_hat.data());
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let h = tape.constant(Tensor::from_vec(layout.total, d, rows));
        let t = self.score_rows(&mut tape, &p, h, &layout, &mut Dropout::off());
        let tv = tape.value(t);
        Ok((0..received.len()).map(|i| tv.row(i).to_vec()).collect())
    }

    pub fn score_triples(&self, received: &Received, kb: &KnowledgeBase) -> Result<Vec<f32>> {
        Ok(self.score_batch(&[received], kb)?.remove(0))
    }

    pub fn save(&self, dir: &Path, vocab: &Vocabulary, step: u64, cfg: &ExtractorConfig) -> Result<()> {
        checkpoint::save(
            dir,
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config)?,
            &vocab.hash(),
            step,
            &self.params,
            serde_json::json!({
                "kb_hash": self.kb_hash,
                "n_t": self.n_t,
                "extractor": cfg,
            }),
        )?;
        Ok(())
    }

    /// Loads a checkpoint; `kb` must be the knowledge base it was trained
    /// against.
    pub fn load(dir: &Path, vocab: &Vocabulary, kb: &KnowledgeBase) -> Result<Self> {
        let m = checkpoint::read_manifest(dir)?;
        if m.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} checkpoint, expected {CHECKPOINT_KIND}",
                dir.display(),
                m.kind
            )));
        }
        if m.vocab_hash != vocab.hash() {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different vocabulary",
                dir.display()
            )));
        }
        let expected = m
            .extra
            .get("kb_hash")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        if expected != kb.hash() {
            return Err(Error::StaleKnowledgeBase {
                expected,
                found: kb.hash(),
            });
        }
        let config: ModelConfig = serde_json::from_value(m.config.clone())?;
        let mut model = ExtractorModel::new(config, kb, 0)?;
        checkpoint::load_into(dir, &m, &mut model.params)?;
        Ok(model)
    }
}

/// Triples whose score reaches `threshold` (inclusive), in kb order.
pub fn select_triples(t: &[f32], kb: &KnowledgeBase, threshold: f64) -> Result<Vec<FactTriple>> {
    if t.len() != kb.n_t() {
        return Err(Error::Shape(format!(
            "indicator vector has {} entries, knowledge base has {} triples",
            t.len(),
            kb.n_t()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be in (0, 1), got {threshold}"
        )));
    }
    Ok(t.iter()
        .enumerate()
        .filter(|(_, &s)| s as f64 >= threshold)
        .map(|(i, _)| kb.triple(i).clone())
        .collect())
}

/// Weighted binary cross-entropy `sum_i -w_i [t_i ln p_i + (1 - t_i) ln(1 - p_i)]`, `w_i = w` for
/// negatives and `1 - w` for positives, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn weighted_bce(labels: &[f64], scores: &[f64], w: f64) -> Result<f64> {
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::InvalidArgument(format!("w must be in (0, 1), got {w}")));
    }
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::from_vec(1, scores.len(), scores.to_vec()));
    let l = tape.weighted_bce(p, Tensor::from_vec(1, labels.len(), labels.to_vec()), w);
    Ok(tape.value(l).item())
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone)]
pub struct ExtractorReport {
    pub model: ExtractorModel<f32>,
    pub epochs: Vec<ExtractorEpoch>,
}

pub const TRAIN_LOG: &str = "extractor_log.csv";

/// Trains the extractor on channel-decoded representations from the frozen
/// codec. With `init`, training continues from that model (used for
/// SNR-specific fine-tuning).
pub fn train_extractor(
    jscc: &JsccModel<f32>,
    pairs: &[DataPair],
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    cfg: &ExtractorConfig,
    init: Option<ExtractorModel<f32>>,
    out_dir: Option<&Path>,
) -> Result<ExtractorReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = match init {
        Some(m) => {
            m.check_kb(kb)?;
            m
        }
        None => {
            let mc = ModelConfig {
                layers: cfg.layers,
                ..jscc.config.clone()
            };
            ExtractorModel::new(mc, kb, cfg.seed)?
        }
    };
    if model.config.d_model != jscc.config.d_model {
        return Err(Error::Shape(format!(
            "extractor width {} != codec width {}",
            model.config.d_model, jscc.config.d_model
        )));
    }
    let labels: Vec<Vec<f32>> = pairs
        .iter()
        .map(|p| labels_for(p, kb))
        .collect::<Result<_>>()?;
    let channel = ChannelConfig::new(cfg.channel, cfg.train_snr_db, cfg.seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut adam = Adam::new(cfg.lr);
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = csv::Writer::from_path(dir.join(TRAIN_LOG))?;
            w.write_record(["epoch", "loss", "precision", "recall"])?;
            Some(w)
        }
        None => None,
    };
    let w = cfg.w as f32;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut counts = PrCounts::default();
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<&TokenSequence> = chunk.iter().map(|&i| &pairs[i].tokens).collect();
            let received = jscc.transmit_batch(&seqs, &channel, &mut noise_rng)?;
            let layout = Layout::new(received.iter().map(Received::valid_len));
            let d = model.config.d_model;
            let mut rows = Vec::with_capacity(layout.total * d);
            for r in &received {
                rows.extend_from_slice(r.h_hat.data());
            }
            let mut lab = Vec::with_capacity(chunk.len() * kb.n_t());
            for &i in chunk {
                lab.extend_from_slice(&labels[i]);
            }
            let grads = {
                let mut tape = Tape::new();
                let p = model.params.bind(&mut tape);
                let h = tape.constant(Tensor::from_vec(layout.total, d, rows));
                let mut drop = Dropout::train(model.config.dropout, &mut drop_rng);
                let t = model.score_rows(&mut tape, &p, h, &layout, &mut drop);
                let tv = tape.value(t);
                for (j, &i) in chunk.iter().enumerate() {
                    let pred: Vec<usize> = (0..kb.n_t())
                        .filter(|&c| tv.get(j, c) as f64 >= cfg.threshold)
                        .collect();
                    let gold: Vec<usize> = (0..kb.n_t()).filter(|&c| labels[i][c] > 0.5).collect();
                    counts.add(&pred, &gold);
                }
                let loss = tape.weighted_bce(t, Tensor::from_vec(chunk.len(), kb.n_t(), lab), w);
                let value = tape.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                total += value;
                let mut g = tape.backward(loss);
                model.params.collect_grads(&p, &mut g)
            };
            adam.step(&mut model.params, &grads)?;
        }
        let rec = ExtractorEpoch {
            epoch,
            loss: total / pairs.len() as f64,
            precision: counts.precision(),
            recall: counts.recall(),
        };
        log::info!(
            "train-extractor epoch {epoch}: loss {:.4} precision {:.3} recall {:.3}",
            rec.loss,
            rec.precision,
            rec.recall
        );
        if let Some(wr) = &mut log {
            wr.write_record([
                epoch.to_string(),
                format!("{:.6}", rec.loss),
                format!("{:.6}", rec.precision),
                format!("{:.6}", rec.recall),
            ])?;
            wr.flush()?;
        }
        epochs.push(rec);
    }
    if let Some(dir) = out_dir {
        model.save(&dir.join("checkpoint"), vocab, adam.steps_taken(), cfg)?;
    }
    Ok(ExtractorReport { model, epochs })
}

/// Trains the codec's receiver on the knowledge this extractor selects
/// from noisy received rows; the transmitter (and so the extractor's
/// input distribution) is left unchanged.
pub fn finetune_with_extractor(
    jscc: JsccModel<f32>,
    extractor: &ExtractorModel<f32>,
    pairs: &[DataPair],
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    threshold: f64,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    extractor.check_kb(kb)?;
    finetune_receiver(jscc, pairs, vocab, cfg, out_dir, |received| {
        extractor
            .score_batch(received, kb)?
            .iter()
            .map(|t| select_triples(t, kb, threshold))
            .collect()
    })
}

/// Static-kb reception for a batch: score, select, embed knowledge, decode.
/// Returns the decoded sequences and the selected triples.
pub fn receive_with_kg_batch(
    received: &[&Received],
    jscc: &JsccModel<f32>,
    extractor: &ExtractorModel<f32>,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    threshold: f64,
) -> Result<(Vec<TokenSequence>, Vec<Vec<FactTriple>>)> {
    let scores = extractor.score_batch(received, kb)?;
    let selected: Vec<Vec<FactTriple>> = scores
        .iter()
        .map(|t| select_triples(t, kb, threshold))
        .collect::<Result<_>>()?;
    let ks: Vec<Option<Tensor<f32>>> = selected
        .iter()
        .map(|s| (!s.is_empty()).then(|| jscc.knowledge_embed(s, vocab)))
        .collect();
    let refs: Vec<Option<&Tensor<f32>>> = ks.iter().map(Option::as_ref).collect();
    Ok((jscc.decode_batch(received, &refs)?, selected))
}

/// Static-kb reception of one sentence at the 0.5 threshold.
pub fn receive_with_kg(
    received: &Received,
    jscc: &JsccModel<f32>,
    extractor: &ExtractorModel<f32>,
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    let (mut out, _) = receive_with_kg_batch(&[received], jscc, extractor, kb, vocab, DEFAULT_THRESHOLD)?;
    Ok(out.remove(0))
}
