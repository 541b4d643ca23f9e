use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{bleu1_text, PrCounts, SimilarityScorer};
use crate::channel::{ChannelConfig, ChannelKind};
use crate::corpus::{decode_tokens, DataPair, FactTriple, KnowledgeBase, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::extractor::{receive_with_kg_batch, ExtractorModel};
use crate::jscc::{JsccModel, Received};
use crate::unified_space::{receive_with_evolving_kg_batch, RelationPredictor, UnifiedSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceiverKind {
    Baseline,
    KgStatic,
    KgEvolving,
}

impl ReceiverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReceiverKind::Baseline => "baseline",
            ReceiverKind::KgStatic => "kg_static",
            ReceiverKind::KgEvolving => "kg_evolving",
        }
    }
}

impl fmt::Display for ReceiverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReceiverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(ReceiverKind::Baseline),
            "kg_static" => Ok(ReceiverKind::KgStatic),
            "kg_evolving" => Ok(ReceiverKind::KgEvolving),
            other => Err(Error::InvalidArgument(format!(
                "unknown receiver kind {other:?} (expected baseline, kg_static or kg_evolving)"
            ))),
        }
    }
}

/// Which extractor serves each SNR point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    /// One extractor trained at the training SNR for every point.
    #[default]
    Fixed,
    /// An extractor trained at each point's SNR.
    SnrSpecific,
}

impl FromStr for ModelSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(ModelSelection::Fixed),
            "snr_specific" | "snr-specific" => Ok(ModelSelection::SnrSpecific),
            other => Err(Error::InvalidArgument(format!(
                "unknown model selection {other:?} (expected fixed or snr_specific)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub snr_points: Vec<f64>,
    pub channel: ChannelKind,
    pub receivers: Vec<ReceiverKind>,
    pub selection: ModelSelection,
    pub seed: u64,
    /// Similarity scorer name; `tf-cosine` is the built-in one.
    pub similarity: String,
    pub threshold: f64,
    pub batch_size: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            snr_points: vec![-4.0, -2.0, 0.0, 2.0, 4.0],
            channel: ChannelKind::Awgn,
            receivers: vec![ReceiverKind::Baseline, ReceiverKind::KgStatic],
            selection: ModelSelection::Fixed,
            seed: 5,
            similarity: "tf-cosine".into(),
            threshold: 0.5,
            batch_size: 64,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_points.is_empty() {
            return Err(Error::InvalidArgument("sweep.snr_points must not be empty".into()));
        }
        if self.snr_points.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("sweep.snr_points must be finite".into()));
        }
        if self.receivers.is_empty() {
            return Err(Error::InvalidArgument("sweep.receivers must not be empty".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("sweep.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean metrics of one receiver at one SNR point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub receiver_kind: ReceiverKind,
    pub snr_db: f64,
    pub bleu1: f64,
    pub similarity: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_sentences: usize,
}

/// Trained models available to a sweep.
#[derive(Debug, Clone, Copy, Default)]
pub struct SweepModels<'a> {
    pub jscc: Option<&'a JsccModel<f32>>,
    pub extractor: Option<&'a ExtractorModel<f32>>,
    /// SNR-specific extractors keyed by their training SNR.
    pub snr_extractors: &'a [(f64, ExtractorModel<f32>)],
    /// Receivers fine-tuned with those extractors. Under SNR-specific
    /// selection every receiver kind decodes with the matching one when
    /// present, and with `jscc` otherwise.
    pub snr_receivers: &'a [(f64, JsccModel<f32>)],
    pub space: Option<&'a UnifiedSpace>,
    pub predictor: Option<&'a RelationPredictor>,
}

impl<'a> SweepModels<'a> {
    fn extractor_for(&self, snr: f64, selection: ModelSelection) -> Result<&'a ExtractorModel<f32>> {
        match selection {
            ModelSelection::Fixed => self
                .extractor
                .ok_or_else(|| Error::InvalidArgument("kg_static needs a trained extractor".into())),
            ModelSelection::SnrSpecific => self
                .snr_extractors
                .iter()
                .find(|(s, _)| (s - snr).abs() < 1e-9)
                .map(|(_, m)| m)
                .ok_or_else(|| Error::InvalidArgument(format!("no SNR-specific extractor for {snr} dB"))),
        }
    }

    fn receiver_for(&self, snr: f64, selection: ModelSelection, jscc: &'a JsccModel<f32>) -> &'a JsccModel<f32> {
        match selection {
            ModelSelection::Fixed => jscc,
            ModelSelection::SnrSpecific => self
                .snr_receivers
                .iter()
                .find(|(s, _)| (s - snr).abs() < 1e-9)
                .map_or(jscc, |(_, m)| m),
        }
    }
}

#[derive(Serialize)]
struct TraceLine<'a> {
    receiver_kind: ReceiverKind,
    snr_db: f64,
    index: usize,
    reference: &'a str,
    hypothesis: &'a str,
    bleu1: f64,
    triples: Vec<String>,
}

/// Decodes the full test split at every SNR point with every requested
/// receiver. All receivers at a point see the same channel realization.
/// Evolving receivers start each point from a fresh copy of `kb`.
#[allow(clippy::too_many_arguments)]
pub fn run_snr_sweep(
    cfg: &SweepConfig,
    models: &SweepModels<'_>,
    test: &[DataPair],
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    scorer: &dyn SimilarityScorer,
    mut trace: Option<&mut dyn Write>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let jscc = models
        .jscc
        .ok_or_else(|| Error::InvalidArgument("the sweep needs a trained codec".into()))?;
    for &kind in &cfg.receivers {
        match kind {
            ReceiverKind::Baseline => {}
            ReceiverKind::KgStatic => {
                for &snr in &cfg.snr_points {
                    models.extractor_for(snr, cfg.selection)?.check_kb(kb)?;
                }
                for (snr, rx) in models.snr_receivers {
                    if !rx.shares_transmitter(jscc) {
                        return Err(Error::InvalidArgument(format!(
                            "the SNR-specific receiver for {snr} dB was not fine-tuned from this codec"
                        )));
                    }
                }
            }
            ReceiverKind::KgEvolving => {
                if models.space.is_none() || models.predictor.is_none() {
                    return Err(Error::InvalidArgument(
                        "kg_evolving needs a trained unified space and relation predictor".into(),
                    ));
                }
            }
        }
    }
    scorer.score("probe", "probe")?;

    let mut rows = Vec::with_capacity(cfg.snr_points.len() * cfg.receivers.len());
    for (point, &snr) in cfg.snr_points.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(1000 * point as u64);
        let channel = ChannelConfig::new(cfg.channel, snr, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut received: Vec<Received> = Vec::with_capacity(test.len());
        for chunk in test.chunks(cfg.batch_size) {
            let seqs: Vec<&TokenSequence> = chunk.iter().map(|p| &p.tokens).collect();
            received.extend(jscc.transmit_batch(&seqs, &channel, &mut rng)?);
        }
        let rx = models.receiver_for(snr, cfg.selection, jscc);
        for &kind in &cfg.receivers {
            let mut decoded: Vec<TokenSequence> = Vec::with_capacity(test.len());
            let mut predicted: Vec<Option<Vec<FactTriple>>> = Vec::with_capacity(test.len());
            let mut evolving_kb = kb.clone();
            for chunk in received.chunks(cfg.batch_size) {
                let refs: Vec<&Received> = chunk.iter().collect();
                match kind {
                    ReceiverKind::Baseline => {
                        decoded.extend(rx.decode_batch(&refs, &vec![None; refs.len()])?);
                        predicted.extend(std::iter::repeat_n(None, refs.len()));
                    }
                    ReceiverKind::KgStatic => {
                        let ex = models.extractor_for(snr, cfg.selection)?;
                        let (d, sel) = receive_with_kg_batch(&refs, rx, ex, kb, vocab, cfg.threshold)?;
                        decoded.extend(d);
                        predicted.extend(sel.into_iter().map(Some));
                    }
                    ReceiverKind::KgEvolving => {
                        let (space, pred) = (models.space.unwrap(), models.predictor.unwrap());
                        let (d, traces) =
                            receive_with_evolving_kg_batch(&refs, rx, space, pred, &mut evolving_kb, vocab)?;
                        decoded.extend(d);
                        predicted.extend(traces.into_iter().map(|t| Some(t.triples)));
                    }
                }
            }
            let mut bleu = 0.0;
            let mut sim = 0.0;
            let mut counts = PrCounts::default();
            for (i, ((pair, out), pred)) in test.iter().zip(&decoded).zip(&predicted).enumerate() {
                let reference = pair.reference();
                let hypothesis = decode_tokens(&out.ids, vocab)?;
                let b = bleu1_text(&reference, &hypothesis);
                bleu += b;
                sim += scorer.score(&reference, &hypothesis)?;
                let pred = pred.as_deref().unwrap_or(&[]);
                counts.add(pred, &pair.gold_triples);
                if let Some(w) = trace.as_deref_mut() {
                    let line = TraceLine {
                        receiver_kind: kind,
                        snr_db: snr,
                        index: i,
                        reference: &reference,
                        hypothesis: &hypothesis,
                        bleu1: b,
                        triples: pred.iter().map(ToString::to_string).collect(),
                    };
                    serde_json::to_writer(&mut *w, &line)?;
                    w.write_all(b"\n")?;
                }
            }
            let n = test.len() as f64;
            let row = MetricsRow {
                receiver_kind: kind,
                snr_db: snr,
                bleu1: bleu / n,
                similarity: sim / n,
                precision: counts.precision(),
                recall: counts.recall(),
                n_sentences: test.len(),
            };
            log::info!(
                "{kind} at {snr} dB: bleu1 {:.4} similarity {:.4} precision {:.3} recall {:.3}",
                row.bleu1,
                row.similarity,
                row.precision,
                row.recall
            );
            rows.push(row);
        }
    }
    Ok(rows)
}

pub const METRICS_HEADER: [&str; 7] = [
    "receiver_kind",
    "snr_db",
    "bleu1",
    "similarity",
    "precision",
    "recall",
    "n_sentences",
];

/// Writes rows with fixed decimal formatting so reruns compare byte for
/// byte.
pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.receiver_kind.to_string(),
            format!("{}", r.snr_db),
            format!("{:.6}", r.bleu1),
            format!("{:.6}", r.similarity),
            format!("{:.6}", r.precision),
            format!("{:.6}", r.recall),
            r.n_sentences.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
