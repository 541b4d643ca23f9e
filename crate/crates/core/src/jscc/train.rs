use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{teacher_forcing, JsccModel, KnowledgeLayout, Layout, Received};
use crate::channel::{self, ChannelConfig, ChannelKind, SymbolBlock};
use crate::corpus::{DataPair, FactTriple, KnowledgeBase, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::neural::{Adam, Bound, Dropout, ModelConfig, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub train_snr_db: f64,
    pub channel: ChannelKind,
    pub seed: u64,
    /// Share of training sentences that see (corrupted) gold knowledge in
    /// the decoder memory.
    pub knowledge_prob: f64,
    /// Probability of keeping each gold triple in that knowledge.
    pub knowledge_keep: f64,
    /// Probability of adding each of up to two random distractor triples.
    pub knowledge_distractor: f64,
    pub knowledge_layout: KnowledgeLayout,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-4,
            epochs: 30,
            train_snr_db: 0.0,
            channel: ChannelKind::Awgn,
            seed: 1,
            knowledge_prob: 0.5,
            knowledge_keep: 0.8,
            knowledge_distractor: 0.3,
            knowledge_layout: KnowledgeLayout::Pooled,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("train.batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("train.epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("train.lr must be finite and >= 0".into()));
        }
        if !self.train_snr_db.is_finite() {
            return Err(Error::InvalidArgument("train.train_snr_db must be finite".into()));
        }
        for (name, p) in [
            ("knowledge_prob", self.knowledge_prob),
            ("knowledge_keep", self.knowledge_keep),
            ("knowledge_distractor", self.knowledge_distractor),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("train.{name} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: JsccModel<f32>,
    /// Mean summed cross-entropy per sentence, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

pub const TRAIN_LOG: &str = "train_log.csv";

/// Adds the channel perturbation `equalize(transmit(x)) - x` for every
/// sentence block as a constant, so gradients pass straight through.
pub(crate) fn channel_noise<R: Rng>(
    tape: &mut Tape<'_, f32>,
    x: Var,
    layout: &Layout,
    channel_dim: usize,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<Var> {
    let xv = tape.value(x);
    let mut noise = Vec::with_capacity(xv.len());
    for (start, len) in layout.ranges() {
        let reals: Vec<f64> = xv.slice_rows(start, len).data().iter().map(|&v| v as f64).collect();
        let block = SymbolBlock::from_real_pairs(len, channel_dim, &reals)?;
        let (y, h) = channel::transmit(&block, cfg, rng)?;
        let eq = channel::equalize(&y, h)?;
        noise.extend(
            eq.to_real_pairs()
                .iter()
                .zip(&reals)
                .map(|(a, b)| (a - b) as f32),
        );
    }
    let n = tape.constant(Tensor::from_vec(xv.rows(), xv.cols(), noise));
    Ok(tape.add(x, n))
}

/// Corrupted gold knowledge for one sentence: each gold triple kept with
/// `keep`, plus random distractors.
fn sample_knowledge(
    pair: &DataPair,
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut out: Vec<usize> = pair
        .gold_triples
        .iter()
        .filter_map(|t| kb.index_of(t))
        .filter(|_| rng.random_bool(cfg.knowledge_keep))
        .collect();
    for _ in 0..2 {
        if kb.n_t() > 0 && rng.random_bool(cfg.knowledge_distractor) {
            let i = rng.random_range(0..kb.n_t());
            if !out.contains(&i) {
                out.push(i);
            }
        }
    }
    out.sort_unstable();
    out
}

/// One teacher-forced training loss over a batch. Returns the summed loss
/// node.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_loss<'p>(
    model: &'p JsccModel<f32>,
    tape: &mut Tape<'p, f32>,
    p: &Bound,
    batch: &[&DataPair],
    knowledge: &[Vec<Vec<usize>>],
    channel_cfg: &ChannelConfig,
    noise_rng: &mut ChaCha8Rng,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let layout = Layout::new(batch.iter().map(|b| b.tokens.true_length));
    let ids: Vec<usize> = batch.iter().flat_map(|b| b.tokens.active().iter().copied()).collect();
    let h = model.encode_rows(tape, p, &ids, &layout, drop);
    let x = model.channel_encode_rows(tape, p, h)?;
    let y = channel_noise(tape, x, &layout, model.config.channel_dim, channel_cfg, noise_rng)?;
    let h_hat = model.channel_decode_rows(tape, p, y);
    memory_loss(model, tape, p, batch, h_hat, &layout, knowledge, drop)
}

/// Teacher-forced loss given the stacked received rows `h_hat`: appends
/// each sentence's knowledge rows to its memory and decodes.
#[allow(clippy::too_many_arguments)]
fn memory_loss<'p>(
    model: &'p JsccModel<f32>,
    tape: &mut Tape<'p, f32>,
    p: &Bound,
    batch: &[&DataPair],
    h_hat: Var,
    layout: &Layout,
    knowledge: &[Vec<Vec<usize>>],
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(batch.len() * 2);
    let mut mem_lens = Vec::with_capacity(batch.len());
    for (i, (start, len)) in layout.ranges().into_iter().enumerate() {
        parts.push(tape.slice_rows(h_hat, start, len));
        let mut mlen = len;
        if let Some(k) = model.knowledge_rows(tape, p, &knowledge[i]) {
            mlen += tape.shape(k).0;
            parts.push(k);
        }
        mem_lens.push(mlen);
    }
    let memory = tape.concat_rows(&parts);
    let mem_layout = Layout::new(mem_lens);

    let dec_layout = Layout::new(batch.iter().map(|b| b.tokens.true_length - 1));
    let mut inputs = Vec::with_capacity(dec_layout.total);
    let mut targets = Vec::with_capacity(dec_layout.total);
    for b in batch {
        let (inp, tgt) = teacher_forcing(&b.tokens);
        inputs.extend_from_slice(inp);
        targets.extend(tgt.iter().map(|&t| Some(t)));
    }
    let logits = model.decode_rows(tape, p, &inputs, &dec_layout, memory, &mem_layout, drop);
    Ok(tape.cross_entropy(logits, &targets))
}

/// Trains the codec end to end through the simulated channel.
///
/// With `out_dir`, writes `train_log.csv` (epoch, loss) and a checkpoint
/// in `out_dir/checkpoint`; on divergence the last finite state is saved
/// there before returning [`Error::Diverged`].
pub fn train_jscc(
    pairs: &[DataPair],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    let mut model = JsccModel::<f32>::new(model_cfg.clone(), vocab.size(), cfg.seed)?;
    model.knowledge_layout = cfg.knowledge_layout;
    train_jscc_from(model, pairs, vocab, cfg, out_dir)
}

/// Continues training an existing model.
pub fn train_jscc_from(
    mut model: JsccModel<f32>,
    pairs: &[DataPair],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let kb = KnowledgeBase::from_triples(pairs.iter().flat_map(|p| &p.gold_triples));
    let triple_ids = JsccModel::triple_token_ids(kb.triples(), vocab);
    let channel_cfg = ChannelConfig::new(cfg.channel, cfg.train_snr_db, cfg.seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut know_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut adam = Adam::new(cfg.lr);
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = csv::Writer::from_path(dir.join(TRAIN_LOG))?;
            w.write_record(["epoch", "loss"])?;
            Some(w)
        }
        None => None,
    };
    let ckpt_dir: Option<PathBuf> = out_dir.map(|d| d.join("checkpoint"));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DataPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let knowledge: Vec<Vec<Vec<usize>>> = batch
                .iter()
                .map(|b| {
                    if cfg.knowledge_prob > 0.0 && know_rng.random_bool(cfg.knowledge_prob) {
                        sample_knowledge(b, &kb, cfg, &mut know_rng)
                            .into_iter()
                            .map(|i| triple_ids[i].clone())
                            .collect()
                    } else {
                        Vec::new()
                    }
                })
                .collect();
            let step = {
                let mut tape = Tape::new();
                let mut drop = Dropout::train(model.config.dropout, &mut drop_rng);
                let p = model.params.bind(&mut tape);
                let loss = batch_loss(&model, &mut tape, &p, &batch, &knowledge, &channel_cfg, &mut noise_rng, &mut drop)?;
                let value = tape.value(loss).item() as f64;
                if value.is_finite() {
                    let mut grads = tape.backward(loss);
                    Ok((value, model.params.collect_grads(&p, &mut grads)))
                } else {
                    Err(value)
                }
            };
            let stepped = match step {
                Ok((value, grads)) => {
                    let before = model.params.tensors().to_vec();
                    adam.step(&mut model.params, &grads).and_then(|_| {
                        if model.params.tensors().iter().all(Tensor::is_finite) {
                            Ok(value)
                        } else {
                            model.params.tensors_mut().clone_from_slice(&before);
                            Err(Error::Diverged { epoch })
                        }
                    })
                }
                Err(_) => Err(Error::Diverged { epoch }),
            };
            match stepped {
                Ok(value) => total += value,
                Err(Error::Diverged { .. }) | Err(Error::NonFiniteGradient { .. }) => {
                    if let Some(dir) = &ckpt_dir {
                        model.save(dir, vocab, adam.steps_taken())?;
                    }
                    return Err(Error::Diverged { epoch });
                }
                Err(e) => return Err(e),
            }
        }
        let mean = total / pairs.len() as f64;
        log::info!("train-jscc epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
        if let Some(w) = &mut log {
            w.write_record([epoch.to_string(), format!("{mean:.6}")])?;
            w.flush()?;
        }
    }
    if let Some(dir) = &ckpt_dir {
        model.save(dir, vocab, adam.steps_taken())?;
    }
    Ok(TrainReport { model, epoch_losses })
}

pub const RECEIVER_LOG: &str = "receiver_log.csv";

/// Trains the receiver (decoder, knowledge projection, output layer) on
/// knowledge chosen by `select` from the actual channel-decoded rows, with
/// the transmitter frozen so anything trained on its output stays valid.
///
/// Each sentence sees the selected knowledge with probability
/// `cfg.knowledge_prob` and none otherwise, so the baseline path keeps
/// training too.
pub fn finetune_receiver<F>(
    mut model: JsccModel<f32>,
    pairs: &[DataPair],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut select: F,
) -> Result<TrainReport>
where
    F: FnMut(&[&Received]) -> Result<Vec<Vec<FactTriple>>>,
{
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let frozen = model.transmitter_params();
    let channel_cfg = ChannelConfig::new(cfg.channel, cfg.train_snr_db, cfg.seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut know_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut adam = Adam::new(cfg.lr);
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut w = csv::Writer::from_path(dir.join(RECEIVER_LOG))?;
            w.write_record(["epoch", "loss"])?;
            Some(w)
        }
        None => None,
    };
    let d = model.config.d_model;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DataPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let seqs: Vec<&TokenSequence> = batch.iter().map(|b| &b.tokens).collect();
            let received = model.transmit_batch(&seqs, &channel_cfg, &mut noise_rng)?;
            let refs: Vec<&Received> = received.iter().collect();
            let selected = select(&refs)?;
            if selected.len() != batch.len() {
                return Err(Error::Shape(format!(
                    "knowledge selector returned {} lists for {} sentences",
                    selected.len(),
                    batch.len()
                )));
            }
            let knowledge: Vec<Vec<Vec<usize>>> = selected
                .iter()
                .map(|ts| {
                    if cfg.knowledge_prob > 0.0 && know_rng.random_bool(cfg.knowledge_prob) {
                        JsccModel::triple_token_ids(ts, vocab)
                    } else {
                        Vec::new()
                    }
                })
                .collect();
            let layout = Layout::new(received.iter().map(Received::valid_len));
            let mut rows = Vec::with_capacity(layout.total * d);
            for r in &received {
                rows.extend_from_slice(r.h_hat.data());
            }
            let grads = {
                let mut tape = Tape::new();
                let mut drop = Dropout::train(model.config.dropout, &mut drop_rng);
                let p = model.params.bind(&mut tape);
                let h = tape.constant(Tensor::from_vec(layout.total, d, rows));
                let loss = memory_loss(&model, &mut tape, &p, &batch, h, &layout, &knowledge, &mut drop)?;
                let value = tape.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                total += value;
                let mut g = tape.backward(loss);
                let mut grads = model.params.collect_grads(&p, &mut g);
                for &id in &frozen {
                    grads[id.index()].data_mut().fill(0.0);
                }
                grads
            };
            adam.step(&mut model.params, &grads)?;
        }
        let mean = total / pairs.len() as f64;
        log::info!("finetune-receiver epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
        if let Some(w) = &mut log {
            w.write_record([epoch.to_string(), format!("{mean:.6}")])?;
            w.flush()?;
        }
    }
    if let Some(dir) = out_dir {
        model.save(&dir.join("checkpoint"), vocab, adam.steps_taken())?;
    }
    Ok(TrainReport { model, epoch_losses })
}
