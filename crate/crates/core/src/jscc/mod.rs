//! Transformer joint source-channel codec.
//!
//! Transmitter: token embedding + positions, encoder stack, per-token dense
//! map to `c` complex symbols, per-token power normalization. Receiver:
//! dense map back to `d_model`, decoder stack that cross-attends over the
//! received rows with optional knowledge rows appended, vocabulary logits.

mod train;

use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use train::{finetune_receiver, train_jscc, train_jscc_from, TrainConfig, TrainReport};

use crate::channel::{self, ChannelConfig, SymbolBlock};
use crate::corpus::{FactTriple, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::neural::checkpoint;
use crate::neural::layers::{sinusoidal_positions, stacked_positions};
use crate::neural::params::normal;
use crate::neural::{
    Bound, DecoderLayer, Dropout, EncoderLayer, Linear, ModelConfig, ParamId, ParamStore, Scalar,
    Segment, Tape, Tensor, Var,
};

pub const CHECKPOINT_KIND: &str = "jscc";

/// How selected triples become decoder memory rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeLayout {
    /// One row: mean over triples of the per-triple token-embedding mean.
    #[default]
    Pooled,
    /// One row per triple.
    PerTriple,
    /// One row per token of every triple rendering, with positions counted
    /// within the triple.
    Tokens,
}

/// Parameter handles of the codec.
#[derive(Debug, Clone)]
struct Net {
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    channel_enc: Linear,
    channel_dec: Linear,
    decoder: Vec<DecoderLayer>,
    knowledge_proj: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
pub struct JsccModel<T: Scalar = f32> {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub knowledge_layout: KnowledgeLayout,
    pub params: ParamStore<T>,
    net: Net,
    positions: Tensor<T>,
}

/// The receiver-side view of one sentence: channel-decoded rows for the
/// transmitted positions. Pad positions are not transmitted; their count is
/// side information.
#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    /// `true_length x d_model`.
    pub h_hat: Tensor<f32>,
}

impl Received {
    pub fn valid_len(&self) -> usize {
        self.h_hat.rows()
    }
}

/// Row offsets for sentences stacked along the row axis.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub lens: Vec<usize>,
    pub starts: Vec<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(lens: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = lens.into_iter().collect();
        let mut starts = Vec::with_capacity(lens.len());
        let mut total = 0;
        for &l in &lens {
            starts.push(total);
            total += l;
        }
        Layout { lens, starts, total }
    }

    pub fn squares(&self) -> Vec<Segment> {
        self.lens
            .iter()
            .zip(&self.starts)
            .map(|(&l, &s)| Segment::square(s, l))
            .collect()
    }

    pub fn ranges(&self) -> Vec<(usize, usize)> {
        self.starts.iter().copied().zip(self.lens.iter().copied()).collect()
    }
}

impl<T: Scalar> JsccModel<T> {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size < 5 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary of {vocab_size} tokens is too small"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let embed = p.add("embed", normal(&mut rng, vocab_size, d, 1.0));
        let encoder = (0..config.layers)
            .map(|l| EncoderLayer::new(&mut p, &format!("encoder.{l}"), &config, &mut rng))
            .collect();
        let channel_enc = Linear::new(&mut p, "channel_enc", d, 2 * config.channel_dim, &mut rng);
        let channel_dec = Linear::new(&mut p, "channel_dec", 2 * config.channel_dim, d, &mut rng);
        let decoder = (0..config.layers)
            .map(|l| DecoderLayer::new(&mut p, &format!("decoder.{l}"), &config, &mut rng))
            .collect();
        let knowledge_proj = Linear::new(&mut p, "knowledge_proj", d, d, &mut rng);
        let out = Linear::new(&mut p, "out", d, vocab_size, &mut rng);
        Ok(JsccModel {
            positions: sinusoidal_positions(config.max_len, d),
            config,
            vocab_size,
            knowledge_layout: KnowledgeLayout::Pooled,
            params: p,
            net: Net {
                embed,
                encoder,
                channel_enc,
                channel_dec,
                decoder,
                knowledge_proj,
                out,
            },
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub(crate) fn embed_param(&self) -> ParamId {
        self.net.embed
    }

    /// Parameters that shape the transmitted symbols and the received rows:
    /// token embedding, encoder, channel encoder and channel decoder.
    pub fn transmitter_params(&self) -> Vec<ParamId> {
        let mut out = vec![self.net.embed];
        out.extend(self.params.ids().filter(|&id| {
            let n = self.params.name(id);
            n.starts_with("encoder.") || n.starts_with("channel_enc.") || n.starts_with("channel_dec.")
        }));
        out
    }

    /// Whether `other` produces the same received rows: same architecture
    /// and identical transmitter and channel-decoder parameters.
    pub fn shares_transmitter(&self, other: &JsccModel<T>) -> bool {
        self.config == other.config
            && self.vocab_size == other.vocab_size
            && self
                .transmitter_params()
                .into_iter()
                .all(|id| self.params.get(id) == other.params.get(id))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        for &id in ids {
            if id >= self.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Embeds and encodes the stacked token rows of several sentences;
    /// each sentence attends only within itself.
    pub(crate) fn encode_rows(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        ids: &[usize],
        layout: &Layout,
        drop: &mut Dropout<'_>,
    ) -> Var {
        let emb = tape.gather(p[self.net.embed], ids);
        let pos = tape.constant(stacked_positions(&self.positions, &layout.lens));
        let mut z = tape.add(emb, pos);
        z = drop.apply(tape, z);
        let segs = layout.squares();
        for layer in &self.net.encoder {
            z = layer.forward(tape, p, z, &segs, drop);
        }
        z
    }

    /// Dense map to `2c` reals per row followed by per-row power
    /// normalization (unit mean power per complex symbol).
    pub(crate) fn channel_encode_rows(&self, tape: &mut Tape<'_, T>, p: &Bound, h: Var) -> Result<Var> {
        let x = self.net.channel_enc.forward(tape, p, h);
        let v = tape.value(x);
        for r in 0..v.rows() {
            if v.row(r).iter().all(|&a| a == T::zero()) {
                return Err(Error::ZeroBlock);
            }
        }
        let target = T::from_usize(self.config.channel_dim).unwrap().sqrt();
        Ok(tape.row_norm(x, target))
    }

    pub(crate) fn channel_decode_rows(&self, tape: &mut Tape<'_, T>, p: &Bound, y: Var) -> Var {
        self.net.channel_dec.forward(tape, p, y)
    }

    /// Knowledge rows for one sample from per-triple token ids: embedding
    /// mean per triple, optional mean across triples, projection.
    pub(crate) fn knowledge_rows(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        triple_ids: &[Vec<usize>],
    ) -> Option<Var> {
        let cap = match self.knowledge_layout {
            KnowledgeLayout::Tokens => self.config.max_len,
            _ => usize::MAX,
        };
        let triple_ids: Vec<&[usize]> = triple_ids
            .iter()
            .filter(|t| !t.is_empty())
            .map(|t| &t[..t.len().min(cap)])
            .collect();
        if triple_ids.is_empty() {
            return None;
        }
        let flat: Vec<usize> = triple_ids.iter().flat_map(|t| t.iter().copied()).collect();
        let layout = Layout::new(triple_ids.iter().map(|t| t.len()));
        let emb = tape.gather(p[self.net.embed], &flat);
        let rows = match self.knowledge_layout {
            KnowledgeLayout::Pooled => {
                let per_triple = tape.segment_mean(emb, &layout.ranges());
                tape.mean_rows(per_triple)
            }
            KnowledgeLayout::PerTriple => tape.segment_mean(emb, &layout.ranges()),
            KnowledgeLayout::Tokens => {
                let pos = tape.constant(stacked_positions(&self.positions, &layout.lens));
                tape.add(emb, pos)
            }
        };
        Some(self.net.knowledge_proj.forward(tape, p, rows))
    }

    /// Decoder pass over stacked input rows. `memory` stacks, per sentence,
    /// its received rows followed by its knowledge rows; `mem_lens[i]` is
    /// the total memory length of sentence `i`.
    pub(crate) fn decode_rows(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        input_ids: &[usize],
        layout: &Layout,
        memory: Var,
        mem_layout: &Layout,
        drop: &mut Dropout<'_>,
    ) -> Var {
        let emb = tape.gather(p[self.net.embed], input_ids);
        let pos = tape.constant(stacked_positions(&self.positions, &layout.lens));
        let mut z = tape.add(emb, pos);
        z = drop.apply(tape, z);
        let self_segs = layout.squares();
        let cross: Vec<Segment> = (0..layout.lens.len())
            .map(|i| Segment {
                q_start: layout.starts[i],
                q_len: layout.lens[i],
                k_start: mem_layout.starts[i],
                k_len: mem_layout.lens[i],
                k_valid: mem_layout.lens[i],
            })
            .collect();
        for layer in &self.net.decoder {
            z = layer.forward(tape, p, z, &self_segs, memory, &cross, drop);
        }
        self.net.out.forward(tape, p, z)
    }

    /// Teacher-forced cross-entropy of the whole codec over a noise-free
    /// channel, summed over target positions. `knowledge[i]` holds the
    /// triple token ids appended to sentence `i`'s memory.
    pub fn noiseless_loss(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        seqs: &[TokenSequence],
        knowledge: &[Vec<Vec<usize>>],
    ) -> Result<Var> {
        if knowledge.len() != seqs.len() {
            return Err(Error::Shape(format!("{} knowledge lists for {} sequences", knowledge.len(), seqs.len())));
        }
        let layout = Layout::new(seqs.iter().map(|s| s.true_length));
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.active().iter().copied()).collect();
        let h = self.encode_rows(tape, p, &ids, &layout, &mut Dropout::off());
        let x = self.channel_encode_rows(tape, p, h)?;
        let hh = self.channel_decode_rows(tape, p, x);
        let mut parts = Vec::new();
        let mut lens = Vec::new();
        for (i, (s, l)) in layout.ranges().into_iter().enumerate() {
            parts.push(tape.slice_rows(hh, s, l));
            let mut len = l;
            if let Some(k) = self.knowledge_rows(tape, p, &knowledge[i]) {
                len += tape.shape(k).0;
                parts.push(k);
            }
            lens.push(len);
        }
        let mem = tape.concat_rows(&parts);
        let dec = Layout::new(seqs.iter().map(|s| s.true_length - 1));
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for s in seqs {
            let (i, t) = teacher_forcing(s);
            inputs.extend_from_slice(i);
            targets.extend(t.iter().map(|&x| Some(x)));
        }
        let logits = self.decode_rows(tape, p, &inputs, &dec, mem, &Layout::new(lens), &mut Dropout::off());
        Ok(tape.cross_entropy(logits, &targets))
    }
}

/// Teacher-forced decoder inputs (`[start, w1..wn]`) and targets
/// (`[w1..wn, end]`) of a sequence.
pub(crate) fn teacher_forcing(s: &TokenSequence) -> (&[usize], &[usize]) {
    let a = s.active();
    (&a[..a.len() - 1], &a[1..])
}

/// Summed softmax cross-entropy over non-pad target positions.
/// `logits` has one row per sequence position; row `i` predicts token
/// `i + 1`.
pub fn sequence_loss(s: &TokenSequence, logits: &Tensor<f64>) -> Result<f64> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    if logits.rows() + 1 < s.true_length {
        return Err(Error::Shape(format!(
            "{} logit rows for a sequence of true length {}",
            logits.rows(),
            s.true_length
        )));
    }
    let mut targets = vec![None; logits.rows()];
    for (i, &t) in s.active()[1..].iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::TokenOutOfRange {
                id: t,
                size: logits.cols(),
            });
        }
        targets[i] = Some(t);
    }
    let mut tape = Tape::<f64>::new();
    let l = tape.constant_ref(logits);
    let loss = tape.cross_entropy(l, &targets);
    Ok(tape.value(loss).item())
}

impl JsccModel<f32> {
    /// Encoder output for every position of `s` (`N x d_model`); pad
    /// positions are masked as keys.
    pub fn semantic_encode(&self, s: &TokenSequence) -> Result<Tensor<f32>> {
        if s.len() != self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} differs from model length {}",
                s.len(),
                self.config.max_len
            )));
        }
        self.check_ids(&s.ids)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let layout = Layout::new([s.len()]);
        let emb = tape.gather(p[self.net.embed], &s.ids);
        let pos = tape.constant(self.positions.clone());
        let mut z = tape.add(emb, pos);
        let segs = [Segment {
            q_start: 0,
            q_len: layout.total,
            k_start: 0,
            k_len: layout.total,
            k_valid: s.true_length,
        }];
        let mut drop = Dropout::off();
        for layer in &self.net.encoder {
            z = layer.forward(&mut tape, &p, z, &segs, &mut drop);
        }
        Ok(tape.value(z).clone())
    }

    /// Per-token dense map to `c` complex symbols, then power
    /// normalization.
    pub fn channel_encode(&self, h: &Tensor<f32>) -> Result<SymbolBlock> {
        if h.cols() != self.config.d_model {
            return Err(Error::Shape(format!(
                "semantic representation has width {}, expected {}",
                h.cols(),
                self.config.d_model
            )));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let hv = tape.constant_ref(h);
        let x = self.channel_encode_rows(&mut tape, &p, hv)?;
        let reals: Vec<f64> = tape.value(x).data().iter().map(|&v| v as f64).collect();
        SymbolBlock::from_real_pairs(h.rows(), self.config.channel_dim, &reals)
    }

    /// Dense map from received symbols back to `d_model` reals per token.
    pub fn channel_decode(&self, y: &SymbolBlock) -> Result<Tensor<f32>> {
        let (rows, cols) = y.shape();
        if cols != self.config.channel_dim {
            return Err(Error::Shape(format!(
                "symbol block has {cols} symbols per token, expected {}",
                self.config.channel_dim
            )));
        }
        let reals: Vec<f32> = y.to_real_pairs().iter().map(|&v| v as f32).collect();
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let yv = tape.constant(Tensor::from_vec(rows, 2 * cols, reals));
        let out = self.channel_decode_rows(&mut tape, &p, yv);
        Ok(tape.value(out).clone())
    }

    /// Token ids of the rendered triple strings.
    pub fn triple_token_ids(triples: &[FactTriple], vocab: &Vocabulary) -> Vec<Vec<usize>> {
        triples.iter().map(|t| vocab.ids_of(&t.render())).collect()
    }

    /// Knowledge rows for a triple list (`n_k x d_model`); an empty list
    /// gives a zero row.
    pub fn knowledge_embed(&self, triples: &[FactTriple], vocab: &Vocabulary) -> Tensor<f32> {
        let ids = Self::triple_token_ids(triples, vocab);
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        match self.knowledge_rows(&mut tape, &p, &ids) {
            Some(k) => tape.value(k).clone(),
            None => Tensor::zeros(1, self.config.d_model),
        }
    }

    /// Transmitter plus channel for a batch: encodes every sentence,
    /// transmits its symbols (pad positions are not sent), equalizes and
    /// maps back to `d_model`.
    pub fn transmit_batch<R: Rng>(
        &self,
        seqs: &[&TokenSequence],
        channel: &ChannelConfig,
        rng: &mut R,
    ) -> Result<Vec<Received>> {
        let c = self.config.channel_dim;
        let layout = Layout::new(seqs.iter().map(|s| s.true_length));
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.active().iter().copied()).collect();
        self.check_ids(&ids)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let h = self.encode_rows(&mut tape, &p, &ids, &layout, &mut Dropout::off());
        let x = self.channel_encode_rows(&mut tape, &p, h)?;
        let xv = tape.value(x).clone();
        let mut received_reals = Vec::with_capacity(xv.len());
        for (start, len) in layout.ranges() {
            let block_reals: Vec<f64> = xv.slice_rows(start, len).data().iter().map(|&v| v as f64).collect();
            let block = SymbolBlock::from_real_pairs(len, c, &block_reals)?;
            let (y, hc) = channel::transmit(&block, channel, rng)?;
            let eq = channel::equalize(&y, hc)?;
            received_reals.extend(eq.to_real_pairs().iter().map(|&v| v as f32));
        }
        let yv = tape.constant(Tensor::from_vec(layout.total, 2 * c, received_reals));
        let h_hat = self.channel_decode_rows(&mut tape, &p, yv);
        let hv = tape.value(h_hat);
        Ok(layout
            .ranges()
            .into_iter()
            .map(|(s, l)| Received {
                h_hat: hv.slice_rows(s, l),
            })
            .collect())
    }

    /// Greedy autoregressive decoding of a batch. `knowledge[i]`, when
    /// present and non-zero, is appended to sentence `i`'s memory.
    pub fn decode_batch(
        &self,
        received: &[&Received],
        knowledge: &[Option<&Tensor<f32>>],
    ) -> Result<Vec<TokenSequence>> {
        assert_eq!(received.len(), knowledge.len(), "one knowledge slot per sentence");
        let n = self.config.max_len;
        let d = self.config.d_model;
        let mut mem_rows = Vec::new();
        let mut mem_lens = Vec::with_capacity(received.len());
        for (r, k) in received.iter().zip(knowledge) {
            if r.h_hat.cols() != d || r.valid_len() == 0 {
                return Err(Error::Shape(format!(
                    "received matrix is {}x{}, expected rows x {d}",
                    r.h_hat.rows(),
                    r.h_hat.cols()
                )));
            }
            mem_rows.extend_from_slice(r.h_hat.data());
            let mut len = r.valid_len();
            if let Some(k) = k.filter(|k| k.data().iter().any(|&v| v != 0.0)) {
                if k.cols() != d {
                    return Err(Error::Shape(format!("knowledge width {} != {d}", k.cols())));
                }
                mem_rows.extend_from_slice(k.data());
                len += k.rows();
            }
            mem_lens.push(len);
        }
        let mem_layout = Layout::new(mem_lens.iter().copied());
        let memory_t = Tensor::from_vec(mem_layout.total, d, mem_rows);

        let mut outputs: Vec<Vec<usize>> = vec![vec![Vocabulary::START_ID]; received.len()];
        let mut done = vec![false; received.len()];
        for _step in 1..n {
            let active: Vec<usize> = (0..received.len()).filter(|&i| !done[i]).collect();
            if active.is_empty() {
                break;
            }
            let layout = Layout::new(active.iter().map(|&i| outputs[i].len()));
            let ids: Vec<usize> = active.iter().flat_map(|&i| outputs[i].iter().copied()).collect();
            let sub_mem_layout = Layout::new(active.iter().map(|&i| mem_layout.lens[i]));
            let mut sub_mem = Vec::with_capacity(sub_mem_layout.total * d);
            for &i in &active {
                let (s, l) = (mem_layout.starts[i], mem_layout.lens[i]);
                sub_mem.extend_from_slice(&memory_t.data()[s * d..(s + l) * d]);
            }
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let mem = tape.constant(Tensor::from_vec(sub_mem_layout.total, d, sub_mem));
            let logits = self.decode_rows(&mut tape, &p, &ids, &layout, mem, &sub_mem_layout, &mut Dropout::off());
            let lv = tape.value(logits);
            for (j, &i) in active.iter().enumerate() {
                let row = lv.row(layout.starts[j] + layout.lens[j] - 1);
                let next = argmax(row);
                outputs[i].push(next);
                if next == Vocabulary::END_ID {
                    done[i] = true;
                }
            }
        }
        Ok(outputs
            .into_iter()
            .map(|mut ids| {
                let true_length = ids.len();
                ids.resize(n, Vocabulary::PAD_ID);
                TokenSequence { ids, true_length }
            })
            .collect())
    }

    /// Greedy decoding of one received sentence, optionally with knowledge
    /// rows appended to the memory. A zero `k` is treated as absent.
    pub fn semantic_decode(&self, received: &Received, k: Option<&Tensor<f32>>) -> Result<TokenSequence> {
        Ok(self.decode_batch(&[received], &[k])?.remove(0))
    }

    /// Teacher-forced logits for `s` given its received rows (one row per
    /// decoder input position).
    pub fn teacher_forced_logits(
        &self,
        s: &TokenSequence,
        received: &Received,
        k: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        let (input, _) = teacher_forcing(s);
        let mut mem = received.h_hat.clone();
        if let Some(k) = k.filter(|k| k.data().iter().any(|&v| v != 0.0)) {
            let mut rows = mem.into_vec();
            rows.extend_from_slice(k.data());
            mem = Tensor::from_vec(received.valid_len() + k.rows(), self.config.d_model, rows);
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let mem_layout = Layout::new([mem.rows()]);
        let memv = tape.constant(mem);
        let layout = Layout::new([input.len()]);
        let logits = self.decode_rows(&mut tape, &p, input, &layout, memv, &mem_layout, &mut Dropout::off());
        Ok(tape.value(logits).clone())
    }

    pub fn save(&self, dir: &Path, vocab: &Vocabulary, step: u64) -> Result<()> {
        checkpoint::save(
            dir,
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config)?,
            &vocab.hash(),
            step,
            &self.params,
            serde_json::json!({
                "vocab_size": self.vocab_size,
                "knowledge_layout": self.knowledge_layout,
            }),
        )?;
        Ok(())
    }

    /// Loads a checkpoint written by [`JsccModel::save`]; the vocabulary
    /// must be the one it was trained with.
    pub fn load(dir: &Path, vocab: &Vocabulary) -> Result<Self> {
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
        let config: ModelConfig = serde_json::from_value(m.config.clone())?;
        let mut model = JsccModel::new(config, vocab.size(), 0)?;
        if let Some(layout) = m.extra.get("knowledge_layout") {
            model.knowledge_layout = serde_json::from_value(layout.clone())?;
        }
        checkpoint::load_into(dir, &m, &mut model.params)?;
        Ok(model)
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Full transmitter-to-`ĥ` path for one sentence through the public
/// per-stage operations (all `N` positions are sent).
pub fn transmit_sentence<R: Rng>(
    model: &JsccModel<f32>,
    s: &TokenSequence,
    channel_cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<(Received, Complex64)> {
    let h = model.semantic_encode(s)?;
    let x = model.channel_encode(&h)?;
    let (y, hc) = channel::transmit(&x, channel_cfg, rng)?;
    let eq = channel::equalize(&y, hc)?;
    let h_hat = model.channel_decode(&eq)?;
    Ok((
        Received {
            h_hat: h_hat.slice_rows(0, s.true_length),
        },
        hc,
    ))
}

#[cfg(test)]
mod tests;
