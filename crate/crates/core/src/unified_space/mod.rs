//! Evolving knowledge-graph receiver: entities and channel-decoded signals
//! share one vector space, relevance is a distance test, and missing
//! relations between co-retrieved entities are predicted and written back
//! to the knowledge base.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, ChannelKind};
use crate::corpus::{render_name, DataPair, FactTriple, KnowledgeBase, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::jscc::{JsccModel, Layout, Received};
use crate::neural::checkpoint;
use crate::neural::{Adam, Bound, Dropout, EncoderLayer, Linear, ModelConfig, ParamId, ParamStore, Tape, Tensor, Var};

mod relpred;

pub use relpred::{train_relation_predictor, RelPredConfig, RelPredReport, RelationPredictor};

pub const CHECKPOINT_KIND: &str = "unified_space";
pub const DEFAULT_LAMBDA: f64 = 1.16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Euclidean,
    Cosine,
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" => Ok(DistanceKind::Euclidean),
            "cosine" => Ok(DistanceKind::Cosine),
            other => Err(Error::InvalidArgument(format!(
                "unknown distance kind {other:?} (expected euclidean or cosine)"
            ))),
        }
    }
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceKind::Euclidean => "euclidean",
            DistanceKind::Cosine => "cosine",
        })
    }
}

/// Euclidean or cosine distance between equal-length vectors.
pub fn distance(u: &[f32], v: &[f32], kind: DistanceKind) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("distance between {} and {} dims", u.len(), v.len())));
    }
    match kind {
        DistanceKind::Euclidean => Ok(u
            .iter()
            .zip(v)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()),
        DistanceKind::Cosine => {
            let nu = u.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
            let nv = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                return Err(Error::ZeroVector);
            }
            let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
            Ok((1.0 - dot / (nu * nv)).max(0.0))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpaceConfig {
    /// Dimension of the shared space.
    pub d: usize,
    pub distance: DistanceKind,
    /// Retrieval threshold; entities at distance `<= lambda` are retrieved.
    pub lambda: f64,
    /// Encoder layers in the signal mapper before pooling (0 = linear).
    pub mapper_layers: usize,
    /// Project both embeddings onto the unit sphere.
    pub normalize: bool,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            d: 128,
            distance: DistanceKind::Euclidean,
            lambda: DEFAULT_LAMBDA,
            mapper_layers: 0,
            normalize: true,
        }
    }
}

impl SpaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidArgument(format!("unified_space.d must be >= 2, got {}", self.d)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "unified_space.lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    /// Negatives per sample.
    pub k: usize,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_snr_db: f64,
    pub channel: ChannelKind,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            k: 63,
            tau: 0.2,
            lr: 1e-4,
            epochs: 20,
            batch_size: 32,
            train_snr_db: 0.0,
            channel: ChannelKind::Awgn,
            seed: 3,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("unified_space.k must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("unified_space.tau must be > 0, got {}", self.tau)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "unified_space.epochs and unified_space.batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Net {
    /// Frozen copy of the codec's token embeddings (compositional fallback).
    tokens: ParamId,
    /// One row per entity known at construction time.
    entities: ParamId,
    entity_proj: Linear,
    mapper: Vec<EncoderLayer>,
    signal_proj: Linear,
}

/// The shared space `U` with its entity embedder `F_e` and signal mapper
/// `F_h`.
#[derive(Debug, Clone)]
pub struct UnifiedSpace {
    pub config: SpaceConfig,
    pub d_model: usize,
    /// Codec shape the mapper layers follow.
    model: ModelConfig,
    /// Hash of the knowledge base the space was trained against.
    pub kb_hash: String,
    pub params: ParamStore<f32>,
    vocab: Vocabulary,
    entity_rows: HashMap<String, usize>,
    entity_names: Vec<String>,
    net: Net,
}

impl UnifiedSpace {
    /// Entity rows start at the mean codec embedding of the entity's
    /// rendered name; the signal mapper starts at random.
    pub fn new(config: SpaceConfig, jscc: &JsccModel<f32>, vocab: &Vocabulary, kb: &KnowledgeBase, seed: u64) -> Result<Self> {
        config.validate()?;
        let tokens = jscc.params.get(jscc.embed_param()).clone();
        Self::build(config, &jscc.config, tokens, vocab, kb.entities().to_vec(), kb.hash(), seed)
    }

    fn build(
        config: SpaceConfig,
        model: &ModelConfig,
        tokens: Tensor<f32>,
        vocab: &Vocabulary,
        entity_names: Vec<String>,
        kb_hash: String,
        seed: u64,
    ) -> Result<Self> {
        if entity_names.is_empty() {
            return Err(Error::InvalidArgument("knowledge base has no entities".into()));
        }
        if tokens.rows() != vocab.size() {
            return Err(Error::Shape(format!(
                "token table has {} rows, vocabulary has {}",
                tokens.rows(),
                vocab.size()
            )));
        }
        let dm = model.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut table = Tensor::zeros(entity_names.len(), dm);
        for (i, name) in entity_names.iter().enumerate() {
            let v = name_embedding(&tokens, vocab, name);
            table.row_mut(i).copy_from_slice(&v);
        }
        let tokens = p.add("tokens", tokens);
        let entities = p.add("entities", table);
        let entity_proj = Linear::new(&mut p, "entity_proj", dm, config.d, &mut rng);
        let mapper = (0..config.mapper_layers)
            .map(|l| EncoderLayer::new(&mut p, &format!("mapper.{l}"), model, &mut rng))
            .collect();
        let signal_proj = Linear::new(&mut p, "signal_proj", dm, config.d, &mut rng);
        let entity_rows = entity_names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(UnifiedSpace {
            config,
            d_model: dm,
            model: model.clone(),
            kb_hash,
            params: p,
            vocab: vocab.clone(),
            entity_rows,
            entity_names,
            net: Net {
                tokens,
                entities,
                entity_proj,
                mapper,
                signal_proj,
            },
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn vocab_hash(&self) -> String {
        self.vocab.hash()
    }

    /// Entities with a trained embedding row, in row order.
    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    /// Replaces the signal mapper's output affine map `(W_h, b_h)`.
    pub fn set_signal_affine(&mut self, w: Tensor<f32>, b: Tensor<f32>) -> Result<()> {
        let (wid, bid) = (self.net.signal_proj.w, self.net.signal_proj.b);
        if w.shape() != self.params.get(wid).shape() || b.shape() != self.params.get(bid).shape() {
            return Err(Error::Shape(format!(
                "W_h must be {:?} and b_h {:?}",
                self.params.get(wid).shape(),
                self.params.get(bid).shape()
            )));
        }
        *self.params.get_mut(wid) = w;
        *self.params.get_mut(bid) = b;
        Ok(())
    }

    /// Pre-projection entity rows: trained rows for known entities, the
    /// mean token embedding of the name otherwise.
    fn entity_inputs(&self, names: &[&str]) -> Tensor<f32> {
        let table = self.params.get(self.net.entities);
        let tokens = self.params.get(self.net.tokens);
        let mut out = Tensor::zeros(names.len(), self.d_model);
        for (i, name) in names.iter().enumerate() {
            match self.entity_rows.get(*name) {
                Some(&r) => out.row_mut(i).copy_from_slice(table.row(r)),
                None => out.row_mut(i).copy_from_slice(&name_embedding(tokens, &self.vocab, name)),
            }
        }
        out
    }

    fn finish(&self, tape: &mut Tape<'_, f32>, v: Var) -> Var {
        if self.config.normalize {
            tape.row_norm(v, 1.0)
        } else {
            v
        }
    }

    fn check_finish(&self, t: &Tensor<f32>) -> Result<()> {
        if self.config.normalize && (0..t.rows()).any(|r| t.row(r).iter().all(|&x| x == 0.0)) {
            return Err(Error::ZeroVector);
        }
        Ok(())
    }

    /// `F_e` on the tape for trained entity rows `rows` plus fixed inputs.
    fn entity_rows_on_tape(&self, tape: &mut Tape<'_, f32>, p: &Bound, rows: &[usize]) -> Var {
        let x = tape.gather(p[self.net.entities], rows);
        let v = self.net.entity_proj.forward(tape, p, x);
        self.finish(tape, v)
    }

    /// `F_h` on the tape for stacked received rows.
    fn signals_on_tape(&self, tape: &mut Tape<'_, f32>, p: &Bound, h: Var, layout: &Layout, drop: &mut Dropout<'_>) -> Var {
        let mut z = h;
        let segs = layout.squares();
        for layer in &self.net.mapper {
            z = layer.forward(tape, p, z, &segs, drop);
        }
        let pooled = tape.segment_mean(z, &layout.ranges());
        let v = self.net.signal_proj.forward(tape, p, pooled);
        self.finish(tape, v)
    }

    /// Summed InfoNCE over a batch: signals from stacked received rows `h`,
    /// candidates `cand_rows` (`per` entity rows per sentence, positive
    /// first).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn batch_infonce(
        &self,
        tape: &mut Tape<'_, f32>,
        p: &Bound,
        h: Var,
        layout: &Layout,
        cand_rows: &[usize],
        per: usize,
        tau: f64,
        drop: &mut Dropout<'_>,
    ) -> Var {
        let q = self.signals_on_tape(tape, p, h, layout, drop);
        let c = self.entity_rows_on_tape(tape, p, cand_rows);
        infonce_node(tape, q, c, per, tau)
    }

    /// `F_e` for named entities, one row each.
    pub fn embed_names(&self, names: &[&str]) -> Result<Tensor<f32>> {
        let x = self.entity_inputs(names);
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let raw = self.net.entity_proj.forward(&mut tape, &p, xv);
        self.check_finish(tape.value(raw))?;
        let v = self.finish(&mut tape, raw);
        Ok(tape.value(v).clone())
    }

    /// `v_e` for kb entity `e`.
    pub fn embed_entity(&self, e: usize, kb: &KnowledgeBase) -> Result<Vec<f32>> {
        let name = kb.entities().get(e).ok_or_else(|| Error::UnknownEntity(format!("entity id {e}")))?;
        Ok(self.embed_names(&[name])?.row(0).to_vec())
    }

    /// `v_e` for every kb entity, in kb order.
    pub fn entity_matrix(&self, kb: &KnowledgeBase) -> Result<Tensor<f32>> {
        let names: Vec<&str> = kb.entities().iter().map(String::as_str).collect();
        self.embed_names(&names)
    }

    /// `v_h` for a batch of received sentences.
    pub fn map_batch(&self, received: &[&Received]) -> Result<Tensor<f32>> {
        let layout = Layout::new(received.iter().map(|r| r.valid_len()));
        let mut rows = Vec::with_capacity(layout.total * self.d_model);
        for r in received {
            if r.h_hat.cols() != self.d_model || r.valid_len() == 0 {
                return Err(Error::Shape(format!(
                    "received matrix is {}x{}, expected rows x {}",
                    r.h_hat.rows(),
                    r.h_hat.cols(),
                    self.d_model
                )));
            }
            rows.extend_from_slice(r.h_hat.data());
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let h = tape.constant(Tensor::from_vec(layout.total, self.d_model, rows));
        let mut z = h;
        let segs = layout.squares();
        for layer in &self.net.mapper {
            z = layer.forward(&mut tape, &p, z, &segs, &mut Dropout::off());
        }
        let pooled = tape.segment_mean(z, &layout.ranges());
        let raw = self.net.signal_proj.forward(&mut tape, &p, pooled);
        self.check_finish(tape.value(raw))?;
        let v = self.finish(&mut tape, raw);
        Ok(tape.value(v).clone())
    }

    /// `v_h = F_h(h_hat)` for one received sentence.
    pub fn map_received(&self, received: &Received) -> Result<Vec<f32>> {
        Ok(self.map_batch(&[received])?.row(0).to_vec())
    }

    /// Entities within `lambda` of `v_h` (inclusive), in kb order.
    pub fn retrieve_entities(&self, v_h: &[f32], kb: &KnowledgeBase) -> Result<Vec<usize>> {
        let m = self.entity_matrix(kb)?;
        retrieve_from(v_h, &m, self.config.distance, self.config.lambda)
    }

    pub fn save(&self, dir: &Path, step: u64) -> Result<()> {
        checkpoint::save(
            dir,
            CHECKPOINT_KIND,
            serde_json::to_value(&self.config)?,
            &self.vocab.hash(),
            step,
            &self.params,
            serde_json::json!({
                "kb_hash": self.kb_hash,
                "model": self.model,
                "entities": self.entity_names,
            }),
        )?;
        Ok(())
    }

    /// Loads a space; unlike the extractor it tolerates a grown kb.
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
            return Err(Error::Checkpoint(format!("{} was trained with a different vocabulary", dir.display())));
        }
        let config: SpaceConfig = serde_json::from_value(m.config.clone())?;
        let field = |k: &str| {
            m.extra
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("{} manifest lacks {k}", dir.display())))
        };
        let model: ModelConfig = serde_json::from_value(field("model")?)?;
        let entities: Vec<String> = serde_json::from_value(field("entities")?)?;
        let kb_hash: String = serde_json::from_value(field("kb_hash")?)?;
        let mut space = Self::build(
            config,
            &model,
            Tensor::zeros(vocab.size(), model.d_model),
            vocab,
            entities,
            kb_hash,
            0,
        )?;
        checkpoint::load_into(dir, &m, &mut space.params)?;
        Ok(space)
    }
}

/// Mean token embedding of an entity's rendered name; unknown words map to
/// the unknown token.
fn name_embedding(tokens: &Tensor<f32>, vocab: &Vocabulary, name: &str) -> Vec<f32> {
    let ids = vocab.ids_of(&render_name(name));
    let mut out = vec![0.0f32; tokens.cols()];
    if ids.is_empty() {
        return out;
    }
    for &id in &ids {
        for (o, &x) in out.iter_mut().zip(tokens.row(id)) {
            *o += x;
        }
    }
    let n = ids.len() as f32;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Rows of `entities` within `lambda` of `v_h` by exhaustive scan.
pub fn retrieve_from(v_h: &[f32], entities: &Tensor<f32>, kind: DistanceKind, lambda: f64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for e in 0..entities.rows() {
        if distance(v_h, entities.row(e), kind)? <= lambda {
            out.push(e);
        }
    }
    Ok(out)
}

/// InfoNCE on the tape: `-ln softmax(v_h . [pos; negs] / tau)[0]` for each
/// query row. `cands` stacks `1 + K` rows per query, positive first.
pub fn infonce_node<T: crate::neural::Scalar>(
    tape: &mut Tape<'_, T>,
    queries: Var,
    cands: Var,
    per_query: usize,
    tau: f64,
) -> Var {
    let n = tape.shape(queries).0;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let q = tape.slice_rows(queries, i, 1);
        let c = tape.slice_rows(cands, i * per_query, per_query);
        rows.push(tape.matmul_nt(q, c));
    }
    let logits = tape.concat_rows(&rows);
    let scaled = tape.scale(logits, T::lit(1.0 / tau));
    tape.cross_entropy(scaled, &vec![Some(0); n])
}

/// InfoNCE for one query with a positive and `K` negatives, evaluated as
/// `ln(1 + sum_k exp(s_k - s_pos))` with the largest exponent factored out.
pub fn infonce_loss(v_h: &[f64], v_pos: &[f64], v_negs: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    if v_negs.is_empty() {
        return Err(Error::InvalidArgument("InfoNCE needs at least one negative".into()));
    }
    let d = v_h.len();
    if v_pos.len() != d || v_negs.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("InfoNCE vectors differ in dimension".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let s_pos = dot(v_h, v_pos) / tau;
    let gaps: Vec<f64> = v_negs.iter().map(|v| dot(v_h, v) / tau - s_pos).collect();
    let m = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m <= 0.0 {
        Ok(gaps.iter().map(|g| g.exp()).sum::<f64>().ln_1p())
    } else {
        Ok(m + ((-m).exp() + gaps.iter().map(|g| (g - m).exp()).sum::<f64>()).ln())
    }
}

/// Triples `{m}` for a retrieved entity set, evolving `kb` with predicted
/// relations for pairs it does not connect yet.
pub fn assemble_triples(
    entities: &[usize],
    kb: &mut KnowledgeBase,
    space: &UnifiedSpace,
    predictor: &RelationPredictor,
) -> Result<(Vec<FactTriple>, Vec<FactTriple>)> {
    let mut set: Vec<usize> = entities.to_vec();
    set.sort_unstable();
    set.dedup();
    if let Some(&e) = set.iter().find(|&&e| e >= kb.entities().len()) {
        return Err(Error::UnknownEntity(format!("entity id {e}")));
    }
    let mut m: Vec<FactTriple> = Vec::new();
    let mut new = Vec::new();
    if set.len() < 2 {
        return Ok((m, new));
    }
    let names: Vec<String> = set.iter().map(|&e| kb.entities()[e].clone()).collect();
    let emb = space.embed_names(&names.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut pending = Vec::new();
    for (i, &p) in set.iter().enumerate() {
        for (j, &q) in set.iter().enumerate() {
            if p == q {
                continue;
            }
            let existing = kb.triples_between(p, q);
            if existing.is_empty() {
                pending.push((i, j));
            } else {
                for &t in existing {
                    let t = kb.triple(t).clone();
                    if !m.contains(&t) {
                        m.push(t);
                    }
                }
            }
        }
    }
    let predicted = predictor.predict_pairs(&emb, &pending)?;
    for ((i, j), rel) in pending.into_iter().zip(predicted) {
        if let Some(r) = rel {
            let t = FactTriple::new(&names[i], &r, &names[j])?;
            if !kb.contains(&t) {
                kb.add(&t)?;
                new.push(t.clone());
            }
            if !m.contains(&t) {
                m.push(t);
            }
        }
    }
    Ok((m, new))
}

/// What the evolving receiver did for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolvingTrace {
    pub retrieved: Vec<String>,
    pub triples: Vec<FactTriple>,
    pub new_triples: Vec<FactTriple>,
}

/// Evolving-kb reception for a batch: map, retrieve entities, assemble and
/// grow triples, embed knowledge, decode. Sentences update `kb` in order.
pub fn receive_with_evolving_kg_batch(
    received: &[&Received],
    jscc: &JsccModel<f32>,
    space: &UnifiedSpace,
    predictor: &RelationPredictor,
    kb: &mut KnowledgeBase,
    vocab: &Vocabulary,
) -> Result<(Vec<TokenSequence>, Vec<EvolvingTrace>)> {
    if received.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let v_h = space.map_batch(received)?;
    let ents = space.entity_matrix(kb)?;
    let mut traces = Vec::with_capacity(received.len());
    let mut ks = Vec::with_capacity(received.len());
    for i in 0..received.len() {
        let retrieved = retrieve_from(v_h.row(i), &ents, space.config.distance, space.config.lambda)?;
        let (m, new) = assemble_triples(&retrieved, kb, space, predictor)?;
        ks.push((!m.is_empty()).then(|| jscc.knowledge_embed(&m, vocab)));
        traces.push(EvolvingTrace {
            retrieved: retrieved.iter().map(|&e| kb.entities()[e].clone()).collect(),
            triples: m,
            new_triples: new,
        });
    }
    let refs: Vec<Option<&Tensor<f32>>> = ks.iter().map(Option::as_ref).collect();
    Ok((jscc.decode_batch(received, &refs)?, traces))
}

/// Evolving-kb reception of one sentence.
pub fn receive_with_evolving_kg(
    received: &Received,
    jscc: &JsccModel<f32>,
    space: &UnifiedSpace,
    predictor: &RelationPredictor,
    kb: &mut KnowledgeBase,
    vocab: &Vocabulary,
) -> Result<(TokenSequence, EvolvingTrace)> {
    let (mut s, mut t) = receive_with_evolving_kg_batch(&[received], jscc, space, predictor, kb, vocab)?;
    Ok((s.remove(0), t.remove(0)))
}

#[derive(Debug, Clone)]
pub struct SpaceReport {
    pub space: UnifiedSpace,
    /// Mean InfoNCE per sample, one entry per epoch.
    pub epoch_losses: Vec<f64>,
}

pub const TRAIN_LOG: &str = "unified_space_log.csv";

/// `1 + K` candidate entity rows for one sample: a random gold entity then
/// `K` entities outside the gold set, without replacement when possible.
fn sample_candidates(gold: &[usize], n_entities: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(1 + k);
    out.push(gold[rng.random_range(0..gold.len())]);
    let pool: Vec<usize> = (0..n_entities).filter(|e| !gold.contains(e)).collect();
    if pool.is_empty() {
        return out;
    }
    if pool.len() >= k {
        out.extend(index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]));
    } else {
        out.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
    }
    out
}

/// Contrastive training of the space against the frozen
/// transmitter and channel. With `init`, continues from that space.
#[allow(clippy::too_many_arguments)]
pub fn train_unified_space(
    jscc: &JsccModel<f32>,
    pairs: &[DataPair],
    kb: &KnowledgeBase,
    vocab: &Vocabulary,
    space_cfg: &SpaceConfig,
    cfg: &ContrastiveConfig,
    init: Option<UnifiedSpace>,
    out_dir: Option<&Path>,
) -> Result<SpaceReport> {
    cfg.validate()?;
    let mut space = match init {
        Some(s) => s,
        None => UnifiedSpace::new(space_cfg.clone(), jscc, vocab, kb, cfg.seed)?,
    };
    let mut usable = Vec::with_capacity(pairs.len());
    let mut golds = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let mut g: Vec<usize> = p
            .gold_entities
            .iter()
            .filter_map(|e| space.entity_rows.get(e).copied())
            .collect();
        g.sort_unstable();
        if g.is_empty() {
            log::warn!("skipping training pair {i}: no gold entities in the knowledge base");
            continue;
        }
        usable.push(i);
        golds.push(g);
    }
    if usable.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let k = cfg.k.min(space.entity_names.len().saturating_sub(1)).max(1);
    let per = 1 + k;
    let channel = ChannelConfig::new(cfg.channel, cfg.train_snr_db, cfg.seed)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut neg_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
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
    let n_entities = space.entity_names.len();
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<&TokenSequence> = chunk.iter().map(|&u| &pairs[usable[u]].tokens).collect();
            let received = jscc.transmit_batch(&seqs, &channel, &mut noise_rng)?;
            let mut cand_rows = Vec::with_capacity(chunk.len() * per);
            for &u in chunk {
                let c = sample_candidates(&golds[u], n_entities, k, &mut neg_rng);
                debug_assert_eq!(c.len(), per);
                cand_rows.extend(c);
            }
            let grads = {
                let mut tape = Tape::new();
                let p = space.params.bind(&mut tape);
                let layout = Layout::new(received.iter().map(Received::valid_len));
                let mut rows = Vec::with_capacity(layout.total * space.d_model);
                for r in &received {
                    rows.extend_from_slice(r.h_hat.data());
                }
                let h = tape.constant(Tensor::from_vec(layout.total, space.d_model, rows));
                let mut drop = Dropout::train(jscc.config.dropout, &mut drop_rng);
                let loss = space.batch_infonce(&mut tape, &p, h, &layout, &cand_rows, per, cfg.tau, &mut drop);
                let value = tape.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                total += value;
                // The token table never enters the tape, so its gradient is
                // zero and Adam leaves it untouched.
                let mut g = tape.backward(loss);
                space.params.collect_grads(&p, &mut g)
            };
            adam.step(&mut space.params, &grads)?;
        }
        let mean = total / usable.len() as f64;
        log::info!("train-unified-space epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
        if let Some(w) = &mut log {
            w.write_record([epoch.to_string(), format!("{mean:.6}")])?;
            w.flush()?;
        }
    }
    if let Some(dir) = out_dir {
        space.save(&dir.join("checkpoint"), adam.steps_taken())?;
    }
    Ok(SpaceReport { space, epoch_losses })
}

/// One sentence for [`dump_embeddings`].
#[derive(Debug, Clone)]
pub struct EmbeddingSample {
    pub name: String,
    pub v_h: Vec<f32>,
    pub gold_entities: Vec<String>,
}

/// Writes `tag,name,x0..x{d-1}` rows: one per sample (`sample`) and one per
/// kb entity (`related` when some sample names it as gold, else
/// `irrelevant`).
pub fn dump_embeddings(space: &UnifiedSpace, kb: &KnowledgeBase, samples: &[EmbeddingSample], path: &Path) -> Result<()> {
    let d = space.d();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["tag".to_string(), "name".to_string()];
    header.extend((0..d).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    let fmt_row = |tag: &str, name: &str, v: &[f32]| {
        let mut r = vec![tag.to_string(), name.to_string()];
        r.extend(v.iter().map(|x| format!("{x:.6}")));
        r
    };
    for s in samples {
        if s.v_h.len() != d {
            return Err(Error::Shape(format!("sample vector has {} dims, space has {d}", s.v_h.len())));
        }
        w.write_record(fmt_row("sample", &s.name, &s.v_h))?;
    }
    let related: std::collections::HashSet<&str> =
        samples.iter().flat_map(|s| s.gold_entities.iter().map(String::as_str)).collect();
    let m = space.entity_matrix(kb)?;
    for (e, name) in kb.entities().iter().enumerate() {
        let tag = if related.contains(name.as_str()) { "related" } else { "irrelevant" };
        w.write_record(fmt_row(tag, name, m.row(e)))?;
    }
    w.flush()?;
    Ok(())
}
