//! Relation prediction between two embedded entities.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::UnifiedSpace;
use crate::corpus::KnowledgeBase;
use crate::error::{Error, Result};
use crate::neural::checkpoint;
use crate::neural::tape::log_sum_exp;
use crate::neural::{Adam, Bound, Linear, ParamStore, Tape, Tensor, Var};

pub const CHECKPOINT_KIND: &str = "relpred";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelPredConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RelPredConfig {
    fn default() -> Self {
        RelPredConfig {
            hidden: 128,
            lr: 1e-3,
            epochs: 100,
            batch_size: 64,
            seed: 4,
        }
    }
}

impl RelPredConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "relpred.hidden, relpred.epochs and relpred.batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Two-layer classifier over `[v_p; v_q]` with one label per relation plus a
/// final "no relation" label.
#[derive(Debug, Clone)]
pub struct RelationPredictor {
    pub relations: Vec<String>,
    pub d: usize,
    pub hidden: usize,
    pub params: ParamStore<f32>,
    pub(super) l1: Linear,
    pub(super) l2: Linear,
}

impl RelationPredictor {
    pub fn new(relations: Vec<String>, d: usize, hidden: usize, seed: u64) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("relation predictor dimensions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let l1 = Linear::new(&mut p, "relpred.hidden", 2 * d, hidden, &mut rng);
        let l2 = Linear::new(&mut p, "relpred.out", hidden, relations.len() + 1, &mut rng);
        Ok(RelationPredictor {
            relations,
            d,
            hidden,
            params: p,
            l1,
            l2,
        })
    }

    /// Index of the "no relation" label.
    pub fn none_label(&self) -> usize {
        self.relations.len()
    }

    /// Zeroes the output layer so every label ties.
    pub fn zero_output(&mut self) {
        let (r, c) = self.params.get(self.l2.w).shape();
        *self.params.get_mut(self.l2.w) = Tensor::zeros(r, c);
        *self.params.get_mut(self.l2.b) = Tensor::zeros(1, c);
    }

    fn logits(&self, tape: &mut Tape<'_, f32>, p: &Bound, x: Var) -> Var {
        let h = self.l1.forward(tape, p, x);
        let h = tape.relu(h);
        self.l2.forward(tape, p, h)
    }

    fn pair_inputs(&self, emb: &Tensor<f32>, pairs: &[(usize, usize)]) -> Result<Tensor<f32>> {
        if emb.cols() != self.d {
            return Err(Error::Shape(format!("entity embeddings have {} dims, predictor expects {}", emb.cols(), self.d)));
        }
        let mut x = Tensor::zeros(pairs.len(), 2 * self.d);
        for (r, &(i, j)) in pairs.iter().enumerate() {
            if i >= emb.rows() || j >= emb.rows() {
                return Err(Error::UnknownEntity(format!("embedding row {}", i.max(j))));
            }
            let row = x.row_mut(r);
            row[..self.d].copy_from_slice(emb.row(i));
            row[self.d..].copy_from_slice(emb.row(j));
        }
        Ok(x)
    }

    /// Label distributions for ordered pairs of rows of `emb`.
    pub fn probabilities(&self, emb: &Tensor<f32>, pairs: &[(usize, usize)]) -> Result<Vec<Vec<f64>>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.pair_inputs(emb, pairs)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let l = self.logits(&mut tape, &p, xv);
        let lv = tape.value(l);
        Ok((0..lv.rows())
            .map(|r| {
                let row: Vec<f64> = lv.row(r).iter().map(|&v| v as f64).collect();
                let z = log_sum_exp(&row);
                row.iter().map(|v| (v - z).exp()).collect()
            })
            .collect())
    }

    /// Argmax label per pair (lowest index wins ties); `None` when the
    /// "no relation" label wins.
    pub fn predict_pairs(&self, emb: &Tensor<f32>, pairs: &[(usize, usize)]) -> Result<Vec<Option<String>>> {
        Ok(self
            .probabilities(emb, pairs)?
            .into_iter()
            .map(|probs| {
                let mut best = 0;
                for (i, &v) in probs.iter().enumerate() {
                    if v > probs[best] {
                        best = i;
                    }
                }
                self.relations.get(best).cloned()
            })
            .collect())
    }

    /// Predicted relation from kb entity `p` to kb entity `q`.
    pub fn predict_relation(&self, p: usize, q: usize, kb: &KnowledgeBase, space: &UnifiedSpace) -> Result<Option<String>> {
        let names = kb.entities();
        let (np, nq) = match (names.get(p), names.get(q)) {
            (Some(a), Some(b)) => (a.as_str(), b.as_str()),
            _ => return Err(Error::UnknownEntity(format!("entity id {}", if names.get(p).is_none() { p } else { q }))),
        };
        let emb = space.embed_names(&[np, nq])?;
        Ok(self.predict_pairs(&emb, &[(0, 1)])?.remove(0))
    }

    pub fn save(&self, dir: &Path, vocab_hash: &str, kb_hash: &str, step: u64, cfg: &RelPredConfig) -> Result<()> {
        checkpoint::save(
            dir,
            CHECKPOINT_KIND,
            serde_json::to_value(cfg)?,
            vocab_hash,
            step,
            &self.params,
            serde_json::json!({
                "relations": self.relations,
                "d": self.d,
                "kb_hash": kb_hash,
            }),
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = checkpoint::read_manifest(dir)?;
        if m.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} checkpoint, expected {CHECKPOINT_KIND}",
                dir.display(),
                m.kind
            )));
        }
        let cfg: RelPredConfig = serde_json::from_value(m.config.clone())?;
        let relations: Vec<String> = serde_json::from_value(m.extra.get("relations").cloned().unwrap_or_default())?;
        let d: usize = serde_json::from_value(m.extra.get("d").cloned().unwrap_or_default())?;
        let mut pred = RelationPredictor::new(relations, d, cfg.hidden, 0)?;
        checkpoint::load_into(dir, &m, &mut pred.params)?;
        Ok(pred)
    }
}

#[derive(Debug, Clone)]
pub struct RelPredReport {
    pub predictor: RelationPredictor,
    pub epoch_losses: Vec<f64>,
}

/// Trains on every kb triple as a positive plus as many uniformly drawn
/// unlinked ordered pairs labelled "no relation", resampled each epoch.
/// Entity embeddings come from the (fixed) space.
pub fn train_relation_predictor(
    space: &UnifiedSpace,
    kb: &KnowledgeBase,
    cfg: &RelPredConfig,
    out_dir: Option<&Path>,
) -> Result<RelPredReport> {
    cfg.validate()?;
    if kb.is_empty() {
        return Err(Error::InvalidArgument("knowledge base is empty".into()));
    }
    let emb = space.entity_matrix(kb)?;
    let relations: Vec<String> = kb.relations().to_vec();
    let mut pred = RelationPredictor::new(relations, space.d(), cfg.hidden, cfg.seed)?;
    let none = pred.none_label();
    let positives: Vec<(usize, usize, usize)> = kb
        .triples()
        .iter()
        .map(|t| {
            (
                kb.entity_id(&t.head).expect("kb entity"),
                kb.entity_id(&t.tail).expect("kb entity"),
                kb.relation_id(&t.relation).expect("kb relation"),
            )
        })
        .collect();
    let n_e = kb.entities().len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut samples = positives.clone();
        let mut attempts = 0;
        let want = positives.len();
        while samples.len() < 2 * want && attempts < 100 * want {
            attempts += 1;
            let p = rng.random_range(0..n_e);
            let q = rng.random_range(0..n_e);
            if p != q && kb.triples_between(p, q).is_empty() {
                samples.push((p, q, none));
            }
        }
        samples.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in samples.chunks(cfg.batch_size) {
            let pairs: Vec<(usize, usize)> = chunk.iter().map(|&(p, q, _)| (p, q)).collect();
            let targets: Vec<Option<usize>> = chunk.iter().map(|&(_, _, r)| Some(r)).collect();
            let x = pred.pair_inputs(&emb, &pairs)?;
            let grads = {
                let mut tape = Tape::new();
                let p = pred.params.bind(&mut tape);
                let xv = tape.constant(x);
                let l = pred.logits(&mut tape, &p, xv);
                let loss = tape.cross_entropy(l, &targets);
                let value = tape.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                total += value;
                let mut g = tape.backward(loss);
                pred.params.collect_grads(&p, &mut g)
            };
            adam.step(&mut pred.params, &grads)?;
        }
        let mean = total / samples.len() as f64;
        log::debug!("train-relpred epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
    }
    log::info!(
        "train-relpred: {} epochs, final loss {:.4}",
        cfg.epochs,
        epoch_losses.last().copied().unwrap_or_default()
    );
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(TRAIN_LOG))?;
        w.write_record(["epoch", "loss"])?;
        for (i, l) in epoch_losses.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{l:.6}")])?;
        }
        w.flush()?;
        pred.save(&dir.join("checkpoint"), &space.vocab_hash(), &kb.hash(), adam.steps_taken(), cfg)?;
    }
    Ok(RelPredReport {
        predictor: pred,
        epoch_losses,
    })
}

pub const TRAIN_LOG: &str = "relpred_log.csv";
