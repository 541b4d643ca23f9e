use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use crate::corpus::tokenize;
use crate::error::{Error, Result};

/// Unigram BLEU with clipped counts and brevity penalty
/// `exp(min(0, 1 - |ref| / |hyp|))`.
pub fn bleu1<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *ref_counts.entry(w.as_ref()).or_default() += 1;
    }
    let mut hyp_counts: HashMap<&str, usize> = HashMap::new();
    for w in hypothesis {
        *hyp_counts.entry(w.as_ref()).or_default() += 1;
    }
    let matched: usize = hyp_counts
        .iter()
        .map(|(w, &c)| c.min(ref_counts.get(w).copied().unwrap_or(0)))
        .sum();
    let precision = matched as f64 / hypothesis.len() as f64;
    let bp = (1.0 - reference.len() as f64 / hypothesis.len() as f64)
        .min(0.0)
        .exp();
    precision * bp
}

/// [`bleu1`] over tokenized strings.
pub fn bleu1_text(reference: &str, hypothesis: &str) -> f64 {
    bleu1(&tokenize(reference), &tokenize(hypothesis))
}

/// Sentence-level semantic similarity in `[-1, 1]`.
pub trait SimilarityScorer: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, sentence: &str) -> Result<Vec<f64>>;

    fn score(&self, reference: &str, hypothesis: &str) -> Result<f64> {
        let a = self.embed(reference)?;
        let b = self.embed(hypothesis)?;
        Ok(cosine_similarity(&a, &b))
    }
}

fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Deterministic fallback: cosine of term-frequency vectors.
#[derive(Debug, Clone, Copy, Default)]
pub struct TfCosine;

impl SimilarityScorer for TfCosine {
    fn name(&self) -> &str {
        "tf-cosine"
    }

    fn embed(&self, _sentence: &str) -> Result<Vec<f64>> {
        Err(Error::InvalidArgument(
            "tf-cosine compares sentence pairs directly".into(),
        ))
    }

    fn score(&self, reference: &str, hypothesis: &str) -> Result<f64> {
        let a = tokenize(reference);
        let b = tokenize(hypothesis);
        if a == b {
            return Ok(1.0);
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        for w in a.iter().chain(&b) {
            let n = index.len();
            index.entry(w.as_str()).or_insert(n);
        }
        let mut va = vec![0.0; index.len()];
        let mut vb = vec![0.0; index.len()];
        for w in &a {
            va[index[w.as_str()]] += 1.0;
        }
        for w in &b {
            vb[index[w.as_str()]] += 1.0;
        }
        Ok(cosine_similarity(&va, &vb))
    }
}

/// Placeholder for an external sentence-embedding model; always reports
/// itself unavailable.
#[derive(Debug, Clone)]
pub struct ExternalScorer {
    pub model: String,
}

impl SimilarityScorer for ExternalScorer {
    fn name(&self) -> &str {
        &self.model
    }

    fn embed(&self, _sentence: &str) -> Result<Vec<f64>> {
        Err(Error::ScorerUnavailable(format!(
            "sentence-embedding model {:?} is not available in this build; \
             set sweep.similarity = \"tf-cosine\" to use the built-in fallback",
            self.model
        )))
    }
}

/// Builds a scorer from its configured name.
pub fn scorer_by_name(name: &str) -> Box<dyn SimilarityScorer> {
    match name {
        "tf-cosine" | "fallback" => Box::new(TfCosine),
        other => Box::new(ExternalScorer {
            model: other.to_string(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Precision was undefined (nothing predicted) and reported as 1.0.
    pub precision_undefined: bool,
    /// Recall was undefined (nothing gold) and reported as 1.0.
    pub recall_undefined: bool,
}

/// Set precision and recall; empty sides follow the 1.0-with-flag
/// convention.
pub fn precision_recall<T: Eq + Hash>(predicted: &[T], gold: &[T]) -> PrecisionRecall {
    let p: HashSet<&T> = predicted.iter().collect();
    let g: HashSet<&T> = gold.iter().collect();
    let hit = p.intersection(&g).count() as f64;
    PrecisionRecall {
        precision: if p.is_empty() { 1.0 } else { hit / p.len() as f64 },
        recall: if g.is_empty() { 1.0 } else { hit / g.len() as f64 },
        precision_undefined: p.is_empty(),
        recall_undefined: g.is_empty(),
    }
}

/// Micro-averaged precision/recall accumulator over many sentences.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PrCounts {
    pub hits: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl PrCounts {
    pub fn add<T: Eq + Hash>(&mut self, predicted: &[T], gold: &[T]) {
        let p: HashSet<&T> = predicted.iter().collect();
        let g: HashSet<&T> = gold.iter().collect();
        self.hits += p.intersection(&g).count();
        self.predicted += p.len();
        self.gold += g.len();
    }

    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            1.0
        } else {
            self.hits as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.gold == 0 {
            1.0
        } else {
            self.hits as f64 / self.gold as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu1(&toks("a b c"), &toks("a b c")), 1.0);
        assert_eq!(bleu1(&toks("a b c d"), &toks("a b x y")), 0.5);
        assert_eq!(bleu1(&toks("a b"), &toks("c d")), 0.0);
        assert_eq!(bleu1(&toks("a b"), &[] as &[String]), 0.0);
    }

    #[test]
    fn bleu_clips_and_penalizes_brevity() {
        // "the the the" vs "the cat": clipped matches 1 of 3.
        assert!((bleu1(&toks("the cat"), &toks("the the the")) - 1.0 / 3.0).abs() < 1e-12);
        // hyp shorter: precision 1, BP = exp(1 - 4/2).
        let b = bleu1(&toks("a b c d"), &toks("a b"));
        assert!((b - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn tf_cosine_examples() {
        let s = TfCosine;
        assert_eq!(s.score("the cat sat", "the cat sat").unwrap(), 1.0);
        assert_eq!(s.score("a b", "c d").unwrap(), 0.0);
        assert!((s.score("a b", "a c").unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn external_scorer_reports_unavailable() {
        let e = scorer_by_name("sentence-bert").score("a", "a").unwrap_err();
        assert!(matches!(e, Error::ScorerUnavailable(_)));
        assert!(e.to_string().contains("tf-cosine"));
    }

    #[test]
    fn precision_recall_examples() {
        let pr = precision_recall(&["a", "b"], &["a", "b"]);
        assert_eq!((pr.precision, pr.recall), (1.0, 1.0));
        let pr = precision_recall(&["a", "b"], &["b", "c"]);
        assert_eq!((pr.precision, pr.recall), (0.5, 0.5));
        let pr = precision_recall::<&str>(&[], &["x"]);
        assert_eq!((pr.precision, pr.recall), (1.0, 0.0));
        assert!(pr.precision_undefined && !pr.recall_undefined);
    }

    proptest! {
        #[test]
        fn bleu_is_invariant_under_relabeling(
            r in proptest::collection::vec(0u8..6, 1..10),
            h in proptest::collection::vec(0u8..6, 0..10),
            shift in 1u8..6,
        ) {
            let name = |x: &u8| format!("w{x}");
            let relabel = |x: &u8| format!("v{}", (x + shift) % 6);
            let a = bleu1(&r.iter().map(name).collect::<Vec<_>>(), &h.iter().map(name).collect::<Vec<_>>());
            let b = bleu1(&r.iter().map(relabel).collect::<Vec<_>>(), &h.iter().map(relabel).collect::<Vec<_>>());
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn perfect_scores_iff_equal_sets(
            p in proptest::collection::btree_set(0u8..8, 0..6),
            g in proptest::collection::btree_set(0u8..8, 1..6),
        ) {
            let p: Vec<u8> = p.into_iter().collect();
            let g: Vec<u8> = g.into_iter().collect();
            let pr = precision_recall(&p, &g);
            prop_assert_eq!(pr.precision == 1.0 && pr.recall == 1.0, p == g);
        }
    }
}
