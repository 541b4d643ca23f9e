//! Data-text corpora, vocabulary, token sequences and the knowledge base.

pub mod kb;
pub mod synth;
pub mod vocab;

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kb::{canonical_name, render_name, FactTriple, KnowledgeBase};
pub use vocab::{normalize_text, tokenize, Vocabulary};

use crate::error::{Error, Result};

/// Fixed-length token rendering of a sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// Number of non-pad positions (markers included).
    pub true_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn active(&self) -> &[usize] {
        &self.ids[..self.true_length]
    }
}

/// Tokenizes, maps to ids, wraps in start/end markers and pads or truncates
/// to `n`. Truncation keeps the end marker.
pub fn encode_text(text: &str, vocab: &Vocabulary, n: usize) -> Result<TokenSequence> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "sequence length must be >= 3, got {n}"
        )));
    }
    let words = tokenize(text);
    if words.is_empty() {
        return Err(Error::EmptyText);
    }
    let keep = words.len().min(n - 2);
    let mut ids = Vec::with_capacity(n);
    ids.push(Vocabulary::START_ID);
    ids.extend(words[..keep].iter().map(|w| vocab.id(w)));
    ids.push(Vocabulary::END_ID);
    let true_length = ids.len();
    ids.resize(n, Vocabulary::PAD_ID);
    Ok(TokenSequence { ids, true_length })
}

/// Surface text of a token sequence without start, end or pad markers.
pub fn decode_tokens(tokens: &[usize], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::new();
    for &id in tokens {
        let w = vocab.token(id).ok_or(Error::TokenOutOfRange {
            id,
            size: vocab.size(),
        })?;
        if matches!(
            id,
            Vocabulary::START_ID | Vocabulary::END_ID | Vocabulary::PAD_ID
        ) {
            continue;
        }
        words.push(w);
    }
    Ok(words.join(" "))
}

/// One data-text record.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPair {
    pub text: String,
    pub tokens: TokenSequence,
    pub gold_triples: Vec<FactTriple>,
    pub gold_entities: BTreeSet<String>,
}

impl DataPair {
    pub fn new(text: &str, triples: Vec<FactTriple>, vocab: &Vocabulary, n: usize) -> Result<Self> {
        let tokens = encode_text(text, vocab, n)?;
        let mut gold_triples: Vec<FactTriple> = Vec::with_capacity(triples.len());
        for t in triples {
            if !gold_triples.contains(&t) {
                gold_triples.push(t);
            }
        }
        let gold_entities = entities_of(&gold_triples);
        Ok(DataPair {
            text: text.to_string(),
            tokens,
            gold_triples,
            gold_entities,
        })
    }

    /// Reference text in normalized token form (what decoding can reproduce).
    pub fn reference(&self) -> String {
        normalize_text(&self.text)
    }
}

pub fn entities_of(triples: &[FactTriple]) -> BTreeSet<String> {
    triples
        .iter()
        .flat_map(|t| [t.head.clone(), t.tail.clone()])
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<DataPair>,
    pub test: Vec<DataPair>,
}

/// A loaded corpus: the split plus the vocabulary built from its train half.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub split: CorpusSplit,
    pub max_len: usize,
}

/// Corpus loading policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Fixed token-sequence length N.
    pub max_len: usize,
    pub min_freq: usize,
    /// Share of records held out when the file carries no "split" field.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            max_len: 32,
            min_freq: 1,
            test_fraction: 0.1,
            seed: 7,
        }
    }
}

/// Raw record as read from a corpus file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub text: String,
    pub triples: Vec<FactTriple>,
    pub split: Option<String>,
}

/// Parses a JSON-lines corpus. Blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<RawRecord>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let obj = v
            .as_object()
            .ok_or_else(|| err("record must be a JSON object".into()))?;
        let text = obj
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| err("missing string field \"text\"".into()))?;
        if tokenize(text).is_empty() {
            return Err(err("field \"text\" is empty".into()));
        }
        let arr = obj
            .get("triples")
            .and_then(|t| t.as_array())
            .ok_or_else(|| err("missing array field \"triples\"".into()))?;
        let triples = arr
            .iter()
            .map(kb::parse_triple_value)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(err)?;
        let split = match obj.get("split") {
            None => None,
            Some(s) => match s.as_str() {
                Some(s @ ("train" | "test")) => Some(s.to_string()),
                _ => return Err(err(format!("split must be \"train\" or \"test\", found {s}"))),
            },
        };
        out.push(RawRecord {
            text: text.to_string(),
            triples,
            split,
        });
    }
    Ok(out)
}

/// Loads a corpus file into a train/test split with a train-only
/// vocabulary.
pub fn load_corpus(path: &Path, cfg: &CorpusConfig) -> Result<Corpus> {
    let records = read_records(path)?;
    corpus_from_records(records, cfg)
}

/// Splits records (honoring explicit "split" fields, otherwise a seeded
/// shuffle), drops test records whose text also occurs in train, and builds
/// the vocabulary from train texts plus train triple renderings.
pub fn corpus_from_records(records: Vec<RawRecord>, cfg: &CorpusConfig) -> Result<Corpus> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if !(0.0..1.0).contains(&cfg.test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "corpus.test_fraction must be in [0, 1), got {}",
            cfg.test_fraction
        )));
    }
    let explicit = records.iter().any(|r| r.split.is_some());
    let (mut train, mut test): (Vec<RawRecord>, Vec<RawRecord>) = if explicit {
        records
            .into_iter()
            .partition(|r| r.split.as_deref() != Some("test"))
    } else {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let n_test = (records.len() as f64 * cfg.test_fraction).round() as usize;
        let test_ids: HashSet<usize> = order[..n_test].iter().copied().collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, r) in records.into_iter().enumerate() {
            if test_ids.contains(&i) {
                test.push(r);
            } else {
                train.push(r);
            }
        }
        (train, test)
    };
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let train_texts: HashSet<String> = train.iter().map(|r| normalize_text(&r.text)).collect();
    test.retain(|r| !train_texts.contains(&normalize_text(&r.text)));

    let mut streams: Vec<Vec<String>> = train.iter().map(|r| tokenize(&r.text)).collect();
    for r in &train {
        for t in &r.triples {
            streams.push(tokenize(&t.render()));
        }
    }
    let vocab = Vocabulary::build(streams.iter().map(Vec::as_slice), cfg.min_freq);
    let to_pairs = |rs: &mut Vec<RawRecord>| -> Result<Vec<DataPair>> {
        rs.drain(..)
            .map(|r| DataPair::new(&r.text, r.triples, &vocab, cfg.max_len))
            .collect()
    };
    let split = CorpusSplit {
        train: to_pairs(&mut train)?,
        test: to_pairs(&mut test)?,
    };
    Ok(Corpus {
        vocab,
        split,
        max_len: cfg.max_len,
    })
}

/// Writes records as corpus JSON lines (with a "split" field when set).
pub fn write_records(path: &Path, records: &[RawRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        let mut obj = serde_json::json!({
            "text": r.text,
            "triples": r.triples.iter().map(|t| t.as_array()).collect::<Vec<_>>(),
        });
        if let Some(s) = &r.split {
            obj["split"] = serde_json::Value::String(s.clone());
        }
        serde_json::to_writer(&mut f, &obj)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Union of the gold triples of `pairs`, first-seen order.
pub fn kb_build(pairs: &[DataPair]) -> Result<KnowledgeBase> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(KnowledgeBase::from_triples(
        pairs.iter().flat_map(|p| &p.gold_triples),
    ))
}

pub fn kb_add(kb: &mut KnowledgeBase, triple: &FactTriple) -> Result<usize> {
    kb.add(triple)
}

/// Multi-hot label vector over the knowledge base.
pub fn labels_for(pair: &DataPair, kb: &KnowledgeBase) -> Result<Vec<f32>> {
    let mut labels = vec![0.0; kb.n_t()];
    for t in &pair.gold_triples {
        let i = kb
            .index_of(t)
            .ok_or_else(|| Error::MissingTriple(t.to_string()))?;
        labels[i] = 1.0;
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn vocab_of(texts: &[&str]) -> Vocabulary {
        let streams: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
        Vocabulary::build(streams.iter().map(Vec::as_slice), 1)
    }

    #[test]
    fn hello_is_padded() {
        let v = vocab_of(&["hello ."]);
        let s = encode_text("Hello.", &v, 8).unwrap();
        let (h, dot) = (v.id("hello"), v.id("."));
        assert_eq!(s.ids, vec![1, h, dot, 2, 0, 0, 0, 0]);
        assert_eq!(s.true_length, 4);
    }

    #[test]
    fn long_text_is_truncated() {
        let text = (0..100).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let v = vocab_of(&[&text]);
        let s = encode_text(&text, &v, 30).unwrap();
        assert_eq!(s.true_length, 30);
        assert_eq!(s.ids[29], Vocabulary::END_ID);
    }

    #[test]
    fn oov_maps_to_unknown_and_decodes_to_its_surface_form() {
        let v = vocab_of(&["a b"]);
        let s = encode_text("a zebra", &v, 6).unwrap();
        assert_eq!(s.ids[2], Vocabulary::UNKNOWN_ID);
        assert_eq!(decode_tokens(&s.ids, &v).unwrap(), "a <unk>");
    }

    #[test]
    fn encode_rejects_empty_and_short() {
        let v = vocab_of(&["a"]);
        assert!(matches!(encode_text("  ", &v, 8), Err(Error::EmptyText)));
        assert!(encode_text("a", &v, 2).is_err());
    }

    #[test]
    fn decode_round_trip_and_edge_cases() {
        let v = vocab_of(&["The cat, the hat."]);
        let s = encode_text("The cat, the hat.", &v, 16).unwrap();
        assert_eq!(decode_tokens(&s.ids, &v).unwrap(), "the cat , the hat .");
        assert_eq!(decode_tokens(&[0, 0, 0], &v).unwrap(), "");
        assert!(matches!(
            decode_tokens(&[v.size()], &v),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn record_gives_derived_entities() {
        let f = write(&[r#"{"text":"a b","triples":[["a","r","b"]]}"#]);
        let c = load_corpus(
            f.path(),
            &CorpusConfig {
                test_fraction: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let p = &c.split.train[0];
        assert_eq!(p.gold_entities, ["a", "b"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn malformed_records_name_their_line() {
        let f = write(&[
            r#"{"text":"a b","triples":[]}"#,
            r#"{"text":"c","triples":[["a","r"]]}"#,
        ]);
        let e = load_corpus(f.path(), &CorpusConfig::default()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let f = write(&[r#"{"triples":[]}"#]);
        assert!(matches!(
            load_corpus(f.path(), &CorpusConfig::default()),
            Err(Error::Parse { line: 1, .. })
        ));
        let f = write(&[""]);
        assert!(matches!(
            load_corpus(f.path(), &CorpusConfig::default()),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn explicit_split_is_honored_and_disjoint() {
        let f = write(&[
            r#"{"text":"a b","triples":[["a","r","b"]],"split":"train"}"#,
            r#"{"text":"c d","triples":[["c","r","d"]],"split":"test"}"#,
            r#"{"text":"A  b","triples":[],"split":"test"}"#,
        ]);
        let c = load_corpus(f.path(), &CorpusConfig::default()).unwrap();
        assert_eq!(c.split.train.len(), 1);
        assert_eq!(c.split.test.len(), 1);
        assert!(!c.vocab.contains("c"));
        assert!(c.vocab.contains("r"));
    }

    #[test]
    fn seeded_split_is_deterministic() {
        let lines: Vec<String> = (0..50)
            .map(|i| format!(r#"{{"text":"s{i} x","triples":[["e{i}","r","x"]]}}"#))
            .collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let f = write(&refs);
        let a = load_corpus(f.path(), &CorpusConfig::default()).unwrap();
        let b = load_corpus(f.path(), &CorpusConfig::default()).unwrap();
        assert_eq!(a.split, b.split);
        assert_eq!(a.split.test.len(), 5);
        assert_eq!(a.vocab, b.vocab);
    }

    fn pair(triples: &[(&str, &str, &str)], v: &Vocabulary) -> DataPair {
        let ts = triples
            .iter()
            .map(|(h, r, t)| FactTriple::new(h, r, t).unwrap())
            .collect();
        DataPair::new("x", ts, v, 8).unwrap()
    }

    #[test]
    fn kb_build_dedups_and_labels_follow_positions() {
        let v = vocab_of(&["x"]);
        let p1 = pair(&[("a", "r", "b"), ("b", "r", "c")], &v);
        let p2 = pair(&[("b", "r", "c"), ("c", "s", "d"), ("d", "s", "e")], &v);
        let kb = kb_build(&[p1.clone(), p2.clone()]).unwrap();
        assert_eq!(kb.n_t(), 4);
        assert_eq!(labels_for(&p1, &kb).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(labels_for(&p2, &kb).unwrap(), vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(labels_for(&pair(&[], &v), &kb).unwrap(), vec![0.0; 4]);
        let stale = pair(&[("z", "r", "y")], &v);
        assert!(matches!(labels_for(&stale, &kb), Err(Error::MissingTriple(_))));
    }
}
