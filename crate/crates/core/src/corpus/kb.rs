//! Fact triples and the indexed knowledge base.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neural::checkpoint::hex;

/// Canonical surface form: trimmed, inner whitespace collapsed, spaces
/// replaced by underscores ("Ayam penyet" and "Ayam_penyet" are the same
/// entity).
pub fn canonical_name(s: &str) -> String {
    s.replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
}

/// Human-readable rendering of a canonical name: underscores become spaces
/// and camelCase relation names are split ("birthPlace" -> "birth place").
pub fn render_name(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 4);
    let mut prev_lower = false;
    for ch in s.chars() {
        if ch == '_' {
            out.push(' ');
            prev_lower = false;
            continue;
        }
        if ch.is_uppercase() && prev_lower {
            out.push(' ');
        }
        prev_lower = ch.is_lowercase() || ch.is_ascii_digit();
        out.push(ch);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl FactTriple {
    /// Builds a canonicalized triple; every field must be non-empty after
    /// normalization.
    pub fn new(head: &str, relation: &str, tail: &str) -> Result<Self> {
        let t = FactTriple {
            head: canonical_name(head),
            relation: canonical_name(relation),
            tail: canonical_name(tail),
        };
        if t.head.is_empty() || t.relation.is_empty() || t.tail.is_empty() {
            return Err(Error::InvalidTriple(format!(
                "({head:?}, {relation:?}, {tail:?}) has an empty field"
            )));
        }
        Ok(t)
    }

    /// "head relation tail" with names rendered for tokenization.
    pub fn render(&self) -> String {
        format!(
            "{} {} {}",
            render_name(&self.head),
            render_name(&self.relation),
            render_name(&self.tail)
        )
    }

    pub fn as_array(&self) -> [&str; 3] {
        [&self.head, &self.relation, &self.tail]
    }
}

impl fmt::Display for FactTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({} | {} | {})", self.head, self.relation, self.tail)
    }
}

/// Ordered, deduplicated triple store. A triple's position is its label
/// index for the extractor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KnowledgeBase {
    triples: Vec<FactTriple>,
    entities: Vec<String>,
    relations: Vec<String>,
    triple_index: HashMap<FactTriple, usize>,
    entity_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
    pair_index: HashMap<(usize, usize), Vec<usize>>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Union of `triples` in first-seen order.
    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a FactTriple>) -> Self {
        let mut kb = Self::new();
        for t in triples {
            kb.insert(t.clone());
        }
        kb
    }

    pub fn n_t(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[FactTriple] {
        &self.triples
    }

    pub fn triple(&self, i: usize) -> &FactTriple {
        &self.triples[i]
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn index_of(&self, t: &FactTriple) -> Option<usize> {
        self.triple_index.get(t).copied()
    }

    pub fn contains(&self, t: &FactTriple) -> bool {
        self.triple_index.contains_key(t)
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_index.get(name).copied()
    }

    /// Indexes of triples whose head is entity `p` and tail is entity `q`.
    pub fn triples_between(&self, p: usize, q: usize) -> &[usize] {
        self.pair_index
            .get(&(p, q))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Adds `triple` unless already present; returns its index either way.
    pub fn add(&mut self, triple: &FactTriple) -> Result<usize> {
        let t = FactTriple::new(&triple.head, &triple.relation, &triple.tail)?;
        Ok(self.insert(t))
    }

    fn insert(&mut self, t: FactTriple) -> usize {
        if let Some(&i) = self.triple_index.get(&t) {
            return i;
        }
        let h = self.intern_entity(&t.head);
        let tl = self.intern_entity(&t.tail);
        if !self.relation_index.contains_key(&t.relation) {
            self.relation_index
                .insert(t.relation.clone(), self.relations.len());
            self.relations.push(t.relation.clone());
        }
        let i = self.triples.len();
        self.pair_index.entry((h, tl)).or_default().push(i);
        self.triple_index.insert(t.clone(), i);
        self.triples.push(t);
        i
    }

    fn intern_entity(&mut self, name: &str) -> usize {
        if let Some(&i) = self.entity_index.get(name) {
            return i;
        }
        let i = self.entities.len();
        self.entity_index.insert(name.to_string(), i);
        self.entities.push(name.to_string());
        i
    }

    /// SHA-256 over the ordered triple list; binds trained classifiers to
    /// the label layout they were trained against.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.triples {
            for f in t.as_array() {
                h.update(f.as_bytes());
                h.update([0u8]);
            }
            h.update(b"\n");
        }
        hex(&h.finalize())
    }

    /// Writes one `[head, relation, tail]` JSON array per line.
    pub fn export_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for t in &self.triples {
            serde_json::to_writer(&mut f, &t.as_array())?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    /// Reads a knowledge base written by [`KnowledgeBase::export_jsonl`].
    /// Lines holding a corpus record (`{"triples": [...]}`) are accepted too.
    pub fn import_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut kb = Self::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message,
            };
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let arrays = match &value {
                serde_json::Value::Array(_) => vec![value.clone()],
                serde_json::Value::Object(o) => match o.get("triples") {
                    Some(serde_json::Value::Array(a)) => a.clone(),
                    _ => return Err(err("expected a \"triples\" array".into())),
                },
                _ => return Err(err("expected a triple array".into())),
            };
            for a in &arrays {
                let t = parse_triple_value(a).map_err(err)?;
                kb.insert(t);
            }
        }
        Ok(kb)
    }
}

pub(crate) fn parse_triple_value(v: &serde_json::Value) -> std::result::Result<FactTriple, String> {
    let arr = v
        .as_array()
        .ok_or_else(|| format!("triple must be an array, found {v}"))?;
    if arr.len() != 3 {
        return Err(format!("triple must have 3 elements, found {}", arr.len()));
    }
    let mut fields = Vec::with_capacity(3);
    for x in arr {
        fields.push(
            x.as_str()
                .ok_or_else(|| format!("triple element must be a string, found {x}"))?,
        );
    }
    FactTriple::new(fields[0], fields[1], fields[2]).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(h: &str, r: &str, tl: &str) -> FactTriple {
        FactTriple::new(h, r, tl).unwrap()
    }

    #[test]
    fn underscore_and_space_forms_are_one_entity() {
        assert_eq!(t("Ayam_penyet", "country", "Java"), t(" Ayam  penyet ", "country", "Java"));
        assert!(FactTriple::new("a", "  ", "b").is_err());
        assert!(FactTriple::new("_", "r", "b").is_err());
    }

    #[test]
    fn render_splits_camel_case_and_underscores() {
        assert_eq!(render_name("birthPlace"), "birth Place");
        assert_eq!(render_name("Ayam_penyet"), "Ayam penyet");
        assert_eq!(t("Ayam_penyet", "mainIngredient", "Fried_chicken").render(), "Ayam penyet main Ingredient Fried chicken");
    }

    #[test]
    fn add_is_idempotent() {
        let mut kb = KnowledgeBase::new();
        assert_eq!(kb.add(&t("a", "r", "b")).unwrap(), 0);
        assert_eq!(kb.n_t(), 1);
        let before = kb.clone();
        assert_eq!(kb.add(&t("a", "r", "b")).unwrap(), 0);
        assert_eq!(kb, before);
        assert_eq!(kb.add(&t("a", "r", "c")).unwrap(), 1);
        assert_eq!(kb.entities(), &["a", "b", "c"]);
        assert_eq!(kb.triples_between(0, 2), &[1]);
        assert!(kb.triples_between(2, 0).is_empty());
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let kb = KnowledgeBase::from_triples(&[t("x", "r", "y"), t("y", "s", "z")]);
        kb.export_jsonl(&path).unwrap();
        let back = KnowledgeBase::import_jsonl(&path).unwrap();
        assert_eq!(back, kb);
        assert_eq!(back.hash(), kb.hash());
    }

    #[test]
    fn hash_depends_on_order() {
        let a = KnowledgeBase::from_triples(&[t("x", "r", "y"), t("y", "s", "z")]);
        let b = KnowledgeBase::from_triples(&[t("y", "s", "z"), t("x", "r", "y")]);
        assert_ne!(a.hash(), b.hash());
    }
}
