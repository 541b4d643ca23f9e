//! Layered run configuration: defaults < TOML file < `--set key=value`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentConfig;
use crate::channel::ChannelKind;
use crate::corpus::synth::SynthConfig;
use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::evaluation::SweepConfig;
use crate::extractor::ExtractorConfig;
use crate::jscc::TrainConfig;
use crate::neural::ModelConfig;
use crate::unified_space::{ContrastiveConfig, RelPredConfig, SpaceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthScale {
    Desk,
    Micro,
}

/// Synthetic corpus used by `prepare-data` when no input file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub scale: SynthScale,
    pub n_pairs: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            scale: SynthScale::Desk,
            n_pairs: 2000,
            seed: 11,
        }
    }
}

impl SynthSection {
    /// The generator settings; the held-out share follows
    /// `corpus.test_fraction`.
    pub fn synth_config(&self, test_fraction: f64) -> SynthConfig {
        let mut cfg = match self.scale {
            SynthScale::Desk => SynthConfig::default(),
            SynthScale::Micro => SynthConfig::micro(self.n_pairs, self.seed),
        };
        cfg.n_pairs = self.n_pairs;
        cfg.seed = self.seed;
        cfg.test_fraction = test_fraction;
        cfg
    }
}

/// Channel defaults shared by every training section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelSection {
    pub kind: ChannelKind,
    pub train_snr_db: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            kind: ChannelKind::Awgn,
            train_snr_db: 0.0,
        }
    }
}

/// Receiver fine-tuning on extractor-selected knowledge, run by
/// `train-extractor` when `epochs > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub lr: f64,
    pub knowledge_prob: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            epochs: 0,
            lr: 5e-4,
            knowledge_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DumpSection {
    /// Test sentences embedded by `dump-embeddings`.
    pub samples: usize,
}

impl Default for DumpSection {
    fn default() -> Self {
        DumpSection { samples: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub synth: SynthSection,
    pub channel: ChannelSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneSection,
    pub extractor: ExtractorConfig,
    pub unified_space: SpaceConfig,
    pub contrastive: ContrastiveConfig,
    pub relpred: RelPredConfig,
    pub sweep: SweepConfig,
    pub augment: AugmentConfig,
    pub dump: DumpSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 1,
            corpus: CorpusConfig::default(),
            synth: SynthSection::default(),
            channel: ChannelSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneSection::default(),
            extractor: ExtractorConfig::default(),
            unified_space: SpaceConfig::default(),
            contrastive: ContrastiveConfig::default(),
            relpred: RelPredConfig::default(),
            sweep: SweepConfig::default(),
            augment: AugmentConfig::default(),
            dump: DumpSection::default(),
        };
        cfg.derive(&BTreeMap::new());
        cfg
    }
}

/// Keys filled from other keys unless set explicitly, with the seed offset
/// where the source is the global seed.
const SEED_KEYS: [(&str, u64); 7] = [
    ("corpus.seed", 0),
    ("train.seed", 1),
    ("extractor.seed", 2),
    ("contrastive.seed", 3),
    ("relpred.seed", 4),
    ("sweep.seed", 5),
    ("synth.seed", 10),
];

impl RunConfig {
    /// Derived keys: per-section seeds from `seed`, channel settings from
    /// `channel.*`, and `model.max_len` from `corpus.max_len`.
    fn derive(&mut self, explicit: &BTreeMap<String, Value>) {
        let set = |k: &str| explicit.contains_key(k);
        for (key, offset) in SEED_KEYS {
            if set(key) {
                continue;
            }
            let s = self.seed.wrapping_add(offset);
            match key {
                "corpus.seed" => self.corpus.seed = s,
                "train.seed" => self.train.seed = s,
                "extractor.seed" => self.extractor.seed = s,
                "contrastive.seed" => self.contrastive.seed = s,
                "relpred.seed" => self.relpred.seed = s,
                "sweep.seed" => self.sweep.seed = s,
                "synth.seed" => self.synth.seed = s,
                _ => unreachable!(),
            }
        }
        let kind = self.channel.kind;
        let snr = self.channel.train_snr_db;
        if !set("train.channel") {
            self.train.channel = kind;
        }
        if !set("train.train_snr_db") {
            self.train.train_snr_db = snr;
        }
        if !set("extractor.channel") {
            self.extractor.channel = kind;
        }
        if !set("extractor.train_snr_db") {
            self.extractor.train_snr_db = snr;
        }
        if !set("contrastive.channel") {
            self.contrastive.channel = kind;
        }
        if !set("contrastive.train_snr_db") {
            self.contrastive.train_snr_db = snr;
        }
        if !set("sweep.channel") {
            self.sweep.channel = kind;
        }
        self.model.max_len = self.corpus.max_len;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.extractor.validate()?;
        self.unified_space.validate()?;
        self.contrastive.validate()?;
        self.relpred.validate()?;
        self.sweep.validate()?;
        self.augment.validate()?;
        if self.unified_space.d < 2 {
            return Err(Error::Config("unified_space.d must be >= 2".into()));
        }
        Ok(())
    }

    /// Merges `file` then `sets` over the defaults. Every key must name an
    /// existing setting.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut explicit = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
            explicit.extend(parse_toml_keys(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?);
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
            explicit.insert(k.trim().to_string(), parse_scalar(v.trim()));
        }
        Self::from_explicit(explicit)
    }

    pub fn from_explicit(explicit: BTreeMap<String, Value>) -> Result<Self> {
        let mut base = RunConfig::default();
        if let Some(Value::Number(n)) = explicit.get("seed") {
            base.seed = n
                .as_u64()
                .ok_or_else(|| Error::Config("seed must be a non-negative integer".into()))?;
            base.derive(&BTreeMap::new());
        }
        let mut tree = serde_json::to_value(&base)?;
        let mut known = BTreeMap::new();
        flatten("", &tree, &mut known);
        let corpus_len = explicit
            .get("corpus.max_len")
            .cloned()
            .unwrap_or_else(|| Value::from(base.corpus.max_len));
        for (k, v) in &explicit {
            if k == "model.max_len" {
                if *v != corpus_len {
                    return Err(Error::Config("model.max_len follows corpus.max_len; set that instead".into()));
                }
                continue;
            }
            if !known.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            set_path(&mut tree, k, v.clone());
        }
        let mut cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid configuration value: {e}")))?;
        cfg.derive(&explicit);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full configuration as TOML; unset optional keys are omitted.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Every key as a flat dotted map; re-resolving it gives `self` back.
    pub fn to_flat(&self) -> Result<BTreeMap<String, Value>> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        out.retain(|k, v| !v.is_null() && k != "model.max_len");
        Ok(out)
    }
}

fn parse_toml_keys(text: &str) -> std::result::Result<BTreeMap<String, Value>, String> {
    let table: toml::Table = toml::from_str(text).map_err(|e| e.to_string())?;
    let json = serde_json::to_value(table).map_err(|e| e.to_string())?;
    let mut out = BTreeMap::new();
    flatten("", &json, &mut out);
    Ok(out)
}

/// A TOML scalar or array; anything else is taken as a bare string.
fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn set_path(tree: &mut Value, key: &str, v: Value) {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .expect("known keys have object parents")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut()
        .expect("known keys have object parents")
        .insert(parts[parts.len() - 1].to_string(), v);
}
