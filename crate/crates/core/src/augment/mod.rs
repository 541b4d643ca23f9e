//! Knowledge-base augmentation through a language-model service: prompt for
//! triples, parse the reply, merge into the knowledge base.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FactTriple, KnowledgeBase};
use crate::error::{Error, Result};

/// Environment variable holding the bearer token for the remote service.
/// Tokens are never read from configuration files.
pub const TOKEN_ENV: &str = "SEMCOM_LLM_TOKEN";

/// The line format every reply must follow.
pub const GRAMMAR: &str = "Write one triple per line in the form (head | relation | tail).";

pub trait LlmClient: Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockFixture {
    pub prompt_contains: String,
    pub response: String,
}

/// Offline client answering from fixtures: the first fixture whose
/// `prompt_contains` occurs in the prompt wins.
#[derive(Debug, Clone, Default)]
pub struct MockClient {
    pub fixtures: Vec<MockFixture>,
}

impl MockClient {
    pub fn new(fixtures: Vec<MockFixture>) -> Self {
        MockClient { fixtures }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut fixtures = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: MockFixture = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            fixtures.push(f);
        }
        Ok(MockClient { fixtures })
    }
}

impl LlmClient for MockClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.fixtures
            .iter()
            .find(|f| prompt.contains(&f.prompt_contains))
            .map(|f| f.response.clone())
            .ok_or_else(|| Error::Llm("no mock fixture matches the prompt".into()))
    }
}

pub fn write_fixtures(path: &Path, fixtures: &[MockFixture]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for f in fixtures {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Chat-completions client for an OpenAI-compatible endpoint.
#[derive(Debug, Clone)]
pub struct RemoteClient {
    pub endpoint: String,
    pub model_name: String,
    pub timeout: Duration,
    pub attempts: usize,
    pub backoff: Duration,
    token: Option<String>,
}

impl RemoteClient {
    /// Reads the token from [`TOKEN_ENV`]; an unset variable means no
    /// `Authorization` header.
    pub fn from_env(endpoint: &str, model_name: &str, timeout: Duration) -> Self {
        RemoteClient {
            endpoint: endpoint.to_string(),
            model_name: model_name.to_string(),
            timeout,
            attempts: 3,
            backoff: Duration::from_millis(500),
            token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        }
    }

    fn attempt(&self, agent: &ureq::Agent, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model_name,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = agent.post(&self.endpoint);
        if let Some(t) = &self.token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        let resp = req.send_json(body).map_err(|e| Error::Llm(e.to_string()))?;
        let v: serde_json::Value = resp.into_json().map_err(|e| Error::Llm(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Llm("response has no choices[0].message.content".into()))
    }
}

impl LlmClient for RemoteClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let mut last = Error::Llm("no attempt made".into());
        for i in 0..self.attempts.max(1) {
            if i > 0 {
                std::thread::sleep(self.backoff * (1 << (i - 1)));
            }
            match self.attempt(&agent, prompt) {
                Ok(s) => return Ok(s),
                Err(e) => {
                    log::warn!("language-model call failed (attempt {}): {e}", i + 1);
                    last = e;
                }
            }
        }
        Err(last)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub endpoint: Option<String>,
    pub model_name: String,
    pub timeout_s: f64,
    pub concurrency: usize,
    pub mock_fixtures: Option<PathBuf>,
    /// Share of kb triples dropped before augmenting, for recovery
    /// experiments.
    pub omit_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            endpoint: None,
            model_name: "gpt-3.5-turbo".into(),
            timeout_s: 30.0,
            concurrency: 4,
            mock_fixtures: None,
            omit_fraction: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            return Err(Error::InvalidArgument("augment.concurrency must be >= 1".into()));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(Error::InvalidArgument("augment.timeout_s must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.omit_fraction) {
            return Err(Error::InvalidArgument("augment.omit_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The mock client when fixtures are configured, otherwise the remote
    /// one.
    pub fn client(&self) -> Result<Box<dyn LlmClient>> {
        self.validate()?;
        match (&self.mock_fixtures, &self.endpoint) {
            (Some(path), _) => Ok(Box::new(MockClient::load(path)?)),
            (None, Some(endpoint)) if !endpoint.trim().is_empty() => Ok(Box::new(RemoteClient::from_env(
                endpoint,
                &self.model_name,
                Duration::from_secs_f64(self.timeout_s),
            ))),
            _ => Err(Error::Config(
                "augment needs either augment.endpoint or augment.mock_fixtures".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            instruction: "Identify the named entities in the sentence below and the relations that \
                          hold between them. Report each fact as a knowledge-graph triple whose \
                          head and tail are entities and whose relation is a short camelCase verb \
                          phrase. Use only facts stated in the sentence."
                .into(),
        }
    }
}

pub fn build_prompt(text: &str, template: &PromptTemplate) -> Result<String> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(format!("{}\n{GRAMMAR}\n\nSentence: {text}\nTriples:", template.instruction))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedResponse {
    pub triples: Vec<FactTriple>,
    /// 1-based line numbers and contents of malformed triple lines.
    pub malformed: Vec<(usize, String)>,
    /// Set when nothing could be parsed.
    pub failed: bool,
}

fn strip_list_marker(line: &str) -> &str {
    let l = line.trim_start_matches(['-', '*', '•']).trim_start();
    match l.find(['.', ')']) {
        Some(i) if i > 0 && l[..i].bytes().all(|b| b.is_ascii_digit()) => l[i + 1..].trim_start(),
        _ => l,
    }
}

fn parse_line(line: &str) -> std::result::Result<FactTriple, String> {
    let inner = line
        .strip_prefix('(')
        .and_then(|l| l.trim_end().strip_suffix(')'))
        .ok_or_else(|| "missing closing parenthesis".to_string())?;
    let fields: Vec<String> = inner
        .split('|')
        .map(|f| f.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 fields, found {}", fields.len()));
    }
    FactTriple::new(&fields[0], &fields[1], &fields[2]).map_err(|e| e.to_string())
}

/// Lines of the form `(head | relation | tail)`, optionally behind a list
/// marker, become triples; other prose is ignored.
pub fn parse_triples(response: &str) -> ParsedResponse {
    let mut out = ParsedResponse::default();
    for (i, raw) in response.lines().enumerate() {
        let line = strip_list_marker(raw.trim());
        if !line.starts_with('(') {
            continue;
        }
        match parse_line(line) {
            Ok(t) => out.triples.push(t),
            Err(msg) => {
                log::debug!("line {}: {msg}: {raw}", i + 1);
                out.malformed.push((i + 1, raw.to_string()));
            }
        }
    }
    out.failed = out.triples.is_empty();
    out
}

/// Renders triples in the reply grammar, one per line.
pub fn render_triples(triples: &[FactTriple]) -> String {
    triples.iter().map(|t| format!("{t}\n")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct AugmentReport {
    pub n_texts: usize,
    pub n_responses_ok: usize,
    /// Responses with a malformed triple line or nothing parseable.
    pub n_parse_failures: usize,
    pub n_new_triples: usize,
    pub n_duplicate_triples: usize,
    /// Indexes of texts whose client call failed.
    pub failed_texts: Vec<usize>,
}

/// Prompts for every text (up to `concurrency` calls in flight), then
/// merges replies in input order. Existing triples are never touched.
pub fn augment_knowledge_base(
    texts: &[String],
    client: &dyn LlmClient,
    kb: &mut KnowledgeBase,
    template: &PromptTemplate,
    concurrency: usize,
) -> Result<AugmentReport> {
    if concurrency == 0 {
        return Err(Error::InvalidArgument("augment.concurrency must be >= 1".into()));
    }
    let prompts: Vec<String> = texts.iter().map(|t| build_prompt(t, template)).collect::<Result<_>>()?;
    let mut report = AugmentReport {
        n_texts: texts.len(),
        ..Default::default()
    };
    let mut index = 0;
    for chunk in prompts.chunks(concurrency) {
        let replies: Vec<Result<String>> = if chunk.len() == 1 {
            vec![client.complete(&chunk[0])]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|p| s.spawn(move || client.complete(p))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Llm("client call panicked".into()))))
                    .collect()
            })
        };
        for reply in replies {
            match reply {
                Ok(text) => {
                    report.n_responses_ok += 1;
                    let parsed = parse_triples(&text);
                    if parsed.failed || !parsed.malformed.is_empty() {
                        report.n_parse_failures += 1;
                    }
                    for t in &parsed.triples {
                        if kb.contains(t) {
                            report.n_duplicate_triples += 1;
                        } else {
                            kb.add(t)?;
                            report.n_new_triples += 1;
                        }
                    }
                }
                Err(e) => {
                    log::warn!("text {index}: {e}");
                    report.failed_texts.push(index);
                }
            }
            index += 1;
        }
    }
    log::info!(
        "augment: {} texts, {} replies, {} parse failures, {} new triples, {} duplicates",
        report.n_texts,
        report.n_responses_ok,
        report.n_parse_failures,
        report.n_new_triples,
        report.n_duplicate_triples
    );
    Ok(report)
}

/// Splits `kb` into a knowledge base missing a seeded random `fraction` of
/// its triples and the omitted triples. Kept triples keep their order.
pub fn omit_triples(kb: &KnowledgeBase, fraction: f64, seed: u64) -> Result<(KnowledgeBase, Vec<FactTriple>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument("omission fraction must lie in [0, 1]".into()));
    }
    let n = kb.n_t();
    let n_omit = (fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut omit = vec![false; n];
    for &i in &idx[..n_omit] {
        omit[i] = true;
    }
    let kept = KnowledgeBase::from_triples(kb.triples().iter().enumerate().filter(|(i, _)| !omit[*i]).map(|(_, t)| t));
    let omitted = kb.triples().iter().enumerate().filter(|(i, _)| omit[*i]).map(|(_, t)| t.clone()).collect();
    Ok((kept, omitted))
}

/// Share of `omitted` present in `kb` (1 when nothing was omitted).
pub fn recovery_rate(kb: &KnowledgeBase, omitted: &[FactTriple]) -> f64 {
    if omitted.is_empty() {
        return 1.0;
    }
    omitted.iter().filter(|t| kb.contains(t)).count() as f64 / omitted.len() as f64
}

/// One fixture per text answering with its triples in the reply grammar.
pub fn fixtures_from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a [FactTriple])>) -> Vec<MockFixture> {
    pairs
        .into_iter()
        .map(|(text, triples)| MockFixture {
            prompt_contains: format!("Sentence: {}\n", text.trim()),
            response: render_triples(triples),
        })
        .collect()
}
