//! Model endpoints and the batch runner.
//!
//! Two backends exist: a scripted mock that answers from an ordered rule
//! list, and a chat-completions HTTP client. [`run_batch`] fans prompts
//! out to a bounded pool of worker threads, keeps results in input order
//! and appends completed records to a JSONL checkpoint so an interrupted
//! batch can resume without re-querying finished pairs.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::corpus::Split;
use crate::error::{Error, Result};
use crate::eval::{PairRef, PredictionRecord};
use crate::pairing::Pair;
use crate::prompting::{
    build_prompt, parse_confidence, Configuration, DecisionRules, Precedent, PromptBundle,
    PromptOptions, QueryText, Templates,
};
use crate::retrieval::{Embedder, IndexSource, PrecedentIndex};

pub const DEFAULT_MAX_RETRIES: u32 = 3;
pub const DEFAULT_TIMEOUT_SECS: u64 = 120;
pub const DEFAULT_BACKOFF_BASE_MS: u64 = 1000;
pub const DEFAULT_CHECKPOINT_EVERY: usize = 100;
pub const API_KEY_ENV: &str = "MODEL_API_KEY";

/// One scripted reply. A rule fires when every `contains` needle occurs
/// in the user text and no `not_contains` needle does (both
/// case-insensitive). A rule with neither list is a catch-all.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub not_contains: Vec<String>,
    pub response: String,
}

impl MockRule {
    pub fn catch_all(response: &str) -> Self {
        MockRule {
            contains: vec![],
            not_contains: vec![],
            response: response.to_string(),
        }
    }

    pub fn is_catch_all(&self) -> bool {
        self.contains.is_empty() && self.not_contains.is_empty()
    }

    fn matches(&self, haystack_lower: &str) -> bool {
        self.contains
            .iter()
            .all(|n| haystack_lower.contains(&n.to_lowercase()))
            && !self
                .not_contains
                .iter()
                .any(|n| haystack_lower.contains(&n.to_lowercase()))
    }
}

/// Backend descriptor as stored in a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    HttpChat {
        endpoint_url: String,
        model_name: String,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_backoff")]
        backoff_base_ms: u64,
        #[serde(default)]
        temperature: f64,
    },
    Mock {
        #[serde(default = "default_mock_name")]
        model_name: String,
        rules: Vec<MockRule>,
    },
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}
fn default_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}
fn default_backoff() -> u64 {
    DEFAULT_BACKOFF_BASE_MS
}
fn default_mock_name() -> String {
    "mock".to_string()
}

impl BackendConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: BackendConfig = serde_json::from_str(&raw).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: 0,
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BackendConfig::HttpChat { endpoint_url, .. } => {
                if endpoint_url.trim().is_empty() {
                    return Err(Error::Config("http_chat backend needs endpoint_url".into()));
                }
            }
            BackendConfig::Mock { rules, .. } => {
                if !rules.last().is_some_and(MockRule::is_catch_all) {
                    return Err(Error::Config(
                        "mock backend rules must end with a catch-all rule".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn model_name(&self) -> &str {
        match self {
            BackendConfig::HttpChat { model_name, .. } | BackendConfig::Mock { model_name, .. } => {
                model_name
            }
        }
    }
}

/// A successful model reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendFailure {
    pub reason: String,
    pub attempts: u32,
    /// Bad input (e.g. unreadable image) rather than an endpoint failure.
    pub input_error: bool,
}

impl std::fmt::Display for BackendFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} attempt(s))", self.reason, self.attempts)
    }
}

/// Anything that turns a prompt bundle into text.
pub trait Backend: Sync {
    /// Short description recorded in run manifests.
    fn descriptor(&self) -> String;
    fn complete(&self, bundle: &PromptBundle) -> std::result::Result<Completion, BackendFailure>;
}

/// Raw reply for one pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawResponse {
    pub pair_ref: PairRef,
    pub configuration: Configuration,
    pub text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

pub struct ModelBackend {
    config: BackendConfig,
    api_key: Option<String>,
    agent: Option<ureq::Agent>,
}

impl std::fmt::Debug for ModelBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBackend")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<set>"))
            .finish()
    }
}

impl ModelBackend {
    /// Builds a backend; the HTTP variant reads its key from `MODEL_API_KEY`.
    pub fn new(config: BackendConfig) -> Result<Self> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, key)
    }

    pub fn with_api_key(config: BackendConfig, api_key: Option<String>) -> Result<Self> {
        config.validate()?;
        let agent = match &config {
            BackendConfig::HttpChat { timeout_secs, .. } => Some(
                ureq::Agent::config_builder()
                    .timeout_global(Some(Duration::from_secs(*timeout_secs)))
                    .http_status_as_error(false)
                    .build()
                    .into(),
            ),
            BackendConfig::Mock { .. } => None,
        };
        Ok(ModelBackend {
            config,
            api_key,
            agent,
        })
    }

    pub fn mock(rules: Vec<MockRule>) -> Result<Self> {
        Self::with_api_key(
            BackendConfig::Mock {
                model_name: default_mock_name(),
                rules,
            },
            None,
        )
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    /// Runs one bundle and tags the reply with its pair.
    pub fn query_model(&self, pair_ref: &PairRef, configuration: Configuration, bundle: &PromptBundle) -> Result<RawResponse> {
        let started = Instant::now();
        match self.complete(bundle) {
            Ok(c) => Ok(RawResponse {
                pair_ref: pair_ref.clone(),
                configuration,
                text: c.text,
                latency_ms: started.elapsed().as_millis() as u64,
                attempt_count: c.attempts,
            }),
            Err(f) if f.input_error => Err(Error::Input(f.reason)),
            Err(f) => Err(Error::Backend {
                image_id: pair_ref.image_id.clone(),
                case_id: pair_ref.case_id.clone(),
                reason: f.to_string(),
            }),
        }
    }

    fn http_complete(&self, bundle: &PromptBundle) -> std::result::Result<Completion, BackendFailure> {
        let BackendConfig::HttpChat {
            endpoint_url,
            model_name,
            max_retries,
            backoff_base_ms,
            temperature,
            ..
        } = &self.config
        else {
            unreachable!("http_complete on a mock backend");
        };
        let image_url = match &bundle.image_ref {
            Some(r) => Some(image_data_url(r).map_err(|reason| BackendFailure {
                reason,
                attempts: 0,
                input_error: true,
            })?),
            None => None,
        };
        let body = chat_request_body(model_name, *temperature, bundle, image_url.as_deref());
        let agent = self.agent.as_ref().expect("http backend has an agent");

        let mut attempts = 0;
        loop {
            attempts += 1;
            let mut request = agent.post(endpoint_url.as_str());
            if let Some(key) = &self.api_key {
                request = request.header("Authorization", &format!("Bearer {key}"));
            }
            let (retryable, reason) = match request.send_json(&body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    if (200..300).contains(&status) {
                        return match response.body_mut().read_json::<ChatResponse>() {
                            Ok(parsed) => parsed
                                .first_text()
                                .map(|text| Completion { text, attempts })
                                .ok_or_else(|| BackendFailure {
                                    reason: "response has no message content".into(),
                                    attempts,
                                    input_error: false,
                                }),
                            Err(e) => Err(BackendFailure {
                                reason: format!("unreadable response body: {e}"),
                                attempts,
                                input_error: false,
                            }),
                        };
                    }
                    let text = response.body_mut().read_to_string().unwrap_or_default();
                    (
                        status == 429 || status >= 500,
                        format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()),
                    )
                }
                Err(e) => (true, format!("transport error: {e}")),
            };
            if !retryable || attempts > *max_retries {
                return Err(BackendFailure {
                    reason,
                    attempts,
                    input_error: false,
                });
            }
            let delay = backoff_delay(*backoff_base_ms, attempts - 1);
            debug!(attempts, ?delay, %reason, "retrying chat request");
            std::thread::sleep(delay);
        }
    }
}

/// Exponential backoff: `base · 2^retry`, plus up to 25% random jitter.
pub fn backoff_delay(base_ms: u64, retry: u32) -> Duration {
    let nominal = base_ms.saturating_mul(1u64 << retry.min(16));
    let jitter = if nominal > 0 {
        rand::rng().random_range(0..=nominal / 4)
    } else {
        0
    };
    Duration::from_millis(nominal + jitter)
}

impl Backend for ModelBackend {
    fn descriptor(&self) -> String {
        match &self.config {
            BackendConfig::HttpChat {
                endpoint_url,
                model_name,
                temperature,
                max_retries,
                ..
            } => format!(
                "http_chat model={model_name} endpoint={endpoint_url} temperature={temperature} max_retries={max_retries}"
            ),
            BackendConfig::Mock { model_name, rules } => {
                let rules = serde_json::to_string(rules).expect("serializable rules");
                format!(
                    "mock model={model_name} rules_sha256={}",
                    crate::digest::sha256_hex(rules)
                )
            }
        }
    }

    fn complete(&self, bundle: &PromptBundle) -> std::result::Result<Completion, BackendFailure> {
        match &self.config {
            BackendConfig::Mock { rules, .. } => {
                let haystack = bundle.user_text.to_lowercase();
                let rule = rules
                    .iter()
                    .find(|r| r.matches(&haystack))
                    .expect("validated mock ends with a catch-all");
                Ok(Completion {
                    text: rule.response.clone(),
                    attempts: 1,
                })
            }
            BackendConfig::HttpChat { .. } => self.http_complete(bundle),
        }
    }
}

/// Chat-completions request: system message, then a user message whose
/// content is the image part (when present) followed by the text part.
pub fn chat_request_body(
    model: &str,
    temperature: f64,
    bundle: &PromptBundle,
    image_url: Option<&str>,
) -> serde_json::Value {
    let mut content = Vec::new();
    if let Some(url) = image_url {
        content.push(serde_json::json!({ "type": "image_url", "image_url": { "url": url } }));
    }
    content.push(serde_json::json!({ "type": "text", "text": bundle.user_text }));
    serde_json::json!({
        "model": model,
        "temperature": temperature,
        "messages": [
            { "role": "system", "content": bundle.system_text },
            { "role": "user", "content": content },
        ],
    })
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<serde_json::Value>,
}

impl ChatResponse {
    fn first_text(self) -> Option<String> {
        let content = self.choices.into_iter().next()?.message.content?;
        match content {
            serde_json::Value::String(s) => Some(s),
            // Some servers answer with content parts.
            serde_json::Value::Array(parts) => Some(
                parts
                    .iter()
                    .filter_map(|p| p.get("text").and_then(|t| t.as_str()))
                    .collect::<Vec<_>>()
                    .join(""),
            ),
            _ => None,
        }
    }
}

fn mime_for(path: &str) -> &'static str {
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".png") {
        "image/png"
    } else if lower.ends_with(".gif") {
        "image/gif"
    } else if lower.ends_with(".webp") {
        "image/webp"
    } else {
        "image/jpeg"
    }
}

/// Remote and `data:` locators pass through; local files are inlined as
/// base64 `data:` URLs.
pub fn image_data_url(image_ref: &str) -> std::result::Result<String, String> {
    if image_ref.starts_with("data:")
        || image_ref.starts_with("http://")
        || image_ref.starts_with("https://")
    {
        return Ok(image_ref.to_string());
    }
    let path = image_ref.strip_prefix("file://").unwrap_or(image_ref);
    let bytes = fs::read(path).map_err(|e| format!("image `{image_ref}` unreadable: {e}"))?;
    Ok(format!(
        "data:{};base64,{}",
        mime_for(path),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

/// Everything a batch needs besides the pairs themselves.
pub struct BatchJob<'a> {
    pub configuration: Configuration,
    /// Query text per case: the fact text, or the rendered typed-fact for
    /// typed configurations.
    pub query_texts: &'a HashMap<String, String>,
    pub ground_truth: &'a HashMap<String, bool>,
    /// Image locator per image id.
    pub image_refs: &'a HashMap<String, String>,
    pub index: Option<&'a PrecedentIndex>,
    pub embedder: Option<&'a dyn Embedder>,
    pub k: usize,
    pub templates: &'a Templates,
    pub prompt_options: PromptOptions,
    pub decision_rules: &'a DecisionRules,
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub parallelism: usize,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            parallelism: 1,
            checkpoint: None,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    pub records: Vec<PredictionRecord>,
    /// Pairs sent to the backend in this run.
    pub queried: usize,
    /// Pairs taken from the checkpoint.
    pub resumed: usize,
    pub failures: usize,
}

fn validate_job(pairs: &[Pair], job: &BatchJob<'_>) -> Result<()> {
    let cfg = job.configuration;
    match (cfg.uses_rag(), job.index, job.embedder) {
        (true, Some(index), Some(embedder)) => {
            if index.is_empty() {
                return Err(Error::Config("precedent index is empty".into()));
            }
            let expected = if cfg.uses_typed_facts() {
                IndexSource::TypedFacts
            } else {
                IndexSource::Facts
            };
            if index.source() != expected {
                return Err(Error::Config(format!(
                    "{cfg} needs an index built from {expected:?}, got {:?}",
                    index.source()
                )));
            }
            if embedder.name() != index.embedder_name() {
                return Err(Error::Config(format!(
                    "index embedder `{}` differs from query embedder `{}`",
                    index.embedder_name(),
                    embedder.name()
                )));
            }
        }
        (true, _, _) => {
            return Err(Error::Config(format!("{cfg} needs a precedent index")));
        }
        (false, None, _) => {}
        (false, Some(_), _) => {
            return Err(Error::Config(format!("{cfg} does not use a precedent index")));
        }
    }
    for pair in pairs {
        if cfg.uses_rag() && pair.split == Split::Train {
            return Err(Error::Input(format!(
                "pair ({}, {}) is from the training split; precedent retrieval only runs for test pairs",
                pair.image_id, pair.case_id
            )));
        }
        if !job.query_texts.contains_key(&pair.case_id) || !job.ground_truth.contains_key(&pair.case_id) {
            return Err(Error::Input(format!("no fact for case `{}`", pair.case_id)));
        }
        if !job.image_refs.contains_key(&pair.image_id) {
            return Err(Error::Input(format!("no roster entry for image `{}`", pair.image_id)));
        }
    }
    Ok(())
}

fn precedents_for(
    case_id: &str,
    job: &BatchJob<'_>,
) -> Result<Option<Vec<Precedent>>> {
    let (Some(index), Some(embedder)) = (job.index, job.embedder) else {
        return Ok(None);
    };
    let result = index.retrieve_top_k(embedder, &job.query_texts[case_id], job.k, Some(case_id))?;
    Ok(Some(
        result
            .ranked
            .iter()
            .map(|n| {
                let entry = index.entry(&n.case_id).expect("ranked ids come from the index");
                Precedent {
                    case_id: entry.case_id.clone(),
                    text: entry.text.clone(),
                    bail_granted: entry.bail_granted,
                }
            })
            .collect(),
    ))
}

fn load_checkpoint(path: &Path, configuration: Configuration) -> Result<HashMap<PairRef, PredictionRecord>> {
    let mut done = HashMap::new();
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(Error::io(path, e)),
    };
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        // A torn last line from an interrupted run is skipped.
        let Ok(record) = serde_json::from_str::<PredictionRecord>(&line) else {
            continue;
        };
        if record.configuration == configuration && record.error.is_none() {
            done.insert(record.pair_ref.clone(), record);
        }
    }
    Ok(done)
}

struct CheckpointWriter {
    path: PathBuf,
    file: File,
    every: usize,
    pending: Vec<String>,
}

impl CheckpointWriter {
    fn open(path: &Path, every: usize) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut file = file;
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.last().is_some_and(|&b| b != b'\n') {
            // torn tail from an interrupted run
            file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        Ok(CheckpointWriter {
            path: path.to_path_buf(),
            file,
            every: every.max(1),
            pending: Vec::new(),
        })
    }

    fn push(&mut self, record: &PredictionRecord) -> Result<()> {
        self.pending
            .push(serde_json::to_string(record).expect("serializable record"));
        if self.pending.len() >= self.every {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let mut chunk = self.pending.join("\n");
        chunk.push('\n');
        self.file
            .write_all(chunk.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.pending.clear();
        Ok(())
    }
}

/// Queries every pair and returns one record per pair in input order.
///
/// Per-pair failures become error records; the batch itself only fails on
/// invalid setup or checkpoint I/O.
pub fn run_batch(
    pairs: &[Pair],
    job: &BatchJob<'_>,
    backend: &dyn Backend,
    options: &BatchOptions,
) -> Result<BatchOutcome> {
    validate_job(pairs, job)?;

    let mut seen = HashSet::new();
    for pair in pairs {
        if !seen.insert((&pair.image_id, &pair.case_id)) {
            return Err(Error::Input(format!(
                "pair ({}, {}) appears twice",
                pair.image_id, pair.case_id
            )));
        }
    }

    let mut precedents: HashMap<&str, Option<Vec<Precedent>>> = HashMap::new();
    for pair in pairs {
        if !precedents.contains_key(pair.case_id.as_str()) {
            precedents.insert(&pair.case_id, precedents_for(&pair.case_id, job)?);
        }
    }

    let mut slots: Vec<Option<PredictionRecord>> = vec![None; pairs.len()];
    let mut resumed = 0;
    let mut checkpoint = match &options.checkpoint {
        Some(path) => {
            let done = load_checkpoint(path, job.configuration)?;
            for (slot, pair) in slots.iter_mut().zip(pairs) {
                if let Some(record) = done.get(&PairRef::of(pair)) {
                    *slot = Some(record.clone());
                    resumed += 1;
                }
            }
            Some(CheckpointWriter::open(path, options.checkpoint_every)?)
        }
        None => None,
    };

    let pending: Vec<usize> = (0..pairs.len()).filter(|&i| slots[i].is_none()).collect();
    let next = AtomicUsize::new(0);
    let workers = options.parallelism.max(1).min(pending.len().max(1));
    let (tx, rx) = mpsc::channel::<(usize, PredictionRecord)>();

    let mut failures = 0;
    let mut write_error = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (pending, next, precedents) = (&pending, &next, &precedents);
            scope.spawn(move || loop {
                let slot = next.fetch_add(1, Ordering::Relaxed);
                let Some(&idx) = pending.get(slot) else {
                    break;
                };
                let pair = &pairs[idx];
                let record = predict_one(pair, job, backend, precedents[pair.case_id.as_str()].as_deref());
                if tx.send((idx, record)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (idx, record) in rx {
            if record.error.is_some() {
                failures += 1;
            }
            if let Some(writer) = checkpoint.as_mut() {
                if write_error.is_none() {
                    if let Err(e) = writer.push(&record) {
                        write_error = Some(e);
                    }
                }
            }
            slots[idx] = Some(record);
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    if let Some(writer) = checkpoint.as_mut() {
        writer.flush()?;
    }

    Ok(BatchOutcome {
        records: slots
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect(),
        queried: pending.len(),
        resumed,
        failures,
    })
}

fn predict_one(
    pair: &Pair,
    job: &BatchJob<'_>,
    backend: &dyn Backend,
    precedents: Option<&[Precedent]>,
) -> PredictionRecord {
    let query_text = job.query_texts[&pair.case_id].as_str();
    let query = if job.configuration.uses_typed_facts() {
        QueryText::Typed(query_text)
    } else {
        QueryText::Fact(query_text)
    };
    let base = PredictionRecord::unanswered(pair, job.configuration, job.ground_truth[&pair.case_id]);
    let bundle = match build_prompt(
        job.configuration,
        query,
        precedents,
        Some(job.image_refs[&pair.image_id].as_str()),
        job.templates,
        job.prompt_options,
    ) {
        Ok(b) => b,
        Err(e) => return base.with_error(e.to_string(), 0),
    };
    match backend.complete(&bundle) {
        Ok(completion) => {
            let decision = job.decision_rules.parse_decision(&completion.text);
            let confidence = if bundle.asks_confidence {
                parse_confidence(&completion.text)
            } else {
                crate::prompting::Confidence::Absent
            };
            PredictionRecord {
                decision,
                confidence,
                response: completion.text,
                attempts: completion.attempts,
                ..base
            }
        }
        Err(failure) => {
            warn!(image_id = %pair.image_id, case_id = %pair.case_id, %failure, "pair failed");
            base.with_error(failure.reason, failure.attempts)
        }
    }
}
