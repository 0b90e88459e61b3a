//! LLM-backed caption parsing with a content-addressed response cache.
//!
//! Requests go out as chat-completion bodies. Responses are cached under
//! `<cache>/<sha256 hex>.json`, keyed by (model, system prompt, user content),
//! so a populated cache replays a run with the network switched off.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::caption_graph::{Attribute, PrimitiveSets, Relation};

pub const ENV_URL: &str = "SPLITDIT_LLM_URL";
pub const ENV_KEY: &str = "SPLITDIT_LLM_KEY";
pub const DEFAULT_MODEL: &str = "qwen-plus";

pub const SYSTEM_PROMPT: &str = "You extract semantic primitives from an image caption. \
Reply with a single JSON object and nothing else, using exactly this schema: \
{\"objects\": [{\"name\": string, \"attributes\": [string]}], \
\"relations\": [{\"subject\": int, \"predicate\": string, \"object\": int}]}. \
Objects are the concrete things in the caption, each listed once, in order of first mention. \
Attributes are the adjectives or properties of that object (colour, size, material, state). \
Relations link two objects by zero-based index into the objects list; predicate is the \
verb or preposition connecting them, subject first.";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LlmRequest {
    pub model: String,
    pub system_prompt: String,
    pub user_content: String,
    pub temperature: f64,
}

impl LlmRequest {
    pub fn new(model: &str, user_content: impl Into<String>) -> Self {
        Self {
            model: model.to_string(),
            system_prompt: SYSTEM_PROMPT.to_string(),
            user_content: user_content.into(),
            temperature: 0.0,
        }
    }

    /// Lowercase hex SHA-256 over the request identity.
    pub fn cache_key(&self) -> String {
        let ident = serde_json::to_vec(&[&self.model, &self.system_prompt, &self.user_content])
            .expect("string array serializes");
        hex::encode(Sha256::digest(&ident))
    }

    fn wire_body(&self) -> String {
        serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": self.user_content},
            ],
            "temperature": self.temperature,
        })
        .to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlmResponse {
    pub raw_text: String,
    pub parsed: Option<PrimitiveSets>,
    /// Network attempts made; 0 for a cache hit.
    pub attempts: u32,
}

#[derive(Clone, Copy, Debug)]
pub struct NetPolicy {
    pub allow_network: bool,
    pub max_retries: u32,
    pub timeout_s: f64,
}

impl Default for NetPolicy {
    fn default() -> Self {
        Self { allow_network: false, max_retries: 2, timeout_s: 60.0 }
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("no cache entry for key {key} and network access is disabled")]
    CacheMiss { key: String },
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("no LLM credential configured (set {ENV_URL} and {ENV_KEY})")]
    AuthMissing,
    #[error("LLM reply did not match the response schema after {attempts} attempts: {last_error}")]
    UnparseableResponse { attempts: u32, last_error: String },
    #[error("empty caption")]
    EmptyCaption,
    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TransportError {
    /// Worth retrying: connection failures, timeouts, 429 and 5xx.
    #[error("{0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

/// Sends one chat-completion body and returns the assistant message text.
pub trait ChatTransport: Send + Sync {
    fn send(&self, body: &str, timeout: Duration) -> Result<String, TransportError>;
}

pub struct HttpTransport {
    pub base_url: String,
    pub api_key: String,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self { base_url: base_url.into(), api_key: api_key.into() }
    }

    pub fn from_env() -> Result<Self, LlmError> {
        match (std::env::var(ENV_URL), std::env::var(ENV_KEY)) {
            (Ok(url), Ok(key)) if !url.is_empty() && !key.is_empty() => Ok(Self::new(url, key)),
            _ => Err(LlmError::AuthMissing),
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl ChatTransport for HttpTransport {
    fn send(&self, body: &str, timeout: Duration) -> Result<String, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut resp = agent
            .post(&self.endpoint())
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            429 | 500..=599 => return Err(TransportError::Transient(format!("HTTP {status}: {text}"))),
            _ => return Err(TransportError::Fatal(format!("HTTP {status}: {text}"))),
        }
        let reply: ChatReply =
            serde_json::from_str(&text).map_err(|e| TransportError::Fatal(format!("bad reply body: {e}")))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| TransportError::Fatal("reply has no choices".into()))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    model: String,
    system_prompt: String,
    user_content: String,
    raw_text: String,
}

#[derive(Clone, Debug)]
pub struct ParserCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ParserCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, req: &LlmRequest) -> Result<Option<String>, LlmError> {
        let path = self.path_for(&req.cache_key());
        match fs::read(&path) {
            Ok(bytes) => {
                let entry: CacheEntry = serde_json::from_slice(&bytes).map_err(std::io::Error::other)?;
                Ok(Some(entry.raw_text))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes an entry unless one already exists. Entries are never rewritten.
    pub fn put(&self, req: &LlmRequest, raw_text: &str) -> Result<(), LlmError> {
        fs::create_dir_all(&self.dir)?;
        let key = req.cache_key();
        let dest = self.path_for(&key);
        if dest.exists() {
            return Ok(());
        }
        let entry = CacheEntry {
            model: req.model.clone(),
            system_prompt: req.system_prompt.clone(),
            user_content: req.user_content.clone(),
            raw_text: raw_text.to_string(),
        };
        let tmp = self.dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec_pretty(&entry).map_err(std::io::Error::other)?)?;
            f.sync_all()?;
        }
        // hard_link fails if another writer got there first; either copy is valid
        let linked = fs::hard_link(&tmp, &dest);
        fs::remove_file(&tmp)?;
        match linked {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

pub fn llm_complete(
    req: &LlmRequest,
    cache: &ParserCache,
    policy: &NetPolicy,
    transport: Option<&dyn ChatTransport>,
) -> Result<LlmResponse, LlmError> {
    if let Some(raw_text) = cache.get(req)? {
        let parsed = parse_llm_payload(&raw_text).ok();
        return Ok(LlmResponse { raw_text, parsed, attempts: 0 });
    }
    if !policy.allow_network {
        return Err(LlmError::CacheMiss { key: req.cache_key() });
    }
    let transport = transport.ok_or(LlmError::AuthMissing)?;
    let body = req.wire_body();
    let timeout = Duration::from_secs_f64(policy.timeout_s.max(0.001));
    let mut attempts = 0;
    loop {
        attempts += 1;
        match transport.send(&body, timeout) {
            Ok(raw_text) => {
                cache.put(req, &raw_text)?;
                let parsed = parse_llm_payload(&raw_text).ok();
                return Ok(LlmResponse { raw_text, parsed, attempts });
            }
            Err(TransportError::Transient(msg)) if attempts <= policy.max_retries => {
                log::warn!("LLM attempt {attempts} failed: {msg}; retrying");
                std::thread::sleep(Duration::from_millis(50 * (1 << attempts.min(6))));
            }
            Err(TransportError::Transient(message)) | Err(TransportError::Fatal(message)) => {
                return Err(LlmError::Transport { attempts, message })
            }
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireObject {
    name: String,
    attributes: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRelation {
    subject: usize,
    predicate: String,
    object: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WirePayload {
    objects: Vec<WireObject>,
    relations: Vec<WireRelation>,
}

fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    match t.strip_prefix("```") {
        Some(rest) => {
            let rest = rest.strip_prefix("json").unwrap_or(rest);
            rest.strip_suffix("```").unwrap_or(rest).trim()
        }
        None => t,
    }
}

/// Validates an LLM reply against the response schema and merges duplicates.
///
/// Objects are matched case-insensitively after trimming; the first mention
/// keeps its position and spelling, attributes are unioned, and every index is
/// rewritten onto the merged list.
pub fn parse_llm_payload(raw: &str) -> Result<PrimitiveSets, String> {
    let payload: WirePayload = serde_json::from_str(strip_code_fence(raw)).map_err(|e| e.to_string())?;
    let n = payload.objects.len();
    let mut prims = PrimitiveSets::default();
    let mut by_name: HashMap<String, usize> = HashMap::new();
    let mut remap = Vec::with_capacity(n);
    for (i, o) in payload.objects.iter().enumerate() {
        let name = o.name.trim();
        if name.is_empty() {
            return Err(format!("objects[{i}].name is empty"));
        }
        let id = *by_name.entry(name.to_lowercase()).or_insert_with(|| {
            prims.objects.push(name.to_string());
            prims.objects.len() - 1
        });
        remap.push(id);
        for (j, a) in o.attributes.iter().enumerate() {
            let a = a.trim();
            if a.is_empty() {
                return Err(format!("objects[{i}].attributes[{j}] is empty"));
            }
            let attr = Attribute::new(id, a);
            if !prims.attributes.contains(&attr) {
                prims.attributes.push(attr);
            }
        }
    }
    for (k, r) in payload.relations.iter().enumerate() {
        if r.subject >= n || r.object >= n {
            return Err(format!("relations[{k}] references a missing object"));
        }
        let predicate = r.predicate.trim();
        if predicate.is_empty() {
            return Err(format!("relations[{k}].predicate is empty"));
        }
        let rel = Relation::new(remap[r.subject], predicate, remap[r.object]);
        if !prims.relations.contains(&rel) {
            prims.relations.push(rel);
        }
    }
    Ok(prims)
}

pub struct LlmClient {
    pub model: String,
    pub cache: ParserCache,
    pub policy: NetPolicy,
    pub max_repairs: u32,
    pub transport: Option<Box<dyn ChatTransport>>,
}

impl LlmClient {
    pub fn new(cache: ParserCache, policy: NetPolicy, transport: Option<Box<dyn ChatTransport>>) -> Self {
        Self { model: DEFAULT_MODEL.to_string(), cache, policy, max_repairs: 2, transport }
    }

    /// Client configured from `SPLITDIT_LLM_URL` / `SPLITDIT_LLM_KEY`; the
    /// transport is absent when no credential is set.
    pub fn from_env(cache: ParserCache, policy: NetPolicy) -> Self {
        let transport = HttpTransport::from_env().ok().map(|t| Box::new(t) as Box<dyn ChatTransport>);
        Self::new(cache, policy, transport)
    }
}

/// Repair prompts carry the attempt number so each repair has its own cache key.
fn repair_prompt(caption: &str, error: &str, attempt: u32) -> String {
    format!(
        "{caption}\n\nRepair attempt {attempt}: your previous reply could not be used ({error}). \
         Reply again with only the JSON object described in the instructions."
    )
}

pub fn parse_with_llm(caption: &str, client: &LlmClient) -> Result<PrimitiveSets, LlmError> {
    if caption.trim().is_empty() {
        return Err(LlmError::EmptyCaption);
    }
    let mut user_content = caption.to_string();
    let mut attempts = 0;
    loop {
        attempts += 1;
        let req = LlmRequest::new(&client.model, user_content.clone());
        let resp = llm_complete(&req, &client.cache, &client.policy, client.transport.as_deref())?;
        match parse_llm_payload(&resp.raw_text) {
            Ok(prims) => return Ok(prims),
            Err(e) if attempts <= client.max_repairs => {
                log::warn!("LLM reply rejected ({e}); asking for a repair");
                user_content = repair_prompt(caption, &e, attempts);
            }
            Err(last_error) => return Err(LlmError::UnparseableResponse { attempts, last_error }),
        }
    }
}
