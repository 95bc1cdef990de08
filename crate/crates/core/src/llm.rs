//! Chat-completion and embedding transport, plus prompt assembly.
//!
//! Wire format (OpenAI-style):
//!
//! * `POST {base}/chat/completions` with
//!   `{model, messages: [{role, content}], temperature, max_tokens, seed?}`,
//!   answered by `{choices: [{message: {content}}]}`
//! * `POST {base}/embeddings` with `{model, input: [...]}`, answered by
//!   `{data: [{embedding: [...]}]}`
//!
//! Fixture directory layout: one file per request, `<digest>.json`, holding
//! `{"request": <request body>, "response": <response body>}`. The digest
//! is the hex SHA-256 of `"<endpoint path>\n"` followed by the request body
//! serialized with sorted keys and no whitespace.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::knowledge::DocRag;

pub const API_KEY_ENV: &str = "HDLDBG_API_KEY";
pub const CORRECT_CUE: &str = "Based on the analysis, the correct script is";
pub const CHAT_PATH: &str = "/chat/completions";
pub const EMBED_PATH: &str = "/embeddings";
pub const NO_SIMILAR: &str = "(no similar instances)";

/// Task framing for thought generation.
pub const THOUGHT_TASK: &str =
    "You are an expert hardware engineer debugging scripts written in a \
small hardware description language. Read the buggy script, the checker's error message and the \
error documentation, then explain step by step where the error is, why the checker reports it, \
and which edit repairs it. Keep the analysis specific to the lines involved.";

/// Framing for producing the corrected script from an analysis.
pub const CORRECT_TASK: &str = "Using the analysis provided, write the complete corrected script. \
Return the full script in a single fenced code block.";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("no recorded fixture for request digest {digest}")]
    MissingFixture { digest: String },
    #[error("request failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("service returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed service response: {0}")]
    Malformed(String),
    #[error("{0}")]
    Precondition(String),
    #[error("transport misconfigured: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

type Result<T, E = LlmError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl GenRequest {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::Precondition(format!(
                "temperature must lie in [0, 2], got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::Precondition("max_tokens must be positive".into()));
        }
        if self.messages.is_empty() {
            return Err(LlmError::Precondition("request has no messages".into()));
        }
        if self
            .messages
            .iter()
            .any(|m| m.role != Role::System && m.content.trim().is_empty())
        {
            return Err(LlmError::Precondition(
                "user and assistant messages must not be empty".into(),
            ));
        }
        Ok(())
    }
}

/// Serialize with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    fn sort(v: &Value) -> Value {
        match v {
            Value::Object(map) => {
                let mut entries: Vec<_> = map.iter().collect();
                entries.sort_by(|a, b| a.0.cmp(b.0));
                Value::Object(
                    entries
                        .into_iter()
                        .map(|(k, v)| (k.clone(), sort(v)))
                        .collect(),
                )
            }
            Value::Array(items) => Value::Array(items.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    sort(value).to_string()
}

pub fn request_digest(path: &str, body: &Value) -> String {
    let mut h = Sha256::new();
    h.update(path.as_bytes());
    h.update(b"\n");
    h.update(canonical_json(body).as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Fixture {
    request: Value,
    response: Value,
}

/// Recorded responses keyed by request digest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixtureStore {
    pub dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureStore { dir: dir.into() }
    }

    fn file(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn lookup(&self, path: &str, body: &Value) -> Result<Value> {
        let digest = request_digest(path, body);
        let file = self.file(&digest);
        let text = match fs::read_to_string(&file) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(LlmError::MissingFixture { digest })
            }
            Err(source) => return Err(LlmError::Io { path: file, source }),
        };
        let fixture: Fixture = serde_json::from_str(&text)
            .map_err(|e| LlmError::Malformed(format!("{}: {e}", file.display())))?;
        Ok(fixture.response)
    }

    /// Store `response` for the request; returns the digest.
    pub fn record(&self, path: &str, body: &Value, response: &Value) -> Result<String> {
        let digest = request_digest(path, body);
        let io_err = |source| LlmError::Io {
            path: self.dir.clone(),
            source,
        };
        fs::create_dir_all(&self.dir).map_err(io_err)?;
        let fixture = Fixture {
            request: body.clone(),
            response: response.clone(),
        };
        let mut text = serde_json::to_string_pretty(&fixture).expect("json values serialize");
        text.push('\n');
        let file = self.file(&digest);
        fs::write(&file, text).map_err(|source| LlmError::Io { path: file, source })?;
        Ok(digest)
    }

    /// Record a chat completion whose reply is `content`.
    pub fn record_chat(&self, request: &GenRequest, content: &str) -> Result<String> {
        let body = serde_json::to_value(request).expect("request serializes");
        self.record(CHAT_PATH, &body, &chat_response(content))
    }

    pub fn record_embeddings(
        &self,
        model: &str,
        texts: &[String],
        vectors: &[Vec<f64>],
    ) -> Result<String> {
        let data: Vec<Value> = vectors.iter().map(|v| json!({ "embedding": v })).collect();
        self.record(
            EMBED_PATH,
            &embed_body(model, texts),
            &json!({ "data": data }),
        )
    }
}

pub fn chat_response(content: &str) -> Value {
    json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] })
}

fn embed_body(model: &str, texts: &[String]) -> Value {
    json!({ "model": model, "input": texts })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles for each later one.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mode {
    /// HTTP calls; optionally records every response into a fixture store.
    Live {
        endpoint: String,
        api_key: Option<String>,
        record: Option<FixtureStore>,
    },
    /// Answers only from fixtures; never touches the network.
    Replay(FixtureStore),
}

struct Slots {
    used: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.max {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        SlotGuard(self)
    }
}

struct SlotGuard<'a>(&'a Slots);

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

pub struct Transport {
    mode: Mode,
    retry: RetryPolicy,
    timeout: Duration,
    slots: Slots,
    requests: AtomicUsize,
    network_calls: AtomicUsize,
}

enum Attempt {
    Retry(String),
    Fail(LlmError),
}

impl Transport {
    pub fn new(mode: Mode, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Transport {
            mode,
            retry,
            timeout: Duration::from_secs(120),
            slots: Slots {
                used: Mutex::new(0),
                freed: Condvar::new(),
                max: max_in_flight.max(1),
            },
            requests: AtomicUsize::new(0),
            network_calls: AtomicUsize::new(0),
        }
    }

    pub fn replay(dir: impl Into<PathBuf>) -> Self {
        Self::new(
            Mode::Replay(FixtureStore::new(dir)),
            RetryPolicy::default(),
            4,
        )
    }

    /// Live transport with the API key taken from `HDLDBG_API_KEY` if set.
    pub fn live(endpoint: impl Into<String>) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(
            Mode::Live {
                endpoint: endpoint.into(),
                api_key,
                record: None,
            },
            RetryPolicy::default(),
            4,
        )
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn mode(&self) -> &Mode {
        &self.mode
    }

    pub fn max_in_flight(&self) -> usize {
        self.slots.max
    }

    /// Requests served so far, from the network or from fixtures.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// HTTP attempts made so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &GenRequest) -> Result<String> {
        request.validate()?;
        let body = serde_json::to_value(request).expect("request serializes");
        let response = self.call(CHAT_PATH, &body)?;
        response
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))
    }

    pub fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Err(LlmError::Precondition(
                "embed needs at least one text".into(),
            ));
        }
        let response = self.call(EMBED_PATH, &embed_body(model, texts))?;
        let data = response
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| LlmError::Malformed("missing data array".into()))?;
        if data.len() != texts.len() {
            return Err(LlmError::Malformed(format!(
                "{} embeddings for {} inputs",
                data.len(),
                texts.len()
            )));
        }
        data.iter()
            .map(|d| {
                d.get("embedding")
                    .and_then(Value::as_array)
                    .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
                    .ok_or_else(|| LlmError::Malformed("embedding is not a number array".into()))
            })
            .collect()
    }

    fn call(&self, path: &str, body: &Value) -> Result<Value> {
        let _slot = self.slots.acquire();
        self.requests.fetch_add(1, Ordering::SeqCst);
        match &self.mode {
            Mode::Replay(store) => store.lookup(path, body),
            Mode::Live {
                endpoint,
                api_key,
                record,
            } => {
                let response = self.post_with_retry(endpoint, api_key.as_deref(), path, body)?;
                if let Some(store) = record {
                    store.record(path, body, &response)?;
                }
                Ok(response)
            }
        }
    }

    fn post_with_retry(
        &self,
        endpoint: &str,
        api_key: Option<&str>,
        path: &str,
        body: &Value,
    ) -> Result<Value> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let url = format!("{}{}", endpoint.trim_end_matches('/'), path);
        let mut last = String::new();
        for attempt in 0..self.retry.max_attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
            }
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            match self.post_once(&agent, &url, api_key, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(LlmError::Exhausted {
            attempts: self.retry.max_attempts.max(1),
            last,
        })
    }

    fn post_once(
        &self,
        agent: &ureq::Agent,
        url: &str,
        api_key: Option<&str>,
        body: &Value,
    ) -> Result<Value, Attempt> {
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send(body.to_string()) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => return Err(Attempt::Retry(format!("timeout ({t})"))),
            Err(ureq::Error::Io(e)) if e.kind() == io::ErrorKind::TimedOut => {
                return Err(Attempt::Retry(format!("timeout ({e})")))
            }
            Err(e) => return Err(Attempt::Fail(LlmError::Config(format!("{url}: {e}")))),
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        if status == 429 || (500..600).contains(&status) {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(Attempt::Fail(LlmError::Http { status, body: text }));
        }
        serde_json::from_str(&text).map_err(|e| Attempt::Fail(LlmError::Malformed(e.to_string())))
    }
}

/// A code-context exemplar as it appears in prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exemplar<'a> {
    pub buggy: &'a str,
    pub message: &'a str,
    pub correct: &'a str,
}

fn fenced(code: &str) -> String {
    format!("```\n{}\n```", code.trim_end_matches('\n'))
}

pub fn render_doc_rag(doc: &DocRag) -> String {
    if doc.is_empty() {
        return "(no matching error documentation)".to_string();
    }
    let mut out = Vec::new();
    for e in &doc.entries {
        out.push(format!(
            "- {}: {}\n  root reason: {}\n  solution: {}",
            e.error_id, e.description, e.root_reason, e.solution
        ));
    }
    for code in &doc.unknown_codes {
        out.push(format!("- {code}: not in the error database"));
    }
    out.join("\n")
}

pub fn render_code_rag(code: &[Exemplar<'_>]) -> String {
    if code.is_empty() {
        return NO_SIMILAR.to_string();
    }
    code.iter()
        .enumerate()
        .map(|(i, ex)| {
            format!(
                "#### Similar instance {}\nBuggy code:\n{}\nError message:\n{}\nCorrected code:\n{}",
                i + 1,
                fenced(ex.buggy),
                ex.message.trim_end(),
                fenced(ex.correct)
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn section(title: &str, body: &str) -> String {
    format!("### {title}\n{body}")
}

fn problem_sections(buggy: &str, message: &str) -> Vec<String> {
    vec![
        section("Buggy code", &fenced(buggy)),
        section("Error message", message.trim_end()),
    ]
}

/// Thought-generation prompt. With `correct` supplied (dataset building),
/// the known-correct script is placed between the message and the
/// documentation.
pub fn prompt_thought(
    buggy: &str,
    message: &str,
    doc: &DocRag,
    correct: Option<&str>,
) -> Vec<ChatMessage> {
    let mut parts = problem_sections(buggy, message);
    if let Some(c) = correct {
        parts.push(section("Known-correct version", &fenced(c)));
    }
    parts.push(section("Error documentation", &render_doc_rag(doc)));
    vec![
        ChatMessage::system(THOUGHT_TASK),
        ChatMessage::user(parts.join("\n\n")),
    ]
}

/// The inference-time context: task framing for both steps, then the
/// problem, documentation and similar instances. Also the fine-tuning
/// context of the exported dataset.
pub fn render_context(buggy: &str, message: &str, doc: &DocRag, code: &[Exemplar<'_>]) -> String {
    let mut parts = vec![THOUGHT_TASK.to_string(), CORRECT_TASK.to_string()];
    parts.extend(problem_sections(buggy, message));
    parts.push(section("Error documentation", &render_doc_rag(doc)));
    parts.push(section("Similar instances", &render_code_rag(code)));
    parts.join("\n\n")
}

/// Analysis prompt used at inference time.
pub fn prompt_analysis(
    buggy: &str,
    message: &str,
    doc: &DocRag,
    code: &[Exemplar<'_>],
) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(format!("{THOUGHT_TASK}\n\n{CORRECT_TASK}")),
        ChatMessage::user(render_user_context(buggy, message, doc, code)),
    ]
}

fn render_user_context(buggy: &str, message: &str, doc: &DocRag, code: &[Exemplar<'_>]) -> String {
    let mut parts = problem_sections(buggy, message);
    parts.push(section("Error documentation", &render_doc_rag(doc)));
    parts.push(section("Similar instances", &render_code_rag(code)));
    parts.join("\n\n")
}

/// Correction prompt ending with [`CORRECT_CUE`].
///
/// Without `code` (scoring sampled thoughts) only the correction framing is
/// used; with `code` (inference) both framings precede the problem, and the
/// similar instances follow the documentation.
pub fn prompt_correct(
    buggy: &str,
    message: &str,
    doc: &DocRag,
    code: Option<&[Exemplar<'_>]>,
    thought: &str,
) -> Result<Vec<ChatMessage>> {
    if thought.trim().is_empty() {
        return Err(LlmError::Precondition("thought must not be empty".into()));
    }
    let system = match code {
        Some(_) => format!("{THOUGHT_TASK}\n\n{CORRECT_TASK}"),
        None => CORRECT_TASK.to_string(),
    };
    let mut parts = problem_sections(buggy, message);
    parts.push(section("Error documentation", &render_doc_rag(doc)));
    if let Some(code) = code {
        parts.push(section("Similar instances", &render_code_rag(code)));
    }
    parts.push(section("Analysis", thought.trim_end()));
    parts.push(CORRECT_CUE.to_string());
    Ok(vec![
        ChatMessage::system(system),
        ChatMessage::user(parts.join("\n\n")),
    ])
}

/// One request asking for the analysis followed by the corrected script.
pub fn prompt_single_call(
    buggy: &str,
    message: &str,
    doc: &DocRag,
    code: &[Exemplar<'_>],
) -> Vec<ChatMessage> {
    let user = format!(
        "{}\n\nFirst write your analysis. Then write the line \"{CORRECT_CUE}\" followed by the \
         corrected script in a fenced code block.",
        render_user_context(buggy, message, doc, code)
    );
    vec![
        ChatMessage::system(format!("{THOUGHT_TASK}\n\n{CORRECT_TASK}")),
        ChatMessage::user(user),
    ]
}

/// Split a single-call reply into (analysis, code).
pub fn split_single_call(response: &str) -> (String, String) {
    let analysis = match response.find(CORRECT_CUE) {
        Some(at) => &response[..at],
        None => match response.find("```") {
            Some(at) => &response[..at],
            None => "",
        },
    };
    (analysis.trim().to_string(), extract_code(response))
}

/// First fenced code block; else the text after the correction cue; else
/// the whole reply, trimmed.
pub fn extract_code(response: &str) -> String {
    if let Some(open) = response.find("```") {
        let after = &response[open + 3..];
        let body_start = after.find('\n').map_or(after.len(), |n| n + 1);
        let body = &after[body_start..];
        let body = match body.find("```") {
            Some(close) => &body[..close],
            None => body,
        };
        return body.trim_end().trim_start_matches(['\n', '\r']).to_string();
    }
    if let Some(at) = response.find(CORRECT_CUE) {
        let rest = response[at + CORRECT_CUE.len()..].trim_start();
        return rest.strip_prefix(':').unwrap_or(rest).trim().to_string();
    }
    response.trim().to_string()
}

/// Read a fixture directory's recorded request bodies, in file-name order.
pub fn list_fixtures(dir: &Path) -> Result<Vec<(String, Value)>> {
    let io_err = |source| LlmError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(|source| LlmError::Io {
                path: p.clone(),
                source,
            })?;
            let f: Fixture = serde_json::from_str(&text)
                .map_err(|e| LlmError::Malformed(format!("{}: {e}", p.display())))?;
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((stem, f.request))
        })
        .collect()
}
