//! Prompt × temperature × replicate sweeps against chat-completion endpoints.
//!
//! Requests go through a [`Transport`], so the live HTTP client and test
//! mocks are interchangeable. Every planned request produces exactly one
//! [`CollectionRecord`], and records come back in plan order no matter how
//! the workers interleave.

use std::fmt;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, XorShift64Star};
use crate::sequence::{format_compact, parse_letters, Flip, FlipSequence, ParseKind, ResponseParser, SequenceMeta};
use crate::stats::CellKey;

pub const API_KEY_ENV: &str = "FLIPBENCH_API_KEY";
/// Highest temperature a plan may use without `allow_high_temperature`.
pub const MAX_DEFAULT_TEMPERATURE: f64 = 1.5;
pub const DEFAULT_REPLICATES: usize = 30;

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid endpoint configuration: {0}")]
    InvalidEndpoint(String),
    #[error("authentication rejected by endpoint: {0}")]
    Authentication(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

/// API key. Never serialized and redacted from `Debug`.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()).map(Secret)
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(skip)]
    pub api_key: Option<Secret>,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_base_secs: f64,
    pub max_parallel: usize,
    /// 0 disables the limiter.
    pub requests_per_minute: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4".into(),
            api_key: None,
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_base_secs: 1.0,
            max_parallel: 4,
            requests_per_minute: 60,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), CollectError> {
        let bad = |m: &str| Err(CollectError::InvalidEndpoint(m.to_string()));
        if self.max_parallel == 0 {
            return bad("max_parallel must be at least 1");
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return bad("timeout_secs must be positive");
        }
        if !(self.backoff_base_secs.is_finite() && self.backoff_base_secs >= 0.0) {
            return bad("backoff_base_secs must be non-negative");
        }
        if self.model.is_empty() {
            return bad("model is empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrder {
    HeadsFirst,
    TailsFirst,
}

impl fmt::Display for PromptOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptOrder::HeadsFirst => "heads-first",
            PromptOrder::TailsFirst => "tails-first",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub id: String,
    pub template: String,
    pub expected_flips: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<PromptOrder>,
}

impl PromptSpec {
    pub fn new(id: &str, template: &str, expected_flips: usize) -> Self {
        Self { id: id.into(), template: template.into(), expected_flips, order: None }
    }

    pub fn ordered(mut self, order: PromptOrder) -> Self {
        self.order = Some(order);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepPlan {
    pub prompts: Vec<PromptSpec>,
    pub temperatures: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub allow_high_temperature: bool,
}

impl Default for SweepPlan {
    fn default() -> Self {
        default_plan()
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<(), CollectError> {
        let bad = |m: String| Err(CollectError::InvalidPlan(m));
        if self.prompts.is_empty() {
            return bad("no prompts".into());
        }
        let mut ids = std::collections::HashSet::new();
        for p in &self.prompts {
            if p.template.trim().is_empty() {
                return bad(format!("prompt {:?} has an empty template", p.id));
            }
            if p.expected_flips == 0 {
                return bad(format!("prompt {:?} expects zero flips", p.id));
            }
            if !ids.insert(p.id.as_str()) {
                return bad(format!("duplicate prompt id {:?}", p.id));
            }
        }
        if self.temperatures.is_empty() {
            return bad("no temperatures".into());
        }
        for &t in &self.temperatures {
            if !(t.is_finite() && t >= 0.0) {
                return bad(format!("temperature {t} is not a non-negative number"));
            }
            if t > MAX_DEFAULT_TEMPERATURE && !self.allow_high_temperature {
                return bad(format!(
                    "temperature {t} exceeds {MAX_DEFAULT_TEMPERATURE}; set allow_high_temperature to sweep it"
                ));
            }
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        Ok(())
    }

    pub fn request_count(&self) -> usize {
        self.prompts.len() * self.temperatures.len() * self.replicates
    }

    pub fn prompt(&self, id: &str) -> Option<&PromptSpec> {
        self.prompts.iter().find(|p| p.id == id)
    }
}

pub const ORDER_INSTRUCTIONS_HEADS_FIRST: &str = "Flip 20 fair coins. Report the flips as a list of characters \
     separated by commas. If it's heads write 'H', if it's tails write 'T'.";
pub const ORDER_INSTRUCTIONS_TAILS_FIRST: &str = "Flip 20 fair coins. Report the flips as a list of characters \
     separated by commas. If it's tails write 'T', if it's heads write 'H'.";

/// Single-flip and 20-flip prompts, the heads/tails instruction-order pair,
/// temperatures 0.0 to 1.0 in steps of 0.1 plus 1.5, 30 replicates per cell.
pub fn default_plan() -> SweepPlan {
    let mut temperatures: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    temperatures.push(1.5);
    SweepPlan {
        prompts: vec![
            PromptSpec::new("coin", "Flip a coin.", 1),
            PromptSpec::new("fair-coin", "Flip a fair coin.", 1),
            PromptSpec::new("20-coins", "Flip 20 coins.", 20),
            PromptSpec::new("20-fair-coins", "Flip 20 fair coins.", 20),
            PromptSpec::new("order-heads-first", ORDER_INSTRUCTIONS_HEADS_FIRST, 20).ordered(PromptOrder::HeadsFirst),
            PromptSpec::new("order-tails-first", ORDER_INSTRUCTIONS_TAILS_FIRST, 20).ordered(PromptOrder::TailsFirst),
        ],
        temperatures,
        replicates: DEFAULT_REPLICATES,
        seed: 0,
        allow_high_temperature: false,
    }
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// Parse outcome of a record, plus `Error` for requests that never produced
/// a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Parsed,
    Partial,
    Refusal,
    Unparseable,
    Error,
}

impl From<ParseKind> for RecordKind {
    fn from(k: ParseKind) -> Self {
        match k {
            ParseKind::Parsed => RecordKind::Parsed,
            ParseKind::Partial => RecordKind::Partial,
            ParseKind::Refusal => RecordKind::Refusal,
            ParseKind::Unparseable => RecordKind::Unparseable,
        }
    }
}

/// One endpoint interaction. Field order is the JSONL key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionRecord {
    pub ts: String,
    pub model: String,
    pub prompt_id: String,
    pub temperature: f64,
    pub replicate: usize,
    pub raw: String,
    pub parse_kind: RecordKind,
    #[serde(with = "compact_flips")]
    pub flips: Vec<Flip>,
    pub attempts: u32,
    pub note: String,
}

mod compact_flips {
    use super::*;

    pub fn serialize<S: serde::Serializer>(flips: &[Flip], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_compact(flips))
    }

    pub fn deserialize<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<Flip>, D::Error> {
        let s = String::deserialize(d)?;
        parse_letters(&s).map_err(serde::de::Error::custom)
    }
}

impl CollectionRecord {
    pub fn cell_key(&self) -> CellKey {
        CellKey::new(&self.model, &self.prompt_id, self.temperature)
    }

    pub fn has_flips(&self) -> bool {
        matches!(self.parse_kind, RecordKind::Parsed | RecordKind::Partial) && !self.flips.is_empty()
    }

    pub fn to_sequence(&self) -> Option<FlipSequence> {
        self.has_flips().then(|| {
            FlipSequence::new(
                self.flips.clone(),
                SequenceMeta {
                    model: self.model.clone(),
                    prompt_id: self.prompt_id.clone(),
                    temperature: self.temperature,
                    replicate: self.replicate,
                },
            )
        })
    }
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[CollectionRecord]) -> Result<(), CollectError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| CollectError::Json { line: 0, source: e })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<CollectionRecord>, CollectError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CollectError::Json { line: i + 1, source: e })?);
    }
    Ok(out)
}

/// Wraps generated sequences as records, as if a perfectly compliant endpoint
/// had produced them.
pub fn synthetic_records(seqs: &[FlipSequence], ts: &str) -> Vec<CollectionRecord> {
    seqs.iter()
        .map(|s| CollectionRecord {
            ts: ts.to_string(),
            model: s.meta.model.clone(),
            prompt_id: s.meta.prompt_id.clone(),
            temperature: s.meta.temperature,
            replicate: s.meta.replicate,
            raw: crate::sequence::format_flips(&s.flips),
            parse_kind: RecordKind::Parsed,
            flips: s.flips.clone(),
            attempts: 1,
            note: String::new(),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body of an OpenAI-style `/chat/completions` call.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn single_turn(model: &str, prompt: &str, temperature: f64) -> Self {
        Self {
            model: model.to_string(),
            messages: vec![ChatMessage { role: "user".into(), content: prompt.to_string() }],
            temperature,
        }
    }

    pub fn prompt(&self) -> &str {
        self.messages.last().map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    /// Aborts the sweep.
    #[error("authentication failed: {0}")]
    Auth(String),
    /// Retried with backoff.
    #[error("transient failure: {0}")]
    Transient(String),
    /// Recorded without retrying.
    #[error("request failed: {0}")]
    Fatal(String),
}

pub trait Transport: Sync {
    fn send(&self, request: &ChatRequest, endpoint: &EndpointConfig) -> Result<String, TransportError>;
}

impl<F> Transport for F
where
    F: Fn(&ChatRequest) -> Result<String, TransportError> + Sync,
{
    fn send(&self, request: &ChatRequest, _endpoint: &EndpointConfig) -> Result<String, TransportError> {
        self(request)
    }
}

/// Blocking HTTP client for chat-completions endpoints.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(endpoint: &EndpointConfig) -> Result<Self, CollectError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build()
            .map_err(|e| CollectError::InvalidEndpoint(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest, endpoint: &EndpointConfig) -> Result<String, TransportError> {
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let mut req = self.client.post(&url).json(request);
        if let Some(key) = &endpoint.api_key {
            req = req.bearer_auth(key.expose());
        }
        let resp = req.send().map_err(|e| TransportError::Transient(e.without_url().to_string()))?;
        let status = resp.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(TransportError::Auth(format!("HTTP {status}")));
        }
        if status == reqwest::StatusCode::TOO_MANY_REQUESTS
            || status == reqwest::StatusCode::REQUEST_TIMEOUT
            || status.is_server_error()
        {
            return Err(TransportError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(TransportError::Fatal(format!("HTTP {status}")));
        }
        let body: serde_json::Value =
            resp.json().map_err(|e| TransportError::Transient(format!("bad response body: {}", e.without_url())))?;
        extract_content(&body).ok_or_else(|| TransportError::Fatal("response has no choices[0].message.content".into()))
    }
}

/// `choices[0].message.content` of a chat-completions response.
pub fn extract_content(body: &serde_json::Value) -> Option<String> {
    body.get("choices")?.get(0)?.get("message")?.get("content")?.as_str().map(str::to_string)
}

pub trait Clock: Sync {
    fn now(&self) -> String;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }
}

/// Always reports the same instant; makes sweeps byte-reproducible.
pub struct FixedClock(pub String);

impl Clock for FixedClock {
    fn now(&self) -> String {
        self.0.clone()
    }
}

/// Sleep before retry number `retry` (0-based): uniform on
/// `[0, base * 2^retry)` ("full jitter").
pub fn backoff_delay(base_secs: f64, retry: u32, rng: &mut XorShift64Star) -> Duration {
    let cap = base_secs * 2f64.powi(retry.min(30) as i32);
    Duration::from_secs_f64((cap * rng.next_f64()).max(0.0))
}

/// Requests-per-minute limiter with a one-request bucket.
struct RateLimiter {
    interval: Option<Duration>,
    next_slot: Mutex<Instant>,
}

impl RateLimiter {
    fn new(per_minute: u32) -> Self {
        Self {
            interval: (per_minute > 0).then(|| Duration::from_secs_f64(60.0 / per_minute as f64)),
            next_slot: Mutex::new(Instant::now()),
        }
    }

    fn acquire(&self) {
        let Some(interval) = self.interval else { return };
        let wait = {
            let mut slot = self.next_slot.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let start = (*slot).max(now);
            *slot = start + interval;
            start - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

struct Job<'p> {
    prompt: &'p PromptSpec,
    temperature: f64,
    replicate: usize,
}

/// Sweep with the wall clock and the default parser.
pub fn run_sweep(
    plan: &SweepPlan,
    endpoint: &EndpointConfig,
    transport: &dyn Transport,
) -> Result<Vec<CollectionRecord>, CollectError> {
    run_sweep_with(plan, endpoint, transport, &SystemClock, &ResponseParser::default())
}

pub fn run_sweep_with(
    plan: &SweepPlan,
    endpoint: &EndpointConfig,
    transport: &dyn Transport,
    clock: &dyn Clock,
    parser: &ResponseParser,
) -> Result<Vec<CollectionRecord>, CollectError> {
    plan.validate()?;
    endpoint.validate()?;

    let jobs: Vec<Job<'_>> = plan
        .prompts
        .iter()
        .flat_map(|prompt| {
            plan.temperatures.iter().flat_map(move |&temperature| {
                (0..plan.replicates).map(move |replicate| Job { prompt, temperature, replicate })
            })
        })
        .collect();

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let auth_failure: Mutex<Option<String>> = Mutex::new(None);
    let slots: Mutex<Vec<Option<CollectionRecord>>> = Mutex::new(vec![None; jobs.len()]);
    let limiter = RateLimiter::new(endpoint.requests_per_minute);
    let workers = endpoint.max_parallel.min(jobs.len()).max(1);

    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let idx = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(idx) else { break };
                let mut rng = XorShift64Star::new(derive_seed(plan.seed, idx as u64));
                match execute(job, endpoint, transport, clock, parser, &limiter, &mut rng) {
                    Ok(record) => slots.lock().expect("result buffer poisoned")[idx] = Some(record),
                    Err(msg) => {
                        abort.store(true, Ordering::SeqCst);
                        auth_failure.lock().expect("poisoned").get_or_insert(msg);
                        break;
                    }
                }
            });
        }
    });

    if let Some(msg) = auth_failure.into_inner().expect("poisoned") {
        return Err(CollectError::Authentication(msg));
    }
    Ok(slots
        .into_inner()
        .expect("result buffer poisoned")
        .into_iter()
        .map(|r| r.expect("every job produces a record"))
        .collect())
}

/// Runs one request to completion. `Err` only for authentication failures.
fn execute(
    job: &Job<'_>,
    endpoint: &EndpointConfig,
    transport: &dyn Transport,
    clock: &dyn Clock,
    parser: &ResponseParser,
    limiter: &RateLimiter,
    rng: &mut XorShift64Star,
) -> Result<CollectionRecord, String> {
    let request = ChatRequest::single_turn(&endpoint.model, &job.prompt.template, job.temperature);
    let mut record = CollectionRecord {
        ts: String::new(),
        model: endpoint.model.clone(),
        prompt_id: job.prompt.id.clone(),
        temperature: job.temperature,
        replicate: job.replicate,
        raw: String::new(),
        parse_kind: RecordKind::Error,
        flips: Vec::new(),
        attempts: 0,
        note: String::new(),
    };
    loop {
        record.attempts += 1;
        limiter.acquire();
        match transport.send(&request, endpoint) {
            Ok(text) => {
                let outcome = parser.parse(&text, Some(job.prompt.expected_flips));
                record.parse_kind = outcome.kind.into();
                record.flips = outcome.flips.unwrap_or_default();
                record.note = outcome.note;
                record.raw = text;
                break;
            }
            Err(TransportError::Auth(msg)) => return Err(msg),
            Err(TransportError::Transient(msg)) if record.attempts <= endpoint.max_retries => {
                let delay = backoff_delay(endpoint.backoff_base_secs, record.attempts - 1, rng);
                log::warn!(
                    "{} t={} #{}: {msg}; retrying in {:.2}s",
                    job.prompt.id,
                    job.temperature,
                    job.replicate,
                    delay.as_secs_f64()
                );
                thread::sleep(delay);
            }
            Err(TransportError::Transient(msg)) => {
                record.note = format!("gave up after {} attempts: {msg}", record.attempts);
                break;
            }
            Err(TransportError::Fatal(msg)) => {
                record.note = msg;
                break;
            }
        }
    }
    record.ts = clock.now();
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn quick_endpoint() -> EndpointConfig {
        EndpointConfig {
            backoff_base_secs: 0.0,
            requests_per_minute: 0,
            max_parallel: 3,
            ..EndpointConfig::default()
        }
    }

    fn plan(prompt: PromptSpec, temps: Vec<f64>, replicates: usize) -> SweepPlan {
        SweepPlan { prompts: vec![prompt], temperatures: temps, replicates, seed: 1, allow_high_temperature: false }
    }

    #[test]
    fn default_plan_shape() {
        let p = default_plan();
        p.validate().unwrap();
        assert!(p.temperatures.contains(&1.5));
        assert!(!p.temperatures.contains(&1.2));
        assert_eq!(p.temperatures.len(), 12);
        assert_eq!(p.temperatures[3], 0.3);
        assert_eq!(p.prompt("coin").unwrap().template, "Flip a coin.");
        assert_eq!(p.prompt("fair-coin").unwrap().expected_flips, 1);
        assert_eq!(p.prompt("20-fair-coins").unwrap().template, "Flip 20 fair coins.");
        assert_eq!(p.prompt("20-coins").unwrap().expected_flips, 20);
        let hf = &p.prompt("order-heads-first").unwrap().template;
        let tf = &p.prompt("order-tails-first").unwrap().template;
        assert!(hf.find("heads").unwrap() < hf.find("tails").unwrap());
        assert!(hf.find("'H'").unwrap() < hf.find("'T'").unwrap());
        assert!(tf.find("tails").unwrap() < tf.find("heads").unwrap());
        assert_eq!(p.replicates, 30);
    }

    #[test]
    fn plan_validation() {
        let mut p = default_plan();
        p.temperatures.push(1.8);
        assert!(matches!(p.validate(), Err(CollectError::InvalidPlan(_))));
        p.allow_high_temperature = true;
        p.validate().unwrap();
        p.replicates = 0;
        assert!(p.validate().is_err());
        let mut p = default_plan();
        p.prompts.push(p.prompts[0].clone());
        assert!(p.validate().is_err());
    }

    #[test]
    fn refusal_is_recorded_once_without_retry() {
        let calls = AtomicU32::new(0);
        let transport = |_: &ChatRequest| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok("I'm sorry, but as a language model I cannot flip coins.".to_string())
        };
        let recs = run_sweep(&plan(PromptSpec::new("c", "Flip a coin.", 1), vec![0.0], 1), &quick_endpoint(), &transport)
            .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].parse_kind, RecordKind::Refusal);
        assert!(recs[0].flips.is_empty());
        assert_eq!(recs[0].attempts, 1);
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn transient_failures_are_retried() {
        let calls = AtomicU32::new(0);
        let transport = |_: &ChatRequest| {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(TransportError::Transient("503".into()))
            } else {
                Ok("Heads".to_string())
            }
        };
        let recs = run_sweep(&plan(PromptSpec::new("c", "Flip a coin.", 1), vec![0.7], 1), &quick_endpoint(), &transport)
            .unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].attempts, 3);
        assert_eq!(recs[0].parse_kind, RecordKind::Parsed);
        assert_eq!(recs[0].flips, vec![Flip::Heads]);
    }

    #[test]
    fn exhausted_retries_still_yield_a_record() {
        let transport = |_: &ChatRequest| Err(TransportError::Transient("connection refused".into()));
        let ep = EndpointConfig { max_retries: 2, ..quick_endpoint() };
        let recs = run_sweep(&plan(PromptSpec::new("c", "Flip a coin.", 1), vec![0.0, 1.0], 2), &ep, &transport).unwrap();
        assert_eq!(recs.len(), 4);
        for r in &recs {
            assert_eq!(r.parse_kind, RecordKind::Error);
            assert_eq!(r.attempts, 3);
            assert!(r.note.contains("connection refused"));
        }
    }

    #[test]
    fn authentication_failure_aborts() {
        let transport = |_: &ChatRequest| Err(TransportError::Auth("HTTP 401".into()));
        let err = run_sweep(&plan(PromptSpec::new("c", "x", 1), vec![0.0], 5), &quick_endpoint(), &transport).unwrap_err();
        assert!(matches!(err, CollectError::Authentication(_)));
    }

    #[test]
    fn output_follows_plan_order() {
        let transport = |r: &ChatRequest| {
            // later temperatures answer faster
            thread::sleep(Duration::from_millis(((1.0 - r.temperature) * 20.0) as u64));
            Ok("H, T".to_string())
        };
        let ep = EndpointConfig { max_parallel: 8, ..quick_endpoint() };
        let p = SweepPlan {
            prompts: vec![PromptSpec::new("a", "x", 2), PromptSpec::new("b", "y", 2)],
            temperatures: vec![0.0, 0.5, 1.0],
            replicates: 3,
            seed: 0,
            allow_high_temperature: false,
        };
        let recs = run_sweep(&p, &ep, &transport).unwrap();
        assert_eq!(recs.len(), p.request_count());
        let order: Vec<(String, f64, usize)> =
            recs.iter().map(|r| (r.prompt_id.clone(), r.temperature, r.replicate)).collect();
        let mut expected = Vec::new();
        for id in ["a", "b"] {
            for t in [0.0, 0.5, 1.0] {
                for rep in 0..3 {
                    expected.push((id.to_string(), t, rep));
                }
            }
        }
        assert_eq!(order, expected);
    }

    #[test]
    fn backoff_bounds() {
        let mut rng = XorShift64Star::new(5);
        for retry in 0..6 {
            for _ in 0..100 {
                let d = backoff_delay(0.5, retry, &mut rng).as_secs_f64();
                assert!(d >= 0.0 && d < 0.5 * 2f64.powi(retry as i32));
            }
        }
        assert_eq!(backoff_delay(0.0, 3, &mut rng), Duration::ZERO);
    }

    #[test]
    fn jsonl_key_order_and_roundtrip() {
        let rec = CollectionRecord {
            ts: "2024-01-01T00:00:00.000Z".into(),
            model: "m".into(),
            prompt_id: "p".into(),
            temperature: 0.3,
            replicate: 4,
            raw: "H, T".into(),
            parse_kind: RecordKind::Parsed,
            flips: vec![Flip::Heads, Flip::Tails],
            attempts: 1,
            note: String::new(),
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            line,
            "{\"ts\":\"2024-01-01T00:00:00.000Z\",\"model\":\"m\",\"prompt_id\":\"p\",\"temperature\":0.3,\
             \"replicate\":4,\"raw\":\"H, T\",\"parse_kind\":\"parsed\",\"flips\":\"HT\",\"attempts\":1,\"note\":\"\"}\n"
        );
        assert_eq!(read_jsonl(&buf[..]).unwrap(), vec![rec]);
        let err = read_jsonl("\n{bad}\n".as_bytes()).unwrap_err();
        assert!(matches!(err, CollectError::Json { line: 2, .. }));
    }

    #[test]
    fn secret_is_redacted() {
        let ep = EndpointConfig { api_key: Some(Secret::new("sk-live-abc")), ..EndpointConfig::default() };
        assert!(!format!("{ep:?}").contains("sk-live-abc"));
        assert!(!serde_json::to_string(&ep).unwrap().contains("sk-live-abc"));
    }

    #[test]
    fn content_extraction() {
        let body = serde_json::json!({"choices": [{"message": {"role": "assistant", "content": "H, T"}}]});
        assert_eq!(extract_content(&body).as_deref(), Some("H, T"));
        assert_eq!(extract_content(&serde_json::json!({"choices": []})), None);
    }
}
