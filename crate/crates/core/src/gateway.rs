//! Client for an external general-purpose classifier used as a comparison
//! baseline, plus a deterministic in-process mock.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::corpus::Label;
use crate::evaluation::{Classifier, ScoreError};
use crate::store::append_json_line;
use crate::text::normalize;

pub const PLACEHOLDER: &str = "{lyrics}";
pub const DEFAULT_TEMPLATE_FILE: &str = include_str!("../templates/baseline_prompt.txt");
pub const ENV_ENDPOINT: &str = "MCAR_REMOTE_ENDPOINT";
pub const ENV_TOKEN: &str = "MCAR_REMOTE_TOKEN";
pub const ENV_MODEL: &str = "MCAR_REMOTE_MODEL";
pub const ENV_TIMEOUT_SECS: &str = "MCAR_REMOTE_TIMEOUT_SECS";

/// Strip `#` header lines from a template file.
pub fn template_body(file: &str) -> String {
    file.lines()
        .filter(|l| !l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn default_template() -> String {
    template_body(DEFAULT_TEMPLATE_FILE)
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid gateway config: {0}")]
    Config(String),
    #[error("request timed out")]
    Timeout,
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("response contains neither label keyword")]
    Unparseable { raw_response: String },
}

impl GatewayError {
    fn retryable(&self) -> bool {
        matches!(self, GatewayError::Timeout | GatewayError::Transport(_))
    }
}

#[derive(Clone)]
pub struct RemoteClassifierConfig {
    pub endpoint: String,
    pub token: Option<String>,
    pub model: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Delay before the first retry; doubled on every further attempt.
    pub backoff: Duration,
    pub prompt_template: String,
    pub positive_keyword: String,
    pub negative_keyword: String,
    pub max_in_flight: usize,
    /// Append every request and raw response here when set.
    pub audit_log: Option<PathBuf>,
}

impl std::fmt::Debug for RemoteClassifierConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClassifierConfig")
            .field("endpoint", &self.endpoint)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .field("model", &self.model)
            .field("timeout", &self.timeout)
            .field("max_retries", &self.max_retries)
            .field("audit_log", &self.audit_log)
            .finish_non_exhaustive()
    }
}

impl Default for RemoteClassifierConfig {
    fn default() -> Self {
        RemoteClassifierConfig {
            endpoint: String::new(),
            token: None,
            model: None,
            timeout: Duration::from_secs(30),
            max_retries: 3,
            backoff: Duration::from_millis(250),
            prompt_template: default_template(),
            positive_keyword: "EXPLICIT".into(),
            negative_keyword: "NOT_EXPLICIT".into(),
            max_in_flight: 4,
            audit_log: None,
        }
    }
}

impl RemoteClassifierConfig {
    /// Defaults overridden by `MCAR_REMOTE_*` environment variables.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Ok(v) = std::env::var(ENV_ENDPOINT) {
            c.endpoint = v;
        }
        c.token = std::env::var(ENV_TOKEN).ok().filter(|t| !t.is_empty());
        c.model = std::env::var(ENV_MODEL).ok().filter(|t| !t.is_empty());
        if let Some(secs) = std::env::var(ENV_TIMEOUT_SECS).ok().and_then(|s| s.parse::<f64>().ok()) {
            if secs > 0.0 {
                c.timeout = Duration::from_secs_f64(secs);
            }
        }
        c
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout.is_zero() {
            return Err(GatewayError::Config("timeout must be positive".into()));
        }
        let n = self.prompt_template.matches(PLACEHOLDER).count();
        if n != 1 {
            return Err(GatewayError::Config(format!(
                "template must contain {PLACEHOLDER} exactly once, found {n}"
            )));
        }
        if self.positive_keyword.is_empty() || self.negative_keyword.is_empty() {
            return Err(GatewayError::Config("label keywords must be non-empty".into()));
        }
        if self.positive_keyword == self.negative_keyword {
            return Err(GatewayError::Config("label keywords must differ".into()));
        }
        if self.max_in_flight == 0 {
            return Err(GatewayError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn fill(&self, lyrics: &str) -> String {
        self.prompt_template.replacen(PLACEHOLDER, lyrics, 1)
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// First whole-word occurrence of either keyword (case-insensitive). The
/// `_` inside `NOT_EXPLICIT` counts as a word character, so the positive
/// keyword is never matched inside the negative one.
pub fn parse_label(response: &str, positive: &str, negative: &str) -> Option<Label> {
    let text = response.to_uppercase();
    let pos = positive.to_uppercase();
    let neg = negative.to_uppercase();
    let whole_word = |at: usize, len: usize| {
        let before = text[..at].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after = text[at + len..].chars().next().is_none_or(|c| !is_word_char(c));
        before && after
    };
    for (at, _) in text.char_indices() {
        let rest = &text[at..];
        if rest.starts_with(&neg) && whole_word(at, neg.len()) {
            return Some(Label::NonExplicit);
        }
        if rest.starts_with(&pos) && whole_word(at, pos.len()) {
            return Some(Label::Explicit);
        }
    }
    None
}

/// How a prompt reaches the remote model and comes back as text.
pub trait Transport: Send + Sync {
    fn send(&self, prompt: &str, cfg: &RemoteClassifierConfig) -> Result<String, GatewayError>;
}

/// OpenAI-style chat-completions transport. The reply text is taken from
/// `choices[0].message.content` when present, otherwise the raw body.
#[derive(Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn send(&self, prompt: &str, cfg: &RemoteClassifierConfig) -> Result<String, GatewayError> {
        if cfg.endpoint.is_empty() {
            return Err(GatewayError::Config(format!("no endpoint; set {ENV_ENDPOINT}")));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = serde_json::json!({
            "model": cfg.model.as_deref().unwrap_or("default"),
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = agent.post(&cfg.endpoint).header("Content-Type", "application/json");
        if let Some(t) = &cfg.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| match e {
            ureq::Error::Timeout(_) => GatewayError::Timeout,
            other => GatewayError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        match status {
            401 | 403 => Err(GatewayError::Auth(status)),
            429 | 500..=599 => Err(GatewayError::Transport(format!("HTTP {status}"))),
            200..=299 => Ok(extract_content(&text)),
            _ => Err(GatewayError::Transport(format!("HTTP {status}: {text}"))),
        }
    }
}

fn extract_content(body: &str) -> String {
    serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.pointer("/choices/0/message/content").and_then(|c| c.as_str()).map(str::to_string))
        .unwrap_or_else(|| body.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockBehavior {
    /// Answer with the positive keyword iff the prompt contains a keyword.
    Keyword(Vec<String>),
    /// Answer with text containing neither label.
    Garbage,
}

/// Deterministic offline stand-in for the remote classifier. Optionally
/// fails the first `fail_first` calls with a transport error.
#[derive(Debug)]
pub struct MockTransport {
    pub behavior: MockBehavior,
    pub fail_first: usize,
    calls: AtomicUsize,
}

impl MockTransport {
    pub fn keywords<I, S>(keywords: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        MockTransport {
            behavior: MockBehavior::Keyword(keywords.into_iter().map(|k| normalize(k.as_ref())).collect()),
            fail_first: 0,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn garbage() -> Self {
        MockTransport {
            behavior: MockBehavior::Garbage,
            fail_first: 0,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn failing_first(mut self, n: usize) -> Self {
        self.fail_first = n;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for MockTransport {
    fn send(&self, prompt: &str, cfg: &RemoteClassifierConfig) -> Result<String, GatewayError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.fail_first {
            return Err(GatewayError::Transport("mock: connection reset".into()));
        }
        match &self.behavior {
            MockBehavior::Garbage => Ok("¯\\_(ツ)_/¯ I'd rather not say".into()),
            MockBehavior::Keyword(keys) => {
                let text = normalize(prompt);
                let hit = keys.iter().any(|k| text.contains(k.as_str()));
                Ok(if hit {
                    cfg.positive_keyword.clone()
                } else {
                    cfg.negative_keyword.clone()
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteVerdict {
    pub label: Label,
    pub raw_response: String,
}

#[derive(Serialize)]
struct AuditEntry<'a> {
    timestamp: String,
    endpoint: &'a str,
    attempt: u32,
    prompt: &'a str,
    raw_response: Option<&'a str>,
    error: Option<String>,
}

struct InFlight {
    count: Mutex<usize>,
    freed: Condvar,
}

/// A configured remote classifier.
pub struct Gateway {
    cfg: RemoteClassifierConfig,
    transport: Box<dyn Transport>,
    in_flight: InFlight,
}

impl Gateway {
    pub fn new(cfg: RemoteClassifierConfig, transport: Box<dyn Transport>) -> Result<Self, GatewayError> {
        cfg.validate()?;
        Ok(Gateway {
            cfg,
            transport,
            in_flight: InFlight {
                count: Mutex::new(0),
                freed: Condvar::new(),
            },
        })
    }

    pub fn config(&self) -> &RemoteClassifierConfig {
        &self.cfg
    }

    fn audit(&self, attempt: u32, prompt: &str, result: &Result<String, GatewayError>) {
        if let Some(path) = &self.cfg.audit_log {
            let entry = AuditEntry {
                timestamp: chrono::Utc::now().to_rfc3339(),
                endpoint: &self.cfg.endpoint,
                attempt,
                prompt,
                raw_response: result.as_ref().ok().map(String::as_str),
                error: result.as_ref().err().map(ToString::to_string),
            };
            if let Err(e) = append_json_line(path, &entry) {
                tracing::warn!(error = %e, "could not write remote audit log");
            }
        }
    }

    fn acquire(&self) {
        let mut n = self.in_flight.count.lock().expect("in-flight lock");
        while *n >= self.cfg.max_in_flight {
            n = self.in_flight.freed.wait(n).expect("in-flight lock");
        }
        *n += 1;
    }

    fn release(&self) {
        *self.in_flight.count.lock().expect("in-flight lock") -= 1;
        self.in_flight.freed.notify_one();
    }

    /// Classify lyrics, retrying transport failures with exponential backoff.
    /// Responses without a label keyword are returned as
    /// [`GatewayError::Unparseable`], never mapped to a label.
    pub fn classify_remote(&self, lyrics: &str) -> Result<RemoteVerdict, GatewayError> {
        let prompt = self.cfg.fill(lyrics);
        let mut attempt = 0;
        loop {
            self.acquire();
            let result = self.transport.send(&prompt, &self.cfg);
            self.release();
            self.audit(attempt, &prompt, &result);
            match result {
                Ok(raw) => {
                    return match parse_label(&raw, &self.cfg.positive_keyword, &self.cfg.negative_keyword) {
                        Some(label) => Ok(RemoteVerdict {
                            label,
                            raw_response: raw,
                        }),
                        None => Err(GatewayError::Unparseable { raw_response: raw }),
                    };
                }
                Err(e) if e.retryable() && attempt < self.cfg.max_retries => {
                    let delay = self.cfg.backoff.saturating_mul(1 << attempt.min(16));
                    tracing::debug!(attempt, ?delay, error = %e, "retrying remote classifier");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

impl Classifier for Gateway {
    fn probability(&self, lyrics: &str) -> Result<f64, ScoreError> {
        let v = self.classify_remote(lyrics)?;
        Ok(if v.label.is_explicit() { 1.0 } else { 0.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RemoteClassifierConfig {
        RemoteClassifierConfig {
            backoff: Duration::ZERO,
            ..Default::default()
        }
    }

    #[test]
    fn default_template_is_valid() {
        assert!(cfg().validate().is_ok());
        assert!(!default_template().contains('#'));
        let bad = RemoteClassifierConfig {
            prompt_template: "{lyrics} {lyrics}".into(),
            ..cfg()
        };
        assert!(bad.validate().is_err());
        let bad = RemoteClassifierConfig {
            timeout: Duration::ZERO,
            ..cfg()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn keyword_parsing() {
        let p = |s| parse_label(s, "EXPLICIT", "NOT_EXPLICIT");
        assert_eq!(p("EXPLICIT"), Some(Label::Explicit));
        assert_eq!(p("NOT_EXPLICIT"), Some(Label::NonExplicit));
        assert_eq!(p("Answer: not_explicit."), Some(Label::NonExplicit));
        assert_eq!(p("I think EXPLICIT, not NOT_EXPLICIT"), Some(Label::Explicit));
        assert_eq!(p("NOT_EXPLICIT; some say EXPLICIT"), Some(Label::NonExplicit));
        assert_eq!(p("EXPLICITLY unclear"), None);
        assert_eq!(p("garbage"), None);
    }

    #[test]
    fn mock_keyword_rule() {
        let g = Gateway::new(cfg(), Box::new(MockTransport::keywords(["bellaqueo"]))).unwrap();
        assert_eq!(g.classify_remote("te gusta el BELLAQUEO").unwrap().label, Label::Explicit);
        assert_eq!(g.classify_remote("la playa y el sol").unwrap().label, Label::NonExplicit);
    }

    #[test]
    fn garbage_is_an_error_with_raw_response() {
        let g = Gateway::new(cfg(), Box::new(MockTransport::garbage())).unwrap();
        match g.classify_remote("x") {
            Err(GatewayError::Unparseable { raw_response }) => assert!(raw_response.contains("rather not")),
            other => panic!("{other:?}"),
        }
        assert!(g.probability("x").is_err());
    }

    #[test]
    fn retries_then_gives_up() {
        let g = Gateway::new(
            RemoteClassifierConfig {
                max_retries: 2,
                ..cfg()
            },
            Box::new(MockTransport::keywords(["x"]).failing_first(2)),
        )
        .unwrap();
        assert!(g.classify_remote("x").is_ok());
        let g = Gateway::new(
            RemoteClassifierConfig {
                max_retries: 2,
                ..cfg()
            },
            Box::new(MockTransport::keywords(["x"]).failing_first(3)),
        )
        .unwrap();
        assert!(matches!(g.classify_remote("x"), Err(GatewayError::Transport(_))));
    }

    #[test]
    fn audit_log_records_requests() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("audit.jsonl");
        let g = Gateway::new(
            RemoteClassifierConfig {
                audit_log: Some(log.clone()),
                token: Some("secret-token".into()),
                ..cfg()
            },
            Box::new(MockTransport::keywords(["x"])),
        )
        .unwrap();
        g.classify_remote("x").unwrap();
        let text = std::fs::read_to_string(&log).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"raw_response\":\"EXPLICIT\""));
        assert!(!text.contains("secret-token"));
        assert!(!format!("{:?}", g.config()).contains("secret-token"));
    }

    #[test]
    fn http_without_endpoint_is_config_error() {
        assert!(matches!(HttpTransport.send("p", &cfg()), Err(GatewayError::Config(_))));
    }

    #[test]
    fn extracts_chat_content() {
        assert_eq!(
            extract_content(r#"{"choices":[{"message":{"content":"NOT_EXPLICIT"}}]}"#),
            "NOT_EXPLICIT"
        );
        assert_eq!(extract_content("EXPLICIT"), "EXPLICIT");
    }
}
