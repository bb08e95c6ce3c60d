//! Text-LLM clients.
//!
//! HTTP contract: `POST {endpoint}` with header `Authorization: Bearer
//! {key}` (when a key is configured), `Content-Type: application/json` and
//! body `{"prompt": "...", "max_tokens": N}`. A 2xx reply must carry
//! `{"text": "..."}`. 429 and 5xx replies and transport errors are retried
//! with exponential backoff; other 4xx replies fail immediately.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 200,
            max_backoff_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): doubling from the
    /// initial backoff, capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(20);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

/// Outcome of one attempt: success, a failure worth retrying, or a final one.
pub enum Attempt<T> {
    Done(T),
    Retry(Error),
    Fatal(Error),
}

/// Runs `f` up to `max_attempts` times, sleeping between retryable failures.
pub fn with_retries<T>(policy: &RetryPolicy, mut f: impl FnMut(u32) -> Attempt<T>) -> Result<T> {
    let attempts = policy.max_attempts.max(1);
    let mut last = None;
    for attempt in 1..=attempts {
        match f(attempt) {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Retry(e) => {
                log::warn!("client attempt {attempt}/{attempts} failed: {e}");
                last = Some(e);
                if attempt < attempts {
                    thread::sleep(policy.backoff(attempt));
                }
            }
        }
    }
    Err(last.unwrap_or_else(|| Error::Client("no attempts made".into())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    /// Completion endpoint; no endpoint means offline-only.
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_ms: u64,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            api_key_env: "CTXASR_LLM_API_KEY".to_owned(),
            timeout_ms: 30_000,
            max_tokens: 256,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    text: String,
}

pub struct HttpClient {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    max_tokens: u32,
    retry: RetryPolicy,
}

impl HttpClient {
    /// `None` when the config names no endpoint.
    pub fn from_config(cfg: &ClientConfig) -> Option<Self> {
        let endpoint = cfg.endpoint.clone()?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Some(Self::new(endpoint, api_key, cfg))
    }

    pub fn new(endpoint: String, api_key: Option<String>, cfg: &ClientConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint,
            api_key,
            max_tokens: cfg.max_tokens,
            retry: cfg.retry.clone(),
        }
    }

    fn attempt(&self, body: &str) -> Attempt<String> {
        let mut req = self.agent.post(&self.endpoint).header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(Error::Client(format!("{}: {e}", self.endpoint))),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(Error::Client(format!("reading reply: {e}"))),
        };
        match status {
            200..=299 => match serde_json::from_str::<CompletionResponse>(&text) {
                Ok(r) => Attempt::Done(r.text),
                Err(e) => Attempt::Fatal(Error::Client(format!("malformed reply: {e}"))),
            },
            429 | 500..=599 => Attempt::Retry(Error::Client(format!("HTTP {status}"))),
            _ => Attempt::Fatal(Error::Client(format!("HTTP {status}: {text}"))),
        }
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::to_string(&CompletionRequest {
            prompt,
            max_tokens: self.max_tokens,
        })
        .expect("request serializes");
        with_retries(&self.retry, |_| self.attempt(&body))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::{Arc, Mutex};

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 1,
            max_backoff_ms: 2,
        }
    }

    #[test]
    fn backoff_doubles_up_to_the_cap() {
        let p = RetryPolicy { max_attempts: 5, initial_backoff_ms: 100, max_backoff_ms: 350 };
        let ms: Vec<u128> = (1..=4).map(|a| p.backoff(a).as_millis()).collect();
        assert_eq!(ms, [100, 200, 350, 350]);
    }

    #[test]
    fn retries_stop_at_success_or_fatal() {
        let calls = AtomicU32::new(0);
        let out = with_retries(&fast(), |a| {
            calls.fetch_add(1, Ordering::SeqCst);
            if a < 3 { Attempt::Retry(Error::Client("busy".into())) } else { Attempt::Done(a) }
        });
        assert_eq!(out.unwrap(), 3);
        let calls = AtomicU32::new(0);
        let out: Result<()> = with_retries(&fast(), |_| {
            calls.fetch_add(1, Ordering::SeqCst);
            Attempt::Fatal(Error::Client("bad request".into()))
        });
        assert!(out.is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    /// Serves the scripted `(status, body)` replies in order, one request
    /// per connection, recording each request head and body.
    fn serve(replies: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/complete", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    head.push_str(&line);
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(format!("{head}\n{}", String::from_utf8(buf).unwrap()));
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, seen)
    }

    #[test]
    fn http_client_retries_server_errors_then_parses_the_reply() {
        let (url, seen) = serve(vec![(503, "{}"), (200, r#"{"text":"zorvex, quillan"}"#)]);
        let cfg = ClientConfig { retry: fast(), max_tokens: 7, ..ClientConfig::default() };
        let client = HttpClient::new(url, Some("k123".into()), &cfg);
        assert_eq!(client.complete("find terms").unwrap(), "zorvex, quillan");
        let seen = seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert!(seen[1].to_ascii_lowercase().contains("authorization: bearer k123"));
        assert!(seen[1].ends_with(r#"{"prompt":"find terms","max_tokens":7}"#));
    }

    #[test]
    fn http_client_gives_up_on_client_errors() {
        let (url, seen) = serve(vec![(400, r#"{"error":"no"}"#)]);
        let cfg = ClientConfig { retry: fast(), ..ClientConfig::default() };
        let client = HttpClient::new(url, None, &cfg);
        assert!(matches!(client.complete("x"), Err(Error::Client(_))));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }
}
