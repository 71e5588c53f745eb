//! Chat-completion clients: the provider abstraction, an HTTP implementation
//! with retries and rate limiting, and the request plumbing shared with the
//! remote embedder.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub provider_id: String,
    pub endpoint_url: String,
    pub model_name: String,
    pub max_retries: u32,
    pub timeout_ms: u64,
    /// Requests per minute; 0 disables limiting.
    pub rate_limit: f64,
    /// Environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    /// Dotted path to the assistant text (or embedding) in the response JSON.
    pub response_path: String,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub backoff_base_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            provider_id: "mock".into(),
            endpoint_url: String::new(),
            model_name: String::new(),
            max_retries: 3,
            timeout_ms: 60_000,
            rate_limit: 60.0,
            api_key_env: None,
            response_path: "choices.0.message.content".into(),
            temperature: 0.0,
            max_in_flight: 4,
            backoff_base_ms: 1_000,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.provider_id.is_empty() {
            problems.push("provider_id must be non-empty".into());
        }
        if self.timeout_ms == 0 {
            problems.push(format!("provider {}: timeout must be > 0", self.provider_id));
        }
        if self.rate_limit < 0.0 {
            problems.push(format!("provider {}: rate_limit must be >= 0", self.provider_id));
        }
        if self.max_in_flight == 0 {
            problems.push(format!("provider {}: max_in_flight must be >= 1", self.provider_id));
        }
        problems
    }
}

/// A text-in, text-out language model.
pub trait LlmClient: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String>;
    /// Upper bound on concurrent requests issued by batch helpers.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Walk a dotted path (`choices.0.message.content`) through a JSON value.
pub fn json_at_path<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.')
        .filter(|s| !s.is_empty())
        .try_fold(value, |node, key| match node {
            Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get(i)),
            Value::Object(map) => map.get(key),
            _ => None,
        })
}

/// Token bucket refilled continuously at `per_minute / 60` tokens per second.
#[derive(Debug)]
pub struct RateLimiter {
    per_second: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(per_minute: f64) -> Self {
        let per_second = per_minute / 60.0;
        let capacity = per_second.max(1.0);
        RateLimiter {
            per_second,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Time to wait before a token is available, consuming it if none.
    fn reserve(&self) -> Duration {
        if self.per_second <= 0.0 {
            return Duration::ZERO;
        }
        let mut state = self.state.lock().unwrap();
        let now = Instant::now();
        let elapsed = now.duration_since(state.1).as_secs_f64();
        state.0 = (state.0 + elapsed * self.per_second).min(self.capacity);
        state.1 = now;
        state.0 -= 1.0;
        if state.0 >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-state.0 / self.per_second)
        }
    }

    pub fn acquire(&self) {
        let wait = self.reserve();
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Exponential backoff delay for `attempt` (0-based): base * 2^attempt plus
/// up to 25% jitter.
pub fn backoff_delay(base: Duration, attempt: u32) -> Duration {
    let exp = base.saturating_mul(1u32 << attempt.min(16));
    let jitter = rand::rng().random_range(0.0..=0.25);
    exp + exp.mul_f64(jitter)
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

/// JSON-over-HTTP POST with retries on transport errors, 429 and 5xx.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    config: ProviderConfig,
    limiter: RateLimiter,
}

impl HttpTransport {
    pub fn new(config: &ProviderConfig) -> Result<Self> {
        let problems = config.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::Provider {
                provider: config.provider_id.clone(),
                message: e.to_string(),
            })?;
        Ok(HttpTransport {
            client,
            config: config.clone(),
            limiter: RateLimiter::new(config.rate_limit),
        })
    }

    fn attempt(&self, body: &Value) -> std::result::Result<Value, Failure> {
        let mut request = self.client.post(&self.config.endpoint_url).json(body);
        if let Some(var) = &self.config.api_key_env {
            let key = std::env::var(var).map_err(|_| Failure::Fatal(format!("environment variable {var} not set")))?;
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(Failure::Fatal(format!("HTTP {status}: {text}")));
        }
        response
            .json::<Value>()
            .map_err(|e| Failure::Fatal(format!("response is not JSON: {e}")))
    }

    pub fn post_json(&self, body: &Value) -> Result<Value> {
        let base = Duration::from_millis(self.config.backoff_base_ms);
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let delay = backoff_delay(base, attempt - 1);
                log::debug!("{}: retry {attempt} after {delay:?}", self.config.provider_id);
                std::thread::sleep(delay);
            }
            self.limiter.acquire();
            match self.attempt(body) {
                Ok(v) => return Ok(v),
                Err(Failure::Retryable(msg)) => last = msg,
                Err(Failure::Fatal(msg)) => {
                    return Err(Error::Provider {
                        provider: self.config.provider_id.clone(),
                        message: msg,
                    })
                }
            }
        }
        Err(Error::Provider {
            provider: self.config.provider_id.clone(),
            message: format!("gave up after {} retries: {last}", self.config.max_retries),
        })
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

/// Chat-completion provider: POSTs `{model, messages, temperature}`.
pub struct HttpLlm {
    config: ProviderConfig,
    transport: HttpTransport,
}

impl HttpLlm {
    pub fn new(config: ProviderConfig) -> Result<Self> {
        let transport = HttpTransport::new(&config)?;
        Ok(HttpLlm { config, transport })
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        serde_json::json!({
            "model": self.config.model_name,
            "messages": [ChatMessage { role: "user", content: prompt }],
            "temperature": self.config.temperature,
        })
    }
}

impl LlmClient for HttpLlm {
    fn id(&self) -> &str {
        &self.config.provider_id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let response = self.transport.post_json(&self.request_body(prompt))?;
        match json_at_path(&response, &self.config.response_path) {
            Some(Value::String(s)) => Ok(s.clone()),
            _ => Err(Error::parse(
                format!("assistant text at `{}`", self.config.response_path),
                response.to_string(),
            )),
        }
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_walk() {
        let v: Value = serde_json::json!({"choices":[{"message":{"content":"hi"}}]});
        assert_eq!(json_at_path(&v, "choices.0.message.content"), Some(&Value::String("hi".into())));
        assert_eq!(json_at_path(&v, "choices.1.message"), None);
        assert_eq!(json_at_path(&v, "choices.x"), None);
    }

    #[test]
    fn backoff_grows() {
        let base = Duration::from_millis(100);
        let d0 = backoff_delay(base, 0);
        let d2 = backoff_delay(base, 2);
        assert!(d0 >= base && d0 <= base.mul_f64(1.25));
        assert!(d2 >= base * 4 && d2 <= (base * 4).mul_f64(1.25));
    }

    #[test]
    fn limiter_spaces_requests() {
        // 600/min = 10/s, bucket of 10: the 11th token waits ~0.1s
        let limiter = RateLimiter::new(600.0);
        for _ in 0..10 {
            assert!(limiter.reserve().is_zero());
        }
        let wait = limiter.reserve();
        assert!(wait > Duration::from_millis(50) && wait <= Duration::from_millis(101), "{wait:?}");
    }

    #[test]
    fn unlimited_never_waits() {
        let limiter = RateLimiter::new(0.0);
        for _ in 0..100 {
            assert!(limiter.reserve().is_zero());
        }
    }

    #[test]
    fn invalid_config_lists_every_field() {
        let cfg = ProviderConfig {
            provider_id: String::new(),
            timeout_ms: 0,
            ..ProviderConfig::default()
        };
        assert_eq!(cfg.validate().len(), 2);
        assert!(matches!(HttpLlm::new(cfg), Err(Error::Config(p)) if p.len() == 2));
    }
}
