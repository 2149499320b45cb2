use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Gateway, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    /// Root of an OpenAI-compatible API, e.g. `https://api.openai.com/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_concurrent: usize,
    pub temperature: f64,
    /// First backoff delay; doubles on every retry.
    pub backoff_base_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "gpt-oss-120b".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            max_retries: 2,
            max_concurrent: 4,
            temperature: 0.0,
            backoff_base_ms: 1000,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.base_url.trim().is_empty() {
            return Err(GatewayError::Config("base_url is empty".into()));
        }
        if self.model.trim().is_empty() {
            return Err(GatewayError::Config("model is empty".into()));
        }
        if self.max_concurrent == 0 {
            return Err(GatewayError::Config("max_concurrent must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::Config(format!("invalid temperature {}", self.temperature)));
        }
        Ok(())
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// One attempt as recorded in the gateway log, with the key scrubbed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub attempt: u32,
    pub request: String,
    pub status: Option<u16>,
    pub response: String,
}

/// Chat-completions client with bounded retries and exponential backoff.
pub struct HttpGateway {
    cfg: GatewayConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    log: Mutex<Vec<LogEntry>>,
}

impl std::fmt::Debug for HttpGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpGateway")
            .field("cfg", &self.cfg)
            .field("api_key", &self.api_key.as_ref().map(|_| "[REDACTED]"))
            .finish()
    }
}

impl HttpGateway {
    /// Reads the key from `cfg.api_key_env`; an unset variable means no
    /// Authorization header (local endpoints often need none).
    pub fn new(cfg: GatewayConfig) -> Result<Self, GatewayError> {
        let key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(cfg, key)
    }

    pub fn with_key(cfg: GatewayConfig, api_key: Option<String>) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpGateway { cfg, api_key, agent, log: Mutex::new(Vec::new()) })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    /// Snapshot of every attempt so far.
    pub fn log(&self) -> Vec<LogEntry> {
        self.log.lock().expect("log lock").clone()
    }

    fn redact(&self, text: &str) -> String {
        match &self.api_key {
            Some(k) => text.replace(k.as_str(), "[REDACTED]"),
            None => text.to_string(),
        }
    }

    fn record(&self, attempt: u32, request: &str, status: Option<u16>, response: &str) {
        let entry = LogEntry {
            attempt,
            request: self.redact(request),
            status,
            response: self.redact(response),
        };
        log::debug!("gateway attempt {} status {:?}", entry.attempt, entry.status);
        self.log.lock().expect("log lock").push(entry);
    }

    fn send_once(&self, body: &str) -> Result<(u16, String), String> {
        let mut req = self.agent.post(&self.cfg.endpoint()).header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok((status, text))
    }
}

fn extract_content(body: &str) -> Result<String, GatewayError> {
    let v: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| GatewayError::Transport(format!("response is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| GatewayError::Transport("response has no choices[0].message.content".into()))
}

impl Gateway for HttpGateway {
    fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        let body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
        })
        .to_string();
        let mut last_err = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let delay = self.cfg.backoff_base_ms.saturating_mul(1u64 << (attempt - 1).min(20));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.send_once(&body) {
                Ok((status, text)) => {
                    self.record(attempt, &body, Some(status), &text);
                    match status {
                        200..=299 => return extract_content(&text),
                        400..=499 => {
                            return Err(GatewayError::Config(format!(
                                "endpoint rejected request with HTTP {status}: {}",
                                self.redact(text.trim())
                            )))
                        }
                        _ => last_err = format!("HTTP {status}"),
                    }
                }
                Err(e) => {
                    let e = self.redact(&e);
                    self.record(attempt, &body, None, &e);
                    last_err = e;
                }
            }
        }
        Err(GatewayError::Transport(format!(
            "{} attempts failed, last: {last_err}",
            self.cfg.max_retries + 1
        )))
    }

    fn max_concurrent(&self) -> usize {
        self.cfg.max_concurrent
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    /// Serves scripted (status, body) replies, one per connection, and
    /// records raw requests.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                head.push_str(&String::from_utf8_lossy(&buf));
                seen2.lock().unwrap().push(head);
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
                stream.flush().unwrap();
            }
        });
        (format!("http://{addr}/v1"), seen)
    }

    fn reply(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    fn cfg(url: String, retries: u32) -> GatewayConfig {
        GatewayConfig {
            base_url: url,
            model: "test-model".into(),
            max_retries: retries,
            backoff_base_ms: 1,
            timeout_secs: 5,
            ..GatewayConfig::default()
        }
    }

    #[test]
    fn canned_reply_returned_verbatim() {
        let (url, seen) = serve(vec![(200, reply("hello\nANSWER: churn"))]);
        let gw = HttpGateway::with_key(cfg(url, 0), Some("sk-secret-123".into())).unwrap();
        assert_eq!(gw.complete("hi").unwrap(), "hello\nANSWER: churn");
        let req = seen.lock().unwrap()[0].clone();
        assert!(req.starts_with("POST /v1/chat/completions"));
        assert!(req.contains("\"temperature\":0.0"));
        assert!(req.contains("\"model\":\"test-model\""));
    }

    #[test]
    fn retries_server_errors_then_succeeds() {
        let (url, seen) = serve(vec![(500, "{}".into()), (500, "{}".into()), (200, reply("ok"))]);
        let gw = HttpGateway::with_key(cfg(url, 2), None).unwrap();
        assert_eq!(gw.complete("p").unwrap(), "ok");
        assert_eq!(seen.lock().unwrap().len(), 3);
        assert_eq!(gw.log().len(), 3);
    }

    #[test]
    fn gives_up_after_retries() {
        let (url, _) = serve(vec![(503, "{}".into()), (503, "{}".into())]);
        let gw = HttpGateway::with_key(cfg(url, 1), None).unwrap();
        assert!(matches!(gw.complete("p"), Err(GatewayError::Transport(_))));
    }

    #[test]
    fn client_error_is_config_error_without_retry() {
        let (url, seen) = serve(vec![(401, "{\"error\":\"bad key sk-secret-123\"}".into()), (200, reply("no"))]);
        let gw = HttpGateway::with_key(cfg(url, 3), Some("sk-secret-123".into())).unwrap();
        match gw.complete("p") {
            Err(GatewayError::Config(msg)) => assert!(!msg.contains("sk-secret-123")),
            other => panic!("expected config error, got {other:?}"),
        }
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn key_never_reaches_log() {
        let key = "sk-very-secret-key";
        let (url, seen) = serve(vec![(200, reply(&format!("echo {key}")))]);
        let gw = HttpGateway::with_key(cfg(url, 0), Some(key.into())).unwrap();
        let _ = gw.complete(&format!("prompt mentioning {key}")).unwrap();
        assert!(seen.lock().unwrap()[0].contains(&format!("Bearer {key}")));
        let dumped = serde_json::to_string(&gw.log()).unwrap();
        assert!(!dumped.contains(key));
        assert!(!format!("{gw:?}").contains(key));
    }

    #[test]
    fn zero_concurrency_rejected() {
        let c = GatewayConfig { max_concurrent: 0, ..GatewayConfig::default() };
        assert!(matches!(HttpGateway::with_key(c, None), Err(GatewayError::Config(_))));
    }
}
