//! OpenAI-compatible chat-completions client.
//!
//! Request body:
//!
//! ```json
//! {"model": "<model>",
//!  "messages": [
//!    {"role": "system", "content": "<system text>"},
//!    {"role": "user", "content": [
//!      {"type": "image_url", "image_url": {"url": "data:image/png;base64,<png>"}},
//!      {"type": "text", "text": "<user text>"}]}],
//!  "temperature": 0.0,
//!  "reasoning_effort": "low"}
//! ```
//!
//! `temperature` and `reasoning_effort` are omitted when unset. The reply
//! text is read from `choices[0].message.content`.

use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::backend::{Backend, BackendConfig, BackendError, BackendKind, QueryRequest, ReasoningEffort};
use super::PromptBundle;

pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key_env: Option<String>,
    temperature: Option<f64>,
    reasoning_effort: Option<ReasoningEffort>,
}

impl HttpChatBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self, String> {
        let BackendKind::HttpChat {
            endpoint,
            model,
            api_key_env,
            temperature,
            reasoning_effort,
            timeout_secs,
        } = &cfg.kind
        else {
            return Err(format!("backend {} is not an http_chat backend", cfg.id));
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(*timeout_secs))
            .build()
            .map_err(|e| format!("backend {}: cannot build HTTP client: {e}", cfg.id))?;
        Ok(Self {
            client,
            endpoint: endpoint.clone(),
            model: model.clone(),
            api_key_env: api_key_env.clone(),
            temperature: *temperature,
            reasoning_effort: *reasoning_effort,
        })
    }

    pub fn request_body(&self, prompt: &PromptBundle) -> Value {
        let image = base64::engine::general_purpose::STANDARD.encode(&prompt.image_bytes);
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": [
                    {"type": "image_url", "image_url": {"url": format!("data:image/png;base64,{image}")}},
                    {"type": "text", "text": prompt.user_text},
                ]},
            ],
        });
        if let Some(t) = self.temperature {
            body["temperature"] = json!(t);
        }
        if let Some(r) = self.reasoning_effort {
            body["reasoning_effort"] = serde_json::to_value(r).expect("enum serializes");
        }
        body
    }
}

impl Backend for HttpChatBackend {
    fn query(&self, req: &QueryRequest<'_>) -> Result<String, BackendError> {
        let mut builder = self.client.post(&self.endpoint).json(&self.request_body(req.prompt));
        if let Some(var) = &self.api_key_env {
            let key =
                std::env::var(var).map_err(|_| BackendError::Auth(format!("environment variable {var} is not set")))?;
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| BackendError::Transient(format!("request failed: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::Transient(format!("reading response body: {e}")))?;
        if !status.is_success() {
            let msg = format!("HTTP {status}: {}", truncate(&text, 300));
            return Err(match status.as_u16() {
                401 | 403 => BackendError::Auth(msg),
                408 | 429 | 500..=599 => BackendError::Transient(msg),
                _ => BackendError::Permanent(msg),
            });
        }
        let v: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Permanent(format!("response is not JSON: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| BackendError::Permanent("response has no choices[0].message.content".into()))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::GridSpec;
    use crate::corpus::{FrontalSubtype, LocalizationTask, Pathology, ViewPosition};
    use crate::querier::{build_prompt, PromptOptions};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::Arc;

    /// Serves one canned (status, body) per connection and returns the
    /// request bodies it saw.
    fn serve(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<(String, String)>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    let lower = l.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = l["authorization:".len()..].trim().to_string();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push((String::from_utf8(buf).unwrap(), auth));
                let mut s = stream;
                write!(
                    s,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (url, handle)
    }

    fn cfg(url: &str, key_env: Option<&str>) -> BackendConfig {
        BackendConfig {
            id: "remote".into(),
            kind: BackendKind::HttpChat {
                endpoint: url.into(),
                model: "vision-model".into(),
                api_key_env: key_env.map(Into::into),
                temperature: Some(0.0),
                reasoning_effort: Some(ReasoningEffort::Low),
                timeout_secs: 10,
            },
            max_retries: 3,
            min_request_interval_ms: 0,
            max_in_flight: 1,
            retry_base_delay_ms: 0,
        }
    }

    fn task() -> LocalizationTask {
        LocalizationTask {
            image_id: "p1_s1_view1_frontal".into(),
            pathology: Pathology::Edema,
            view: ViewPosition::Frontal(FrontalSubtype::Ap),
            grid: GridSpec::square(8).unwrap(),
        }
    }

    fn reply(content: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    #[test]
    fn request_shape_and_reply() {
        let (url, server) = serve(vec![(200, reply("C5"))]);
        std::env::set_var("GRIDLOC_TEST_KEY_A", "sk-test");
        let b = HttpChatBackend::new(&cfg(&url, Some("GRIDLOC_TEST_KEY_A"))).unwrap();
        let t = task();
        let prompt = build_prompt(&t, Arc::from(&[137u8, 80, 78, 71][..]), &PromptOptions::default());
        let out = b
            .query(&QueryRequest {
                task: &t,
                prompt: &prompt,
                overlap: None,
            })
            .unwrap();
        assert_eq!(out, "C5");
        let seen = server.join().unwrap();
        let body: Value = serde_json::from_str(&seen[0].0).unwrap();
        assert_eq!(seen[0].1, "Bearer sk-test");
        assert_eq!(body["model"], "vision-model");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["reasoning_effort"], "low");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(
            body["messages"][1]["content"][0]["image_url"]["url"],
            "data:image/png;base64,iVBORw=="
        );
        assert_eq!(body["messages"][1]["content"][1]["text"], prompt.user_text.as_str());
    }

    #[test]
    fn status_mapping() {
        let (url, server) = serve(vec![
            (503, "busy".into()),
            (401, "no".into()),
            (400, "bad".into()),
            (200, "{}".into()),
        ]);
        let b = HttpChatBackend::new(&cfg(&url, None)).unwrap();
        let t = task();
        let prompt = build_prompt(&t, Arc::from(&[][..]), &PromptOptions::default());
        let req = QueryRequest {
            task: &t,
            prompt: &prompt,
            overlap: None,
        };
        assert!(matches!(b.query(&req), Err(BackendError::Transient(_))));
        assert!(matches!(b.query(&req), Err(BackendError::Auth(_))));
        assert!(matches!(b.query(&req), Err(BackendError::Permanent(_))));
        assert!(matches!(b.query(&req), Err(BackendError::Permanent(_))));
        server.join().unwrap();
    }

    #[test]
    fn missing_key_is_auth_failure() {
        let b = HttpChatBackend::new(&cfg("http://127.0.0.1:9/x", Some("GRIDLOC_TEST_KEY_UNSET"))).unwrap();
        let t = task();
        let prompt = build_prompt(&t, Arc::from(&[][..]), &PromptOptions::default());
        let r = b.query(&QueryRequest {
            task: &t,
            prompt: &prompt,
            overlap: None,
        });
        assert!(matches!(r, Err(BackendError::Auth(_))));
    }

    #[test]
    fn unreachable_endpoint_is_transient() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        drop(listener);
        let b = HttpChatBackend::new(&cfg(&url, None)).unwrap();
        let t = task();
        let prompt = build_prompt(&t, Arc::from(&[][..]), &PromptOptions::default());
        let r = b.query(&QueryRequest {
            task: &t,
            prompt: &prompt,
            overlap: None,
        });
        assert!(matches!(r, Err(BackendError::Transient(_))), "{r:?}");
    }
}
