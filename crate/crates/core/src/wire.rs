//! JSON-over-HTTP protocol shared by every remote model client.
//!
//! Request: `{"messages": [{"role", "content": [parts]}], "max_tokens"?}`
//! where a part is `{"type": "text", "text"}` or `{"type": "image", "png_base64"}`.
//! Response: `{"text", "usage"?: {"completion_tokens"?, "segment_tokens"?}}`.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::toolbox::{encode_png, ImageBuffer};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Part {
    Text { text: String },
    Image { png_base64: String },
}

impl Part {
    pub fn text(text: impl Into<String>) -> Self {
        Part::Text { text: text.into() }
    }

    pub fn image(img: &ImageBuffer) -> Self {
        Part::Image {
            png_base64: base64::engine::general_purpose::STANDARD.encode(encode_png(img)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Speaker,
    pub content: Vec<Part>,
}

impl Message {
    pub fn new(role: Speaker, content: Vec<Part>) -> Self {
        Self { role, content }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub completion_tokens: Option<u32>,
    /// Per tagged region, in emission order.
    #[serde(default)]
    pub segment_tokens: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WireError {
    #[error("endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Blocking client for one endpoint.
#[derive(Debug, Clone)]
pub struct WireClient {
    url: String,
    key: Option<String>,
    timeout: Duration,
    agent: ureq::Agent,
}

impl WireClient {
    pub fn new(url: impl Into<String>, key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.into(),
            key,
            timeout,
            agent,
        }
    }

    /// Reads the endpoint from `{prefix}_URL` and the optional bearer key from `{prefix}_KEY`.
    pub fn from_env(prefix: &str, timeout: Duration) -> Result<Self, WireError> {
        let url = std::env::var(format!("{prefix}_URL"))
            .map_err(|_| WireError::Unavailable(format!("{prefix}_URL is not set")))?;
        let key = std::env::var(format!("{prefix}_KEY")).ok();
        Ok(Self::new(url, key, timeout))
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn send(&self, request: &ChatRequest) -> Result<ChatResponse, WireError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(|e| self.map_err(e))?;
        resp.body_mut()
            .read_json::<ChatResponse>()
            .map_err(|e| match self.map_err(e) {
                WireError::Unavailable(m) => WireError::Protocol(m),
                other => other,
            })
    }

    fn map_err(&self, e: ureq::Error) -> WireError {
        match e {
            ureq::Error::Timeout(_) => WireError::Timeout(self.timeout),
            ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => {
                WireError::Timeout(self.timeout)
            }
            ureq::Error::StatusCode(code) => WireError::Unavailable(format!("HTTP {code}")),
            ureq::Error::Json(err) => WireError::Protocol(err.to_string()),
            other => WireError::Unavailable(other.to_string()),
        }
    }
}

/// Test helpers: a one-thread HTTP server answering from a closure.
#[cfg(test)]
pub(crate) mod mock {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::thread;

    use super::ChatRequest;

    /// Serves `n` requests, answering each with `reply(request)` as a JSON body.
    pub fn serve<F>(n: usize, reply: F) -> String
    where
        F: Fn(ChatRequest) -> String + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            for stream in listener.incoming().take(n) {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                let req: ChatRequest = serde_json::from_slice(&body).unwrap();
                let out = reply(req);
                write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    out.len(),
                    out
                )
                .unwrap();
            }
        });
        format!("http://{addr}/")
    }

    /// Accepts connections and never answers.
    pub fn silent() -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            let mut held = Vec::new();
            for stream in listener.incoming() {
                held.push(stream);
            }
        });
        format!("http://{addr}/")
    }

    /// An address with nothing listening.
    pub fn closed() -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        format!("http://{addr}/")
    }
}
