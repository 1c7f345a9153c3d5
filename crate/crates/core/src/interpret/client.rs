// SPDX-License-Identifier: MIT OR Apache-2.0

//! Chat clients: an OpenAI-compatible HTTP client and deterministic mocks.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One piece of a user message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Part {
    Text(String),
    /// PNG-encoded image bytes.
    Image(Vec<u8>),
}

/// A single-turn chat request.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChatRequest {
    pub parts: Vec<Part>,
}

impl ChatRequest {
    pub fn text(prompt: impl Into<String>) -> Self {
        Self {
            parts: vec![Part::Text(prompt.into())],
        }
    }

    pub fn with_images(prompt: impl Into<String>, images: &[Vec<u8>]) -> Self {
        let mut parts = vec![Part::Text(prompt.into())];
        parts.extend(images.iter().cloned().map(Part::Image));
        Self { parts }
    }

    /// All text parts joined by newlines.
    pub fn prompt(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &[u8]> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image(b) => Some(b.as_slice()),
            Part::Text(_) => None,
        })
    }
}

/// Anything that answers a chat request with text.
pub trait ChatClient: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String>;

    /// Model name recorded in archives.
    fn model(&self) -> &str {
        "mock"
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn chat(&self, req: &ChatRequest) -> Result<String> {
        (**self).chat(req)
    }
    fn model(&self) -> &str {
        (**self).model()
    }
}

impl<C: ChatClient + ?Sized> ChatClient for std::sync::Arc<C> {
    fn chat(&self, req: &ChatRequest) -> Result<String> {
        (**self).chat(req)
    }
    fn model(&self) -> &str {
        (**self).model()
    }
}

/// Connection settings for an OpenAI-compatible chat-completions endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatClientConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    pub template: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub max_images: usize,
    /// Environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
}

impl Default for ChatClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            template: "default".into(),
            timeout_secs: 120,
            max_retries: 3,
            retry_backoff_ms: 500,
            max_images: 5,
            api_key_env: Some("OPENAI_API_KEY".into()),
        }
    }
}

impl ChatClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.endpoint.trim().is_empty() {
            return Err(Error::Config("chat client endpoint is empty".into()));
        }
        if self.max_images < 1 {
            return Err(Error::Config("chat client max_images must be at least 1".into()));
        }
        Ok(())
    }
}

/// Blocking client for `POST {endpoint}` in the chat-completions shape, with
/// images sent as base64 PNG data URLs.
pub struct OpenAiChatClient {
    config: ChatClientConfig,
    http: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl OpenAiChatClient {
    pub fn new(config: ChatClientConfig) -> Result<Self> {
        config.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::client("cannot build HTTP client", Some(Box::new(e))))?;
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|v| std::env::var(v).ok())
            .filter(|k| !k.is_empty());
        Ok(Self { config, http, api_key })
    }

    /// JSON body sent for `req`.
    pub fn request_body(&self, req: &ChatRequest) -> Result<Value> {
        let n_images = req.images().count();
        if n_images > self.config.max_images {
            return Err(Error::invalid(format!(
                "{n_images} images exceed the client limit of {}",
                self.config.max_images
            )));
        }
        let b64 = base64::engine::general_purpose::STANDARD;
        let content: Vec<Value> = req
            .parts
            .iter()
            .map(|p| match p {
                Part::Text(t) => json!({"type": "text", "text": t}),
                Part::Image(png) => json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{}", b64.encode(png))}
                }),
            })
            .collect();
        Ok(json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        }))
    }

    fn attempt(&self, body: &Value) -> std::result::Result<String, (bool, Error)> {
        let mut rb = self.http.post(&self.config.endpoint).json(body);
        if let Some(k) = &self.api_key {
            rb = rb.bearer_auth(k);
        }
        let resp = rb
            .send()
            .map_err(|e| (true, Error::client("request failed", Some(Box::new(e)))))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| (true, Error::client("reading response failed", Some(Box::new(e)))))?;
        if !status.is_success() {
            let retry = status.is_server_error() || status.as_u16() == 429;
            return Err((retry, Error::client(format!("HTTP {status}: {text}"), None)));
        }
        let v: Value =
            serde_json::from_str(&text).map_err(|e| (false, Error::Parse(format!("response is not JSON: {e}"))))?;
        parse_response(&v).map_err(|e| (false, e))
    }
}

/// Extracts `choices[0].message.content` (a string or a list of text parts).
pub fn parse_response(v: &Value) -> Result<String> {
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| Error::Parse("response has no choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => {
            let texts: Vec<&str> = parts.iter().filter_map(|p| p.get("text")?.as_str()).collect();
            if texts.is_empty() {
                return Err(Error::Parse("response content has no text parts".into()));
            }
            Ok(texts.join(""))
        }
        _ => Err(Error::Parse("response content is not text".into())),
    }
}

impl ChatClient for OpenAiChatClient {
    fn chat(&self, req: &ChatRequest) -> Result<String> {
        let body = self.request_body(req)?;
        let mut last = None;
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.config.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(6)),
                ));
            }
            match self.attempt(&body) {
                Ok(s) => return Ok(s),
                Err((true, e)) => {
                    log::warn!("chat attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
                Err((false, e)) => return Err(e),
            }
        }
        let cause = last.map(|e| Box::new(e) as Box<dyn std::error::Error + Send + Sync>);
        Err(Error::client(
            format!("giving up after {} attempts", self.config.max_retries + 1),
            cause,
        ))
    }

    fn model(&self) -> &str {
        &self.config.model
    }
}

/// Replies with a fixed script, one answer per request, and records every
/// request it receives.
#[derive(Default)]
pub struct ScriptedClient {
    replies: Mutex<VecDeque<String>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedClient {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().map(|s| s.clone()).unwrap_or_default()
    }
}

impl ChatClient for ScriptedClient {
    fn chat(&self, req: &ChatRequest) -> Result<String> {
        if let Ok(mut s) = self.seen.lock() {
            s.push(req.clone());
        }
        self.replies
            .lock()
            .ok()
            .and_then(|mut r| r.pop_front())
            .ok_or_else(|| Error::client("scripted client has no replies left", None))
    }
}

/// Answers with the value of the longest key found (case-insensitively) in
/// the prompt, or a default.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct KeyedClient {
    pub entries: Vec<(String, String)>,
    pub default: Option<String>,
}

impl KeyedClient {
    pub fn new<K: Into<String>, V: Into<String>>(entries: impl IntoIterator<Item = (K, V)>) -> Self {
        Self {
            entries: entries.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
            default: None,
        }
    }

    pub fn with_default(mut self, d: impl Into<String>) -> Self {
        self.default = Some(d.into());
        self
    }
}

impl ChatClient for KeyedClient {
    fn chat(&self, req: &ChatRequest) -> Result<String> {
        let prompt = req.prompt().to_lowercase();
        self.entries
            .iter()
            .filter(|(k, _)| prompt.contains(&k.to_lowercase()))
            .max_by_key(|(k, _)| k.len())
            .map(|(_, v)| v.clone())
            .or_else(|| self.default.clone())
            .ok_or_else(|| Error::client("keyed client has no answer for this prompt", None))
    }
}

/// A named colour the palette mocks recognise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub rgb: [u8; 3],
}

fn dominant_entry(png: &[u8], palette: &[PaletteEntry], tolerance: u32, min_share: f32) -> Result<Option<usize>> {
    let img = image::load_from_memory(png)
        .map_err(|e| Error::Parse(format!("attachment is not an image: {e}")))?
        .to_rgb8();
    let mut counts = vec![0usize; palette.len()];
    let mut visible = 0usize;
    for p in img.pixels() {
        if p.0 == [0, 0, 0] {
            continue;
        }
        visible += 1;
        let best = palette
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let d: u32 = (0..3).map(|c| (p.0[c] as i32 - e.rgb[c] as i32).pow(2) as u32).sum();
                (d, i)
            })
            .min();
        if let Some((d, i)) = best {
            if d <= tolerance {
                counts[i] += 1;
            }
        }
    }
    if visible == 0 {
        return Ok(None);
    }
    let (i, &c) = match counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
    {
        Some(x) => x,
        None => return Ok(None),
    };
    Ok((c as f32 >= min_share * visible as f32).then_some(i))
}

/// Mock explainer for colour-coded toy images: names the palette colour
/// that dominates the visible pixels of a majority of the images.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PaletteExplainer {
    pub palette: Vec<PaletteEntry>,
    /// Maximum squared RGB distance for a pixel to count as a colour.
    pub tolerance: u32,
    /// Share of visible pixels the dominant colour must reach per image.
    pub min_share: f32,
}

impl PaletteExplainer {
    pub fn new(palette: Vec<PaletteEntry>) -> Self {
        Self {
            palette,
            tolerance: 900,
            min_share: 0.5,
        }
    }
}

/// The phrase models are asked to answer with when nothing is shared.
pub const NO_PATTERN_REPLY: &str = "unable to produce explanations";

impl ChatClient for PaletteExplainer {
    fn chat(&self, req: &ChatRequest) -> Result<String> {
        let mut votes = vec![0usize; self.palette.len()];
        let mut n = 0;
        for img in req.images() {
            n += 1;
            if let Some(i) = dominant_entry(img, &self.palette, self.tolerance, self.min_share)? {
                votes[i] += 1;
            }
        }
        let best = votes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((i, &v)) if n > 0 && 2 * v > n => Ok(self.palette[i].name.clone()),
            _ => Ok(NO_PATTERN_REPLY.to_string()),
        }
    }
}

/// Mock judge: answers "yes" when the prompt mentions the palette colour
/// dominating the attached image, "no" otherwise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PaletteJudge(pub PaletteExplainer);

impl ChatClient for PaletteJudge {
    fn chat(&self, req: &ChatRequest) -> Result<String> {
        let prompt = req.prompt().to_lowercase();
        let img = req
            .images()
            .next()
            .ok_or_else(|| Error::invalid("judge request has no image"))?;
        let p = &self.0;
        let hit = dominant_entry(img, &p.palette, p.tolerance, p.min_share)?
            .is_some_and(|i| prompt.contains(&p.palette[i].name.to_lowercase()));
        Ok(if hit { "yes" } else { "no" }.to_string())
    }
}

/// Append-only log of raw requests and responses.
pub struct Archive {
    file: Option<Mutex<File>>,
}

#[derive(Serialize)]
struct ArchiveLine<'a> {
    feature: usize,
    role: &'a str,
    model: &'a str,
    prompt: String,
    image_sha256: Vec<String>,
    response: &'a str,
}

impl Archive {
    pub fn disabled() -> Self {
        Self { file: None }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(Error::at_path(path))?;
        Ok(Self {
            file: Some(Mutex::new(f)),
        })
    }

    pub fn record(&self, feature: usize, role: &str, model: &str, req: &ChatRequest, response: &str) -> Result<()> {
        let Some(f) = &self.file else {
            return Ok(());
        };
        let line = ArchiveLine {
            feature,
            role,
            model,
            prompt: req.prompt(),
            image_sha256: req.images().map(hex_digest).collect(),
            response,
        };
        let mut bytes = serde_json::to_vec(&line)?;
        bytes.push(b'\n');
        let mut f = f.lock().map_err(|_| Error::invalid("archive lock poisoned"))?;
        f.write_all(&bytes)?;
        Ok(())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
