//! Chat-completion and embedding clients.
//!
//! One wire protocol is supported: the OpenAI-compatible `/chat/completions`
//! and `/embeddings` endpoints. Responses are cached content-addressed on
//! disk when a cache directory is configured. Offline runs use [`MockChat`]
//! and the built-in [`HashedNgramEmbedder`].

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_CHAT_BASE_URL: &str = "TROVE_CHAT_BASE_URL";
pub const ENV_CHAT_MODEL: &str = "TROVE_CHAT_MODEL";
pub const ENV_CHAT_API_KEY: &str = "TROVE_CHAT_API_KEY";
pub const ENV_EMBED_BASE_URL: &str = "TROVE_EMBED_BASE_URL";
pub const ENV_EMBED_MODEL: &str = "TROVE_EMBED_MODEL";
pub const ENV_EMBED_API_KEY: &str = "TROVE_EMBED_API_KEY";
pub const ENV_CACHE_DIR: &str = "TROVE_CACHE_DIR";

/// `base_url` scheme selecting the offline embedder.
pub const BUILTIN_SCHEME: &str = "builtin:";

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("environment variable {0} is not set")]
    MissingKey(String),
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("HTTP {status} from {url}: {body}")]
    Http { status: u16, url: String, body: String },
    #[error("request to {url} failed: {message}")]
    Transport { url: String, message: String },
    #[error("malformed provider response: {0}")]
    Protocol(String),
    #[error("mock chat has no reply for prompt digest {0}")]
    MockMiss(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub text: String,
    pub cached: bool,
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<ChatReply, ProviderError>;
}

/// Returns one L2-normalized vector per input text, in input order.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Connection settings. Holds the *name* of the key variable, never the key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env: String,
    #[serde(rename = "timeout_ms", with = "millis")]
    pub timeout: Duration,
    pub max_retries: u32,
    #[serde(rename = "backoff_base_ms", with = "millis")]
    pub backoff_base: Duration,
    pub max_in_flight: usize,
    pub batch_size: usize,
}

impl ProviderConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: api_key_env.into(),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_secs(1),
            max_in_flight: 4,
            batch_size: 64,
        }
    }

    pub fn chat_from_env() -> Self {
        Self::new(
            env_or(ENV_CHAT_BASE_URL, "https://api.openai.com/v1"),
            env_or(ENV_CHAT_MODEL, "gpt-4o"),
            ENV_CHAT_API_KEY,
        )
    }

    /// `None` when no embedding endpoint is configured.
    pub fn embed_from_env() -> Option<Self> {
        let base = std::env::var(ENV_EMBED_BASE_URL).ok()?;
        Some(Self::new(
            base,
            env_or(ENV_EMBED_MODEL, "text-embedding-3-small"),
            ENV_EMBED_API_KEY,
        ))
    }

    pub fn is_builtin(&self) -> bool {
        self.base_url.starts_with(BUILTIN_SCHEME)
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.timeout.is_zero() {
            return Err(ProviderError::Config("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 || self.batch_size == 0 {
            return Err(ProviderError::Config("max_in_flight and batch_size must be positive".into()));
        }
        Ok(())
    }
}

fn env_or(var: &str, default: &str) -> String {
    std::env::var(var).unwrap_or_else(|_| default.to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest keying mock chat replies: hex SHA-256 of the prompt's UTF-8 bytes.
pub fn prompt_digest(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

/// Content address of one request: digest of provider kind, model and the
/// canonical request payload.
pub fn cache_key(kind: &str, model: &str, payload: &str) -> String {
    let mut h = Sha256::new();
    for part in [kind, model, payload] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Write-once response store: in memory, and on disk when a directory is set.
/// Disk writes go to a temporary file that is renamed into place.
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, String>>,
    tmp_seq: AtomicUsize,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| ProviderError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir: Some(dir),
            ..Self::default()
        })
    }

    /// Disk-backed when `TROVE_CACHE_DIR` is set, memory-only otherwise.
    pub fn from_env() -> Result<Self, ProviderError> {
        match std::env::var(ENV_CACHE_DIR) {
            Ok(dir) if !dir.is_empty() => Self::on_disk(dir),
            _ => Ok(Self::in_memory()),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.memory.lock().unwrap().get(key) {
            return Some(v.clone());
        }
        let path = self.dir.as_ref()?.join(key);
        let value = fs::read_to_string(path).ok()?;
        self.memory
            .lock()
            .unwrap()
            .insert(key.to_string(), value.clone());
        Some(value)
    }

    pub fn put(&self, key: &str, value: &str) -> Result<(), ProviderError> {
        self.memory
            .lock()
            .unwrap()
            .entry(key.to_string())
            .or_insert_with(|| value.to_string());
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let path = dir.join(key);
        if path.exists() {
            return Ok(());
        }
        let seq = self.tmp_seq.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!(".tmp-{key}-{}-{seq}", std::process::id()));
        let io = |source| ProviderError::Io {
            path: tmp.display().to_string(),
            source,
        };
        fs::write(&tmp, value).map_err(io)?;
        fs::rename(&tmp, &path).map_err(io)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Shared HTTP plumbing: auth, in-flight limit, retry with exponential backoff
/// on transport errors, 429 and 5xx.
struct Endpoint {
    cfg: ProviderConfig,
    key: String,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
    requests: AtomicUsize,
}

impl Endpoint {
    fn new(cfg: ProviderConfig) -> Result<Self, ProviderError> {
        cfg.validate()?;
        let key = std::env::var(&cfg.api_key_env).map_err(|_| ProviderError::MissingKey(cfg.api_key_env.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self {
            in_flight: Semaphore::new(cfg.max_in_flight),
            cfg,
            key,
            client,
            requests: AtomicUsize::new(0),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, ProviderError> {
        let url = self.url(path);
        let mut attempt = 0u32;
        loop {
            let result = {
                let _permit = self.in_flight.acquire();
                self.requests.fetch_add(1, Ordering::Relaxed);
                self.client.post(&url).bearer_auth(&self.key).json(body).send()
            };
            let err = match result {
                Ok(resp) if resp.status().is_success() => {
                    return resp
                        .json::<Value>()
                        .map_err(|e| ProviderError::Protocol(e.to_string()));
                }
                Ok(resp) => {
                    let status = resp.status();
                    let err = ProviderError::Http {
                        status: status.as_u16(),
                        url: url.clone(),
                        body: resp.text().unwrap_or_default(),
                    };
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(err);
                    }
                    err
                }
                Err(e) => ProviderError::Transport {
                    url: url.clone(),
                    message: e.to_string(),
                },
            };
            if attempt >= self.cfg.max_retries {
                return Err(err);
            }
            std::thread::sleep(self.cfg.backoff_base * 2u32.saturating_pow(attempt));
            attempt += 1;
        }
    }
}

/// OpenAI-compatible chat client: one user message, temperature 0.
pub struct OpenAiChat {
    endpoint: Endpoint,
    cache: Arc<ResponseCache>,
}

impl OpenAiChat {
    pub fn new(cfg: ProviderConfig, cache: Arc<ResponseCache>) -> Result<Self, ProviderError> {
        Ok(Self {
            endpoint: Endpoint::new(cfg)?,
            cache,
        })
    }

    /// Number of HTTP requests sent so far, retries included.
    pub fn upstream_requests(&self) -> usize {
        self.endpoint.requests.load(Ordering::Relaxed)
    }
}

impl ChatProvider for OpenAiChat {
    fn complete(&self, prompt: &str) -> Result<ChatReply, ProviderError> {
        let payload = json!({
            "model": self.endpoint.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let key = cache_key("chat", &self.endpoint.cfg.model_name, &payload.to_string());
        if let Some(text) = self.cache.get(&key) {
            return Ok(ChatReply { text, cached: true });
        }
        let resp = self.endpoint.post("chat/completions", &payload)?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::Protocol("missing choices[0].message.content".into()))?
            .to_string();
        self.cache.put(&key, &text)?;
        Ok(ChatReply { text, cached: false })
    }
}

/// OpenAI-compatible embedding client. Texts missing from the cache are sent
/// in batches of `batch_size`.
pub struct OpenAiEmbedder {
    endpoint: Endpoint,
    cache: Arc<ResponseCache>,
}

impl OpenAiEmbedder {
    pub fn new(cfg: ProviderConfig, cache: Arc<ResponseCache>) -> Result<Self, ProviderError> {
        Ok(Self {
            endpoint: Endpoint::new(cfg)?,
            cache,
        })
    }

    pub fn upstream_requests(&self) -> usize {
        self.endpoint.requests.load(Ordering::Relaxed)
    }

    fn key(&self, text: &str) -> String {
        cache_key("embed", &self.endpoint.cfg.model_name, text)
    }

    fn fetch(&self, texts: &[&String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let payload = json!({"model": self.endpoint.cfg.model_name, "input": texts});
        let resp = self.endpoint.post("embeddings", &payload)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Protocol("missing `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(ProviderError::Protocol(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut rows: Vec<(usize, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(pos, item)| {
                let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
                let v: Vec<f64> = serde_json::from_value(item.get("embedding").cloned().unwrap_or(Value::Null))
                    .map_err(|e| ProviderError::Protocol(format!("bad embedding: {e}")))?;
                Ok((index, v))
            })
            .collect::<Result<_, ProviderError>>()?;
        rows.sort_by_key(|(i, _)| *i);
        let dim = rows[0].1.len();
        if rows.iter().any(|(_, v)| v.len() != dim) {
            return Err(ProviderError::Protocol("embedding dimensions differ within a batch".into()));
        }
        Ok(rows.into_iter().map(|(_, v)| l2_normalize(v)).collect())
    }
}

impl EmbeddingProvider for OpenAiEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let mut out: Vec<Option<Vec<f64>>> = texts
            .iter()
            .map(|t| {
                self.cache
                    .get(&self.key(t))
                    .and_then(|s| serde_json::from_str(&s).ok())
            })
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        for batch in missing.chunks(self.endpoint.cfg.batch_size) {
            let batch_texts: Vec<&String> = batch.iter().map(|&i| &texts[i]).collect();
            for (&i, v) in batch.iter().zip(self.fetch(&batch_texts)?) {
                let encoded = serde_json::to_string(&v).expect("vector serializes");
                self.cache.put(&self.key(&texts[i]), &encoded)?;
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled")).collect())
    }
}

pub fn l2_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Offline embedder: frequency vector of hashed character n-grams (FNV-1a
/// into `dim` buckets), L2-normalized. Text is lowercased and padded with one
/// space on each side.
#[derive(Debug, Clone, Copy)]
pub struct HashedNgramEmbedder {
    pub dim: usize,
    pub n: usize,
}

impl Default for HashedNgramEmbedder {
    fn default() -> Self {
        Self { dim: 256, n: 3 }
    }
}

fn fnv1a(chars: &[char]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut buf = [0u8; 4];
    for c in chars {
        for b in c.encode_utf8(&mut buf).bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl HashedNgramEmbedder {
    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut chars = vec![' '];
        chars.extend(text.chars().flat_map(char::to_lowercase));
        chars.push(' ');
        let mut v = vec![0.0; self.dim];
        if chars.len() < self.n {
            v[(fnv1a(&chars) % self.dim as u64) as usize] += 1.0;
        } else {
            for gram in chars.windows(self.n) {
                v[(fnv1a(gram) % self.dim as u64) as usize] += 1.0;
            }
        }
        l2_normalize(v)
    }
}

impl EmbeddingProvider for HashedNgramEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// In-memory per-text memoization over any embedder. Concurrent writers of the
/// same key store identical vectors; the last write wins.
pub struct CachedEmbedder<E> {
    inner: E,
    cache: Mutex<HashMap<String, Arc<Vec<f64>>>>,
}

impl<E: EmbeddingProvider> CachedEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<E> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let mut out: Vec<Option<Arc<Vec<f64>>>> = {
            let cache = self.cache.lock().unwrap();
            texts.iter().map(|t| cache.get(t).cloned()).collect()
        };
        let missing: Vec<String> = texts
            .iter()
            .zip(&out)
            .filter(|(_, v)| v.is_none())
            .map(|(t, _)| t.clone())
            .collect();
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing)?;
            let mut cache = self.cache.lock().unwrap();
            let mut fresh = missing.into_iter().zip(fresh);
            for slot in out.iter_mut().filter(|v| v.is_none()) {
                let (text, v) = fresh.next().expect("one vector per missing text");
                let v = Arc::new(v);
                cache.insert(text, Arc::clone(&v));
                *slot = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled").as_ref().clone()).collect())
    }
}

/// Builtin embedder for `builtin:` URLs, HTTP client otherwise; both memoized.
pub fn embedder_from_config(
    cfg: &ProviderConfig,
    cache: Arc<ResponseCache>,
) -> Result<Box<dyn EmbeddingProvider>, ProviderError> {
    if cfg.is_builtin() {
        Ok(Box::new(CachedEmbedder::new(HashedNgramEmbedder::default())))
    } else {
        Ok(Box::new(CachedEmbedder::new(OpenAiEmbedder::new(cfg.clone(), cache)?)))
    }
}

#[derive(Debug, Deserialize)]
struct MockLine {
    prompt_digest: String,
    reply: String,
}

/// Canned replies keyed by [`prompt_digest`]. An entry with digest `*` is the
/// reply for every prompt without its own entry.
#[derive(Debug, Default)]
pub struct MockChat {
    replies: HashMap<String, String>,
    calls: AtomicUsize,
}

impl MockChat {
    pub fn from_pairs<I, K, V>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        Self {
            replies: pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect(),
            calls: AtomicUsize::new(0),
        }
    }

    /// Same reply for every prompt.
    pub fn constant(reply: impl Into<String>) -> Self {
        Self::from_pairs([("*", reply.into())])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ProviderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut replies = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let m: MockLine = serde_json::from_str(line)
                .map_err(|e| ProviderError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
            replies.insert(m.prompt_digest, m.reply);
        }
        Ok(Self {
            replies,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ChatProvider for MockChat {
    fn complete(&self, prompt: &str) -> Result<ChatReply, ProviderError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let digest = prompt_digest(prompt);
        self.replies
            .get(&digest)
            .or_else(|| self.replies.get("*"))
            .map(|text| ChatReply {
                text: text.clone(),
                cached: false,
            })
            .ok_or(ProviderError::MockMiss(digest))
    }
}
