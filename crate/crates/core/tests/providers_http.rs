mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::http::serve;
use serde_json::{json, Value};
use trove::providers::{
    ChatProvider, EmbeddingProvider, OpenAiChat, OpenAiEmbedder, ProviderConfig, ProviderError, ResponseCache,
};

fn config(url: &str, key_env: &str) -> ProviderConfig {
    std::env::set_var(key_env, "test-key");
    ProviderConfig {
        backoff_base: Duration::from_millis(1),
        timeout: Duration::from_secs(10),
        ..ProviderConfig::new(url, "test-model", key_env)
    }
}

fn chat_reply(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

#[test]
fn chat_sends_openai_payload_and_caches() {
    let server = serve(|path, _| {
        assert_eq!(path, "/v1/chat/completions");
        (200, chat_reply("T1 -> D1-1 : COPY"))
    });
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&format!("{}/v1", server.url), "TROVE_TEST_KEY_CHAT_CACHE");
    let cache = Arc::new(ResponseCache::on_disk(dir.path()).unwrap());
    let chat = OpenAiChat::new(cfg.clone(), cache).unwrap();

    let first = chat.complete("hello").unwrap();
    assert_eq!(first.text, "T1 -> D1-1 : COPY");
    assert!(!first.cached);
    let second = chat.complete("hello").unwrap();
    assert!(second.cached);
    assert_eq!(second.text, first.text);
    assert_eq!(server.hits(), 1);

    let body: Value = serde_json::from_str(&server.bodies()[0]).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], 0);
    assert_eq!(body["messages"].as_array().unwrap().len(), 1);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "hello");

    // A fresh client over the same directory is served from disk.
    let reopened = OpenAiChat::new(cfg, Arc::new(ResponseCache::on_disk(dir.path()).unwrap())).unwrap();
    assert!(reopened.complete("hello").unwrap().cached);
    assert_eq!(server.hits(), 1);
}

#[test]
fn chat_gives_up_after_max_retries() {
    let server = serve(|_, _| (500, "{\"error\":\"boom\"}".into()));
    let cfg = ProviderConfig {
        max_retries: 3,
        ..config(&server.url, "TROVE_TEST_KEY_RETRY")
    };
    let chat = OpenAiChat::new(cfg, Arc::new(ResponseCache::in_memory())).unwrap();
    let err = chat.complete("x").unwrap_err();
    assert!(matches!(err, ProviderError::Http { status: 500, .. }), "{err}");
    assert_eq!(server.hits(), 4);
    assert_eq!(chat.upstream_requests(), 4);
}

#[test]
fn chat_does_not_retry_client_errors() {
    let server = serve(|_, _| (401, "{}".into()));
    let chat = OpenAiChat::new(config(&server.url, "TROVE_TEST_KEY_401"), Arc::new(ResponseCache::in_memory())).unwrap();
    assert!(matches!(chat.complete("x"), Err(ProviderError::Http { status: 401, .. })));
    assert_eq!(server.hits(), 1);
}

#[test]
fn chat_recovers_from_transient_failures() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let server = serve(move |_, _| {
        if c.fetch_add(1, Ordering::SeqCst) < 2 {
            (503, "{}".into())
        } else {
            (200, chat_reply("ok"))
        }
    });
    let chat = OpenAiChat::new(config(&server.url, "TROVE_TEST_KEY_TRANSIENT"), Arc::new(ResponseCache::in_memory())).unwrap();
    assert_eq!(chat.complete("x").unwrap().text, "ok");
    assert_eq!(server.hits(), 3);
}

fn embedding_response(body: &str, dims: impl Fn(usize) -> usize) -> String {
    let req: Value = serde_json::from_str(body).unwrap();
    let inputs = req["input"].as_array().unwrap();
    let data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let len = t.as_str().unwrap().len() as f64;
            let v: Vec<f64> = (0..dims(i)).map(|d| len + d as f64 + 1.0).collect();
            json!({"index": i, "embedding": v})
        })
        .collect();
    json!({"data": data}).to_string()
}

#[test]
fn embeddings_are_batched_normalized_and_cached() {
    let server = serve(|path, body| {
        assert!(path.ends_with("/embeddings"));
        (200, embedding_response(body, |_| 4))
    });
    let cfg = ProviderConfig {
        batch_size: 10,
        ..config(&server.url, "TROVE_TEST_KEY_EMBED")
    };
    let embedder = OpenAiEmbedder::new(cfg, Arc::new(ResponseCache::in_memory())).unwrap();
    let texts: Vec<String> = (0..25).map(|i| format!("text number {i}")).collect();
    let vecs = embedder.embed(&texts).unwrap();
    assert_eq!(server.hits(), 3);
    assert_eq!(vecs.len(), 25);
    for v in &vecs {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
    let again = embedder.embed(&texts).unwrap();
    assert_eq!(again, vecs);
    assert_eq!(server.hits(), 3);
}

#[test]
fn embedding_dimension_mismatch_is_an_error() {
    let server = serve(|_, body| (200, embedding_response(body, |i| if i == 0 { 3 } else { 4 })));
    let embedder =
        OpenAiEmbedder::new(config(&server.url, "TROVE_TEST_KEY_DIM"), Arc::new(ResponseCache::in_memory())).unwrap();
    let err = embedder.embed(&["a".to_string(), "bb".to_string()]).unwrap_err();
    assert!(matches!(err, ProviderError::Protocol(_)), "{err}");
}

#[test]
fn caching_is_transparent() {
    let server = serve(|_, body| (200, embedding_response(body, |_| 8)));
    let texts: Vec<String> = ["alpha", "beta", "alpha", "gamma"].iter().map(|s| s.to_string()).collect();
    let cached = OpenAiEmbedder::new(config(&server.url, "TROVE_TEST_KEY_TRANSPARENT"), Arc::new(ResponseCache::in_memory()))
        .unwrap();
    let warm = cached.embed(&texts).unwrap();
    let fresh = OpenAiEmbedder::new(config(&server.url, "TROVE_TEST_KEY_TRANSPARENT"), Arc::new(ResponseCache::in_memory()))
        .unwrap()
        .embed(&texts)
        .unwrap();
    assert_eq!(warm, fresh);
    assert_eq!(cached.embed(&texts).unwrap(), warm);
}
