//! Persistent generation cache.
//!
//! The cache file is JSON Lines, one `{"key": <hex digest>, "response": <text>}`
//! record per line, appended as responses arrive. A truncated final line
//! (interrupted write) is skipped on open.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{validate_request, ChatMessage, GenerationParams, Generator, ProviderError, Result};
use crate::text::sha256_hex;

/// Digest of everything that determines a completion.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(provider_kind: &str, messages: &[ChatMessage], params: &GenerationParams) -> Self {
        #[derive(Serialize)]
        struct Keyed<'a> {
            provider: &'a str,
            model_id: &'a str,
            messages: &'a [ChatMessage],
            params: &'a GenerationParams,
        }
        let body = serde_json::to_vec(&Keyed {
            provider: provider_kind,
            model_id: &params.model_id,
            messages,
            params,
        })
        .expect("cache key serializes");
        CacheKey(sha256_hex(body))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    response: String,
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    entries: Mutex<HashMap<String, String>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if needed) an append-only cache file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io_err = |e: std::io::Error| ProviderError::Cache(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut entries = HashMap::new();
        let mut torn_tail = false;
        if path.exists() {
            let body = fs::read(path).map_err(io_err)?;
            torn_tail = body.last().is_some_and(|&b| b != b'\n');
            for (n, line) in BufReader::new(body.as_slice()).lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(l) => {
                        entries.insert(l.key, l.response);
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), n + 1),
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        if torn_tail {
            file.write_all(b"\n").map_err(io_err)?;
        }
        Ok(Self {
            entries: Mutex::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path.to_owned()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &CacheKey) -> Option<String> {
        self.entries.lock().expect("cache lock").get(key.as_str()).cloned()
    }

    pub fn insert(&self, key: &CacheKey, response: &str) -> Result<()> {
        let mut entries = self.entries.lock().expect("cache lock");
        if entries.contains_key(key.as_str()) {
            return Ok(());
        }
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&CacheLine {
                key: key.0.clone(),
                response: response.to_owned(),
            })
            .expect("cache line serializes");
            line.push('\n');
            let mut f = file.lock().expect("cache file lock");
            f.write_all(line.as_bytes())
                .and_then(|_| f.flush())
                .map_err(|e| ProviderError::Cache(e.to_string()))?;
        }
        entries.insert(key.0.clone(), response.to_owned());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Serves repeated requests from a [`ResponseCache`] without touching the
/// wrapped backend.
pub struct CachedGenerator<G> {
    inner: G,
    cache: std::sync::Arc<ResponseCache>,
}

impl<G: Generator> CachedGenerator<G> {
    pub fn new(inner: G, cache: std::sync::Arc<ResponseCache>) -> Self {
        Self { inner, cache }
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }
}

impl<G: Generator> Generator for CachedGenerator<G> {
    fn kind(&self) -> String {
        self.inner.kind()
    }

    fn generate(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String> {
        validate_request(messages, params)?;
        let key = CacheKey::new(&self.inner.kind(), messages, params);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let response = self.inner.generate(messages, params)?;
        self.cache.insert(&key, &response)?;
        Ok(response)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{Counted, ScriptedGenerator};
    use std::sync::Arc;

    fn params() -> GenerationParams {
        GenerationParams::new("mock")
    }

    #[test]
    fn key_changes_with_every_field() {
        let m = vec![ChatMessage::user("q")];
        let base = CacheKey::new("k", &m, &params());
        assert_eq!(base, CacheKey::new("k", &m, &params()));
        assert_ne!(base, CacheKey::new("k2", &m, &params()));
        assert_ne!(base, CacheKey::new("k", &[ChatMessage::user("q2")], &params()));
        assert_ne!(base, CacheKey::new("k", &[ChatMessage::system("q")], &params()));
        let mut p = params();
        p.temperature = 0.5;
        assert_ne!(base, CacheKey::new("k", &m, &p));
        let mut p = params();
        p.max_tokens = 7;
        assert_ne!(base, CacheKey::new("k", &m, &p));
        let mut p = params();
        p.seed = Some(1);
        assert_ne!(base, CacheKey::new("k", &m, &p));
        let mut p = params();
        p.model_id = "other".into();
        assert_ne!(base, CacheKey::new("k", &m, &p));
    }

    #[test]
    fn second_identical_call_skips_backend() {
        let backend = Arc::new(Counted::new(ScriptedGenerator::new().with_default("The answer is (B)")));
        let gen = CachedGenerator::new(backend.clone(), Arc::new(ResponseCache::in_memory()));
        let m = [ChatMessage::user("riddle")];
        for _ in 0..5 {
            assert_eq!(gen.generate(&m, &params()).unwrap(), "The answer is (B)");
        }
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn failures_are_not_cached() {
        let backend = Arc::new(Counted::new(ScriptedGenerator::new()));
        let gen = CachedGenerator::new(backend.clone(), Arc::new(ResponseCache::in_memory()));
        let m = [ChatMessage::user("riddle")];
        assert!(gen.generate(&m, &params()).is_err());
        assert!(gen.generate(&m, &params()).is_err());
        assert_eq!(backend.calls(), 2);
        assert!(gen.cache().is_empty());
    }

    #[test]
    fn file_cache_survives_reopen_and_skips_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let m = [ChatMessage::user("riddle")];
        {
            let cache = Arc::new(ResponseCache::open(&path).unwrap());
            let gen = CachedGenerator::new(ScriptedGenerator::new().with_default("x"), cache);
            gen.generate(&m, &params()).unwrap();
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .unwrap()
            .write_all(b"{\"key\":\"tor")
            .unwrap();
        let backend = Arc::new(Counted::new(ScriptedGenerator::new()));
        let gen = CachedGenerator::new(backend.clone(), Arc::new(ResponseCache::open(&path).unwrap()));
        assert_eq!(gen.generate(&m, &params()).unwrap(), "x");
        assert_eq!(backend.calls(), 0);
    }
}
