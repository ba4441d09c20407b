//! Content-addressed response cache and call counting.
//!
//! Layout: `{root}/{key[..2]}/{key}.bin` holds the raw response bytes and
//! `{key}.meta` a JSON sidecar with the backend identity, operation,
//! timestamp and the SHA-256 of the value. The `.bin` file is committed with
//! a hard link from a temp file, which fails if another writer got there
//! first, so each key is persisted at most once; the loser reads the
//! winner's bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{
    check_temperature, BackendError, CallCounters, EncoderBackend, GenerateRequest, LlmBackend,
};
use crate::embedding::EmbeddingVector;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cache entry {key} is corrupt: {reason}")]
    StoreCorrupt { key: String, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Sidecar metadata for one entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub identity: String,
    pub operation: String,
    pub created_at: u64,
    pub value_sha256: String,
    pub value_len: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IdentityStats {
    pub entries: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: u64,
    pub bytes: u64,
    pub by_identity: BTreeMap<String, IdentityStats>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub checked: u64,
    pub corrupt: Vec<String>,
}

/// On-disk cache directory.
#[derive(Debug, Clone)]
pub struct CacheStore {
    root: PathBuf,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl CacheStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let probe = root.join(format!(".probe-{}", std::process::id()));
        fs::write(&probe, b"").map_err(io_err(&root))?;
        let _ = fs::remove_file(&probe);
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Hex SHA-256 over identity, operation and request bytes.
    pub fn key(identity: &str, operation: &str, request: &[u8]) -> String {
        let mut h = Sha256::new();
        for part in [identity.as_bytes(), operation.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update(request);
        hex::encode(h.finalize())
    }

    fn dir(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2])
    }

    pub fn value_path(&self, key: &str) -> PathBuf {
        self.dir(key).join(format!("{key}.bin"))
    }

    pub fn meta_path(&self, key: &str) -> PathBuf {
        self.dir(key).join(format!("{key}.meta"))
    }

    /// Stored value for `key`, verified against its sidecar digest.
    pub fn get(&self, key: &str) -> Result<Option<Vec<u8>>, CacheError> {
        let path = self.value_path(key);
        let value = match fs::read(&path) {
            Ok(v) => v,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let meta = self.read_meta(key)?;
        let digest = sha256_hex(&value);
        if digest != meta.value_sha256 || value.len() as u64 != meta.value_len {
            return Err(CacheError::StoreCorrupt {
                key: key.to_owned(),
                reason: "value digest mismatch".into(),
            });
        }
        Ok(Some(value))
    }

    fn read_meta(&self, key: &str) -> Result<EntryMeta, CacheError> {
        let corrupt = |reason: String| CacheError::StoreCorrupt {
            key: key.to_owned(),
            reason,
        };
        let text = fs::read_to_string(self.meta_path(key))
            .map_err(|e| corrupt(format!("sidecar unreadable: {e}")))?;
        serde_json::from_str(&text).map_err(|e| corrupt(format!("sidecar unparsable: {e}")))
    }

    fn write_temp(&self, dir: &Path, key: &str, bytes: &[u8]) -> Result<PathBuf, CacheError> {
        let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = dir.join(format!("{key}.{}.{n}.tmp", std::process::id()));
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        Ok(tmp)
    }

    /// Persists `value` unless another writer already committed this key.
    /// Returns whichever value is now stored.
    pub fn put(
        &self,
        key: &str,
        identity: &str,
        operation: &str,
        value: &[u8],
    ) -> Result<Vec<u8>, CacheError> {
        let dir = self.dir(key);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let final_path = self.value_path(key);
        let tmp = self.write_temp(&dir, key, value)?;
        let linked = fs::hard_link(&tmp, &final_path);
        let _ = fs::remove_file(&tmp);
        match linked {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return fs::read(&final_path).map_err(io_err(&final_path));
            }
            Err(e) => return Err(io_err(&final_path)(e)),
        }
        let meta = EntryMeta {
            identity: identity.to_owned(),
            operation: operation.to_owned(),
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            value_sha256: sha256_hex(value),
            value_len: value.len() as u64,
        };
        let meta_bytes = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
        let tmp = self.write_temp(&dir, key, &meta_bytes)?;
        let meta_path = self.meta_path(key);
        fs::rename(&tmp, &meta_path).map_err(io_err(&meta_path))?;
        Ok(value.to_vec())
    }

    pub fn remove(&self, key: &str) -> Result<(), CacheError> {
        for path in [self.value_path(key), self.meta_path(key)] {
            match fs::remove_file(&path) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
        Ok(())
    }

    /// Keys of every committed entry, sorted.
    pub fn keys(&self) -> Result<Vec<String>, CacheError> {
        let mut keys = Vec::new();
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(keys),
            Err(e) => return Err(io_err(&self.root)(e)),
        };
        for sub in entries {
            let sub = sub.map_err(io_err(&self.root))?.path();
            if !sub.is_dir() {
                continue;
            }
            for file in fs::read_dir(&sub).map_err(io_err(&sub))? {
                let file = file.map_err(io_err(&sub))?.path();
                if file.extension().is_some_and(|e| e == "bin") {
                    if let Some(stem) = file.file_stem().and_then(|s| s.to_str()) {
                        keys.push(stem.to_owned());
                    }
                }
            }
        }
        keys.sort();
        Ok(keys)
    }

    pub fn stats(&self) -> Result<CacheStats, CacheError> {
        let mut stats = CacheStats::default();
        for key in self.keys()? {
            let bytes = fs::metadata(self.value_path(&key))
                .map(|m| m.len())
                .unwrap_or(0);
            let identity = self
                .read_meta(&key)
                .map(|m| m.identity)
                .unwrap_or_else(|_| "<unknown>".into());
            stats.entries += 1;
            stats.bytes += bytes;
            let s = stats.by_identity.entry(identity).or_default();
            s.entries += 1;
            s.bytes += bytes;
        }
        Ok(stats)
    }

    /// Re-digests every entry.
    pub fn verify(&self) -> Result<VerifyReport, CacheError> {
        let mut report = VerifyReport::default();
        for key in self.keys()? {
            report.checked += 1;
            match self.get(&key) {
                Ok(_) => {}
                Err(CacheError::StoreCorrupt { .. }) => report.corrupt.push(key),
                Err(e) => return Err(e),
            }
        }
        Ok(report)
    }

    /// Removes every entry; returns how many were removed.
    pub fn clear(&self) -> Result<u64, CacheError> {
        let keys = self.keys()?;
        for key in &keys {
            self.remove(key)?;
        }
        Ok(keys.len() as u64)
    }

    /// Cached bytes for `key`, or the result of `fetch` persisted under it.
    /// Corrupt entries are dropped and refetched.
    #[allow(clippy::too_many_arguments)]
    fn fetch_through<T>(
        &self,
        key: &str,
        identity: &str,
        operation: &str,
        counters: &CallCounters,
        decode: impl Fn(&[u8]) -> Option<T>,
        encode: impl Fn(&T) -> Vec<u8>,
        fetch: impl FnOnce() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        match self.get(key) {
            Ok(Some(bytes)) => match decode(&bytes) {
                Some(v) => {
                    counters.record_hit();
                    return Ok(v);
                }
                None => {
                    warn!("cache entry {key} does not decode; refetching");
                    counters.record_corrupt();
                    self.remove(key)?;
                }
            },
            Ok(None) => {}
            Err(CacheError::StoreCorrupt { reason, .. }) => {
                warn!("cache entry {key} is corrupt ({reason}); refetching");
                counters.record_corrupt();
                self.remove(key)?;
            }
            Err(e) => return Err(e.into()),
        }
        let value = fetch()?;
        let stored = self.put(key, identity, operation, &encode(&value))?;
        Ok(decode(&stored).unwrap_or(value))
    }
}

fn vector_to_bytes(v: &EmbeddingVector) -> Vec<u8> {
    v.as_slice().iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn vector_from_bytes(bytes: &[u8]) -> Option<EmbeddingVector> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(8) {
        return None;
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    EmbeddingVector::new(values).ok()
}

/// Encoder wrapper that counts delegate calls and optionally caches responses.
pub struct CachedEncoder {
    inner: Arc<dyn EncoderBackend>,
    store: Option<CacheStore>,
    counters: Arc<CallCounters>,
}

impl CachedEncoder {
    pub fn cached(
        inner: Arc<dyn EncoderBackend>,
        store: CacheStore,
        counters: Arc<CallCounters>,
    ) -> Self {
        Self {
            inner,
            store: Some(store),
            counters,
        }
    }

    pub fn counted(inner: Arc<dyn EncoderBackend>, counters: Arc<CallCounters>) -> Self {
        Self {
            inner,
            store: None,
            counters,
        }
    }

    fn checked(&self, v: EmbeddingVector) -> Result<EmbeddingVector, BackendError> {
        match self.inner.reported_dim() {
            Some(expected) if expected != v.dim() => Err(BackendError::DimMismatch {
                expected,
                found: v.dim(),
            }),
            _ => Ok(v),
        }
    }

    fn run(
        &self,
        operation: &str,
        request: &[u8],
        record: fn(&CallCounters),
        call: impl FnOnce() -> Result<EmbeddingVector, BackendError>,
    ) -> Result<EmbeddingVector, BackendError> {
        let fetch = || {
            record(&self.counters);
            call().and_then(|v| self.checked(v))
        };
        match &self.store {
            None => fetch(),
            Some(store) => {
                let identity = self.inner.identity();
                let key = CacheStore::key(&identity, operation, request);
                let v = store.fetch_through(
                    &key,
                    &identity,
                    operation,
                    &self.counters,
                    vector_from_bytes,
                    vector_to_bytes,
                    fetch,
                )?;
                self.checked(v)
            }
        }
    }
}

impl EncoderBackend for CachedEncoder {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn reported_dim(&self) -> Option<usize> {
        self.inner.reported_dim()
    }

    fn max_text_units(&self) -> Option<usize> {
        self.inner.max_text_units()
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        self.run(
            "encode_text",
            text.as_bytes(),
            CallCounters::record_encode_text,
            || self.inner.encode_text(text),
        )
    }

    fn encode_image(&self, image: &[u8]) -> Result<EmbeddingVector, BackendError> {
        self.run(
            "encode_image",
            image,
            CallCounters::record_encode_image,
            || self.inner.encode_image(image),
        )
    }
}

/// LLM wrapper that counts delegate calls and optionally caches responses.
pub struct CachedLlm {
    inner: Arc<dyn LlmBackend>,
    store: Option<CacheStore>,
    counters: Arc<CallCounters>,
}

impl CachedLlm {
    pub fn cached(
        inner: Arc<dyn LlmBackend>,
        store: CacheStore,
        counters: Arc<CallCounters>,
    ) -> Self {
        Self {
            inner,
            store: Some(store),
            counters,
        }
    }

    pub fn counted(inner: Arc<dyn LlmBackend>, counters: Arc<CallCounters>) -> Self {
        Self {
            inner,
            store: None,
            counters,
        }
    }

    fn request_bytes(request: &GenerateRequest<'_>) -> Vec<u8> {
        let mut out = Vec::with_capacity(request.prompt.len() + 96);
        out.extend_from_slice(&(request.prompt.len() as u64).to_le_bytes());
        out.extend_from_slice(request.prompt.as_bytes());
        match request.image {
            Some(img) => out.extend_from_slice(sha256_hex(img).as_bytes()),
            None => out.extend_from_slice(b"no-image"),
        }
        out.extend_from_slice(&request.temperature.to_bits().to_le_bytes());
        out.extend_from_slice(&request.sample.to_le_bytes());
        out
    }
}

impl LlmBackend for CachedLlm {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn generate(&self, request: &GenerateRequest<'_>) -> Result<String, BackendError> {
        check_temperature(request.temperature)?;
        let fetch = || {
            self.counters.record_generate();
            self.inner.generate(request)
        };
        match &self.store {
            None => fetch(),
            Some(store) => {
                let identity = self.inner.identity();
                let key = CacheStore::key(&identity, "generate", &Self::request_bytes(request));
                store.fetch_through(
                    &key,
                    &identity,
                    "generate",
                    &self.counters,
                    |b| String::from_utf8(b.to_vec()).ok().filter(|s| !s.is_empty()),
                    |s: &String| s.as_bytes().to_vec(),
                    fetch,
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockEncoder, MockLlm};

    fn store() -> (tempfile::TempDir, CacheStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = CacheStore::open(dir.path().join("cache")).unwrap();
        (dir, store)
    }

    #[test]
    fn miss_then_hit() {
        let (_d, store) = store();
        let counters = CallCounters::new();
        let enc = CachedEncoder::cached(
            Arc::new(MockEncoder::new(8, 1)),
            store.clone(),
            counters.clone(),
        );
        let a = enc.encode_text("a photo of a cat").unwrap();
        let b = enc.encode_text("a photo of a cat").unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let s = counters.snapshot();
        assert_eq!((s.encode_text_calls, s.cache_hits), (1, 1));

        let key = CacheStore::key(&enc.identity(), "encode_text", b"a photo of a cat");
        assert!(store.value_path(&key).exists());
        let meta: EntryMeta =
            serde_json::from_slice(&fs::read(store.meta_path(&key)).unwrap()).unwrap();
        assert_eq!(meta.operation, "encode_text");
        assert!(meta.identity.starts_with("mock-encoder"));
    }

    #[test]
    fn distinct_requests_get_distinct_keys() {
        let a = CacheStore::key("id", "encode_text", b"cat");
        let b = CacheStore::key("id", "encode_text", b"dog");
        let c = CacheStore::key("id2", "encode_text", b"cat");
        let d = CacheStore::key("id", "encode_image", b"cat");
        assert!(a != b && a != c && a != d);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn llm_cache_counts_once() {
        let (_d, store) = store();
        let counters = CallCounters::new();
        let llm = CachedLlm::cached(Arc::new(MockLlm::new()), store, counters.clone());
        let req = GenerateRequest::new("describe", Some(b"img"), 0.0);
        let a = llm.generate(&req).unwrap();
        let b = llm.generate(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(counters.snapshot().generate_calls, 1);
        // a different sample index is a different request
        llm.generate(&req.with_sample(1)).unwrap();
        assert_eq!(counters.snapshot().generate_calls, 2);
        assert!(matches!(
            llm.generate(&GenerateRequest::new("describe", None, 1.5)),
            Err(BackendError::InvalidTemperature(_))
        ));
        assert_eq!(counters.snapshot().generate_calls, 2);
    }

    #[test]
    fn corrupt_entry_is_healed() {
        let (_d, store) = store();
        let counters = CallCounters::new();
        let inner = Arc::new(MockEncoder::new(8, 1));
        let enc = CachedEncoder::cached(inner.clone(), store.clone(), counters.clone());
        let expected = inner.encode_text("cat").unwrap();
        enc.encode_text("cat").unwrap();
        let key = CacheStore::key(&enc.identity(), "encode_text", b"cat");

        let path = store.value_path(&key);
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            store.get(&key),
            Err(CacheError::StoreCorrupt { .. })
        ));
        assert_eq!(store.verify().unwrap().corrupt, vec![key.clone()]);

        let healed = enc.encode_text("cat").unwrap();
        assert_eq!(healed, expected);
        let s = counters.snapshot();
        assert_eq!((s.encode_text_calls, s.corrupt_entries), (2, 1));
        assert!(store.verify().unwrap().corrupt.is_empty());
        assert_eq!(enc.encode_text("cat").unwrap(), expected);
        assert_eq!(counters.snapshot().cache_hits, 1);
    }

    #[test]
    fn missing_sidecar_counts_as_corrupt() {
        let (_d, store) = store();
        store.put("abcdef", "id", "op", b"value").unwrap();
        assert_eq!(store.get("abcdef").unwrap().unwrap(), b"value");
        fs::remove_file(store.meta_path("abcdef")).unwrap();
        assert!(matches!(
            store.get("abcdef"),
            Err(CacheError::StoreCorrupt { .. })
        ));
    }

    #[test]
    fn second_writer_reads_the_winner() {
        let (_d, store) = store();
        assert_eq!(store.put("ab12", "id", "op", b"first").unwrap(), b"first");
        assert_eq!(store.put("ab12", "id", "op", b"second").unwrap(), b"first");
        assert_eq!(store.get("ab12").unwrap().unwrap(), b"first");
    }

    #[test]
    fn concurrent_misses_agree() {
        let (_d, store) = store();
        let counters = CallCounters::new();
        let enc = Arc::new(CachedEncoder::cached(
            Arc::new(MockEncoder::new(16, 3)),
            store.clone(),
            counters,
        ));
        let results: Vec<_> = (0..8)
            .map(|_| {
                let enc = enc.clone();
                std::thread::spawn(move || enc.encode_text("shared").unwrap())
            })
            .map(|h| h.join().unwrap())
            .collect();
        assert!(results.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(store.keys().unwrap().len(), 1);
        assert!(store.verify().unwrap().corrupt.is_empty());
    }

    #[test]
    fn stats_and_clear() {
        let (_d, store) = store();
        assert_eq!(store.stats().unwrap(), CacheStats::default());
        store.put("aa01", "enc", "encode_text", &[1, 2, 3]).unwrap();
        store.put("bb02", "enc", "encode_text", &[4]).unwrap();
        store.put("cc03", "llm", "generate", b"hi").unwrap();
        let stats = store.stats().unwrap();
        assert_eq!((stats.entries, stats.bytes), (3, 6));
        assert_eq!(
            stats.by_identity["enc"],
            IdentityStats {
                entries: 2,
                bytes: 4
            }
        );
        assert_eq!(store.clear().unwrap(), 3);
        assert_eq!(store.stats().unwrap().entries, 0);
    }

    #[test]
    fn counted_wrapper_enforces_reported_dim() {
        struct Liar;
        impl EncoderBackend for Liar {
            fn identity(&self) -> String {
                "liar".into()
            }
            fn reported_dim(&self) -> Option<usize> {
                Some(4)
            }
            fn encode_text(&self, _: &str) -> Result<EmbeddingVector, BackendError> {
                Ok(EmbeddingVector::new(vec![1.0; 3])?)
            }
            fn encode_image(&self, _: &[u8]) -> Result<EmbeddingVector, BackendError> {
                Ok(EmbeddingVector::new(vec![1.0; 4])?)
            }
        }
        let enc = CachedEncoder::counted(Arc::new(Liar), CallCounters::new());
        assert!(matches!(
            enc.encode_text("x"),
            Err(BackendError::DimMismatch {
                expected: 4,
                found: 3
            })
        ));
        assert!(enc.encode_image(b"x").is_ok());
    }
}
