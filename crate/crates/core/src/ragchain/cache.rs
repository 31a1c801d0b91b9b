//! Cell-granular generation cache.
//!
//! Entries are content-addressed by [`CellKey`], bounded by an LRU on entry
//! count, optionally mirrored to one JSON file per entry, and filled with
//! per-key single flight: concurrent misses on one key run the generator
//! once and every waiter receives the stored result. Errors are never stored.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use lru::LruCache;
use serde::{Deserialize, Serialize};

use super::{CachedGeneration, CellKey, Provenance};

pub const DEFAULT_MAX_ENTRIES: usize = 100_000;

#[derive(Default)]
struct Flight {
    done: Mutex<bool>,
    finished: Condvar,
}

impl Flight {
    fn wait(&self) {
        let mut done = self.done.lock().expect("flight lock");
        while !*done {
            done = self.finished.wait(done).expect("flight lock");
        }
    }
}

/// Removes the in-flight marker and wakes waiters even if the generator panics.
struct FlightGuard<'a> {
    cache: &'a CellCache,
    key: &'a CellKey,
    flight: Arc<Flight>,
}

impl Drop for FlightGuard<'_> {
    fn drop(&mut self) {
        self.cache.inflight.lock().expect("inflight lock").remove(self.key);
        *self.flight.done.lock().expect("flight lock") = true;
        self.flight.finished.notify_all();
    }
}

#[derive(Serialize, Deserialize)]
struct DiskEntry {
    key: CellKey,
    #[serde(flatten)]
    entry: CachedGeneration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: usize,
}

pub struct CellCache {
    dir: Option<PathBuf>,
    entries: Mutex<LruCache<CellKey, CachedGeneration>>,
    inflight: Mutex<HashMap<CellKey, Arc<Flight>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl std::fmt::Debug for CellCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CellCache")
            .field("dir", &self.dir)
            .field("stats", &self.stats())
            .finish()
    }
}

impl CellCache {
    pub fn in_memory(max_entries: usize) -> Self {
        Self {
            dir: None,
            entries: Mutex::new(LruCache::new(NonZeroUsize::new(max_entries.max(1)).expect("non-zero"))),
            inflight: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Opens a cache directory, loading existing entries oldest first so that
    /// the most recently written ones survive the entry bound.
    pub fn open(dir: impl AsRef<Path>, max_entries: usize) -> std::io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut files = Vec::new();
        for shard in std::fs::read_dir(&dir)? {
            let shard = shard?;
            if !shard.file_type()?.is_dir() {
                continue;
            }
            for file in std::fs::read_dir(shard.path())? {
                let file = file?;
                let path = file.path();
                if path.extension().is_some_and(|e| e == "json") {
                    let modified = file.metadata()?.modified()?;
                    files.push((modified, path));
                }
            }
        }
        files.sort();

        let mut cache = Self::in_memory(max_entries);
        cache.dir = Some(dir);
        {
            let mut entries = cache.entries.lock().expect("cache lock");
            for (_, path) in files {
                let parsed = std::fs::read(&path)
                    .ok()
                    .and_then(|bytes| serde_json::from_slice::<DiskEntry>(&bytes).ok());
                let Some(disk) = parsed else {
                    tracing::warn!(path = %path.display(), "skipping unreadable cache entry");
                    continue;
                };
                if let Some((evicted, _)) = entries.push(disk.key, disk.entry) {
                    cache.remove_file(&evicted);
                }
            }
        }
        Ok(cache)
    }

    fn path_for(&self, key: &CellKey) -> Option<PathBuf> {
        let hex = key.as_str();
        self.dir.as_ref().map(|d| d.join(&hex[..2]).join(format!("{hex}.json")))
    }

    fn remove_file(&self, key: &CellKey) {
        if let Some(path) = self.path_for(key) {
            let _ = std::fs::remove_file(path);
        }
    }

    fn write_file(&self, key: &CellKey, entry: &CachedGeneration) {
        let Some(path) = self.path_for(key) else { return };
        let disk = DiskEntry {
            key: key.clone(),
            entry: entry.clone(),
        };
        let result = (|| -> std::io::Result<()> {
            std::fs::create_dir_all(path.parent().expect("shard dir"))?;
            let tmp = path.with_extension("tmp");
            std::fs::write(&tmp, serde_json::to_vec(&disk).map_err(std::io::Error::other)?)?;
            std::fs::rename(tmp, &path)
        })();
        if let Err(e) = result {
            tracing::warn!(error = %e, "failed to persist cache entry");
        }
    }

    pub fn get(&self, key: &CellKey) -> Option<CachedGeneration> {
        let mut entry = self.entries.lock().expect("cache lock").get(key).cloned()?;
        entry.output.provenance = Provenance::Cached;
        entry.output.model_calls = 0;
        Some(entry)
    }

    pub fn insert(&self, key: CellKey, mut entry: CachedGeneration) {
        entry.output.provenance = Provenance::Generated;
        self.write_file(&key, &entry);
        let evicted = self.entries.lock().expect("cache lock").push(key.clone(), entry);
        if let Some((old, _)) = evicted {
            if old != key {
                self.remove_file(&old);
            }
        }
    }

    /// Returns the cached entry (provenance `cached`, zero model calls) or
    /// runs `generate` once for this key, stores a success, and returns it.
    pub fn get_or_generate<E>(
        &self,
        key: &CellKey,
        generate: impl FnOnce() -> Result<CachedGeneration, E>,
    ) -> Result<CachedGeneration, E> {
        let mut generate = Some(generate);
        loop {
            if let Some(hit) = self.get(key) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(hit);
            }
            let (flight, leader) = {
                let mut inflight = self.inflight.lock().expect("inflight lock");
                match inflight.get(key) {
                    Some(f) => (f.clone(), false),
                    None => {
                        let f = Arc::new(Flight::default());
                        inflight.insert(key.clone(), f.clone());
                        (f, true)
                    }
                }
            };
            if !leader {
                flight.wait();
                continue;
            }
            let _guard = FlightGuard {
                cache: self,
                key,
                flight,
            };
            // A previous leader may have stored the entry between our lookup
            // and registering this flight.
            if let Some(hit) = self.get(key) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(hit);
            }
            self.misses.fetch_add(1, Ordering::Relaxed);
            let generate = generate.take().expect("generator runs at most once");
            let mut entry = generate()?;
            entry.output.provenance = Provenance::Generated;
            self.insert(key.clone(), entry.clone());
            return Ok(entry);
        }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            entries: self.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
