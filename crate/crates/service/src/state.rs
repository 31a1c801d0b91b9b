use std::collections::{HashMap, HashSet, VecDeque};
use std::net::IpAddr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::Context;
use ask_core::bibliography::BibliographyStore;
use ask_core::embedding::build_embedder;
use ask_core::feedback::FeedbackLog;
use ask_core::ragchain::{default_templates, CellCache, ModelProvider, RemoteModel, StubModel};
use ask_core::{CorpusStore, Engine, VectorIndex};

use crate::config::Config;

/// Remembers the most recent question ids handed out by the search endpoint.
#[derive(Debug)]
pub struct IssuedIds {
    capacity: usize,
    inner: Mutex<(HashSet<String>, VecDeque<String>)>,
}

impl IssuedIds {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            inner: Mutex::new((HashSet::new(), VecDeque::new())),
        }
    }

    pub fn insert(&self, id: &str) {
        let mut guard = self.inner.lock().expect("issued ids lock");
        let (set, order) = &mut *guard;
        if set.insert(id.to_string()) {
            order.push_back(id.to_string());
            if order.len() > self.capacity {
                if let Some(old) = order.pop_front() {
                    set.remove(&old);
                }
            }
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.inner.lock().expect("issued ids lock").0.contains(id)
    }
}

/// Fixed one-minute window request cap per client address.
#[derive(Debug)]
pub struct RateLimiter {
    limit: u32,
    window: Duration,
    counts: Mutex<HashMap<IpAddr, (Instant, u32)>>,
}

impl RateLimiter {
    pub fn per_minute(limit: u32) -> Self {
        Self::new(limit, Duration::from_secs(60))
    }

    pub fn new(limit: u32, window: Duration) -> Self {
        Self {
            limit,
            window,
            counts: Mutex::new(HashMap::new()),
        }
    }

    /// Counts one request; false once the address is over its cap.
    pub fn check(&self, ip: IpAddr) -> bool {
        let now = Instant::now();
        let mut counts = self.counts.lock().expect("rate limiter lock");
        if counts.len() > 10_000 {
            let window = self.window;
            counts.retain(|_, (start, _)| now.duration_since(*start) < window);
        }
        let entry = counts.entry(ip).or_insert((now, 0));
        if now.duration_since(entry.0) >= self.window {
            *entry = (now, 0);
        }
        entry.1 += 1;
        entry.1 <= self.limit
    }
}

pub struct AppState {
    pub config: Config,
    pub engine: Engine,
    pub bibliography: BibliographyStore,
    pub feedback: FeedbackLog,
    pub issued: IssuedIds,
    pub limiter: RateLimiter,
}

pub type SharedState = Arc<AppState>;

const ISSUED_CAPACITY: usize = 100_000;

impl AppState {
    /// Opens every store under the data directory. The index is rebuilt from
    /// the corpus when it is missing or does not match it.
    pub fn open(config: Config) -> anyhow::Result<Self> {
        Self::open_with_model(config, None)
    }

    /// Like [`AppState::open`], with an explicit model instead of the one the
    /// configuration names.
    pub fn open_with_model(config: Config, model: Option<Arc<dyn ModelProvider>>) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&config.data_dir)
            .with_context(|| format!("creating data dir {}", config.data_dir.display()))?;
        let corpus = CorpusStore::open(config.corpus_path()).context("opening corpus")?;
        let embedder = build_embedder(config.embedder.clone()).context("building embedder")?;
        let model = match model {
            Some(m) => m,
            None => match &config.llm_endpoint {
                Some(url) => Arc::new(RemoteModel::new(url.clone()).map_err(|e| anyhow::anyhow!("{}", e.message))?)
                    as Arc<dyn ModelProvider>,
                None => Arc::new(StubModel::new()),
            },
        };

        let index_path = config.index_path();
        let mut rebuild = true;
        let index = if index_path.exists() {
            match VectorIndex::load(&index_path) {
                Ok(index) if index.dimension() == embedder.dimension() => {
                    rebuild = index.len() != corpus.len();
                    index
                }
                Ok(_) => VectorIndex::new(embedder.dimension()),
                Err(e) => {
                    tracing::warn!(error = %e, "index file unreadable, rebuilding");
                    VectorIndex::new(embedder.dimension())
                }
            }
        } else {
            VectorIndex::new(embedder.dimension())
        };
        rebuild &= !corpus.is_empty();

        let cache = CellCache::open(&config.cache_dir, config.cache_max_entries).context("opening cell cache")?;
        let mut templates = default_templates();
        let templates_dir = config.templates_dir();
        if templates_dir.is_dir() {
            templates.load_dir(&templates_dir).context("loading templates")?;
        }
        let engine = Engine::new(corpus, index, embedder, model, cache, templates, config.params.clone())?
            .with_parallelism(config.parallelism);
        if rebuild {
            let report = engine.reindex()?;
            tracing::info!(indexed = report.indexed, "index rebuilt from corpus");
            engine.index().save(&index_path).context("saving index")?;
        }

        Ok(Self {
            bibliography: BibliographyStore::open(config.collections_dir()).context("opening collections")?,
            feedback: FeedbackLog::open(config.feedback_path()).context("opening feedback log")?,
            issued: IssuedIds::new(ISSUED_CAPACITY),
            limiter: RateLimiter::per_minute(config.rate_limit),
            engine,
            config,
        })
    }

    pub fn save_index(&self) -> anyhow::Result<()> {
        self.engine
            .index()
            .save(&self.config.index_path())
            .context("saving index")
    }
}
