//! Service configuration. Precedence: command-line flags, then environment
//! variables (both handled by clap), then the TOML config file, then defaults.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use ask_core::embedding::{EmbedderConfig, EmbeddingProvider};
use ask_core::ragchain::GenerationParams;
use serde::Deserialize;
use thiserror::Error;

pub const DEFAULT_BIND_ADDR: &str = "127.0.0.1:8080";
pub const DEFAULT_DATA_DIR: &str = "ask-data";
pub const DEFAULT_RATE_LIMIT: u32 = 600;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config file {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing config file {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, clap::Args)]
pub struct ConfigArgs {
    /// TOML config file.
    #[arg(long, env = "ASK_CONFIG", global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "ASK_DATA_DIR", global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, env = "ASK_BIND_ADDR", global = true)]
    pub bind_addr: Option<SocketAddr>,
    /// Inference server URL; without it the offline stub model answers.
    #[arg(long, env = "LLM_ENDPOINT", global = true)]
    pub llm_endpoint: Option<String>,
    #[arg(long, env = "LLM_MODEL_ID", global = true)]
    pub llm_model_id: Option<String>,
    #[arg(long, env = "CACHE_DIR", global = true)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, env = "CACHE_MAX_ENTRIES", global = true)]
    pub cache_max_entries: Option<usize>,
    /// `local_hash` or `remote`.
    #[arg(long, env = "EMBED_PROVIDER", global = true)]
    pub embed_provider: Option<String>,
    #[arg(long, env = "EMBED_DIM", global = true)]
    pub embed_dim: Option<usize>,
    #[arg(long, env = "EMBED_ENDPOINT", global = true)]
    pub embed_endpoint: Option<String>,
    #[arg(long, env = "EMBED_MODEL_ID", global = true)]
    pub embed_model_id: Option<String>,
    /// Requests per client IP per minute.
    #[arg(long, env = "ASK_RATE_LIMIT", global = true)]
    pub rate_limit: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub bind_addr: Option<SocketAddr>,
    pub llm_endpoint: Option<String>,
    pub llm_model_id: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub cache_max_entries: Option<usize>,
    pub embed_provider: Option<String>,
    pub embed_dim: Option<usize>,
    pub embed_endpoint: Option<String>,
    pub embed_model_id: Option<String>,
    pub rate_limit: Option<u32>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    pub max_new_tokens: Option<u32>,
    pub parallelism: Option<usize>,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data_dir: PathBuf,
    pub bind_addr: SocketAddr,
    pub llm_endpoint: Option<String>,
    pub params: GenerationParams,
    pub cache_dir: PathBuf,
    pub cache_max_entries: usize,
    pub embedder: EmbedderConfig,
    pub rate_limit: u32,
    pub parallelism: usize,
}

impl Config {
    /// Reads the config file named by `args` (if any) and layers `args` on top.
    pub fn resolve(args: &ConfigArgs) -> Result<Self, ConfigError> {
        let file = match &args.config {
            Some(path) => FileConfig::read(path)?,
            None => FileConfig::default(),
        };
        Self::from_layers(args, &file)
    }

    pub fn from_layers(args: &ConfigArgs, file: &FileConfig) -> Result<Self, ConfigError> {
        let data_dir = args
            .data_dir
            .clone()
            .or_else(|| file.data_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        let bind_addr = args
            .bind_addr
            .or(file.bind_addr)
            .unwrap_or_else(|| DEFAULT_BIND_ADDR.parse().expect("default address parses"));

        let defaults = GenerationParams::default();
        let params = GenerationParams {
            model_id: args
                .llm_model_id
                .clone()
                .or_else(|| file.llm_model_id.clone())
                .unwrap_or(defaults.model_id),
            temperature: file.temperature.unwrap_or(defaults.temperature),
            seed: file.seed.unwrap_or(defaults.seed),
            max_new_tokens: file.max_new_tokens.unwrap_or(defaults.max_new_tokens),
            context_window_tokens: defaults.context_window_tokens,
        };
        params.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let mut embedder = EmbedderConfig::default();
        if let Some(dim) = args.embed_dim.or(file.embed_dim) {
            embedder.dimension = dim;
        }
        if let Some(model) = args.embed_model_id.clone().or_else(|| file.embed_model_id.clone()) {
            embedder.model_id = model;
        }
        let endpoint = args.embed_endpoint.clone().or_else(|| file.embed_endpoint.clone());
        let provider = args.embed_provider.clone().or_else(|| file.embed_provider.clone());
        embedder.provider = match provider.as_deref().map(str::trim) {
            None | Some("local_hash") => EmbeddingProvider::LocalHash,
            Some("remote") => EmbeddingProvider::Remote {
                endpoint: endpoint
                    .ok_or_else(|| ConfigError::Invalid("remote embedding provider needs an endpoint".into()))?,
            },
            Some(other) => return Err(ConfigError::Invalid(format!("unknown embedding provider {other:?}"))),
        };
        embedder.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

        let cache_dir = args
            .cache_dir
            .clone()
            .or_else(|| file.cache_dir.clone())
            .unwrap_or_else(|| data_dir.join("cache"));
        let rate_limit = args.rate_limit.or(file.rate_limit).unwrap_or(DEFAULT_RATE_LIMIT);
        if rate_limit == 0 {
            return Err(ConfigError::Invalid("rate limit must be at least 1".into()));
        }
        Ok(Self {
            llm_endpoint: args.llm_endpoint.clone().or_else(|| file.llm_endpoint.clone()),
            cache_max_entries: args
                .cache_max_entries
                .or(file.cache_max_entries)
                .unwrap_or(ask_core::ragchain::cache::DEFAULT_MAX_ENTRIES),
            parallelism: file.parallelism.unwrap_or(ask_core::pipeline::DEFAULT_PARALLELISM).max(1),
            data_dir,
            bind_addr,
            params,
            cache_dir,
            embedder,
            rate_limit,
        })
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.data_dir.join("corpus.jsonl")
    }

    pub fn index_path(&self) -> PathBuf {
        self.data_dir.join("index.askv")
    }

    pub fn collections_dir(&self) -> PathBuf {
        self.data_dir.join("collections")
    }

    pub fn feedback_path(&self) -> PathBuf {
        self.data_dir.join("feedback.jsonl")
    }

    pub fn templates_dir(&self) -> PathBuf {
        self.data_dir.join("templates")
    }
}
