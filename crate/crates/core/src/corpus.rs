//! Document model, curation heuristics and the append-only document log.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed field `{field}`: {message}")]
    Malformed {
        line: usize,
        field: String,
        message: String,
    },
    #[error("document not found: {0}")]
    NotFound(String),
    #[error("storage failure after {committed} committed documents: {source}")]
    Storage {
        committed: usize,
        #[source]
        source: io::Error,
    },
    #[error("invalid curation policy: {0}")]
    InvalidPolicy(String),
    #[error("corrupt document log at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Author {
    pub family: String,
    #[serde(default)]
    pub given: String,
}

/// One ingestion record, as read from a line of the input file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawRecord {
    pub id: String,
    pub title: Option<String>,
    pub abstract_text: Option<String>,
    pub full_text: Option<String>,
    pub doi: Option<String>,
    pub source: String,
    pub year: Option<i32>,
    pub authors: Vec<Author>,
    pub urls: Vec<String>,
    pub language: Option<String>,
    /// Keys outside the known schema, kept verbatim.
    pub extra: BTreeMap<String, Value>,
}

impl RawRecord {
    /// Parses one JSON object line. `line` is only used to label errors.
    pub fn from_json_line(text: &str, line: usize) -> Result<Self, CorpusError> {
        let malformed = |field: &str, message: String| CorpusError::Malformed {
            line,
            field: field.to_string(),
            message,
        };
        let value: Value = serde_json::from_str(text).map_err(|e| malformed("<record>", e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(malformed("<record>", "expected a JSON object".into()));
        };
        Self::from_map(map).map_err(|(field, message)| malformed(&field, message))
    }

    fn from_map(mut map: Map<String, Value>) -> Result<Self, (String, String)> {
        fn opt_string(map: &mut Map<String, Value>, key: &str) -> Result<Option<String>, (String, String)> {
            match map.remove(key) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::String(s)) => Ok(Some(s)),
                Some(other) => Err((key.to_string(), format!("expected string, found {}", kind(&other)))),
            }
        }

        let id = match opt_string(&mut map, "id")? {
            Some(id) if !id.trim().is_empty() => id.trim().to_string(),
            Some(_) => return Err(("id".into(), "must be non-empty".into())),
            None => return Err(("id".into(), "missing".into())),
        };
        let source = opt_string(&mut map, "source")?.ok_or_else(|| ("source".to_string(), "missing".to_string()))?;
        let title = opt_string(&mut map, "title")?;
        let abstract_text = opt_string(&mut map, "abstract")?;
        let full_text = opt_string(&mut map, "fullText")?;
        let doi = opt_string(&mut map, "doi")?;
        let language = opt_string(&mut map, "language")?;

        let year = match map.remove("year") {
            None | Some(Value::Null) => None,
            Some(Value::Number(n)) => match n.as_i64().and_then(|y| i32::try_from(y).ok()) {
                Some(y) => Some(y),
                None => return Err(("year".into(), format!("not an integer year: {n}"))),
            },
            Some(Value::String(s)) => match s.trim().parse::<i32>() {
                Ok(y) => Some(y),
                Err(_) => return Err(("year".into(), format!("not an integer year: {s:?}"))),
            },
            Some(other) => return Err(("year".into(), format!("expected integer, found {}", kind(&other)))),
        };

        let authors = match map.remove("authors") {
            None | Some(Value::Null) => Vec::new(),
            Some(v @ Value::Array(_)) => {
                serde_json::from_value(v).map_err(|e| ("authors".to_string(), e.to_string()))?
            }
            Some(other) => return Err(("authors".into(), format!("expected array, found {}", kind(&other)))),
        };

        let urls = match map.remove("urls") {
            None | Some(Value::Null) => Vec::new(),
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    other => Err(("urls".to_string(), format!("expected string item, found {}", kind(&other)))),
                })
                .collect::<Result<_, _>>()?,
            Some(other) => return Err(("urls".into(), format!("expected array, found {}", kind(&other)))),
        };

        Ok(Self {
            id,
            title,
            abstract_text,
            full_text,
            doi,
            source,
            year,
            authors,
            urls,
            language,
            extra: map.into_iter().collect(),
        })
    }

    /// Serializes back to the ingestion line format.
    pub fn to_json_line(&self) -> String {
        let mut map = Map::new();
        map.insert("id".into(), Value::String(self.id.clone()));
        let mut put = |k: &str, v: &Option<String>| {
            if let Some(v) = v {
                map.insert(k.into(), Value::String(v.clone()));
            }
        };
        put("title", &self.title);
        put("abstract", &self.abstract_text);
        put("fullText", &self.full_text);
        put("doi", &self.doi);
        put("language", &self.language);
        map.insert("source".into(), Value::String(self.source.clone()));
        if let Some(y) = self.year {
            map.insert("year".into(), Value::from(y));
        }
        if !self.authors.is_empty() {
            map.insert("authors".into(), serde_json::to_value(&self.authors).expect("authors serialize"));
        }
        if !self.urls.is_empty() {
            map.insert("urls".into(), serde_json::to_value(&self.urls).expect("urls serialize"));
        }
        for (k, v) in &self.extra {
            map.entry(k.clone()).or_insert_with(|| v.clone());
        }
        Value::Object(map).to_string()
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// A curated article. Title and abstract are stored whitespace-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doi: Option<String>,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(default)]
    pub authors: Vec<Author>,
    #[serde(default)]
    pub urls: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

impl Document {
    pub fn has_fulltext(&self) -> bool {
        self.full_text.as_deref().is_some_and(|t| !t.is_empty())
    }

    /// Text fed to the embedder: title and abstract on separate lines.
    pub fn embedding_text(&self) -> String {
        format!("{}\n{}", self.title, self.abstract_text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationPolicy {
    pub min_title_chars: usize,
    pub min_abstract_chars: usize,
}

impl Default for CurationPolicy {
    fn default() -> Self {
        Self {
            min_title_chars: 10,
            min_abstract_chars: 200,
        }
    }
}

impl CurationPolicy {
    pub fn new(min_title_chars: usize, min_abstract_chars: usize) -> Result<Self, CorpusError> {
        let policy = Self {
            min_title_chars,
            min_abstract_chars,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_title_chars == 0 || self.min_abstract_chars == 0 {
            return Err(CorpusError::InvalidPolicy("thresholds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MissingTitle,
    ShortTitle,
    MissingAbstract,
    ShortAbstract,
    DuplicateId,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::MissingTitle => "missing_title",
            Self::ShortTitle => "short_title",
            Self::MissingAbstract => "missing_abstract",
            Self::ShortAbstract => "short_abstract",
            Self::DuplicateId => "duplicate_id",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum CurationOutcome {
    Accepted(Document),
    Rejected(RejectReason),
}

/// Collapses internal whitespace runs to one space and trims both ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Checks title and abstract against `policy`. Thresholds are inclusive and
/// measured in characters after whitespace normalization. Duplicate ids are
/// a batch-level concern and are detected by [`CorpusStore::ingest_batch`].
pub fn validate_document(raw: RawRecord, policy: &CurationPolicy) -> CurationOutcome {
    let title = normalize_whitespace(raw.title.as_deref().unwrap_or(""));
    let title_len = title.chars().count();
    if title_len == 0 {
        return CurationOutcome::Rejected(RejectReason::MissingTitle);
    }
    if title_len < policy.min_title_chars {
        return CurationOutcome::Rejected(RejectReason::ShortTitle);
    }
    let abstract_text = normalize_whitespace(raw.abstract_text.as_deref().unwrap_or(""));
    let abstract_len = abstract_text.chars().count();
    if abstract_len == 0 {
        return CurationOutcome::Rejected(RejectReason::MissingAbstract);
    }
    if abstract_len < policy.min_abstract_chars {
        return CurationOutcome::Rejected(RejectReason::ShortAbstract);
    }

    let full_text = raw
        .full_text
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty());
    let doi = raw.doi.map(|d| d.trim().to_string()).filter(|d| !d.is_empty());
    let language = raw.language.map(|l| l.trim().to_string()).filter(|l| !l.is_empty());

    CurationOutcome::Accepted(Document {
        doc_id: raw.id,
        title,
        abstract_text,
        full_text,
        doi,
        source: raw.source,
        year: raw.year,
        authors: raw.authors,
        urls: raw.urls,
        language,
        extra: raw.extra,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub total_seen: usize,
    pub accepted: usize,
    pub rejected_by_reason: BTreeMap<RejectReason, usize>,
    pub pct_with_doi: f64,
    pub pct_with_fulltext: f64,
}

impl IngestReport {
    pub fn rejected(&self) -> usize {
        self.rejected_by_reason.values().sum()
    }
}

#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub report: IngestReport,
    /// Accepted documents in input order, ready for indexing.
    pub accepted: Vec<Document>,
}

/// Reads an ingestion file: one JSON object per non-blank line.
pub fn read_records(path: &Path) -> Result<Vec<RawRecord>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    parse_records(reader)
}

pub fn parse_records(reader: impl BufRead) -> Result<Vec<RawRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(RawRecord::from_json_line(&line, i + 1)?);
    }
    Ok(out)
}

type Snapshot = Arc<HashMap<String, Document>>;

/// Document store: append-only JSON-lines log plus an in-memory id map that
/// is rebuilt from the log on open. One writer at a time; readers work on
/// immutable snapshots and never observe a half-applied batch.
pub struct CorpusStore {
    path: Option<PathBuf>,
    sink: Mutex<Option<Box<dyn Write + Send>>>,
    snapshot: RwLock<Snapshot>,
}

impl fmt::Debug for CorpusStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CorpusStore")
            .field("path", &self.path)
            .field("len", &self.len())
            .finish()
    }
}

impl CorpusStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            sink: Mutex::new(None),
            snapshot: RwLock::new(Arc::default()),
        }
    }

    /// Persists into an arbitrary writer without replaying anything.
    pub fn with_sink(sink: Box<dyn Write + Send>) -> Self {
        Self {
            path: None,
            sink: Mutex::new(Some(sink)),
            snapshot: RwLock::new(Arc::default()),
        }
    }

    /// Opens (or creates) the log at `path` and replays it, last write wins.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref().to_path_buf();
        let mut docs = HashMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let mut offset = 0usize;
            let mut torn_at = None;
            let total_lines = text.split_inclusive('\n').count();
            for (i, line) in text.split_inclusive('\n').enumerate() {
                let start = offset;
                offset += line.len();
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Document>(line) {
                    Ok(doc) => {
                        docs.insert(doc.doc_id.clone(), doc);
                    }
                    // A torn final line is what a crash mid-append leaves behind.
                    Err(e) if i + 1 == total_lines && !line.ends_with('\n') => {
                        tracing::warn!(line = i + 1, error = %e, "truncating torn trailing log line");
                        torn_at = Some(start);
                    }
                    Err(e) => {
                        return Err(CorpusError::CorruptLog {
                            line: i + 1,
                            message: e.to_string(),
                        })
                    }
                }
            }
            if let Some(len) = torn_at {
                OpenOptions::new().write(true).open(&path)?.set_len(len as u64)?;
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path: Some(path),
            sink: Mutex::new(Some(Box::new(file))),
            snapshot: RwLock::new(Arc::new(docs)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn snapshot(&self) -> Snapshot {
        self.snapshot.read().expect("corpus snapshot lock").clone()
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_document(&self, doc_id: &str) -> Result<Document, CorpusError> {
        self.snapshot()
            .get(doc_id)
            .cloned()
            .ok_or_else(|| CorpusError::NotFound(doc_id.to_string()))
    }

    /// All documents sorted by id.
    pub fn documents(&self) -> Vec<Document> {
        let snap = self.snapshot();
        let mut docs: Vec<Document> = snap.values().cloned().collect();
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        docs
    }

    /// Curates and persists a batch. Re-ingesting an id from an earlier batch
    /// overwrites it; a second accepted occurrence within the same batch is
    /// rejected as `duplicate_id`. On a storage failure the documents written
    /// so far remain committed and visible.
    pub fn ingest_batch(
        &self,
        records: impl IntoIterator<Item = RawRecord>,
        policy: &CurationPolicy,
    ) -> Result<IngestOutcome, CorpusError> {
        policy.validate()?;
        let mut sink = self.sink.lock().expect("corpus writer lock");
        let mut next: HashMap<String, Document> = (*self.snapshot()).clone();

        let mut report = IngestReport::default();
        let mut accepted = Vec::new();
        let mut seen = HashSet::new();

        for raw in records {
            report.total_seen += 1;
            let doc = match validate_document(raw, policy) {
                CurationOutcome::Rejected(reason) => {
                    *report.rejected_by_reason.entry(reason).or_default() += 1;
                    continue;
                }
                CurationOutcome::Accepted(doc) => doc,
            };
            if !seen.insert(doc.doc_id.clone()) {
                *report.rejected_by_reason.entry(RejectReason::DuplicateId).or_default() += 1;
                continue;
            }
            if let Some(w) = sink.as_mut() {
                let mut line = serde_json::to_string(&doc).expect("document serializes");
                line.push('\n');
                if let Err(source) = w.write_all(line.as_bytes()).and_then(|_| w.flush()) {
                    let committed = accepted.len();
                    *self.snapshot.write().expect("corpus snapshot lock") = Arc::new(next);
                    return Err(CorpusError::Storage { committed, source });
                }
            }
            next.insert(doc.doc_id.clone(), doc.clone());
            accepted.push(doc);
        }

        report.accepted = accepted.len();
        if !accepted.is_empty() {
            let n = accepted.len() as f64;
            report.pct_with_doi = accepted.iter().filter(|d| d.doi.is_some()).count() as f64 / n;
            report.pct_with_fulltext = accepted.iter().filter(|d| d.has_fulltext()).count() as f64 / n;
        }
        *self.snapshot.write().expect("corpus snapshot lock") = Arc::new(next);
        Ok(IngestOutcome { report, accepted })
    }
}
