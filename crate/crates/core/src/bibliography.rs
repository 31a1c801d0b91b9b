//! Saved-reference collections.
//!
//! Items use the CSL item schema. Known fields are typed; anything else is
//! kept verbatim in `extra` so citation-json round trips are lossless. BibTeX
//! export covers the mapped fields only.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::corpus::Document;

#[derive(Debug, Error)]
pub enum BibliographyError {
    #[error("collection `{0}` not found")]
    NotFound(String),
    #[error("unsupported export format `{0}` (expected citation-json or bibtex)")]
    UnsupportedFormat(String),
    #[error("{}", match .index {
        Some(i) => format!("item {i}: {message}"),
        None => format!("payload: {message}"),
    })]
    Parse { index: Option<usize>, message: String },
    #[error("invalid collection: {0}")]
    Invalid(String),
    #[error("collection storage: {0}")]
    Io(#[from] std::io::Error),
}

impl BibliographyError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::NotFound(_) => "not_found",
            Self::UnsupportedFormat(_) => "unsupported_format",
            Self::Parse { .. } => "parse_error",
            Self::Invalid(_) => "validation_error",
            Self::Io(_) => "storage_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CslName {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub given: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatePart {
    Int(i64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CslDate {
    #[serde(rename = "date-parts", default, skip_serializing_if = "Option::is_none")]
    pub date_parts: Option<Vec<Vec<DatePart>>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CslDate {
    pub fn year(year: i32) -> Self {
        Self {
            date_parts: Some(vec![vec![DatePart::Int(year as i64)]]),
            extra: Map::new(),
        }
    }

    fn first_year(&self) -> Option<String> {
        match self.date_parts.as_ref()?.first()?.first()? {
            DatePart::Int(y) => Some(y.to_string()),
            DatePart::Text(y) => Some(y.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitationItem {
    pub id: String,
    #[serde(rename = "type")]
    pub item_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author: Option<Vec<CslName>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issued: Option<CslDate>,
    #[serde(rename = "DOI", default, skip_serializing_if = "Option::is_none")]
    pub doi: Option<String>,
    #[serde(rename = "URL", default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(rename = "container-title", default, skip_serializing_if = "Option::is_none")]
    pub container_title: Option<String>,
    #[serde(rename = "abstract", default, skip_serializing_if = "Option::is_none")]
    pub abstract_text: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CitationItem {
    pub fn new(id: &str, item_type: &str) -> Self {
        Self {
            id: id.to_string(),
            item_type: item_type.to_string(),
            title: None,
            author: None,
            issued: None,
            doi: None,
            url: None,
            container_title: None,
            abstract_text: None,
            extra: Map::new(),
        }
    }

    /// Maps a corpus document: doc_id → id, year → issued `[[year]]`, first
    /// URL → URL.
    pub fn from_document(doc: &Document) -> Self {
        let authors: Vec<CslName> = doc
            .authors
            .iter()
            .map(|a| CslName {
                family: Some(a.family.clone()).filter(|s| !s.is_empty()),
                given: Some(a.given.clone()).filter(|s| !s.is_empty()),
                extra: Map::new(),
            })
            .collect();
        Self {
            title: Some(doc.title.clone()),
            author: (!authors.is_empty()).then_some(authors),
            issued: doc.year.map(CslDate::year),
            doi: doc.doi.clone(),
            url: doc.urls.first().cloned(),
            abstract_text: Some(doc.abstract_text.clone()),
            ..Self::new(&doc.doc_id, "article-journal")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    CitationJson,
    Bibtex,
}

impl FromStr for ExportFormat {
    type Err = BibliographyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "citation-json" | "csl-json" => Ok(Self::CitationJson),
            "bibtex" => Ok(Self::Bibtex),
            other => Err(BibliographyError::UnsupportedFormat(other.to_string())),
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CitationJson => "citation-json",
            Self::Bibtex => "bibtex",
        })
    }
}

impl ExportFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            Self::CitationJson => "application/vnd.citationstyles.csl+json",
            Self::Bibtex => "application/x-bibtex; charset=utf-8",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collection {
    pub collection_id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_token: Option<String>,
    pub items: Vec<CitationItem>,
    pub created: DateTime<Utc>,
    pub updated: DateTime<Utc>,
}

impl Collection {
    pub fn contains(&self, item_id: &str) -> bool {
        self.items.iter().any(|i| i.id == item_id)
    }
}

/// What [`BibliographyStore::add_item`] accepts.
#[derive(Debug, Clone)]
pub enum NewItem {
    Document(Document),
    Item(CitationItem),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportOutcome {
    pub collection: Collection,
    pub imported: usize,
    pub skipped_count: usize,
}

/// Parses a citation-json payload: a list of items with non-empty ids.
pub fn parse_citation_json(payload: &[u8]) -> Result<Vec<CitationItem>, BibliographyError> {
    let value: Value = serde_json::from_slice(payload).map_err(|e| BibliographyError::Parse {
        index: None,
        message: e.to_string(),
    })?;
    let Value::Array(values) = value else {
        return Err(BibliographyError::Parse {
            index: None,
            message: "expected a list of citation items".into(),
        });
    };
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let item: CitationItem = serde_json::from_value(v).map_err(|e| BibliographyError::Parse {
                index: Some(i),
                message: e.to_string(),
            })?;
            if item.id.trim().is_empty() {
                return Err(BibliographyError::Parse {
                    index: Some(i),
                    message: "id is empty".into(),
                });
            }
            Ok(item)
        })
        .collect()
}

pub fn export_items(items: &[CitationItem], format: ExportFormat) -> Vec<u8> {
    match format {
        ExportFormat::CitationJson => serde_json::to_vec_pretty(items).expect("items serialize"),
        ExportFormat::Bibtex => to_bibtex(items).into_bytes(),
    }
}

fn bibtex_type(csl_type: &str) -> &'static str {
    match csl_type {
        "book" => "book",
        "chapter" => "incollection",
        "paper-conference" => "inproceedings",
        "thesis" => "phdthesis",
        "report" => "techreport",
        "webpage" | "post" | "post-weblog" | "dataset" | "software" => "misc",
        _ => "article",
    }
}

fn bibtex_key(id: &str, n: usize) -> String {
    let key: String = id
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | ':' | '.' | '/'))
        .collect();
    if key.is_empty() {
        format!("item{}", n + 1)
    } else {
        key
    }
}

/// Braced field value; unbalanced braces are dropped so the entry stays parseable.
fn bibtex_value(s: &str) -> String {
    let mut depth = 0i64;
    let balanced = s.chars().all(|c| {
        match c {
            '{' => depth += 1,
            '}' => depth -= 1,
            _ => {}
        }
        depth >= 0
    }) && depth == 0;
    let s = s.replace(['\n', '\r'], " ");
    if balanced {
        s
    } else {
        s.replace(['{', '}'], "")
    }
}

fn bibtex_name(n: &CslName) -> Option<String> {
    match (&n.family, &n.given) {
        (Some(f), Some(g)) => Some(format!("{f}, {g}")),
        (Some(f), None) => Some(f.clone()),
        (None, Some(g)) => Some(g.clone()),
        (None, None) => n.extra.get("literal").and_then(Value::as_str).map(|l| format!("{{{l}}}")),
    }
}

pub fn to_bibtex(items: &[CitationItem]) -> String {
    let mut out = String::new();
    for (n, item) in items.iter().enumerate() {
        let entry_type = bibtex_type(&item.item_type);
        let mut fields: Vec<(&str, String)> = Vec::new();
        if let Some(t) = &item.title {
            fields.push(("title", t.clone()));
        }
        if let Some(authors) = &item.author {
            let names: Vec<String> = authors.iter().filter_map(bibtex_name).collect();
            if !names.is_empty() {
                fields.push(("author", names.join(" and ")));
            }
        }
        if let Some(y) = item.issued.as_ref().and_then(CslDate::first_year) {
            fields.push(("year", y));
        }
        if let Some(c) = &item.container_title {
            let name = if matches!(entry_type, "inproceedings" | "incollection") {
                "booktitle"
            } else {
                "journal"
            };
            fields.push((name, c.clone()));
        }
        if let Some(d) = &item.doi {
            fields.push(("doi", d.clone()));
        }
        if let Some(u) = &item.url {
            fields.push(("url", u.clone()));
        }
        if let Some(a) = &item.abstract_text {
            fields.push(("abstract", a.clone()));
        }
        out.push_str(&format!("@{entry_type}{{{},\n", bibtex_key(&item.id, n)));
        for (name, value) in fields {
            out.push_str(&format!("  {name} = {{{}}},\n", bibtex_value(&value)));
        }
        out.push_str("}\n\n");
    }
    out
}

/// Collections held in memory, optionally persisted one JSON file per
/// collection. Operations on one collection are serialized by its own lock.
pub struct BibliographyStore {
    dir: Option<PathBuf>,
    collections: RwLock<HashMap<String, Arc<Mutex<Collection>>>>,
}

impl fmt::Debug for BibliographyStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BibliographyStore")
            .field("dir", &self.dir)
            .field("collections", &self.len())
            .finish()
    }
}

impl BibliographyStore {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            collections: RwLock::new(HashMap::new()),
        }
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self, BibliographyError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut map = HashMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "json") {
                continue;
            }
            let bytes = std::fs::read(&path)?;
            let c: Collection = serde_json::from_slice(&bytes)
                .map_err(|e| BibliographyError::Invalid(format!("{}: {e}", path.display())))?;
            map.insert(c.collection_id.clone(), Arc::new(Mutex::new(c)));
        }
        Ok(Self {
            dir: Some(dir),
            collections: RwLock::new(map),
        })
    }

    pub fn len(&self) -> usize {
        self.collections.read().expect("collections lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn persist(&self, c: &Collection) -> Result<(), BibliographyError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(format!("{}.json", c.collection_id));
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(c).expect("collection serializes"))?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    fn handle(&self, id: &str) -> Result<Arc<Mutex<Collection>>, BibliographyError> {
        self.collections
            .read()
            .expect("collections lock")
            .get(id)
            .cloned()
            .ok_or_else(|| BibliographyError::NotFound(id.to_string()))
    }

    /// Applies `f` under the collection lock; the change is persisted before
    /// it becomes visible, and discarded if persisting fails.
    fn update<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Collection) -> Result<T, BibliographyError>,
    ) -> Result<(Collection, T), BibliographyError> {
        let handle = self.handle(id)?;
        let mut guard = handle.lock().expect("collection lock");
        let mut next = guard.clone();
        let out = f(&mut next)?;
        if next != *guard {
            next.updated = Utc::now();
            self.persist(&next)?;
            *guard = next;
        }
        Ok((guard.clone(), out))
    }

    pub fn create(&self, name: &str, session_token: Option<&str>) -> Result<Collection, BibliographyError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(BibliographyError::Invalid("collection name is empty".into()));
        }
        let now = Utc::now();
        let c = Collection {
            collection_id: uuid::Uuid::new_v4().to_string(),
            name: name.to_string(),
            session_token: session_token.map(str::to_string),
            items: Vec::new(),
            created: now,
            updated: now,
        };
        self.persist(&c)?;
        self.collections
            .write()
            .expect("collections lock")
            .insert(c.collection_id.clone(), Arc::new(Mutex::new(c.clone())));
        Ok(c)
    }

    pub fn get(&self, id: &str) -> Result<Collection, BibliographyError> {
        Ok(self.handle(id)?.lock().expect("collection lock").clone())
    }

    /// Collections belonging to a session, oldest first.
    pub fn list_for_session(&self, session_token: &str) -> Vec<Collection> {
        let handles: Vec<_> = self.collections.read().expect("collections lock").values().cloned().collect();
        let mut out: Vec<Collection> = handles
            .iter()
            .map(|h| h.lock().expect("collection lock").clone())
            .filter(|c| c.session_token.as_deref() == Some(session_token))
            .collect();
        out.sort_by(|a, b| (a.created, &a.collection_id).cmp(&(b.created, &b.collection_id)));
        out
    }

    /// Appends an item; an id already present leaves the collection unchanged.
    pub fn add_item(&self, id: &str, item: NewItem) -> Result<Collection, BibliographyError> {
        let item = match item {
            NewItem::Document(d) => CitationItem::from_document(&d),
            NewItem::Item(i) => i,
        };
        if item.id.trim().is_empty() {
            return Err(BibliographyError::Invalid("item id is empty".into()));
        }
        self.update(id, |c| {
            if !c.contains(&item.id) {
                c.items.push(item);
            }
            Ok(())
        })
        .map(|(c, _)| c)
    }

    pub fn remove_item(&self, id: &str, item_id: &str) -> Result<Collection, BibliographyError> {
        self.update(id, |c| {
            c.items.retain(|i| i.id != item_id);
            Ok(())
        })
        .map(|(c, _)| c)
    }

    pub fn export(&self, id: &str, format: ExportFormat) -> Result<Vec<u8>, BibliographyError> {
        Ok(export_items(&self.get(id)?.items, format))
    }

    /// Appends the items of a citation-json payload in order, skipping ids
    /// already present (including repeats within the payload). A malformed
    /// payload changes nothing.
    pub fn import_items(&self, id: &str, payload: &[u8]) -> Result<ImportOutcome, BibliographyError> {
        let items = parse_citation_json(payload)?;
        let (collection, (imported, skipped_count)) = self.update(id, |c| {
            let mut seen: HashSet<String> = c.items.iter().map(|i| i.id.clone()).collect();
            let (mut imported, mut skipped) = (0, 0);
            for item in items {
                if seen.insert(item.id.clone()) {
                    c.items.push(item);
                    imported += 1;
                } else {
                    skipped += 1;
                }
            }
            Ok((imported, skipped))
        })?;
        Ok(ImportOutcome {
            collection,
            imported,
            skipped_count,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Author;

    fn doc() -> Document {
        Document {
            doc_id: "d1".into(),
            title: "Autonomous vehicles".into(),
            abstract_text: "An abstract.".into(),
            full_text: None,
            doi: Some("10.1/x".into()),
            source: "CORE".into(),
            year: Some(2021),
            authors: vec![Author {
                family: "Doe".into(),
                given: "Jane".into(),
            }],
            urls: vec!["https://example.org/d1".into()],
            language: None,
            extra: Default::default(),
        }
    }

    #[test]
    fn document_mapping() {
        let item = CitationItem::from_document(&doc());
        assert_eq!(item.id, "d1");
        assert_eq!(item.title.as_deref(), Some("Autonomous vehicles"));
        let v = serde_json::to_value(&item).unwrap();
        assert_eq!(v["issued"]["date-parts"], serde_json::json!([[2021]]));
        assert_eq!(v["DOI"], "10.1/x");
        assert_eq!(v["author"][0]["family"], "Doe");
    }

    #[test]
    fn unknown_fields_survive() {
        let raw = br#"[{"id":"a","type":"book","publisher":"X","issued":{"date-parts":[["2020","5"]],"circa":true},"author":[{"literal":"ACME"}]}]"#;
        let items = parse_citation_json(raw).unwrap();
        assert_eq!(items[0].extra["publisher"], "X");
        let again = parse_citation_json(&export_items(&items, ExportFormat::CitationJson)).unwrap();
        assert_eq!(again, items);
    }

    #[test]
    fn parse_errors_name_item() {
        let err = parse_citation_json(br#"[{"id":"a","type":"book"},{"type":"book"}]"#).unwrap_err();
        assert!(matches!(err, BibliographyError::Parse { index: Some(1), .. }), "{err}");
        let err = parse_citation_json(br#"{"id":"a"}"#).unwrap_err();
        assert!(matches!(err, BibliographyError::Parse { index: None, .. }));
        let err = parse_citation_json(br#"[{"id":" ","type":"book"}]"#).unwrap_err();
        assert!(matches!(err, BibliographyError::Parse { index: Some(0), .. }));
    }

    #[test]
    fn bibtex_mapping() {
        let mut item = CitationItem::from_document(&doc());
        item.container_title = Some("Journal {of Things".into());
        let bib = to_bibtex(&[item]);
        assert!(bib.starts_with("@article{d1,\n"), "{bib}");
        assert!(bib.contains("  doi = {10.1/x},\n"));
        assert!(bib.contains("  author = {Doe, Jane},\n"));
        assert!(bib.contains("  year = {2021},\n"));
        assert!(bib.contains("  journal = {Journal of Things},\n"));
        let chapter = to_bibtex(&[CitationItem {
            container_title: Some("Book".into()),
            ..CitationItem::new("c", "chapter")
        }]);
        assert!(chapter.contains("@incollection{c,") && chapter.contains("booktitle = {Book}"));
    }

    #[test]
    fn formats() {
        assert_eq!("bibtex".parse::<ExportFormat>().unwrap(), ExportFormat::Bibtex);
        assert_eq!("citation-json".parse::<ExportFormat>().unwrap(), ExportFormat::CitationJson);
        let err = "ris".parse::<ExportFormat>().unwrap_err();
        assert_eq!(err.code(), "unsupported_format");
    }

    #[test]
    fn store_operations() {
        let store = BibliographyStore::in_memory();
        let c = store.create("Reading list", Some("tok")).unwrap();
        assert_eq!(store.export(&c.collection_id, ExportFormat::CitationJson).unwrap(), b"[]");
        let after = store.add_item(&c.collection_id, NewItem::Document(doc())).unwrap();
        assert_eq!(after.items.len(), 1);
        let again = store.add_item(&c.collection_id, NewItem::Document(doc())).unwrap();
        assert_eq!(again, after);
        assert!(matches!(store.get("nope"), Err(BibliographyError::NotFound(_))));
        assert_eq!(store.list_for_session("tok").len(), 1);
        assert!(store.list_for_session("other").is_empty());
        let removed = store.remove_item(&c.collection_id, "d1").unwrap();
        assert!(removed.items.is_empty());
    }

    #[test]
    fn persisted_collections_reload() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let store = BibliographyStore::open(dir.path()).unwrap();
            let c = store.create("A", None).unwrap();
            store.add_item(&c.collection_id, NewItem::Document(doc())).unwrap();
            c.collection_id
        };
        let store = BibliographyStore::open(dir.path()).unwrap();
        assert_eq!(store.get(&id).unwrap().items[0].id, "d1");
    }
}
